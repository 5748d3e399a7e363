"""
Policy quality against the planted ground truth, plus the linear-probe oracle
that checks the synthetic task is learnable only through the glyph.
"""

import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from data_generator import SynthDataset, SynthVideo, glyph_free_copy
from error_handler import ShapeError, ValidationError
from frame_sampler import central_clip_indices, random_indices, uniform_indices
from patch_engine import PatchSpec, center_specs, deformable_crop, random_specs

logger = logging.getLogger(__name__)


def rect_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of (..., 4) rectangles given as (cx, cy, h, w)"""
    ax0, ax1 = a[..., 0] - a[..., 3] / 2, a[..., 0] + a[..., 3] / 2
    ay0, ay1 = a[..., 1] - a[..., 2] / 2, a[..., 1] + a[..., 2] / 2
    bx0, bx1 = b[..., 0] - b[..., 3] / 2, b[..., 0] + b[..., 3] / 2
    by0, by1 = b[..., 1] - b[..., 2] / 2, b[..., 1] + b[..., 2] / 2
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def policy_frame(specs: np.ndarray, selected: np.ndarray, videos: Sequence[SynthVideo]) -> pd.DataFrame:
    """One row per (video, step): informative flag, centre error and IoU against the truth"""
    specs = np.asarray(specs, dtype=np.float64)
    selected = np.asarray(selected, dtype=np.int64)
    if specs.ndim != 3 or specs.shape[2] != 4 or specs.shape[:2] != selected.shape:
        raise ShapeError('policy_quality', specs.shape, selected.shape)
    if len(videos) != selected.shape[0]:
        raise ValidationError(f"{selected.shape[0]} predictions for {len(videos)} videos")
    rows = []
    for v, video in enumerate(videos):
        for step, frame in enumerate(selected[v]):
            informative = bool(video.informative_mask[frame])
            row = {'video': v, 'step': step, 'frame': int(frame), 'informative': informative,
                   'center_error': np.nan, 'iou': np.nan}
            if informative:
                truth = video.truth_track[frame].astype(np.float64)
                row['center_error'] = float(np.hypot(*(specs[v, step, :2] - truth[:2])))
                row['iou'] = float(rect_iou(specs[v, step], truth))
            rows.append(row)
    return pd.DataFrame(rows)


def policy_quality(specs: np.ndarray, selected: np.ndarray, videos: Sequence[SynthVideo]) -> Dict[str, float]:
    """
    Mean centre error and IoU over selected frames that are informative, and
    recall: the fraction of selected frames that are informative.
    """
    frame = policy_frame(specs, selected, videos)
    hits = frame[frame['informative']]
    return {
        'center_error': float(hits['center_error'].mean()) if len(hits) else float('nan'),
        'iou': float(hits['iou'].mean()) if len(hits) else 0.0,
        'recall': float(frame['informative'].mean()),
    }


def random_policy(rng: np.random.Generator, n: int, T0: int, T_L: int, H: int, W: int,
                  P: int) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform random frames and uniform random fixed-size crops"""
    selected = np.stack([np.sort(random_indices(rng, T0, T_L).indices) for _ in range(n)])
    specs = random_specs(rng, n * T_L, H, W, P, P).reshape(n, T_L, 4)
    return specs, selected


def center_policy(n: int, T0: int, T_L: int, H: int, W: int, P: int,
                  frames: str = 'uniform') -> Tuple[np.ndarray, np.ndarray]:
    """Centre crops on uniformly spaced or central-clip frames"""
    if frames == 'uniform':
        picked = uniform_indices(T0, T_L)
    elif frames == 'central':
        picked = np.asarray(central_clip_indices(T0, T_L).indices)
    else:
        raise ValidationError(f"unknown frame baseline '{frames}'")
    selected = np.tile(picked, (n, 1))
    return center_specs(n * T_L, H, W, P).reshape(n, T_L, 4), selected


def compare_policies(results: Dict[str, Dict[str, float]]) -> pd.DataFrame:
    """policy name -> metrics, as a table sorted by recall"""
    table = pd.DataFrame.from_dict(results, orient='index')
    table.index.name = 'policy'
    return table.sort_values('recall', ascending=False)


# linear-probe oracle ---------------------------------------------------------

def glyph_window_features(dataset: SynthDataset, size: int = 10, glyph_free: bool = False,
                          seed: int = 0) -> np.ndarray:
    """
    (N, C*size*size) features: the truth window of each video's first
    informative frame resampled to size x size, so the glyph covers the input.
    With glyph_free the glyph region is replaced by background noise first.
    """
    rng = np.random.default_rng(seed)
    features = []
    for video in dataset.videos:
        if glyph_free:
            video = glyph_free_copy(video, rng, dataset.config.noise_std)
        t = int(np.flatnonzero(video.informative_mask)[0])
        spec = PatchSpec.from_array(video.truth_track[t])
        patch, _ = deformable_crop(video.frames[t], spec, size)
        features.append(patch.ravel())
    return np.stack(features)


def linear_probe_accuracy(features: np.ndarray, labels: np.ndarray, num_classes: int,
                          train_fraction: float = 0.5, ridge: float = 1e-2) -> float:
    """Ridge regression onto one-hot labels; accuracy on the held-out tail"""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    split = int(n * train_fraction)
    if split < 1 or split >= n:
        raise ValidationError(f"train fraction {train_fraction} leaves an empty split for {n} videos")
    x = np.hstack([features, np.ones((n, 1))])
    targets = np.eye(num_classes)[labels]
    xt, yt = x[:split], targets[:split]
    weights = np.linalg.solve(xt.T @ xt + ridge * np.eye(x.shape[1]), xt.T @ yt)
    predicted = (x[split:] @ weights).argmax(axis=1)
    accuracy = float(np.mean(predicted == labels[split:]))
    logger.debug(f"linear probe on {features.shape[1]} features: {accuracy:.3f}")
    return accuracy


def probe_report(dataset: SynthDataset, size: int = 10, seed: Optional[int] = None) -> Dict[str, float]:
    seed = dataset.config.seed if seed is None else seed
    labels = dataset.labels
    k = dataset.config.num_classes
    return {
        'glyph_probe_accuracy': linear_probe_accuracy(glyph_window_features(dataset, size), labels, k),
        'glyph_free_probe_accuracy': linear_probe_accuracy(
            glyph_window_features(dataset, size, glyph_free=True, seed=seed), labels, k),
        'chance': 1.0 / k,
    }

"""
Seeded experiment runs on the planted-glyph task.

    end-to-end   accuracy and policy quality of a trained model against the random policy
    ablations    each training technique switched off in turn, paired with the full model by seed
    regularizer  patch area learned with and without the size penalty

Every run generates its own dataset from the seed, trains, evaluates on the
held-out tail, and reports one row per seed. Comparisons are paired sign tests.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from config import RunConfig
from data_generator import generate
from error_handler import ValidationError
from evaluation import Evaluator
from model import AdaFocusModel
from processing.policy_analytics import policy_frame, policy_quality, random_policy
from training import Trainer

logger = logging.getLogger(__name__)

ABLATION_STUDY = ('aux_supervision', 'diversity_augmentation', 'stop_gradient', 'deformable',
                  'dynamic_frame_sampling')


def sign_test(wins: int, losses: int) -> float:
    """One-sided p-value that wins outnumber losses; ties must already be dropped"""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(stats.binomtest(wins, n, 0.5, alternative='greater').pvalue)


def paired_sign_test(treated, control) -> Dict[str, float]:
    diff = np.asarray(treated, dtype=np.float64) - np.asarray(control, dtype=np.float64)
    if diff.ndim != 1:
        raise ValidationError(f"paired samples must be vectors, got shape {diff.shape}")
    diff = diff[~np.isnan(diff)]
    wins, losses = int(np.sum(diff > 0)), int(np.sum(diff < 0))
    return {'wins': wins, 'losses': losses, 'ties': int(diff.size - wins - losses),
            'p_value': sign_test(wins, losses)}


def per_video_quality(specs: np.ndarray, selected: np.ndarray, videos) -> pd.DataFrame:
    """Recall, IoU and centre error per video; IoU is 0 for a video with no informative pick"""
    frame = policy_frame(specs, selected, videos)
    grouped = frame.groupby('video')
    return pd.DataFrame({
        'recall': grouped['informative'].mean().astype(float),
        'iou': grouped['iou'].mean().fillna(0.0),
        'center_error': grouped['center_error'].mean(),
    })


@dataclass
class SeedRun:
    metrics: Dict[str, float]
    per_video: pd.DataFrame
    baseline: pd.DataFrame      # per_video for the random policy on the same hold-out


def run_seed(run_config: RunConfig, seed: int, videos: int, threads: int = 1) -> SeedRun:
    """Generate, train and evaluate one seed; the seed drives data, initialisation and sampling"""
    if videos < 2:
        raise ValidationError(f"need at least 2 videos to split, got {videos}")
    config = replace(run_config, seed=seed, synth=replace(run_config.synth, seed=seed)).validate()
    dataset = generate(config.synth, videos, threads)
    n_eval = min(videos - 1, max(1, int(round(videos * config.holdout_fraction))))
    train_set = dataset.subset(range(videos - n_eval))
    holdout = dataset.subset(range(videos - n_eval, videos))

    model = AdaFocusModel(config.model, seed=seed)
    Trainer(config, model).fit(train_set.frames, train_set.labels)
    result = Evaluator(holdout, threads).run(model)

    c = config.model
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(holdout)]))
    base_specs, base_selected = random_policy(rng, len(holdout), c.T0, c.T_L, c.H, c.W, c.P)
    quality = policy_quality(result.local_specs, result.selected, holdout.videos)
    baseline = policy_quality(base_specs, base_selected, holdout.videos)
    metrics = {
        'seed': seed,
        'accuracy': float(result.step_accuracies()[-1]),
        **quality,
        'mean_patch_area': float(np.mean(result.local_specs[..., 2] * result.local_specs[..., 3])),
        **{f'random_{k}': v for k, v in baseline.items()},
    }
    logger.info(f" seed {seed}: " + ", ".join(f"{k}={v:.4f}" for k, v in metrics.items() if k != 'seed'))
    return SeedRun(metrics,
                   per_video_quality(result.local_specs, result.selected, holdout.videos),
                   per_video_quality(base_specs, base_selected, holdout.videos))


# end-to-end -------------------------------------------------------------------

def end_to_end(run_config: RunConfig, seeds: Sequence[int], videos: int,
               threads: int = 1) -> Tuple[pd.DataFrame, List[SeedRun]]:
    runs = [run_seed(run_config, seed, videos, threads) for seed in seeds]
    return pd.DataFrame([r.metrics for r in runs]), runs


def end_to_end_verdict(table: pd.DataFrame, informative_frames: int, T0: int,
                       min_accuracy: float = 0.9) -> Dict[str, bool]:
    """Every seed: accuracy floor, recall at least twice k/T0, centre error at most a third of random"""
    return {
        'accuracy': bool((table['accuracy'] >= min_accuracy).all()),
        'recall': bool((table['recall'] >= 2 * informative_frames / T0).all()),
        'center_error': bool((table['center_error'] <= table['random_center_error'] / 3).all()),
    }


def policy_vs_random(runs: Sequence[SeedRun]) -> pd.DataFrame:
    """Per-video sign tests of the learned policy against the random one, pooled over seeds"""
    learned = pd.concat([r.per_video for r in runs], ignore_index=True)
    baseline = pd.concat([r.baseline for r in runs], ignore_index=True)
    rows = {metric: paired_sign_test(learned[metric], baseline[metric]) for metric in ('recall', 'iou')}
    table = pd.DataFrame.from_dict(rows, orient='index')
    table.index.name = 'metric'
    return table


# ablations --------------------------------------------------------------------

def ablation_study(run_config: RunConfig, seeds: Sequence[int], videos: int,
                   names: Sequence[str] = ABLATION_STUDY, threads: int = 1) -> pd.DataFrame:
    rows = []
    for variant in ('full',) + tuple(names):
        config = run_config if variant == 'full' else run_config.ablate(variant)
        for seed in seeds:
            metrics = run_seed(config, seed, videos, threads).metrics
            rows.append({'variant': variant, 'seed': seed, 'accuracy': metrics['accuracy'],
                         'recall': metrics['recall'], 'iou': metrics['iou']})
    return pd.DataFrame(rows)


def ablation_significance(table: pd.DataFrame, level: float = 0.05) -> pd.DataFrame:
    """Full model against each ablation, paired by seed; a win is a seed where the full model is more accurate"""
    full = table[table['variant'] == 'full'].set_index('seed')['accuracy']
    if full.empty:
        raise ValidationError("ablation table has no 'full' rows")
    rows = []
    for variant, group in table[table['variant'] != 'full'].groupby('variant', sort=False):
        ablated = group.set_index('seed')['accuracy'].reindex(full.index)
        test = paired_sign_test(full.to_numpy(), ablated.to_numpy())
        rows.append({'variant': variant, 'mean_drop': float(np.nanmean(full.to_numpy() - ablated.to_numpy())),
                     **test, 'significant': test['p_value'] < level})
    return pd.DataFrame(rows)


# size regulariser -------------------------------------------------------------

def regularizer_study(run_config: RunConfig, seeds: Sequence[int], videos: int,
                      alphas: Sequence[float] = (0.0, 0.5), threads: int = 1) -> pd.DataFrame:
    if not run_config.model.deformable:
        raise ValidationError("the size penalty only acts on deformable patches")
    floor = run_config.model.min_patch ** 2
    rows = []
    for alpha in alphas:
        config = replace(run_config, model=replace(run_config.model, alpha=float(alpha)))
        for seed in seeds:
            metrics = run_seed(config, seed, videos, threads).metrics
            rows.append({'alpha': float(alpha), 'seed': seed, 'mean_patch_area': metrics['mean_patch_area'],
                         'area_over_floor': metrics['mean_patch_area'] / floor,
                         'accuracy': metrics['accuracy']})
    return pd.DataFrame(rows)


def regularizer_verdict(table: pd.DataFrame, collapse_tolerance: float = 0.1,
                        keep_factor: float = 2.0) -> Dict[str, bool]:
    """Without the penalty the area sits within tolerance of the floor; with it, at least keep_factor times"""
    by_alpha = table.groupby('alpha')['area_over_floor'].mean()
    if 0.0 not in by_alpha.index or not (by_alpha.index > 0).any():
        raise ValidationError("regulariser verdict needs alpha = 0 and at least one alpha > 0")
    return {
        'collapse_without_penalty': bool(by_alpha[0.0] <= 1.0 + collapse_tolerance),
        'penalty_keeps_area': bool((by_alpha[by_alpha.index > 0] >= keep_factor).all()),
    }

"""
Planted-glyph synthetic videos.

Each video carries its class only through a small glyph that drifts smoothly
across a contiguous run of informative frames; every other pixel is noise or
class-independent distractor squares. The ground-truth track and informative
mask are kept with the frames so spatial and temporal policies can be scored.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from config import SynthConfig

logger = logging.getLogger(__name__)

GLYPH_BASE = 5
_GLYPH_SEED = 20240917


@dataclass
class SynthVideo:
    frames: np.ndarray          # (T0, C, H, W) float32
    label: int
    truth_track: np.ndarray     # (T0, 4) float32 (cx, cy, h, w); NaN rows off the informative run
    informative_mask: np.ndarray  # (T0,) bool

    def truth_at(self, t: int):
        return None if not self.informative_mask[t] else tuple(float(v) for v in self.truth_track[t])


@dataclass
class SynthDataset:
    config: SynthConfig
    videos: List[SynthVideo]

    def __len__(self):
        return len(self.videos)

    @property
    def frames(self) -> np.ndarray:
        return np.stack([v.frames for v in self.videos])

    @property
    def labels(self) -> np.ndarray:
        return np.array([v.label for v in self.videos], dtype=np.int64)

    def subset(self, indices) -> 'SynthDataset':
        return SynthDataset(self.config, [self.videos[i] for i in indices])


def glyph_bitmaps(num_classes: int) -> np.ndarray:
    """Fixed, pairwise-distinct 5x5 binary glyphs, one per class"""
    rng = np.random.default_rng(_GLYPH_SEED)
    glyphs: List[np.ndarray] = []
    seen = set()
    while len(glyphs) < num_classes:
        candidate = rng.random((GLYPH_BASE, GLYPH_BASE)) < 0.5
        on = int(candidate.sum())
        key = candidate.tobytes()
        if on < 8 or on > GLYPH_BASE * GLYPH_BASE - 5 or key in seen:
            continue
        seen.add(key)
        glyphs.append(candidate)
    return np.stack(glyphs)


def scale_glyph(glyph: np.ndarray, size: int) -> np.ndarray:
    idx = np.floor(np.arange(size) * GLYPH_BASE / size).astype(np.int64)
    return glyph[np.ix_(idx, idx)]


class DataGenerator:
    def __init__(self, config: SynthConfig):
        self.config = config.validate()
        self.glyphs = glyph_bitmaps(config.num_classes)
        self.logger = logging.getLogger(__name__)

    def label_for(self, index: int) -> int:
        """Stratified labels: every block of num_classes videos is a permutation of the classes"""
        k = self.config.num_classes
        block_rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, index // k, 1]))
        return int(block_rng.permutation(k)[index % k])

    def informative_frames(self, rng: np.random.Generator) -> np.ndarray:
        c = self.config
        mask = np.zeros(c.T0, dtype=bool)
        if c.scattered:
            mask[rng.choice(c.T0, size=c.informative_frames, replace=False)] = True
        else:
            start = int(rng.integers(0, c.T0 - c.informative_frames + 1))
            mask[start:start + c.informative_frames] = True
        return mask

    def trajectory(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Smooth random walk of glyph centres, (T0, 2); every step moves at most `drift` pixels"""
        c = self.config
        lo = np.array([size / 2, size / 2])
        hi = np.array([c.W - size / 2, c.H - size / 2])
        centres = np.empty((c.T0, 2))
        centres[0] = lo + rng.random(2) * (hi - lo)
        velocity = np.zeros(2)
        for t in range(1, c.T0):
            velocity = 0.7 * velocity + rng.normal(0.0, c.drift / 2, size=2)
            speed = np.linalg.norm(velocity)
            if speed > c.drift:
                velocity *= c.drift / speed
            centres[t] = np.clip(centres[t - 1] + velocity, lo, hi)
        return centres

    def pixel_corners(self, centres: np.ndarray, size: int) -> np.ndarray:
        """Integer top-left corners tracking the walk, (T0, 2) as (left, top).

        Each frame takes the lattice step closest to the walk among steps no
        longer than `drift`, so the rendered glyph keeps the drift bound.
        """
        c = self.config
        target = centres - size / 2
        upper = np.array([c.W - size, c.H - size])
        corners = np.empty((c.T0, 2), dtype=np.int64)
        corners[0] = np.clip(np.rint(target[0]), 0, upper)
        nudges = np.array([(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)])
        for t in range(1, c.T0):
            wanted = target[t] - corners[t - 1]
            steps = np.vstack([np.rint(wanted) + nudges, [[0, 0]]])
            steps = steps[np.linalg.norm(steps, axis=1) <= c.drift + 1e-9]
            best = steps[np.argmin(np.linalg.norm(steps - wanted, axis=1))]
            corners[t] = np.clip(corners[t - 1] + best.astype(np.int64), 0, upper)
        return corners

    def generate_video(self, index: int) -> SynthVideo:
        c = self.config
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, index]))
        label = self.label_for(index)
        mask = self.informative_frames(rng)
        size = int(rng.integers(c.glyph_min, c.glyph_max + 1))
        corners = self.pixel_corners(self.trajectory(rng, size), size)
        glyph = scale_glyph(self.glyphs[label], size) * c.glyph_intensity

        frames = rng.normal(0.0, c.noise_std, size=(c.T0, c.C, c.H, c.W)) if c.noise_std > 0 \
            else np.zeros((c.T0, c.C, c.H, c.W))
        d = c.distractor_size
        for _ in range(c.distractors):
            x0 = int(rng.integers(0, c.W - d + 1))
            y0 = int(rng.integers(0, c.H - d + 1))
            frames[:, :, y0:y0 + d, x0:x0 + d] += 0.5 * c.glyph_intensity

        track = np.full((c.T0, 4), np.nan)
        for t in np.flatnonzero(mask):
            left, top = (int(v) for v in corners[t])
            frames[t, :, top:top + size, left:left + size] += glyph
            track[t] = (left + size / 2, top + size / 2, size, size)

        return SynthVideo(frames.astype(np.float32), label, track.astype(np.float32), mask)

    def generate(self, n: int, threads: int = 1) -> SynthDataset:
        """n videos, deterministic given (seed, index) regardless of thread count"""
        self.logger.info(f" Generating {n} videos ({self.config.num_classes} classes, {threads} threads)")
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                videos = list(pool.map(self.generate_video, range(n)))
        else:
            videos = [self.generate_video(i) for i in range(n)]
        return SynthDataset(self.config, videos)


def generate(config: SynthConfig, n: int, threads: int = 1) -> SynthDataset:
    return DataGenerator(config).generate(n, threads)


def glyph_free_copy(video: SynthVideo, rng: Optional[np.random.Generator] = None,
                    noise_std: float = 0.0) -> SynthVideo:
    """Same video with the glyph region of every informative frame replaced by background noise"""
    frames = video.frames.copy()
    for t in np.flatnonzero(video.informative_mask):
        cx, cy, h, w = video.truth_track[t]
        top = max(0, int(np.floor(cy - h / 2)) - 1)
        left = max(0, int(np.floor(cx - w / 2)) - 1)
        region = frames[t, :, top:top + int(h) + 2, left:left + int(w) + 2]
        if rng is not None and noise_std > 0:
            region[...] = rng.normal(0.0, noise_std, size=region.shape)
        else:
            region[...] = 0.0
    return SynthVideo(frames, video.label, video.truth_track.copy(), video.informative_mask.copy())

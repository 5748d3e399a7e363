"""
Temporal frame selection: weighted sampling without replacement, the exact
expected loss over ordered selections, its Monte Carlo estimator, and the
deterministic CDF-quantile rule used at inference time.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from autodiff import Tensor, matmul, multiply, divide, tensor_sum, scale, reshape, softmax, detached
from error_handler import ValidationError
from patch_engine import clamp_specs

logger = logging.getLogger(__name__)

MAX_ENUMERATION = 10 ** 6
DENOMINATOR_FLOOR = 1e-8


@dataclass(frozen=True)
class SelectionResult:
    indices: Tuple[int, ...]

    def validate(self, T0: int) -> 'SelectionResult':
        if len(set(self.indices)) != len(self.indices):
            raise ValidationError(f"Selected indices are not distinct: {self.indices}")
        if any(i < 0 or i >= T0 for i in self.indices):
            raise ValidationError(f"Selected indices outside [0, {T0}): {self.indices}")
        return self


def validate_weights(weights, tol: float = 1e-9) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValidationError(f"Frame weights must be a non-empty vector, got shape {w.shape}")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise ValidationError("Frame weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > tol:
        raise ValidationError(f"Frame weights must sum to 1, got {w.sum():.12f}")
    return w


def _check_draws(w: np.ndarray, T_L: int):
    positive = int(np.count_nonzero(w > 0))
    if T_L < 1 or T_L > positive:
        raise ValidationError(f"Cannot draw {T_L} frames from {positive} with positive weight")


def sample_sequences(weights, T_L: int, M: int, rng: np.random.Generator) -> np.ndarray:
    """M independent ordered selections, shape (M, T_L).

    Each step draws from the renormalised residual weights by inverse CDF and
    zeroes the drawn index.
    """
    w = validate_weights(weights)
    _check_draws(w, T_L)
    T0 = w.size
    remaining = np.tile(w, (M, 1))
    rows = np.arange(M)
    out = np.empty((M, T_L), dtype=np.int64)
    for i in range(T_L):
        cdf = np.cumsum(remaining, axis=1)
        u = rng.random(M) * cdf[:, -1]
        idx = (cdf <= u[:, None]).sum(axis=1)
        overflow = idx >= T0
        if np.any(overflow):
            last_positive = T0 - 1 - np.argmax(remaining[:, ::-1] > 0, axis=1)
            idx = np.where(overflow, last_positive, idx)
        out[:, i] = idx
        remaining[rows, idx] = 0.0
    return out


def sample_without_replacement(weights, T_L: int, rng: np.random.Generator) -> SelectionResult:
    return SelectionResult(tuple(int(i) for i in sample_sequences(weights, T_L, 1, rng)[0]))


def exact_expected_loss(weights, losses, T_L: int) -> float:
    """Expected mean loss over all ordered T_L-selections, by enumeration"""
    w = validate_weights(weights)
    L = np.asarray(losses, dtype=np.float64)
    if L.shape != w.shape:
        raise ValidationError(f"Losses shape {L.shape} does not match weights {w.shape}")
    _check_draws(w, T_L)
    if math.perm(w.size, T_L) > MAX_ENUMERATION:
        raise ValidationError(f"P({w.size}, {T_L}) exceeds the enumeration limit {MAX_ENUMERATION}")
    used = np.zeros(w.size, dtype=bool)

    def walk(depth: int, prob: float, loss_sum: float) -> float:
        if depth == T_L:
            return prob * loss_sum / T_L
        residual = w[~used].sum()
        total = 0.0
        for j in np.flatnonzero(~used & (w > 0)):
            used[j] = True
            total += walk(depth + 1, prob * w[j] / residual, loss_sum + L[j])
            used[j] = False
        return total

    return walk(0, 1.0, 0.0)


def inclusion_probabilities(weights, T_L: int) -> np.ndarray:
    """Probability that each frame appears among T_L sequential draws"""
    w = validate_weights(weights)
    T0 = w.size
    probs = np.zeros(T0)
    for j in range(T0):
        indicator = np.zeros(T0)
        indicator[j] = T_L
        probs[j] = exact_expected_loss(w, indicator, T_L)
    return probs


def _per_video_rngs(rng, count: int) -> List[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        return [rng] * count
    rngs = list(rng)
    if len(rngs) != count:
        raise ValidationError(f"Expected {count} random generators, got {len(rngs)}")
    return rngs


def mc_expected_loss(weights: Tensor, losses, T_L: int, M: int = 128,
                     rng: Union[np.random.Generator, Sequence[np.random.Generator]] = None) -> Tensor:
    """Monte Carlo estimate of the expected selection loss, averaged over videos.

    weights: (T0,) or (B, T0) tensor; losses: matching array. Index sequences
    are drawn from the detached weights and held fixed; the gradient flows
    through the normalised residual-weight ratios only.
    """
    if M < 1:
        raise ValidationError(f"M must be >= 1, got {M}")
    if rng is None:
        raise ValidationError("mc_expected_loss needs a random generator")
    single = weights.data.ndim == 1
    w_t = reshape(weights, (1, -1)) if single else weights
    B, T0 = w_t.shape
    L = np.asarray(losses, dtype=np.float64).reshape(B, T0)
    w_values = detached(w_t)
    rngs = _per_video_rngs(rng, B)

    rows = B * M * T_L
    mask = np.ones((rows, T0))
    selector = np.zeros((rows, B))
    loss_rows = np.empty((rows, T0))
    for b in range(B):
        seqs = sample_sequences(w_values[b] / w_values[b].sum(), T_L, M, rngs[b])
        block = slice(b * M * T_L, (b + 1) * M * T_L)
        selector[block, b] = 1.0
        loss_rows[block] = L[b]
        block_mask = mask[block].reshape(M, T_L, T0)
        for i in range(1, T_L):
            # step i excludes the frames drawn at steps < i
            block_mask[np.arange(M)[:, None], i, seqs[:, :i]] = 0.0
        mask[block] = block_mask.reshape(M * T_L, T0)

    graph = w_t.graph
    ones = graph.constant(np.ones((T0, 1)))
    masked = multiply(matmul(graph.constant(selector), w_t), graph.constant(mask))
    numerator = matmul(multiply(masked, graph.constant(loss_rows)), ones)
    denominator = matmul(masked, ones)
    floor = np.where(denominator.data < DENOMINATOR_FLOOR, DENOMINATOR_FLOOR, 0.0)
    if np.any(floor):
        denominator = denominator + graph.constant(floor)
    return scale(tensor_sum(divide(numerator, denominator)), 1.0 / rows)


def deterministic_select(weights, T_L: int) -> SelectionResult:
    """Frames at CDF quantiles (i - 0.5)/T_L; collisions move to the nearest unused index, earlier first"""
    w = validate_weights(weights)
    T0 = w.size
    if not 1 <= T_L <= T0:
        raise ValidationError(f"T_L={T_L} must lie in [1, {T0}]")
    cdf = np.cumsum(w)
    levels = (np.arange(T_L) + 0.5) / T_L
    raw = np.minimum(np.searchsorted(cdf, levels, side='right'), T0 - 1)
    chosen: List[int] = []
    taken = set()
    for idx in raw:
        idx = int(idx)
        if idx in taken:
            for d in range(1, T0):
                candidates = [c for c in (idx - d, idx + d) if 0 <= c < T0 and c not in taken]
                if candidates:
                    idx = candidates[0]
                    break
        taken.add(idx)
        chosen.append(idx)
    return SelectionResult(tuple(sorted(chosen)))


# T0 <-> T_G grids ------------------------------------------------------------

def global_grid(T0: int, T_G: int) -> np.ndarray:
    """T0 indices of the T_G uniformly spaced glance frames"""
    return np.floor((np.arange(T_G) + 0.5) * T0 / T_G).astype(np.int64)


def uniform_indices(T0: int, T_L: int) -> np.ndarray:
    return global_grid(T0, T_L)


def grid_interpolation_matrix(T0: int, T_G: int) -> np.ndarray:
    """(T_G, T0) matrix of linear interpolation weights from the glance grid to every frame"""
    grid = global_grid(T0, T_G)
    mat = np.zeros((T_G, T0))
    for n in range(T0):
        if T_G == 1 or n <= grid[0]:
            mat[0, n] = 1.0
        elif n >= grid[-1]:
            mat[-1, n] = 1.0
        else:
            k = int(np.searchsorted(grid, n, side='right')) - 1
            frac = (n - grid[k]) / (grid[k + 1] - grid[k])
            mat[k, n] = 1.0 - frac
            mat[k + 1, n] = frac
    return mat


def downsample_matrix(T0: int, T_G: int) -> np.ndarray:
    """(T0, T_G) bin membership: bin b holds frames [floor(b*T0/T_G), floor((b+1)*T0/T_G))"""
    if not 1 <= T_G <= T0:
        raise ValidationError(f"T_G={T_G} must lie in [1, {T0}]")
    edges = np.floor(np.arange(T_G + 1) * T0 / T_G).astype(np.int64)
    mat = np.zeros((T0, T_G))
    for b in range(T_G):
        mat[edges[b]:edges[b + 1], b] = 1.0
    return mat


def downsample_weights(weights, T_G: int) -> np.ndarray:
    w = validate_weights(weights)
    binned = w @ downsample_matrix(w.size, T_G)
    return binned / binned.sum()


def downsample_weight_tensor(weights: Tensor, T_G: int) -> Tensor:
    """Differentiable bin sums of (B, T0) weights; bins partition the frames so rows stay normalised"""
    return matmul(weights, weights.graph.constant(downsample_matrix(weights.shape[-1], T_G)))


def upsample_weights(logits: Tensor, T0: int) -> Tensor:
    """(B, T_G) logits -> (B, T0) weights: linear interpolation then softmax"""
    T_G = logits.shape[-1]
    interp = logits.graph.constant(grid_interpolation_matrix(T0, T_G))
    return softmax(matmul(logits, interp))


def interpolate_specs(specs, selected, T0: int, H: int, W: int, p_min: float = 0.0) -> np.ndarray:
    """Per-field linear interpolation of (T_G, 4) glance-grid specs at selected T0 indices, clamped into the frame"""
    specs = np.asarray(specs, dtype=np.float64)
    mat = grid_interpolation_matrix(T0, specs.shape[0])
    return clamp_specs(mat[:, list(selected)].T @ specs, H, W, p_min)


# baseline frame policies ---------------------------------------------------

def random_indices(rng: np.random.Generator, T0: int, T_L: int) -> SelectionResult:
    return SelectionResult(tuple(sorted(int(i) for i in rng.choice(T0, size=T_L, replace=False))))


def central_clip_indices(T0: int, T_L: int) -> SelectionResult:
    start = (T0 - T_L) // 2
    return SelectionResult(tuple(range(start, start + T_L)))


def gaussian_indices(rng: np.random.Generator, T0: int, T_L: int, sigma: float = 0.25) -> SelectionResult:
    """Weighted draw around the video centre, sigma in units of T0"""
    positions = np.arange(T0) + 0.5
    w = np.exp(-0.5 * ((positions - T0 / 2) / (sigma * T0)) ** 2)
    picked = sample_without_replacement(w / w.sum(), T_L, rng)
    return SelectionResult(tuple(sorted(picked.indices)))

"""
Oracle suite: finite-difference checks of every op, crop gradients, the Monte
Carlo estimator against exact enumeration, and deterministic-select fixtures.

Each check reports its measured error next to the tolerance. Bug injection
swaps in a deliberately wrong implementation so the harness can show the
corresponding check failing.
"""

import contextlib
import logging
import time
from dataclasses import dataclass, asdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple
from unittest import mock

import numpy as np
import pandas as pd

import autodiff
import frame_sampler
import patch_engine
from autodiff import (Graph, Tensor, add, average_pool_2d, bias_add, concat, conv2d, cross_entropy, divide,
                      finite_diff_check, global_average_pool, log, log_softmax, matmul,
                      max_accumulate, multiply, relu, reshape, sigmoid, softmax, subtract, tensor_sum,
                      transpose)
from error_handler import ValidationError
from patch_engine import PatchSpec, crop_patches, deformable_crop, bilinear_crop_forward

logger = logging.getLogger(__name__)

GROUPS = ('autodiff', 'crop', 'mc', 'select')
INJECTABLE_BUGS = ('crop-backward', 'matmul-backward', 'mc-sampler', 'select')

OP_TOLERANCE = 1e-4
CROP_TOLERANCE = 1e-4
LATTICE_MARGIN = 1e-3


@dataclass
class CheckResult:
    group: str
    name: str
    error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tolerance

    def to_dict(self):
        return {**asdict(self), 'passed': self.passed}


@dataclass
class VerifyReport:
    checks: List[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.to_dict() for c in self.checks],
                            columns=['group', 'name', 'error', 'tolerance', 'passed', 'seconds'])


# helpers ----------------------------------------------------------------------

def weighted_sum(graph: Graph, out: Tensor, seed: int = 7) -> Tensor:
    """sum(out * R) for a fixed random R, so every output coordinate matters"""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return tensor_sum(multiply(out, graph.constant(r)))


def spec_columns(leaf: Tensor):
    """(4,) leaf -> (xc, yc, hp, wp), each (1, 1)"""
    row = reshape(leaf, (1, 4))
    picks = np.eye(4)
    return tuple(matmul(row, leaf.graph.constant(picks[:, k:k + 1])) for k in range(4))


def lattice_distance(spec: PatchSpec, P: int) -> float:
    offsets = patch_engine.offset_grid(P)
    coords = np.concatenate([spec.xc + offsets * spec.wp / P - 0.5, spec.yc + offsets * spec.hp / P - 0.5])
    return float(np.min(np.abs(coords - np.round(coords))))


def random_interior_spec(rng: np.random.Generator, H: int, W: int, P: int, deformable: bool,
                         margin: float = LATTICE_MARGIN, attempts: int = 1000) -> PatchSpec:
    """
    Spec whose sample points all sit at least `margin` from integer lattice
    lines and strictly inside the frame, so no corner index is clamped.
    """
    for _ in range(attempts):
        if deformable:
            hp, wp = rng.uniform(P / 2, min(H, W) - 2, size=2)
        else:
            hp = wp = float(P)
        xc = rng.uniform(wp / 2 + 1, W - wp / 2 - 1)
        yc = rng.uniform(hp / 2 + 1, H - hp / 2 - 1)
        spec = PatchSpec(float(xc), float(yc), float(hp), float(wp))
        if lattice_distance(spec, P) >= margin:
            return spec
    raise ValidationError(f"no lattice-free spec found for {H}x{W}, P={P}")


def crop_gradient_error(frame: np.ndarray, spec: PatchSpec, P: int, deformable: bool,
                        eps: float = 1e-6) -> float:
    """Max relative error of the crop gradient w.r.t. the spec fields (centre only when fixed-size)"""
    frames = frame[None]

    def f(graph: Graph, leaf: Tensor) -> Tensor:
        xc, yc, hp, wp = spec_columns(leaf)
        if not deformable:
            hp = graph.constant(np.full((1, 1), float(P)))
            wp = graph.constant(np.full((1, 1), float(P)))
        return weighted_sum(graph, crop_patches(graph.constant(frames), xc, yc, hp, wp, P))
    return finite_diff_check(f, spec.as_array(), eps=eps)


def _timed(group: str, name: str, tolerance: float, fn: Callable[[], float]) -> CheckResult:
    started = time.perf_counter()
    try:
        error = float(fn())
    except Exception as e:  # a check that blows up is a failed check
        logger.error(f"check {group}/{name} raised {type(e).__name__}: {e}")
        error = float('inf')
    return CheckResult(group, name, error, tolerance, time.perf_counter() - started)


# autodiff ---------------------------------------------------------------------

def _op_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """op name -> (input value, f(graph, leaf) -> output tensor)"""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    other = rng.normal(size=(3, 4))
    positive = rng.uniform(0.5, 2.0, size=(3, 4))
    images = rng.normal(size=(2, 3, 6, 6))
    kernel = rng.normal(size=(4, 3, 3, 3))
    batched = rng.normal(size=(2, 3, 4))
    left = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1])

    return {
        'add': (a, lambda g, x: add(x, g.constant(other))),
        'subtract': (a, lambda g, x: subtract(g.constant(other), x)),
        'multiply': (a, lambda g, x: multiply(x, g.constant(other))),
        'divide-numerator': (a, lambda g, x: divide(x, g.constant(positive))),
        'divide-denominator': (positive, lambda g, x: divide(g.constant(a), x)),
        'relu': (a, lambda g, x: relu(x)),
        'sigmoid': (a, lambda g, x: sigmoid(x)),
        'log': (positive, lambda g, x: log(x)),
        'matmul-left': (a, lambda g, x: matmul(x, g.constant(b))),
        'matmul-right': (b, lambda g, x: matmul(g.constant(a), x)),
        'matmul-batched-left': (batched, lambda g, x: matmul(x, g.constant(b))),
        'matmul-batched-right': (batched, lambda g, x: matmul(g.constant(left), x)),
        'bias-add': (rng.normal(size=3), lambda g, x: bias_add(g.constant(images), x)),
        'conv2d-input': (images, lambda g, x: conv2d(x, g.constant(kernel), stride=2, pad=1)),
        'conv2d-kernel': (kernel, lambda g, x: conv2d(g.constant(images), x, stride=1, pad=1)),
        'global-average-pool': (images, lambda g, x: global_average_pool(x)),
        'average-pool-2d': (images, lambda g, x: average_pool_2d(x, 2)),
        'concat': (a, lambda g, x: concat([x, g.constant(other)], axis=1)),
        'reshape': (images, lambda g, x: reshape(x, (2, -1))),
        'transpose': (images, lambda g, x: transpose(x, (0, 2, 3, 1))),
        'max-accumulate': (batched, lambda g, x: max_accumulate(x, axis=1)),
        'softmax': (a, lambda g, x: softmax(x)),
        'log-softmax': (a, lambda g, x: log_softmax(x)),
        'nll': (a, lambda g, x: cross_entropy(x, labels)),
    }


def _mlp_error(rng: np.random.Generator) -> float:
    x = rng.normal(size=(5, 6))
    labels = rng.integers(0, 3, size=5)
    shapes = [(6, 8), (8, 8), (8, 3)]
    sizes = [int(np.prod(s)) for s in shapes]
    theta = rng.normal(scale=0.5, size=sum(sizes))

    def f(graph: Graph, leaf: Tensor) -> Tensor:
        h = graph.constant(x)
        offset = 0
        picks = np.eye(theta.size)
        for i, (shape, size) in enumerate(zip(shapes, sizes)):
            w = reshape(matmul(reshape(leaf, (1, -1)), graph.constant(picks[:, offset:offset + size])), shape)
            offset += size
            h = matmul(h, w)
            if i < len(shapes) - 1:
                h = sigmoid(h)
        return cross_entropy(h, labels)
    return finite_diff_check(f, theta, eps=1e-5)


def autodiff_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (value, op) in _op_cases(rng).items():
        def run(value=value, op=op):
            return finite_diff_check(lambda g, x: weighted_sum(g, op(g, x)), value, eps=1e-5)
        results.append(_timed('autodiff', name, OP_TOLERANCE, run))
    results.append(_timed('autodiff', 'mlp-cross-entropy', 1e-5, lambda: _mlp_error(rng)))
    results.append(_timed('autodiff', 'sum-of-squares', 1e-9, lambda: finite_diff_check(
        lambda g, x: tensor_sum(multiply(x, x)), rng.normal(size=(4, 3)), eps=1e-5)))
    return results


# crop -------------------------------------------------------------------------

def _copy_error(rng: np.random.Generator) -> float:
    frame = rng.normal(size=(2, 10, 10))
    patch, _ = bilinear_crop_forward(frame, PatchSpec(5.0, 4.0, 4.0, 4.0), 4)
    return float(np.max(np.abs(patch - frame[:, 2:6, 3:7])))


def _upsample_error(rng: np.random.Generator) -> float:
    P = 6
    image = rng.normal(size=(1, P, P))
    frame = np.repeat(np.repeat(image, 2, axis=1), 2, axis=2)
    patch, _ = deformable_crop(frame, PatchSpec(float(P), float(P), 2.0 * P, 2.0 * P), P)
    return float(np.max(np.abs(patch - image)))


def _crop_gradient_cases(rng: np.random.Generator, deformable: bool, cases: int) -> float:
    worst = 0.0
    for _ in range(cases):
        frame = rng.normal(size=(2, 16, 16))
        spec = random_interior_spec(rng, 16, 16, 6, deformable)
        worst = max(worst, crop_gradient_error(frame, spec, 6, deformable))
    return worst


def _frame_gradient_error(rng: np.random.Generator) -> float:
    spec = random_interior_spec(rng, 12, 12, 5, deformable=True)

    def f(graph: Graph, leaf: Tensor) -> Tensor:
        cols = tuple(graph.constant(np.array([[v]])) for v in spec.as_array())
        return weighted_sum(graph, crop_patches(leaf, *cols, 5))
    return finite_diff_check(f, rng.normal(size=(1, 1, 12, 12)), eps=1e-5)


def crop_checks(seed: int = 0, cases: int = 20) -> List[CheckResult]:
    rng = np.random.default_rng(seed + 1)
    return [
        _timed('crop', 'integer-centre-copy', 1e-12, lambda: _copy_error(rng)),
        _timed('crop', 'upsampled-recovery', 1e-12, lambda: _upsample_error(rng)),
        _timed('crop', 'fixed-size-gradient', CROP_TOLERANCE, lambda: _crop_gradient_cases(rng, False, cases)),
        _timed('crop', 'deformable-gradient', CROP_TOLERANCE, lambda: _crop_gradient_cases(rng, True, cases)),
        _timed('crop', 'frame-gradient', CROP_TOLERANCE, lambda: _frame_gradient_error(rng)),
    ]


# monte carlo ------------------------------------------------------------------

def _mc_value(weights: np.ndarray, losses: np.ndarray, T_L: int, M: int, seed: int) -> float:
    graph = Graph()
    w = graph.constant(weights)
    return frame_sampler.mc_expected_loss(w, losses, T_L, M, np.random.default_rng(seed)).item()


# every (T0 <= 6, T_L <= min(3, T0)) geometry the estimator is checked on
MC_PAIRS = tuple((T0, T_L) for T0 in range(1, 7) for T_L in range(1, min(3, T0) + 1))


def mc_draw_plan(draws: int) -> List[Tuple[int, int]]:
    """Draw geometries round-robin over MC_PAIRS; every pair gets at least one draw"""
    return [MC_PAIRS[d % len(MC_PAIRS)] for d in range(max(draws, len(MC_PAIRS)))]


def _mc_vs_exact(rng: np.random.Generator, draws: int, M: int) -> float:
    worst = 0.0
    for d, (T0, T_L) in enumerate(mc_draw_plan(draws)):
        w = rng.dirichlet(np.ones(T0))
        losses = rng.uniform(0, 3, size=T0)
        exact = frame_sampler.exact_expected_loss(w, losses, T_L)
        worst = max(worst, abs(_mc_value(w, losses, T_L, M, d) - exact))
    return worst


def _mc_gradient_error(rng: np.random.Generator) -> float:
    logits = rng.normal(size=6)
    losses = rng.uniform(0, 3, size=6)

    def f(graph: Graph, leaf: Tensor) -> Tensor:
        weights = reshape(softmax(reshape(leaf, (1, -1))), (-1,))
        return frame_sampler.mc_expected_loss(weights, losses, 3, 64, np.random.default_rng(11))
    return finite_diff_check(f, logits, eps=1e-6)


def _sampling_law_z(rng: np.random.Generator, vectors: int = 10, draws: int = 60000) -> float:
    """Largest |z| of empirical inclusion frequencies against enumeration"""
    worst = 0.0
    for k in range(vectors):
        w = np.array([0.5, 0.3, 0.2]) if k == 0 else rng.dirichlet(np.ones(4))
        exact = frame_sampler.inclusion_probabilities(w, 2)
        seqs = frame_sampler.sample_sequences(w, 2, draws, np.random.default_rng([k, 2]))
        freq = np.array([(seqs == j).any(axis=1).mean() for j in range(w.size)])
        sigma = np.sqrt(np.maximum(exact * (1 - exact), 1e-12) / draws)
        worst = max(worst, float(np.max(np.abs(freq - exact) / sigma)))
    return worst


def mc_checks(seed: int = 0, draws: int = 50, M: int = 100000) -> List[CheckResult]:
    rng = np.random.default_rng(seed + 2)
    fixture_w = np.array([0.4, 0.3, 0.2, 0.1])
    fixture_l = np.array([1.0, 2.0, 3.0, 4.0])
    w5 = rng.dirichlet(np.ones(5))
    l5 = rng.uniform(0, 3, size=5)
    return [
        _timed('mc', 'exact-fixture', 1e-12,
               lambda: abs(frame_sampler.exact_expected_loss(fixture_w, fixture_l, 2) - 151 / 72)),
        _timed('mc', 'inclusion-fixture', 1e-12,
               lambda: abs(frame_sampler.inclusion_probabilities([0.5, 0.3, 0.2], 2)[0]
                           - (0.5 + 0.3 * 0.5 / 0.7 + 0.2 * 0.5 / 0.8))),
        _timed('mc', 'single-draw-exact', 1e-12,
               lambda: abs(_mc_value(w5, l5, 1, 16, 0) - float(w5 @ l5))),
        _timed('mc', 'constant-losses', 1e-12,
               lambda: abs(_mc_value(w5, np.full(5, 1.7), 3, 32, 0) - 1.7)),
        _timed('mc', 'mc-vs-exact', 1e-2, lambda: _mc_vs_exact(rng, draws, M)),
        _timed('mc', 'frozen-sample-gradient', 1e-5, lambda: _mc_gradient_error(rng)),
        _timed('mc', 'sampling-law-z', 4.0, lambda: _sampling_law_z(rng)),
    ]


# deterministic select ---------------------------------------------------------

def _mismatch(weights, T_L: int, expected: Sequence[int]) -> float:
    got = frame_sampler.deterministic_select(np.asarray(weights, dtype=np.float64), T_L).indices
    return 0.0 if tuple(got) == tuple(expected) else 1.0


def select_checks() -> List[CheckResult]:
    concentrated = np.full(10, 0.01 / 9)
    concentrated[5] = 0.99
    return [
        _timed('select', 'uniform-quarters', 0.0, lambda: _mismatch(np.full(16, 1 / 16), 4, (2, 6, 10, 14))),
        _timed('select', 'cdf-fixture', 0.0, lambda: _mismatch([0.1, 0.2, 0.3, 0.4], 2, (1, 3))),
        _timed('select', 'concentrated-mass', 0.0, lambda: _mismatch(concentrated, 2, (4, 5))),
        _timed('select', 'full-selection', 0.0, lambda: _mismatch(np.full(5, 0.2), 5, range(5))),
    ]


# bug injection ------------------------------------------------------------------

def _buggy_matmul(a, b):
    out, grad = autodiff._matmul(a, b)

    def wrong(g):
        da, db = grad(g)
        return da * 1.01, db
    return out, wrong


def _buggy_sample_backward(grad, ctx, frame_grad=True):
    dframes, dxc, dyc, dhp, dwp = _original_sample_backward(grad, ctx, frame_grad)
    return dframes, dxc * 0.5, dyc, dhp, dwp


_original_sample_backward = patch_engine._sample_backward


def _buggy_sample_sequences(weights, T_L, M, rng):
    w = frame_sampler.validate_weights(weights)
    return np.stack([rng.permutation(w.size)[:T_L] for _ in range(M)])


def _buggy_select(weights, T_L):
    w = frame_sampler.validate_weights(weights)
    levels = np.arange(T_L) / T_L
    raw = np.minimum(np.searchsorted(np.cumsum(w), levels, side='right'), w.size - 1)
    return frame_sampler.SelectionResult(tuple(sorted(set(int(i) for i in raw))))


@contextlib.contextmanager
def injected(bug: Optional[str]):
    if bug is None:
        yield
        return
    if bug not in INJECTABLE_BUGS:
        raise ValidationError(f"unknown bug '{bug}'; choose from {list(INJECTABLE_BUGS)}")
    patches = {
        'crop-backward': mock.patch.object(patch_engine, '_sample_backward', _buggy_sample_backward),
        'matmul-backward': mock.patch.dict(autodiff.OPS, {'matmul': _buggy_matmul}),
        'mc-sampler': mock.patch.object(frame_sampler, 'sample_sequences', _buggy_sample_sequences),
        'select': mock.patch.object(frame_sampler, 'deterministic_select', _buggy_select),
    }
    logger.warning(f" Injecting bug '{bug}'")
    with patches[bug]:
        yield


def run_checks(only: Optional[Sequence[str]] = None, inject_bug: Optional[str] = None, seed: int = 0,
               crop_cases: int = 20, mc_draws: int = 50, mc_samples: int = 100000) -> VerifyReport:
    groups = list(only) if only else list(GROUPS)
    unknown = sorted(set(groups) - set(GROUPS))
    if unknown:
        raise ValidationError(f"unknown check groups {unknown}; choose from {list(GROUPS)}")
    runners = {
        'autodiff': lambda: autodiff_checks(seed),
        'crop': lambda: crop_checks(seed, crop_cases),
        'mc': lambda: mc_checks(seed, mc_draws, mc_samples),
        'select': select_checks,
    }
    checks: List[CheckResult] = []
    with injected(inject_bug):
        for group in GROUPS:
            if group in groups:
                checks.extend(runners[group]())
    report = VerifyReport(checks)
    for check in checks:
        status = 'PASS' if check.passed else 'FAIL'
        logger.info(f"   {status} {check.group}/{check.name}: error {check.error:.3g} (tol {check.tolerance:g})")
    return report

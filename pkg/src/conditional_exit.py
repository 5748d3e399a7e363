"""
Entropy-based early exit under a computational budget.

A video stops after step t when the entropy of its step-t prediction is at
most the threshold for that step. Thresholds are solved on a set of stored
predictions so that the mean cost over that set stays within a FLOPs budget.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from autodiff import conv_output_size
from config import ModelConfig
from error_handler import ValidationError

logger = logging.getLogger(__name__)

DISTRIBUTION_TOL = 1e-6
ENTROPY_TOL = 1e-12


class InfeasibleBudgetError(ValidationError):
    def __init__(self, budget: float, minimum: int):
        self.budget = budget
        self.minimum = minimum
        super().__init__(f"budget {budget} is below the cost of exiting at step 1 ({minimum})")


def entropy(p) -> float:
    """Natural-log entropy of a probability vector; 0 log 0 counts as 0"""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError(f"entropy needs a non-empty vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValidationError("entropy needs non-negative finite probabilities")
    if abs(p.sum() - 1.0) > DISTRIBUTION_TOL:
        raise ValidationError(f"probabilities sum to {p.sum():.8f}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _entropies(probs: np.ndarray) -> np.ndarray:
    return np.array([entropy(row) for row in probs])


@dataclass
class EvalRecord:
    probs: np.ndarray       # (T_L, K) prediction after each step
    label: int
    entropies: np.ndarray   # (T_L,)

    @classmethod
    def from_probs(cls, probs, label: int) -> 'EvalRecord':
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValidationError(f"EvalRecord needs (T_L, K) probabilities, got {probs.shape}")
        return cls(probs, int(label), _entropies(probs))

    def validate(self) -> 'EvalRecord':
        recomputed = _entropies(self.probs)
        if not np.allclose(recomputed, self.entropies, rtol=0.0, atol=ENTROPY_TOL):
            raise ValidationError(f"stored entropies {self.entropies} disagree with predictions")
        return self

    @property
    def steps(self) -> int:
        return self.probs.shape[0]


def records_from_probs(probs: np.ndarray, labels: Sequence[int]) -> List[EvalRecord]:
    """(N, T_L, K) stacked predictions -> records"""
    return [EvalRecord.from_probs(p, int(y)) for p, y in zip(probs, labels)]


def _stack(records: Sequence[EvalRecord]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not records:
        raise ValidationError("no evaluation records")
    steps = {r.steps for r in records}
    if len(steps) != 1:
        raise ValidationError(f"records disagree on the number of steps: {sorted(steps)}")
    predictions = np.stack([r.probs.argmax(axis=1) for r in records])
    labels = np.array([r.label for r in records])
    entropies = np.stack([r.entropies for r in records])
    return predictions, labels, entropies


@dataclass(frozen=True)
class ExitPolicy:
    thresholds: Tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.thresholds)
        object.__setattr__(self, 'thresholds', values)
        if not values or values[-1] != math.inf:
            raise ValidationError(f"the last threshold must be +inf, got {values}")
        if any(math.isnan(v) or (math.isfinite(v) and v < 0) for v in values):
            raise ValidationError(f"thresholds must be >= 0 or -inf, got {values}")

    @property
    def steps(self) -> int:
        return len(self.thresholds)

    def exit_steps(self, entropies: np.ndarray) -> np.ndarray:
        """0-based exit step of every row of an (N, T_L) entropy matrix"""
        if entropies.shape[1] != self.steps:
            raise ValidationError(f"policy has {self.steps} thresholds for {entropies.shape[1]} steps")
        return np.argmax(entropies <= np.asarray(self.thresholds), axis=1)

    @classmethod
    def never_exit(cls, steps: int) -> 'ExitPolicy':
        return cls((-math.inf,) * (steps - 1) + (math.inf,))

    @classmethod
    def fixed_length(cls, steps: int, t: int) -> 'ExitPolicy':
        """Every video stops after exactly t steps"""
        if not 1 <= t <= steps:
            raise ValidationError(f"fixed exit step {t} outside 1..{steps}")
        return cls((-math.inf,) * (t - 1) + (math.inf,) * (steps - t + 1))


@dataclass(frozen=True)
class FlopsModel:
    """Multiply-accumulate counts; exiting after step t costs T_G*f_G + pi + t*(f_L + f_C)"""
    global_per_frame: int
    local_per_patch: int
    policy: int
    classifier_per_step: int
    T_G: int
    T_L: int

    def cost(self, t: int) -> int:
        if not 1 <= t <= self.T_L:
            raise ValidationError(f"exit step {t} outside 1..{self.T_L}")
        return (self.T_G * self.global_per_frame + self.policy
                + t * (self.local_per_patch + self.classifier_per_step))

    def cumulative(self) -> np.ndarray:
        return np.array([self.cost(t) for t in range(1, self.T_L + 1)], dtype=np.int64)


def conv_macs(c_out: int, c_in: int, k: int, h_out: int, w_out: int) -> int:
    return c_out * c_in * k * k * h_out * w_out


def linear_macs(fan_in: int, fan_out: int) -> int:
    return fan_in * fan_out


def encoder_macs(widths: Sequence[int], channels: int, H: int, W: int) -> Tuple[int, Tuple[int, int]]:
    """Stride-2 3x3 conv stack; returns MACs and the final feature size"""
    total = 0
    c_in, h, w = channels, H, W
    for width in widths:
        h, w = conv_output_size(h, 3, 2, 1), conv_output_size(w, 3, 2, 1)
        total += conv_macs(width, c_in, 3, h, w)
        c_in = width
    return total, (h, w)


def flops_of(config: ModelConfig) -> FlopsModel:
    """
    Inference MACs per component. The FC_G / FC_L heads only serve training
    losses and are not counted; the classifier is counted once per step.
    """
    c = config
    f_g, (gh, gw) = encoder_macs(c.global_widths, c.C, c.H, c.W)
    f_l, _ = encoder_macs(c.local_widths, c.C, c.P, c.P)
    d_g, d_l = c.global_widths[-1], c.local_widths[-1]
    hidden, cs = c.policy_hidden, c.policy_channels

    temporal = (linear_macs(3 * d_g, hidden) + linear_macs(3 * hidden, hidden)
                + linear_macs(hidden, 1))
    spatial = (conv_macs(cs, d_g, 1, gh, gw) + 2 * conv_macs(cs, 3 * cs, 3, gh, gw)
               + linear_macs(cs * gh * gw, 4))
    policy = c.T_G * (temporal + spatial)
    return FlopsModel(
        global_per_frame=f_g,
        local_per_patch=f_l,
        policy=policy,
        classifier_per_step=linear_macs(d_g + d_l, c.num_classes),
        T_G=c.T_G,
        T_L=c.T_L,
    )


@dataclass
class ExitResult:
    accuracy: float
    mean_cost: float
    histogram: np.ndarray           # videos exiting at each step
    exits: np.ndarray = field(repr=False)  # 0-based exit step per video

    @property
    def fractions(self) -> np.ndarray:
        return self.histogram / self.histogram.sum()


def _evaluate_exits(predictions: np.ndarray, labels: np.ndarray, exits: np.ndarray,
                    flops: FlopsModel) -> ExitResult:
    n = len(labels)
    chosen = predictions[np.arange(n), exits]
    costs = flops.cumulative()[exits]
    return ExitResult(
        accuracy=float(np.mean(chosen == labels)),
        mean_cost=float(costs.sum() / n),
        histogram=np.bincount(exits, minlength=flops.T_L),
        exits=exits,
    )


def run_with_exit(records: Sequence[EvalRecord], policy: ExitPolicy, flops: FlopsModel) -> ExitResult:
    predictions, labels, entropies = _stack(records)
    if entropies.shape[1] != flops.T_L:
        raise ValidationError(f"records have {entropies.shape[1]} steps, cost model {flops.T_L}")
    return _evaluate_exits(predictions, labels, policy.exit_steps(entropies), flops)


def random_exit(records: Sequence[EvalRecord], histogram: Sequence[int], flops: FlopsModel,
                rng: np.random.Generator) -> ExitResult:
    """Exit step drawn at random per video with exactly the given per-step counts"""
    predictions, labels, _ = _stack(records)
    histogram = np.asarray(histogram, dtype=np.int64)
    if histogram.sum() != len(labels) or histogram.size != flops.T_L:
        raise ValidationError(f"exit histogram {histogram.tolist()} does not cover {len(labels)} videos")
    exits = rng.permutation(np.repeat(np.arange(flops.T_L), histogram))
    return _evaluate_exits(predictions, labels, exits, flops)


class ThresholdStrategy(Protocol):
    def solve(self, records: Sequence[EvalRecord], flops: FlopsModel, budget: float) -> ExitPolicy:
        ...


class GeometricExitStrategy:
    """
    Exit fractions proportional to q**t. For a given q, the threshold at each
    step is the entropy of the n_t-th most confident video still running, so
    that n_t videos leave at that step; q is found by bisection on log q as
    the largest value whose measured mean cost fits the budget.
    """

    def __init__(self, log_q_range: Tuple[float, float] = (-20.0, 20.0), iterations: int = 60):
        self.log_q_range = log_q_range
        self.iterations = iterations

    @staticmethod
    def target_counts(n: int, steps: int, log_q: float) -> np.ndarray:
        exponents = log_q * np.arange(1, steps + 1)
        fractions = np.exp(exponents - exponents.max())
        fractions /= fractions.sum()
        cumulative = np.rint(np.cumsum(fractions) * n).astype(np.int64)
        cumulative[-1] = n
        return np.diff(np.concatenate([[0], cumulative]))

    @staticmethod
    def thresholds_for(entropies: np.ndarray, counts: np.ndarray) -> ExitPolicy:
        steps = entropies.shape[1]
        running = np.ones(entropies.shape[0], dtype=bool)
        thresholds = []
        for t in range(steps - 1):
            remaining = np.sort(entropies[running, t])
            if counts[t] <= 0 or remaining.size == 0:
                thresholds.append(-math.inf)
                continue
            eta = float(remaining[min(counts[t], remaining.size) - 1])
            thresholds.append(eta)
            running &= ~(entropies[:, t] <= eta)
        thresholds.append(math.inf)
        return ExitPolicy(tuple(thresholds))

    def policy_at(self, entropies: np.ndarray, log_q: float) -> ExitPolicy:
        counts = self.target_counts(entropies.shape[0], entropies.shape[1], log_q)
        return self.thresholds_for(entropies, counts)

    def solve(self, records: Sequence[EvalRecord], flops: FlopsModel, budget: float) -> ExitPolicy:
        predictions, labels, entropies = _stack(records)
        minimum = flops.cost(1)
        if budget < minimum:
            raise InfeasibleBudgetError(budget, minimum)

        def measured(policy: ExitPolicy) -> float:
            return _evaluate_exits(predictions, labels, policy.exit_steps(entropies), flops).mean_cost

        lo, hi = self.log_q_range
        top = self.policy_at(entropies, hi)
        if measured(top) <= budget:
            return top
        best = self.policy_at(entropies, lo)
        if measured(best) > budget:
            best = ExitPolicy.fixed_length(flops.T_L, 1)
        for _ in range(self.iterations):
            mid = 0.5 * (lo + hi)
            candidate = self.policy_at(entropies, mid)
            if measured(candidate) <= budget:
                lo, best = mid, candidate
            else:
                hi = mid
        logger.debug(f"budget {budget}: log q = {lo:.4f}, thresholds {best.thresholds}")
        return best


def solve_thresholds(records: Sequence[EvalRecord], flops: FlopsModel, budget: float,
                     strategy: Optional[ThresholdStrategy] = None) -> ExitPolicy:
    return (strategy or GeometricExitStrategy()).solve(records, flops, budget)


def budget_grid(flops: FlopsModel, points: int) -> List[float]:
    """Evenly spaced budgets from the step-1 cost to the full cost"""
    if points < 1:
        raise ValidationError(f"need at least one budget point, got {points}")
    costs = flops.cumulative()
    if points == 1:
        return [float(costs[-1])]
    return [float(b) for b in np.linspace(costs[0], costs[-1], points)]


def budget_sweep(solve_records: Sequence[EvalRecord], flops: FlopsModel, budgets: Sequence[float],
                 eval_records: Optional[Sequence[EvalRecord]] = None,
                 strategy: Optional[ThresholdStrategy] = None, random_baseline_seed: Optional[int] = None,
                 threads: int = 1, on_infeasible: str = 'raise') -> pd.DataFrame:
    """
    One row per budget: thresholds solved on `solve_records`, measured on
    `eval_records` (the same set when none is given). With a baseline seed the
    row also carries the accuracy of random exit at the same per-step counts.
    Infeasible budgets raise, or become rows with an `error` entry when
    on_infeasible='record'.
    """
    budgets = [float(b) for b in budgets]
    if any(b2 < b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValidationError(f"budgets must be ascending, got {budgets}")
    if on_infeasible not in ('raise', 'record'):
        raise ValidationError(f"unknown on_infeasible mode '{on_infeasible}'")
    eval_records = eval_records if eval_records is not None else solve_records
    strategy = strategy or GeometricExitStrategy()

    def row(index_budget):
        index, budget = index_budget
        entry = {'budget': budget}
        try:
            policy = strategy.solve(solve_records, flops, budget)
        except InfeasibleBudgetError as e:
            if on_infeasible == 'raise':
                raise
            entry.update(accuracy=np.nan, mean_flops=np.nan, error=str(e))
            entry.update({f'exit_frac_{t + 1}': np.nan for t in range(flops.T_L)})
            return entry
        result = run_with_exit(eval_records, policy, flops)
        entry.update(accuracy=result.accuracy, mean_flops=result.mean_cost)
        entry.update({f'exit_frac_{t + 1}': float(f) for t, f in enumerate(result.fractions)})
        if random_baseline_seed is not None:
            rng = np.random.default_rng(np.random.SeedSequence([random_baseline_seed, index]))
            entry['random_accuracy'] = random_exit(eval_records, result.histogram, flops, rng).accuracy
        if on_infeasible == 'record':
            entry['error'] = ''
        return entry

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, enumerate(budgets)))
    else:
        rows = [row(item) for item in enumerate(budgets)]
    columns = ['budget', 'accuracy', 'mean_flops'] + [f'exit_frac_{t + 1}' for t in range(flops.T_L)]
    if random_baseline_seed is not None:
        columns.append('random_accuracy')
    if on_infeasible == 'record':
        columns.append('error')
    return pd.DataFrame(rows, columns=columns)

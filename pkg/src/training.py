"""
Training objective and loop.

The objective is the sum of three separately routed parts:

* the recognition loss, averaged with its random-crop twin, which trains the
  encoders and the classifier;
* the spatial policy loss on cropped global features, which trains the policy
  and the auxiliary head;
* the Monte Carlo expected frame loss, which trains the policy's temporal branch.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from autodiff import (Graph, Tensor, backward, cross_entropy, reshape, concat, scale, stop_gradient,
                      detached, global_average_pool, finite_diff_check)
from config import RunConfig
from error_handler import NumericError
from frame_sampler import downsample_weight_tensor, mc_expected_loss
from model import AdaFocusModel
from optimizer import OptimizerState, sgd_step
from patch_engine import feature_patch_crop, spatial_policy_loss, deformable_spatial_loss, random_specs

logger = logging.getLogger(__name__)

STREAM_SELECT = 0
STREAM_MC = 1
STREAM_CROP = 2
STREAM_BATCH = 3

LOSS_COLUMNS = ('total', 'l_prime', 'l_prime_random', 'l_spatial', 'l_temporal')


def rng_for(seed: int, step: int, stream: int, video_id: Optional[int] = None) -> np.random.Generator:
    entropy = [seed, step, stream] if video_id is None else [seed, step, stream, video_id]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def per_frame_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -log_probs[np.arange(labels.shape[0]), labels]


@dataclass
class LossTerms:
    total: Tensor
    l_prime: Tensor
    l_prime_random: Optional[Tensor] = None
    l_spatial: Optional[Tensor] = None
    l_temporal: Optional[Tensor] = None

    def named(self) -> Dict[str, Tensor]:
        terms = {name: getattr(self, name) for name in LOSS_COLUMNS}
        return {name: t for name, t in terms.items() if t is not None}

    def values(self) -> Dict[str, float]:
        return {name: t.item() for name, t in self.named().items()}


def loss_columns(model: AdaFocusModel) -> List[str]:
    """Loss columns a configuration produces, in CSV order"""
    c = model.config
    columns = ['total', 'l_prime']
    if c.naive_objective:
        return columns
    if c.diversity_augmentation:
        columns.append('l_prime_random')
    if c.spatial_policy:
        columns.append('l_spatial')
    if c.dynamic_frame_sampling:
        columns.append('l_temporal')
    return columns


def compute_losses(model: AdaFocusModel, graph: Graph, p: Dict[str, Tensor], videos: np.ndarray,
                   labels: np.ndarray, video_ids: Sequence[int], step: int, seed: int):
    c = model.config
    labels = np.asarray(labels, dtype=np.int64)
    batch = labels.shape[0]
    select_rngs = [rng_for(seed, step, STREAM_SELECT, int(v)) for v in video_ids]
    trace = model.forward(graph, p, videos, training=True, rngs=select_rngs, live_specs=c.naive_objective)
    t = trace.tensors
    step_labels = np.repeat(labels, c.T_L)
    glance_labels = np.repeat(labels, c.T_G)

    ce_steps = cross_entropy(reshape(t['logits'], (batch * c.T_L, c.num_classes)), step_labels)
    if c.naive_objective:
        return LossTerms(total=ce_steps, l_prime=ce_steps), trace

    l_prime = ce_steps
    ce_global = None
    if c.aux_supervision:
        ce_global = cross_entropy(t['global'].logits, glance_labels)
        l_prime = l_prime + ce_global + cross_entropy(t['local'].logits, step_labels)
    objective = l_prime

    l_random = None
    if c.diversity_augmentation:
        crops = random_specs(rng_for(seed, step, STREAM_CROP), batch * c.T_L, c.H, c.W, c.P,
                             c.min_patch, deformable=c.deformable)
        rand_out = model.local_pass(p, t['frames'], model.constant_specs(graph, crops))
        features = concat([stop_gradient(t['global_at_steps']), rand_out.pooled], axis=1)
        rand_logits, _ = model.classify(p, reshape(features, (batch, c.T_L, -1)))
        l_random = cross_entropy(reshape(rand_logits, (batch * c.T_L, c.num_classes)), step_labels)
        if c.aux_supervision:
            l_random = l_random + stop_gradient(ce_global) + cross_entropy(rand_out.logits, step_labels)
        objective = scale(l_prime + l_random, 0.5)

    total = objective
    l_spatial = None
    if c.spatial_policy:
        specs = t['policy'].specs
        cropped = feature_patch_crop(stop_gradient(t['global'].features), *specs, c.H, c.W, c.P)
        ce_aux = spatial_policy_loss(global_average_pool(cropped), glance_labels, p['aux.w'], p['aux.b'])
        l_spatial = deformable_spatial_loss(ce_aux, specs[2], specs[3], c.H, c.W,
                                            c.alpha if c.deformable else 0.0, c.size_penalty_units)
        total = total + l_spatial

    l_temporal = None
    if c.dynamic_frame_sampling:
        frame_losses = per_frame_cross_entropy(detached(t['global'].logits), glance_labels)
        coarse = downsample_weight_tensor(t['policy'].weights, c.T_G)
        mc_rngs = [rng_for(seed, step, STREAM_MC, int(v)) for v in video_ids]
        l_temporal = mc_expected_loss(coarse, frame_losses.reshape(batch, c.T_G), c.temporal_select, c.M, mc_rngs)
        total = total + l_temporal

    return LossTerms(total, l_prime, l_random, l_spatial, l_temporal), trace


@dataclass
class StepResult:
    losses: Dict[str, float]
    grads: Dict[str, np.ndarray]
    metrics: Dict[str, float] = field(default_factory=dict)


def training_step(model: AdaFocusModel, videos: np.ndarray, labels: np.ndarray, video_ids: Sequence[int],
                  step: int, seed: int) -> StepResult:
    """One forward/backward pass over a batch; parameters are not touched"""
    graph = Graph()
    p = model.bind(graph)
    terms, trace = compute_losses(model, graph, p, videos, labels, video_ids, step, seed)
    losses = terms.values()
    for name, value in losses.items():
        if not np.isfinite(value):
            raise NumericError(f"Non-finite loss '{name}' at step {step}", name=name)
    grads = backward(graph, terms.total)
    named_grads = {name: grads.of(tensor) for name, tensor in p.items()}
    final_probs = trace.probs[:, -1]
    metrics = {
        'train_accuracy': float(np.mean(final_probs.argmax(axis=1) == np.asarray(labels))),
        'mean_patch_area': float(np.mean(trace.glance_specs[..., 2] * trace.glance_specs[..., 3])),
        'graph_nodes': float(len(graph)),
    }
    return StepResult(losses, named_grads, metrics)


def gradient_routing(model: AdaFocusModel, videos: np.ndarray, labels: np.ndarray,
                     video_ids: Sequence[int], step: int = 0, seed: int = 0) -> Dict[str, set]:
    """Loss term -> parameter groups that receive a non-zero gradient from it"""
    graph = Graph()
    p = model.bind(graph)
    terms, _ = compute_losses(model, graph, p, videos, labels, video_ids, step, seed)
    routing = {}
    for name, term in terms.named().items():
        if name == 'total':
            continue
        grads = backward(graph, term)
        routing[name] = {pname.split('.', 1)[0] for pname, tensor in p.items()
                         if np.any(grads.of(tensor) != 0)}
    return routing


def gradient_check_model(model: AdaFocusModel, videos: np.ndarray, labels: np.ndarray,
                         video_ids: Sequence[int], eps: float = 1e-6, coords_per_param: int = 3,
                         seed: int = 0, floor: float = 1e-6) -> Dict[str, float]:
    """Finite-difference check of the full objective, a few coordinates per parameter"""
    errors = {}
    rng = np.random.default_rng(seed)
    for name, value in model.params.items():
        def objective(graph: Graph, leaf: Tensor, name=name) -> Tensor:
            p = model.bind(graph, requires_grad=False)
            p[name] = leaf
            terms, _ = compute_losses(model, graph, p, videos, labels, video_ids, 0, seed)
            return terms.total
        errors[name] = finite_diff_check(objective, value, eps=eps, max_coords=coords_per_param,
                                         rng=rng, floor=floor)
    return errors


class Trainer:
    """Runs the optimisation loop and feeds the monitor"""

    def __init__(self, run_config: RunConfig, model: AdaFocusModel, monitor=None,
                 evaluator: Optional[Callable[[AdaFocusModel], Dict[str, float]]] = None):
        self.config = run_config
        self.model = model
        self.monitor = monitor
        self.evaluator = evaluator
        self.logger = logging.getLogger("Trainer")
        opt = run_config.optimizer
        self.state = OptimizerState(opt.group_rates(), max(run_config.steps, 1),
                                    momentum=opt.momentum, weight_decay=opt.weight_decay)
        self.last_good: Dict[str, np.ndarray] = {k: v.copy() for k, v in model.params.items()}

    def batches(self, n_videos: int):
        """Deterministic epoch-wise shuffling; yields index arrays"""
        rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, 0, STREAM_BATCH]))
        size = min(self.config.batch_size, n_videos)
        while True:
            order = rng.permutation(n_videos)
            for start in range(0, n_videos - size + 1, size):
                yield order[start:start + size]

    def fit(self, videos: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
        cfg = self.config
        self.logger.info(f" Training for {cfg.steps} steps on {len(labels)} videos")
        batches = self.batches(len(labels))
        started = time.time()
        last = {}
        for step in range(cfg.steps):
            idx = next(batches)
            tick = time.time()
            result = training_step(self.model, videos[idx], labels[idx], idx, step, cfg.seed)
            self.last_good = {k: v.copy() for k, v in self.model.params.items()}
            sgd_step(self.state, self.model.params, result.grads, step)
            lr = self.state.lr('local', step)
            last = result.losses
            if self.monitor:
                self.monitor.record_step(step, lr, result.losses, result.metrics, time.time() - tick)
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                rendered = ", ".join(f"{k}={v:.4f}" for k, v in result.losses.items())
                self.logger.info(f"   step {step}/{cfg.steps} lr={lr:.5f} {rendered}")
            if self.evaluator and ((step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1):
                scores = self.evaluator(self.model)
                if self.monitor:
                    self.monitor.record_eval(step, scores)
                self.logger.info(f"   eval @ {step}: " + ", ".join(f"{k}={v:.4f}" for k, v in scores.items()))
        self.last_good = {k: v.copy() for k, v in self.model.params.items()}
        elapsed = time.time() - started
        self.logger.info(f" Training finished in {elapsed:.1f}s")
        return last

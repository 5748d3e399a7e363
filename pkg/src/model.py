"""
Desk-scale adaptive video recognition network.

A cheap global encoder glances at T_G uniformly spaced frames; a two-branch
policy turns its features into frame-sampling weights over all T0 frames and
one patch spec per glance frame; an expensive local encoder processes a P x P
patch from each of T_L selected frames; the classifier combines pooled global
and local features into a prediction after every step.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import (Graph, Tensor, conv2d, relu, global_average_pool, linear, matmul, concat,
                      reshape, softmax, max_accumulate, stop_gradient, detached, kaiming_uniform,
                      conv_output_size)
from config import ModelConfig
from error_handler import ShapeError, ValidationError
from frame_sampler import (global_grid, grid_interpolation_matrix, deterministic_select,
                           sample_without_replacement, uniform_indices, upsample_weights)
from patch_engine import clamp_specs, policy_to_patch_tensors, crop_patches, center_specs

logger = logging.getLogger(__name__)

SpecTensors = Tuple[Tensor, Tensor, Tensor, Tensor]


@dataclass
class GlobalOutput:
    features: Tensor
    pooled: Tensor
    logits: Tensor


@dataclass
class PolicyOutput:
    frame_logits: Tensor
    weights: Tensor
    specs: SpecTensors


@dataclass
class LocalOutput:
    pooled: Tensor
    logits: Tensor


@dataclass
class ForwardTrace:
    """Numpy view of one forward pass; B videos"""
    weights: np.ndarray
    glance_specs: np.ndarray
    selected: np.ndarray
    local_specs: np.ndarray
    probs: np.ndarray
    global_pooled: np.ndarray
    local_pooled: np.ndarray
    global_logits: np.ndarray
    local_logits: np.ndarray
    tensors: Dict[str, object] = field(default_factory=dict, repr=False)


def encoder_feature_size(size: int, stages: int) -> int:
    for _ in range(stages):
        size = conv_output_size(size, 3, 2, 1)
    return size


def temporal_shift_matrices(T: int) -> Tuple[np.ndarray, np.ndarray]:
    """(previous, next) frame selectors, replicating the sequence ends"""
    prev = np.zeros((T, T))
    nxt = np.zeros((T, T))
    for t in range(T):
        prev[t, max(t - 1, 0)] = 1.0
        nxt[t, min(t + 1, T - 1)] = 1.0
    return prev, nxt


def cumulative_average_matrix(T: int) -> np.ndarray:
    mat = np.tril(np.ones((T, T)))
    return mat / mat.sum(axis=1, keepdims=True)


class AdaFocusModel:
    def __init__(self, config: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None, seed: int = 0):
        self.config = config.validate()
        self.global_hw = (encoder_feature_size(config.H, len(config.global_widths)),
                          encoder_feature_size(config.W, len(config.global_widths)))
        self.local_hw = (encoder_feature_size(config.P, len(config.local_widths)),
                         encoder_feature_size(config.P, len(config.local_widths)))
        self.params = params if params is not None else self.init_params(config, np.random.default_rng(seed))
        self._check_params()
        self._interp = grid_interpolation_matrix(config.T0, config.T_G)

    # parameters -------------------------------------------------------------

    @staticmethod
    def init_params(config: ModelConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        params: Dict[str, np.ndarray] = {}

        def conv(name, out_c, in_c, k):
            params[f'{name}.w'] = kaiming_uniform(rng, (out_c, in_c, k, k), in_c * k * k)
            params[f'{name}.b'] = np.zeros(out_c)

        def dense(name, fan_in, fan_out, zero=False):
            params[f'{name}.w'] = (np.zeros((fan_in, fan_out)) if zero
                                   else kaiming_uniform(rng, (fan_in, fan_out), fan_in))
            params[f'{name}.b'] = np.zeros(fan_out)

        for prefix, widths in (('global', config.global_widths), ('local', config.local_widths)):
            in_c = config.C
            for i, width in enumerate(widths):
                conv(f'{prefix}.conv{i}', width, in_c, 3)
                in_c = width
            dense(f'{prefix}.fc', in_c, config.num_classes)

        d_g, d_l = config.global_widths[-1], config.local_widths[-1]
        dense('classifier', d_g + d_l, config.num_classes)
        dense('aux', d_g, config.num_classes)

        hidden, cs = config.policy_hidden, config.policy_channels
        gh = encoder_feature_size(config.H, len(config.global_widths))
        gw = encoder_feature_size(config.W, len(config.global_widths))
        dense('policy.t1', 3 * d_g, hidden)
        dense('policy.t2', 3 * hidden, hidden)
        # zero heads: the untrained policy is uniform in time and centred in space
        dense('policy.t3', hidden, 1, zero=True)
        conv('policy.s0', cs, d_g, 1)
        conv('policy.s1', cs, 3 * cs, 3)
        conv('policy.s2', cs, 3 * cs, 3)
        dense('policy.s3', cs * gh * gw, 4, zero=True)
        return params

    def _check_params(self):
        expected = self.init_params(self.config, np.random.default_rng(0))
        missing = sorted(set(expected) - set(self.params))
        extra = sorted(set(self.params) - set(expected))
        if missing or extra:
            raise ValidationError(f"Parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, value in expected.items():
            if self.params[name].shape != value.shape:
                raise ShapeError(f'parameter {name}', self.params[name].shape, value.shape)

    def bind(self, graph: Graph, requires_grad: bool = True) -> Dict[str, Tensor]:
        return {name: graph.leaf(value, name=name, requires_grad=requires_grad)
                for name, value in self.params.items()}

    # building blocks ------------------------------------------------------------

    @staticmethod
    def _encode(p: Dict[str, Tensor], prefix: str, x: Tensor, stages: int) -> Tensor:
        for i in range(stages):
            x = relu(conv2d(x, p[f'{prefix}.conv{i}.w'], p[f'{prefix}.conv{i}.b'], stride=2, pad=1))
        return x

    @staticmethod
    def _temporal_mix(x: Tensor) -> Tensor:
        """(B, T, D) -> (B, T, 3D): [previous, current, next] with replicated ends"""
        graph = x.graph
        prev, nxt = temporal_shift_matrices(x.shape[1])
        return concat([matmul(graph.constant(prev), x), x, matmul(graph.constant(nxt), x)], axis=2)

    def _check_frames(self, frames: Tensor, size: Tuple[int, int], op: str):
        c = self.config
        if frames.data.ndim != 4 or frames.shape[1:] != (c.C,) + size:
            raise ShapeError(op, frames.shape, (None, c.C) + size)

    # passes -----------------------------------------------------------------

    def global_pass(self, p: Dict[str, Tensor], frames: Tensor) -> GlobalOutput:
        """(N, C, H, W) glance frames -> feature maps, pooled features, FC_G logits"""
        c = self.config
        self._check_frames(frames, (c.H, c.W), 'global_pass')
        features = self._encode(p, 'global', frames, len(c.global_widths))
        pooled = global_average_pool(features)
        return GlobalOutput(features, pooled, linear(pooled, p['global.fc.w'], p['global.fc.b']))

    def policy_pass(self, p: Dict[str, Tensor], features: Tensor, batch: int) -> PolicyOutput:
        c = self.config
        T = c.T_G
        if c.stop_gradient_policy_input:
            features = stop_gradient(features)
        n, d, h, w = features.shape
        if n != batch * T:
            raise ShapeError('policy_pass', features.shape, (batch * T, d, h, w))

        # temporal branch: pooled features -> two temporal convs -> per-frame logit
        x = reshape(global_average_pool(features), (batch, T, d))
        x = relu(linear(self._temporal_mix(x), p['policy.t1.w'], p['policy.t1.b']))
        x = relu(linear(self._temporal_mix(x), p['policy.t2.w'], p['policy.t2.b']))
        frame_logits = reshape(linear(x, p['policy.t3.w'], p['policy.t3.b']), (batch, T))
        weights = upsample_weights(frame_logits, c.T0)

        # spatial branch: channel reduce -> two spatio-temporal convs -> 4 raw values
        cs = c.policy_channels
        y = relu(conv2d(features, p['policy.s0.w'], p['policy.s0.b']))
        for name in ('policy.s1', 'policy.s2'):
            mixed = self._temporal_mix(reshape(y, (batch, T, cs * h * w)))
            y = relu(conv2d(reshape(mixed, (batch * T, 3 * cs, h, w)), p[f'{name}.w'], p[f'{name}.b'], pad=1))
        raw = linear(reshape(y, (batch * T, cs * h * w)), p['policy.s3.w'], p['policy.s3.b'])
        specs = policy_to_patch_tensors(raw, c.H, c.W, c.P, c.min_patch, c.deformable)
        return PolicyOutput(frame_logits, weights, specs)

    def local_pass(self, p: Dict[str, Tensor], frames: Tensor, specs: SpecTensors) -> LocalOutput:
        """Crop P x P patches from (N, C, H, W) frames and encode them"""
        c = self.config
        self._check_frames(frames, (c.H, c.W), 'local_pass')
        patches = crop_patches(frames, *specs, c.P)
        features = self._encode(p, 'local', patches, len(c.local_widths))
        pooled = global_average_pool(features)
        return LocalOutput(pooled, linear(pooled, p['local.fc.w'], p['local.fc.b']))

    def classify(self, p: Dict[str, Tensor], features: Tensor) -> Tuple[Tensor, Tensor]:
        """(B, T, F) per-step [global, local] features -> logits and probabilities (B, T, K)"""
        if features.data.ndim != 3 or features.shape[1] < 1:
            raise ValidationError(f"classify needs at least one step of features, got {features.shape}")
        if self.config.classifier == 'max':
            logits = linear(max_accumulate(features, axis=1), p['classifier.w'], p['classifier.b'])
        else:
            step_logits = linear(features, p['classifier.w'], p['classifier.b'])
            avg = features.graph.constant(cumulative_average_matrix(features.shape[1]))
            logits = matmul(avg, step_logits)
        return logits, softmax(logits)

    # frame and patch bookkeeping -------------------------------------------------

    def select_frames(self, weights: np.ndarray, training: bool,
                      rngs: Optional[Sequence[np.random.Generator]] = None) -> np.ndarray:
        c = self.config
        batch = weights.shape[0]
        if not c.dynamic_frame_sampling:
            return np.tile(uniform_indices(c.T0, c.T_L), (batch, 1))
        rows = []
        for b in range(batch):
            w = weights[b] / weights[b].sum()
            if training:
                picked = sorted(sample_without_replacement(w, c.T_L, rngs[b]).indices)
            else:
                picked = deterministic_select(w, c.T_L).indices
            rows.append(picked)
        return np.asarray(rows, dtype=np.int64)

    def selection_matrix(self, selected: np.ndarray) -> np.ndarray:
        """(B*T_L, B*T_G) block matrix interpolating glance-grid rows at the selected frames"""
        c = self.config
        batch = selected.shape[0]
        mat = np.zeros((batch * c.T_L, batch * c.T_G))
        for b in range(batch):
            block = self._interp[:, selected[b]].T
            mat[b * c.T_L:(b + 1) * c.T_L, b * c.T_G:(b + 1) * c.T_G] = block
        return mat

    def local_specs(self, graph: Graph, glance_specs: SpecTensors, selected: np.ndarray,
                    live: bool) -> SpecTensors:
        c = self.config
        interp = graph.constant(self.selection_matrix(selected))
        fields = tuple(matmul(interp, f) for f in glance_specs)
        if live:
            return fields
        values = np.concatenate([detached(f) for f in fields], axis=1)
        clamped = clamp_specs(values, c.H, c.W, c.min_patch)
        return tuple(graph.constant(clamped[:, k:k + 1]) for k in range(4))

    def constant_specs(self, graph: Graph, specs: np.ndarray) -> SpecTensors:
        return tuple(graph.constant(specs[:, k:k + 1]) for k in range(4))

    # full pass ---------------------------------------------------------------

    def forward(self, graph: Graph, p: Dict[str, Tensor], videos: np.ndarray, training: bool = False,
                rngs: Optional[Sequence[np.random.Generator]] = None, live_specs: bool = False) -> ForwardTrace:
        """videos (B, T0, C, H, W) -> ForwardTrace; tensors kept for loss assembly"""
        c = self.config
        videos = np.asarray(videos, dtype=np.float64)
        if videos.ndim != 5 or videos.shape[1:] != (c.T0, c.C, c.H, c.W):
            raise ShapeError('forward', videos.shape, (None, c.T0, c.C, c.H, c.W))
        batch = videos.shape[0]
        grid = global_grid(c.T0, c.T_G)

        glance = graph.constant(videos[:, grid].reshape(batch * c.T_G, c.C, c.H, c.W))
        g_out = self.global_pass(p, glance)
        policy = self.policy_pass(p, g_out.features, batch)
        if not c.spatial_policy:
            policy.specs = self.constant_specs(graph, center_specs(batch * c.T_G, c.H, c.W, c.P))

        weights = detached(policy.weights)
        selected = self.select_frames(weights, training, rngs)
        specs = self.local_specs(graph, policy.specs, selected, live=live_specs and c.spatial_policy)
        local_frames = graph.constant(videos[np.arange(batch)[:, None], selected]
                                      .reshape(batch * c.T_L, c.C, c.H, c.W))
        l_out = self.local_pass(p, local_frames, specs)

        global_at_steps = self.global_features_at(graph, g_out.pooled, selected)
        features = reshape(concat([global_at_steps, l_out.pooled], axis=1), (batch, c.T_L, -1))
        logits, probs = self.classify(p, features)

        glance_specs = np.concatenate([f.data for f in policy.specs], axis=1).reshape(batch, c.T_G, 4)
        local_specs = np.concatenate([f.data for f in specs], axis=1).reshape(batch, c.T_L, 4)
        return ForwardTrace(
            weights=weights,
            glance_specs=glance_specs,
            selected=selected,
            local_specs=local_specs,
            probs=probs.data,
            global_pooled=g_out.pooled.data,
            local_pooled=l_out.pooled.data,
            global_logits=g_out.logits.data,
            local_logits=l_out.logits.data,
            tensors={'global': g_out, 'policy': policy, 'local': l_out, 'logits': logits,
                     'probs': probs, 'global_at_steps': global_at_steps, 'frames': local_frames},
        )

    def global_features_at(self, graph: Graph, pooled: Tensor, selected: np.ndarray) -> Tensor:
        """Pooled glance features interpolated at the selected frames; zeros when reuse is off"""
        if not self.config.reuse_global_features:
            return graph.constant(np.zeros((selected.size, pooled.shape[1])))
        return matmul(graph.constant(self.selection_matrix(selected)), pooled)

    def predict(self, videos: np.ndarray) -> ForwardTrace:
        graph = Graph()
        return self.forward(graph, self.bind(graph, requires_grad=False), videos, training=False)

    def glance_specs_at_all_frames(self, glance_specs: np.ndarray) -> np.ndarray:
        """(B, T_G, 4) -> (B, T0, 4) specs for every frame of the video"""
        return np.einsum('kn,bkf->bnf', self._interp, glance_specs)

    def param_groups(self) -> Dict[str, List[str]]:
        groups: Dict[str, List[str]] = {}
        for name in self.params:
            groups.setdefault(name.split('.', 1)[0], []).append(name)
        return groups

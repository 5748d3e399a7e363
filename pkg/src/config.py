#!/usr/bin/env python3
"""
Run configuration for the adaptive video recognition pipeline.

All knobs live in dataclasses so a run can be serialized to canonical JSON,
hashed, and reproduced. Machine-local settings (output directory, worker
threads, log level) come from the environment or a .env file instead.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, asdict, replace
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from error_handler import ConfigError


CLASSIFIER_VARIANTS = ('max', 'average')
SIZE_PENALTY_UNITS = ('normalized', 'pixels')


@dataclass(frozen=True)
class ModelConfig:
    T0: int = 16
    T_G: int = 8
    T_L: int = 4
    H: int = 32
    W: int = 32
    C: int = 1
    P: int = 12
    p_min: Optional[float] = None
    alpha: float = 0.5
    M: int = 128
    num_classes: int = 8
    global_widths: Tuple[int, ...] = (8, 16, 32)
    local_widths: Tuple[int, ...] = (32, 64, 128)
    policy_channels: int = 16
    policy_hidden: int = 32
    classifier: str = 'max'
    size_penalty_units: str = 'pixels'
    # technique switches; each one maps to an ablation name in ABLATION_FLAGS
    deformable: bool = True
    diversity_augmentation: bool = True
    aux_supervision: bool = True
    stop_gradient_policy_input: bool = True
    dynamic_frame_sampling: bool = True
    spatial_policy: bool = True
    naive_objective: bool = False
    reuse_global_features: bool = True

    @property
    def min_patch(self) -> float:
        return float(self.p_min) if self.p_min is not None else self.P / 2.0

    @property
    def temporal_select(self) -> int:
        """Selections drawn on the down-sampled T_G grid during training"""
        return max(1, (self.T_L * self.T_G) // self.T0)

    def validate(self):
        checks = {
            'T_L <= T0': 1 <= self.T_L <= self.T0,
            'T_G <= T0': 1 <= self.T_G <= self.T0,
            'P <= min(H, W)': 1 <= self.P <= min(self.H, self.W),
            'p_min within (0, P]': 0 < self.min_patch <= self.P,
            'alpha >= 0': self.alpha >= 0,
            'M >= 1': self.M >= 1,
            'num_classes >= 2': self.num_classes >= 2,
            'C >= 1': self.C >= 1,
            'encoder widths non-empty': bool(self.global_widths) and bool(self.local_widths),
            'encoder widths positive': all(w > 0 for w in self.global_widths + self.local_widths),
            'classifier variant known': self.classifier in CLASSIFIER_VARIANTS,
            'size penalty units known': self.size_penalty_units in SIZE_PENALTY_UNITS,
        }
        failed = [name for name, ok in checks.items() if not ok]
        if failed:
            raise ConfigError(f"Invalid model config: {failed}")
        return self


@dataclass(frozen=True)
class SynthConfig:
    T0: int = 16
    H: int = 32
    W: int = 32
    C: int = 1
    num_classes: int = 8
    glyph_min: int = 6
    glyph_max: int = 10
    informative_frames: int = 5
    drift: float = 1.5
    noise_std: float = 0.1
    glyph_intensity: float = 1.0
    distractors: int = 2
    distractor_size: int = 3
    scattered: bool = False
    seed: int = 0

    def validate(self):
        margin = 2 * int(-(-self.drift // 1))
        checks = {
            'num_classes >= 2': self.num_classes >= 2,
            'num_classes <= 64': self.num_classes <= 64,
            # glyph bitmaps are 5x5; smaller renders would merge classes
            '5 <= glyph_min <= glyph_max': 5 <= self.glyph_min <= self.glyph_max,
            'glyph_max <= min(H, W) / 2': self.glyph_max <= min(self.H, self.W) / 2,
            'glyph fits with drift margin': self.glyph_max + margin <= min(self.H, self.W),
            '1 <= informative_frames <= T0': 1 <= self.informative_frames <= self.T0,
            'drift >= 0': self.drift >= 0,
            'noise_std >= 0': self.noise_std >= 0,
            'signal floor': self.glyph_intensity >= 3 * self.noise_std and self.glyph_intensity > 0,
            'distractors >= 0': self.distractors >= 0,
            'distractor fits': 1 <= self.distractor_size <= min(self.H, self.W),
            'C in (1, 3)': self.C in (1, 3),
        }
        failed = [name for name, ok in checks.items() if not ok]
        if failed:
            raise ConfigError(f"Invalid synth config: {failed}")
        return self


@dataclass(frozen=True)
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_global: float = 0.05
    lr_local: float = 0.05
    lr_classifier: float = 0.1
    lr_policy: float = 0.01
    lr_aux: float = 0.05

    def group_rates(self) -> Dict[str, float]:
        return {
            'global': self.lr_global,
            'local': self.lr_local,
            'classifier': self.lr_classifier,
            'policy': self.lr_policy,
            'aux': self.lr_aux,
        }

    def validate(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or any(lr < 0 for lr in self.group_rates().values()):
            raise ConfigError("learning rates and weight decay must be non-negative")
        return self


# ablation name -> (ModelConfig field, value when ablated)
ABLATION_FLAGS = {
    'aux_supervision': ('aux_supervision', False),
    'diversity_augmentation': ('diversity_augmentation', False),
    'stop_gradient': ('stop_gradient_policy_input', False),
    'deformable': ('deformable', False),
    'dynamic_frame_sampling': ('dynamic_frame_sampling', False),
    'spatial_policy': ('spatial_policy', False),
    'naive_objective': ('naive_objective', True),
    'reuse_global_features': ('reuse_global_features', False),
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    steps: int = 3000
    batch_size: int = 8
    eval_every: int = 250
    log_every: int = 50
    holdout_fraction: float = 0.2
    output_dir: str = 'runs'

    def validate(self):
        self.model.validate()
        self.synth.validate()
        self.optimizer.validate()
        mismatched = [name for name in ('T0', 'H', 'W', 'C', 'num_classes')
                      if getattr(self.model, name) != getattr(self.synth, name)]
        if mismatched:
            raise ConfigError(f"Model and synth configs disagree on {mismatched}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError(f"holdout_fraction must lie in [0, 1), got {self.holdout_fraction}")
        return self

    def ablate(self, *names: str) -> 'RunConfig':
        changes = {}
        for name in names:
            if name not in ABLATION_FLAGS:
                raise ConfigError(f"Unknown ablation '{name}'; choose from {sorted(ABLATION_FLAGS)}")
            attr, value = ABLATION_FLAGS[name]
            changes[attr] = value
        if changes.get('naive_objective'):
            changes.update(aux_supervision=False, diversity_augmentation=False)
        return replace(self, model=replace(self.model, **changes))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        data = dict(data)
        nested = {'model': ModelConfig, 'synth': SynthConfig, 'optimizer': OptimizerConfig}
        for key, sub_cls in nested.items():
            if key in data:
                data[key] = _build(sub_cls, data[key], key)
        return _build(cls, data, 'run')

    @classmethod
    def from_json(cls, text: str) -> 'RunConfig':
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("Config JSON must be an object")
        return cls.from_dict(data)

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop('output_dir')
        return hashlib.sha256(canonical_json(payload).encode('utf-8')).hexdigest()[:12]

    def run_dir(self) -> str:
        return os.path.join(self.output_dir, f"run-{self.config_hash()}")


def _build(cls, data: Any, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {unknown}")
    kwargs = {}
    for name, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def canonical_json(data: Dict[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'))


# reference run: size penalty in frame-normalised units
DESK_DEFAULT = RunConfig(model=ModelConfig(size_penalty_units='normalized'))

MICRO_MODEL = ModelConfig(
    T0=4, T_G=4, T_L=2, H=8, W=8, P=4, M=8, num_classes=2,
    global_widths=(2, 3), local_widths=(3, 4), policy_channels=2, policy_hidden=3,
)


def env_settings() -> Dict[str, Any]:
    """Machine-local overrides: ADAFOCUS_OUTPUT_DIR, ADAFOCUS_THREADS, ADAFOCUS_LOG_LEVEL"""
    load_dotenv()
    try:
        threads = int(os.getenv('ADAFOCUS_THREADS', '1'))
    except ValueError as e:
        raise ConfigError(f"ADAFOCUS_THREADS must be an integer: {e}") from e
    return {
        'output_dir': os.getenv('ADAFOCUS_OUTPUT_DIR', 'runs'),
        'threads': max(1, threads),
        'log_level': os.getenv('ADAFOCUS_LOG_LEVEL', 'INFO').upper(),
    }

"""
Training run monitoring.

Per-step losses and learning rates are kept in memory, checked against alert
thresholds, written as a metrics CSV and exported as a Prometheus text file.
Wall time and process resources go to the Prometheus file and the run summary
only, so the CSV body is reproducible across reruns.
"""

import logging
import math
import os
import time
from dataclasses import dataclass, asdict, field
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import pandas as pd
import psutil
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile


def setup_logging(log_dir: Optional[str] = None, verbose: bool = False, level: str = 'INFO') -> logging.Logger:
    """Detailed file log, metrics file log and console, all on the root logger"""
    detailed_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s'
    )
    simple_formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
    console_level = logging.DEBUG if verbose else getattr(logging, level.upper(), logging.INFO)

    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    root.handlers.clear()

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, 'adafocus_detailed.log'), encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(detailed_formatter)
        root.addHandler(file_handler)

        metrics_handler = logging.FileHandler(os.path.join(log_dir, 'adafocus_metrics.log'), encoding='utf-8')
        metrics_handler.setLevel(logging.INFO)
        metrics_handler.setFormatter(simple_formatter)
        root.addHandler(metrics_handler)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(console_level)
    console_handler.setFormatter(simple_formatter)
    root.addHandler(console_handler)
    return logging.getLogger("TrainingMonitor")


@dataclass
class StepMetrics:
    step: int
    lr: float
    losses: Dict[str, float]
    metrics: Dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    memory_mb: float = 0.0
    cpu_percent: float = 0.0

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.losses.values())

    def to_dict(self) -> Dict[str, float]:
        data = asdict(self)
        data.update(data.pop('losses'))
        data.update(data.pop('metrics'))
        return data


@dataclass
class RunSummary:
    run_name: str
    steps: int = 0
    total_seconds: float = 0.0
    final_losses: Dict[str, float] = field(default_factory=dict)
    final_eval: Dict[str, float] = field(default_factory=dict)
    peak_memory_mb: float = 0.0
    alerts: int = 0

    @property
    def steps_per_second(self) -> float:
        if self.total_seconds == 0:
            return 0.0
        return self.steps / self.total_seconds

    @property
    def final_loss(self) -> float:
        return self.final_losses.get('total', math.nan)

    def to_dict(self):
        data = asdict(self)
        data.update(steps_per_second=self.steps_per_second, final_loss=self.final_loss)
        return data


class AlertManager:
    """Flags non-finite or exploding losses, slow steps and memory growth"""

    def __init__(self, alert_thresholds: Dict[str, float] = None):
        self.alert_thresholds = alert_thresholds or {
            'loss_above': 1e3,
            'step_seconds_above': 30.0,
            'memory_usage_above_mb': 4096.0,
        }
        self.alerts_triggered = []

    def check_step(self, metrics: StepMetrics) -> List[str]:
        alerts = []
        if not metrics.finite:
            bad = [k for k, v in metrics.losses.items() if not math.isfinite(v)]
            alerts.append(f"Non-finite loss: {bad}")
        elif metrics.losses.get('total', 0.0) > self.alert_thresholds['loss_above']:
            alerts.append(f"Exploding loss: {metrics.losses['total']:.3g}")

        if metrics.seconds > self.alert_thresholds['step_seconds_above']:
            alerts.append(f"Slow step: {metrics.seconds:.1f}s")

        if metrics.memory_mb > self.alert_thresholds['memory_usage_above_mb']:
            alerts.append(f"High memory usage: {metrics.memory_mb:.1f}MB")

        for alert in alerts:
            self.alerts_triggered.append({
                'timestamp': datetime.now().isoformat(),
                'step': metrics.step,
                'alert': alert
            })
        return alerts


class TrainingMonitor:
    def __init__(self, loss_columns: Sequence[str], eval_columns: Sequence[str] = (),
                 run_name: str = "adafocus", metric_columns: Sequence[str] = ('train_accuracy', 'mean_patch_area')):
        self.run_name = run_name
        self.loss_columns = list(loss_columns)
        self.eval_columns = list(eval_columns)
        self.metric_columns = list(metric_columns)
        self.history: List[StepMetrics] = []
        self.evals: Dict[int, Dict[str, float]] = {}
        self.alert_manager = AlertManager()
        self.summary = RunSummary(run_name)
        self.logger = logging.getLogger("TrainingMonitor")
        self._process = psutil.Process()
        self._started = time.time()

        self.registry = CollectorRegistry()
        self.steps_total = Counter('adafocus_steps_total', 'Optimisation steps completed',
                                   registry=self.registry)
        self.loss_gauge = Gauge('adafocus_loss', 'Most recent loss value', ['term'], registry=self.registry)
        self.lr_gauge = Gauge('adafocus_learning_rate', 'Learning rate of the local group',
                              registry=self.registry)
        self.step_duration = Histogram('adafocus_step_duration_seconds', 'Wall time per training step',
                                       registry=self.registry)
        self.eval_gauge = Gauge('adafocus_eval', 'Most recent evaluation score', ['metric'],
                                registry=self.registry)
        self.memory_gauge = Gauge('adafocus_peak_memory_mb', 'Peak resident memory', registry=self.registry)
        self.alerts_total = Counter('adafocus_alerts_total', 'Alerts triggered', registry=self.registry)

    def _capture_resources(self):
        try:
            return self._process.memory_info().rss / 1024 / 1024, self._process.cpu_percent()
        except psutil.Error as e:
            self.logger.warning(f"Could not capture system metrics: {e}")
            return 0.0, 0.0

    def record_step(self, step: int, lr: float, losses: Dict[str, float], metrics: Dict[str, float] = None,
                    seconds: float = 0.0) -> List[str]:
        memory_mb, cpu = self._capture_resources()
        entry = StepMetrics(step, float(lr), dict(losses), dict(metrics or {}), seconds, memory_mb, cpu)
        self.history.append(entry)

        self.steps_total.inc()
        self.lr_gauge.set(entry.lr)
        self.step_duration.observe(seconds)
        for term, value in entry.losses.items():
            self.loss_gauge.labels(term=term).set(value)

        self.summary.steps = len(self.history)
        self.summary.final_losses = entry.losses
        self.summary.peak_memory_mb = max(self.summary.peak_memory_mb, memory_mb)
        self.memory_gauge.set(self.summary.peak_memory_mb)

        alerts = self.alert_manager.check_step(entry)
        for alert in alerts:
            self.alerts_total.inc()
            self.logger.warning(f"   ALERT at step {step}: {alert}")
        self.summary.alerts = len(self.alert_manager.alerts_triggered)
        return alerts

    def record_eval(self, step: int, scores: Dict[str, float]):
        self.evals[step] = dict(scores)
        self.summary.final_eval = dict(scores)
        for name, value in scores.items():
            self.eval_gauge.labels(metric=name).set(value)

    def columns(self) -> List[str]:
        return ['step', 'lr'] + self.loss_columns + self.metric_columns + self.eval_columns

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for entry in self.history:
            row = {'step': entry.step, 'lr': entry.lr}
            row.update({k: entry.losses.get(k) for k in self.loss_columns})
            row.update({k: entry.metrics.get(k) for k in self.metric_columns})
            row.update(self.evals.get(entry.step, {}))
            rows.append(row)
        return pd.DataFrame(rows, columns=self.columns())

    def write_csv(self, path: str):
        self.to_frame().to_csv(path, index=False)
        self.logger.debug(f"Metrics CSV written: {path}")

    def write_prometheus(self, path: str):
        write_to_textfile(path, self.registry)
        self.logger.debug(f"Prometheus metrics written: {path}")

    def finish(self) -> RunSummary:
        self.summary.total_seconds = time.time() - self._started
        s = self.summary
        self.logger.info(" TRAINING RUN COMPLETED")
        self.logger.info(f"   Run: {s.run_name}")
        self.logger.info(f"   Steps: {s.steps:,} in {s.total_seconds:.1f}s ({s.steps_per_second:.2f} steps/s)")
        self.logger.info(f"   Final loss: {s.final_loss:.4f}")
        self.logger.info(f"   Peak memory: {s.peak_memory_mb:.1f} MB")
        if s.alerts:
            self.logger.warning(f"   Alerts triggered: {s.alerts}")
        return s

    def print_dashboard(self):
        s = self.summary
        print("\n" + "=" * 70)
        print(" TRAINING DASHBOARD")
        print("=" * 70)
        print(f"   Run: {s.run_name}")
        print(f"   Steps: {s.steps:,}  ({s.steps_per_second:.2f} steps/s)")
        for name, value in s.final_losses.items():
            print(f"   {name:>16}: {value:.4f}")
        for name, value in s.final_eval.items():
            print(f"   {name:>16}: {value:.4f}")
        print(f"   Peak memory: {s.peak_memory_mb:.1f} MB")
        if self.alert_manager.alerts_triggered:
            print(f"\n   ALERTS ({len(self.alert_manager.alerts_triggered)}):")
            for alert in self.alert_manager.alerts_triggered[-5:]:
                print(f"     - step {alert['step']}: {alert['alert']}")
        print("=" * 70)

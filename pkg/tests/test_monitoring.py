import logging
import math

import pandas as pd
import pytest

from evaluation import EVAL_COLUMNS
from monitoring import AlertManager, StepMetrics, TrainingMonitor, setup_logging


@pytest.fixture
def monitor():
    return TrainingMonitor(['total', 'l_prime'], EVAL_COLUMNS, run_name='unit')


def test_csv_columns_and_rows(monitor, tmp_path):
    monitor.record_step(0, 0.05, {'total': 2.0, 'l_prime': 1.5}, {'train_accuracy': 0.5, 'mean_patch_area': 80.0})
    monitor.record_step(1, 0.04, {'total': 1.8, 'l_prime': 1.4}, {'train_accuracy': 0.75, 'mean_patch_area': 70.0})
    monitor.record_eval(1, {'eval_accuracy': 0.5, 'center_error': 2.0, 'iou': 0.3, 'recall': 0.6})
    path = tmp_path / 'metrics.csv'
    monitor.write_csv(str(path))

    frame = pd.read_csv(path)
    assert frame.columns.tolist() == ['step', 'lr', 'total', 'l_prime', 'train_accuracy', 'mean_patch_area',
                                      'eval_accuracy', 'center_error', 'iou', 'recall']
    assert frame['total'].tolist() == [2.0, 1.8]
    assert math.isnan(frame['eval_accuracy'][0])
    assert frame['eval_accuracy'][1] == 0.5


def test_csv_has_no_timing_columns(monitor):
    monitor.record_step(0, 0.1, {'total': 1.0, 'l_prime': 1.0}, seconds=3.0)
    assert 'seconds' not in monitor.to_frame().columns


def test_prometheus_file(monitor, tmp_path):
    monitor.record_step(0, 0.05, {'total': 2.0, 'l_prime': 1.5})
    monitor.record_eval(0, {'eval_accuracy': 0.25})
    path = tmp_path / 'metrics.prom'
    monitor.write_prometheus(str(path))
    text = path.read_text()
    assert 'adafocus_steps_total 1.0' in text
    assert 'adafocus_loss{term="total"} 2.0' in text
    assert 'adafocus_eval{metric="eval_accuracy"} 0.25' in text


def test_summary(monitor):
    for step in range(3):
        monitor.record_step(step, 0.1, {'total': 1.0 - 0.1 * step, 'l_prime': 0.5})
    summary = monitor.finish()
    assert summary.steps == 3
    assert summary.final_loss == pytest.approx(0.8)
    assert summary.to_dict()['run_name'] == 'unit'


class TestAlerts:
    def test_non_finite_loss(self):
        alerts = AlertManager().check_step(StepMetrics(4, 0.1, {'total': float('nan')}))
        assert alerts and 'Non-finite' in alerts[0]

    def test_exploding_loss(self):
        alerts = AlertManager().check_step(StepMetrics(4, 0.1, {'total': 1e5}))
        assert any('Exploding' in a for a in alerts)

    def test_slow_step_and_memory(self):
        manager = AlertManager({'loss_above': 10.0, 'step_seconds_above': 1.0, 'memory_usage_above_mb': 10.0})
        alerts = manager.check_step(StepMetrics(0, 0.1, {'total': 1.0}, seconds=2.0, memory_mb=20.0))
        assert len(alerts) == 2
        assert manager.alerts_triggered[0]['step'] == 0

    def test_monitor_counts_alerts(self, monitor):
        monitor.record_step(0, 0.1, {'total': float('inf'), 'l_prime': 1.0})
        assert monitor.summary.alerts == 1


def test_setup_logging_writes_files(tmp_path):
    setup_logging(str(tmp_path), verbose=True)
    logging.getLogger('unit').info('hello from the test')
    assert 'hello from the test' in (tmp_path / 'adafocus_detailed.log').read_text()
    assert 'hello from the test' in (tmp_path / 'adafocus_metrics.log').read_text()
    setup_logging()

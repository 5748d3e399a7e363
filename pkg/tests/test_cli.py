import json
import os
from dataclasses import replace

import pytest

from cli import build_parser, main
from config import RunConfig


@pytest.fixture(autouse=True)
def output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv('ADAFOCUS_OUTPUT_DIR', str(tmp_path / 'runs'))
    monkeypatch.setenv('ADAFOCUS_THREADS', '1')
    return tmp_path / 'runs'


SMALL_DATA = ['--videos', '8', '--classes', '4', '--frames', '8', '--size', '16', '--informative', '3',
              '--glyph-min', '5', '--glyph-max', '6', '--seed', '3']


def run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


def test_gen_data(tmp_path, capsys):
    path = str(tmp_path / 'data.uafd')
    code, summary = run(capsys, ['gen-data', *SMALL_DATA, '--out', path])
    assert code == 0
    assert summary['videos'] == 8
    assert summary['bytes'] == os.path.getsize(path)


def test_gen_data_default_location(output_dir, capsys):
    code, summary = run(capsys, ['gen-data', *SMALL_DATA])
    assert code == 0
    assert summary['path'] == os.path.join(str(output_dir), 'dataset.uafd')


def test_invalid_config_exits_with_one(tmp_path, capsys):
    code, _ = run(capsys, ['gen-data', '--classes', '1', '--out', str(tmp_path / 'x.uafd')])
    assert code == 1


def test_missing_dataset_exits_with_three(tmp_path, capsys):
    code, _ = run(capsys, ['train', '--data', str(tmp_path / 'absent.uafd')])
    assert code == 3


def test_verify_select(capsys, tmp_path):
    out = tmp_path / 'verify.csv'
    code, summary = run(capsys, ['verify', '--only', 'select', '--out', str(out)])
    assert code == 0
    assert summary['passed'] and summary['checks'] == 4
    assert out.exists()


def test_verify_reports_injected_bug(capsys):
    code, summary = run(capsys, ['verify', '--only', 'select', '--inject-bug', 'select'])
    assert code == 2
    assert not summary['passed']


def test_sweep_needs_a_source():
    with pytest.raises(SystemExit):
        build_parser().parse_args(['sweep', '--records', 'r.uafe'])


def test_train_eval_sweep(tmp_path, capsys, small_model_config, small_synth):
    data = str(tmp_path / 'data.uafd')
    assert main(['gen-data', *SMALL_DATA, '--out', data]) == 0
    capsys.readouterr()

    config_path = tmp_path / 'run.json'
    config_path.write_text(RunConfig(model=small_model_config, synth=small_synth).to_json())
    code, trained = run(capsys, ['train', '--data', data, '--config', str(config_path), '--steps', '2',
                                 '--batch-size', '4', '--eval-every', '1', '--output-dir', str(tmp_path / 'out')])
    assert code == 0
    run_dir = trained['run_dir']
    for name in ('checkpoint.uafk', 'metrics.csv', 'metrics.prom', 'errors.json', 'config.json'):
        assert os.path.exists(os.path.join(run_dir, name)), name
    assert trained['steps'] == 2

    checkpoint = os.path.join(run_dir, 'checkpoint.uafk')
    code, evaluated = run(capsys, ['eval', '--checkpoint', checkpoint, '--data', data])
    assert code == 0
    assert evaluated['videos'] == 8
    assert {'accuracy_t1', 'accuracy_t2', 'recall'} <= set(evaluated)
    assert os.path.exists(os.path.join(run_dir, 'policy_quality.csv'))

    code, swept = run(capsys, ['sweep', '--checkpoint', checkpoint, '--records', evaluated['records'],
                               '--points', '3', '--baseline', 'random'])
    assert code == 0
    assert swept['budgets'] == 3 and swept['infeasible'] == 0

    code, swept = run(capsys, ['sweep', '--checkpoint', checkpoint, '--records', evaluated['records'],
                               '--budgets', f"1,{swept['cost_full']}"])
    assert code == 1
    assert swept['infeasible'] == 1


def test_ablation_flag_reaches_the_run_config(tmp_path, capsys, small_model_config, small_synth):
    data = str(tmp_path / 'data.uafd')
    main(['gen-data', *SMALL_DATA, '--out', data])
    capsys.readouterr()
    config_path = tmp_path / 'run.json'
    config_path.write_text(RunConfig(model=small_model_config, synth=small_synth).to_json())
    code, trained = run(capsys, ['train', '--data', data, '--config', str(config_path), '--steps', '1',
                                 '--batch-size', '4', '--ablate', 'deformable',
                                 '--output-dir', str(tmp_path / 'out')])
    assert code == 0
    saved = RunConfig.from_json(open(os.path.join(trained['run_dir'], 'config.json')).read())
    assert saved.model.deformable is False


def test_experiment_writes_tables_and_verdict(tmp_path, capsys, small_model_config, small_synth):
    config_path = tmp_path / 'run.json'
    config_path.write_text(RunConfig(model=small_model_config, synth=small_synth, batch_size=4).to_json())
    out_dir = tmp_path / 'exp'
    code, summary = run(capsys, ['experiment', 'regularizer', '--config', str(config_path), '--seeds', '1',
                                 '--videos', '10', '--steps', '2', '--out-dir', str(out_dir)])
    # patches start near six times the floor area
    assert code == 2
    assert summary['passed'] is False
    assert summary['criteria']['collapse_without_penalty'] is False
    assert summary['seeds'] == [0]
    assert os.path.exists(out_dir / 'regularizer.csv')


def test_experiment_rejects_fixed_size_patches(tmp_path, capsys, small_model_config, small_synth):
    config_path = tmp_path / 'run.json'
    rigid = replace(small_model_config, deformable=False)
    config_path.write_text(RunConfig(model=rigid, synth=small_synth).to_json())
    code, summary = run(capsys, ['experiment', 'regularizer', '--config', str(config_path), '--videos', '10'])
    assert code == 1
    assert summary is None

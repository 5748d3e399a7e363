#!/usr/bin/env python3
"""
Command-line entry point.

    gen-data    synthesize a dataset file
    train       train on a dataset; checkpoint, metrics CSV and Prometheus file per run
    eval        per-step predictions and policy quality for a checkpoint
    sweep       accuracy/FLOPs curve of budgeted early exit over stored predictions
    verify      gradient and sampler oracle suite
    experiment  seeded end-to-end, ablation and size-regulariser runs with sign tests

Exit codes: 0 success, 1 validation error, 2 numeric or experiment failure, 3 I/O error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np

from conditional_exit import budget_grid, budget_sweep, flops_of
from config import ABLATION_FLAGS, DESK_DEFAULT, ModelConfig, RunConfig, SynthConfig, env_settings
from data_generator import generate
from data_validator import VideoValidator
from error_handler import AdaFocusError, ErrorHandler, NumericError, ValidationError
from evaluation import EVAL_COLUMNS, Evaluator, summarize
from experiments import (ablation_significance, ablation_study, end_to_end, end_to_end_verdict, policy_vs_random,
                         regularizer_study, regularizer_verdict)
from model import AdaFocusModel
from monitoring import TrainingMonitor, setup_logging
from processing.policy_analytics import center_policy, compare_policies, policy_quality, random_policy
from storage import read_checkpoint, read_dataset, read_records, write_checkpoint, write_dataset, write_records
from training import Trainer, loss_columns
from verify import GROUPS, INJECTABLE_BUGS, run_checks

logger = logging.getLogger("AdaFocusCLI")

GEOMETRY_FIELDS = ('T0', 'H', 'W', 'C', 'num_classes')


def emit(summary: Dict):
    print(json.dumps(summary, indent=2, sort_keys=True, default=float))


def _threads(args, env) -> int:
    return max(1, args.threads if args.threads is not None else env['threads'])


def _check_geometry(model: ModelConfig, synth: SynthConfig, what: str):
    mismatched = [f for f in GEOMETRY_FIELDS if getattr(model, f) != getattr(synth, f)]
    if mismatched:
        raise ValidationError(f"{what} does not match the dataset on {mismatched}")


# gen-data ---------------------------------------------------------------------

def cmd_gen_data(args, env) -> int:
    config = SynthConfig(
        T0=args.frames, H=args.size, W=args.size, C=args.channels, num_classes=args.classes,
        glyph_min=args.glyph_min, glyph_max=args.glyph_max, informative_frames=args.informative,
        noise_std=args.noise, distractors=args.distractors,
        scattered=args.scattered, seed=args.seed,
    ).validate()
    dataset = generate(config, args.videos, _threads(args, env))

    validator = VideoValidator(config)
    report = validator.validate_dataset(dataset)
    if report['invalid_count']:
        raise ValidationError(f"{report['invalid_count']} generated videos failed validation: "
                              f"{validator.get_validation_report()['error_breakdown']}")

    out = args.out or os.path.join(env['output_dir'], 'dataset.uafd')
    os.makedirs(os.path.dirname(out) or '.', exist_ok=True)
    size = write_dataset(out, dataset, ErrorHandler())
    logger.info(f" Dataset written: {out} ({size:,} bytes)")
    emit({'videos': len(dataset), 'classes': config.num_classes, 'bytes': size, 'path': out,
          'label_balance_ok': report['label_balance_ok']})
    return 0


# train --------------------------------------------------------------------------

def build_run_config(args, synth: SynthConfig, output_dir: str) -> RunConfig:
    if args.config:
        with open(args.config, 'r', encoding='utf-8') as f:
            run_config = RunConfig.from_json(f.read())
        _check_geometry(run_config.model, synth, f"config {args.config}")
        run_config = replace(run_config, synth=synth)
    else:
        base = DESK_DEFAULT.model
        model = replace(base, T0=synth.T0, H=synth.H, W=synth.W, C=synth.C, num_classes=synth.num_classes,
                        T_G=min(base.T_G, synth.T0), T_L=min(base.T_L, synth.T0),
                        P=min(base.P, synth.H, synth.W))
        run_config = RunConfig(model=model, synth=synth)

    overrides = {k: v for k, v in {
        'steps': args.steps, 'seed': args.seed, 'batch_size': args.batch_size,
        'eval_every': args.eval_every, 'log_every': args.log_every,
    }.items() if v is not None}
    run_config = replace(run_config, output_dir=output_dir, **overrides)
    if args.alpha is not None:
        run_config = replace(run_config, model=replace(run_config.model, alpha=args.alpha))
    if args.ablate:
        run_config = run_config.ablate(*args.ablate)
    return run_config.validate()


def cmd_train(args, env) -> int:
    handler = ErrorHandler()
    dataset = read_dataset(args.data, handler)
    run_config = build_run_config(args, dataset.config, args.output_dir or env['output_dir'])
    run_dir = run_config.run_dir()
    os.makedirs(run_dir, exist_ok=True)
    setup_logging(run_dir, args.verbose, env['log_level'])
    logger.info(f" Run directory: {run_dir}")
    with open(os.path.join(run_dir, 'config.json'), 'w', encoding='utf-8') as f:
        f.write(run_config.to_json())

    if args.eval_data:
        train_set, holdout = dataset, read_dataset(args.eval_data, handler)
    else:
        n_eval = int(round(len(dataset) * run_config.holdout_fraction))
        train_set = dataset.subset(range(len(dataset) - n_eval))
        holdout = dataset.subset(range(len(dataset) - n_eval, len(dataset)))
    if len(train_set) == 0:
        raise ValidationError("no training videos left after the hold-out split")

    model = AdaFocusModel(run_config.model, seed=run_config.seed)
    monitor = TrainingMonitor(loss_columns(model), EVAL_COLUMNS, run_name=os.path.basename(run_dir))
    evaluator = Evaluator(holdout, _threads(args, env)).as_callback() if len(holdout) else None
    trainer = Trainer(run_config, model, monitor, evaluator)

    exit_code = 0
    params = model.params
    try:
        trainer.fit(train_set.frames, train_set.labels)
    except NumericError as e:
        handler.record(e)
        logger.error(f" Training stopped: {e}; saving last good parameters")
        params = trainer.last_good
        exit_code = e.exit_code

    write_checkpoint(os.path.join(run_dir, 'checkpoint.uafk'), run_config, params, handler)
    monitor.write_csv(os.path.join(run_dir, 'metrics.csv'))
    monitor.write_prometheus(os.path.join(run_dir, 'metrics.prom'))
    handler.export_error_report(os.path.join(run_dir, 'errors.json'))
    summary = monitor.finish()
    emit({'run_dir': run_dir, 'config_hash': run_config.config_hash(), 'exit_code': exit_code,
          **summary.to_dict()})
    return exit_code


# eval -----------------------------------------------------------------------------

def cmd_eval(args, env) -> int:
    handler = ErrorHandler()
    run_config, params = read_checkpoint(args.checkpoint, handler)
    dataset = read_dataset(args.data, handler)
    _check_geometry(run_config.model, dataset.config, f"checkpoint {args.checkpoint}")
    model = AdaFocusModel(run_config.model, params)

    result = Evaluator(dataset, _threads(args, env)).run(model)
    quality = policy_quality(result.local_specs, result.selected, dataset.videos)

    c = run_config.model
    rng = np.random.default_rng(np.random.SeedSequence([run_config.seed, len(dataset)]))
    table = compare_policies({
        'adafocus': quality,
        'random': policy_quality(*random_policy(rng, len(dataset), c.T0, c.T_L, c.H, c.W, c.P), dataset.videos),
        'center': policy_quality(*center_policy(len(dataset), c.T0, c.T_L, c.H, c.W, c.P), dataset.videos),
    })

    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    write_records(os.path.join(out_dir, args.records_name), result.records, handler)
    result.step_table().to_csv(os.path.join(out_dir, 'step_accuracy.csv'), index=False)
    table.to_csv(os.path.join(out_dir, 'policy_quality.csv'))

    summary = summarize(result, quality)
    summary['records'] = os.path.join(out_dir, args.records_name)
    emit(summary)
    return 0


# sweep ----------------------------------------------------------------------------

def _parse_budgets(text: str) -> List[float]:
    try:
        return [float(b) for b in text.split(',') if b.strip()]
    except ValueError as e:
        raise ValidationError(f"budgets must be comma-separated numbers: {e}") from e


def cmd_sweep(args, env) -> int:
    handler = ErrorHandler()
    if args.checkpoint:
        run_config, _ = read_checkpoint(args.checkpoint, handler)
    else:
        with open(args.config, 'r', encoding='utf-8') as f:
            run_config = RunConfig.from_json(f.read())
    flops = flops_of(run_config.model)
    solve = read_records(args.records, handler)
    held_out = read_records(args.eval_records, handler) if args.eval_records else None

    budgets = _parse_budgets(args.budgets) if args.budgets else budget_grid(flops, args.points)
    table = budget_sweep(solve, flops, budgets, held_out,
                         random_baseline_seed=args.seed if args.baseline == 'random' else None,
                         threads=_threads(args, env), on_infeasible='record')
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.records)), 'sweep.csv')
    table.to_csv(out, index=False)

    failed = int((table['error'] != '').sum())
    for _, row in table[table['error'] != ''].iterrows():
        logger.error(f"   budget {row['budget']:.0f}: {row['error']}")
    emit({'budgets': len(table), 'infeasible': failed, 'csv': out,
          'cost_step_1': int(flops.cost(1)), 'cost_full': int(flops.cost(flops.T_L))})
    return ValidationError.exit_code if failed else 0


# verify ----------------------------------------------------------------------------

def cmd_verify(args, env) -> int:
    report = run_checks(only=args.only, inject_bug=args.inject_bug, seed=args.seed)
    frame = report.to_frame()
    if args.out:
        frame.to_csv(args.out, index=False)
    emit({'passed': report.passed, 'checks': len(report.checks),
          'failures': [f"{c.group}/{c.name}: {c.error:.3g} > {c.tolerance:g}" for c in report.failures]})
    return 0 if report.passed else NumericError.exit_code


# experiment ------------------------------------------------------------------------

def experiment_config(args) -> RunConfig:
    if args.config:
        with open(args.config, 'r', encoding='utf-8') as f:
            run_config = RunConfig.from_json(f.read())
    else:
        run_config = DESK_DEFAULT
    if args.steps is not None:
        run_config = replace(run_config, steps=args.steps)
    return run_config.validate()


def cmd_experiment(args, env) -> int:
    run_config = experiment_config(args)
    seeds = list(range(args.seed, args.seed + args.seeds))
    threads = _threads(args, env)
    out_dir = args.out_dir or os.path.join(env['output_dir'], f"experiment-{args.kind}")
    os.makedirs(out_dir, exist_ok=True)
    logger.info(f" Experiment {args.kind}: seeds {seeds}, {args.videos} videos, {run_config.steps} steps")

    if args.kind == 'end-to-end':
        table, runs = end_to_end(run_config, seeds, args.videos, threads)
        tests = policy_vs_random(runs)
        tests.to_csv(os.path.join(out_dir, 'policy_vs_random.csv'))
        verdict = end_to_end_verdict(table, run_config.synth.informative_frames, run_config.model.T0)
        verdict.update({f'{metric}_beats_random': bool(p < args.level_policy)
                        for metric, p in tests['p_value'].items()})
    elif args.kind == 'ablations':
        table = ablation_study(run_config, seeds, args.videos, threads=threads)
        tests = ablation_significance(table, args.level)
        tests.to_csv(os.path.join(out_dir, 'ablation_significance.csv'), index=False)
        verdict = {f'{row.variant}_helps': bool(row.significant) for row in tests.itertuples()}
    else:
        table = regularizer_study(run_config, seeds, args.videos, threads=threads)
        verdict = regularizer_verdict(table)

    table.to_csv(os.path.join(out_dir, f"{args.kind}.csv"), index=False)
    passed = all(verdict.values())
    for name, ok in verdict.items():
        if not ok:
            logger.error(f"   {args.kind}: {name} not met")
    emit({'kind': args.kind, 'seeds': seeds, 'passed': passed, 'criteria': verdict, 'out_dir': out_dir})
    return 0 if passed else NumericError.exit_code


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
    'verify': cmd_verify,
    'experiment': cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='adafocus', description="Desk-scale adaptive video recognition")
    parser.add_argument('-v', '--verbose', action='store_true', help="Debug output on the console")
    parser.add_argument('--threads', type=int, default=None, help="Worker threads (default ADAFOCUS_THREADS)")
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen-data', help="Generate a synthetic dataset file")
    gen.add_argument('--videos', type=int, default=1000)
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--classes', type=int, default=8)
    gen.add_argument('--frames', type=int, default=16, help="T0")
    gen.add_argument('--size', type=int, default=32, help="Frame height and width")
    gen.add_argument('--channels', type=int, default=1)
    gen.add_argument('--informative', type=int, default=5, help="Informative frames per video")
    gen.add_argument('--glyph-min', type=int, default=6)
    gen.add_argument('--glyph-max', type=int, default=10)
    gen.add_argument('--noise', type=float, default=0.1)
    gen.add_argument('--distractors', type=int, default=2)
    gen.add_argument('--scattered', action='store_true', help="Scatter informative frames")
    gen.add_argument('--out', default=None, help="Output path (default <output dir>/dataset.uafd)")

    train = sub.add_parser('train', help="Train on a dataset file")
    train.add_argument('--data', required=True)
    train.add_argument('--eval-data', default=None, help="Separate hold-out dataset")
    train.add_argument('--config', default=None, help="RunConfig JSON")
    train.add_argument('--steps', type=int, default=None)
    train.add_argument('--seed', type=int, default=None)
    train.add_argument('--batch-size', type=int, default=None)
    train.add_argument('--eval-every', type=int, default=None)
    train.add_argument('--log-every', type=int, default=None)
    train.add_argument('--alpha', type=float, default=None)
    train.add_argument('--ablate', action='append', default=[], choices=sorted(ABLATION_FLAGS))
    train.add_argument('--output-dir', default=None)

    ev = sub.add_parser('eval', help="Evaluate a checkpoint")
    ev.add_argument('--checkpoint', required=True)
    ev.add_argument('--data', required=True)
    ev.add_argument('--out-dir', default=None)
    ev.add_argument('--records-name', default='eval.uafe')

    sweep = sub.add_parser('sweep', help="Budgeted early-exit sweep")
    source = sweep.add_mutually_exclusive_group(required=True)
    source.add_argument('--checkpoint', default=None, help="Read the model config from a checkpoint")
    source.add_argument('--config', default=None, help="Read the model config from a RunConfig JSON")
    sweep.add_argument('--records', required=True, help="Records used to solve thresholds")
    sweep.add_argument('--eval-records', default=None, help="Records used to measure (default: --records)")
    budgets = sweep.add_mutually_exclusive_group()
    budgets.add_argument('--budgets', default=None, help="Comma-separated MAC budgets, ascending")
    budgets.add_argument('--points', type=int, default=8, help="Evenly spaced budgets from c_1 to c_T_L")
    sweep.add_argument('--baseline', choices=['random'], default=None)
    sweep.add_argument('--seed', type=int, default=0)
    sweep.add_argument('--out', default=None)

    verify = sub.add_parser('verify', help="Run the oracle suite")
    verify.add_argument('--only', action='append', choices=GROUPS, default=None)
    verify.add_argument('--inject-bug', choices=INJECTABLE_BUGS, default=None)
    verify.add_argument('--seed', type=int, default=0)
    verify.add_argument('--out', default=None, help="CSV report path")

    exp = sub.add_parser('experiment', help="Seeded paired trainings with sign tests")
    exp.add_argument('kind', choices=['end-to-end', 'ablations', 'regularizer'])
    exp.add_argument('--config', default=None, help="RunConfig JSON (default: the desk default)")
    exp.add_argument('--seeds', type=int, default=5, help="Number of consecutive seeds")
    exp.add_argument('--seed', type=int, default=0, help="First seed")
    exp.add_argument('--videos', type=int, default=1000, help="Videos generated per seed")
    exp.add_argument('--steps', type=int, default=None)
    exp.add_argument('--level', type=float, default=0.05, help="Sign-test level for ablations")
    exp.add_argument('--level-policy', type=float, default=0.01, help="Sign-test level for policy vs random")
    exp.add_argument('--out-dir', default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        env = env_settings()
        setup_logging(None, args.verbose, env['log_level'])
        return COMMANDS[args.command](args, env)
    except AdaFocusError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return ErrorHandler.exit_code_for(e)
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return ErrorHandler.exit_code_for(e)


if __name__ == '__main__':
    sys.exit(main())

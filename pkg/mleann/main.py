import os
import argparse
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv, dotenv_values

from .utils import (
    logger, MleannError, ContractError, DataError, NumericError, format_float, resolve_workers, default_out_dir,
    default_data_dir,
)
from .net import Mlp, parse_architecture, rmse, save_network
from .data import (
    DATASET_IDS, Series, load_dataset, mackey_glass_generate, embed_mackey, read_columns, read_series,
    synthesize_wastewater, normalize_minmax, split, describe, write_series_csv, write_dataset_csv,
)
from .trainers import ALGORITHMS, default_config, normalize_algorithm, train
from .evolve import EvolutionConfig
from .bench import (
    PROTOCOLS, CONVENTIONAL_ARCHITECTURES, ExperimentSpec, run_conventional, run_activation_experiment,
    run_mleann_experiment, emit_results, write_train_report,
)
from .storage import init_storage, close_storage

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

TRUE_WORDS = ('1', 'true', 'yes', 'on')


def _algorithms(text: str) -> List[str]:
    return [normalize_algorithm(tag) for tag in text.split(',') if tag.strip()]


def _architectures(text: str) -> List[str]:
    archs = [token.strip() for token in text.split(';') if token.strip()]
    for arch in archs:
        parse_architecture(arch)
    return archs


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument('--config', help='flat key=value file; keys are flag names')
    sub.add_argument('--seed', type=int, default=0, help='random seed (default 0)')
    sub.add_argument('--serial', action='store_true', help='run everything in-process, in a fixed order')
    sub.add_argument('--out-dir', dest='out_dir', default=None,
                     help='output directory (default $MLEANN_OUT_DIR or ./results)')


def _add_data(sub: argparse.ArgumentParser, default: str = 'mackey-glass'):
    sub.add_argument('--data', default=default, help=f"dataset id: {', '.join(DATASET_IDS)}")
    sub.add_argument('--path', default=None, help='explicit data file for gas-furnace or wastewater')
    sub.add_argument('--normalize', action='store_true', help='min-max scale inputs and target on the train rows')


def _add_evolution(sub: argparse.ArgumentParser):
    sub.add_argument('--pop', type=int, default=40, help='population size (default 40)')
    sub.add_argument('--gens', type=int, default=40, help='generations (default 40)')
    sub.add_argument('--restrict-arch', dest='restrict_arch', action='store_true',
                     help='limit the hidden layer to at most 4 neurons')
    sub.add_argument('--lamarckian', action='store_true', help='write refined weights back into the genome')
    sub.add_argument('--fitness-split', dest='fitness_split', choices=('test', 'validation'), default='test',
                     help='rows that score fitness (default test)')
    sub.add_argument('--algos', type=_algorithms, default=list(ALGORITHMS), help='comma-separated algorithm tags')
    sub.add_argument('--timings', action='store_true', help='also write timings.csv')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='mleann', description='Evolutionary and local-search neural network training')
    subparsers = parser.add_subparsers(dest='command', required=True)

    gen = subparsers.add_parser('gen-data', help='write a benchmark series and its embedded dataset as CSV')
    gen.add_argument('dataset', help=f"one of {', '.join(DATASET_IDS)}")
    gen.add_argument('--path', default=None, help='explicit data file for gas-furnace or wastewater')
    _add_common(gen)

    tr = subparsers.add_parser('train', help='train one network with one algorithm')
    tr.add_argument('--algo', default='lm', help='bp, scg, qna or lm (default lm)')
    tr.add_argument('--arch', default='24T*', help="hidden layer, e.g. '8T,2T*,1L*' (default 24T*)")
    tr.add_argument('--epochs', type=int, default=2500, help='training epochs (default 2500)')
    _add_data(tr)
    _add_common(tr)

    ev = subparsers.add_parser('evolve', help='run the evolutionary meta-learning search')
    ev.add_argument('--epochs', type=int, default=500, help='local-search epochs per evaluation (default 500)')
    _add_data(ev)
    _add_evolution(ev)
    _add_common(ev)

    bench = subparsers.add_parser('bench', help='reproduce the benchmark protocols')
    bench.add_argument('--protocol', choices=PROTOCOLS, default='conventional')
    bench.add_argument('--epochs', type=int, default=None,
                       help='epochs per run (default 2500, or 500 per evaluation for mleann)')
    bench.add_argument('--replicates', type=int, default=3, help='runs per cell (default 3)')
    bench.add_argument('--archs', type=_architectures, default=list(CONVENTIONAL_ARCHITECTURES),
                       help="semicolon-separated architectures (default '14T*;16T*;18T*;20T*;24T*')")
    bench.add_argument('--report-best', dest='report_best', action='store_true',
                       help='report the best replicate instead of the worst')
    bench.add_argument('--resume', action='store_true', help='reuse finished cells from the result store')
    _add_data(bench, default='all')
    _add_evolution(bench)
    _add_common(bench)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise ContractError(f"unknown command '{command}'")


def apply_config_file(parser: argparse.ArgumentParser, argv: List[str]) -> argparse.Namespace:
    """Parse with config-file values as defaults so flags still win"""
    args = parser.parse_args(argv)
    if not getattr(args, 'config', None):
        return args
    if not os.path.exists(args.config):
        raise DataError(f"config file not found: {args.config}")

    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions if a.dest not in ('help', 'config')}
    defaults = {}
    for key, raw in dotenv_values(args.config).items():
        dest = key.strip().replace('-', '_')
        if dest not in actions:
            raise ContractError(f"unknown key '{key}' in {args.config}")
        action = actions[dest]
        raw = raw or ''
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = raw.strip().lower() in TRUE_WORDS
        elif action.type is not None:
            try:
                defaults[dest] = action.type(raw)
            except (TypeError, ValueError) as e:
                raise ContractError(f"bad value for '{key}' in {args.config}: {e}")
        else:
            defaults[dest] = raw
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _out_dir(args) -> str:
    out_dir = args.out_dir or default_out_dir()
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out_dir}: {e}")
    return out_dir


def _dataset(dataset_id: str, args):
    ds = load_dataset(dataset_id, args.path, args.seed)
    if getattr(args, 'normalize', False):
        ds = normalize_minmax(ds)
    logger.info(f"Loaded {describe(ds)}")
    return ds


def _evolution_config(args) -> EvolutionConfig:
    epochs = 500 if args.epochs is None else args.epochs
    return EvolutionConfig(population=args.pop, generations=args.gens, epochs_per_eval=epochs, seed=args.seed,
                           fitness_split=args.fitness_split, lamarckian=args.lamarckian)


def cmd_gen_data(args) -> int:
    out_dir = _out_dir(args)
    dataset_id = args.dataset
    if dataset_id not in DATASET_IDS:
        raise ContractError(f"unknown dataset id '{dataset_id}' (expected one of {', '.join(DATASET_IDS)})")

    if dataset_id == 'mackey-glass':
        series = mackey_glass_generate()
        write_series_csv(series, os.path.join(out_dir, 'mackey-glass_series.csv'))
        ds = embed_mackey(series)
    elif dataset_id == 'gas-furnace':
        path = args.path or os.path.join(default_data_dir(), 'gas_furnace.txt')
        columns = read_columns(path, 2)
        write_series_csv(Series(columns[:, 0], name='gas-furnace-u'), os.path.join(out_dir, 'gas-furnace_u.csv'))
        write_series_csv(Series(columns[:, 1], name='gas-furnace-y'), os.path.join(out_dir, 'gas-furnace_y.csv'))
        ds = load_dataset(dataset_id, path)
    else:
        path = args.path or os.path.join(default_data_dir(), 'wastewater.txt')
        series = read_series(path, 'wastewater') if os.path.exists(path) else synthesize_wastewater(seed=args.seed)
        write_series_csv(series, os.path.join(out_dir, 'wastewater_series.csv'))
        ds = load_dataset(dataset_id, path, args.seed)

    write_dataset_csv(ds, os.path.join(out_dir, f"{dataset_id}_dataset.csv"))
    logger.info(f"Wrote {describe(ds)} to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    out_dir = _out_dir(args)
    tag = normalize_algorithm(args.algo)
    kinds = parse_architecture(args.arch)
    ds = _dataset(args.data, args)
    train_slice, test_slice = split(ds)

    net = Mlp.random(ds.input_dim, kinds, np.random.default_rng(args.seed))
    logger.info(f"Training {tag} {net.architecture} on {ds.name} for {args.epochs} epochs (seed {args.seed})")
    report = train(tag, net, train_slice, default_config(tag, args.epochs), test=test_slice)

    stem = f"train_{tag.lower()}_{ds.name}"
    write_train_report(report, os.path.join(out_dir, f"{stem}.csv"))
    save_network(report.net, os.path.join(out_dir, f"{stem}.net"))

    test_rmse = rmse(report.net, test_slice)
    logger.info(f"{tag} finished after {report.epochs} epochs ({report.reason}), {report.flops} flops")
    print(f"test_rmse={format_float(test_rmse)} train_rmse={format_float(report.final.train_rmse)} "
          f"flops={report.flops}")
    return EXIT_OK


def cmd_evolve(args) -> int:
    out_dir = _out_dir(args)
    ds = _dataset(args.data, args)
    spec = ExperimentSpec(ds, protocol='mleann', architectures=(), algorithms=tuple(args.algos),
                          epochs=args.epochs, seed=args.seed, evolution=_evolution_config(args),
                          restrict_arch=args.restrict_arch)
    outcome = run_mleann_experiment(spec, resolve_workers(args.serial))
    emit_results(outcome.rows, outcome.traces, out_dir, timings=args.timings)
    for row in outcome.rows:
        print(f"{row.algorithm}: test_rmse={format_float(row.test_rmse)} arch={row.architecture}")
    return EXIT_OK


def cmd_bench(args) -> int:
    out_dir = _out_dir(args)
    workers = resolve_workers(args.serial)
    dataset_ids = list(DATASET_IDS) if args.data == 'all' else [args.data]
    if args.resume:
        init_storage()

    rows, replicates, traces = [], [], []
    try:
        for dataset_id in dataset_ids:
            try:
                ds = _dataset(dataset_id, args)
            except DataError as e:
                if args.data != 'all':
                    raise
                logger.warning(f"Skipping {dataset_id}: {e}")
                continue

            spec = ExperimentSpec(ds, protocol=args.protocol, architectures=tuple(args.archs),
                                  algorithms=tuple(args.algos),
                                  epochs=2500 if args.epochs is None else args.epochs,
                                  replicates=args.replicates, seed=args.seed, report_worst=not args.report_best,
                                  evolution=_evolution_config(args), restrict_arch=args.restrict_arch)
            if args.protocol == 'mleann':
                outcome = run_mleann_experiment(spec, workers)
                rows.extend(outcome.rows)
                traces.extend(outcome.traces)
            else:
                runner = run_activation_experiment if args.protocol == 'activation' else run_conventional
                reported, raw = runner(spec, workers)
                rows.extend(reported)
                replicates.extend(raw)
    finally:
        close_storage()

    emit_results(rows, traces, out_dir, replicates=replicates, timings=args.timings)
    print(f"{len(rows)} result rows written to {out_dir}")
    return EXIT_OK


COMMANDS = {'gen-data': cmd_gen_data, 'train': cmd_train, 'evolve': cmd_evolve, 'bench': cmd_bench}


def main(argv: Optional[List[str]] = None) -> int:
    """CLI entry point; returns the process exit code"""
    load_dotenv()
    parser = build_parser()
    try:
        args = apply_config_file(parser, argv)
        return COMMANDS[args.command](args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except ContractError as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except DataError as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        logger.error(f"Numeric abort: {e}")
        return EXIT_NUMERIC
    except MleannError as e:
        logger.error(f"Fatal error: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())

import os
import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .utils import logger, ContractError, DataError, TrainingAborted, FlopLedger, format_float, derive_seed, describe_counts
from .net import Mlp, parse_architecture, rmse
from .data import Dataset, split
from .trainers import ALGORITHMS, TrainReport, default_config, normalize_algorithm, train
from .evolve import EvolutionConfig, GenerationStats, run_mleann, restricted, decode_arch
from . import storage

PROTOCOLS = ('conventional', 'mleann', 'activation')

HIDDEN_SWEEP = (14, 16, 18, 20, 24)
CONVENTIONAL_ARCHITECTURES = tuple(f"{h}T*" for h in HIDDEN_SWEEP)
ACTIVATION_ARCHITECTURES = ('24T*', '24L*')

RESULT_COLUMNS = ['dataset', 'algorithm', 'architecture', 'train_rmse', 'test_rmse', 'flops', 'seed', 'status']
REPLICATE_COLUMNS = RESULT_COLUMNS[:1] + ['replicate'] + RESULT_COLUMNS[1:]
TRACE_COLUMNS = ['stream', 'generation', 'best_rmse', 'mean_rmse', 'best_arch']
FLOP_COLUMNS = ['dataset', 'architecture', 'algorithm', 'flops']
TIMING_COLUMNS = ['dataset', 'algorithm', 'architecture', 'seed', 'wall_time']
REPORT_COLUMNS = ['epoch', 'train_rmse', 'test_rmse', 'flops']


@dataclass
class ExperimentSpec:
    dataset: Dataset
    protocol: str = 'conventional'
    architectures: Tuple[str, ...] = CONVENTIONAL_ARCHITECTURES
    algorithms: Tuple[str, ...] = ALGORITHMS
    epochs: int = 2500
    replicates: int = 3
    seed: int = 0
    report_worst: bool = True
    evolution: Optional[EvolutionConfig] = None
    restrict_arch: bool = False

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ContractError(f"unknown protocol '{self.protocol}' (expected one of {', '.join(PROTOCOLS)})")
        if self.replicates < 1:
            raise ContractError(f"replicates must be at least 1, got {self.replicates}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be non-negative, got {self.epochs}")
        if self.protocol != 'mleann' and not self.architectures:
            raise ContractError(f"{self.protocol} protocol needs an explicit architecture list")
        for arch in self.architectures:
            parse_architecture(arch)
        for tag in self.algorithms:
            normalize_algorithm(tag)


@dataclass
class ResultRow:
    dataset: str
    algorithm: str
    architecture: str
    train_rmse: float
    test_rmse: float
    flops: int
    wall_time: float = 0.0
    seed: int = 0
    replicate: int = 0
    status: str = 'completed'

    @property
    def aborted(self) -> bool:
        return self.status.startswith('aborted')


@dataclass
class CellJob:
    dataset: Dataset
    algorithm: str
    architecture: str
    epochs: int
    seed: int
    replicate: int

    @property
    def key(self) -> str:
        variant = ('scaled' if self.dataset.scaling else 'raw') + ('-synthetic' if self.dataset.synthetic else '')
        return '|'.join([self.dataset.name, variant, self.algorithm, self.architecture,
                         str(self.epochs), str(self.seed)])


@dataclass
class MleannOutcome:
    rows: List[ResultRow] = field(default_factory=list)
    traces: List[Tuple[str, GenerationStats]] = field(default_factory=list)


def arch_descriptor(kinds) -> str:
    """'24 T*' style label used in result tables"""
    return describe_counts([k.value for k in kinds])


def run_cell(job: CellJob) -> ResultRow:
    """Train one freshly seeded network; aborts become flagged rows"""
    kinds = parse_architecture(job.architecture)
    net = Mlp.random(job.dataset.input_dim, kinds, np.random.default_rng(job.seed))
    train_slice, test_slice = split(job.dataset)
    ledger = FlopLedger()
    started = time.perf_counter()
    row = ResultRow(job.dataset.name, job.algorithm, arch_descriptor(kinds), math.nan, math.nan, 0,
                    seed=job.seed, replicate=job.replicate)
    try:
        report = train(job.algorithm, net, train_slice, default_config(job.algorithm, job.epochs), ledger=ledger)
        row.train_rmse = report.final.train_rmse
        row.test_rmse = rmse(report.net, test_slice)
        row.status = report.reason
    except TrainingAborted as e:
        logger.warning(f"{job.algorithm} {job.architecture} on {job.dataset.name} (seed {job.seed}): {e}")
        row.status = f"aborted@{e.epoch}"
    row.flops = ledger.count
    row.wall_time = time.perf_counter() - started
    return row


def _run_jobs(jobs: List[CellJob], workers: int) -> List[ResultRow]:
    """Results in job order; cached cells are reused when a result store is open"""
    results: Dict[int, ResultRow] = {}
    pending = []
    for i, job in enumerate(jobs):
        if storage.storage_active() and storage.has_result(job.key):
            results[i] = ResultRow(**storage.load_result(job.key))
            logger.debug(f"Reusing stored cell {job.key}")
        else:
            pending.append(i)

    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            fresh = list(executor.map(run_cell, [jobs[i] for i in pending]))
    else:
        fresh = [run_cell(jobs[i]) for i in pending]

    for i, row in zip(pending, fresh):
        results[i] = row
        if storage.storage_active():
            storage.save_result(jobs[i].key, asdict(row))
    return [results[i] for i in range(len(jobs))]


def summarize(replicates: Sequence[ResultRow], report_worst: bool = True) -> ResultRow:
    """Worst (max test RMSE) replicate, or the best one; aborted replicates count as worst"""
    def badness(row: ResultRow) -> float:
        return math.inf if row.aborted or math.isnan(row.test_rmse) else row.test_rmse

    if report_worst:
        return max(replicates, key=badness)
    return min(replicates, key=badness)


def _grid(spec: ExperimentSpec) -> List[CellJob]:
    jobs = []
    for arch in spec.architectures:
        for tag in spec.algorithms:
            for r in range(spec.replicates):
                jobs.append(CellJob(spec.dataset, normalize_algorithm(tag), arch, spec.epochs,
                                    derive_seed(spec.seed, r), r))
    return jobs


def run_conventional(spec: ExperimentSpec, workers: int = 1) -> Tuple[List[ResultRow], List[ResultRow]]:
    """Fixed-architecture sweep; returns (reported rows, every replicate row)"""
    spec.validate()
    jobs = _grid(spec)
    logger.info(f"Conventional sweep on {spec.dataset.name}: {len(spec.architectures)} architectures x "
                f"{len(spec.algorithms)} algorithms x {spec.replicates} replicates, {spec.epochs} epochs")
    raw = _run_jobs(jobs, workers)

    reported = []
    for start in range(0, len(raw), spec.replicates):
        row = summarize(raw[start:start + spec.replicates], spec.report_worst)
        reported.append(row)
        logger.info(f"{row.dataset} {row.algorithm} {row.architecture}: "
                    f"train {format_float(row.train_rmse)}, test {format_float(row.test_rmse)}, "
                    f"{row.flops} flops ({row.status})")
    return reported, raw


def run_activation_experiment(spec: ExperimentSpec, workers: int = 1) -> Tuple[List[ResultRow], List[ResultRow]]:
    """Every algorithm at 24 hidden neurons with tanh-sigmoid and log-sigmoid layers"""
    return run_conventional(replace(spec, protocol='activation', architectures=ACTIVATION_ARCHITECTURES), workers)


def run_mleann_experiment(spec: ExperimentSpec, workers: int = 1) -> MleannOutcome:
    spec.validate()
    cfg = spec.evolution or EvolutionConfig(seed=spec.seed)
    if spec.restrict_arch:
        cfg = restricted(cfg)
    suffix = '/restricted' if spec.restrict_arch else ''

    results = run_mleann(cfg, spec.dataset, spec.algorithms, workers)
    train_slice, test_slice = split(spec.dataset)
    outcome = MleannOutcome()
    for tag, stream in results.items():
        best = stream.best
        _, kinds = decode_arch(best.arch_bits, cfg.hidden_bounds)
        if best.trained is not None:
            train_rmse, test_rmse, status = rmse(best.trained, train_slice), rmse(best.trained, test_slice), 'completed'
        else:
            train_rmse, test_rmse, status = math.nan, math.nan, 'aborted'
        outcome.rows.append(ResultRow(spec.dataset.name, tag + suffix, arch_descriptor(kinds), train_rmse,
                                      test_rmse, best.flops, stream.wall_time, cfg.seed, 0, status))
        outcome.traces.extend((f"{spec.dataset.name}/{tag}{suffix}", stats) for stats in stream.trace)
    return outcome


def _open_csv(out_dir: str, filename: str):
    path = os.path.join(out_dir, filename)
    try:
        return path, open(path, 'w', newline='', encoding='utf-8')
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}")


def _write_csv(out_dir: str, filename: str, header: List[str], rows: List[List]) -> str:
    path, f = _open_csv(out_dir, filename)
    with f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _result_fields(row: ResultRow) -> List:
    return [row.dataset, row.algorithm, row.architecture, format_float(row.train_rmse),
            format_float(row.test_rmse), row.flops, row.seed, row.status]


def emit_results(rows: Sequence[ResultRow], traces: Sequence[Tuple[str, GenerationStats]], out_dir: str,
                 replicates: Sequence[ResultRow] = (), timings: bool = False) -> List[str]:
    """Write results, replicates, traces and flops CSVs (plus timings on request)"""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out_dir}: {e}")

    written = [
        _write_csv(out_dir, 'results.csv', RESULT_COLUMNS, [_result_fields(r) for r in rows]),
        _write_csv(out_dir, 'replicates.csv', REPLICATE_COLUMNS,
                   [[r.dataset, r.replicate] + _result_fields(r)[1:] for r in replicates]),
        _write_csv(out_dir, 'traces.csv', TRACE_COLUMNS,
                   [[stream, s.generation, format_float(s.best), format_float(s.mean), s.best_arch]
                    for stream, s in traces]),
        _write_csv(out_dir, 'flops.csv', FLOP_COLUMNS,
                   [[r.dataset, r.architecture, r.algorithm, r.flops] for r in rows]),
    ]
    if timings:
        written.append(_write_csv(out_dir, 'timings.csv', TIMING_COLUMNS,
                                  [[r.dataset, r.algorithm, r.architecture, r.seed, format_float(r.wall_time)]
                                   for r in list(rows) + list(replicates)]))
    logger.info(f"Wrote {len(written)} result files to {out_dir}")
    return written


def write_train_report(report: TrainReport, path: str):
    """One row per epoch, starting with the untrained network"""
    directory = os.path.dirname(path)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(REPORT_COLUMNS)
            for record in report.records():
                writer.writerow([record.epoch, format_float(record.train_rmse),
                                 format_float(record.test_rmse), record.flops])
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}")

import os
import math
import logging
from typing import Optional, Sequence

import numpy as np

# Log levels mapping
LOG_LEVELS = {
    'debug': logging.DEBUG,
    'info': logging.INFO,
    'warn': logging.WARNING,
    'error': logging.ERROR
}

# Configure logging
log_level_str = os.getenv('LOG_LEVEL', 'info').lower()
log_level = LOG_LEVELS.get(log_level_str, logging.INFO)

logging.basicConfig(
    level=log_level,
    format='[%(levelname)s] %(asctime)s %(message)s',
    datefmt='%Y-%m-%dT%H:%M:%S%z'
)

logger = logging.getLogger('mleann')


class MleannError(RuntimeError):
    """Base class for every error raised by this package"""


class ContractError(MleannError, ValueError):
    """A precondition of an operation was violated"""


class DataError(MleannError):
    """Input data could not be read, parsed or written"""


class NumericError(MleannError, ArithmeticError):
    """A computation produced a non-finite or degenerate value"""


class TrainingAborted(NumericError):
    """A trainer gave up; carries the epoch it stopped in"""

    def __init__(self, epoch: int, reason: str):
        super().__init__(f"training aborted at epoch {epoch}: {reason}")
        self.epoch = epoch
        self.reason = reason


class FlopLedger:
    """Cumulative floating-point operation counter for one training run"""

    def __init__(self):
        self.count = 0

    def add(self, flops: int):
        if flops < 0:
            raise ContractError(f"flop increment must be non-negative, got {flops}")
        self.count += int(flops)

    def reset(self):
        self.count = 0

    def __repr__(self) -> str:
        return f"FlopLedger(count={self.count})"


def charge(ledger: Optional[FlopLedger], flops: int):
    """Add to a ledger if one is attached"""
    if ledger is not None:
        ledger.add(flops)


def check_finite(values: np.ndarray, what: str):
    """Raise NumericError naming the first non-finite entry"""
    flat = np.asarray(values).ravel()
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        idx = int(bad[0])
        raise NumericError(f"non-finite {what} at index {idx}: {flat[idx]}")


def format_float(value: float, digits: int = 6) -> str:
    """Format a float with a fixed number of significant digits"""
    if value is None:
        return ''
    if math.isnan(value):
        return 'nan'
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return f"{value:.{digits}g}"


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers"""
    seq = np.random.SeedSequence([int(p) for p in parts])
    return int(seq.generate_state(1)[0])


def resolve_workers(serial: bool) -> int:
    """Number of worker processes to use (1 means in-process)"""
    if serial:
        return 1
    configured = os.getenv('MLEANN_WORKERS')
    if configured:
        return max(1, int(configured))
    return max(1, os.cpu_count() or 1)


def default_out_dir() -> str:
    return os.getenv('MLEANN_OUT_DIR', './results')


def default_data_dir() -> str:
    return os.getenv('MLEANN_DATA_DIR', './data')


def describe_counts(labels: Sequence[str]) -> str:
    """Group labels by first appearance: ['T','T','L'] -> '2 T, 1 L'"""
    counts = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    return ', '.join(f"{n} {label}" for label, n in counts.items())

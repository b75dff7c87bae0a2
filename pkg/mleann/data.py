import os
import re
import csv
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .utils import logger, ContractError, DataError, check_finite, default_data_dir

# Values on a line: whitespace and/or comma separated
FIELD_SPLIT_REGEX = re.compile(r'[\s,;]+')

DATASET_IDS = ('mackey-glass', 'gas-furnace', 'wastewater')

MACKEY_LAGS = (18, 12, 6, 0)
MACKEY_LEAD = 6
MACKEY_TRAIN_COUNT = 500

GAS_FURNACE_ROWS = 292
GAS_FURNACE_EXPECTED_RAW = (290, 296)

WASTEWATER_POINTS = 475
WASTEWATER_TRAIN_COUNT = 240
WASTEWATER_SHORT_WINDOW = 12
WASTEWATER_LONG_WINDOW = 24


@dataclass(frozen=True, eq=False)
class Series:
    """A sampled scalar time series; values[k] sits at time offset + k*dt"""
    values: np.ndarray
    dt: float = 1.0
    name: str = ''
    offset: int = 0
    synthetic: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise ContractError(f"series '{self.name}' must be a non-empty 1-D sequence")
        check_finite(values, f"value in series '{self.name}'")
        object.__setattr__(self, 'values', values)

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True, eq=False)
class DataSlice:
    """Contiguous block of supervised rows handed to the network code"""
    inputs: np.ndarray
    targets: np.ndarray
    name: str = ''

    @property
    def rows(self) -> int:
        return int(self.targets.size)

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Supervised rows (input vector, scalar target) with a train/test boundary"""
    inputs: np.ndarray
    targets: np.ndarray
    train_count: int
    name: str = ''
    times: Optional[np.ndarray] = None
    synthetic: bool = False
    scaling: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        targets = np.asarray(self.targets, dtype=float).ravel()
        if inputs.shape[0] != targets.size:
            raise ContractError(
                f"dataset '{self.name}': {inputs.shape[0]} input rows but {targets.size} targets"
            )
        if not 0 < self.train_count < targets.size:
            raise ContractError(
                f"dataset '{self.name}': train_count {self.train_count} must lie in (0, {targets.size})"
            )
        times = np.arange(targets.size) if self.times is None else np.asarray(self.times, dtype=int)
        object.__setattr__(self, 'inputs', inputs)
        object.__setattr__(self, 'targets', targets)
        object.__setattr__(self, 'times', times)

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    def __len__(self) -> int:
        return int(self.targets.size)


@dataclass(frozen=True)
class MackeyGlassSpec:
    tau: float = 17.0
    dt: float = 0.1
    x0: float = 1.2
    n_points: int = 1000
    a: float = 0.2
    b: float = 0.1
    exponent: float = 10.0
    sample_every: float = 1.0

    @property
    def lag_steps(self) -> int:
        steps = self.tau / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ContractError(f"tau/dt = {steps} is not an integer number of grid steps")
        return int(round(steps))

    @property
    def stride(self) -> int:
        steps = self.sample_every / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ContractError(f"sample spacing {self.sample_every} is not a multiple of dt {self.dt}")
        return int(round(steps))


def mackey_glass_generate(spec: MackeyGlassSpec = MackeyGlassSpec()) -> Series:
    """Integrate the Mackey-Glass delay equation with classic RK4.

    The delayed term x(t - tau) is read from the stored grid: the first stage
    uses the grid point at t - tau, the half-step stages hold that value and
    the last stage uses the grid point at t + dt - tau. History before t = 0
    is zero, and the delayed term switches on only for steps starting at or
    after t = tau. Samples are emitted every `sample_every` time units.
    """
    lag = spec.lag_steps
    stride = spec.stride
    if spec.n_points < 1:
        raise ContractError("n_points must be positive")

    n_steps = stride * (spec.n_points - 1)
    x = np.empty(n_steps + 1)
    x[0] = spec.x0
    dt = spec.dt

    def rhs(state: float, delayed: float) -> float:
        return spec.a * delayed / (1.0 + delayed ** spec.exponent) - spec.b * state

    for i in range(n_steps):
        delayed = x[i - lag] if i >= lag else 0.0
        xi = x[i]
        k1 = rhs(xi, delayed)
        k2 = rhs(xi + 0.5 * dt * k1, delayed)
        k3 = rhs(xi + 0.5 * dt * k2, delayed)
        # the step ending at t = tau still integrates over zero history
        delayed_next = x[i + 1 - lag] if i + 1 > lag else 0.0
        k4 = rhs(xi + dt * k3, delayed_next)
        x[i + 1] = xi + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0

    logger.debug(f"Mackey-Glass: {n_steps} RK4 steps, {spec.n_points} samples")
    return Series(x[::stride].copy(), dt=spec.sample_every, name='mackey-glass')


def embed_mackey(series: Series, train_count: int = MACKEY_TRAIN_COUNT) -> Dataset:
    """Rows (x(t-18), x(t-12), x(t-6), x(t)) -> x(t+6)"""
    largest_lag = max(MACKEY_LAGS)
    required = largest_lag + MACKEY_LEAD + train_count + 1
    if len(series) < required:
        raise DataError(
            f"series '{series.name}' has {len(series)} samples; at least {required} are required "
            f"(lag {largest_lag} + lead {MACKEY_LEAD} + {train_count} training rows + 1 test row)"
        )

    v = series.values
    t = np.arange(largest_lag, len(series) - MACKEY_LEAD)
    inputs = np.column_stack([v[t - lag] for lag in MACKEY_LAGS])
    targets = v[t + MACKEY_LEAD]
    return Dataset(inputs, targets, train_count, name=series.name,
                   times=t + series.offset, synthetic=series.synthetic)


def read_columns(path: str, expected: int) -> np.ndarray:
    """Parse a numeric text file into an (n, expected) array; '#' starts a comment"""
    if not os.path.exists(path):
        raise DataError(f"data file not found: {path}")

    rows = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            fields = [p for p in FIELD_SPLIT_REGEX.split(line) if p]
            if len(fields) != expected:
                raise DataError(
                    f"{path}:{line_no}: expected {expected} value(s), found {len(fields)}: {raw.strip()!r}"
                )
            try:
                values = [float(p) for p in fields]
            except ValueError:
                raise DataError(f"{path}:{line_no}: not a number: {raw.strip()!r}")
            if not all(np.isfinite(values)):
                raise DataError(f"{path}:{line_no}: non-finite value: {raw.strip()!r}")
            rows.append(values)

    if not rows:
        raise DataError(f"{path}: no data rows")
    logger.debug(f"Read {len(rows)} rows from {path}")
    return np.asarray(rows, dtype=float)


def read_series(path: str, name: str = '') -> Series:
    values = read_columns(path, 1)[:, 0]
    return Series(values, name=name or os.path.splitext(os.path.basename(path))[0])


def embed_gas_furnace(u: np.ndarray, y: np.ndarray, max_rows: int = GAS_FURNACE_ROWS) -> Dataset:
    """Rows (u(t), y(t)) -> y(t+1), first `max_rows` pairs, half for training"""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    if u.size != y.size:
        raise ContractError("u and y must have equal length")

    low, high = GAS_FURNACE_EXPECTED_RAW
    if not low <= u.size <= high:
        logger.warning(f"Gas furnace: {u.size} raw observations, expected {low}-{high}; proceeding")

    n = min(u.size - 1, max_rows)
    if n < 2:
        raise DataError(f"gas furnace series too short: {u.size} observations")
    t = np.arange(n)
    inputs = np.column_stack([u[t], y[t]])
    targets = y[t + 1]
    return Dataset(inputs, targets, n // 2, name='gas-furnace', times=t)


def load_gas_furnace(path: str) -> Dataset:
    columns = read_columns(path, 2)
    return embed_gas_furnace(columns[:, 0], columns[:, 1])


def moving_average(series: Series, window: int) -> Series:
    """Trailing mean over `window` samples; first value sits at index window-1"""
    if window < 1:
        raise ContractError(f"window must be >= 1, got {window}")
    if window > len(series):
        raise ContractError(f"window {window} exceeds series length {len(series)}")
    csum = np.concatenate(([0.0], np.cumsum(series.values)))
    means = (csum[window:] - csum[:-window]) / window
    return Series(means, dt=series.dt, name=f"{series.name}-ma{window}",
                  offset=series.offset + window - 1, synthetic=series.synthetic)


def embed_wastewater(series: Series, train_count: int = WASTEWATER_TRAIN_COUNT) -> Dataset:
    """Rows (f(t), f(t-1), a(t), b(t)) -> f(t+1) with 12 and 24 hour trailing means"""
    if len(series) < WASTEWATER_LONG_WINDOW + train_count + 1:
        raise DataError(
            f"wastewater series has {len(series)} samples; at least "
            f"{WASTEWATER_LONG_WINDOW + train_count + 1} are required"
        )
    f = series.values
    short = moving_average(series, WASTEWATER_SHORT_WINDOW)
    long = moving_average(series, WASTEWATER_LONG_WINDOW)

    t = np.arange(WASTEWATER_LONG_WINDOW - 1, len(series) - 1)
    inputs = np.column_stack([
        f[t],
        f[t - 1],
        short.values[t - (WASTEWATER_SHORT_WINDOW - 1)],
        long.values[t - (WASTEWATER_LONG_WINDOW - 1)],
    ])
    return Dataset(inputs, f[t + 1], train_count, name='wastewater',
                   times=t, synthetic=series.synthetic)


def load_wastewater(path: str) -> Dataset:
    series = read_series(path, name='wastewater')
    if len(series) != WASTEWATER_POINTS:
        logger.warning(f"Wastewater: {len(series)} points, expected {WASTEWATER_POINTS}; proceeding")
    return embed_wastewater(series)


def synthesize_wastewater(n: int = WASTEWATER_POINTS, seed: int = 0) -> Series:
    """Seeded stand-in for the hourly sewage inflow record.

    Daily and half-daily cycles on a slowly drifting base with AR(1) noise,
    scaled to roughly [0, 1].
    """
    rng = np.random.default_rng(seed)
    hours = np.arange(n, dtype=float)
    base = 0.45 + 0.05 * np.sin(2 * np.pi * hours / (24 * 7))
    daily = 0.18 * np.sin(2 * np.pi * (hours - 7) / 24) + 0.07 * np.sin(4 * np.pi * (hours - 3) / 24)
    noise = np.empty(n)
    noise[0] = 0.0
    shocks = rng.normal(0.0, 0.02, size=n)
    for i in range(1, n):
        noise[i] = 0.7 * noise[i - 1] + shocks[i]
    values = np.clip(base + daily + noise, 0.02, None)
    return Series(values, name='wastewater', synthetic=True)


def split(ds: Dataset) -> Tuple[DataSlice, DataSlice]:
    """Contiguous prefix split: train rows first, test rows after"""
    k = ds.train_count
    train = DataSlice(ds.inputs[:k], ds.targets[:k], name=f"{ds.name}:train")
    test = DataSlice(ds.inputs[k:], ds.targets[k:], name=f"{ds.name}:test")
    return train, test


def validation_split(ds: Dataset, fraction: float = 0.2) -> Tuple[DataSlice, DataSlice]:
    """Carve the last `fraction` of the training rows off as a validation slice"""
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"validation fraction must lie in (0, 1), got {fraction}")
    k = ds.train_count
    held = max(1, int(round(k * fraction)))
    if held >= k:
        raise ContractError(f"training block of {k} rows is too small to hold out {held}")
    cut = k - held
    fit = DataSlice(ds.inputs[:cut], ds.targets[:cut], name=f"{ds.name}:fit")
    val = DataSlice(ds.inputs[cut:k], ds.targets[cut:k], name=f"{ds.name}:validation")
    return fit, val


def normalize_minmax(ds: Dataset) -> Dataset:
    """Scale every input column and the target into [0, 1] using training-row statistics"""
    k = ds.train_count
    lo_in = ds.inputs[:k].min(axis=0)
    span_in = ds.inputs[:k].max(axis=0) - lo_in
    span_in[span_in == 0] = 1.0
    lo_t = ds.targets[:k].min()
    span_t = ds.targets[:k].max() - lo_t or 1.0
    return Dataset(
        (ds.inputs - lo_in) / span_in,
        (ds.targets - lo_t) / span_t,
        k,
        name=ds.name,
        times=ds.times,
        synthetic=ds.synthetic,
        scaling={'input_min': lo_in.tolist(), 'input_span': span_in.tolist(),
                 'target_min': float(lo_t), 'target_span': float(span_t)},
    )


def load_dataset(dataset_id: str, path: Optional[str] = None, seed: int = 0) -> Dataset:
    """Resolve one of the three benchmark series to its supervised dataset"""
    if dataset_id == 'mackey-glass':
        return embed_mackey(mackey_glass_generate())

    data_dir = default_data_dir()
    if dataset_id == 'gas-furnace':
        path = path or os.path.join(data_dir, 'gas_furnace.txt')
        return load_gas_furnace(path)

    if dataset_id == 'wastewater':
        path = path or os.path.join(data_dir, 'wastewater.txt')
        if os.path.exists(path):
            return load_wastewater(path)
        logger.warning(f"Wastewater file {path} not found; using the synthetic generator (seed {seed})")
        return embed_wastewater(synthesize_wastewater(seed=seed))

    raise ContractError(f"unknown dataset id '{dataset_id}' (expected one of {', '.join(DATASET_IDS)})")


def write_series_csv(series: Series, path: str):
    """CSV with header t,value"""
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['t', 'value'])
            for k, value in enumerate(series.values):
                writer.writerow([series.offset + k, f"{value:.10g}"])
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}")


def write_dataset_csv(ds: Dataset, path: str):
    """CSV with header t,in1..inK,target"""
    header = ['t'] + [f"in{i + 1}" for i in range(ds.input_dim)] + ['target']
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            for t, x, target in zip(ds.times, ds.inputs, ds.targets):
                writer.writerow([int(t)] + [f"{v:.10g}" for v in x] + [f"{target:.10g}"])
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}")


def describe(ds: Dataset) -> str:
    label = ' (synthetic)' if ds.synthetic else ''
    return f"{ds.name}{label}: {len(ds)} rows, {ds.input_dim} inputs, {ds.train_count} train"

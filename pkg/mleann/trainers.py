import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .utils import logger, ContractError, NumericError, TrainingAborted, FlopLedger, charge
from .net import Mlp, EvalTape, evaluate, loss, rmse, backward_gradient, jacobian

ALGORITHMS = ('BP', 'SCG', 'QNA', 'LM')

# BFGS skips the update when q.p falls below this fraction of |q||p|
CURVATURE_FLOOR = 1e-10

# Gradient norm (relative to 1 + psi) treated as a stationary point
GRADIENT_TOL = 1e-14

LINE_SEARCH_MAX_EVALS = 20
LINE_SEARCH_MIN_SHRINK = 0.1

LM_MU_FLOOR = 1e-20


class LineSearchFailure(NumericError):
    """No point with sufficient decrease was found along the direction"""


class NonDescentDirection(ContractError):
    """Line search was handed a direction with non-negative slope"""


class CurvatureSkip(NumericError):
    """Secant pair fails the curvature condition; the BFGS update is skipped"""


class DampingFailure(NumericError):
    """Damped normal-equation solve failed; damping must be raised"""


@dataclass
class BpConfig:
    learning_rate: float = 0.25
    momentum: float = 0.25
    epochs: int = 2500

    def validate(self):
        if not self.learning_rate > 0:
            raise ContractError(f"BP learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"BP momentum must lie in [0, 1), got {self.momentum}")
        _check_epochs(self.epochs)


@dataclass
class ScgConfig:
    sigma: float = 5e-5
    lam: float = 5e-7
    epochs: int = 2500

    def validate(self):
        if not self.sigma > 0:
            raise ContractError(f"SCG sigma must be positive, got {self.sigma}")
        if not self.lam >= 0:
            raise ContractError(f"SCG lambda must be non-negative, got {self.lam}")
        _check_epochs(self.epochs)


@dataclass
class QnaConfig:
    step_init: float = 1.0
    step_limit: float = 0.5
    perf_scale: float = 0.001
    step_scale: float = 0.1
    epochs: int = 2500

    def validate(self):
        for name in ('step_init', 'step_limit', 'perf_scale', 'step_scale'):
            if not getattr(self, name) > 0:
                raise ContractError(f"QNA {name} must be positive, got {getattr(self, name)}")
        if not self.step_limit < 1:
            raise ContractError(f"QNA step_limit must be below 1, got {self.step_limit}")
        if not self.perf_scale < self.step_scale < 1:
            raise ContractError("QNA needs perf_scale < step_scale < 1")
        _check_epochs(self.epochs)


@dataclass
class LmConfig:
    mu: float = 0.001
    mu_inc: float = 10.0
    mu_dec: float = 10.0
    mu_max: float = 1e10
    epochs: int = 2500

    def validate(self):
        if not self.mu > 0:
            raise ContractError(f"LM damping must be positive, got {self.mu}")
        if not (self.mu_inc > 1 and self.mu_dec > 1):
            raise ContractError("LM damping factors must exceed 1")
        if not self.mu_max >= self.mu:
            raise ContractError(f"LM mu_max {self.mu_max} is below the initial damping {self.mu}")
        _check_epochs(self.epochs)


CONFIG_TYPES = {'BP': BpConfig, 'SCG': ScgConfig, 'QNA': QnaConfig, 'LM': LmConfig}


def _check_epochs(epochs: int):
    if epochs < 0:
        raise ContractError(f"epochs must be non-negative, got {epochs}")


def normalize_algorithm(name: str) -> str:
    tag = name.strip().upper()
    if tag not in ALGORITHMS:
        raise ContractError(f"unknown algorithm '{name}' (expected one of {', '.join(ALGORITHMS)})")
    return tag


def default_config(algorithm: str, epochs: int = 2500):
    """Fixed settings used by the conventional sweeps"""
    return CONFIG_TYPES[normalize_algorithm(algorithm)](epochs=epochs)


class Objective(Protocol):
    """Sum-of-squares objective over a parameter vector"""
    size: int
    rows: int

    def loss(self, w: np.ndarray) -> float: ...

    def gradient(self, w: np.ndarray) -> Tuple[float, np.ndarray]: ...

    def jacobian(self, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]: ...


class NetObjective:
    """Objective view of a network shape over a training slice.

    The last evaluation tape is kept so that a gradient or Jacobian requested
    at the weights of the previous loss call only pays for the backward pass.
    """

    def __init__(self, template: Mlp, data, ledger: Optional[FlopLedger] = None):
        self.template = template
        self.data = data
        self.ledger = ledger
        self.size = template.size
        rows = getattr(data, 'rows', None)
        if not isinstance(rows, (int, np.integer)):
            raise ContractError(f"training data must be a row slice, got {type(data).__name__}; "
                                "split the dataset first")
        self.rows = int(rows)
        self._cached_w: Optional[np.ndarray] = None
        self._cached_tape: Optional[EvalTape] = None

    def network(self, w: np.ndarray) -> Mlp:
        return self.template.with_parameters(w)

    def _tape(self, w: np.ndarray) -> EvalTape:
        if self._cached_w is not None and np.array_equal(self._cached_w, w):
            return self._cached_tape
        net = self.network(w)
        tape = evaluate(net, self.data.inputs, self.data.targets, self.ledger)
        self._cached_w = np.array(w, copy=True)
        self._cached_tape = tape
        return tape

    def loss(self, w: np.ndarray) -> float:
        tape = self._tape(w)
        return loss(tape.net, self.data, self.ledger, tape=tape)

    def gradient(self, w: np.ndarray) -> Tuple[float, np.ndarray]:
        tape = self._tape(w)
        result = backward_gradient(tape.net, self.data, self.ledger, tape=tape)
        return result.psi, result.g

    def jacobian(self, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        tape = self._tape(w)
        result = jacobian(tape.net, self.data, self.ledger, tape=tape)
        return result.J, result.e


@dataclass
class OptimizeResult:
    w: np.ndarray
    psi: float
    epochs: int
    reason: str


EpochCallback = Callable[[int, np.ndarray, float], None]


def _notify(on_epoch: Optional[EpochCallback], epoch: int, w: np.ndarray, psi: float):
    if not math.isfinite(psi):
        raise TrainingAborted(epoch, f"non-finite training loss {psi}")
    if on_epoch is not None:
        on_epoch(epoch, w, psi)


def _stationary(g: np.ndarray, psi: float) -> bool:
    return float(np.linalg.norm(g)) <= GRADIENT_TOL * (1.0 + abs(psi))


def optimize_bp(obj: Objective, w0: np.ndarray, cfg: BpConfig,
                on_epoch: Optional[EpochCallback] = None,
                ledger: Optional[FlopLedger] = None) -> OptimizeResult:
    """Full-batch gradient descent with momentum on the mean squared error"""
    cfg.validate()
    w = np.array(w0, dtype=float)
    step = np.zeros_like(w)
    scale = cfg.learning_rate / obj.rows
    psi = obj.loss(w)

    for epoch in range(1, cfg.epochs + 1):
        psi, g = obj.gradient(w)
        step = cfg.momentum * step - scale * g
        w = w + step
        charge(ledger, 4 * w.size)
        psi = obj.loss(w)
        _notify(on_epoch, epoch, w, psi)

    return OptimizeResult(w, psi, cfg.epochs, 'completed')


def curvature_along(obj: Objective, w: np.ndarray, g: np.ndarray, d: np.ndarray,
                    sigma: float, ledger: Optional[FlopLedger] = None) -> Tuple[np.ndarray, float]:
    """Finite-difference Hessian-vector product s ~ H d and delta = d.s"""
    d_norm = float(np.linalg.norm(d))
    sigma_k = sigma / d_norm if d_norm > 0 else math.inf
    if not math.isfinite(sigma_k) or sigma_k <= 0:
        raise NumericError(f"SCG difference step {sigma_k} underflowed (|d| = {d_norm})")
    probe = w + sigma_k * d
    if np.array_equal(probe, w):
        raise NumericError(f"SCG difference step {sigma_k} is below weight resolution")
    _, g_probe = obj.gradient(probe)
    s = (g_probe - g) / sigma_k
    charge(ledger, 5 * w.size)
    return s, float(d @ s)


def optimize_scg(obj: Objective, w0: np.ndarray, cfg: ScgConfig,
                 on_epoch: Optional[EpochCallback] = None,
                 ledger: Optional[FlopLedger] = None) -> OptimizeResult:
    """Scaled conjugate gradient (Moller) without line search.

    A failed iteration (comparison parameter below zero) keeps the weights
    and direction, raises lambda and counts as an epoch.
    """
    cfg.validate()
    w = np.array(w0, dtype=float)
    p = w.size
    psi, g = obj.gradient(w)
    r = -g
    d = r.copy()
    lam = cfg.lam
    lam_bar = 0.0
    delta = 0.0
    success = True
    successes = 0

    for epoch in range(1, cfg.epochs + 1):
        if _stationary(r, psi):
            return OptimizeResult(w, psi, epoch - 1, 'converged')

        dd = float(d @ d)
        if success:
            _, delta = curvature_along(obj, w, -r, d, cfg.sigma, ledger)

        delta += (lam - lam_bar) * dd
        if delta <= 0:
            lam_bar = 2.0 * (lam - delta / dd)
            delta = -delta + lam * dd
            lam = lam_bar
        if not delta > 0:
            raise NumericError(f"SCG curvature scale delta = {delta} is not positive (lambda = {lam})")

        mu = float(d @ r)
        if mu == 0.0:
            d = r.copy()
            success = True
            charge(ledger, 4 * p)
            _notify(on_epoch, epoch, w, psi)
            continue

        alpha = mu / delta
        w_new = w + alpha * d
        psi_new = obj.loss(w_new)
        comparison = 2.0 * delta * (psi - psi_new) / (mu * mu)

        if comparison >= 0:
            psi_new, g_new = obj.gradient(w_new)
            r_new = -g_new
            lam_bar = 0.0
            success = True
            successes += 1
            if successes % p == 0:
                d = r_new.copy()
            else:
                beta = (float(r_new @ r_new) - float(r_new @ r)) / mu
                d = r_new + beta * d
            w, psi, r = w_new, psi_new, r_new
            if comparison >= 0.75:
                lam = lam / 4.0
        else:
            lam_bar = lam
            success = False

        if comparison < 0.25:
            lam = lam + delta * (1.0 - comparison) / dd
        charge(ledger, 12 * p)
        _notify(on_epoch, epoch, w, psi)

    return OptimizeResult(w, psi, cfg.epochs, 'completed')


@dataclass
class LineSearchResult:
    alpha: float
    value: float
    slope: float
    evaluations: int


def line_search(phi: Callable[[float], Tuple[float, float]], f0: float, s0: float,
                step_init: float = 1.0, step_limit: float = 0.5,
                perf_scale: float = 1e-4, step_scale: float = 0.1,
                max_evals: int = LINE_SEARCH_MAX_EVALS) -> LineSearchResult:
    """Bracketing line search with quadratic/secant interpolation.

    phi(alpha) returns the objective and its directional slope. Returns a
    step with sufficient decrease (perf_scale) whose slope magnitude has
    shrunk by step_scale, after at least two trials unless the first trial
    is already stationary. A trial failing sufficient decrease is contracted
    into [0.1, step_limit] times its distance from the best point.
    """
    if not s0 < 0:
        raise NonDescentDirection(f"line search needs a descent direction, slope is {s0}")

    lo = (0.0, f0, s0)
    hi: Optional[Tuple[float, float, float]] = None
    alpha = step_init

    for evals in range(1, max_evals + 1):
        f, s = phi(alpha)
        finite = math.isfinite(f) and math.isfinite(s)
        sufficient = finite and f <= f0 + perf_scale * alpha * s0

        if not sufficient or f >= lo[1]:
            hi = (alpha, f if finite else math.inf, s if finite else math.nan)
        else:
            if hi is None and s >= 0:
                hi = lo
            elif hi is not None and s * (hi[0] - alpha) >= 0:
                hi = lo
            prev = lo
            lo = (alpha, f, s)

        a_lo, f_lo, s_lo = lo
        if a_lo > 0:
            flat = abs(s_lo) <= 1e-12 * abs(s0)
            if flat or (evals >= 2 and abs(s_lo) <= step_scale * abs(s0)):
                return LineSearchResult(a_lo, f_lo, s_lo, evals)

        if hi is None:
            # still descending: extrapolate along the slopes
            a_prev, _, s_prev = prev
            guess = math.inf
            if s_lo > s_prev:
                guess = a_lo - s_lo * (a_lo - a_prev) / (s_lo - s_prev)
            alpha = min(max(guess, 2.0 * a_lo), 100.0 * a_lo)
            continue

        a_hi, f_hi, s_hi = hi
        width = a_hi - a_lo
        guess = math.nan
        if math.isfinite(s_hi) and (s_hi - s_lo) * width > 0 and math.isfinite(f_hi):
            guess = a_lo - s_lo * width / (s_hi - s_lo)
        elif math.isfinite(f_hi):
            curv = (f_hi - f_lo - s_lo * width) / (width * width)
            if curv > 0:
                guess = a_lo - s_lo / (2.0 * curv)

        if not sufficient:
            # backtracking contraction towards the best point
            low = a_lo + LINE_SEARCH_MIN_SHRINK * width
            high = a_lo + step_limit * width
        else:
            low = min(a_lo, a_hi) + 0.01 * abs(width)
            high = max(a_lo, a_hi) - 0.01 * abs(width)
        low, high = min(low, high), max(low, high)
        if not math.isfinite(guess):
            guess = 0.5 * (low + high)
        alpha = min(max(guess, low), high)

    if lo[0] > 0:
        return LineSearchResult(lo[0], lo[1], lo[2], max_evals)
    raise LineSearchFailure(f"no decrease found in {max_evals} line-search evaluations")


def bfgs_update(M: np.ndarray, p: np.ndarray, q: np.ndarray,
                ledger: Optional[FlopLedger] = None) -> np.ndarray:
    """BFGS update of the inverse-Hessian estimate from step p and gradient change q"""
    qp = float(q @ p)
    if qp <= CURVATURE_FLOOR * float(np.linalg.norm(q)) * float(np.linalg.norm(p)):
        raise CurvatureSkip(f"curvature condition failed (q.p = {qp:.3e})")
    rho = 1.0 / qp
    Mq = M @ q
    qMq = float(q @ Mq)
    updated = (M + (1.0 + rho * qMq) * rho * np.outer(p, p)
               - rho * (np.outer(p, Mq) + np.outer(Mq, p)))
    charge(ledger, 10 * p.size * p.size)
    return 0.5 * (updated + updated.T)


def optimize_qna(obj: Objective, w0: np.ndarray, cfg: QnaConfig,
                 on_epoch: Optional[EpochCallback] = None,
                 ledger: Optional[FlopLedger] = None) -> OptimizeResult:
    """BFGS quasi-Newton with a line search on every iteration"""
    cfg.validate()
    w = np.array(w0, dtype=float)
    p = w.size
    identity = np.eye(p)
    M = identity.copy()
    psi, g = obj.gradient(w)

    for epoch in range(1, cfg.epochs + 1):
        if _stationary(g, psi):
            return OptimizeResult(w, psi, epoch - 1, 'converged')

        found = None
        for attempt in range(2):
            d = -(M @ g)
            charge(ledger, 2 * p * p)
            slope = float(g @ d)
            if not slope < 0:
                logger.debug(f"QNA epoch {epoch}: non-descent direction, resetting M")
                M = identity.copy()
                d = -g
                slope = float(g @ d)

            trials: Dict[float, Tuple[float, np.ndarray]] = {}

            def phi(alpha: float) -> Tuple[float, float]:
                value, grad = obj.gradient(w + alpha * d)
                trials[alpha] = (value, grad)
                return value, float(grad @ d)

            try:
                result = line_search(phi, psi, slope, cfg.step_init, cfg.step_limit,
                                     cfg.perf_scale, cfg.step_scale)
                found = (result.alpha, d)
                break
            except LineSearchFailure as e:
                if attempt == 0 and not np.array_equal(M, identity):
                    logger.debug(f"QNA epoch {epoch}: {e}; resetting M")
                    M = identity.copy()
                    continue
                logger.debug(f"QNA epoch {epoch}: {e}; stopping")
                break

        if found is None:
            return OptimizeResult(w, psi, epoch - 1, 'stalled')

        alpha, d = found
        psi_new, g_new = trials[alpha]
        step = alpha * d
        try:
            M = bfgs_update(M, step, g_new - g, ledger)
        except CurvatureSkip as e:
            logger.debug(f"QNA epoch {epoch}: {e}; resetting M")
            M = identity.copy()
        w, psi, g = w + step, psi_new, g_new
        charge(ledger, 4 * p)
        _notify(on_epoch, epoch, w, psi)

    return OptimizeResult(w, psi, cfg.epochs, 'completed')


def normal_equations(J: np.ndarray, e: np.ndarray,
                     ledger: Optional[FlopLedger] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton matrix J J^T and right-hand side J e"""
    p, n = J.shape
    charge(ledger, 2 * p * p * n + 2 * p * n)
    return J @ J.T, J @ e


def solve_damped(A: np.ndarray, b: np.ndarray, mu: float,
                 ledger: Optional[FlopLedger] = None) -> np.ndarray:
    """Cholesky solve of (A + mu I) delta = b"""
    if mu < 0:
        raise ContractError(f"damping must be non-negative, got {mu}")
    p = b.size
    damped = A.copy()
    damped[np.diag_indices(p)] += mu
    charge(ledger, p * p * p // 3 + 2 * p * p + p)
    try:
        factor = cho_factor(damped)
        delta = cho_solve(factor, b)
    except (LinAlgError, ValueError) as e:
        raise DampingFailure(f"damped solve failed at mu={mu:.3e}: {e}")
    if not np.all(np.isfinite(delta)):
        raise DampingFailure(f"damped solve produced non-finite step at mu={mu:.3e}")
    return delta


def damped_step(J: np.ndarray, e: np.ndarray, mu: float,
                ledger: Optional[FlopLedger] = None) -> np.ndarray:
    """Solve (J J^T + mu I) delta = J e; w - delta is the candidate"""
    A, b = normal_equations(J, e, ledger)
    return solve_damped(A, b, mu, ledger)


def lm_step(net: Mlp, data, mu: float, ledger: Optional[FlopLedger] = None) -> Tuple[np.ndarray, float]:
    """One tentative Levenberg-Marquardt step; returns candidate weights and the linearized loss"""
    result = jacobian(net, data, ledger)
    delta = damped_step(result.J, result.e, mu, ledger)
    predicted = result.e - result.J.T @ delta
    return net.parameters() - delta, float(predicted @ predicted)


def optimize_lm(obj: Objective, w0: np.ndarray, cfg: LmConfig,
                on_epoch: Optional[EpochCallback] = None,
                ledger: Optional[FlopLedger] = None) -> OptimizeResult:
    """Levenberg-Marquardt with multiplicative damping control"""
    cfg.validate()
    w = np.array(w0, dtype=float)
    mu = cfg.mu
    J, e = obj.jacobian(w)
    psi = float(e @ e)

    for epoch in range(1, cfg.epochs + 1):
        if _stationary(J @ e, psi):
            return OptimizeResult(w, psi, epoch - 1, 'converged')

        A, b = normal_equations(J, e, ledger)
        accepted = None
        while mu <= cfg.mu_max:
            try:
                candidate = w - solve_damped(A, b, mu, ledger)
            except DampingFailure as err:
                logger.debug(f"LM epoch {epoch}: {err}")
                mu *= cfg.mu_inc
                continue
            psi_try = obj.loss(candidate)
            if psi_try < psi:
                accepted = candidate
                mu = max(mu / cfg.mu_dec, LM_MU_FLOOR)
                break
            mu *= cfg.mu_inc

        if accepted is None:
            logger.debug(f"LM epoch {epoch}: damping exceeded {cfg.mu_max:.1e}, stopping")
            return OptimizeResult(w, psi, epoch - 1, 'damping_limit')

        w = accepted
        J, e = obj.jacobian(w)
        psi = float(e @ e)
        _notify(on_epoch, epoch, w, psi)

    return OptimizeResult(w, psi, cfg.epochs, 'completed')


OPTIMIZERS = {'BP': optimize_bp, 'SCG': optimize_scg, 'QNA': optimize_qna, 'LM': optimize_lm}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_rmse: float
    test_rmse: Optional[float]
    flops: int


@dataclass
class TrainReport:
    algorithm: str
    net: Mlp
    initial: EpochRecord
    history: List[EpochRecord] = field(default_factory=list)
    flops: int = 0
    reason: str = 'completed'

    @property
    def epochs(self) -> int:
        return len(self.history)

    @property
    def weights(self) -> np.ndarray:
        return self.net.parameters()

    @property
    def final(self) -> EpochRecord:
        return self.history[-1] if self.history else self.initial

    def records(self) -> List[EpochRecord]:
        return [self.initial] + self.history


def train(algorithm: str, net: Mlp, data, cfg: Any = None, test=None,
          ledger: Optional[FlopLedger] = None) -> TrainReport:
    """Run one local-search algorithm from the network's current weights.

    Flops of the training itself go to the ledger; monitoring of the test
    slice is not charged.
    """
    tag = normalize_algorithm(algorithm)
    cfg = cfg if cfg is not None else default_config(tag)
    if not isinstance(cfg, CONFIG_TYPES[tag]):
        raise ContractError(f"{tag} expects {CONFIG_TYPES[tag].__name__}, got {type(cfg).__name__}")
    cfg.validate()
    if net.input_dim != data.input_dim:
        raise ContractError(f"network takes {net.input_dim} inputs but data has {data.input_dim}")

    ledger = ledger if ledger is not None else FlopLedger()
    obj = NetObjective(net, data, ledger)
    n = obj.rows

    def snapshot(epoch: int, w: np.ndarray, psi: float) -> EpochRecord:
        test_rmse = rmse(obj.network(w), test) if test is not None else None
        return EpochRecord(epoch, psi, math.sqrt(psi / n), test_rmse, ledger.count)

    w0 = net.parameters()
    try:
        initial = snapshot(0, w0, obj.loss(w0))
    except NumericError as e:
        raise TrainingAborted(0, str(e))
    report = TrainReport(tag, net, initial)

    def on_epoch(epoch: int, w: np.ndarray, psi: float):
        record = snapshot(epoch, w, psi)
        report.history.append(record)
        logger.debug(f"{tag} epoch {epoch}: train rmse {record.train_rmse:.6g}, flops {record.flops}")

    try:
        result = OPTIMIZERS[tag](obj, w0, cfg, on_epoch=on_epoch, ledger=ledger)
    except TrainingAborted:
        raise
    except NumericError as e:
        raise TrainingAborted(report.epochs + 1, str(e))

    report.net = obj.network(result.w)
    report.flops = ledger.count
    report.reason = result.reason
    return report


def train_bp(net: Mlp, data, cfg: BpConfig, test=None, ledger: Optional[FlopLedger] = None) -> TrainReport:
    return train('BP', net, data, cfg, test, ledger)


def train_scg(net: Mlp, data, cfg: ScgConfig, test=None, ledger: Optional[FlopLedger] = None) -> TrainReport:
    return train('SCG', net, data, cfg, test, ledger)


def train_qna(net: Mlp, data, cfg: QnaConfig, test=None, ledger: Optional[FlopLedger] = None) -> TrainReport:
    return train('QNA', net, data, cfg, test, ledger)


def train_lm(net: Mlp, data, cfg: LmConfig, test=None, ledger: Optional[FlopLedger] = None) -> TrainReport:
    return train('LM', net, data, cfg, test, ledger)


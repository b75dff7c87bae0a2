import re
from enum import Enum
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .utils import logger, ContractError, DataError, NumericError, FlopLedger, charge, check_finite

# Flops charged per scalar activation and per scalar derivative
ACTIVATION_FLOPS = 6
DERIVATIVE_FLOPS = 3

NET_HEADER_PREFIX = '# mleann-net'

ARCH_TOKEN_REGEX = re.compile(r'^\s*(\d+)\s*(T\*|L\*|T|L|S)\s*$')


class ActivationKind(str, Enum):
    T = 'T'
    L = 'L'
    S = 'S'
    TSTAR = 'T*'
    LSTAR = 'L*'

    @classmethod
    def from_label(cls, label: str) -> 'ActivationKind':
        try:
            return cls(label.strip())
        except ValueError:
            raise ContractError(f"unknown activation label '{label}' (expected T, L, S, T*, L*)")


ACTIVATION_ALPHABET = (
    ActivationKind.T,
    ActivationKind.L,
    ActivationKind.S,
    ActivationKind.TSTAR,
    ActivationKind.LSTAR,
)


def activate(kind: ActivationKind, z: np.ndarray) -> np.ndarray:
    """Hidden-node transfer function.

    T and T* are tanh; L and L* are the logistic function; S is the
    fast sigmoid z / (1 + |z|).
    """
    if kind in (ActivationKind.T, ActivationKind.TSTAR):
        return np.tanh(z)
    if kind in (ActivationKind.L, ActivationKind.LSTAR):
        return expit(z)
    return z / (1.0 + np.abs(z))


def activation_derivative(kind: ActivationKind, z: np.ndarray) -> np.ndarray:
    """Exact derivative of `activate` with respect to its argument"""
    if kind in (ActivationKind.T, ActivationKind.TSTAR):
        a = np.tanh(z)
        return 1.0 - a * a
    if kind in (ActivationKind.L, ActivationKind.LSTAR):
        a = expit(z)
        return a * (1.0 - a)
    return 1.0 / (1.0 + np.abs(z)) ** 2


def pack_parameters(w_in: np.ndarray, b_hid: np.ndarray, w_out: np.ndarray, b_out: float) -> np.ndarray:
    """Flatten into the canonical order: per hidden node [w_in[:, h], b_hid[h]], then w_out, b_out"""
    blocks = np.vstack([w_in, b_hid[None, :]])
    return np.concatenate([blocks.T.ravel(), w_out, [b_out]])


def parameter_count(input_dim: int, hidden_count: int) -> int:
    return hidden_count * (input_dim + 2) + 1


@dataclass(frozen=True, eq=False)
class Mlp:
    """One hidden layer, labelled transfer functions, single linear output"""
    input_dim: int
    hidden: Tuple[ActivationKind, ...]
    w_in: np.ndarray
    b_hid: np.ndarray
    w_out: np.ndarray
    b_out: float

    def __post_init__(self):
        hidden = tuple(ActivationKind.from_label(k) for k in self.hidden)
        h = len(hidden)
        if self.input_dim < 1:
            raise ContractError(f"input_dim must be positive, got {self.input_dim}")
        w_in = np.array(self.w_in, dtype=float)
        if w_in.size != self.input_dim * h:
            raise ContractError(f"w_in must hold {self.input_dim}x{h} weights, got {w_in.size}")
        w_in = w_in.reshape(self.input_dim, h)
        b_hid = np.array(self.b_hid, dtype=float).ravel()
        w_out = np.array(self.w_out, dtype=float).ravel()
        if b_hid.size != h or w_out.size != h:
            raise ContractError(f"bias/output vectors must have {h} entries")
        for arr in (w_in, b_hid, w_out):
            arr.setflags(write=False)
        object.__setattr__(self, 'hidden', hidden)
        object.__setattr__(self, 'w_in', w_in)
        object.__setattr__(self, 'b_hid', b_hid)
        object.__setattr__(self, 'w_out', w_out)
        object.__setattr__(self, 'b_out', float(self.b_out))
        check_finite(self.parameters(), 'network parameter')

    @property
    def hidden_count(self) -> int:
        return len(self.hidden)

    @property
    def size(self) -> int:
        return parameter_count(self.input_dim, self.hidden_count)

    def parameters(self) -> np.ndarray:
        return pack_parameters(self.w_in, self.b_hid, self.w_out, self.b_out)

    def with_parameters(self, w: np.ndarray) -> 'Mlp':
        """Same shape, new weights in canonical order"""
        return Mlp.from_parameters(self.input_dim, self.hidden, w)

    @classmethod
    def from_parameters(cls, input_dim: int, hidden: Sequence[ActivationKind], w: np.ndarray) -> 'Mlp':
        h = len(hidden)
        w = np.asarray(w, dtype=float).ravel()
        expected = parameter_count(input_dim, h)
        if w.size != expected:
            raise ContractError(f"expected {expected} parameters for {input_dim}-{h}-1, got {w.size}")
        blocks = w[:h * (input_dim + 1)].reshape(h, input_dim + 1)
        return cls(
            input_dim=input_dim,
            hidden=tuple(hidden),
            w_in=blocks[:, :input_dim].T,
            b_hid=blocks[:, input_dim],
            w_out=w[h * (input_dim + 1):h * (input_dim + 2)],
            b_out=w[-1],
        )

    @classmethod
    def random(cls, input_dim: int, hidden: Sequence[ActivationKind], rng: np.random.Generator,
               scale: float = 0.3) -> 'Mlp':
        """Weights drawn uniformly from [-scale, scale]"""
        p = parameter_count(input_dim, len(hidden))
        return cls.from_parameters(input_dim, hidden, rng.uniform(-scale, scale, size=p))

    @classmethod
    def zeros(cls, input_dim: int, hidden: Sequence[ActivationKind]) -> 'Mlp':
        return cls.from_parameters(input_dim, hidden, np.zeros(parameter_count(input_dim, len(hidden))))

    @property
    def architecture(self) -> str:
        return format_architecture(self.hidden)


@dataclass(frozen=True, eq=False)
class EvalTape:
    """Cached intermediates of one evaluation; bound to the network that produced it"""
    net: Mlp
    inputs: np.ndarray
    pre: np.ndarray
    act: np.ndarray
    outputs: np.ndarray
    residuals: Optional[np.ndarray] = None

    @property
    def rows(self) -> int:
        return int(self.outputs.size)


@dataclass(frozen=True, eq=False)
class GradientResult:
    g: np.ndarray
    psi: float


@dataclass(frozen=True, eq=False)
class JacobianResult:
    J: np.ndarray
    e: np.ndarray


def forward_flops(input_dim: int, hidden_count: int, rows: int) -> int:
    d, h = input_dim, hidden_count
    per_row = 2 * d * h + h + h * ACTIVATION_FLOPS + 2 * h + 1
    return rows * per_row


def backward_flops(input_dim: int, hidden_count: int, rows: int) -> int:
    d, h = input_dim, hidden_count
    per_row = h * DERIVATIVE_FLOPS + 2 * h + 2 * d * h + 2 * h + 2 * h + 2
    return rows * per_row


def jacobian_flops(input_dim: int, hidden_count: int, rows: int) -> int:
    d, h = input_dim, hidden_count
    per_row = h * DERIVATIVE_FLOPS + h + d * h
    return rows * per_row


def _hidden_layer(net: Mlp, pre: np.ndarray, fn) -> np.ndarray:
    out = np.empty_like(pre)
    for kind in set(net.hidden):
        cols = [h for h, k in enumerate(net.hidden) if k == kind]
        out[:, cols] = fn(kind, pre[:, cols])
    return out


def _check_inputs(net: Mlp, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    if inputs.ndim != 2 or inputs.shape[1] != net.input_dim:
        raise ContractError(f"input rows must have {net.input_dim} entries, got shape {inputs.shape}")
    if inputs.shape[0] == 0:
        raise ContractError("empty data slice")
    return inputs


def evaluate(net: Mlp, inputs: np.ndarray, targets: Optional[np.ndarray] = None,
             ledger: Optional[FlopLedger] = None) -> EvalTape:
    """Batched forward pass; residuals y - t are cached when targets are given"""
    inputs = _check_inputs(net, inputs)
    pre = inputs @ net.w_in + net.b_hid
    act = _hidden_layer(net, pre, activate)
    outputs = act @ net.w_out + net.b_out
    check_finite(outputs, 'network output')
    charge(ledger, forward_flops(net.input_dim, net.hidden_count, outputs.size))

    residuals = None
    if targets is not None:
        targets = np.asarray(targets, dtype=float).ravel()
        if targets.size != outputs.size:
            raise ContractError(f"{outputs.size} input rows but {targets.size} targets")
        residuals = outputs - targets
        charge(ledger, outputs.size)
    return EvalTape(net, inputs, pre, act, outputs, residuals)


def forward(net: Mlp, x: np.ndarray, ledger: Optional[FlopLedger] = None) -> Tuple[float, EvalTape]:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ContractError("forward takes a single input vector")
    tape = evaluate(net, x, ledger=ledger)
    return float(tape.outputs[0]), tape


def _tape_for(net: Mlp, data, tape: Optional[EvalTape], ledger: Optional[FlopLedger]) -> EvalTape:
    if tape is None:
        return evaluate(net, data.inputs, data.targets, ledger)
    if tape.net is not net or tape.residuals is None:
        raise ContractError("evaluation tape belongs to a different network or has no residuals")
    return tape


def loss(net: Mlp, data, ledger: Optional[FlopLedger] = None, tape: Optional[EvalTape] = None) -> float:
    """Sum of squared residuals over the slice"""
    tape = _tape_for(net, data, tape, ledger)
    charge(ledger, 2 * tape.rows)
    return float(np.dot(tape.residuals, tape.residuals))


def rmse(net: Mlp, data, ledger: Optional[FlopLedger] = None) -> float:
    tape = _tape_for(net, data, None, ledger)
    return float(np.sqrt(np.dot(tape.residuals, tape.residuals) / tape.rows))


def _output_sensitivities(net: Mlp, tape: EvalTape) -> np.ndarray:
    """d y_j / d pre_jh for every row and hidden node"""
    deriv = _hidden_layer(net, tape.pre, activation_derivative)
    delta = deriv * net.w_out
    check_finite(delta, 'hidden-node sensitivity')
    return delta


def backward_gradient(net: Mlp, data, ledger: Optional[FlopLedger] = None,
                      tape: Optional[EvalTape] = None) -> GradientResult:
    """Backpropagated gradient of the sum-squared error"""
    tape = _tape_for(net, data, tape, ledger)
    e = tape.residuals
    delta = _output_sensitivities(net, tape)

    two_e = 2.0 * e
    hidden_err = delta * two_e[:, None]
    g = pack_parameters(
        tape.inputs.T @ hidden_err,
        hidden_err.sum(axis=0),
        tape.act.T @ two_e,
        float(two_e.sum()),
    )
    check_finite(g, 'gradient entry')
    charge(ledger, backward_flops(net.input_dim, net.hidden_count, tape.rows) + 2 * tape.rows)
    return GradientResult(g=g, psi=float(np.dot(e, e)))


def jacobian(net: Mlp, data, ledger: Optional[FlopLedger] = None,
             tape: Optional[EvalTape] = None) -> JacobianResult:
    """J[i, j] = d e_j / d w_i in canonical parameter order"""
    tape = _tape_for(net, data, tape, ledger)
    n = tape.rows
    delta = _output_sensitivities(net, tape)

    node_blocks = np.concatenate([tape.inputs[:, None, :] * delta[:, :, None], delta[:, :, None]], axis=2)
    rows = np.hstack([node_blocks.reshape(n, -1), tape.act, np.ones((n, 1))])
    J = rows.T
    check_finite(J, 'Jacobian entry')
    charge(ledger, jacobian_flops(net.input_dim, net.hidden_count, n))
    return JacobianResult(J=J, e=tape.residuals.copy())


def parse_architecture(text: str) -> Tuple[ActivationKind, ...]:
    """'8T,2T*,1L*' -> eight T nodes, two T*, one L*"""
    if not text or not text.strip():
        raise ContractError("empty architecture string")
    kinds: List[ActivationKind] = []
    for token in text.split(','):
        m = ARCH_TOKEN_REGEX.match(token)
        if not m:
            raise ContractError(f"bad architecture token '{token.strip()}' in '{text}'")
        count = int(m.group(1))
        if count < 1:
            raise ContractError(f"architecture token '{token.strip()}' has zero nodes")
        kinds.extend([ActivationKind(m.group(2))] * count)
    return tuple(kinds)


def format_architecture(kinds: Sequence[ActivationKind]) -> str:
    """Inverse of parse_architecture, grouping consecutive equal labels"""
    tokens = []
    for kind in kinds:
        label = ActivationKind(kind).value
        if tokens and tokens[-1][1] == label:
            tokens[-1][0] += 1
        else:
            tokens.append([1, label])
    return ','.join(f"{n}{label}" for n, label in tokens)


def save_network(net: Mlp, path: str):
    try:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(f"{NET_HEADER_PREFIX} arch={net.architecture} input_dim={net.input_dim}\n")
            for value in net.parameters():
                f.write(f"{value:.17g}\n")
    except OSError as e:
        raise DataError(f"cannot write network file {path}: {e}")
    logger.debug(f"Saved {net.architecture} network to {path}")


def load_network(path: str) -> Mlp:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = [line.strip() for line in f if line.strip()]
    except OSError as e:
        raise DataError(f"cannot read network file {path}: {e}")

    if not lines or not lines[0].startswith(NET_HEADER_PREFIX):
        raise DataError(f"{path}: missing '{NET_HEADER_PREFIX}' header")
    fields = dict(part.split('=', 1) for part in lines[0][len(NET_HEADER_PREFIX):].split() if '=' in part)
    if 'arch' not in fields or 'input_dim' not in fields:
        raise DataError(f"{path}: header must carry arch= and input_dim=")

    try:
        values = np.array([float(v) for v in lines[1:]])
    except ValueError as e:
        raise DataError(f"{path}: bad parameter value: {e}")
    try:
        return Mlp.from_parameters(int(fields['input_dim']), parse_architecture(fields['arch']), values)
    except (ContractError, NumericError) as e:
        raise DataError(f"{path}: {e}")

import os
import math
import sys
from typing import Tuple

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mleann.data import DataSlice

FIXTURES_DIR = os.path.join(os.path.dirname(__file__), 'fixtures')


def fixture_path(filename: str) -> str:
    return os.path.join(FIXTURES_DIR, filename)


class QuadraticObjective:
    """psi(w) = 1/2 w^T H w, one residual row"""

    def __init__(self, H: np.ndarray):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.size = self.H.shape[0]
        self.rows = 1
        self.gradient_calls = 0

    def loss(self, w: np.ndarray) -> float:
        return float(0.5 * w @ self.H @ w)

    def gradient(self, w: np.ndarray) -> Tuple[float, np.ndarray]:
        self.gradient_calls += 1
        return self.loss(w), self.H @ w

    def jacobian(self, w: np.ndarray):
        raise NotImplementedError("quadratic objective has no residual form")


class LinearResidualObjective:
    """Residuals e = A w - t; psi = sum e^2"""

    def __init__(self, A: np.ndarray, t: np.ndarray):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.t = np.asarray(t, dtype=float)
        self.size = self.A.shape[1]
        self.rows = self.A.shape[0]

    def residuals(self, w: np.ndarray) -> np.ndarray:
        return self.A @ w - self.t

    def loss(self, w: np.ndarray) -> float:
        e = self.residuals(w)
        return float(e @ e)

    def gradient(self, w: np.ndarray) -> Tuple[float, np.ndarray]:
        e = self.residuals(w)
        return float(e @ e), 2.0 * self.A.T @ e

    def jacobian(self, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.A.T.copy(), self.residuals(w)

    def optimum(self) -> np.ndarray:
        return np.linalg.solve(self.A.T @ self.A, self.A.T @ self.t)


class SlopeObjective:
    """psi(w) = c.w; constant gradient, zero curvature"""

    def __init__(self, c: np.ndarray):
        self.c = np.asarray(c, dtype=float)
        self.size = self.c.size
        self.rows = 1

    def loss(self, w: np.ndarray) -> float:
        return float(self.c @ w)

    def gradient(self, w: np.ndarray) -> Tuple[float, np.ndarray]:
        return self.loss(w), self.c.copy()


class CliffObjective(QuadraticObjective):
    """Quadratic at one point, non-finite everywhere else"""

    def __init__(self, H: np.ndarray, anchor: np.ndarray):
        super().__init__(H)
        self.anchor = np.asarray(anchor, dtype=float)

    def loss(self, w: np.ndarray) -> float:
        return super().loss(w) if np.array_equal(w, self.anchor) else math.inf

    def gradient(self, w: np.ndarray) -> Tuple[float, np.ndarray]:
        if np.array_equal(w, self.anchor):
            return super().gradient(w)
        return math.inf, np.full(self.size, math.nan)


class NoDescentObjective(LinearResidualObjective):
    """Every trial loss sits above the loss implied by the residuals"""

    def loss(self, w: np.ndarray) -> float:
        return super().loss(w) + 1e6


def random_spd(p: int, rng: np.random.Generator, low: float = 1.0, high: float = 10.0) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.normal(size=(p, p)))
    return Q @ np.diag(rng.uniform(low, high, size=p)) @ Q.T


def random_slice(rows: int, input_dim: int, rng: np.random.Generator) -> DataSlice:
    inputs = rng.uniform(-1.0, 1.0, size=(rows, input_dim))
    targets = np.sin(inputs.sum(axis=1)) + 0.1 * rng.normal(size=rows)
    return DataSlice(inputs, targets)


def central_difference(f, w: np.ndarray) -> np.ndarray:
    """Central finite-difference gradient with step 1e-6 (1 + |w_i|)"""
    w = np.asarray(w, dtype=float)
    grad = np.empty_like(w)
    for i in range(w.size):
        h = 1e-6 * (1.0 + abs(w[i]))
        up = w.copy()
        down = w.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (f(up) - f(down)) / (up[i] - down[i])
    return grad

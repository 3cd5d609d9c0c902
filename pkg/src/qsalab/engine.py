"""Generic stochastic-approximation recursions.

Each estimator state is a small mutable dataclass owned by one run.  The step
functions update it in place and return it.  ``theta`` may carry leading batch
dimensions, so an ensemble of independent runs can be advanced with one call
(``theta`` of shape ``(N, d)``, matrices of shape ``(N, d, d)``).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

PINV_RCOND = 1e-8


class NumericalError(FloatingPointError):
    """Non-finite value encountered in an update."""


def _check_finite(name, value, n):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite {name} at iteration {n}")


# --- step sizes -------------------------------------------------------------

@dataclass(frozen=True)
class StepSchedule:
    """``alpha_n = min(1, g (n + shift)^{-rho})`` with ``rho`` in (1/2, 1]."""

    g: float = 1.0
    rho: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError("g must be positive")
        if not (0.5 < self.rho <= 1.0):
            raise ValueError(f"rho={self.rho} outside (0.5, 1]")
        if self.shift < 0:
            raise ValueError("shift must be nonnegative")

    def __call__(self, n):
        return step_size(self, n)


def step_size(schedule: StepSchedule, n):
    """Step size at iteration ``n >= 1`` (scalar or array)."""
    n = np.asarray(n, dtype=float)
    if np.any(n < 1):
        raise ValueError("iteration index starts at 1")
    a = np.minimum(1.0, schedule.g * (n + schedule.shift) ** (-schedule.rho))
    return float(a) if a.ndim == 0 else a


@dataclass(frozen=True)
class TwoTimeScale:
    """Pair of schedules with ``alpha_n / beta_n -> 0``.

    Equal exponents are rejected unless ``allow_equal=True``, which expresses
    the single time-scale variant; that configuration has no convergence
    theory and a warning is issued.
    """

    alpha: StepSchedule = StepSchedule(1.0, 1.0)
    beta: StepSchedule = StepSchedule(1.0, 0.85)
    allow_equal: bool = False

    def __post_init__(self):
        if self.beta.rho > self.alpha.rho:
            raise ValueError(f"beta decays faster than alpha (rho_beta={self.beta.rho} > "
                             f"rho_alpha={self.alpha.rho}); two time-scale ordering violated")
        if self.beta.rho == self.alpha.rho:
            if not self.allow_equal:
                raise ValueError("equal exponents: pass allow_equal=True for the single time-scale variant")
            warnings.warn("single time-scale variant: no convergence theory available", UserWarning)


# --- estimator states -------------------------------------------------------

@dataclass
class Plain:
    theta: np.ndarray
    n: int = 0


@dataclass
class MatrixGain:
    theta: np.ndarray
    counts: np.ndarray = None
    n: int = 0

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        if self.counts is None:
            self.counts = np.zeros(self.theta.shape[-1], dtype=np.int64)


@dataclass
class Zap:
    theta: np.ndarray
    A_hat: np.ndarray
    n: int = 0
    singular_events: int = 0


@dataclass
class ZapZero:
    theta: np.ndarray
    w: np.ndarray = None
    z: np.ndarray = None
    M: np.ndarray = None
    n: int = 0

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        d = self.theta.shape[-1]
        if self.w is None:
            self.w = np.zeros_like(self.theta)
        if self.z is None:
            self.z = np.zeros_like(self.theta)
        if self.M is None:
            self.M = np.eye(d)
        M = np.asarray(self.M, dtype=float)
        if M.shape != (d, d) or not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() < 0:
            raise ValueError("M must be a symmetric positive semidefinite d x d matrix")
        self.M = M


@dataclass
class PRAverager:
    """Running Polyak-Ruppert average ``(1/n) sum_k theta_k``."""

    total: np.ndarray = None
    count: int = 0

    @property
    def average(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("empty average")
        return self.total / self.count


# --- updates ------------------------------------------------------------------

def sa_step(state: Plain, f_value, alpha: float) -> Plain:
    """``theta <- theta + alpha f``."""
    f_value = np.asarray(f_value, dtype=float)
    if f_value.shape != np.shape(state.theta):
        raise ValueError(f"f_value shape {f_value.shape} != theta shape {np.shape(state.theta)}")
    _check_finite("f_value", f_value, state.n + 1)
    state.theta = state.theta + alpha * f_value
    state.n += 1
    return state


def matrix_gain_step(state: MatrixGain, coordinate: int, increment, alpha: float = 1.0) -> MatrixGain:
    """Diagonal matrix-gain update for the tabular setting.

    The visit count of ``coordinate`` is incremented first, so the first visit
    has gain ``alpha`` and the k-th visit ``alpha / k``.
    """
    d = state.theta.shape[-1]
    if not 0 <= coordinate < d:
        raise IndexError(f"coordinate {coordinate} out of range for d={d}")
    increment = np.asarray(increment, dtype=float)
    _check_finite("increment", increment, state.n + 1)
    state.counts[coordinate] += 1
    state.theta = state.theta + alpha * increment / max(int(state.counts[coordinate]), 1)
    state.n += 1
    return state


def regularized_inverse(A: np.ndarray, rcond: float = PINV_RCOND):
    """Moore-Penrose inverse with singular values below ``rcond * sigma_max`` dropped.

    Returns ``(A_inv, singular)`` where ``singular`` flags matrices (or, for a
    stack, the number of matrices) where anything was dropped.
    """
    U, s, Vt = np.linalg.svd(A)
    cut = rcond * s[..., :1]
    keep = s > cut
    s_inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    inv = np.swapaxes(Vt, -1, -2) @ (s_inv[..., :, None] * np.swapaxes(U, -1, -2))
    dropped = ~keep.all(axis=-1)
    return inv, int(np.sum(dropped))


def zap_step(state: Zap, f_value, A_sample, alpha: float, beta: float) -> Zap:
    """``A_hat <- A_hat + beta (A_sample - A_hat)``; ``theta <- theta - alpha A_hat^+ f``."""
    f_value = np.asarray(f_value, dtype=float)
    _check_finite("f_value", f_value, state.n + 1)
    _check_finite("A_sample", A_sample, state.n + 1)
    state.A_hat = state.A_hat + beta * (A_sample - state.A_hat)
    inv, singular = regularized_inverse(state.A_hat)
    state.singular_events += singular
    state.theta = state.theta - alpha * np.einsum("...ij,...j->...i", inv, f_value)
    state.n += 1
    return state


def zap_initial_matrix(samples, shift: float = 1e-3, sv_floor: float = 1e-6) -> np.ndarray:
    """Average of burn-in Jacobian samples, shifted by ``-shift I`` if nearly singular."""
    A0 = np.mean(np.asarray(samples, dtype=float), axis=0)
    d = A0.shape[-1]
    smin = np.linalg.svd(A0, compute_uv=False)[..., -1]
    bump = np.where(smin < sv_floor, shift, 0.0)
    return A0 - bump[..., None, None] * np.eye(d)


def burn_in_length(d: int) -> int:
    return int(math.ceil(10 * d))


def zap_zero_step(state: ZapZero, f_value, A_sample, alpha: float, beta: float) -> ZapZero:
    """One step of the inversion-free three-variable recursion.

    With ``L = M A_sample^T``::

        theta <- theta - alpha (theta + L w)
        w     <- w - beta (A_sample (theta + z) - f)
        z     <- z - beta (z - L w)

    All right-hand sides use the values before the update.
    """
    f_value = np.asarray(f_value, dtype=float)
    _check_finite("f_value", f_value, state.n + 1)
    _check_finite("A_sample", A_sample, state.n + 1)
    th, w, z = state.theta, state.w, state.z
    At_w = np.einsum("...ji,...j->...i", A_sample, w)                  # A^T w
    Lw = At_w @ state.M.T                                                 # M A^T w
    Az = np.einsum("...ij,...j->...i", A_sample, th + z)
    state.theta = th - alpha * (th + Lw)
    state.w = w - beta * (Az - f_value)
    state.z = z - beta * (z - Lw)
    state.n += 1
    return state


def pr_update(avg: PRAverager, theta) -> PRAverager:
    theta = np.asarray(theta, dtype=float)
    if avg.total is None:
        avg.total = np.zeros_like(theta)
    elif avg.total.shape != theta.shape:
        raise ValueError("dimension mismatch")
    avg.total = avg.total + theta
    avg.count += 1
    return avg


def fast_system_matrix(A: np.ndarray, M: np.ndarray | None = None) -> np.ndarray:
    """``[[0, -A], [M A^T, -I]]``, the frozen-theta dynamics of ``(w, z)``."""
    d = A.shape[0]
    M = np.eye(d) if M is None else M
    return np.block([[np.zeros((d, d)), -A], [M @ A.T, -np.eye(d)]])


def fast_system_roots(A: np.ndarray, M: np.ndarray | None = None) -> np.ndarray:
    """Roots of ``lambda^2 + lambda + mu = 0`` over eigenvalues ``mu`` of ``A M A^T``."""
    d = A.shape[0]
    M = np.eye(d) if M is None else M
    mu = np.linalg.eigvalsh(0.5 * (A @ M @ A.T + (A @ M @ A.T).T))
    disc = np.sqrt((1.0 - 4.0 * mu).astype(complex))
    return np.concatenate([(-1.0 + disc) / 2.0, (-1.0 - disc) / 2.0])


@dataclass
class Safeguard:
    """Optional projection of ``theta`` onto a ball, with an event count."""

    radius: float = 1e8
    enabled: bool = False
    events: int = 0
    log: list = field(default_factory=list)

    def apply(self, theta: np.ndarray, n: int) -> np.ndarray:
        if not self.enabled:
            return theta
        nrm = np.linalg.norm(theta, axis=-1, keepdims=True)
        over = nrm > self.radius
        if np.any(over):
            self.events += int(np.sum(over))
            self.log.append(n)
            theta = np.where(over, theta * (self.radius / np.where(over, nrm, 1.0)), theta)
        return theta

"""Synthetic stochastic-approximation problems with known solutions.

Two problems are provided.

* A linear-Gaussian problem ``f_{n+1}(theta) = A_{n+1} (theta - theta*) + Delta_{n+1}``
  with ``A_{n+1} = A* + sigma_w xi_{n+1} E`` and ``Delta_{n+1} ~ N(0, Sigma_Delta)``
  i.i.d.  The noise at the root is exactly ``Delta``, so the optimal
  asymptotic covariance is ``G Sigma_Delta G^T`` with ``G = -(A*)^{-1}``.
* A scalar coercive problem ``f_{n+1}(theta) = -theta^3 - theta + sigma Delta_{n+1}``
  with root ``0`` and sample derivative ``-3 theta^2 - 1 + sigma_w xi_{n+1}``.

Ensembles are run by a compiled kernel, one run at a time, each run drawing
Gaussian variates from its own Philox stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .engine import StepSchedule, TwoTimeScale, burn_in_length
from .qlearn import make_rng, snapshot_grid, spawn_seeds

LINEAR, CUBIC = 0, 1
SA, ZAP, ZAPZERO = 0, 1, 2
ESTIMATORS = {"sa": SA, "zap": ZAP, "zapzero": ZAPZERO}
BLOCK = 1 << 15


@dataclass(frozen=True)
class LinearGaussianProblem:
    A: np.ndarray
    theta_star: np.ndarray
    noise_cov: np.ndarray
    jac_noise: float = 0.2
    E: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def G(self) -> np.ndarray:
        return -np.linalg.inv(self.A)

    def asymptotic_covariance(self) -> np.ndarray:
        """``G Sigma_Delta G^T``, the optimal covariance."""
        G = self.G
        return G @ self.noise_cov @ G.T

    def sa_covariance(self, g: float = 1.0) -> np.ndarray:
        """Covariance of vanilla SA with ``alpha_n = g / n``; needs ``g A + I/2`` Hurwitz."""
        from scipy.linalg import solve_continuous_lyapunov
        F = g * self.A + 0.5 * np.eye(self.d)
        if np.max(np.linalg.eigvals(F).real) >= 0:
            return np.full((self.d, self.d), np.inf)
        return solve_continuous_lyapunov(F, -g * g * self.noise_cov)

    def mean_flow(self, theta) -> np.ndarray:
        return self.A @ (np.asarray(theta, dtype=float) - self.theta_star)


def linear_gaussian_problem() -> LinearGaussianProblem:
    """Builtin four-dimensional instance with a non-normal Hurwitz ``A*``."""
    A = -2.5 * np.array([[1.2, 0.4, 0.0, 0.1],
                         [-0.3, 0.9, 0.5, 0.0],
                         [0.0, -0.2, 0.7, 0.3],
                         [0.2, 0.0, -0.4, 0.5]])
    S = np.array([[1.0, 0.3, 0.0, 0.1],
                  [0.3, 0.8, 0.2, 0.0],
                  [0.0, 0.2, 0.5, 0.1],
                  [0.1, 0.0, 0.1, 1.5]])
    E = np.array([[0.5, 0.0, 0.2, 0.0],
                  [0.0, 0.4, 0.0, 0.1],
                  [0.1, 0.0, 0.3, 0.0],
                  [0.0, 0.2, 0.0, 0.4]])
    return LinearGaussianProblem(A, np.array([1.0, -2.0, 0.5, 3.0]), S, 0.5, E)


@dataclass(frozen=True)
class CubicProblem:
    noise: float = 1.0
    jac_noise: float = 0.2

    d = 1
    theta_star = np.zeros(1)

    def mean_flow(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        return -t ** 3 - t


@njit(cache=True)
def _step_size(g, rho, shift, n):
    a = g * (n + shift) ** (-rho)
    return a if a < 1.0 else 1.0


@njit(cache=True)
def _solve_small(A, b, out, work):
    """Gaussian elimination with partial pivoting for small dense systems."""
    d = b.shape[0]
    for i in range(d):
        for j in range(d):
            work[i, j] = A[i, j]
        out[i] = b[i]
    for c in range(d):
        p = c
        for r in range(c + 1, d):
            if abs(work[r, c]) > abs(work[p, c]):
                p = r
        if p != c:
            for j in range(d):
                work[c, j], work[p, j] = work[p, j], work[c, j]
            out[c], out[p] = out[p], out[c]
        piv = work[c, c]
        for r in range(c + 1, d):
            m = work[r, c] / piv
            for j in range(c, d):
                work[r, j] -= m * work[c, j]
            out[r] -= m * out[c]
    for c in range(d - 1, -1, -1):
        s = out[c]
        for j in range(c + 1, d):
            s -= work[c, j] * out[j]
        out[c] = s / work[c, c]


@njit(cache=True)
def _sample(problem, A, E, sigw, L, theta_star, theta, normals, k, f, As):
    d = theta.shape[0]
    xi = normals[k, d]
    if problem == LINEAR:
        for i in range(d):
            for j in range(d):
                As[i, j] = A[i, j] + sigw * xi * E[i, j]
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += As[i, j] * (theta[j] - theta_star[j]) + L[i, j] * normals[k, j]
            f[i] = s
    else:
        t = theta[0]
        f[0] = -t * t * t - t + L[0, 0] * normals[k, 0]
        As[0, 0] = -3.0 * t * t - 1.0 + sigw * xi


@njit(cache=True)
def _run_block(problem, est, A, E, sigw, L, theta_star, sched, n_burn, M, normals,
               theta, pr_sum, Ahat, w, z, istate, snap_n, snap_theta, snap_pr):
    d = theta.shape[0]
    f = np.empty(d)
    As = np.empty((d, d))
    Lw = np.empty(d)
    step = np.empty(d)
    work = np.empty((d, d))
    n = istate[0]
    for k in range(normals.shape[0]):
        n1 = n + 1
        _sample(problem, A, E, sigw, L, theta_star, theta, normals, k, f, As)
        if est == SA:
            a = _step_size(sched[0], sched[1], sched[2], n1)
            for i in range(d):
                theta[i] += a * f[i]
        elif est == ZAP:
            if n1 <= n_burn:
                for i in range(d):
                    for j in range(d):
                        Ahat[i, j] += As[i, j] / n_burn
            else:
                a = _step_size(sched[0], sched[1], sched[2], n1)
                b = _step_size(sched[3], sched[4], sched[5], n1)
                for i in range(d):
                    for j in range(d):
                        Ahat[i, j] += b * (As[i, j] - Ahat[i, j])
                _solve_small(Ahat, f, step, work)
                for i in range(d):
                    theta[i] -= a * step[i]
        else:
            a = _step_size(sched[0], sched[1], sched[2], n1)
            b = _step_size(sched[3], sched[4], sched[5], n1)
            # L_{n+1} w = M A^T w
            for i in range(d):
                s = 0.0
                for j in range(d):
                    atw = 0.0
                    for m in range(d):
                        atw += As[m, j] * w[m]
                    s += M[i, j] * atw
                Lw[i] = s
            # residual A_{n+1}(theta + z) - f uses the pre-update theta
            for i in range(d):
                s = 0.0
                for j in range(d):
                    s += As[i, j] * (theta[j] + z[j])
                step[i] = s - f[i]
            for i in range(d):
                theta[i] -= a * (theta[i] + Lw[i])
                w[i] -= b * step[i]
                z[i] -= b * (z[i] - Lw[i])
        n = n1
        for i in range(d):
            pr_sum[i] += theta[i]
        p = istate[1]
        if p < snap_n.shape[0] and snap_n[p] == n:
            for i in range(d):
                snap_theta[p, i] = theta[i]
                snap_pr[p, i] = pr_sum[i] / n
            istate[1] = p + 1
    istate[0] = n


@dataclass
class SyntheticEnsemble:
    """Snapshots of ``N`` runs: ``theta`` and ``theta_pr`` of shape (N, S, d)."""

    snapshot_n: np.ndarray
    theta: np.ndarray
    theta_pr: np.ndarray
    theta_star: np.ndarray

    def errors(self, averaged: bool = False) -> np.ndarray:
        return (self.theta_pr if averaged else self.theta) - self.theta_star

    def scaled_covariance(self, averaged: bool = False, centered: bool = True) -> np.ndarray:
        """``n Cov(theta_n)`` across runs at every snapshot, shape (S, d, d).

        With ``centered=False`` second moments are taken about ``theta*``.
        """
        err = self.errors(averaged)
        if centered:
            err = err - err.mean(axis=0)
            c = np.einsum("rsi,rsj->sij", err, err) / (err.shape[0] - 1)
        else:
            c = np.einsum("rsi,rsj->sij", err, err) / err.shape[0]
        return self.snapshot_n[:, None, None] * c


def _problem_arrays(problem):
    if isinstance(problem, LinearGaussianProblem):
        E = np.zeros_like(problem.A) if problem.E is None else problem.E
        return (LINEAR, problem.A, E, float(problem.jac_noise),
                np.linalg.cholesky(problem.noise_cov), problem.theta_star)
    if isinstance(problem, CubicProblem):
        one = np.zeros((1, 1))
        return (CUBIC, one, one, float(problem.jac_noise),
                np.array([[problem.noise]]), np.zeros(1))
    raise TypeError("unknown problem type")


def run_synthetic(problem, estimator: str, schedules, n_steps: int, n_runs: int, seed,
                  theta0=None, M=None, snapshots=None, burn_in=None) -> SyntheticEnsemble:
    """Independent runs of ``sa``, ``zap`` or ``zapzero`` on a synthetic problem.

    ``schedules`` is a :class:`StepSchedule` for ``sa`` and a
    :class:`TwoTimeScale` for the two-time-scale estimators.  Zap holds
    ``theta`` fixed for ``burn_in`` steps (default ``10 d``) while averaging
    the sample Jacobians into its initial matrix estimate; step sizes are
    indexed by the global step.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    est = ESTIMATORS[estimator]
    kind, A, E, sigw, L, th_star = _problem_arrays(problem)
    d = th_star.shape[0]
    if isinstance(schedules, StepSchedule):
        if est != SA:
            raise ValueError(f"{estimator} needs a TwoTimeScale schedule")
        sched = np.array([schedules.g, schedules.rho, schedules.shift, 1.0, 1.0, 0.0])
    else:
        a, b = schedules.alpha, schedules.beta
        sched = np.array([a.g, a.rho, a.shift, b.g, b.rho, b.shift])
    n_burn = (burn_in_length(d) if burn_in is None else int(burn_in)) if est == ZAP else 0
    M = np.eye(d) if M is None else np.asarray(M, dtype=float)
    snaps = snapshot_grid(n_steps) if snapshots is None else np.asarray(snapshots, dtype=np.int64)
    th0 = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float)
    S = len(snaps)
    out = np.full((n_runs, S, d), np.nan)
    out_pr = np.full((n_runs, S, d), np.nan)
    for r, ss in enumerate(spawn_seeds(seed, n_runs)):
        rng = make_rng(ss)
        theta = th0.copy()
        pr_sum = np.zeros(d)
        Ahat = np.zeros((d, d))
        w, z = np.zeros(d), np.zeros(d)
        istate = np.zeros(2, dtype=np.int64)
        done = 0
        while done < n_steps:
            m = min(BLOCK, n_steps - done)
            normals = rng.standard_normal((m, d + 1))
            _run_block(kind, est, A, E, sigw, L, th_star, sched, n_burn, M, normals,
                       theta, pr_sum, Ahat, w, z, istate, snaps, out[r], out_pr[r])
            done += m
    return SyntheticEnsemble(snaps, out, out_pr, th_star)


def default_zap_schedules() -> TwoTimeScale:
    return TwoTimeScale(StepSchedule(1.0, 1.0), StepSchedule(1.0, 0.85))

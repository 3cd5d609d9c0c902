"""Asymptotic statistics for ensembles and long runs."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .engine import StepSchedule, step_size
from .meanflow import MeanFlowModel, bellman_kernel
from .policy import joint_transition_from_table

PSD_TOL = 1e-12
SLEM_LIMIT = 1.0 - 1e-6


class SlowMixingError(ValueError):
    """The chain mixes too slowly for a truncated autocovariance sum."""


def _check_psd(C: np.ndarray, what: str) -> np.ndarray:
    C = 0.5 * (C + C.T)
    if C.size:
        ev = np.linalg.eigvalsh(C)
        if ev[0] < -PSD_TOL * max(1.0, abs(ev[-1])):
            raise ArithmeticError(f"{what} is not positive semidefinite (min eigenvalue {ev[0]:.3e})")
    return C


# --- scaled covariance ---------------------------------------------------------

@dataclass
class CovarianceEstimate:
    matrix: np.ndarray
    stderr: np.ndarray
    n_runs: int

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))


def scaled_covariance(errors, theta_star=None, scaling="n", n: int | None = None,
                      schedule: StepSchedule | None = None, centered: bool = False) -> CovarianceEstimate:
    """Scaled second moment of estimation errors across independent runs.

    Parameters
    ----------
    errors : ndarray, shape (N, d)
        Final estimates of ``N`` runs, or errors when ``theta_star`` is None.
    theta_star : ndarray, optional
        Subtracted from ``errors`` when given.
    scaling : {"n", "alpha"}
        Multiply by ``n`` or by ``1 / alpha_n`` (requires ``schedule``).
    centered : bool
        Use the sample covariance about the ensemble mean instead of the second
        moment about the root.

    Returns
    -------
    CovarianceEstimate
        Matrix with per-entry jackknife standard errors.
    """
    E = np.asarray(errors, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    if theta_star is not None:
        E = E - np.asarray(theta_star, dtype=float)
    N = E.shape[0]
    if N == 0:
        raise ValueError("empty ensemble")
    if N < 30:
        warnings.warn(f"only {N} runs: covariance estimate unreliable", UserWarning)
    if n is None:
        raise ValueError("iteration index n is required for the scaling")
    if scaling == "n":
        scale = float(n)
    elif scaling == "alpha":
        if schedule is None:
            raise ValueError("scaling by 1/alpha_n needs the schedule")
        scale = 1.0 / step_size(schedule, n)
    else:
        raise ValueError(f"unknown scaling {scaling!r}")

    def moment(X):
        if centered:
            X = X - X.mean(axis=0)
            return X.T @ X / max(X.shape[0] - 1, 1)
        return X.T @ X / X.shape[0]

    C = scale * moment(E)
    if N > 2:
        # leave-one-out moments from the full sums
        S = E.T @ E
        s = E.sum(axis=0)
        loo = np.empty((N,) + C.shape)
        for i in range(N):
            Si = S - np.outer(E[i], E[i])
            if centered:
                si = s - E[i]
                loo[i] = (Si - np.outer(si, si) / (N - 1)) / (N - 2)
            else:
                loo[i] = Si / (N - 1)
        loo *= scale
        se = np.sqrt((N - 1) / N * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    else:
        se = np.full(C.shape, np.inf)
    return CovarianceEstimate(_check_psd(C, "scaled covariance"), se, N)


# --- noise covariance -----------------------------------------------------------

def slem(T: np.ndarray) -> float:
    """Second-largest eigenvalue modulus of a stochastic matrix."""
    ev = np.sort(np.abs(np.linalg.eigvals(T)))[::-1]
    return float(ev[1]) if len(ev) > 1 else 0.0


@dataclass
class NoiseCovariance:
    matrix: np.ndarray
    truncation: int
    last_term_norm: float
    slem: float


def _noise_ingredients(model: MeanFlowModel, theta):
    st = model.chain(theta)
    mdp = model.mdp
    T = joint_transition_from_table(mdp, st.phi)
    pairs = T.pairs
    xs, us = pairs[:, 0], pairs[:, 1]
    Qf = np.where(mdp.mask, st.Q, 0.0)
    g = model.gamma
    if model.variant == "on_policy":
        target = Qf[xs, us]                                   # Q(x', u') indexed by next pair
    else:
        target = Qf[xs, st.greedy[xs]]
    D = (model.cost0[xs, us][:, None] + g * target[None, :] - Qf[xs, us][:, None])
    if model.variant == "relative":
        D = D - model.delta * float(np.sum(model.nu * Qf))
    psi = model.psi[xs, us]                                   # (Z, d)
    pi = st.pi[xs, us]
    return T.matrix, D, psi, pi


def noise_covariance(model: MeanFlowModel, theta, truncation: int | None = None,
                     tol: float = 1e-10, max_terms: int = 100000) -> NoiseCovariance:
    """Exact asymptotic covariance of ``f(theta, Phi_k)`` under the stationary chain.

    Sums the stationary autocovariances ``R(k) + R(k)^T`` over ``1 <= k <= K``
    using the k-step kernels of the state-action chain.  With
    ``truncation=None`` terms are added until the k-th term has norm below
    ``tol``.  At a root of the mean flow this is ``Sigma_Delta*``.

    Raises
    ------
    SlowMixingError
        If the second-largest eigenvalue modulus exceeds ``1 - 1e-6``.
    """
    T, D, psi, pi = _noise_ingredients(model, theta)
    lam = slem(T)
    if lam > SLEM_LIMIT:
        raise SlowMixingError(f"second-largest eigenvalue modulus {lam:.9f} too close to one")
    TD = T * D
    h = psi * TD.sum(axis=1)[:, None]                         # E[Delta | Z = z]
    fbar = pi @ h
    Hc = h - fbar[None, :]
    left = psi.T * pi                                         # Psi^T diag(pi)
    R0 = left @ (psi * (T * D * D).sum(axis=1)[:, None]) - np.outer(fbar, fbar)
    Sigma = R0.copy()
    G = left @ TD                                             # (d, Z)
    V = Hc.copy()
    k, last = 0, float(np.linalg.norm(R0))
    limit = max_terms if truncation is None else truncation
    while k < limit:
        k += 1
        Rk = G @ V
        Sigma += Rk + Rk.T
        last = float(np.linalg.norm(Rk))
        if truncation is None and last < tol:
            break
        V = T @ V
    if truncation is None and last >= tol:
        warnings.warn(f"autocovariance sum not converged after {k} terms", UserWarning)
    return NoiseCovariance(_check_psd(Sigma, "noise covariance"), k, last, lam)


def noise_covariance_fundamental(model: MeanFlowModel, theta) -> np.ndarray:
    """Same quantity through the fundamental matrix ``(I - T + 1 pi)^{-1}``."""
    T, D, psi, pi = _noise_ingredients(model, theta)
    TD = T * D
    h = psi * TD.sum(axis=1)[:, None]
    fbar = pi @ h
    Hc = h - fbar[None, :]
    left = psi.T * pi
    R0 = left @ (psi * (T * D * D).sum(axis=1)[:, None]) - np.outer(fbar, fbar)
    Z = np.linalg.solve(np.eye(len(pi)) - T + np.outer(np.ones(len(pi)), pi), Hc)
    S = left @ TD @ Z
    return 0.5 * ((R0 + S + S.T) + (R0 + S + S.T).T)


# --- batch means ------------------------------------------------------------------

@dataclass
class BatchMeansResult:
    mean: np.ndarray
    mean_ci: np.ndarray            # (2, d) Student-t interval for the mean
    covariance: np.ndarray         # long-run covariance estimate (batch length x cov of batch means)
    variance_ci: np.ndarray        # (2, d) chi-square interval for the diagonal
    n_batches: int
    batch_len: int
    batch_means: np.ndarray


def batch_means(run, n_batches: int = 20, burn_in: float = 0.1, level: float = 0.95) -> BatchMeansResult:
    """Batch-means estimate of the mean and long-run covariance of a stationary stream.

    The first ``burn_in`` fraction of the run is discarded and the rest is
    split into ``n_batches`` contiguous batches of equal length.
    """
    X = np.asarray(run, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if n_batches < 2:
        raise ValueError("need at least two batches")
    if X.shape[0] < 100 * n_batches:
        raise ValueError(f"run of length {X.shape[0]} too short for {n_batches} batches "
                         f"(need at least {100 * n_batches})")
    X = X[int(math.floor(burn_in * X.shape[0])):]
    L = X.shape[0] // n_batches
    bm = X[:L * n_batches].reshape(n_batches, L, -1).mean(axis=1)
    return batch_means_from_batches(bm, L, level)


def batch_means_from_batches(bm, batch_len: int, level: float = 0.95) -> BatchMeansResult:
    """Summarize precomputed batch means of equal length ``batch_len``."""
    bm = np.asarray(bm, dtype=float)
    if bm.ndim == 1:
        bm = bm[:, None]
    B = bm.shape[0]
    mean = bm.mean(axis=0)
    S = np.cov(bm, rowvar=False, ddof=1).reshape(bm.shape[1], bm.shape[1])
    half = sps.t.ppf(0.5 + level / 2, B - 1) * np.sqrt(np.diag(S) / B)
    cov = _check_psd(batch_len * S, "batch-means covariance")
    var = np.diag(cov)
    lo = (B - 1) * var / sps.chi2.ppf(0.5 + level / 2, B - 1)
    hi = (B - 1) * var / sps.chi2.ppf(0.5 - level / 2, B - 1)
    return BatchMeansResult(mean, np.vstack([mean - half, mean + half]), cov,
                            np.vstack([lo, hi]), B, int(batch_len), bm)


# --- histograms, bands, tails -------------------------------------------------------

@dataclass
class HistogramRecord:
    edges: np.ndarray
    counts: np.ndarray
    n: int
    iqr: float
    value_range: float

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(), "n": self.n,
                "iqr": self.iqr, "range": self.value_range}


def histogram(values, bins=None) -> HistogramRecord:
    """Equal-width bins over ``[min, max]`` (``ceil(sqrt(N))`` of them by default)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("no values")
    if bins is None:
        bins = int(math.ceil(math.sqrt(v.size)))
    counts, edges = np.histogram(v, bins=bins)
    q1, q3 = np.percentile(v, [25, 75])
    return HistogramRecord(edges, counts, int(v.size), float(q3 - q1), float(v.max() - v.min()))


@dataclass
class BandRecord:
    n: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def lower(self) -> np.ndarray:
        return self.mean - 2 * self.std

    @property
    def upper(self) -> np.ndarray:
        return self.mean + 2 * self.std

    def to_dict(self) -> dict:
        return {"n": self.n.tolist(), "mean": self.mean.tolist(),
                "lower": self.lower.tolist(), "upper": self.upper.tolist()}


def confidence_band(values, snapshot_n) -> BandRecord:
    """Per-snapshot mean and ``2 sigma`` band across runs; ``values`` has shape (N, S)."""
    V = np.asarray(values, dtype=float)
    if V.ndim != 2 or V.shape[1] != len(snapshot_n):
        raise ValueError("values must have shape (runs, snapshots)")
    std = V.std(axis=0, ddof=1) if V.shape[0] > 1 else np.zeros(V.shape[1])
    return BandRecord(np.asarray(snapshot_n), V.mean(axis=0), std)


def tail_index(values, fraction: float = 0.1, min_points: int = 10) -> float:
    """Slope heuristic for the tail exponent of ``|values|``.

    Fits ``log(rank) ~ -a log(value)`` over the largest ``fraction`` of the
    absolute values; ``a < 2`` suggests infinite variance.
    """
    v = np.sort(np.abs(np.asarray(values, dtype=float).ravel()))[::-1]
    k = max(min_points, int(fraction * v.size))
    if v.size < min_points or v[k - 1] <= 0:
        raise ValueError("not enough positive values for a tail fit")
    top = v[:k]
    slope = np.polyfit(np.log(top), np.log(np.arange(1, k + 1)), 1)[0]
    return float(-slope)


def normality_zscores(samples) -> tuple[np.ndarray, np.ndarray]:
    """Skewness and excess-kurtosis z-scores per coordinate (standard errors ``sqrt(6/N)``, ``sqrt(24/N)``)."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    N = X.shape[0]
    return sps.skew(X, axis=0) / math.sqrt(6.0 / N), sps.kurtosis(X, axis=0) / math.sqrt(24.0 / N)


# --- output ---------------------------------------------------------------------

CSV_COLUMNS = ("seed", "n", "error_norm", "pr_error_norm", "bellman_max", "span_error")


def records_csv(records, theta_star=None) -> str:
    """One row per (seed, snapshot); floats in shortest round-trip form."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        ref = np.zeros(rec.theta.shape[1]) if theta_star is None else theta_star
        err = np.linalg.norm(rec.theta - ref, axis=1)
        pr = np.linalg.norm(rec.theta_pr - ref, axis=1)
        for i, n in enumerate(rec.snapshot_n):
            w.writerow([rec.seed, int(n), repr(float(err[i])), repr(float(pr[i])),
                        repr(float(rec.bellman_max[i])), repr(float(rec.span_error[i]))])
    return buf.getvalue()


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "qsalab"
    return plt


def _svg(fig, plt) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def histogram_svg(h: HistogramRecord, title: str = "", xlabel: str = "") -> str:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.stairs(h.counts, h.edges, fill=True)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    return _svg(fig, plt)


def bands_svg(bands: dict, title: str = "", ylabel: str = "", logy: bool = True) -> str:
    """Curves with shaded ``2 sigma`` bands against ``n`` on a log axis; ``bands`` maps labels to records."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, b in bands.items():
        ax.plot(b.n, b.mean, label=label)
        lo = np.maximum(b.lower, 1e-300) if logy else b.lower
        ax.fill_between(b.n, lo, b.upper, alpha=0.25)
    ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    return _svg(fig, plt)

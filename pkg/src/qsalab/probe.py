"""Operation-count probe for linear solves in an update path.

:class:`LinearSolveCounter` temporarily wraps the dense solvers of
``numpy.linalg`` and ``scipy.linalg`` together with the package's own solve
and inverse helpers, counting calls made while the context is active.

Compiled kernels keep their pure-Python source as ``py_func``; running that
source inside the counter observes exactly the calls the compiled update
makes, since helper kernels are looked up as module globals at call time.
"""

from __future__ import annotations

import contextlib
from collections import Counter

import numpy as np
import scipy.linalg

from . import _kernels, engine, testbeds

NUMPY_SOLVERS = ("solve", "inv", "pinv", "lstsq", "svd", "cholesky", "qr", "eig")
SCIPY_SOLVERS = ("solve", "inv", "pinv", "lstsq", "svd", "lu_factor", "lu_solve", "cho_factor",
                 "cho_solve", "solve_triangular")
PACKAGE_SOLVERS = ((engine, "regularized_inverse"), (_kernels, "refresh_inverse"),
                   (testbeds, "_solve_small"))


class LinearSolveCounter(contextlib.AbstractContextManager):
    """Count dense solve/inverse/factorization calls made inside the context."""

    def __init__(self):
        self.counts = Counter()
        self._saved = []

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def _wrap(self, owner, name, label):
        orig = getattr(owner, name)

        def counted(*a, **kw):
            self.counts[label] += 1
            return orig(*a, **kw)

        self._saved.append((owner, name, orig))
        setattr(owner, name, counted)

    def __enter__(self):
        for n in NUMPY_SOLVERS:
            self._wrap(np.linalg, n, f"numpy.linalg.{n}")
        for n in SCIPY_SOLVERS:
            self._wrap(scipy.linalg, n, f"scipy.linalg.{n}")
        for mod, n in PACKAGE_SOLVERS:
            self._wrap(mod, n, f"{mod.__name__}.{n}")
        return self

    def __exit__(self, *exc):
        for owner, name, orig in reversed(self._saved):
            setattr(owner, name, orig)
        self._saved.clear()
        return False


def count_synthetic_solves(estimator: str, n_steps: int = 200, seed: int = 0) -> Counter:
    """Solver calls made by ``n_steps`` of the synthetic-problem update (interpreted source)."""
    from .testbeds import (ESTIMATORS, _problem_arrays, default_zap_schedules,
                           linear_gaussian_problem)
    prob = linear_gaussian_problem()
    kind, A, E, sigw, L, th_star = _problem_arrays(prob)
    d = th_star.size
    s = default_zap_schedules()
    sched = np.array([s.alpha.g, s.alpha.rho, s.alpha.shift, s.beta.g, s.beta.rho, s.beta.shift])
    normals = np.random.default_rng(seed).standard_normal((n_steps, d + 1))
    est = ESTIMATORS[estimator]
    n_burn = engine.burn_in_length(d) if estimator == "zap" else 0
    with LinearSolveCounter() as c:
        testbeds._run_block.py_func(kind, est, A, E, sigw, L, th_star, sched, n_burn, np.eye(d),
                                    normals, np.zeros(d), np.zeros(d), np.zeros((d, d)),
                                    np.zeros(d), np.zeros(d), np.zeros(2, dtype=np.int64),
                                    np.zeros(0, dtype=np.int64), np.zeros((0, d)), np.zeros((0, d)))
    return c.counts


def count_engine_solves(estimator: str, n_steps: int = 50, d: int = 4, seed: int = 0) -> Counter:
    """Solver calls made by ``n_steps`` of :func:`engine.zap_step` or :func:`engine.zap_zero_step`."""
    rng = np.random.default_rng(seed)
    A = -np.eye(d) + 0.1 * rng.normal(size=(d, d))
    if estimator == "zap":
        state = engine.Zap(np.zeros(d), A.copy())
        step = engine.zap_step
    elif estimator == "zapzero":
        state = engine.ZapZero(np.zeros(d))
        step = engine.zap_zero_step
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    samples = [(rng.normal(size=d), A + 0.1 * rng.normal(size=(d, d))) for _ in range(n_steps)]
    with LinearSolveCounter() as c:
        for k, (f, As) in enumerate(samples, start=1):
            step(state, f, As, 1.0 / (k + 1), (k + 1) ** -0.85)
    return c.counts


def count_qlearning_solves(estimator: str, n_steps: int = 300, seed: int = 0) -> Counter:
    """Solver calls made by ``n_steps`` of tabular Q-learning on the six-state model (interpreted kernel)."""
    from .features import tabular_basis
    from .mdp import six_state_example
    from .policy import PolicySpec
    from .qlearn import EstimatorConfig, LinearQ, run_experiment
    mdp = six_state_example()
    basis = tabular_basis(mdp)
    q0 = LinearQ(basis, np.zeros(basis.shape[0]), mdp.mask)
    est = EstimatorConfig(estimator, "watkins", refresh_every=64)
    sched = engine.TwoTimeScale(engine.StepSchedule(1.0, 1.0), engine.StepSchedule(1.0, 0.85))
    compiled = _kernels.run_block
    _kernels.run_block = compiled.py_func
    try:
        with LinearSolveCounter() as c:
            run_experiment(mdp, PolicySpec("oblivious"), q0, est, sched, n_steps, seed,
                           snapshots=np.array([n_steps]))
    finally:
        _kernels.run_block = compiled
    return c.counts

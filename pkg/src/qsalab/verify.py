"""Invariant suites run by ``qsalab verify`` and by the test-suite.

Every suite draws its instances from one seed and returns a
:class:`SuiteResult` listing the individual checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import fast_system_matrix, fast_system_roots
from .features import random_basis
from .mdp import greedy_actions, random_mdp
from .meanflow import (MeanFlowModel, beta_zero, linearize, mean_flow, negativity_certificate,
                       ode_integrate, r_matrices, solve_pbe, zap_field)
from .policy import (PolicySpec, action_pmf, entropy_gap_bound, epsilon_gamma, joint_transition,
                     minorization_report, softmin, stationary_vector)

SLACK = 1e-10
MIXED_KINDS = ("epsilon_greedy", "gibbs", "tamed_gibbs")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteResult:
    suite: str
    checks: list = field(default_factory=list)
    expected_failure: bool = False
    note: str = ""

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, passed, detail=""):
        self.checks.append(Check(name, bool(passed), detail))

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            out.append(f"{'PASS' if c.passed else 'FAIL'}  {self.suite}:{c.name}  {c.detail}")
        if self.note:
            out.append(f"NOTE  {self.suite}: {self.note}")
        return out


def random_instance(rng: np.random.Generator, kinds=MIXED_KINDS, max_states: int = 6,
                    max_actions: int = 4, d: int | None = None):
    """Random (MDP, mixed policy, basis, theta) with full admissible sets."""
    nX = int(rng.integers(2, max_states + 1))
    nU = int(rng.integers(2, max_actions + 1))
    mdp = random_mdp(nX, nU, rng, discount=float(rng.uniform(0.3, 0.95)))
    kind = kinds[int(rng.integers(len(kinds)))]
    pol = PolicySpec(kind, epsilon=float(rng.uniform(0.05, 0.95)),
                     kappa0=float(np.exp(rng.uniform(np.log(0.5), np.log(50.0)))))
    dd = int(rng.integers(2, 6)) if d is None else d
    basis = random_basis(mdp, dd, rng)
    theta = rng.normal(size=dd) * np.exp(rng.uniform(np.log(0.1), np.log(100.0)))
    return mdp, pol, basis, theta


# --- suites -----------------------------------------------------------------

def minorization_suite(n_instances: int = 50, seed: int = 0) -> SuiteResult:
    """Minorization bounds of the training chain and the product form of the exploration pmf."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("minorization")
    worst = {"ii": np.inf, "iii": np.inf, "iv": np.inf, "prod": 0.0, "inv": 0.0}
    for _ in range(n_instances):
        mdp, pol, basis, theta = random_instance(rng)
        model = MeanFlowModel(mdp, pol, basis)
        st = model.chain(theta)
        rep = minorization_report(mdp, pol, st.Q, float(np.linalg.norm(theta)))
        worst["ii"] = min(worst["ii"], rep.ratio_min - rep.delta_ii)
        worst["iii"] = min(worst["iii"], rep.slack_iii)
        worst["prod"] = max(worst["prod"], rep.product_form_error)
        R = r_matrices(model, theta)
        gap = R.R_EXP_theta - rep.delta_ii * R.R_EXP
        worst["iv"] = min(worst["iv"], float(np.linalg.eigvalsh(0.5 * (gap + gap.T))[0]))
        T = joint_transition(mdp, pol, st.Q, float(np.linalg.norm(theta))).matrix
        p = stationary_vector(T)
        worst["inv"] = max(worst["inv"], float(np.abs(p @ T - p).sum()))
    res.add("ratio_floor", worst["ii"] >= -SLACK, f"min(pi_theta/pi_exp - delta_ii) = {worst['ii']:.3e}")
    res.add("one_step_floor", worst["iii"] >= -SLACK, f"min slack = {worst['iii']:.3e}")
    res.add("R_exp_order", worst["iv"] >= -SLACK, f"min eigenvalue = {worst['iv']:.3e}")
    res.add("product_form", worst["prod"] <= SLACK, f"max error = {worst['prod']:.3e}")
    res.add("invariance_residual", worst["inv"] <= SLACK, f"max |pi T - pi|_1 = {worst['inv']:.3e}")
    return res


def scale_invariance_suite(n_instances: int = 50, seed: int = 1) -> SuiteResult:
    """Tamed Gibbs action probabilities are unchanged by ``theta -> r theta`` for ``r >= 1``, ``|theta| >= 1``."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("scale-invariance")
    worst = 0.0
    for _ in range(n_instances):
        mdp, pol, basis, theta = random_instance(rng, kinds=("tamed_gibbs",))
        theta = theta / np.linalg.norm(theta) * (1.0 + rng.exponential(5.0))
        model = MeanFlowModel(mdp, pol, basis)
        for r in (1.0, 1.5, 10.0, 1e3):
            Q1 = model.chain(theta).Q
            Qr = model.chain(r * theta).Q
            for x in range(mdp.n_states):
                p1 = action_pmf(pol, Q1, x, mdp.mask, float(np.linalg.norm(theta)))
                pr = action_pmf(pol, Qr, x, mdp.mask, float(np.linalg.norm(r * theta)))
                worst = max(worst, float(np.max(np.abs(p1 - pr))))
    res.add("tamed_gibbs_scale", worst <= SLACK, f"max |p(theta) - p(r theta)| = {worst:.3e}")
    return res


def softmin_suite(n_instances: int = 50, seed: int = 2) -> SuiteResult:
    """Gibbs-averaged values lie between the minimum and the minimum plus ``log|U| / kappa``."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("softmin")
    lo_gap, hi_gap = np.inf, np.inf
    for _ in range(n_instances):
        nX, nU = int(rng.integers(1, 8)), int(rng.integers(1, 6))
        Q = rng.normal(size=(nX, nU)) * np.exp(rng.uniform(-3, 3))
        mask = rng.random((nX, nU)) < 0.8
        mask[np.arange(nX), rng.integers(nU, size=nX)] = True
        kappa = float(np.exp(rng.uniform(np.log(1e-2), np.log(1e3))))
        s = softmin(Q, kappa, mask)
        m = np.min(np.where(mask, Q, np.inf), axis=1)
        lo_gap = min(lo_gap, float(np.min(s - m)))
        hi_gap = min(hi_gap, float(np.min(m + entropy_gap_bound(mask, kappa) - s)))
    res.add("lower", lo_gap >= -SLACK, f"min(softmin - min) = {lo_gap:.3e}")
    res.add("upper", hi_gap >= -SLACK, f"min(min + log|U|/kappa - softmin) = {hi_gap:.3e}")
    return res


def zapzero_spectrum_suite(n_instances: int = 20, seed: int = 3, d: int = 4) -> SuiteResult:
    """Fast-subsystem eigenvalues solve ``l^2 + l + mu = 0`` and lie in the open left half plane."""
    rng = np.random.default_rng(seed)
    res = SuiteResult("zapzero-spectrum")
    I = np.eye(d)
    roots = fast_system_roots(I, I)
    res.add("identity", np.allclose(roots.real, -0.5, atol=1e-12),
            f"real parts {np.unique(np.round(roots.real, 12))}")
    worst_re, worst_match = -np.inf, 0.0
    for _ in range(n_instances):
        A = rng.normal(size=(d, d))
        ev = np.linalg.eigvals(fast_system_matrix(A, I))
        r = fast_system_roots(A, I)
        worst_re = max(worst_re, float(np.max(r.real)))
        # every matrix eigenvalue is a root of the quadratic for some mu
        mu = np.linalg.eigvalsh(A @ A.T)
        resid = np.min(np.abs(ev[:, None] ** 2 + ev[:, None] + mu[None, :]), axis=1)
        worst_match = max(worst_match, float(np.max(resid)))
        worst_re = max(worst_re, float(np.max(ev.real)))
    res.add("left_half_plane", worst_re < 0, f"max real part = {worst_re:.3e}")
    res.add("quadratic_match", worst_match <= 1e-8, f"max residual = {worst_match:.3e}")
    return res


def negativity_suite(n_instances: int = 20, seed: int = 4, epsilon_factor: float = 0.8,
                     kappa0: float = 1e3, gammas=(0.5, 0.8), n_samples: int = 1000,
                     d: int = 4) -> SuiteResult:
    """Sampled negativity certificate for tamed Gibbs with ``eps = epsilon_factor * eps_gamma``.

    With ``epsilon_factor > 1`` the analytic coefficient ``beta0`` is
    nonpositive and the suite reports the expected failure instead.
    """
    rng = np.random.default_rng(seed)
    res = SuiteResult("negativity")
    for g in gammas:
        eps = epsilon_factor * epsilon_gamma(g)
        b0 = beta_zero(min(eps, 1.0), g)
        if b0 <= 0:
            res.expected_failure = True
            res.note = (f"expected failure: epsilon = {eps:.4g} exceeds the threshold "
                        f"{epsilon_gamma(g):.4g} at gamma = {g}; analytic coefficient "
                        f"(1-gamma) - eps gamma eta* = {b0:.4g} is nonpositive")
            res.add(f"gamma={g}_beta0_nonpositive", True, f"beta0 = {b0:.4g}")
            continue
        worst = -np.inf
        n_hold = 0
        for _ in range(n_instances):
            mdp = random_mdp(int(rng.integers(3, 9)), int(rng.integers(2, 5)), rng, g)
            basis = random_basis(mdp, d, rng)
            pol = PolicySpec("tamed_gibbs", epsilon=eps, kappa0=kappa0)
            cert = negativity_certificate(MeanFlowModel(mdp, pol, basis), n_samples, rng)
            n_hold += cert.holds
            worst = max(worst, float(np.max(cert.ratios)))
        res.add(f"gamma={g}", n_hold == n_instances,
                f"{n_hold}/{n_instances} instances certified; max ratio {worst:.3e}; beta0 = {b0:.4g}")
    return res


def bridge_suite(n_instances: int = 5, seed: int = 5, n_steps: int = 10 ** 6,
                 n_batches: int = 50) -> SuiteResult:
    """Frozen-theta time averages agree with the exact mean flow within ``4 sigma``."""
    from .qlearn import frozen_stream
    rng = np.random.default_rng(seed)
    res = SuiteResult("bridge")
    variants = ("watkins", "on_policy", "relative")
    for i in range(n_instances):
        mdp, pol, basis, theta = random_instance(rng, kinds=("oblivious",) + MIXED_KINDS, d=4)
        theta = theta / max(1.0, np.linalg.norm(theta))
        variant = variants[i % 3]
        model = MeanFlowModel(mdp, pol, basis, variant=variant)
        exact = mean_flow(model, theta)
        bm = frozen_stream(mdp, pol, basis, theta, n_steps, n_batches, seed + i, variant=variant)
        se = bm.std(axis=0, ddof=1) / math.sqrt(n_batches)
        z = float(np.max(np.abs(bm.mean(axis=0) - exact) / se))
        res.add(f"instance{i}_{pol.kind}_{variant}", z <= 4.0, f"max |z| = {z:.2f}")
    return res


def region_radius(model: MeanFlowModel, theta) -> float:
    """Distance from ``theta`` to the nearest greedy switching hyperplane.

    Each region where the greedy action is constant is an intersection of
    half-spaces ``Q(x, u) > Q(x, g(x))`` (ties broken by index), hence convex.
    """
    mask = model.mdp.mask
    Q = np.einsum("d,dxu->xu", theta, model.basis)
    g = greedy_actions(np.where(mask, Q, np.inf), mask)
    r = np.inf
    for x in range(model.mdp.n_states):
        for u in np.flatnonzero(mask[x]):
            if u == g[x]:
                continue
            diff = model.basis[:, x, u] - model.basis[:, x, g[x]]
            nd = np.linalg.norm(diff)
            if nd > 0:
                r = min(r, (Q[x, u] - Q[x, g[x]]) / nd)
    return float(r)


def zap_flow_suite(n_starts: int = 5, seed: int = 6, d: int = 3, horizon: float = 8.0,
                   step: float = 0.01, max_tries: int = 200) -> SuiteResult:
    """Epsilon-greedy Zap flow: exponential approach ``theta_t - theta* = (theta_0 - theta*) e^{-t}``.

    Draws small random instances until the PBE root lies strictly inside a
    greedy region, then integrates the Zap field from starts inside that region.
    """
    rng = np.random.default_rng(seed)
    res = SuiteResult("zap-flow")
    for _ in range(max_tries):
        mdp = random_mdp(int(rng.integers(3, 6)), int(rng.integers(2, 4)), rng,
                         discount=float(rng.uniform(0.5, 0.9)))
        basis = random_basis(mdp, d, rng)
        model = MeanFlowModel(mdp, PolicySpec("epsilon_greedy", epsilon=0.3), basis)
        pbe = solve_pbe(model)
        if not pbe.converged:
            continue
        radius = region_radius(model, pbe.theta)
        if radius < 1e-3:
            continue
        lin = linearize(model, pbe.theta, fd_step=0.1 * radius)
        if lin.near_switch:
            continue
        break
    else:
        res.add("instance", False, f"no interior root found in {max_tries} draws")
        return res
    theta_star = pbe.theta
    res.add("pbe_residual", pbe.residual <= 1e-8, f"|f(theta*)| = {pbe.residual:.3e}")
    res.add("hurwitz", lin.hurwitz, f"max real part = {lin.margin:.4g}")
    fld = zap_field(model)
    worst = 0.0
    for _ in range(n_starts):
        v = rng.normal(size=d)
        th0 = theta_star + 0.5 * radius * v / np.linalg.norm(v)
        traj = ode_integrate(fld, th0, horizon, step, record_every=10)
        exact = theta_star + np.exp(-traj.t)[:, None] * (th0 - theta_star)
        worst = max(worst, float(np.max(np.abs(traj.theta - exact))))
    res.add("exponential_approach", worst <= 1e-6, f"max deviation = {worst:.3e} over {n_starts} starts")
    return res


SUITES = {
    "minorization": minorization_suite,
    "scale-invariance": scale_invariance_suite,
    "softmin": softmin_suite,
    "zapzero-spectrum": zapzero_spectrum_suite,
    "negativity": negativity_suite,
    "bridge": bridge_suite,
    "zap-flow": zap_flow_suite,
}


def run_suite(name: str, **kwargs) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name](**kwargs)

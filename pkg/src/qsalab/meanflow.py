"""Exact, model-based mean flows of Q-learning and the analysis built on them.

Every quantity here is a finite sum against the invariant pmf ``pi_theta`` of
the state-action chain driven by the training policy at ``theta``.  Three
observation streams are supported:

``"watkins"``
    ``D = c + gamma min_u' Q(x', u') - Q(x, u)``.
``"on_policy"``
    ``D = c + gamma Q(x', u') - Q(x, u)`` with ``u'`` the next training action.
``"relative"``
    Watkins with the extra term ``- delta <nu, Q>``.

With ``matrix_gain=True`` the field is premultiplied by ``R0(theta)^{-1}``,
the ODE seen by a recursion whose gain is the inverse visit frequency.  For the
tabular basis ``R0 = diag(pi)``, so ``A = -(I - gamma T)``.
"""

from __future__ import annotations

import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .features import pair_major, q_values
from .mdp import ControlledMDP, greedy_actions
from .policy import (PolicySpec, component_pmf, epsilon_gamma, exploration_chain,
                     exploration_pmf, joint_transition_from_table, policy_table,
                     stationary_vector)

VARIANTS = ("watkins", "on_policy", "relative")
DIVERGENCE_NORM = 1e12


class _ThetaCache:
    def __init__(self, size=64):
        self.size = size
        self.data = OrderedDict()

    def get(self, key):
        v = self.data.get(key)
        if v is not None:
            self.data.move_to_end(key)
        return v

    def put(self, key, value):
        self.data[key] = value
        if len(self.data) > self.size:
            self.data.popitem(last=False)


@dataclass
class ChainState:
    """Everything the flow needs at one ``theta``."""

    theta: np.ndarray
    Q: np.ndarray            # (X, U), +inf off the mask
    greedy: np.ndarray       # (X,)
    phi: np.ndarray          # (X, U) training policy
    pi: np.ndarray           # (X, U) invariant pmf
    mu: np.ndarray           # (X,)


@dataclass(eq=False)
class MeanFlowModel:
    """Mean-flow model for one (MDP, training policy, basis, stream) combination.

    Parameters
    ----------
    mdp : ControlledMDP
    policy : PolicySpec
    basis : ndarray, shape (d, n_states, n_actions)
    variant : {"watkins", "on_policy", "relative"}
    delta : float
        Weight of the normalization term of the relative stream.
    nu : ndarray, shape (n_states, n_actions), optional
        Pmf on pairs used by the relative stream; uniform over admissible pairs by default.
    matrix_gain : bool
        Premultiply by ``R0(theta)^{-1}``.
    """

    mdp: ControlledMDP
    policy: PolicySpec
    basis: np.ndarray
    variant: str = "watkins"
    delta: float = 1.0
    nu: np.ndarray | None = None
    matrix_gain: bool = False
    _cache: _ThetaCache = field(default_factory=_ThetaCache, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.basis = np.asarray(self.basis, dtype=float)
        if self.basis.ndim != 3 or self.basis.shape[1:] != self.mdp.cost.shape:
            raise ValueError(f"basis must have shape (d, {self.mdp.n_states}, {self.mdp.n_actions})")
        self.basis = np.where(self.mdp.mask[None], self.basis, 0.0)
        if not np.all(np.isfinite(self.basis)):
            raise ValueError("basis has non-finite entries")
        if self.nu is None:
            self.nu = self.mdp.mask / self.mdp.mask.sum()
        self.nu = np.asarray(self.nu, dtype=float)
        if self.variant == "relative" and not self.delta > 0:
            raise ValueError("delta must be positive")
        self.psi = pair_major(self.basis)                          # (X, U, d)
        self.Pz = np.moveaxis(self.mdp.transitions, 0, 1)           # (X, U, X')
        self.cost0 = np.where(self.mdp.mask, self.mdp.cost, 0.0)

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def gamma(self) -> float:
        return self.mdp.discount

    # -- chain -----------------------------------------------------------
    def chain(self, theta) -> ChainState:
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        st = self._cache.get(key)
        if st is not None:
            return st
        if theta.shape != (self.d,):
            raise ValueError(f"theta must have shape ({self.d},)")
        mask = self.mdp.mask
        Q = q_values(self.basis, theta, mask)
        phi = policy_table(self.policy, Q, mask, float(np.linalg.norm(theta)))
        T = joint_transition_from_table(self.mdp, phi)
        pi = T.to_table(stationary_vector(T.matrix))
        st = ChainState(theta.copy(), Q, greedy_actions(Q, mask), phi, pi, pi.sum(axis=1))
        self._cache.put(key, st)
        return st

    # -- helpers ---------------------------------------------------------
    def state_features(self, table: np.ndarray) -> np.ndarray:
        """``sum_u table(u|x) psi(x, u)`` for every state, shape (X, d)."""
        return np.einsum("xu,xud->xd", table, self.psi)

    def greedy_features(self, st: ChainState) -> np.ndarray:
        return self.psi[np.arange(self.mdp.n_states), st.greedy]

    def cross(self, st: ChainState, h_next: np.ndarray) -> np.ndarray:
        """``E_pi[psi_n h(X_{n+1})^T]`` for a state-level feature map ``h`` (X, d)."""
        nxt = np.einsum("xuy,yd->xud", self.Pz, h_next)
        return np.einsum("xu,xud,xue->de", st.pi, self.psi, nxt)

    def second_moment(self, weights: np.ndarray) -> np.ndarray:
        """``sum_{x,u} weights(x,u) psi psi^T``."""
        return np.einsum("xu,xud,xue->de", weights, self.psi, self.psi)

    def target_features(self, st: ChainState) -> np.ndarray:
        if self.variant == "on_policy":
            return self.state_features(st.phi)
        return self.greedy_features(st)


# --- flows -------------------------------------------------------------------

def bellman_kernel(model: MeanFlowModel, theta) -> np.ndarray:
    """Per-pair expected temporal difference ``B(x, u; theta)`` of the chosen stream."""
    st = model.chain(theta)
    m, g = model.mdp.mask, model.gamma
    Qf = np.where(m, st.Q, 0.0)
    if model.variant == "on_policy":
        V = np.sum(st.phi * Qf, axis=1)
    else:
        V = Qf[np.arange(model.mdp.n_states), st.greedy]
    B = model.cost0 + g * np.einsum("xuy,y->xu", model.Pz, V) - Qf
    if model.variant == "relative":
        B = B - model.delta * float(np.sum(model.nu * Qf))
    return np.where(m, B, 0.0)


def _raw_flow(model, theta):
    st = model.chain(theta)
    return np.einsum("xu,xud,xu->d", st.pi, model.psi, bellman_kernel(model, theta))


def _raw_matrices(model, theta):
    st = model.chain(theta)
    R0 = model.second_moment(st.pi)
    A = -R0 + model.gamma * model.cross(st, model.target_features(st))
    if model.variant == "relative":
        mean_psi = np.einsum("xu,xud->d", st.pi, model.psi)
        nu_psi = np.einsum("xu,xud->d", model.nu, model.psi)
        A = A - model.delta * np.outer(mean_psi, nu_psi)
    b = -np.einsum("xu,xud,xu->d", st.pi, model.psi, model.cost0)
    return A, b, R0


def mean_flow(model: MeanFlowModel, theta) -> np.ndarray:
    """``f(theta) = E_pi[psi_n B(X_n, U_n; theta)]`` (premultiplied by ``R0^{-1}`` with matrix gain)."""
    f = _raw_flow(model, theta)
    if model.matrix_gain:
        _, _, R0 = _raw_matrices(model, theta)
        f = np.linalg.solve(R0, f)
    return f


def flow_matrices(model: MeanFlowModel, theta) -> tuple[np.ndarray, np.ndarray]:
    """``A(theta)`` and ``b(theta)`` with ``f(theta) = A(theta) theta - b(theta)``.

    ``A`` is the frozen-policy matrix: the invariant pmf and the greedy (or
    training) action at the next state are held at their values at ``theta``.
    """
    A, b, R0 = _raw_matrices(model, theta)
    if model.matrix_gain:
        A = np.linalg.solve(R0, A)
        b = np.linalg.solve(R0, b)
    return A, b


@dataclass
class RMatrixFamily:
    """Autocorrelation matrices at one ``theta``.

    ``R_Theta`` uses the greedy action, ``R_U`` the theta-dependent component of
    the training policy (equal to ``R_Theta`` for epsilon-greedy), ``R_EXP_theta``
    exploration actions under ``mu_theta`` and ``R_EXP`` the pure exploration chain.
    ``M_Theta = E[psi_n psi^Theta_{n+1}^T]``.
    """

    R0: np.ndarray
    R_minus1: np.ndarray
    R_Theta: np.ndarray
    R_U: np.ndarray
    R_EXP_theta: np.ndarray
    R_EXP: np.ndarray
    D: np.ndarray
    E: np.ndarray
    M_Theta: np.ndarray
    psd_min_eig: dict

    def mixture_gap(self, epsilon: float) -> float:
        """``max |R0 - (1-eps) R_U - eps R_EXP_theta|``."""
        return float(np.max(np.abs(self.R0 - (1 - epsilon) * self.R_U - epsilon * self.R_EXP_theta)))

    def decomposition_gap(self, epsilon: float) -> float:
        """``max |M_Theta - R_{-1} - eps D - (1-eps) E|``."""
        return float(np.max(np.abs(self.M_Theta - self.R_minus1 - epsilon * self.D
                                   - (1 - epsilon) * self.E)))


def r_matrices(model: MeanFlowModel, theta) -> RMatrixFamily:
    st = model.chain(theta)
    pol, mask = model.policy, model.mdp.mask
    nu = exploration_pmf(pol, mask)
    if pol.kind == "oblivious":
        comp = st.phi
    else:
        comp = component_pmf(pol, st.Q, mask, float(np.linalg.norm(st.theta)))
    greedy_tab = np.zeros(mask.shape)
    greedy_tab[np.arange(mask.shape[0]), st.greedy] = 1.0

    R0 = model.second_moment(st.pi)
    R_Theta = model.second_moment(st.mu[:, None] * greedy_tab)
    R_U = model.second_moment(st.mu[:, None] * comp)
    R_EXP_theta = model.second_moment(st.mu[:, None] * nu)
    p_exp = stationary_vector(exploration_chain(model.mdp, pol).matrix)
    pi_exp = np.zeros(mask.shape)
    pi_exp[mask] = p_exp
    R_EXP = model.second_moment(pi_exp)

    h_next = model.state_features(st.phi)
    h_theta = model.greedy_features(st)
    h_exp = model.state_features(nu)
    h_comp = model.state_features(comp)
    R_minus1 = model.cross(st, h_next)
    M_Theta = model.cross(st, h_theta)
    D = M_Theta - model.cross(st, h_exp)
    E = M_Theta - model.cross(st, h_comp)
    eig = {k: float(np.linalg.eigvalsh(v).min()) for k, v in
           (("R0", R0), ("R_Theta", R_Theta), ("R_U", R_U),
            ("R_EXP_theta", R_EXP_theta), ("R_EXP", R_EXP))}
    return RMatrixFamily(R0, R_minus1, R_Theta, R_U, R_EXP_theta, R_EXP, D, E, M_Theta, eig)


# --- negativity certificate ------------------------------------------------

@dataclass
class NegativityCertificate:
    """Sampled check that ``A(theta)`` is uniformly negative.

    For epsilon-greedy the sampled quantity is ``v^T A(theta) v / |v|^2`` over
    independent random ``(theta, v)``; for the Gibbs policies it is
    ``theta^T A(theta) theta / |theta|^2`` over ``|theta| >= 1``.

    ``bounds`` holds the matching upper bound for each sample, assembled from
    ``beta0 * lambda_min(R0(theta))``, the entropy term of the Gibbs policies
    and, for Gibbs, the gap between greedy and Gibbs second moments.
    ``analytic_bound`` is the sample-free bound using the extreme eigenvalues
    over all samples.
    """

    ratios: np.ndarray
    bounds: np.ndarray
    beta0: float
    eta_star: float
    lambda_min: float
    lambda_max: float
    analytic_bound: float
    epsilon_threshold: float
    expected_failure: bool
    slack: float = 1e-9

    @property
    def worst_ratio(self) -> float:
        return float(self.ratios.max())

    @property
    def holds(self) -> bool:
        return bool(np.all(self.ratios <= self.bounds + self.slack) and self.worst_ratio < 0)


def _eta_star(eps):
    if eps <= 0 or eps >= 1:
        return math.inf
    return math.sqrt(1.0 / eps + 1.0 / (1.0 - eps))


def beta_zero(epsilon: float, gamma: float) -> float:
    """``(1 - gamma) - eps gamma eta*``; zero exploration gives ``1 - gamma``."""
    if epsilon == 0:
        return 1.0 - gamma
    return (1.0 - gamma) - epsilon * gamma * _eta_star(epsilon)


def _unit(rng, d, n):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def negativity_certificate(model: MeanFlowModel, n_samples: int = 1000,
                           rng: np.random.Generator | None = None,
                           radius: tuple = (1.0, 100.0)) -> NegativityCertificate:
    """Sample ``theta`` (and ``v``) and compare the quadratic form of ``A`` with its bound."""
    rng = np.random.default_rng() if rng is None else rng
    pol, gamma = model.policy, model.gamma
    eps = 0.0 if pol.kind == "oblivious" else pol.epsilon
    on_policy = model.variant == "on_policy" or pol.kind == "oblivious"
    b0 = (1.0 - gamma) if on_policy else beta_zero(eps, gamma)
    eta = 0.0 if on_policy else _eta_star(eps)
    log_u = math.log(int(model.mdp.mask.sum(axis=1).max()))
    gibbs = pol.kind in ("gibbs", "tamed_gibbs") and not on_policy

    d = model.d
    lo, hi = np.log(radius[0]), np.log(radius[1])
    dirs = _unit(rng, d, n_samples)
    norms = np.exp(rng.uniform(lo, hi, n_samples))
    vs = _unit(rng, d, n_samples)
    ratios = np.empty(n_samples)
    bounds = np.empty(n_samples)
    lmin, lmax = np.inf, 0.0
    for i in range(n_samples):
        theta = dirs[i] * norms[i]
        A, _, R0 = _raw_matrices(model, theta)
        ev = np.linalg.eigvalsh(R0)
        lmin, lmax = min(lmin, ev[0]), max(lmax, ev[-1])
        v = dirs[i] if gibbs else vs[i]
        ratios[i] = v @ A @ v
        bound = -b0 * ev[0]
        if gibbs:
            kappa_inv = (norms[i] / pol.kappa0 if pol.kind == "tamed_gibbs" else 1.0 / pol.kappa0)
            # |theta^T E theta| <= |theta|^2 log|U| sqrt(lambda_max(R0)) / kappa_theta
            bound += gamma * (1 - eps) * log_u * math.sqrt(ev[-1]) * kappa_inv * norms[i]
            # The mixture of greedy and exploration second moments differs from R0.
            R = r_matrices(model, theta)
            gap = (1 - eps) * (v @ (R.R_Theta - R.R_U) @ v)
            bound += 0.5 * eps * gamma * eta * max(gap, 0.0)
        bounds[i] = bound
    thr = epsilon_gamma(gamma)
    analytic = -b0 * lmin
    if gibbs:
        analytic += gamma * (1 - eps) * log_u * math.sqrt(lmax) / pol.kappa0
    return NegativityCertificate(ratios, bounds, b0, eta, float(lmin), float(lmax), float(analytic),
                                 thr, expected_failure=(not on_policy and eps >= thr))


# --- ODE tools ---------------------------------------------------------------

@dataclass
class Trajectory:
    t: np.ndarray
    theta: np.ndarray
    diverged: bool = False
    message: str = ""

    @property
    def final(self) -> np.ndarray:
        return self.theta[-1]


def ode_integrate(field: Callable, theta0, horizon: float, step: float,
                  record_every: int = 1) -> Trajectory:
    """Classical fixed-step RK4 for ``d theta/dt = field(theta)``.

    Integration stops early, with ``diverged=True``, once ``|theta| > 1e12``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    n = int(math.ceil(horizon / step - 1e-12))
    h = horizon / n if n > 0 else 0.0
    x = np.array(theta0, dtype=float)
    ts, xs = [0.0], [x.copy()]
    for k in range(n):
        k1 = field(x)
        k2 = field(x + 0.5 * h * k1)
        k3 = field(x + 0.5 * h * k2)
        k4 = field(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            ts.append((k + 1) * h)
            xs.append(x.copy())
            return Trajectory(np.array(ts), np.array(xs), True,
                              f"|theta| exceeded {DIVERGENCE_NORM:g} at t={(k + 1) * h:g}")
        if (k + 1) % record_every == 0 or k == n - 1:
            ts.append((k + 1) * h)
            xs.append(x.copy())
    return Trajectory(np.array(ts), np.array(xs))


def newton_raphson_field(model: MeanFlowModel) -> Callable:
    """``-J(theta)^{-1} f(theta)`` with a finite-difference Jacobian."""
    def fld(theta):
        J = fd_jacobian(lambda t: mean_flow(model, t), theta)
        return -np.linalg.solve(J, mean_flow(model, theta))
    return fld


def zap_field(model: MeanFlowModel) -> Callable:
    """``-theta + A(theta)^{-1} b(theta)`` using the frozen-policy matrices."""
    def fld(theta):
        A, b = flow_matrices(model, theta)
        return -np.asarray(theta, dtype=float) + np.linalg.solve(A, b)
    return fld


def ode_at_infinity(model: MeanFlowModel, theta, r: float = 1e6) -> np.ndarray:
    """Radial limit ``lim r^{-1} f(r theta)``.

    Every policy except plain Gibbs is invariant under scaling by ``r >= 1``
    once ``|theta| >= 1``, so the limit is ``A(theta/|theta|) theta``.  Plain
    Gibbs falls back to the finite-``r`` quotient.
    """
    theta = np.asarray(theta, dtype=float)
    nrm = np.linalg.norm(theta)
    if nrm == 0:
        return np.zeros_like(theta)
    if model.policy.kind == "gibbs":
        return mean_flow(model, r * theta) / r
    A, _ = flow_matrices(model, theta / nrm)
    return A @ theta


def fd_jacobian(fun: Callable, theta, step: float | None = None) -> np.ndarray:
    """Central-difference Jacobian with step ``1e-5 (1 + |theta|)`` by default."""
    theta = np.asarray(theta, dtype=float)
    h = 1e-5 * (1.0 + np.linalg.norm(theta)) if step is None else step
    cols = []
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        cols.append((fun(theta + e) - fun(theta - e)) / (2 * h))
    return np.column_stack(cols)


@dataclass
class LinearizationReport:
    A_star: np.ndarray
    eigenvalues: np.ndarray
    hurwitz: bool
    margin: float
    near_switch: bool = False


def _greedy_signature(model, theta):
    return greedy_actions(q_values(model.basis, theta, model.mdp.mask), model.mdp.mask)


def linearize(model: MeanFlowModel, theta, fd_step: float | None = None) -> LinearizationReport:
    """Finite-difference Jacobian of the mean flow, its spectrum and Hurwitz margin.

    For flows with a greedy target the Jacobian is only defined away from
    switching surfaces; if any perturbed point changes the greedy policy a
    warning is issued and ``near_switch`` is set.
    """
    theta = np.asarray(theta, dtype=float)
    h = 1e-5 * (1.0 + np.linalg.norm(theta)) if fd_step is None else fd_step
    near = False
    if model.policy.kind in ("epsilon_greedy", "oblivious") or model.variant != "on_policy":
        g0 = _greedy_signature(model, theta)
        for i in range(theta.size):
            for s in (-h, h):
                t = theta.copy()
                t[i] += s
                if np.any(_greedy_signature(model, t) != g0):
                    near = True
        if near:
            warnings.warn("theta lies within fd_step of a greedy switching surface", RuntimeWarning)
    J = fd_jacobian(lambda t: mean_flow(model, t), theta, h)
    ev = np.linalg.eigvals(J)
    margin = float(np.max(ev.real))
    return LinearizationReport(J, ev, margin < 0, margin, near)


# --- projected Bellman equation ---------------------------------------------

@dataclass
class PBEResult:
    theta: np.ndarray
    residual: float
    converged: bool
    iterations: int
    trace: list = field(default_factory=list)

    def __iter__(self):
        # Allows ``theta, residual = solve_pbe(...)``.
        return iter((self.theta, self.residual))


def _jacobian(model, theta):
    if model.policy.kind in ("oblivious", "epsilon_greedy"):
        # Piecewise linear field: the frozen-policy matrix is the exact Jacobian.
        A, _, _ = _raw_matrices(model, theta)
        return A
    return fd_jacobian(lambda t: _raw_flow(model, t), theta)


def solve_pbe(model: MeanFlowModel, theta0=None, tol: float = 1e-10,
              max_iter: int = 100, max_halvings: int = 30, ode_fallback: bool = True,
              ode_horizon: float = 1e4, ode_switch: float = 1e-7) -> PBEResult:
    """Damped Newton iteration for ``f(theta) = 0``.

    Steps use the Moore-Penrose inverse of the Jacobian with singular values
    below ``1e-8 sigma_max`` dropped and are halved until ``|f|`` decreases.
    The root is the same with or without matrix gain; the raw field is used.

    Newton can stall at a near-root where ``|f|`` has a positive local
    minimum.  With ``ode_fallback`` the mean flow is then integrated from the
    best point found until ``|f| <= ode_switch`` or the horizon is exhausted,
    and Newton is restarted from there.  LSODA is used because the flow
    becomes stiff for large ``kappa0``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    theta = np.zeros(model.d) if theta0 is None else np.array(theta0, dtype=float)
    res = _newton(model, theta, tol, max_iter, max_halvings)
    if res.converged or not ode_fallback:
        return res

    def rhs(t, th):
        return _raw_flow(model, th)

    def close(t, th):
        return float(np.linalg.norm(_raw_flow(model, th))) - ode_switch
    close.terminal = True

    sol = solve_ivp(rhs, (0.0, ode_horizon), res.theta, method="LSODA", events=close,
                    rtol=1e-8, atol=1e-10)
    warm = sol.y[:, -1]
    res2 = _newton(model, warm, tol, max_iter, max_halvings)
    trace = res.trace + [("ode", float(sol.t[-1]))] + res2.trace
    best = res2 if res2.residual <= res.residual else res
    return PBEResult(best.theta, best.residual, best.converged,
                     res.iterations + res2.iterations, trace)


def _newton(model, theta, tol, max_iter, max_halvings) -> PBEResult:
    f = _raw_flow(model, theta)
    res = float(np.linalg.norm(f))
    trace = [(0, res)]
    for it in range(1, max_iter + 1):
        if res <= tol:
            return PBEResult(theta, res, True, it - 1, trace)
        J = _jacobian(model, theta)
        step = -np.linalg.pinv(J, rcond=1e-8) @ f
        lam = 1.0
        for _ in range(max_halvings + 1):
            cand = theta + lam * step
            fc = _raw_flow(model, cand)
            rc = float(np.linalg.norm(fc))
            if rc < res:
                break
            lam *= 0.5
        else:
            trace.append((it, rc))
            return PBEResult(theta, res, False, it, trace)
        theta, f, res = cand, fc, rc
        trace.append((it, res))
    return PBEResult(theta, res, res <= tol, max_iter, trace)


# --- residual-gradient and GQ fields -----------------------------------------

@dataclass
class ResidualFields:
    baird_gradient: np.ndarray
    baird_objective: float
    gq_field: np.ndarray
    gq_objective: float


def baird_objective(model: MeanFlowModel, theta, weights: np.ndarray | None = None) -> float:
    """``0.5 sum_z w(z) B(z; theta)^2`` with ``w = pi_theta`` unless given."""
    w = model.chain(theta).pi if weights is None else weights
    B = bellman_kernel(model, theta)
    return 0.5 * float(np.sum(w * B * B))


def residual_gradient_field(model: MeanFlowModel, theta, M: np.ndarray | None = None) -> ResidualFields:
    """Mean-square Bellman error gradient and the GQ field ``-A^T M f``.

    The Bellman error uses the exact transition law, and the weighting pmf is
    held at ``pi_theta`` when differentiating.
    """
    st = model.chain(theta)
    B = bellman_kernel(model, theta)
    grad_B = model.gamma * np.einsum("xuy,yd->xud", model.Pz, model.target_features(st)) - model.psi
    if model.variant == "relative":
        grad_B = grad_B - model.delta * np.einsum("xu,xud->d", model.nu, model.psi)[None, None, :]
    g = np.einsum("xu,xu,xud->d", st.pi, B, grad_B)
    M = np.eye(model.d) if M is None else M
    A, _ = flow_matrices(model, theta)
    f = mean_flow(model, theta)
    return ResidualFields(g, 0.5 * float(np.sum(st.pi * B * B)), -A.T @ M @ f, 0.5 * float(f @ M @ f))


def gq_hessian(model: MeanFlowModel, theta, M: np.ndarray | None = None) -> np.ndarray:
    """Hessian ``A^T M A`` of the GQ objective at a root of the mean flow."""
    A, _ = flow_matrices(model, theta)
    M = np.eye(model.d) if M is None else M
    return A.T @ M @ A

"""Randomized training policies and the Markov chains they induce.

A policy is evaluated on a Q-table ``Q`` of shape ``(n_states, n_actions)``.
The tamed Gibbs policy also needs ``||theta||`` to set its inverse
temperature, passed as ``theta_norm``.

Every policy except the oblivious one is the causal mixture

    U = (1 - B) * component(Q, x) + B * W,   B ~ Bernoulli(eps),  W ~ nu_exp(. | x)

where the component is the greedy action or a Gibbs draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .mdp import PMF_TOL, ControlledMDP, greedy_actions, inverse_cdf

KINDS = ("oblivious", "epsilon_greedy", "gibbs", "tamed_gibbs")

# Coefficients of h(r) = 1 + a r^2 + b r^3 + c r^4 with r = ||theta||^2.  The
# polynomial meets 1/sqrt(r) at r = 1 with matching first and second derivatives.
_H_COEF = (15.0 / 8.0, -13.0 / 4.0, 11.0 / 8.0)
UNICHAIN_SV_TOL = 1e-9


class NotUnichainError(ValueError):
    """Raised when a transition matrix has more than one recurrent class."""


@dataclass(frozen=True, eq=False)
class PolicySpec:
    """Training policy.

    Parameters
    ----------
    kind : {"oblivious", "epsilon_greedy", "gibbs", "tamed_gibbs"}
    epsilon : float
        Probability of an exploration draw from ``nu_exp``.
    kappa0 : float
        Inverse temperature for ``gibbs``; scale of the state-dependent
        inverse temperature for ``tamed_gibbs``.
    nu_exp : ndarray, optional
        Exploration pmf, either over actions ``(n_actions,)`` or conditional on
        the state ``(n_states, n_actions)``.  Defaults to uniform over the
        admissible actions of each state.
    phi : ndarray, shape (n_states, n_actions), optional
        Conditional pmf of the oblivious policy.  Defaults to uniform over
        admissible actions.
    """

    kind: str = "epsilon_greedy"
    epsilon: float = 0.1
    kappa0: float = 1.0
    nu_exp: np.ndarray | None = None
    phi: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError(f"epsilon={self.epsilon} not in [0, 1]")
        if not self.kappa0 > 0:
            raise ValueError(f"kappa0={self.kappa0} must be positive")
        for name in ("nu_exp", "phi"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.array(v, dtype=float)
            if np.any(v < 0) or np.any(np.abs(v.sum(axis=-1) - 1.0) > PMF_TOL):
                raise ValueError(f"{name} rows must be pmfs")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def uses_theta_norm(self) -> bool:
        return self.kind == "tamed_gibbs"


def _uniform_admissible(mask: np.ndarray) -> np.ndarray:
    return mask / mask.sum(axis=1, keepdims=True)


def _conditional(p: np.ndarray | None, mask: np.ndarray, name: str) -> np.ndarray:
    if p is None:
        return _uniform_admissible(mask)
    p = np.broadcast_to(p, mask.shape).astype(float)
    if np.any(p[~mask] > 0):
        # A pmf over all actions is restricted to each state's admissible set.
        p = np.where(mask, p, 0.0)
        s = p.sum(axis=1, keepdims=True)
        if np.any(s <= 0):
            raise ValueError(f"{name} has no mass on the admissible actions of some state")
        p = p / s
    return p


def exploration_pmf(policy: PolicySpec, mask: np.ndarray) -> np.ndarray:
    """``nu_exp(u | x)`` as an ``(n_states, n_actions)`` table."""
    return _conditional(policy.nu_exp, mask, "nu_exp")


def kappa_theta(kappa0: float, theta) -> float:
    """Inverse temperature of the tamed Gibbs policy.

    Equal to ``kappa0 / ||theta||`` when ``||theta|| >= 1``.  Inside the unit
    ball it is ``kappa0 * h(||theta||^2)`` for a quartic ``h`` with ``h(0) = 1``,
    chosen so that the map is twice continuously differentiable.  On the unit
    ball ``h >= 1``, so the value never drops below ``kappa0``.

    ``theta`` may be a vector or the scalar norm.
    """
    if not kappa0 > 0:
        raise ValueError("kappa0 must be positive")
    t = np.asarray(theta, dtype=float)
    norm = float(abs(t)) if t.ndim == 0 else float(np.linalg.norm(t))
    if norm >= 1.0:
        return kappa0 / norm
    r = norm * norm
    a, b, c = _H_COEF
    return kappa0 * (1.0 + r * r * (a + r * (b + r * c)))


def epsilon_gamma(gamma: float) -> float:
    """Exploration threshold ``(1-g)^2 / ((1-g)^2 + g^2)``."""
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must lie in (0, 1)")
    a = (1.0 - gamma) ** 2
    return a / (a + gamma * gamma)


def inverse_temperature(policy: PolicySpec, theta_norm: float | None) -> float:
    if policy.kind == "gibbs":
        return policy.kappa0
    if policy.kind == "tamed_gibbs":
        if theta_norm is None:
            raise ValueError("tamed_gibbs needs theta_norm")
        return kappa_theta(policy.kappa0, theta_norm)
    raise ValueError(f"{policy.kind} has no inverse temperature")


def gibbs_pmf(Q: np.ndarray, kappa: float, mask: np.ndarray) -> np.ndarray:
    """Row-wise ``exp(-kappa Q) / sum`` over admissible actions, overflow-safe."""
    Qm = np.where(mask, Q, np.inf)
    with np.errstate(over="ignore", invalid="ignore"):
        gap = Qm - Qm.min(axis=-1, keepdims=True)
        logits = np.where(mask, -kappa * gap, -np.inf)
    logits = np.nan_to_num(logits, nan=-np.inf, neginf=-np.inf)
    return softmax(logits, axis=-1)


def component_pmf(policy: PolicySpec, Q: np.ndarray, mask: np.ndarray,
                  theta_norm: float | None = None) -> np.ndarray:
    """The theta-dependent component (greedy or Gibbs) as an ``(X, U)`` table."""
    if policy.kind == "oblivious":
        return _conditional(policy.phi, mask, "phi")
    if policy.kind == "epsilon_greedy":
        g = greedy_actions(Q, mask)
        out = np.zeros(mask.shape)
        out[np.arange(mask.shape[0]), g] = 1.0
        return out
    return gibbs_pmf(Q, inverse_temperature(policy, theta_norm), mask)


def policy_table(policy: PolicySpec, Q: np.ndarray, mask: np.ndarray,
                 theta_norm: float | None = None) -> np.ndarray:
    """``phi~(u | x)`` for every state: component mixed with ``nu_exp`` at rate ``epsilon``."""
    Q = np.asarray(Q, dtype=float)
    if Q.shape != mask.shape:
        raise ValueError(f"Q shape {Q.shape} does not match {mask.shape}")
    comp = component_pmf(policy, Q, mask, theta_norm)
    if policy.kind == "oblivious":
        return comp
    eps = policy.epsilon
    return (1.0 - eps) * comp + eps * exploration_pmf(policy, mask)


def action_pmf(policy: PolicySpec, Q: np.ndarray, x: int, mask: np.ndarray | None = None,
               theta_norm: float | None = None) -> np.ndarray:
    """Action pmf at state ``x``."""
    Q = np.asarray(Q, dtype=float)
    mask = np.ones(Q.shape, bool) if mask is None else mask
    return policy_table(policy, Q, mask, theta_norm)[x]


def sample_action(policy: PolicySpec, Q: np.ndarray, x: int, rng: np.random.Generator,
                  mask: np.ndarray | None = None, theta_norm: float | None = None) -> int:
    """Draw an action with the causal mixture.

    Consumes exactly two uniforms: ``b`` decides the exploration coin and ``v``
    selects the action by inversion from ``nu_exp`` or from the component.
    """
    Q = np.asarray(Q, dtype=float)
    mask = np.ones(Q.shape, bool) if mask is None else mask
    b, v = rng.random(2)
    return _select_action(policy, Q, x, mask, theta_norm, b, v)


def _select_action(policy, Q, x, mask, theta_norm, b, v) -> int:
    if policy.kind != "oblivious" and b < policy.epsilon:
        p = exploration_pmf(policy, mask)[x]
    else:
        p = component_pmf(policy, Q[x:x + 1], mask[x:x + 1], theta_norm)[0]
    return inverse_cdf(np.cumsum(p), v)


# --- Markov chain on state-action pairs ------------------------------------

@dataclass(frozen=True, eq=False)
class JointTransition:
    """Transition matrix of ``Z = (X, U)`` restricted to admissible pairs.

    ``matrix[i, j]`` is the probability of moving from pair ``pairs[i]`` to
    ``pairs[j]``.
    """

    matrix: np.ndarray
    pairs: np.ndarray
    shape: tuple

    def to_table(self, p: np.ndarray) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.pairs[:, 0], self.pairs[:, 1]] = p
        return out


def joint_transition_from_table(mdp: ControlledMDP, phi: np.ndarray) -> JointTransition:
    """``T(z, z') = P_u(x, x') phi(u' | x')`` on admissible pairs."""
    pairs = mdp.pairs
    x, u = pairs[:, 0], pairs[:, 1]
    Pz = mdp.transitions[u, x, :]                    # (Z, X)
    T = Pz[:, pairs[:, 0]] * phi[pairs[:, 0], pairs[:, 1]][None, :]
    return JointTransition(T, pairs, mdp.cost.shape)


def joint_transition(mdp: ControlledMDP, policy: PolicySpec, Q: np.ndarray,
                     theta_norm: float | None = None) -> JointTransition:
    Q = np.asarray(Q, dtype=float)
    if Q.shape != mdp.cost.shape:
        raise ValueError(f"Q shape {Q.shape} does not match MDP shape {mdp.cost.shape}")
    return joint_transition_from_table(mdp, policy_table(policy, Q, mdp.mask, theta_norm))


def stationary_vector(T: np.ndarray) -> np.ndarray:
    """Unique invariant pmf of a row-stochastic matrix.

    Solves ``pi (I - T) = 0, pi 1 = 1`` by least squares.  Raises
    :class:`NotUnichainError` when ``I - T`` has more than one singular value
    below the rank threshold.
    """
    T = np.asarray(T, dtype=float)
    n = T.shape[0]
    M = np.eye(n) - T.T
    sv = np.linalg.svd(M, compute_uv=False)
    if np.sum(sv < UNICHAIN_SV_TOL) > 1:
        raise NotUnichainError(
            f"eigenvalue 1 has multiplicity {int(np.sum(sv < UNICHAIN_SV_TOL))}; chain is not uni-chain")
    A = np.vstack([M, np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    resid = np.abs(pi @ T - pi).sum()
    if resid > 1e-10:
        raise NotUnichainError(f"invariance residual {resid:.3e} too large")
    return pi


def invariant_pmf(T: JointTransition | np.ndarray) -> np.ndarray:
    """Invariant pmf of a joint chain.

    For a :class:`JointTransition` the result is an ``(X, U)`` table; for a
    bare matrix it is a vector.
    """
    if isinstance(T, JointTransition):
        return T.to_table(stationary_vector(T.matrix))
    return stationary_vector(T)


def exploration_chain(mdp: ControlledMDP, policy: PolicySpec) -> JointTransition:
    """Joint chain when every action is drawn from ``nu_exp``."""
    return joint_transition_from_table(mdp, exploration_pmf(policy, mdp.mask))


@dataclass
class MinorizationReport:
    """Constants of the uniform minorization satisfied by the policy family."""

    pi_theta: np.ndarray
    mu_theta: np.ndarray
    pi_exp: np.ndarray
    mu_exp: np.ndarray
    horizon: int
    delta_n: float
    delta_ii: float
    ratio_min: float
    slack_iii: float
    product_form_error: float


def reachability_constant(T: np.ndarray, support: np.ndarray, max_horizon: int | None = None):
    """Smallest ``N`` with ``min_{z, z' in support} sum_{k<=N} T^k(z, z') > 0``.

    Returns ``(N, delta_N)``.
    """
    n = T.shape[0]
    max_horizon = max_horizon or max(2 * n, 2)
    acc = np.zeros_like(T)
    Tk = np.eye(n)
    for N in range(1, max_horizon + 1):
        Tk = Tk @ T
        acc += Tk
        d = float(acc[:, support].min())
        if d > 0:
            return N, d
    raise NotUnichainError("support not reachable from every pair")


def minorization_report(mdp: ControlledMDP, policy: PolicySpec, Q: np.ndarray,
                        theta_norm: float | None = None) -> MinorizationReport:
    """Compute invariant pmfs and the minorization constants at ``Q``.

    ``delta_ii`` is the analytic floor ``eps^N delta_N / (N max pi_exp)`` valid
    for every ``theta``; ``ratio_min`` is the realised ``min pi_theta / pi_exp``
    over the support of ``pi_exp``; ``slack_iii`` is
    ``min (pi_theta(x,u) - eps mu_theta(x) nu_exp(u|x))``.
    """
    if policy.kind == "oblivious" or policy.epsilon <= 0:
        raise ValueError("minorization requires a mixed policy with epsilon > 0")
    T_exp = exploration_chain(mdp, policy)
    p_exp = stationary_vector(T_exp.matrix)
    T_th = joint_transition(mdp, policy, Q, theta_norm)
    p_th = stationary_vector(T_th.matrix)
    pi_exp, pi_th = T_exp.to_table(p_exp), T_th.to_table(p_th)
    mu_exp, mu_th = pi_exp.sum(axis=1), pi_th.sum(axis=1)
    nu = exploration_pmf(policy, mdp.mask)

    support = p_exp > 1e-14
    N, dN = reachability_constant(T_exp.matrix, support)
    eps = policy.epsilon
    delta_ii = eps ** N * dN / (N * p_exp.max())
    ratio_min = float(np.min(p_th[support] / p_exp[support]))
    slack = float(np.min(pi_th - eps * mu_th[:, None] * nu))
    prod = float(np.max(np.abs(pi_exp - mu_exp[:, None] * nu)))
    return MinorizationReport(pi_th, mu_th, pi_exp, mu_exp, N, dN, delta_ii, ratio_min, slack, prod)


def softmin(Q: np.ndarray, kappa: float, mask: np.ndarray | None = None) -> np.ndarray:
    """Gibbs-averaged value ``sum_u p_kappa(u|x) Q(x,u)`` for each state."""
    Q = np.asarray(Q, dtype=float)
    mask = np.ones(Q.shape, bool) if mask is None else mask
    p = gibbs_pmf(Q, kappa, mask)
    return np.sum(np.where(mask, p * np.where(mask, Q, 0.0), 0.0), axis=-1)


def entropy_gap_bound(mask: np.ndarray, kappa: float) -> np.ndarray:
    """``log |U(x)| / kappa``: upper bound on softmin minus the true minimum."""
    return np.log(mask.sum(axis=-1)) / kappa


def log_n_actions(mdp: ControlledMDP) -> float:
    return math.log(int(mdp.mask.sum(axis=1).max()))

"""Finite controlled Markov chains, the dynamic-programming oracle and error metrics.

Q-tables are plain ``(n_states, n_actions)`` arrays.  Inadmissible state-action
pairs are flagged by ``ControlledMDP.mask``; they carry cost ``+inf`` and are
excluded from every minimum, every error metric and every tabular basis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PMF_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ControlledMDP:
    """Discounted-cost MDP on finite state and action sets.

    Parameters
    ----------
    transitions : ndarray, shape (n_actions, n_states, n_states)
        ``transitions[u, x, x']`` is the probability of moving from ``x`` to
        ``x'`` under action ``u``.
    cost : ndarray, shape (n_states, n_actions)
        One-step cost.  Inadmissible pairs hold ``+inf``.
    discount : float
        Discount factor in (0, 1).
    mask : ndarray of bool, shape (n_states, n_actions), optional
        Admissible pairs.  Defaults to all pairs admissible.
    """

    transitions: np.ndarray
    cost: np.ndarray
    discount: float
    mask: np.ndarray = None
    name: str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        P = np.array(self.transitions, dtype=float)
        c = np.array(self.cost, dtype=float)
        if P.ndim != 3 or c.ndim != 2:
            raise ValueError("transitions must be 3-d (u, x, x') and cost 2-d (x, u)")
        mask = np.ones(c.shape, dtype=bool) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != c.shape:
            raise ValueError(f"mask shape {mask.shape} does not match cost shape {c.shape}")
        c = np.where(mask, c, np.inf)
        for name, arr in (("transitions", P), ("cost", c), ("mask", mask)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.cost.shape[0]

    @property
    def n_actions(self) -> int:
        return self.cost.shape[1]

    @property
    def pairs(self) -> np.ndarray:
        """Admissible ``(x, u)`` pairs in row-major order, shape (d, 2)."""
        return np.argwhere(self.mask)

    @property
    def n_pairs(self) -> int:
        return int(self.mask.sum())

    def flatten(self, Q: np.ndarray) -> np.ndarray:
        """Tabular parameter vector: ``Q`` restricted to admissible pairs."""
        return np.asarray(Q, dtype=float)[self.mask]

    def unflatten(self, theta: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`flatten`; inadmissible entries are ``+inf``."""
        Q = np.full(self.cost.shape, np.inf)
        Q[self.mask] = theta
        return Q

    def cost_scale(self) -> float:
        return float(np.max(np.abs(self.cost[self.mask])))


def validate(mdp: ControlledMDP) -> list[str]:
    """Return a list of violated invariants; empty when the model is well formed."""
    problems = []
    P, c = mdp.transitions, mdp.cost
    nU, nX = c.shape[1], c.shape[0]
    if P.shape != (nU, nX, nX):
        problems.append(f"transitions shape {P.shape} != {(nU, nX, nX)}")
        return problems
    if np.any(P < 0):
        for u, x, y in np.argwhere(P < 0)[:10]:
            problems.append(f"negative probability at (u={u}, x={x}, x'={y})")
    sums = P.sum(axis=2)
    for u, x in np.argwhere(np.abs(sums - 1.0) > PMF_TOL):
        problems.append(f"row (u={u}, x={x}) sums to {sums[u, x]!r}, not 1")
    if not np.all(np.isfinite(c[mdp.mask])):
        problems.append("cost entries must be finite on admissible pairs")
    for x in np.flatnonzero(~mdp.mask.any(axis=1)):
        problems.append(f"state {x} has no admissible action")
    if not (0.0 < mdp.discount < 1.0):
        problems.append(f"discount out of range: {mdp.discount!r} not in (0, 1)")
    return problems


def min_over_actions(Q: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Under-bar minimum ``min_u Q(x, u)`` over admissible actions."""
    Q = np.asarray(Q, dtype=float)
    if mask is not None:
        Q = np.where(mask, Q, np.inf)
    return Q.min(axis=-1)


def greedy_actions(Q: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Argmin over admissible actions, ties broken toward the lowest index."""
    Q = np.asarray(Q, dtype=float)
    if mask is not None:
        Q = np.where(mask, Q, np.inf)
    return np.argmin(Q, axis=-1)


def bellman_operator(mdp: ControlledMDP, Q: np.ndarray) -> np.ndarray:
    """``c + gamma * P min Q`` evaluated on every pair (inadmissible stay ``+inf``)."""
    V = min_over_actions(Q, mdp.mask)
    return mdp.cost + mdp.discount * np.einsum("uxy,y->xu", mdp.transitions, V)


class ValueIterationError(RuntimeError):
    pass


def value_iteration(mdp: ControlledMDP, tol: float | None = None, Q0=None,
                    polish: bool = True) -> np.ndarray:
    """Solve the Bellman equation for ``Q*`` by successive approximation.

    Iterates ``Q <- c + gamma P min Q`` until the sup-norm Bellman residual is at
    most ``tol`` (default: ``1e-12`` or the rounding floor, whichever is
    larger).  Each sweep must shrink the residual by the factor ``gamma`` (up to
    rounding); a violation raises.  With ``polish`` the greedy policy of the
    final iterate is evaluated by a linear solve, and the result is kept when
    its Bellman residual is no larger.

    Returns
    -------
    Q : ndarray, shape (n_states, n_actions)
        Inadmissible entries are ``+inf``.

    Raises
    ------
    ValueIterationError
        If ``tol`` lies below the float64 rounding floor of the Bellman operator.
    """
    gamma, m = mdp.discount, mdp.mask
    floor = 8 * np.finfo(float).eps * max(1.0, mdp.cost_scale() / (1.0 - gamma))
    if tol is None:
        tol = max(1e-12, floor)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if tol < floor:
        raise ValueIterationError(
            f"tol={tol:g} is below the float64 rounding floor {floor:.3g} for this model")
    Q = np.where(m, 0.0 if Q0 is None else Q0, np.inf)
    TQ = bellman_operator(mdp, Q)
    resid = float(np.max(np.abs(TQ[m] - Q[m])))
    if resid > tol and gamma > 0:
        budget = math.ceil(math.log(tol * (1 - gamma) / resid) / math.log(gamma)) + 2
    else:
        budget = 1
    for _ in range(max(budget, 1)):
        if resid <= tol:
            return _polish(mdp, Q, resid) if polish else Q
        Q, TQ = TQ, bellman_operator(mdp, TQ)
        new = float(np.max(np.abs(TQ[m] - Q[m])))
        if new > gamma * resid + floor:
            raise ValueIterationError(f"contraction violated: {new:.3e} > {gamma} * {resid:.3e}")
        resid = new
    if resid > tol:
        raise ValueIterationError(f"residual {resid:.3e} still above tol after {budget} sweeps")
    return _polish(mdp, Q, resid) if polish else Q


def _polish(mdp: ControlledMDP, Q: np.ndarray, resid: float) -> np.ndarray:
    nX = mdp.n_states
    a = greedy_actions(Q, mdp.mask)
    P = mdp.transitions[a, np.arange(nX)]
    c = mdp.cost[np.arange(nX), a]
    V = np.linalg.solve(np.eye(nX) - mdp.discount * P, c)
    Qp = np.where(mdp.mask, np.where(mdp.mask, mdp.cost, 0.0)
                  + mdp.discount * np.einsum("uxy,y->xu", mdp.transitions, V), np.inf)
    new = float(np.max(np.abs(bellman_operator(mdp, Qp)[mdp.mask] - Qp[mdp.mask])))
    return Qp if new <= resid else Q


def bellman_error(mdp: ControlledMDP, Q: np.ndarray) -> tuple[np.ndarray, float]:
    """Pointwise Bellman error and its maximum absolute value.

    The pointwise error is ``c + gamma P min Q - Q``; inadmissible entries are 0.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.shape != mdp.cost.shape:
        raise ValueError(f"Q shape {Q.shape} does not match MDP shape {mdp.cost.shape}")
    Qa = np.where(mdp.mask, Q, np.inf)
    B = np.zeros(Q.shape)
    B[mdp.mask] = bellman_operator(mdp, Qa)[mdp.mask] - Qa[mdp.mask]
    return B, float(np.max(np.abs(B[mdp.mask])))


def span_seminorm(Q1: np.ndarray, Q2: np.ndarray, mask: np.ndarray | None = None) -> float:
    """``min_a sup |Q1 - Q2 - a|``, i.e. half the range of the difference."""
    Q1, Q2 = np.asarray(Q1, dtype=float), np.asarray(Q2, dtype=float)
    if Q1.shape != Q2.shape:
        raise ValueError("shape mismatch")
    if mask is not None:
        Q1, Q2 = Q1[mask], Q2[mask]
    D = Q1 - Q2
    return float((D.max() - D.min()) / 2.0)


def relative_qfunction(Q: np.ndarray, nu: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """``H = Q - <nu, Q>``; ``nu`` is a pmf on state-action pairs."""
    Q, nu = np.asarray(Q, dtype=float), np.asarray(nu, dtype=float)
    if nu.shape != Q.shape:
        raise ValueError("nu must have the shape of Q")
    if np.any(nu < 0) or abs(nu.sum() - 1.0) > PMF_TOL:
        raise ValueError("nu is not a pmf")
    m = np.ones(Q.shape, bool) if mask is None else mask
    if np.any(nu[~m] > 0):
        raise ValueError("nu puts mass on inadmissible pairs")
    shift = float(np.sum(nu[m] * Q[m]))
    return np.where(m, Q - shift, Q)


# Undirected graph of the six-node example (nodes 1..6 stored as 0..5):
#
#   1 - 2 - 3 - 6
#        \   |   |
#         4 - 5 -+
#
# The layout is asymmetric so that Q* has a unique minimizing action in every
# state for all discount factors in [0.5, 0.9999].
SIX_STATE_EDGES = ((1, 2), (2, 3), (2, 4), (3, 5), (3, 6), (4, 5), (5, 6))


def six_state_example(discount: float = 0.8, success: float = 0.8) -> ControlledMDP:
    """Six-node stochastic shortest path problem with renewal at the goal.

    At a non-goal node ``x`` action ``j`` is the ``j``-th move ``e_{x,x'}``
    with ``x'`` ranging over ``x`` itself followed by its neighbours in
    increasing order.  A move to a neighbour succeeds with probability
    ``success`` and otherwise leaves the walker in place.  Every such step
    costs 1.  The goal (node 6) has a single action that returns the walker to
    node 1 at zero cost.
    """
    n = 6
    goal = n - 1
    nbrs = {x: [x] for x in range(n)}
    for a, b in SIX_STATE_EDGES:
        nbrs[a - 1].append(b - 1)
        nbrs[b - 1].append(a - 1)
    for x in nbrs:
        nbrs[x] = [x] + sorted(nbrs[x][1:])
    nbrs[goal] = [0]
    nU = max(len(v) for v in nbrs.values())
    P = np.zeros((nU, n, n))
    c = np.full((n, nU), np.inf)
    mask = np.zeros((n, nU), dtype=bool)
    for x in range(n):
        for u in range(nU):
            if u >= len(nbrs[x]):
                P[u, x, x] = 1.0
                continue
            mask[x, u] = True
            if x == goal:
                P[u, x, 0] = 1.0
                c[x, u] = 0.0
                continue
            c[x, u] = 1.0
            y = nbrs[x][u]
            P[u, x, y] += success
            P[u, x, x] += 1.0 - success
    return ControlledMDP(P, c, discount, mask=mask, name="six_state",
                         info={"moves": nbrs, "success": success})


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator, discount: float = 0.8,
               concentration: float = 1.0) -> ControlledMDP:
    """Random MDP with Dirichlet transition rows and uniform [0, 1) costs."""
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_actions, n_states))
    c = rng.random((n_states, n_actions))
    return ControlledMDP(P, c, discount, name=f"random_{n_states}x{n_actions}")


def sample_transition(mdp: ControlledMDP, x: int, u: int, rng: np.random.Generator) -> int:
    """Draw ``x'`` from ``P_u(x, .)`` by inversion of one uniform variate."""
    if not (0 <= x < mdp.n_states and 0 <= u < mdp.n_actions):
        raise IndexError(f"invalid state/action ({x}, {u})")
    return inverse_cdf(np.cumsum(mdp.transitions[u, x]), rng.random())


def inverse_cdf(cdf: np.ndarray, v: float) -> int:
    """Smallest ``k`` with ``cdf[k] > v``; rounding overflow maps to the last atom."""
    k = int(np.searchsorted(cdf, v, side="right"))
    if k >= len(cdf):
        k = int(np.searchsorted(cdf, cdf[-1], side="left"))
    return k


# --- file format -----------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "null"
    if math.isinf(v):
        return '"inf"' if v > 0 else '"-inf"'
    return repr(v)


def _emit(obj, indent=0) -> str:
    pad = "  " * indent
    if isinstance(obj, dict):
        items = [f'{pad}  {json.dumps(k)}: {_emit(v, indent + 1).lstrip()}' for k, v in obj.items()]
        return pad + "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if obj and isinstance(obj[0], (list, tuple, dict)):
            inner = [_emit(v, indent + 1) for v in obj]
            return pad + "[\n" + ",\n".join(inner) + "\n" + pad + "]"
        return pad + "[" + ", ".join(_fmt(v) for v in obj) + "]"
    if isinstance(obj, str):
        return pad + json.dumps(obj)
    return pad + _fmt(obj)


def dumps_structured(obj) -> str:
    """Serialize nested dicts/lists as JSON with shortest round-trip floats."""
    return _emit(obj) + "\n"


def _decode_inf(obj):
    if isinstance(obj, list):
        return [_decode_inf(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _decode_inf(v) for k, v in obj.items()}
    if obj == "inf":
        return math.inf
    if obj == "-inf":
        return -math.inf
    return obj


def mdp_to_dict(mdp: ControlledMDP) -> dict:
    return {
        "name": mdp.name,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "discount": mdp.discount,
        "transitions": mdp.transitions,
        "cost": mdp.cost,
        "mask": mdp.mask.astype(int),
    }


def mdp_from_dict(d: dict) -> ControlledMDP:
    d = _decode_inf(d)
    P = np.array(d["transitions"], dtype=float)
    c = np.array(d["cost"], dtype=float)
    nX, nU = int(d["n_states"]), int(d["n_actions"])
    if P.shape != (nU, nX, nX) or c.shape != (nX, nU):
        raise ValueError("array shapes disagree with n_states/n_actions")
    mask = np.array(d["mask"], dtype=bool) if "mask" in d else None
    return ControlledMDP(P, c, float(d["discount"]), mask=mask, name=d.get("name", ""))


def save_mdp(mdp: ControlledMDP, path) -> None:
    Path(path).write_text(dumps_structured(mdp_to_dict(mdp)))


def load_mdp(path) -> ControlledMDP:
    return mdp_from_dict(json.loads(Path(path).read_text()))

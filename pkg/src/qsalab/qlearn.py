"""Q-learning observation streams and the closed-loop experiment driver.

The temporal difference for a transition ``(x, u, x', u')`` is

    D = c(x, u) + gamma * target - Q(x, u)

with ``target = min_a Q(x', a)`` (Watkins), ``Q(x', u')`` (on-policy) or the
Watkins target minus ``delta <nu, Q> / gamma`` folded in as an extra term
(relative).  The update direction is ``f = D psi(x, u)`` and the sample
Jacobian ``A = psi(x, u) g^T`` with ``g = gamma psi(x', a') - psi(x, u)``.

Simulations draw their randomness from counter-based Philox streams.  Each
step consumes three uniforms in the order (transition, exploration coin,
action); the very first action consumes two.
"""

from __future__ import annotations

import concurrent.futures as cf
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels as K
from .engine import (MatrixGain, Plain, PRAverager, StepSchedule, TwoTimeScale, Zap, ZapZero,
                     burn_in_length, matrix_gain_step, pr_update, sa_step, step_size,
                     zap_initial_matrix, zap_step, zap_zero_step)
from .features import is_tabular, pair_major, q_values
from .mdp import ControlledMDP, bellman_error, sample_transition, span_seminorm
from .policy import PolicySpec, _conditional, exploration_pmf, sample_action

POLICY_CODES = {"oblivious": K.OBLIVIOUS, "epsilon_greedy": K.EPS_GREEDY,
                "gibbs": K.GIBBS, "tamed_gibbs": K.TAMED}
TD_CODES = {"watkins": K.WATKINS, "on_policy": K.ON_POLICY, "relative": K.RELATIVE}
EST_CODES = {"plain": K.PLAIN, "matrix_gain": K.MATRIX_GAIN, "zap": K.ZAP,
             "zapzero": K.ZAPZERO, "frozen": K.FROZEN}
BLOCK = 1 << 16


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator for one run; accepts an int or a SeedSequence."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def spawn_seeds(seed: int, n: int) -> list:
    """Per-run integer seeds ``seed, seed + 1, ...``; each run is reproducible on its own."""
    return [int(seed) + i for i in range(n)]


@dataclass
class LinearQ:
    """``Q^theta(x, u) = theta . psi(x, u)``."""

    basis: np.ndarray
    theta: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=float)
        self.theta = np.array(self.theta, dtype=float)
        if self.mask is None:
            self.mask = np.ones(self.basis.shape[1:], dtype=bool)
        if self.theta.shape != (self.basis.shape[0],):
            raise ValueError("theta and basis dimensions disagree")

    @property
    def d(self) -> int:
        return self.theta.shape[0]

    def table(self) -> np.ndarray:
        return q_values(self.basis, self.theta, self.mask)

    def value(self, x, u) -> float:
        return float(self.theta @ self.basis[:, x, u])

    def features(self, x, u) -> np.ndarray:
        return self.basis[:, x, u]

    def greedy(self, x) -> int:
        q = np.where(self.mask[x], self.theta @ self.basis[:, x, :], np.inf)
        return int(np.argmin(q))


@dataclass(frozen=True)
class TransitionSample:
    x: int
    u: int
    x_next: int
    cost: float
    u_next: int | None = None


def td_term(q: LinearQ, s: TransitionSample, gamma: float):
    """Watkins update direction and sample Jacobian."""
    a = q.greedy(s.x_next)
    psi = q.features(s.x, s.u)
    D = s.cost + gamma * q.value(s.x_next, a) - q.value(s.x, s.u)
    g = gamma * q.features(s.x_next, a) - psi
    return D * psi, np.outer(psi, g)


def on_policy_td_term(q: LinearQ, s: TransitionSample, gamma: float):
    """Update direction with the next training action in place of the minimum."""
    if s.u_next is None:
        raise ValueError("on-policy temporal difference needs u_next")
    psi = q.features(s.x, s.u)
    D = s.cost + gamma * q.value(s.x_next, s.u_next) - q.value(s.x, s.u)
    return D * psi


def on_policy_jacobian(q: LinearQ, s: TransitionSample, gamma: float) -> np.ndarray:
    psi = q.features(s.x, s.u)
    return np.outer(psi, gamma * q.features(s.x_next, s.u_next) - psi)


def relative_td_term(q: LinearQ, s: TransitionSample, gamma: float, delta: float,
                     nu: np.ndarray) -> np.ndarray:
    """Watkins direction with the normalization ``-delta <nu, Q>`` added to the difference.

    The tabular fixed point is ``Q* - k 1`` with
    ``k = delta <nu, Q*> / (1 - gamma + delta)``.
    """
    nu_psi = _nu_features(q, delta, nu)
    a = q.greedy(s.x_next)
    D = (s.cost + gamma * q.value(s.x_next, a) - q.value(s.x, s.u)
         - delta * float(q.theta @ nu_psi))
    return D * q.features(s.x, s.u)


def relative_jacobian(q: LinearQ, s: TransitionSample, gamma: float, delta: float,
                      nu: np.ndarray) -> np.ndarray:
    """``psi_n (gamma psi(x', greedy) - psi_n - delta <nu, psi>)^T``."""
    nu_psi = _nu_features(q, delta, nu)
    psi = q.features(s.x, s.u)
    g = gamma * q.features(s.x_next, q.greedy(s.x_next)) - psi - delta * nu_psi
    return np.outer(psi, g)


def _nu_features(q: LinearQ, delta: float, nu) -> np.ndarray:
    if not delta > 0:
        raise ValueError("delta must be positive")
    nu = np.asarray(nu, dtype=float)
    if np.any(nu < 0) or abs(nu.sum() - 1) > 1e-12:
        raise ValueError("nu must be a pmf on state-action pairs")
    return np.einsum("xu,dxu->d", nu, q.basis)


def relative_shift(q_star: np.ndarray, nu: np.ndarray, gamma: float, delta: float,
                   mask: np.ndarray | None = None) -> float:
    """Constant ``k`` such that the relative fixed point equals ``Q* - k``."""
    m = np.ones(q_star.shape, bool) if mask is None else mask
    return delta * float(np.sum(nu[m] * q_star[m])) / (1.0 - gamma + delta)


# --- experiment configuration ---------------------------------------------------

@dataclass
class EstimatorConfig:
    """Estimator and observation-stream selection.

    ``kind`` is one of ``plain``, ``matrix_gain``, ``zap``, ``zapzero`` or
    ``frozen`` (theta held fixed, update directions accumulated in batches).

    Zap holds theta fixed for ``burn_in`` steps (default ``10 d``) and
    averages the sample Jacobians into its initial matrix.  Both step sizes
    are indexed by the global step, so the first move uses
    ``alpha_{burn_in + 1}`` rather than a full Newton step.
    """

    kind: str = "matrix_gain"
    variant: str = "watkins"
    delta: float = 1.0
    nu: np.ndarray | None = None
    M: np.ndarray | None = None
    burn_in: int | None = None
    refresh_every: int = 1024
    safeguard_radius: float | None = None
    batch_len: int = 0
    n_batches: int = 0

    def __post_init__(self):
        if self.kind not in EST_CODES:
            raise ValueError(f"unknown estimator {self.kind!r}")
        if self.variant not in TD_CODES:
            raise ValueError(f"unknown variant {self.variant!r}")


def snapshot_grid(n_steps: int, base: float = 1.2) -> np.ndarray:
    """Integers ``round(base^k)`` up to ``n_steps``, plus ``n_steps``."""
    if n_steps <= 0:
        return np.zeros(0, dtype=np.int64)
    kmax = int(math.floor(math.log(n_steps) / math.log(base))) + 1
    grid = np.unique(np.round(base ** np.arange(kmax + 1)).astype(np.int64))
    grid = grid[(grid >= 1) & (grid <= n_steps)]
    return np.unique(np.append(grid, n_steps))


@dataclass
class RunRecord:
    """Outcome of one closed-loop run."""

    config: dict
    seed: object
    snapshot_n: np.ndarray
    theta: np.ndarray
    theta_pr: np.ndarray
    bellman_max: np.ndarray
    span_error: np.ndarray
    cond: np.ndarray
    max_norm: float
    events: dict
    status: str
    counts: np.ndarray | None = None
    batch_means: np.ndarray | None = None

    @property
    def final(self) -> np.ndarray:
        return self.theta[-1]

    def to_dict(self) -> dict:
        out = {"config": self.config, "seed": str(self.seed), "status": self.status,
               "max_norm": self.max_norm, "events": self.events,
               "snapshots": [{"n": int(n), "theta": t.tolist(), "theta_pr": p.tolist(),
                              "bellman_max": float(b), "span_error": float(s), "cond": float(c)}
                             for n, t, p, b, s, c in zip(self.snapshot_n, self.theta, self.theta_pr,
                                                         self.bellman_max, self.span_error, self.cond)]}
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        snaps = doc["snapshots"]

        def col(key):
            return np.array([np.nan if s.get(key) is None else s[key] for s in snaps], dtype=float)

        def rows(key):
            return np.array([[np.nan if v is None else v for v in s[key]] for s in snaps], dtype=float)

        return cls(doc["config"], doc["seed"], np.array([s["n"] for s in snaps], dtype=np.int64),
                   rows("theta"), rows("theta_pr"), col("bellman_max"), col("span_error"),
                   col("cond"), float(doc["max_norm"]), doc["events"], doc["status"])


def _schedule_array(schedules, est_kind):
    if isinstance(schedules, StepSchedule):
        a, b = schedules, StepSchedule(1.0, 0.85)
    else:
        a, b = schedules.alpha, schedules.beta
    return np.array([a.g, a.rho, a.shift, b.g, b.rho, b.shift], dtype=float)


def _echo(mdp, policy, est, schedules, n_steps):
    sched = ({"alpha": asdict(schedules)} if isinstance(schedules, StepSchedule)
             else {"alpha": asdict(schedules.alpha), "beta": asdict(schedules.beta)})
    return {"mdp": mdp.name, "discount": mdp.discount,
            "policy": {"kind": policy.kind, "epsilon": policy.epsilon, "kappa0": policy.kappa0},
            "estimator": {"kind": est.kind, "variant": est.variant, "delta": est.delta},
            "schedules": sched, "n_steps": int(n_steps)}


class _Compiled:
    """Kernel-ready arrays for one (MDP, policy, basis, estimator) combination."""

    def __init__(self, mdp: ControlledMDP, policy: PolicySpec, basis: np.ndarray, est: EstimatorConfig):
        mask = mdp.mask
        self.mdp, self.policy, self.est = mdp, policy, est
        self.pcdf = np.ascontiguousarray(np.cumsum(mdp.transitions, axis=2))
        self.cost = np.ascontiguousarray(np.where(mask, mdp.cost, 0.0))
        nX, nU = mask.shape
        self.adm = np.zeros((nX, nU), dtype=np.int64)
        self.n_adm = mask.sum(axis=1).astype(np.int64)
        for x in range(nX):
            idx = np.flatnonzero(mask[x])
            self.adm[x, :len(idx)] = idx
        self.psi = pair_major(np.where(mask[None], basis, 0.0))
        self.d = basis.shape[0]
        self.tabular = is_tabular(basis, mask)
        self.tab_idx = np.full((nX, nU), -1, dtype=np.int64)
        if self.tabular:
            self.tab_idx[mask] = np.argmax(basis[:, mask], axis=0)
        elif est.kind == "matrix_gain":
            raise ValueError("matrix_gain estimator requires the tabular basis")
        self.nu_cdf = np.ascontiguousarray(np.cumsum(exploration_pmf(policy, mask), axis=1))
        phi = _conditional(policy.phi, mask, "phi")
        self.phi_cdf = np.ascontiguousarray(np.cumsum(phi, axis=1))
        nu_pairs = mask / mask.sum() if est.nu is None else np.asarray(est.nu, dtype=float)
        self.nu_psi = np.einsum("xu,dxu->d", nu_pairs, basis)
        M = np.eye(self.d) if est.M is None else np.asarray(est.M, dtype=float)
        self.M = np.ascontiguousarray(M)
        self.M_identity = bool(np.array_equal(M, np.eye(self.d)))
        self.n_burn = (est.burn_in if est.burn_in is not None else burn_in_length(self.d)) \
            if est.kind == "zap" else 0


def run_experiment(mdp: ControlledMDP, policy: PolicySpec, q0: LinearQ, estimator: EstimatorConfig,
                   schedules, n_steps: int, seed, x0: int = 0, q_star: np.ndarray | None = None,
                   snapshots: np.ndarray | None = None, compiled: _Compiled | None = None) -> RunRecord:
    """Simulate the closed loop for ``n_steps`` transitions.

    Actions are drawn from the training policy evaluated at the current
    parameter.  With the Watkins and relative streams the next action is drawn
    after the update; with the on-policy stream it is drawn before.
    """
    est = estimator
    C = compiled or _Compiled(mdp, policy, q0.basis, est)
    d = C.d
    rng = make_rng(seed)
    snaps = snapshot_grid(n_steps) if snapshots is None else np.asarray(snapshots, dtype=np.int64)
    theta = q0.theta.astype(float).copy()
    Q0 = q_values(q0.basis, theta, mdp.mask)
    u0 = sample_action(policy, Q0, x0, rng, mdp.mask, float(np.linalg.norm(theta)))

    w = np.zeros(d); z = np.zeros(d)
    Ahat = np.zeros((d, d)); Ainv = np.zeros((d, d))
    counts = np.zeros(d, dtype=np.int64)
    pr_sum = np.zeros(d)
    istate = np.zeros(K.N_ISTATE, dtype=np.int64)
    istate[K.I_X], istate[K.I_U] = x0, u0
    fstate = np.zeros(K.N_FSTATE)
    fstate[K.F_MAXNORM] = np.linalg.norm(theta)
    fstate[K.F_COND] = np.nan
    S = len(snaps)
    snap_theta = np.full((S, d), np.nan); snap_pr = np.full((S, d), np.nan)
    snap_cond = np.full(S, np.nan)
    nb = max(est.n_batches, 1)
    fsum = np.zeros((nb, d))
    batch_len = est.batch_len if est.batch_len > 0 else max(n_steps, 1)
    sched = _schedule_array(schedules, est.kind)
    radius = -1.0 if est.safeguard_radius is None else float(est.safeguard_radius)

    done = 0
    while done < n_steps and istate[K.I_STATUS] == K.STATUS_OK:
        m = min(BLOCK, n_steps - done)
        unif = rng.random((m, 3))
        K.run_block(unif, C.pcdf, C.cost, C.adm, C.n_adm, C.psi, C.tab_idx,
                    POLICY_CODES[policy.kind], float(policy.epsilon), float(policy.kappa0),
                    C.nu_cdf, C.phi_cdf,
                    TD_CODES[est.variant], float(mdp.discount), float(est.delta), C.nu_psi,
                    EST_CODES[est.kind], sched, int(C.n_burn), C.M, C.M_identity,
                    int(est.refresh_every), radius,
                    theta, w, z, Ahat, Ainv, counts, pr_sum, istate, fstate,
                    snaps, snap_theta, snap_pr, snap_cond, int(batch_len), fsum)
        done += m

    n_all = np.concatenate([[0], snaps])
    th_all = np.vstack([q0.theta[None, :], snap_theta])
    pr_all = np.vstack([q0.theta[None, :], snap_pr])
    cond_all = np.concatenate([[np.nan], snap_cond])
    bell, span = _errors(mdp, q0.basis, th_all, q_star)
    status = "ok" if istate[K.I_STATUS] == K.STATUS_OK else "nan"
    events = {"safeguard": int(istate[K.I_EVENTS]),
              "first_safeguard_step": int(istate[K.I_FIRST_EVENT]) if istate[K.I_EVENTS] else None,
              "nan_step": int(istate[K.I_FAIL]) if status != "ok" else None,
              "inverse_refreshes": int(istate[K.I_REFRESH]),
              "singular": int(istate[K.I_SINGULAR])}
    bm = fsum / batch_len if est.kind == "frozen" else None
    return RunRecord(_echo(mdp, policy, est, schedules, n_steps), seed, n_all, th_all, pr_all,
                     bell, span, cond_all, float(fstate[K.F_MAXNORM]), events, status,
                     counts if est.kind == "matrix_gain" else None, bm)


def _errors(mdp, basis, thetas, q_star):
    bell = np.full(len(thetas), np.nan)
    span = np.full(len(thetas), np.nan)
    for i, th in enumerate(thetas):
        if not np.all(np.isfinite(th)):
            continue
        Q = q_values(basis, th, mdp.mask)
        bell[i] = bellman_error(mdp, np.where(mdp.mask, Q, 0.0))[1]
        if q_star is not None:
            span[i] = span_seminorm(Q, q_star, mdp.mask)
    return bell, span


# --- ensembles ----------------------------------------------------------------

@dataclass
class EnsembleResult:
    """Snapshots of ``N`` independent runs, ``theta`` of shape (N, S, d)."""

    snapshot_n: np.ndarray
    theta: np.ndarray
    theta_pr: np.ndarray
    bellman_max: np.ndarray
    span_error: np.ndarray
    events: list
    status: list
    seeds: list = field(default_factory=list)

    @property
    def n_runs(self) -> int:
        return self.theta.shape[0]

    def final(self) -> np.ndarray:
        return self.theta[:, -1, :]


def _one(args):
    return run_experiment(*args[0], **args[1])


def run_ensemble(mdp, policy, q0, estimator, schedules, n_steps, n_runs, seed,
                 x0=0, q_star=None, n_jobs: int = 1) -> EnsembleResult:
    """Independent runs from spawned seeds, optionally across processes."""
    seeds = spawn_seeds(seed, n_runs)
    C = _Compiled(mdp, policy, q0.basis, estimator)
    kw = {"x0": x0, "q_star": q_star}
    if n_jobs == 1:
        recs = [run_experiment(mdp, policy, q0, estimator, schedules, n_steps, s,
                               compiled=C, **kw) for s in seeds]
    else:
        jobs = [((mdp, policy, q0, estimator, schedules, n_steps, s), kw) for s in seeds]
        with cf.ProcessPoolExecutor(max_workers=n_jobs) as ex:
            recs = list(ex.map(_one, jobs))
    return EnsembleResult(recs[0].snapshot_n, np.stack([r.theta for r in recs]),
                          np.stack([r.theta_pr for r in recs]),
                          np.stack([r.bellman_max for r in recs]),
                          np.stack([r.span_error for r in recs]),
                          [r.events for r in recs], [r.status for r in recs], seeds)


def frozen_stream(mdp, policy, basis, theta, n_steps, n_batches, seed, variant="watkins",
                  delta=1.0, nu=None, x0=0) -> np.ndarray:
    """Batch means of the update direction with ``theta`` held fixed, shape (n_batches, d)."""
    if n_steps % n_batches:
        raise ValueError("n_steps must be a multiple of n_batches")
    est = EstimatorConfig("frozen", variant, delta=delta, nu=nu,
                          batch_len=n_steps // n_batches, n_batches=n_batches)
    rec = run_experiment(mdp, policy, LinearQ(basis, theta, mdp.mask), est, StepSchedule(),
                         n_steps, seed, x0=x0, snapshots=np.array([n_steps]))
    return rec.batch_means


# --- pure-Python reference -----------------------------------------------------

def simulate_reference(mdp, policy, q0: LinearQ, estimator: EstimatorConfig, schedules,
                       n_steps: int, seed, x0: int = 0) -> np.ndarray:
    """Step-by-step simulation built from the scalar samplers and engine updates.

    Consumes the generator exactly as :func:`run_experiment` does and returns
    the parameter after every step, shape (n_steps + 1, d).  Intended for
    short cross-checks of the compiled kernel.
    """
    est = estimator
    rng = make_rng(seed)
    mask, gamma = mdp.mask, mdp.discount
    q = LinearQ(q0.basis, q0.theta.copy(), mask)
    d = q.d
    nu_pairs = mask / mask.sum() if est.nu is None else est.nu
    a_sched = schedules if isinstance(schedules, StepSchedule) else schedules.alpha
    b_sched = None if isinstance(schedules, StepSchedule) else schedules.beta
    tab_idx = None
    if est.kind == "matrix_gain":
        tab_idx = np.full(mask.shape, -1)
        tab_idx[mask] = np.argmax(q0.basis[:, mask], axis=0)
    n_burn = (est.burn_in or burn_in_length(d)) if est.kind == "zap" else 0

    def act(x):
        return sample_action(policy, q.table(), x, rng, mask, float(np.linalg.norm(q.theta)))

    x, u = x0, act(x0)
    state = {"plain": Plain(q.theta), "matrix_gain": MatrixGain(q.theta),
             "zap": None, "zapzero": ZapZero(q.theta, M=est.M)}.get(est.kind)
    burn = []
    out = [q.theta.copy()]
    for n in range(1, n_steps + 1):
        xn = sample_transition(mdp, x, u, rng)
        un = None
        if est.variant == "on_policy":
            un = act(xn)
        s = TransitionSample(x, u, xn, float(mdp.cost[x, u]), un)
        if est.variant == "watkins":
            f, A = td_term(q, s, gamma)
        elif est.variant == "relative":
            f = relative_td_term(q, s, gamma, est.delta, nu_pairs)
            A = relative_jacobian(q, s, gamma, est.delta, nu_pairs)
        else:
            f, A = on_policy_td_term(q, s, gamma), on_policy_jacobian(q, s, gamma)
        if est.kind == "plain":
            state = sa_step(state, f, step_size(a_sched, n))
        elif est.kind == "matrix_gain":
            i = int(tab_idx[x, u])
            k = int(state.counts[i]) + 1
            state = matrix_gain_step(state, i, f, step_size(a_sched, k) * k)
        elif est.kind == "zap":
            if n <= n_burn:
                burn.append(A)
                if n == n_burn:
                    state = Zap(q.theta.copy(), zap_initial_matrix(burn))
            else:
                state = zap_step(state, f, A, step_size(a_sched, n), step_size(b_sched, n))
        elif est.kind == "zapzero":
            state = zap_zero_step(state, f, A, step_size(a_sched, n), step_size(b_sched, n))
        if state is not None:
            q.theta = np.array(state.theta, dtype=float)
        if est.variant != "on_policy":
            un = act(xn)
        x, u = xn, un
        out.append(q.theta.copy())
    return np.array(out)

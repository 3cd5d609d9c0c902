"""Compiled closed-loop Q-learning kernel.

The kernel advances one run through a block of pre-drawn uniforms.  Row ``k``
of the block holds ``(transition, coin, action)`` variates for step ``k``, so
that a pure-Python simulation consuming the same generator one scalar at a
time visits exactly the same states and actions.
"""

import numpy as np
from numba import njit

# Policy kinds
OBLIVIOUS, EPS_GREEDY, GIBBS, TAMED = 0, 1, 2, 3
# Temporal-difference kinds
WATKINS, ON_POLICY, RELATIVE = 0, 1, 2
# Estimators
PLAIN, MATRIX_GAIN, ZAP, ZAPZERO, FROZEN = 0, 1, 2, 3, 4
# Slots of the integer state vector
I_X, I_U, I_N, I_SNAP, I_EVENTS, I_STATUS, I_FAIL, I_REFRESH, I_SINGULAR, I_FIRST_EVENT = range(10)
N_ISTATE = 10
# Slots of the float state vector
F_MAXNORM, F_COND = 0, 1
N_FSTATE = 2
STATUS_OK, STATUS_NAN = 0, 1

H_A, H_B, H_C = 15.0 / 8.0, -13.0 / 4.0, 11.0 / 8.0


@njit(cache=True)
def inv_cdf(cdf, v):
    n = cdf.shape[0]
    for k in range(n):
        if cdf[k] > v:
            return k
    last = cdf[n - 1]
    for k in range(n):
        if cdf[k] == last:
            return k
    return n - 1


@njit(cache=True)
def qval(theta, psi, x, u):
    s = 0.0
    for i in range(theta.shape[0]):
        s += theta[i] * psi[x, u, i]
    return s


@njit(cache=True)
def kappa_of(kind, kappa0, theta):
    if kind != TAMED:
        return kappa0
    r = 0.0
    for i in range(theta.shape[0]):
        r += theta[i] * theta[i]
    nrm = np.sqrt(r)
    if nrm >= 1.0:
        return kappa0 / nrm
    return kappa0 * (1.0 + r * r * (H_A + r * (H_B + r * H_C)))


@njit(cache=True)
def greedy(theta, psi, adm, n_adm, x):
    best = adm[x, 0]
    qb = qval(theta, psi, x, best)
    for j in range(1, n_adm[x]):
        a = adm[x, j]
        q = qval(theta, psi, x, a)
        if q < qb:
            qb = q
            best = a
    return best, qb


@njit(cache=True)
def choose_action(pol_kind, eps, kappa0, nu_cdf, phi_cdf, theta, psi, adm, n_adm, x, b, v, work):
    if pol_kind == OBLIVIOUS:
        return inv_cdf(phi_cdf[x], v)
    if b < eps:
        return inv_cdf(nu_cdf[x], v)
    if pol_kind == EPS_GREEDY:
        a, _ = greedy(theta, psi, adm, n_adm, x)
        return a
    kappa = kappa_of(pol_kind, kappa0, theta)
    m = n_adm[x]
    qmin = np.inf
    for j in range(m):
        work[j] = qval(theta, psi, x, adm[x, j])
        if work[j] < qmin:
            qmin = work[j]
    tot = 0.0
    for j in range(m):
        work[j] = np.exp(-kappa * (work[j] - qmin))
        tot += work[j]
    acc = 0.0
    target = v * tot
    for j in range(m):
        acc += work[j]
        if acc > target:
            return adm[x, j]
    return adm[x, m - 1]


@njit(cache=True)
def step_size(g, rho, shift, n):
    a = g * (n + shift) ** (-rho)
    return a if a < 1.0 else 1.0


@njit(cache=True)
def refresh_inverse(Ahat, Ainv):
    """Pseudo-inverse via SVD; returns (condition number, singular flag, smallest singular value)."""
    U, s, Vt = np.linalg.svd(Ahat)
    d = s.shape[0]
    cut = 1e-8 * s[0]
    singular = 0
    for i in range(d):
        for j in range(d):
            Ainv[i, j] = 0.0
    for k in range(d):
        if s[k] > cut:
            for i in range(d):
                for j in range(d):
                    Ainv[i, j] += Vt[k, i] * U[j, k] / s[k]
        else:
            singular = 1
    cond = s[0] / s[d - 1] if s[d - 1] > 0 else np.inf
    return cond, singular, s[d - 1]


@njit(cache=True)
def run_block(unif, pcdf, cost, adm, n_adm, psi, tab_idx,
              pol_kind, eps, kappa0, nu_cdf, phi_cdf,
              td_kind, gamma, delta, nu_psi,
              est_kind, sched, n_burn, M, M_is_identity, refresh_every,
              safeguard_radius,
              theta, w, z, Ahat, Ainv, counts, pr_sum, istate, fstate,
              snap_n, snap_theta, snap_pr, snap_cond,
              batch_len, fsum):
    d = theta.shape[0]
    work = np.empty(adm.shape[1])
    u_vec = np.empty(d)
    g_vec = np.empty(d)
    tmp = np.empty(d)
    tmp2 = np.empty(d)
    x = istate[I_X]
    u = istate[I_U]
    n = istate[I_N]
    for k in range(unif.shape[0]):
        if istate[I_STATUS] != STATUS_OK:
            break
        n1 = n + 1
        xn = inv_cdf(pcdf[u, x], unif[k, 0])
        un = -1
        if td_kind == ON_POLICY:
            un = choose_action(pol_kind, eps, kappa0, nu_cdf, phi_cdf, theta, psi, adm, n_adm,
                               xn, unif[k, 1], unif[k, 2], work)
            a_next = un
            target = qval(theta, psi, xn, un)
        else:
            a_next, target = greedy(theta, psi, adm, n_adm, xn)
        q_xu = qval(theta, psi, x, u)
        D = cost[x, u] + gamma * target - q_xu
        if td_kind == RELATIVE:
            s = 0.0
            for i in range(d):
                s += theta[i] * nu_psi[i]
            D -= delta * s
        for i in range(d):
            u_vec[i] = psi[x, u, i]
            g_vec[i] = gamma * psi[xn, a_next, i] - psi[x, u, i]
            if td_kind == RELATIVE:
                g_vec[i] -= delta * nu_psi[i]

        if est_kind == PLAIN:
            alpha = step_size(sched[0], sched[1], sched[2], n1)
            for i in range(d):
                theta[i] += alpha * D * u_vec[i]
        elif est_kind == MATRIX_GAIN:
            c = tab_idx[x, u]
            counts[c] += 1
            alpha = step_size(sched[0], sched[1], sched[2], counts[c])
            theta[c] += alpha * D
        elif est_kind == FROZEN:
            bi = (n1 - 1) // batch_len
            if bi < fsum.shape[0]:
                for i in range(d):
                    fsum[bi, i] += D * u_vec[i]
        elif est_kind == ZAP:
            if n1 <= n_burn:
                for i in range(d):
                    for j in range(d):
                        Ahat[i, j] += u_vec[i] * g_vec[j] / n_burn
                if n1 == n_burn:
                    cond, sing, smin = refresh_inverse(Ahat, Ainv)
                    if smin < 1e-6:
                        for i in range(d):
                            Ahat[i, i] -= 1e-3
                        cond, sing, smin = refresh_inverse(Ahat, Ainv)
                    fstate[F_COND] = cond
                    istate[I_SINGULAR] += sing
            else:
                alpha = step_size(sched[0], sched[1], sched[2], n1)
                beta = step_size(sched[3], sched[4], sched[5], n1)
                for i in range(d):
                    for j in range(d):
                        Ahat[i, j] = (1.0 - beta) * Ahat[i, j] + beta * u_vec[i] * g_vec[j]
                ok = beta < 1.0
                if ok:
                    # Sherman-Morrison update of the inverse of (1-beta) A + beta u g^T
                    sc = 1.0 / (1.0 - beta)
                    for i in range(d):
                        s1 = 0.0
                        for j in range(d):
                            s1 += Ainv[i, j] * u_vec[j]
                        tmp[i] = sc * s1                     # B u
                    for j in range(d):
                        s2 = 0.0
                        for i in range(d):
                            s2 += g_vec[i] * Ainv[i, j]
                        tmp2[j] = sc * s2                    # g^T B
                    den = 1.0
                    for i in range(d):
                        den += beta * g_vec[i] * tmp[i]
                    if abs(den) < 1e-8:
                        ok = False
                    else:
                        for i in range(d):
                            for j in range(d):
                                Ainv[i, j] = sc * Ainv[i, j] - beta * tmp[i] * tmp2[j] / den
                if (not ok) or (refresh_every > 0 and (n1 - n_burn) % refresh_every == 0):
                    cond, sing, smin = refresh_inverse(Ahat, Ainv)
                    fstate[F_COND] = cond
                    istate[I_REFRESH] += 1
                    istate[I_SINGULAR] += sing
                for i in range(d):
                    s1 = 0.0
                    for j in range(d):
                        s1 += Ainv[i, j] * u_vec[j]
                    theta[i] -= alpha * D * s1
        elif est_kind == ZAPZERO:
            alpha = step_size(sched[0], sched[1], sched[2], n1)
            beta = step_size(sched[3], sched[4], sched[5], n1)
            uw = 0.0
            vtz = 0.0
            for i in range(d):
                uw += u_vec[i] * w[i]
                vtz += g_vec[i] * (theta[i] + z[i])
            # L w = M g (u . w)
            for i in range(d):
                if M_is_identity:
                    tmp[i] = g_vec[i] * uw
                else:
                    s1 = 0.0
                    for j in range(d):
                        s1 += M[i, j] * g_vec[j]
                    tmp[i] = s1 * uw
            for i in range(d):
                th_old = theta[i]
                theta[i] = th_old - alpha * (th_old + tmp[i])
                w[i] = w[i] - beta * u_vec[i] * (vtz - D)
                z[i] = z[i] - beta * (z[i] - tmp[i])

        # numerical checks and safeguard
        nrm2 = 0.0
        for i in range(d):
            nrm2 += theta[i] * theta[i]
        if not np.isfinite(nrm2):
            istate[I_STATUS] = STATUS_NAN
            istate[I_FAIL] = n1
            n = n1
            break
        nrm = np.sqrt(nrm2)
        if safeguard_radius > 0 and nrm > safeguard_radius:
            for i in range(d):
                theta[i] *= safeguard_radius / nrm
            if istate[I_EVENTS] == 0:
                istate[I_FIRST_EVENT] = n1
            istate[I_EVENTS] += 1
            nrm = safeguard_radius
        if nrm > fstate[F_MAXNORM]:
            fstate[F_MAXNORM] = nrm

        if td_kind != ON_POLICY:
            un = choose_action(pol_kind, eps, kappa0, nu_cdf, phi_cdf, theta, psi, adm, n_adm,
                               xn, unif[k, 1], unif[k, 2], work)
        x = xn
        u = un
        n = n1
        for i in range(d):
            pr_sum[i] += theta[i]
        p = istate[I_SNAP]
        if p < snap_n.shape[0] and snap_n[p] == n:
            for i in range(d):
                snap_theta[p, i] = theta[i]
                snap_pr[p, i] = pr_sum[i] / n
            snap_cond[p] = fstate[F_COND]
            istate[I_SNAP] = p + 1
    istate[I_X] = x
    istate[I_U] = u
    istate[I_N] = n

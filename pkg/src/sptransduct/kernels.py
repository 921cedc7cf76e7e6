"""Inner loops shared by the solvers.

Every function here is numba-compatible; :func:`~sptransduct._accel.kernel`
decides at call time whether the jitted or interpreted version runs.
Arrays must be float64 and C-contiguous.
"""

from __future__ import annotations

import numpy as np

from ._accel import kernel


@kernel
def soft_threshold(z, thresh):
    if z > thresh:
        return z - thresh
    if z < -thresh:
        return z + thresh
    return 0.0


@kernel
def gram_kkt_gap(G, c, beta, l1, l2):
    """Largest violation of the optimality conditions of the penalized quadratic.

    The objective is ``0.5 b'Gb - c'b + l1 |b|_1 + 0.5 l2 |b|^2``.
    """
    p = beta.shape[0]
    grad = G @ beta - c
    gap = 0.0
    for j in range(p):
        g = grad[j] + l2 * beta[j]
        if beta[j] > 0.0:
            viol = abs(g + l1)
        elif beta[j] < 0.0:
            viol = abs(g - l1)
        else:
            viol = abs(g) - l1
        if viol > gap:
            gap = viol
    return gap


@kernel
def lasso_cd_gram(G, c, l1, l2, beta, max_sweeps, tol_change, tol_kkt):
    """Cyclic coordinate descent on ``0.5 b'Gb - c'b + l1 |b|_1 + 0.5 l2 |b|^2``.

    ``beta`` is the warm start and is updated in place.  Returns
    ``(sweeps, kkt_gap, converged)``.
    """
    p = beta.shape[0]
    grad = G @ beta - c
    sweeps = 0
    converged = False
    gap = np.inf
    while sweeps < max_sweeps:
        sweeps += 1
        max_change = 0.0
        max_abs = 0.0
        for j in range(p):
            diag = G[j, j] + l2
            old = beta[j]
            if diag <= 0.0:
                new = 0.0
            else:
                z = old * G[j, j] - grad[j]
                if z > l1:
                    new = (z - l1) / diag
                elif z < -l1:
                    new = (z + l1) / diag
                else:
                    new = 0.0
            delta = new - old
            if delta != 0.0:
                for k in range(p):
                    grad[k] += delta * G[k, j]
                beta[j] = new
                if abs(delta) > max_change:
                    max_change = abs(delta)
            if abs(new) > max_abs:
                max_abs = abs(new)
        # cheap gap from the running gradient; confirmed below with a fresh one
        gap = 0.0
        for j in range(p):
            g = grad[j] + l2 * beta[j]
            if beta[j] > 0.0:
                viol = abs(g + l1)
            elif beta[j] < 0.0:
                viol = abs(g - l1)
            else:
                viol = abs(g) - l1
            if viol > gap:
                gap = viol
        if max_change <= tol_change * max(1.0, max_abs) or gap <= tol_kkt:
            grad = G @ beta - c
            gap = 0.0
            for j in range(p):
                g = grad[j] + l2 * beta[j]
                if beta[j] > 0.0:
                    viol = abs(g + l1)
                elif beta[j] < 0.0:
                    viol = abs(g - l1)
                else:
                    viol = abs(g) - l1
                if viol > gap:
                    gap = viol
            if gap <= tol_kkt or max_change == 0.0:
                converged = True
                break
    return sweeps, gap, converged


@kernel
def jm_admm(QT, Q, eig, x, lam, tik, rho, u, v, max_iter, tol_abs, tol_rel, check_every):
    """ADMM for ``min w'Sw + tik |w|^2  s.t.  |Sw - x|_inf <= lam``.

    ``S = Q diag(eig) Q'`` is the cached eigendecomposition.  The split is
    ``s = Sw`` with ``u`` the clamped copy of ``s`` and ``v`` the scaled dual.
    Iterates run in eigen-coordinates so a change of ``rho`` costs O(p).
    ``u`` and ``v`` are updated in place.

    Returns ``(w_eig, s, iters, rho, r_norm, d_norm, converged)`` where
    ``w_eig = Q'w``.
    """
    p = x.shape[0]
    lo = x - lam
    hi = x + lam
    fac = rho * eig / (2.0 * eig + 2.0 * tik + rho * eig * eig)
    w_eig = np.zeros(p)
    s = np.zeros(p)
    u_prev = u.copy()
    r_norm = np.inf
    d_norm = np.inf
    converged = False
    it = 0
    sqrt_p = np.sqrt(p)
    while it < max_iter:
        it += 1
        w_eig = fac * (QT @ (u - v))
        s = Q @ (eig * w_eig)
        if it % check_every == 0:
            for k in range(p):
                u_prev[k] = u[k]
        for k in range(p):
            t = s[k] + v[k]
            if t < lo[k]:
                t = lo[k]
            elif t > hi[k]:
                t = hi[k]
            u[k] = t
            v[k] += s[k] - t
        if it % check_every == 0:
            r_norm = np.sqrt(np.sum((s - u) ** 2))
            du = u - u_prev
            d_norm = rho * np.sqrt(np.sum((Q @ (eig * (QT @ du))) ** 2))
            s_norm = np.sqrt(np.sum(s ** 2))
            u_norm = np.sqrt(np.sum(u ** 2))
            y_norm = rho * np.sqrt(np.sum((Q @ (eig * (QT @ v))) ** 2))
            eps_pri = sqrt_p * tol_abs + tol_rel * max(s_norm, u_norm)
            eps_dual = sqrt_p * tol_abs + tol_rel * y_norm
            if r_norm <= eps_pri and d_norm <= eps_dual:
                converged = True
                break
            if r_norm > 10.0 * d_norm:
                rho *= 2.0
                for k in range(p):
                    v[k] *= 0.5
                fac = rho * eig / (2.0 * eig + 2.0 * tik + rho * eig * eig)
            elif d_norm > 10.0 * r_norm:
                rho *= 0.5
                for k in range(p):
                    v[k] *= 2.0
                fac = rho * eig / (2.0 * eig + 2.0 * tik + rho * eig * eig)
    return w_eig, s, it, rho, r_norm, d_norm, converged

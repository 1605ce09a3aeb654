"""Numba kernels for the forward recursions and their sensitivities.

Array conventions shared by all kernels:

- ``logf[t, j]``: log state-dependent density of observation t in state j.
- ``gam[t]``: transition matrix used for the step *into* time t
  (``gam[t0]`` of a segment is never touched, the segment starts from an
  initialization vector).
- Per-step scaling subtracts the row max of ``logf`` before exponentiating,
  so nothing underflows for any practical sequence length. Derivative
  kernels receive pre-scaled densities ``p = exp(logf - m)`` plus the shift
  ``m``; the shift is an additive constant, so sensitivities are exact.

Status codes: 0 = ok, 1 = zero/non-finite normalizer at the reported time.
"""

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_ZERO = 1


@njit(cache=True)
def seg_value(logf, gam, init, c0):
    """Scaled forward run over one segment.

    Log-likelihood contributions are accumulated for local times >= c0.
    Returns (status, t_bad, loglik, phi_final).
    """
    L, N = logf.shape
    phi = np.empty(N)
    u = np.empty(N)
    ll = 0.0
    for t in range(L):
        m = logf[t, 0]
        for j in range(1, N):
            if logf[t, j] > m:
                m = logf[t, j]
        if t == 0:
            for j in range(N):
                u[j] = init[j] * np.exp(logf[t, j] - m)
        else:
            for j in range(N):
                acc = 0.0
                for i in range(N):
                    acc += phi[i] * gam[t, i, j]
                u[j] = acc * np.exp(logf[t, j] - m)
        c = 0.0
        for j in range(N):
            c += u[j]
        if not (c > 0.0) or not np.isfinite(c):
            return STATUS_ZERO, t, np.nan, phi
        if t >= c0:
            ll += np.log(c) + m
        for j in range(N):
            phi[j] = u[j] / c
    return STATUS_OK, -1, ll, phi


@njit(cache=True)
def forward_filter(logf, gam, init):
    """Full forward pass storing every scaled forward variable.

    Returns (status, t_bad, loglik, phis (T,N), cs (T,)) where ``cs`` holds
    the per-step normalizers under the row-max scaling (used by the
    backward smoother with identical shifts).
    """
    T, N = logf.shape
    phis = np.empty((T, N))
    cs = np.empty(T)
    ll = 0.0
    u = np.empty(N)
    for t in range(T):
        m = logf[t, 0]
        for j in range(1, N):
            if logf[t, j] > m:
                m = logf[t, j]
        if t == 0:
            for j in range(N):
                u[j] = init[j] * np.exp(logf[t, j] - m)
        else:
            for j in range(N):
                acc = 0.0
                for i in range(N):
                    acc += phis[t - 1, i] * gam[t, i, j]
                u[j] = acc * np.exp(logf[t, j] - m)
        c = 0.0
        for j in range(N):
            c += u[j]
        if not (c > 0.0) or not np.isfinite(c):
            return STATUS_ZERO, t, np.nan, phis, cs
        ll += np.log(c) + m
        cs[t] = c
        for j in range(N):
            phis[t, j] = u[j] / c
    return STATUS_OK, -1, ll, phis, cs


@njit(cache=True)
def backward_smooth(logf, gam, phis, cs):
    """Scaled backward pass; returns row-normalized smoothing probabilities."""
    T, N = logf.shape
    post = np.empty((T, N))
    beta = np.ones(N)
    for j in range(N):
        post[T - 1, j] = phis[T - 1, j]
    for t in range(T - 2, -1, -1):
        m = logf[t + 1, 0]
        for j in range(1, N):
            if logf[t + 1, j] > m:
                m = logf[t + 1, j]
        nb = np.empty(N)
        for i in range(N):
            acc = 0.0
            for j in range(N):
                acc += gam[t + 1, i, j] * np.exp(logf[t + 1, j] - m) * beta[j]
            nb[i] = acc / cs[t + 1]
        s = 0.0
        for i in range(N):
            beta[i] = nb[i]
            post[t, i] = phis[t, i] * beta[i]
            s += post[t, i]
        for i in range(N):
            post[t, i] /= s
    return post


@njit(cache=True)
def viterbi_path(logf, loggam, loginit):
    """Most likely state sequence; ties resolve to the lower state index."""
    T, N = logf.shape
    delta = np.empty(N)
    ndelta = np.empty(N)
    psi = np.empty((T, N), dtype=np.int64)
    for j in range(N):
        delta[j] = loginit[j] + logf[0, j]
    for t in range(1, T):
        for j in range(N):
            best = -np.inf
            arg = 0
            for i in range(N):
                v = delta[i] + loggam[t, i, j]
                if v > best:
                    best = v
                    arg = i
            ndelta[j] = best + logf[t, j]
            psi[t, j] = arg
        for j in range(N):
            delta[j] = ndelta[j]
    states = np.empty(T, dtype=np.int64)
    best = -np.inf
    arg = 0
    for j in range(N):
        if delta[j] > best:
            best = delta[j]
            arg = j
    states[T - 1] = arg
    for t in range(T - 2, -1, -1):
        states[t] = psi[t + 1, states[t + 1]]
    return states


@njit(cache=True)
def tpm_sensitivity(gam, p, m, init, c0, att_rows, att_cols, order):
    """Segment forward run with derivatives w.r.t. per-time linear predictors.

    Scalar sigma = tau * na + a perturbs the softmax linear predictor of the
    transition-matrix entry (att_rows[a], att_cols[a]) used at local time tau.
    The entry at tau = 0 is inert (no transition into the first time of a
    segment), so scalars below na stay identically zero. order: 0 value,
    1 gradient, 2 gradient + Hessian.

    Sensitivities are propagated only over the active window [na, hi), where
    hi grows with tau; a pair of scalars costs work only once both have
    entered the recursion.

    Returns (status, t_bad, ll, grad (q,), hess (q, q)).
    """
    L, N = p.shape
    nr = N - 1  # sensitivities of phi sum to 0, so component N-1 is implied
    na = att_rows.shape[0]
    q = L * na
    ll = 0.0
    grad = np.zeros(q)
    hess = np.zeros((q, q))
    phi = np.empty(N)
    u = np.empty(N)
    dphi = np.zeros((q, nr))
    du = np.zeros((q, nr))
    dc = np.zeros(q)
    d2phi = np.zeros((q, q, nr))
    d2u = np.zeros((q, q, nr))
    d2c = np.zeros((q, q))
    mdiff = np.empty((nr, nr))
    mrowsum = np.empty(nr)
    drp = np.empty((na, nr))
    sdr = np.empty(na)
    d2row = np.empty(N)

    for tau in range(L):
        lo = na  # time-0 scalars are inert
        prev_hi = tau * na if tau > 0 else 0  # entered strictly before tau
        hi = (tau + 1) * na if tau > 0 else 0  # entered up to tau
        if tau == 0:
            for j in range(N):
                u[j] = init[j] * p[0, j]
        else:
            g = gam[tau]
            for j in range(N):
                acc = 0.0
                for i in range(N):
                    acc += phi[i] * g[i, j]
                u[j] = acc * p[tau, j]
            if order >= 1:
                # reduced transition: row differences against state N-1
                for i in range(nr):
                    acc = 0.0
                    for j in range(N):
                        acc += (g[i, j] - g[nr, j]) * p[tau, j]
                    mrowsum[i] = acc
                    for j in range(nr):
                        mdiff[i, j] = (g[i, j] - g[nr, j]) * p[tau, j]
                for s in range(lo, prev_hi):
                    accc = 0.0
                    for i in range(nr):
                        accc += dphi[s, i] * mrowsum[i]
                    dc[s] = accc
                    for j in range(nr):
                        acc = 0.0
                        for i in range(nr):
                            acc += dphi[s, i] * mdiff[i, j]
                        du[s, j] = acc
            if order >= 2:
                for s in range(lo, prev_hi):
                    for s2 in range(s, prev_hi):
                        accc = 0.0
                        for i in range(nr):
                            accc += d2phi[s, s2, i] * mrowsum[i]
                        d2c[s, s2] = accc
                        for j in range(nr):
                            acc = 0.0
                            for i in range(nr):
                                acc += d2phi[s, s2, i] * mdiff[i, j]
                            d2u[s, s2, j] = acc
            # direct perturbations of the current transition matrix
            if order >= 1:
                for a in range(na):
                    s = tau * na + a
                    ia = att_rows[a]
                    ja = att_cols[a]
                    acc = 0.0
                    for j in range(N):
                        ind = 1.0 if j == ja else 0.0
                        val = g[ia, j] * (ind - g[ia, ja]) * p[tau, j]
                        acc += val
                        if j < nr:
                            drp[a, j] = val
                    sdr[a] = acc
                    dc[s] = phi[ia] * sdr[a]
                    for j in range(nr):
                        du[s, j] = phi[ia] * drp[a, j]
                if order >= 2:
                    for a in range(na):
                        s = tau * na + a
                        ia = att_rows[a]
                        for s2 in range(lo, prev_hi):
                            if ia < nr:
                                dval = dphi[s2, ia]
                            else:
                                dval = 0.0
                                for i in range(nr):
                                    dval -= dphi[s2, i]
                            d2c[s2, s] = dval * sdr[a]
                            for j in range(nr):
                                d2u[s2, s, j] = dval * drp[a, j]
                        for a2 in range(a, na):
                            s2 = tau * na + a2
                            d2c[s, s2] = 0.0
                            for j in range(nr):
                                d2u[s, s2, j] = 0.0
                            ib = att_rows[a2]
                            if ib != ia:
                                continue
                            ja = att_cols[a]
                            jb = att_cols[a2]
                            for j in range(N):
                                inda = 1.0 if j == ja else 0.0
                                indb = 1.0 if j == jb else 0.0
                                indab = 1.0 if ja == jb else 0.0
                                d2row[j] = g[ia, j] * (
                                    (inda - g[ia, ja]) * (indb - g[ia, jb])
                                    - g[ia, jb] * (indab - g[ia, ja])
                                )
                            acc = 0.0
                            for j in range(N):
                                val = phi[ia] * d2row[j] * p[tau, j]
                                acc += val
                                if j < nr:
                                    d2u[s, s2, j] += val
                            d2c[s, s2] += acc
        c = 0.0
        for j in range(N):
            c += u[j]
        if not (c > 0.0) or not np.isfinite(c):
            return STATUS_ZERO, tau, np.nan, grad, hess
        if tau >= c0:
            ll += np.log(c) + m[tau]
            if order >= 1:
                for s in range(lo, hi):
                    grad[s] += dc[s] / c
                if order >= 2:
                    for s in range(lo, hi):
                        for s2 in range(s, hi):
                            hess[s, s2] += d2c[s, s2] / c - dc[s] * dc[s2] / (c * c)
        # normalize state and sensitivities
        for j in range(N):
            phi[j] = u[j] / c
        if order >= 1:
            for s in range(lo, hi):
                for j in range(nr):
                    dphi[s, j] = (du[s, j] - phi[j] * dc[s]) / c
            if order >= 2:
                for s in range(lo, hi):
                    for s2 in range(s, hi):
                        for j in range(nr):
                            d2phi[s, s2, j] = (
                                d2u[s, s2, j] / c
                                - (du[s, j] * dc[s2] + du[s2, j] * dc[s]) / (c * c)
                                - phi[j] * d2c[s, s2] / c
                                + 2.0 * phi[j] * dc[s] * dc[s2] / (c * c)
                            )
    for s in range(q):
        for s2 in range(s + 1, q):
            hess[s2, s] = hess[s, s2]
    return STATUS_OK, -1, ll, grad, hess


@njit(cache=True)
def emission_sensitivity(gam, p, m, dlf, d2lf, init, c0, order):
    """Segment forward run with derivatives w.r.t. the observed sequence.

    Scalar 0 is the observation immediately before the segment (it enters
    through autoregressive emission terms); scalar 1 + tau is the segment's
    observation at local time tau, so q = L + 1. ``dlf[tau, j, 0]`` is the
    log-density derivative w.r.t. the previous observation, ``dlf[tau, j, 1]``
    w.r.t. the current one; ``d2lf[tau, j, :]`` holds (prev-prev, prev-cur,
    cur-cur) second derivatives.

    Returns (status, t_bad, ll, grad (q,), hess (q, q)).
    """
    L, N = p.shape
    q = L + 1
    ll = 0.0
    grad = np.zeros(q)
    hess = np.zeros((q, q))
    phi = np.empty(N)
    w = np.empty(N)
    u = np.empty(N)
    dphi = np.zeros((q, N))
    dwg = np.zeros((q, N))
    du = np.zeros((q, N))
    dc = np.zeros(q)
    d2phi = np.zeros((q, q, N))
    d2u = np.zeros((q, q, N))
    d2c = np.zeros((q, q))

    for tau in range(L):
        sp = tau      # scalar index of the previous observation
        sx = tau + 1  # scalar index of the current observation
        if tau == 0:
            for j in range(N):
                w[j] = init[j]
        else:
            g = gam[tau]
            for j in range(N):
                acc = 0.0
                for i in range(N):
                    acc += phi[i] * g[i, j]
                w[j] = acc
            if order >= 1:
                for s in range(q):
                    for j in range(N):
                        acc = 0.0
                        for i in range(N):
                            acc += dphi[s, i] * g[i, j]
                        dwg[s, j] = acc
        for j in range(N):
            u[j] = w[j] * p[tau, j]
        if order >= 1:
            if tau == 0:
                for s in range(q):
                    for j in range(N):
                        du[s, j] = 0.0
            else:
                for s in range(q):
                    for j in range(N):
                        du[s, j] = dwg[s, j] * p[tau, j]
            if order >= 2:
                if tau == 0:
                    for s in range(q):
                        for s2 in range(s, q):
                            for j in range(N):
                                d2u[s, s2, j] = 0.0
                else:
                    g = gam[tau]
                    for s in range(q):
                        for s2 in range(s, q):
                            for j in range(N):
                                acc = 0.0
                                for i in range(N):
                                    acc += d2phi[s, s2, i] * g[i, j]
                                d2u[s, s2, j] = acc * p[tau, j]
            # direct emission perturbations at this time
            for which in range(2):
                sl = sp if which == 0 else sx
                for j in range(N):
                    du[sl, j] += u[j] * dlf[tau, j, which]
                if order >= 2 and tau > 0:
                    for s2 in range(q):
                        lo = sl if sl < s2 else s2
                        hi = s2 if sl < s2 else sl
                        fac = 2.0 if s2 == sl else 1.0
                        for j in range(N):
                            d2u[lo, hi, j] += (
                                fac * dwg[s2, j] * p[tau, j] * dlf[tau, j, which]
                            )
            if order >= 2:
                for j in range(N):
                    d2u[sp, sp, j] += u[j] * (
                        dlf[tau, j, 0] * dlf[tau, j, 0] + d2lf[tau, j, 0]
                    )
                    d2u[sp, sx, j] += u[j] * (
                        dlf[tau, j, 0] * dlf[tau, j, 1] + d2lf[tau, j, 1]
                    )
                    d2u[sx, sx, j] += u[j] * (
                        dlf[tau, j, 1] * dlf[tau, j, 1] + d2lf[tau, j, 2]
                    )
        c = 0.0
        for j in range(N):
            c += u[j]
        if not (c > 0.0) or not np.isfinite(c):
            return STATUS_ZERO, tau, np.nan, grad, hess
        if order >= 1:
            for s in range(q):
                acc = 0.0
                for j in range(N):
                    acc += du[s, j]
                dc[s] = acc
            if order >= 2:
                for s in range(q):
                    for s2 in range(s, q):
                        acc = 0.0
                        for j in range(N):
                            acc += d2u[s, s2, j]
                        d2c[s, s2] = acc
        if tau >= c0:
            ll += np.log(c) + m[tau]
            if order >= 1:
                for s in range(q):
                    grad[s] += dc[s] / c
                if order >= 2:
                    for s in range(q):
                        for s2 in range(s, q):
                            hess[s, s2] += d2c[s, s2] / c - dc[s] * dc[s2] / (c * c)
        for j in range(N):
            phi[j] = u[j] / c
        if order >= 1:
            for s in range(q):
                for j in range(N):
                    dphi[s, j] = (du[s, j] - phi[j] * dc[s]) / c
            if order >= 2:
                for s in range(q):
                    for s2 in range(s, q):
                        for j in range(N):
                            d2phi[s, s2, j] = (
                                d2u[s, s2, j] / c
                                - (du[s, j] * dc[s2] + du[s2, j] * dc[s]) / (c * c)
                                - phi[j] * d2c[s, s2] / c
                                + 2.0 * phi[j] * dc[s] * dc[s2] / (c * c)
                            )
    for s in range(q):
        for s2 in range(s + 1, q):
            hess[s2, s] = hess[s, s2]
    return STATUS_OK, -1, ll, grad, hess


@njit(cache=True)
def add_band_block(bands, hseg, offset):
    """Accumulate a dense symmetric block into LAPACK lower band storage."""
    qq = hseg.shape[0]
    for sj in range(qq):
        for si in range(sj, qq):
            bands[si - sj, sj + offset] += hseg[si, sj]


@njit(cache=True)
def scatter_lower(data, hloc, pos):
    """Accumulate a dense symmetric block into CSR data at precomputed slots."""
    nl = hloc.shape[0]
    for a in range(nl):
        for b in range(a + 1):
            data[pos[a, b]] += hloc[a, b]

"""Compiled inner loops for the detectors.

Each ``*_advance`` kernel consumes rows of ``X`` in order, mutates the state
arrays in place, writes the alarm-eligible statistic for each row to ``out``
(``-inf`` while no alarm is possible) and returns the number of rows
consumed.  It stops right after the first row whose eligible statistic
exceeds ``level``.

Plug-in estimates are never materialized.  A window (or SRRS start) is
summarized by its observation sum ``S`` over ``c`` samples; given the new
observation ``x`` the log-likelihood increment ``th.x - |th|^2 / 2`` follows
from the scalars ``|S|^2``, ``S.x``, ``Q'S``, ``Q'x``, ``mu.S`` and ``mu.x``
where ``Q`` is an orthonormal basis of the target subspace and ``mu`` the
target offset (orthogonal to ``Q``).

Estimator codes: 0 = sample mean, 1 = James-Stein, 2 = target projection.

Window-limited kernels take a ``hold`` flag: when set, a window's statistic
stays at zero until the window is full; otherwise the statistic already
accumulates during warm-up using every earlier observation.
"""

import math

import numpy as np
from numba import njit

_FM = {"reassoc", "contract", "arcp", "nsz"}

ML, JS, TARGET = 0, 1, 2


@njit(cache=True, fastmath=_FM)
def llr_from_sums(c, w_eff, sq, qq, qdot, mus, mux, sx, code, pp, shrink, musq):
    inv = 1.0 / c
    mxb = mus * inv
    tt = musq + qq * inv * inv
    tx = mux + qdot * inv
    ee = (sq - qq) * inv * inv - 2.0 * mxb + musq
    ex = (sx - qdot) * inv - mux
    te = mxb - musq
    if code == ML:
        a = 1.0
    elif code == TARGET:
        a = 0.0
    elif ee > 0.0 and w_eff > 0.0:
        a = 1.0 - shrink / (w_eff * ee)
        if pp and a < 0.0:
            a = 0.0
    else:
        a = 0.0
    return tx + a * ex - 0.5 * (tt + 2.0 * a * te + a * a * ee)


@njit(cache=True, fastmath=_FM)
def _project(Q, mu, x, qx):
    K = x.shape[0]
    for j in range(Q.shape[1]):
        acc = 0.0
        for k in range(K):
            acc += Q[k, j] * x[k]
        qx[j] = acc
    mux = 0.0
    for k in range(K):
        mux += mu[k] * x[k]
    return mux


@njit(cache=True, fastmath=_FM)
def cusum_advance(theta, half_sq, X, fst, level, out):
    W = fst[0]
    m, K = X.shape
    for i in range(m):
        dot = 0.0
        for k in range(K):
            dot += theta[k] * X[i, k]
        if W < 0.0:
            W = 0.0
        W = W + dot - half_sq
        out[i] = W
        if W > level:
            fst[0] = W
            return i + 1
    fst[0] = W
    return m


@njit(cache=True, fastmath=_FM)
def wl_advance(buf, qbuf, mbuf, S, qS, fst, ist, Q, mu, musq, code, pp, shrink, hold, X, level, out, raw):
    m, K = X.shape
    d = Q.shape[1]
    wnd = buf.shape[0]
    stat = fst[0]
    mS = fst[1]
    n = ist[0]
    head = ist[1]
    qx = np.empty(d)
    for i in range(m):
        x = X[i]
        n += 1
        c = min(n - 1, wnd)
        mux = _project(Q, mu, x, qx)
        llr = 0.0
        if c > 0 and (c == wnd or not hold):
            sq = 0.0
            sx = 0.0
            for k in range(K):
                sq += S[k] * S[k]
                sx += S[k] * x[k]
            qq = 0.0
            qdot = 0.0
            for j in range(d):
                qq += qS[j] * qS[j]
                qdot += qS[j] * qx[j]
            llr = llr_from_sums(c, c, sq, qq, qdot, mS, mux, sx, code, pp, shrink, musq)
        if stat < 0.0:
            stat = 0.0
        stat += llr
        raw[i] = stat
        if c == wnd:
            for k in range(K):
                S[k] -= buf[head, k]
            for j in range(d):
                qS[j] -= qbuf[head, j]
            mS -= mbuf[head]
        for k in range(K):
            S[k] += x[k]
            buf[head, k] = x[k]
        for j in range(d):
            qS[j] += qx[j]
            qbuf[head, j] = qx[j]
        mS += mux
        mbuf[head] = mux
        head += 1
        if head == wnd:
            head = 0
        if n > wnd:
            out[i] = stat
            if stat > level:
                fst[0] = stat
                fst[1] = mS
                ist[0] = n
                ist[1] = head
                return i + 1
        else:
            out[i] = -np.inf
    fst[0] = stat
    fst[1] = mS
    ist[0] = n
    ist[1] = head
    return m


@njit(cache=True, fastmath=_FM)
def parallel_wl_advance(buf, qbuf, mbuf, stats, ist, wins, Q, mu, musq, code, pp, shrink, hold, X, level,
                        out, raw):
    m, K = X.shape
    d = Q.shape[1]
    wmax = buf.shape[0]
    nwin = wins.shape[0]
    n = ist[0]
    head = ist[1]
    qx = np.empty(d)
    s = np.empty(K)
    qs = np.empty(d)
    for i in range(m):
        x = X[i]
        n += 1
        mux = _project(Q, mu, x, qx)
        avail = min(n - 1, wmax)
        for k in range(K):
            s[k] = 0.0
        for j in range(d):
            qs[j] = 0.0
        ms = 0.0
        idx = 0
        best = -np.inf
        top = -np.inf
        llr_last = 0.0
        for cnt in range(1, avail + 1):
            slot = head - cnt
            if slot < 0:
                slot += wmax
            want = (idx < nwin and wins[idx] == cnt) or (cnt == avail and not hold)
            if want:
                sq = 0.0
                sx = 0.0
                for k in range(K):
                    v = s[k] + buf[slot, k]
                    s[k] = v
                    sq += v * v
                    sx += v * x[k]
                qq = 0.0
                qdot = 0.0
                for j in range(d):
                    v = qs[j] + qbuf[slot, j]
                    qs[j] = v
                    qq += v * v
                    qdot += v * qx[j]
                ms += mbuf[slot]
                llr = llr_from_sums(cnt, cnt, sq, qq, qdot, ms, mux, sx, code, pp, shrink, musq)
                if cnt == avail:
                    llr_last = llr
                while idx < nwin and wins[idx] == cnt:
                    v = stats[idx]
                    if v < 0.0:
                        v = 0.0
                    v += llr
                    stats[idx] = v
                    if v > best:
                        best = v
                    idx += 1
            else:
                for k in range(K):
                    s[k] += buf[slot, k]
                for j in range(d):
                    qs[j] += qbuf[slot, j]
                ms += mbuf[slot]
        if not hold:
            while idx < nwin:
                v = stats[idx]
                if v < 0.0:
                    v = 0.0
                v += llr_last
                stats[idx] = v
                idx += 1
        for idx2 in range(nwin):
            if stats[idx2] > top:
                top = stats[idx2]
        raw[i] = top
        for k in range(K):
            buf[head, k] = x[k]
        for j in range(d):
            qbuf[head, j] = qx[j]
        mbuf[head] = mux
        head += 1
        if head == wmax:
            head = 0
        out[i] = best
        if best > level:
            ist[0] = n
            ist[1] = head
            return i + 1
    ist[0] = n
    ist[1] = head
    return m


@njit(cache=True, fastmath=_FM)
def glr_advance(buf, ist, X, level, out):
    m, K = X.shape
    wmax = buf.shape[0]
    n = ist[0]
    head = ist[1]
    s = np.empty(K)
    for i in range(m):
        n += 1
        for k in range(K):
            buf[head, k] = X[i, k]
        head += 1
        if head == wmax:
            head = 0
        avail = min(n, wmax)
        for k in range(K):
            s[k] = 0.0
        best = -np.inf
        for cnt in range(1, avail + 1):
            slot = head - cnt
            if slot < 0:
                slot += wmax
            sq = 0.0
            for k in range(K):
                v = s[k] + buf[slot, k]
                s[k] = v
                sq += v * v
            v = 0.5 * sq / cnt
            if v > best:
                best = v
        out[i] = best
        if best > level:
            ist[0] = n
            ist[1] = head
            return i + 1
    ist[0] = n
    ist[1] = head
    return m


@njit(cache=True)
def _srrs_compact(H, HQ, HM, SQ, L, T, alive, nrows):
    dst = 0
    for r in range(nrows):
        if alive[r]:
            if dst != r:
                H[dst, :] = H[r, :]
                HQ[dst, :] = HQ[r, :]
                HM[dst] = HM[r]
                SQ[dst] = SQ[r]
                L[dst] = L[r]
                T[dst] = T[r]
                alive[dst] = True
            dst += 1
    for r in range(dst, nrows):
        alive[r] = False
    return dst


@njit(cache=True, fastmath=_FM)
def srrs_advance(H, HQ, HM, SQ, L, T, alive, C, gq, fst, ist,
                 Q, mu, musq, code, pp, shrink, literal, delta, X, level, out):
    """Robbins-Siegmund statistic over all live start times.

    Row ``r`` of ``H`` holds the prefix sum ``C_{t-1}`` for start ``t = T[r]``
    so the start's window sum is ``C_{n-1} - C_{t-1}``; ``SQ[r]`` tracks its
    squared norm and ``L[r]`` the log likelihood ratio accumulated since ``t``.
    """
    m, K = X.shape
    d = Q.shape[1]
    gm = fst[0]
    n = ist[0]
    nrows = ist[1]
    ndead = ist[2]
    qx = np.empty(d)
    for i in range(m):
        x = X[i]
        n += 1
        mux = _project(Q, mu, x, qx)
        xx = 0.0
        gx = 0.0
        for k in range(K):
            xx += x[k] * x[k]
            gx += C[k] * x[k]
        lmax = 0.0
        lse_m = 0.0
        lse_s = 1.0  # the new start contributes exp(0)
        for r in range(nrows):
            if not alive[r]:
                continue
            c = n - T[r]
            hx = 0.0
            for k in range(K):
                hx += H[r, k] * x[k]
            sx = gx - hx
            qq = 0.0
            qdot = 0.0
            for j in range(d):
                v = gq[j] - HQ[r, j]
                qq += v * v
                qdot += v * qx[j]
            w_eff = c - 1.0 if literal else 1.0 * c
            lr = L[r] + llr_from_sums(c, w_eff, SQ[r], qq, qdot, gm - HM[r], mux, sx,
                                      code, pp, shrink, musq)
            L[r] = lr
            SQ[r] += 2.0 * sx + xx
            if lr > lse_m:
                lse_s = lse_s * math.exp(lse_m - lr) + 1.0
                lse_m = lr
            else:
                lse_s += math.exp(lr - lse_m)
            if lr > lmax:
                lmax = lr
        r = nrows
        for k in range(K):
            H[r, k] = C[k]
        for j in range(d):
            HQ[r, j] = gq[j]
        HM[r] = gm
        SQ[r] = xx
        L[r] = 0.0
        T[r] = n
        alive[r] = True
        nrows += 1
        for k in range(K):
            C[k] += x[k]
        for j in range(d):
            gq[j] += qx[j]
        gm += mux
        agg = lse_m + math.log(lse_s)
        out[i] = agg
        if delta > 0.0:
            cut = lmax - delta
            for r in range(nrows):
                if alive[r] and L[r] < cut:
                    alive[r] = False
                    ndead += 1
            if 2 * ndead > nrows:
                nrows = _srrs_compact(H, HQ, HM, SQ, L, T, alive, nrows)
                ndead = 0
        if agg > level:
            fst[0] = gm
            ist[0] = n
            ist[1] = nrows
            ist[2] = ndead
            return i + 1
    fst[0] = gm
    ist[0] = n
    ist[1] = nrows
    ist[2] = ndead
    return m

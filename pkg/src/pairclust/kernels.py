"""Hot numerical kernels: the mixed-model profiled likelihood and its optimizer.

The likelihood of the pair-level mixed model factorizes exactly into a
within-cluster residual chi-square part plus, per pair, a bivariate normal of
the two cluster means. Fixed effects are profiled out by generalized least
squares inside the objective, leaving four free parameters

    theta = (log sig_eps2, log sig_tau2, log sig_alpha2, atanh(rho)),

where rho is the correlation between the pair intercept and the pair effect.
This parameterization keeps every trial point inside the positive
semidefinite region, so the optimizer never sees an invalid covariance.

`lmm_profile_nll` evaluates the objective at one point; `lmm_fit` runs a
Nelder-Mead search from several starts with the same objective inlined as a
closure (inlining keeps the compiled search self-contained and disk-cachable;
a test pins the two copies to bit-identical values). Both exist in two
builds: a numba-compiled one and a pure numpy/python one from the same
source. Set PAIRCLUST_NO_NUMBA=1 before import to select the fallback; the
module attributes `lmm_profile_nll_python` and `lmm_fit_python` always hold
the plain builds so the benchmark can compare the two paths in one process.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    njit = None
    _HAS_NUMBA = False

_DISABLED = os.environ.get("PAIRCLUST_NO_NUMBA", "").strip().lower() in {"1", "true", "yes"}
NUMBA_ENABLED = _HAS_NUMBA and not _DISABLED

_LOG_2PI = 1.8378770664093453
_BIG = 1.0e300


def _profile_nll_body(theta, ybar, nvec, tvec, M, sstot, dfw, lognsum):
    """Negative profiled log-likelihood at theta.

    ybar, nvec, tvec: (K, 2) cluster means, sizes (as floats), treatment.
    M: (K, 2, P) fixed-effect design rows per cluster, treatment column last.
    sstot: total within-cluster sum of squares; dfw: N - 2K;
    lognsum: sum of log cluster sizes.
    """
    K = ybar.shape[0]
    P = M.shape[2]
    se2 = math.exp(theta[0])
    st2 = math.exp(theta[1])
    sa2 = math.exp(theta[2])
    rho = math.tanh(theta[3])
    sat = rho * math.sqrt(st2 * sa2)
    bump = st2 + 2.0 * sat

    total = 0.5 * (dfw * (_LOG_2PI + theta[0]) + sstot / se2 + lognsum)

    A = np.zeros((P, P))
    b = np.zeros(P)
    c = 0.0
    for k in range(K):
        v1 = sa2 + tvec[k, 0] * bump + se2 / nvec[k, 0]
        v2 = sa2 + tvec[k, 1] * bump + se2 / nvec[k, 1]
        cv = sa2 + sat
        det = v1 * v2 - cv * cv
        if not (det > 0.0):
            return _BIG
        i11 = v2 / det
        i22 = v1 / det
        i12 = -cv / det
        y1 = ybar[k, 0]
        y2 = ybar[k, 1]
        total += 0.5 * (2.0 * _LOG_2PI + math.log(det))
        c += y1 * (i11 * y1 + i12 * y2) + y2 * (i12 * y1 + i22 * y2)
        for p in range(P):
            w1 = i11 * M[k, 0, p] + i12 * M[k, 1, p]
            w2 = i12 * M[k, 0, p] + i22 * M[k, 1, p]
            b[p] += w1 * y1 + w2 * y2
            for q in range(P):
                A[p, q] += w1 * M[k, 0, q] + w2 * M[k, 1, q]

    # solve A gamma = b by Gaussian elimination with partial pivoting;
    # keep the untouched b for the profiled quadratic c - b.gamma
    b0 = b.copy()
    gamma = np.zeros(P)
    for col in range(P):
        piv = col
        best = abs(A[col, col])
        for r in range(col + 1, P):
            mag = abs(A[r, col])
            if mag > best:
                best = mag
                piv = r
        if best <= 0.0 or not math.isfinite(best):
            return _BIG
        if piv != col:
            for cc in range(P):
                tmp = A[col, cc]
                A[col, cc] = A[piv, cc]
                A[piv, cc] = tmp
            tmp = b[col]
            b[col] = b[piv]
            b[piv] = tmp
        inv = 1.0 / A[col, col]
        for r in range(col + 1, P):
            f = A[r, col] * inv
            if f != 0.0:
                for cc in range(col, P):
                    A[r, cc] -= f * A[col, cc]
                b[r] -= f * b[col]
    for r in range(P - 1, -1, -1):
        s = b[r]
        for cc in range(r + 1, P):
            s -= A[r, cc] * gamma[cc]
        gamma[r] = s / A[r, r]

    quad = c
    for p in range(P):
        quad -= b0[p] * gamma[p]
    total += 0.5 * quad
    if not math.isfinite(total):
        return _BIG
    return total


def _fit_body(ybar, nvec, tvec, M, sstot, dfw, lognsum, starts, fatol, maxfev):
    """Nelder-Mead over theta from each start; returns the overall best.

    starts: (S, 4) initial points. Convergence: function-value spread of the
    simplex at or below fatol within maxfev evaluations per start. Returns
    (best_theta, best_nll, total_evaluations, converged_flag). The objective
    below must stay line-for-line in step with _profile_nll_body.
    """

    def nll(theta):
        K = ybar.shape[0]
        P = M.shape[2]
        se2 = math.exp(theta[0])
        st2 = math.exp(theta[1])
        sa2 = math.exp(theta[2])
        rho = math.tanh(theta[3])
        sat = rho * math.sqrt(st2 * sa2)
        bump = st2 + 2.0 * sat

        total = 0.5 * (dfw * (_LOG_2PI + theta[0]) + sstot / se2 + lognsum)

        A = np.zeros((P, P))
        b = np.zeros(P)
        c = 0.0
        for k in range(K):
            v1 = sa2 + tvec[k, 0] * bump + se2 / nvec[k, 0]
            v2 = sa2 + tvec[k, 1] * bump + se2 / nvec[k, 1]
            cv = sa2 + sat
            det = v1 * v2 - cv * cv
            if not (det > 0.0):
                return _BIG
            i11 = v2 / det
            i22 = v1 / det
            i12 = -cv / det
            y1 = ybar[k, 0]
            y2 = ybar[k, 1]
            total += 0.5 * (2.0 * _LOG_2PI + math.log(det))
            c += y1 * (i11 * y1 + i12 * y2) + y2 * (i12 * y1 + i22 * y2)
            for p in range(P):
                w1 = i11 * M[k, 0, p] + i12 * M[k, 1, p]
                w2 = i12 * M[k, 0, p] + i22 * M[k, 1, p]
                b[p] += w1 * y1 + w2 * y2
                for q in range(P):
                    A[p, q] += w1 * M[k, 0, q] + w2 * M[k, 1, q]

        b0 = b.copy()
        gamma = np.zeros(P)
        for col in range(P):
            piv = col
            best = abs(A[col, col])
            for r in range(col + 1, P):
                mag = abs(A[r, col])
                if mag > best:
                    best = mag
                    piv = r
            if best <= 0.0 or not math.isfinite(best):
                return _BIG
            if piv != col:
                for cc in range(P):
                    tmp = A[col, cc]
                    A[col, cc] = A[piv, cc]
                    A[piv, cc] = tmp
                tmp = b[col]
                b[col] = b[piv]
                b[piv] = tmp
            inv = 1.0 / A[col, col]
            for r in range(col + 1, P):
                f = A[r, col] * inv
                if f != 0.0:
                    for cc in range(col, P):
                        A[r, cc] -= f * A[col, cc]
                    b[r] -= f * b[col]
        for r in range(P - 1, -1, -1):
            s = b[r]
            for cc in range(r + 1, P):
                s -= A[r, cc] * gamma[cc]
            gamma[r] = s / A[r, r]

        quad = c
        for p in range(P):
            quad -= b0[p] * gamma[p]
        total += 0.5 * quad
        if not math.isfinite(total):
            return _BIG
        return total

    n = 4
    best_x = starts[0].copy()
    best_f = _BIG
    total_eval = 0
    converged = 0

    for s in range(starts.shape[0]):
        sim = np.empty((n + 1, n))
        fs = np.empty(n + 1)
        for i in range(n):
            sim[0, i] = starts[s, i]
        for v in range(1, n + 1):
            for i in range(n):
                sim[v, i] = starts[s, i]
            sim[v, v - 1] += 0.25
        for v in range(n + 1):
            fs[v] = nll(sim[v])
        n_eval = n + 1

        while n_eval < maxfev:
            order = np.argsort(fs)
            sim2 = np.empty_like(sim)
            fs2 = np.empty_like(fs)
            for v in range(n + 1):
                sim2[v] = sim[order[v]]
                fs2[v] = fs[order[v]]
            sim = sim2
            fs = fs2
            if fs[n] - fs[0] <= fatol:
                converged = 1
                break

            cent = np.zeros(n)
            for v in range(n):
                for i in range(n):
                    cent[i] += sim[v, i]
            for i in range(n):
                cent[i] /= n

            xr = 2.0 * cent - sim[n]
            fr = nll(xr)
            n_eval += 1
            shrink = False
            if fr < fs[0]:
                xe = 3.0 * cent - 2.0 * sim[n]
                fe = nll(xe)
                n_eval += 1
                if fe < fr:
                    sim[n] = xe
                    fs[n] = fe
                else:
                    sim[n] = xr
                    fs[n] = fr
            elif fr < fs[n - 1]:
                sim[n] = xr
                fs[n] = fr
            elif fr < fs[n]:
                xc = cent + 0.5 * (xr - cent)
                fc = nll(xc)
                n_eval += 1
                if fc <= fr:
                    sim[n] = xc
                    fs[n] = fc
                else:
                    shrink = True
            else:
                xc = cent - 0.5 * (cent - sim[n])
                fc = nll(xc)
                n_eval += 1
                if fc < fs[n]:
                    sim[n] = xc
                    fs[n] = fc
                else:
                    shrink = True
            if shrink:
                for v in range(1, n + 1):
                    for i in range(n):
                        sim[v, i] = sim[0, i] + 0.5 * (sim[v, i] - sim[0, i])
                    fs[v] = nll(sim[v])
                n_eval += n

        total_eval += n_eval
        for v in range(n + 1):
            if fs[v] < best_f:
                best_f = fs[v]
                best_x = sim[v].copy()

    ok = 1 if (converged == 1 and best_f < _BIG) else 0
    return best_x, best_f, total_eval, ok


lmm_profile_nll_python = _profile_nll_body
lmm_fit_python = _fit_body

if NUMBA_ENABLED:
    lmm_profile_nll = njit(cache=True)(_profile_nll_body)
    lmm_fit = njit(cache=True)(_fit_body)
else:
    lmm_profile_nll = lmm_profile_nll_python
    lmm_fit = lmm_fit_python

"""Hot inner loops, each in a numba and a pure-numpy flavour.

The factor-model EM, per-unit loading regressions and the retrospective row
expansion touch every cell of an N x T panel on every pass. The numba versions
fuse masking, filling and reductions into single passes so no N x T
temporaries are allocated. Set ``CAUSALPANEL_DISABLE_NUMBA=1`` to force the numpy path (useful
for debugging and for platforms without numba); both paths are tested for
agreement and compared in ``benchmarks/bench_kernels.py``.

All numba kernels are serial: reductions run in a fixed order so results do not
depend on thread count.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("CAUSALPANEL_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag in CI
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# EM fill: R = where(mask, Y - XB - alpha_i - xi_t, LF)
# ---------------------------------------------------------------------------


def em_fill_numpy(Y, mask, LF, XB, alpha, xi, out):
    out[...] = np.where(mask, Y - XB - alpha[:, None] - xi[None, :], LF)
    return out


@njit(cache=True)
def em_fill_numba(Y, mask, LF, XB, alpha, xi, out):
    n, t = Y.shape
    for i in range(n):
        a = alpha[i]
        for j in range(t):
            if mask[i, j]:
                out[i, j] = Y[i, j] - XB[i, j] - a - xi[j]
            else:
                out[i, j] = LF[i, j]
    return out


# ---------------------------------------------------------------------------
# EM bookkeeping on the mask: SSR, squared change of the fit, squared fit
# fit = XB + alpha_i + xi_t + LF ; previous fit given by the *_old arrays
# ---------------------------------------------------------------------------


def em_stats_numpy(Y, mask, LF, XB, alpha, xi, LF_old, XB_old, alpha_old, xi_old):
    fit = XB + alpha[:, None] + xi[None, :] + LF
    old = XB_old + alpha_old[:, None] + xi_old[None, :] + LF_old
    ssr = np.sum(np.where(mask, Y - fit, 0.0) ** 2)
    dfit = np.sum(np.where(mask, fit - old, 0.0) ** 2)
    fit2 = np.sum(np.where(mask, fit, 0.0) ** 2)
    return ssr, dfit, fit2


@njit(cache=True)
def em_stats_numba(Y, mask, LF, XB, alpha, xi, LF_old, XB_old, alpha_old, xi_old):
    n, t = Y.shape
    ssr = 0.0
    dfit = 0.0
    fit2 = 0.0
    for i in range(n):
        for j in range(t):
            if mask[i, j]:
                f = XB[i, j] + alpha[i] + xi[j] + LF[i, j]
                o = XB_old[i, j] + alpha_old[i] + xi_old[j] + LF_old[i, j]
                r = Y[i, j] - f
                ssr += r * r
                dfit += (f - o) * (f - o)
                fit2 += f * f
    return ssr, dfit, fit2


# ---------------------------------------------------------------------------
# masked row / column sums of Y - LF - XB
# ---------------------------------------------------------------------------


def masked_margins_diff_numpy(Y, mask, LF, XB):
    Zm = np.where(mask, Y - LF - XB, 0.0)
    return Zm.sum(axis=1), Zm.sum(axis=0)


@njit(cache=True)
def masked_margins_diff_numba(Y, mask, LF, XB):
    n, t = Y.shape
    rows = np.zeros(n)
    cols = np.zeros(t)
    for i in range(n):
        s = 0.0
        for j in range(t):
            if mask[i, j]:
                v = Y[i, j] - LF[i, j] - XB[i, j]
                s += v
                cols[j] += v
        rows[i] = s
    return rows, cols


# ---------------------------------------------------------------------------
# masked row / column sums
# ---------------------------------------------------------------------------


def masked_margins_numpy(Z, mask):
    Zm = np.where(mask, Z, 0.0)
    return Zm.sum(axis=1), Zm.sum(axis=0)


@njit(cache=True)
def masked_margins_numba(Z, mask):
    n, t = Z.shape
    rows = np.zeros(n)
    cols = np.zeros(t)
    for i in range(n):
        s = 0.0
        for a in range(t):
            if mask[i, a]:
                v = Z[i, a]
                s += v
                cols[a] += v
        rows[i] = s
    return rows, cols


# ---------------------------------------------------------------------------
# per-unit loadings: least squares of each row's masked residuals on F
# ---------------------------------------------------------------------------


def unit_loadings_numpy(resid, mask, F, min_obs):
    n = resid.shape[0]
    r = F.shape[1]
    m = mask.astype(np.float64)
    nobs = mask.sum(axis=1)
    out = np.full((n, r), np.nan)
    ok = nobs >= max(min_obs, 1)
    if r == 0:
        out = np.zeros((n, 0))
        return out, ok
    A = np.einsum("it,tj,tk->ijk", m, F, F)
    b = np.einsum("it,tj->ij", np.where(mask, resid, 0.0), F)
    if ok.any():
        out[ok] = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    return out, ok


@njit(cache=True)
def unit_loadings_numba(resid, mask, F, min_obs):
    n, t = resid.shape
    r = F.shape[1]
    out = np.full((n, r), np.nan)
    ok = np.zeros(n, dtype=np.bool_)
    floor = max(min_obs, 1)
    A = np.empty((r, r))
    b = np.empty(r)
    for i in range(n):
        cnt = 0
        for a in range(t):
            if mask[i, a]:
                cnt += 1
        if cnt < floor:
            continue
        ok[i] = True
        if r == 0:
            continue
        A[:, :] = 0.0
        b[:] = 0.0
        for a in range(t):
            if not mask[i, a]:
                continue
            v = resid[i, a]
            for j in range(r):
                fj = F[a, j]
                b[j] += v * fj
                for k in range(r):
                    A[j, k] += fj * F[a, k]
        sol = np.linalg.solve(A, b)
        for j in range(r):
            out[i, j] = sol[j]
    return out, ok


# ---------------------------------------------------------------------------
# retrospective history expansion
# ---------------------------------------------------------------------------
# status codes: 0 never, 1 current, 2 former (point cessation), 3 former (range)


def expand_histories_numpy(start, survey_year, age, status, init, cess, lo, hi):
    span = (survey_year - start + 1).clip(min=0)
    rec = np.repeat(np.arange(len(start)), span)
    offs = np.arange(span.sum()) - np.repeat(np.cumsum(span) - span, span)
    year = start[rec] + offs
    a = age[rec] - (survey_year[rec] - year)
    st = status[rec]
    out = np.zeros(len(rec))
    cur = st == 1
    out[cur] = (a[cur] >= init[rec][cur]).astype(np.float64)
    fp = st == 2
    out[fp] = ((a[fp] >= init[rec][fp]) & (a[fp] <= cess[rec][fp])).astype(np.float64)
    fr = st == 3
    lo_r, hi_r, in_r = lo[rec][fr], hi[rec][fr], init[rec][fr]
    vals = ((a[fr] >= in_r) & (a[fr] <= lo_r)).astype(np.float64)
    vals[(a[fr] > lo_r) & (a[fr] <= hi_r)] = np.nan
    out[fr] = vals
    return rec, year, a, out


@njit(cache=True)
def expand_histories_numba(start, survey_year, age, status, init, cess, lo, hi):
    m = len(start)
    total = 0
    for k in range(m):
        s = survey_year[k] - start[k] + 1
        if s > 0:
            total += s
    rec = np.empty(total, dtype=np.int64)
    year = np.empty(total, dtype=np.int64)
    a_out = np.empty(total, dtype=np.int64)
    out = np.empty(total)
    pos = 0
    for k in range(m):
        for y in range(start[k], survey_year[k] + 1):
            a = age[k] - (survey_year[k] - y)
            st = status[k]
            if st == 0:
                v = 0.0
            elif st == 1:
                v = 1.0 if a >= init[k] else 0.0
            elif st == 2:
                v = 1.0 if (a >= init[k] and a <= cess[k]) else 0.0
            else:
                if a >= init[k] and a <= lo[k]:
                    v = 1.0
                elif a > lo[k] and a <= hi[k]:
                    v = np.nan
                else:
                    v = 0.0
            rec[pos] = k
            year[pos] = y
            a_out[pos] = a
            out[pos] = v
            pos += 1
    return rec, year, a_out, out


if HAVE_NUMBA:
    em_fill = em_fill_numba
    em_stats = em_stats_numba
    masked_margins_diff = masked_margins_diff_numba
    masked_margins = masked_margins_numba
    unit_loadings = unit_loadings_numba
    expand_histories = expand_histories_numba
else:
    em_fill = em_fill_numpy
    em_stats = em_stats_numpy
    masked_margins_diff = masked_margins_diff_numpy
    masked_margins = masked_margins_numpy
    unit_loadings = unit_loadings_numpy
    expand_histories = expand_histories_numpy

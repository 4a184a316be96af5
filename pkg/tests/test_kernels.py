import os
import subprocess
import sys

import numpy as np
import pytest

from causalpanel import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba unavailable")


def inputs(n, T, seed, r=2):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((n, T))
    mask = rng.random((n, T)) < 0.7
    mask[0] = False  # a unit with no observed cells
    return dict(
        Y=Y, mask=mask, LF=rng.standard_normal((n, T)), XB=rng.standard_normal((n, T)),
        alpha=rng.standard_normal(n), xi=rng.standard_normal(T), F=rng.standard_normal((T, r)),
    )


def records(n, seed):
    rng = np.random.default_rng(seed)
    survey = rng.choice(np.array([1997, 2002, 2007, 2012, 2017]), size=n).astype(np.int64)
    age = rng.integers(15, 86, size=n)
    start = np.maximum(survey - (age - 15), 1993).astype(np.int64)
    status = rng.integers(0, 4, size=n)
    init = np.minimum(rng.integers(12, 26, size=n), age)
    cess = np.minimum(init + rng.integers(0, 20, size=n), age)
    hi = np.minimum(cess + rng.integers(1, 6, size=n), age)
    return start, survey, age, status, init, cess, cess, hi


def same(a, b):
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12, equal_nan=True)


@needs_numba
@pytest.mark.parametrize("n,T,seed", [(1, 3, 0), (7, 5, 1), (300, 25, 2)])
def test_em_kernels_agree(n, T, seed):
    d = inputs(n, T, seed)
    args = (d["Y"], d["mask"], d["LF"], d["XB"], d["alpha"], d["xi"])
    a, b = np.empty((n, T)), np.empty((n, T))
    K.em_fill_numpy(*args, a)
    K.em_fill_numba(*args, b)
    same(a, b)
    old = (d["LF"] + 0.01, d["XB"] - 0.02, d["alpha"] * 0.9, d["xi"] + 0.1)
    same(np.array(K.em_stats_numpy(*args, *old)), np.array(K.em_stats_numba(*args, *old)))
    for x, y in zip(K.masked_margins_diff_numpy(*args[:4]), K.masked_margins_diff_numba(*args[:4])):
        same(x, y)
    for x, y in zip(K.masked_margins_numpy(d["Y"], d["mask"]), K.masked_margins_numba(d["Y"], d["mask"])):
        same(x, y)


@needs_numba
@pytest.mark.parametrize("r,min_obs", [(0, 1), (1, 2), (3, 4)])
def test_unit_loadings_agree_with_lstsq(r, min_obs):
    d = inputs(60, 12, r, r=r)
    a, ok_a = K.unit_loadings_numpy(d["Y"], d["mask"], d["F"], min_obs)
    b, ok_b = K.unit_loadings_numba(d["Y"], d["mask"], d["F"], min_obs)
    assert np.array_equal(ok_a, ok_b)
    same(a, b)
    for i in np.flatnonzero(ok_a):
        m = d["mask"][i]
        ref = np.linalg.lstsq(d["F"][m], d["Y"][i, m], rcond=None)[0]
        np.testing.assert_allclose(a[i], ref, atol=1e-10)
    assert not ok_a[0]


@needs_numba
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_expand_histories_agree(seed):
    rec = records(2000, seed)
    for x, y in zip(K.expand_histories_numpy(*rec), K.expand_histories_numba(*rec)):
        assert np.array_equal(np.asarray(x, dtype=float), np.asarray(y, dtype=float), equal_nan=True)


@needs_numba
def test_dispatch_uses_numba():
    assert K.BACKEND == "numba" and K.em_fill is K.em_fill_numba


def test_env_flag_forces_numpy():
    env = dict(os.environ, CAUSALPANEL_DISABLE_NUMBA="1")
    code = "from causalpanel import _kernels as K; print(K.BACKEND, K.em_fill is K.em_fill_numpy)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]

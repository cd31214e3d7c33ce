"""Compiled vs python kernel parity and selection."""
import os
import subprocess
import sys

import numpy as np
import pytest

from mosgeom import backend

PY = backend.get_kernels("python")
HAVE_COMPILED = "compiled" in backend.available_backends()


def _rand(rng, b, n, dtype=np.float64):
    x = rng.normal(size=(b, n)) * 0.2
    return np.ascontiguousarray(x, dtype=dtype)


def test_fused_matches_composition():
    rng = np.random.default_rng(0)
    x = _rand(rng, 17, 9)
    kappa, gamma = -1.0, 0.5
    s_fused, bad = PY.inv_stereo_space_scaled(x, kappa, gamma)
    assert bad == -1
    _xi, s_ref, _t, bad = PY.inv_stereo(gamma * x, kappa)
    assert bad == -1
    assert np.allclose(s_fused, s_ref, atol=1e-14)

    d = _rand(rng, 17, 9)
    out_fused, bad = PY.lift_stereo(d, 1.0, 1.0, 1.0, 2.0)
    assert bad == -1
    xi, _q, _ = PY.lift_xi(d, 1.0, 1.0)
    out_ref, _ = PY.stereo(xi, d, 1.0)
    assert np.allclose(out_fused, 2.0 * out_ref, atol=1e-14)


@pytest.mark.skipif(not HAVE_COMPILED, reason="extension not built")
def test_backends_agree():
    C = backend.get_kernels("compiled")
    rng = np.random.default_rng(1)
    x = _rand(rng, 33, 40)
    for kappa in (-2.0, -0.5, 0.7):
        a = PY.inv_stereo(x, kappa)
        b = C.inv_stereo(x, kappa)
        for u, v in zip(a[:3], b[:3]):
            assert np.allclose(u, v, rtol=1e-13, atol=1e-15)
        assert a[3] == b[3] == -1
    pa, _ = PY.lift_stereo(x, 1.0, 2.0, np.sqrt(0.5), 1.0)
    pc, _ = C.lift_stereo(x, 1.0, 2.0, np.sqrt(0.5), 1.0)
    assert np.allclose(pa, pc, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("name", ["python"] + (["compiled"] if HAVE_COMPILED else []))
def test_single_row_bitexact(name):
    K = backend.get_kernels(name)
    rng = np.random.default_rng(2)
    x = _rand(rng, 19, 31)
    xi, s, t, _ = K.inv_stereo(x, -1.3)
    for i in (0, 7, 18):
        xi1, s1, t1, _ = K.inv_stereo(np.ascontiguousarray(x[i:i + 1]), -1.3)
        assert s1.tobytes() == s[i:i + 1].tobytes()
        assert xi1.tobytes() == xi[i:i + 1].tobytes()
    out, _ = K.lift_stereo(x, 1.0, 1.0, 1.0, 1.0)
    out1, _ = K.lift_stereo(np.ascontiguousarray(x[7:8]), 1.0, 1.0, 1.0, 1.0)
    assert out1.tobytes() == out[7:8].tobytes()


@pytest.mark.parametrize("name", ["python"] + (["compiled"] if HAVE_COMPILED else []))
def test_float32_fused(name):
    K = backend.get_kernels(name)
    rng = np.random.default_rng(3)
    x32 = _rand(rng, 8, 16, dtype=np.float32)
    s, bad = K.inv_stereo_space_scaled(x32, -1.0, 1.0)
    assert s.dtype == np.float32 and bad == -1
    out, bad = K.lift_stereo(s, 1.0, 1.0, 1.0, 1.0)
    assert out.dtype == np.float32 and bad == -1
    s64, _ = K.inv_stereo_space_scaled(x32.astype(np.float64), -1.0, 1.0)
    assert np.allclose(s, s64, atol=1e-6)


def test_vjp_scale_pair_formula():
    rng = np.random.default_rng(4)
    u, v = _rand(rng, 11, 7), _rand(rng, 11, 7)
    cu = rng.normal(size=11)
    cv = rng.normal(size=11)
    got = PY.vjp_scale_pair(u, v, cu, cv)
    want = np.empty_like(u)
    for i in range(11):
        want[i] = cu[i] * u[i] - (u[i] @ v[i]) * cv[i] * v[i]
    assert np.allclose(got, want, rtol=1e-13, atol=1e-15)


@pytest.mark.skipif(not HAVE_COMPILED, reason="extension not built")
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_vjp_scale_pair_parity(dtype):
    C = backend.get_kernels("compiled")
    rng = np.random.default_rng(5)
    u, v = _rand(rng, 23, 37, dtype), _rand(rng, 23, 37, dtype)
    cu = rng.normal(size=23).astype(dtype)
    cv = rng.normal(size=23).astype(dtype)
    a = PY.vjp_scale_pair(u, v, cu, cv)
    b = C.vjp_scale_pair(u, v, cu, cv)
    assert b.dtype == dtype
    tol = 1e-13 if dtype == np.float64 else 2e-6
    assert np.allclose(a, b, rtol=tol, atol=tol)
    # row independence: a single-row call reproduces the batched row
    b7 = C.vjp_scale_pair(np.ascontiguousarray(u[7:8]),
                          np.ascontiguousarray(v[7:8]),
                          cu[7:8].copy(), cv[7:8].copy())
    assert b7.tobytes() == b[7:8].tobytes()


def test_guard_reported():
    # kappa=-1 pole at ||x||=1
    x = np.array([[1.0, 0.0], [0.5, 0.0]])
    _xi, _s, _t, bad = PY.inv_stereo(x, -1.0)
    assert bad == 0


@pytest.mark.parametrize("forced", ["python"] + (["compiled"] if HAVE_COMPILED else []))
def test_env_override(forced):
    env = dict(os.environ, MOSGEOM_BACKEND=forced)
    out = subprocess.run(
        [sys.executable, "-c", "import mosgeom; print(mosgeom.backend_name())"],
        capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == forced

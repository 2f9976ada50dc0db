import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from confidence_energy import _kernels
from confidence_energy._kernels import _fallback

native = pytest.importorskip("confidence_energy._kernels._ckernels")


def grouped(rng, n_groups, max_size, discrete=False):
    sizes = rng.integers(0, max_size + 1, n_groups)
    offsets = np.zeros(n_groups + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    parts = []
    for s in sizes:
        v = rng.integers(0, 6, s) / 5.0 if discrete else rng.random(s)
        parts.append(np.sort(v))
    values = np.concatenate(parts) if parts else np.zeros(0)
    return np.ascontiguousarray(values, dtype=np.float64), offsets


class TestSelection:
    def test_backend_reported(self):
        assert _kernels.BACKEND in ("cython", "python")
        if _kernels.BACKEND == "cython":
            assert _kernels.count_geq is native.count_geq

    def test_pure_flag_forces_fallback(self):
        env = dict(os.environ, CONFIDENCE_ENERGY_PURE="1")
        out = subprocess.run([sys.executable, "-c", "import confidence_energy as c; print(c.BACKEND)"],
                             capture_output=True, text=True, env=env, check=True)
        assert out.stdout.strip() == "python"


class TestCountGeq:
    @pytest.mark.parametrize("discrete", [False, True])
    def test_parity_and_brute_force(self, rng, discrete):
        for _ in range(50):
            values, offsets = grouped(rng, 12, 30, discrete)
            groups = rng.integers(0, 12, 200).astype(np.int64)
            queries = rng.integers(0, 6, 200) / 5.0 if discrete else rng.random(200)
            queries = np.ascontiguousarray(queries, dtype=np.float64)
            a = native.count_geq(values, offsets, groups, queries)
            b = _fallback.count_geq(values, offsets, groups, queries)
            assert np.array_equal(a, b)
            brute = [int(np.sum(values[offsets[g]:offsets[g + 1]] >= q)) for g, q in zip(groups, queries)]
            assert a.tolist() == brute

    def test_empty(self):
        values, offsets = np.zeros(0), np.zeros(3, dtype=np.int64)
        groups, queries = np.array([0, 1], dtype=np.int64), np.array([0.0, 1.0])
        assert native.count_geq(values, offsets, groups, queries).tolist() == [0, 0]
        assert _fallback.count_geq(values, offsets, groups, queries).tolist() == [0, 0]


class TestLevelArgmin:
    @given(st.integers(0, 2**32 - 1), st.integers(0, 6), st.integers(1, 5), st.integers(1, 5),
           st.sampled_from([0.0, 0.5, 1.0, 3.0]))
    def test_parity(self, seed, n_rows, n_classes, k, lam):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(n_classes, k))
        psi = rng.dirichlet(np.ones(k), size=n_rows).reshape(n_rows, k)
        nlp = -np.log(rng.uniform(1e-3, 1.0, (n_rows, n_classes, k)))
        la, ta = native.level_argmin(w, psi, nlp, lam)
        lb, tb = _fallback.level_argmin(w, psi, nlp, lam)
        assert np.array_equal(la, lb)
        assert np.array_equal(ta, tb)
        for c in range(n_classes):
            for i in range(n_rows):
                cost = w[c] * psi[i] + lam * nlp[i, c]
                assert la[c, i] == int(np.argmin(cost))

    def test_ties_go_low(self):
        w = np.zeros((2, 3))
        psi = np.full((4, 3), 1 / 3)
        nlp = np.zeros((4, 2, 3))
        for impl in (native, _fallback):
            labels, totals = impl.level_argmin(w, psi, nlp, 1.0)
            assert not labels.any() and not totals.any()

    def test_no_rows(self):
        for impl in (native, _fallback):
            labels, totals = impl.level_argmin(np.ones((3, 2)), np.zeros((0, 2)), np.zeros((0, 3, 2)), 1.0)
            assert labels.shape == (3, 0) and totals.tolist() == [0.0, 0.0, 0.0]

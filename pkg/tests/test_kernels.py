from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest

from conftest import random_boxes
from tubeletkit import kernels
from tubeletkit._accel import HAVE_NUMBA

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
NAMES = sorted(kernels.NUMPY_KERNELS)


def _args(name, rng):
    if name == "iou_matrix":
        return random_boxes(rng, 40), random_boxes(rng, 25)
    if name == "affine_rows":
        return rng.normal(size=(30, 17)), rng.normal(size=(17, 6)), rng.normal(size=6)
    if name == "hash_normal":
        return rng.integers(0, 2**62, size=(50, 7), dtype=np.int64).view(np.uint64), 9
    if name == "nearest_within":
        return rng.uniform(0, 200, size=(60, 2)), rng.uniform(0, 200, size=(5, 2)), rng.random(5) > 0.2, 50.0
    fr = rng.integers(0, 4, size=40).astype(np.int64)
    gf = rng.integers(0, 4, size=10).astype(np.int64)
    return fr, random_boxes(rng, 40, 30, 90), gf, random_boxes(rng, 10, 30, 90), 0.3


@needs_numba
@pytest.mark.parametrize("name", NAMES)
def test_backends_agree(name, rng):
    args = _args(name, rng)
    a = kernels.NUMPY_KERNELS[name](*args)
    b = kernels.NUMBA_KERNELS[name](*args)
    if name == "hash_normal":
        # log/cos rounding may differ by an ulp between libm and numpy
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)
    else:
        np.testing.assert_array_equal(a, b)


def test_affine_rows_is_batch_invariant(rng):
    x, w, b = rng.normal(size=(64, 40)), rng.normal(size=(40, 8)), rng.normal(size=8)
    full = kernels.affine_rows(x, w, b)
    for i in (0, 13, 63):
        np.testing.assert_array_equal(kernels.affine_rows(x[i : i + 1], w, b)[0], full[i])
    np.testing.assert_allclose(full, x @ w + b, rtol=1e-12, atol=1e-12)


def test_hash_normal_is_deterministic_and_standard():
    keys = np.arange(20000 * 3, dtype=np.int64).reshape(-1, 3)
    a = kernels.hash_normal(keys, 4)
    np.testing.assert_array_equal(a, kernels.hash_normal(keys, 4))
    assert abs(a.mean()) < 0.02
    assert abs(a.std() - 1.0) < 0.02
    # one changed key component decorrelates the row
    k2 = keys.copy()
    k2[:, 2] += 1
    assert abs(np.corrcoef(a.ravel(), kernels.hash_normal(k2, 4).ravel())[0, 1]) < 0.02


def test_nearest_within_ties_and_radius():
    pts = np.array([[10.0, 0.0], [-10.0, 0.0], [100.0, 0.0]])
    q = np.array([[0.0, 0.0], [95.0, 0.0], [50.0, 50.0]])
    got = kernels.nearest_within(q, pts, np.array([True, True, True]), 20.0)
    assert got.tolist() == [0, 2, -1]
    got = kernels.nearest_within(q, pts, np.array([False, True, True]), 20.0)
    assert got.tolist() == [1, 2, -1]


def test_greedy_match_hand_case():
    gt = np.array([[0, 0, 10, 10.0]])
    det = np.array([[0, 0, 10, 10.0], [0, 0, 10, 10.0], [1, 0, 10, 10.0]])
    tp = kernels.greedy_match(np.zeros(3), det, np.zeros(1), gt, 0.5)
    assert tp.tolist() == [True, False, False]
    # a detection on another frame never matches
    assert kernels.greedy_match(np.ones(1), det[:1], np.zeros(1), gt, 0.5).tolist() == [False]


def test_env_flag_selects_numpy():
    code = "import tubeletkit._accel as a, tubeletkit.kernels as k; print(a.BACKEND, k._ACTIVE is k.NUMPY_KERNELS)"
    out = subprocess.run(
        [sys.executable, "-c", code], env={"TUBELETKIT_NO_NUMBA": "1", "PATH": ""}, capture_output=True, text=True, check=True
    )
    assert out.stdout.split() == ["numpy", "True"]

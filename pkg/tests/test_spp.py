import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoredist import autodiff as ad
from scoredist.errors import ResolutionError
from scoredist.spp import SPPConfig, adaptive_spp, cell_bounds, global_max_branch


def T(a):
    return ad.Tensor(np.asarray(a, dtype=np.float64))


def test_reference_lengths():
    assert SPPConfig(3, 2048).output_length == 18432
    fmap = T(np.random.default_rng(0).random((2048, 3, 4)))
    assert adaptive_spp(fmap, SPPConfig(3, 2048)).shape == (18432,)
    assert global_max_branch(fmap).shape == (2048,)


def test_constant_map():
    out = adaptive_spp(T(np.full((4, 7, 9), 2.5)), SPPConfig(3, 4)).data
    np.testing.assert_allclose(out, np.full(36, 1 / 6), atol=1e-15)
    np.testing.assert_allclose(global_max_branch(T(np.full((4, 5, 5), -1.0))).data, np.full(4, -0.5))


def test_one_element_cells_copy_the_map():
    rng = np.random.default_rng(1)
    x = rng.random((2, 3, 3))
    out = adaptive_spp(T(x), SPPConfig(3, 2)).data
    # cell-major, channel-minor
    expected = x.transpose(1, 2, 0).reshape(-1)
    np.testing.assert_allclose(out, expected / np.linalg.norm(expected), atol=1e-15)


def test_global_branch_matches_scan():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 6, 7))
    naive = np.array([max(x[c].ravel()) for c in range(5)])
    np.testing.assert_allclose(global_max_branch(T(x)).data, naive / np.linalg.norm(naive))


def test_too_small_map():
    with pytest.raises(ResolutionError):
        adaptive_spp(T(np.ones((1, 2, 5))), SPPConfig(3, 1))


@given(st.integers(1, 60), st.integers(1, 8))
def test_cells_tile_exactly(size, n):
    if size < n:
        return
    b = cell_bounds(size, n)
    assert b[0][0] == 0 and b[-1][1] == size
    assert all(lo < hi for lo, hi in b)
    assert all(b[i][1] == b[i + 1][0] for i in range(n - 1))


@settings(deadline=None)
@given(st.integers(3, 40), st.integers(3, 40), st.integers(0, 1000))
def test_fixed_length_and_unit_norm(H, W, seed):
    x = np.random.default_rng(seed).standard_normal((4, H, W))
    out = adaptive_spp(T(x), SPPConfig(3, 4)).data
    assert out.shape == (36,)
    assert abs(np.linalg.norm(out) - 1) <= 1e-6


def test_batched_matches_single():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 8, 10))
    batch = adaptive_spp(T(x), SPPConfig(3, 3)).data
    for i in range(2):
        np.testing.assert_allclose(batch[i], adaptive_spp(T(x[i]), SPPConfig(3, 3)).data)


def test_moving_peak_changes_its_cell_block():
    C, n = 3, 3
    base = np.zeros((C, 9, 9))
    a, b = base.copy(), base.copy()
    a[1, 0, 0] = 5.0  # cell (0, 0)
    b[1, 8, 8] = 5.0  # cell (2, 2)
    oa = adaptive_spp(T(a), SPPConfig(n, C)).data.reshape(n * n, C)
    ob = adaptive_spp(T(b), SPPConfig(n, C)).data.reshape(n * n, C)
    assert oa[0, 1] == 1.0 and np.count_nonzero(oa) == 1
    assert ob[8, 1] == 1.0 and np.count_nonzero(ob) == 1

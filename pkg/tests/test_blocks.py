import math

import numpy as np
import pytest

from sbc import blocks as B
from sbc import tensor as T
from sbc.errors import ContractError, DomainError


def test_small_layout():
    lay = B.make_layout(8, 4, 2)
    assert [list(r) for r in lay.blocks] == [[0, 1, 2, 3], [2, 3, 4, 5], [4, 5, 6, 7]]


def test_no_overlap_is_partition():
    lay = B.make_layout(32, 8, 8)
    assert np.array_equal(lay.cover_counts(), np.ones(32))
    assert all(len(r) == 8 for r in lay.blocks)


@pytest.mark.parametrize("n,b,s", [(0, 1, 1), (5, 6, 1), (8, 4, 5), (8, 4, 0)])
def test_layout_rejects_bad_sizes(n, b, s):
    with pytest.raises(DomainError):
        B.make_layout(n, b, s)


def test_random_layouts_cover_every_index():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 300))
        b = int(rng.integers(1, n + 1))
        s = int(rng.integers(1, b + 1))
        lay = B.make_layout(n, b, s)
        covered = np.zeros(n, int)
        for r in lay.blocks:
            covered[list(r)] += 1
        assert covered.min() >= 1
        assert np.array_equal(covered, lay.cover_counts())
        offs = np.asarray(lay.offsets)
        assert np.all(np.diff(offs) == s)
        full = [r for r in lay.blocks if r.stop < n or r.stop - r.start == b]
        assert all(len(r) == b for r in full)
        # the last block is the only one that may be clipped
        assert all(len(r) == b for r in lay.blocks[:-1])


def test_one_hot_energy_lands_in_covering_blocks():
    lay = B.make_layout(16, 4, 2)
    w = np.zeros(16)
    w[5] = 3.0
    en = B.block_energies(lay, w)
    for b, r in enumerate(lay.blocks):
        assert en.e[b] == (9.0 if 5 in r else 0.0)


def test_uniform_weights_give_uniform_p():
    lay = B.make_layout(24, 6, 6)
    en = B.block_energies(lay, np.ones(24))
    assert np.allclose(en.p, 1 / 4)


def test_total_energy_equals_cover_weighted_sum():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(10, 200))
        lay = B.make_layout(n, min(16, n), min(8, n))
        w = rng.standard_normal(n)
        e = B.block_energies(lay, w).e
        direct = sum(sum(w[i] ** 2 for i in r) for r in lay.blocks)
        assert math.isclose(e.sum(), direct, rel_tol=1e-12)
        assert math.isclose(e.sum(), float(np.sum(w * w * lay.cover_counts())), rel_tol=1e-12)


def test_zero_energy_flagged():
    lay = B.make_layout(10, 4, 2)
    en = B.block_energies(lay, np.zeros(10))
    assert en.zero
    assert B.skew_penalty(en) == 0.0
    assert B.cluster_sparsity_penalty(lay, np.zeros(10)) == 0.0


def test_energy_length_mismatch():
    lay = B.make_layout(10, 4, 2)
    with pytest.raises(ContractError):
        B.block_energies(lay, np.zeros(9))


def test_cluster_single_weight_is_count_times_abs():
    lay = B.make_layout(20, 4, 2)
    for i in (0, 7, 19):
        w = np.zeros(20)
        w[i] = -2.5
        assert math.isclose(B.cluster_sparsity_penalty(lay, w), lay.cover_counts()[i] * 2.5)


def test_cluster_dominates_l2_norm_and_is_homogeneous():
    rng = np.random.default_rng(2)
    lay = B.make_layout(64, 16, 8)
    for _ in range(100):
        w = rng.standard_normal(64) * rng.uniform(0.01, 10)
        pen = B.cluster_sparsity_penalty(lay, w)
        assert pen >= np.linalg.norm(w) - 1e-12
        c = rng.uniform(0.1, 10)
        assert math.isclose(B.cluster_sparsity_penalty(lay, c * w), c * pen, rel_tol=1e-12)


def test_skew_extremes_and_bounds():
    lay = B.make_layout(32, 8, 8)
    w = np.zeros(32)
    w[:8] = 1.0
    assert B.skew_penalty(B.block_energies(lay, w)) == 0.0
    assert math.isclose(B.skew_penalty(B.block_energies(lay, np.ones(32))), math.log(4))
    rng = np.random.default_rng(3)
    lay = B.make_layout(100, 16, 8)
    for _ in range(50):
        h = B.skew_penalty(B.block_energies(lay, rng.standard_normal(100)))
        assert 0.0 <= h <= math.log(lay.num_blocks) + 1e-12


def _fd_check(fn, w, h=1e-5):
    x = T.Tensor(w.copy(), requires_grad=True)
    g = T.Graph()
    with g:
        loss = fn(x)
    T.gradients(loss, g)
    worst = 0.0
    for i in range(w.size):
        wp, wm = w.copy(), w.copy()
        wp[i] += h
        wm[i] -= h
        num = (fn(T.Tensor(wp)).item() - fn(T.Tensor(wm)).item()) / (2 * h)
        worst = max(worst, abs(num - x.grad[i]) / max(abs(num), abs(x.grad[i]), 1e-8))
    return worst


def test_skew_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    lay = B.make_layout(40, 8, 4)
    for _ in range(5):
        w = rng.standard_normal(40)
        assert _fd_check(lambda x: B.skew_penalty_t(x, lay), w) <= 1e-4


def test_cluster_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    lay = B.make_layout(40, 8, 4)
    w = rng.standard_normal(40)
    assert _fd_check(lambda x: B.cluster_penalty_t(x, lay), w) <= 1e-4


def test_tensor_penalties_match_plain_versions():
    rng = np.random.default_rng(6)
    lay = B.make_layout(50, 16, 8)
    w = rng.standard_normal(50)
    assert math.isclose(B.cluster_penalty_t(T.Tensor(w), lay).item(), B.cluster_sparsity_penalty(lay, w))
    assert math.isclose(B.skew_penalty_t(T.Tensor(w), lay).item(), B.skew_penalty(B.block_energies(lay, w)),
                        rel_tol=1e-12)


def test_top_blocks_skip_overlaps():
    lay = B.make_layout(64, 16, 8)
    w = np.zeros(64)
    w[16:32] = 1.0
    w[48:64] = 0.5
    assert [lay.offsets[b] for b in B.top_blocks(lay, w, 2)] == [16, 48]


def test_energy_histogram_counts_all_blocks():
    lay = B.make_layout(100, 16, 8)
    rows = B.energy_histogram(lay, np.random.default_rng(0).standard_normal(100), bins=5)
    assert sum(r[2] for r in rows) == lay.num_blocks


def test_support_f1():
    assert B.support_f1([0, 16], [0, 16]) == 1.0
    assert B.support_f1([], []) == 1.0
    assert B.support_f1([8], [0]) == 0.0
    assert math.isclose(B.support_f1([0, 16, 32, 48], [0, 16]), 2 / 3)


def test_penalized_fit_recovers_block_support():
    from sbc.data import synth_blocksparse

    prob = synth_blocksparse(256, 16, 3, 128, seed=3, snr_db=20)
    lay = B.make_layout(256, 16, 8)
    fit = B.fit_block_sparse(prob.X, prob.y, lay, steps=1500)
    assert B.support_f1(fit.offsets, prob.active_offsets) >= 0.9
    assert fit.losses[-1] < fit.losses[0]
    plain = B.fit_block_sparse(prob.X, prob.y, lay, 0.0, 0.0, steps=1500)
    assert B.support_f1(plain.offsets, prob.active_offsets) < 0.9

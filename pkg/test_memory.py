#!/usr/bin/env python3
"""Tests for memory addressing, retrieval and the retrieval backward pass."""

import itertools
import math

import numpy as np
import pytest

from memory import (
    MemoryBank,
    address,
    address_batch,
    adaptive_lambda,
    attention_weights,
    backward_retrieve,
    backward_retrieve_batch,
    init_bank,
    init_items,
    per_item_max,
    renormalize,
    retrieve,
    retrieve_batch,
    threshold_shrink,
    usage_counts,
    usage_histogram,
)
from numerics import DomainError


def brute_force_address(z, items, top_k, eps):
    """Loop-by-loop reimplementation used as an oracle."""
    n, s, _ = items.shape
    zn = math.sqrt(sum(v * v for v in z))
    cos = np.zeros((n, s))
    for i in range(n):
        for j in range(s):
            m = items[i, j]
            mn = math.sqrt(sum(v * v for v in m))
            cos[i, j] = sum(a * b for a, b in zip(z, m)) / (zn * mn)
    shifted = cos - cos.max()
    e = np.exp(shifted)
    w = e / e.sum()
    idx = [max(range(s), key=lambda j: (w[i, j], -j)) for i in range(n)]
    a = [w[i, idx[i]] for i in range(n)]
    lam = sorted(a, reverse=True)[top_k] if n > top_k else 0.0
    shrunk = [max(v - lam, 0.0) * v / (abs(v - lam) + eps) for v in a]
    total = sum(shrunk)
    if total == 0.0:
        best = max(range(n), key=lambda i: (a[i], -i))
        kept = [1.0 if i == best else 0.0 for i in range(n)]
    else:
        kept = [v / total for v in shrunk]
    return w, idx, lam, kept


def test_attention_weights_singleton():
    bank = MemoryBank(items=np.ones((1, 1, 3)), top_k=1)
    np.testing.assert_allclose(attention_weights(np.array([1.0, 2.0, 3.0]), bank), [[1.0]])


def test_attention_weights_closed_form():
    items = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    bank = MemoryBank(items=items, top_k=1)
    w = attention_weights(np.array([2.0, 0.0]), bank)
    e = math.e
    np.testing.assert_allclose(w[0], [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    np.testing.assert_allclose(w[0], [0.7311, 0.2689], atol=1e-4)


def test_attention_weights_permute_with_rows():
    rng = np.random.default_rng(1)
    items = rng.standard_normal((4, 3, 5))
    z = rng.standard_normal(5)
    perm = np.array([2, 0, 3, 1])
    w = attention_weights(z, MemoryBank(items=items, top_k=2))
    w_perm = attention_weights(z, MemoryBank(items=items[perm], top_k=2))
    np.testing.assert_allclose(w_perm, w[perm], atol=1e-15)


def test_zero_query_is_domain_error():
    bank = init_bank(3, 2, 4, seed=0, top_k=2)
    with pytest.raises(DomainError):
        address(np.zeros(4), bank)


def test_per_item_max_examples():
    idx, vals = per_item_max(np.array([[0.1, 0.7, 0.2], [0.3, 0.3, 0.3]]))
    assert list(idx) == [1, 0]
    np.testing.assert_allclose(vals, [0.7, 0.3])
    idx, vals = per_item_max(np.array([[0.42]]))
    assert list(idx) == [0] and vals[0] == 0.42


def test_adaptive_lambda_examples():
    assert adaptive_lambda(np.array([0.4, 0.3, 0.2, 0.1]), 2) == 0.2
    assert adaptive_lambda(np.array([0.4, 0.3]), 2) == 0.0
    assert adaptive_lambda(np.array([0.25, 0.25, 0.25, 0.25]), 2) == 0.25


def test_adaptive_lambda_batch_rows_match_single_calls():
    rng = np.random.default_rng(3)
    rows = rng.random((6, 9))
    batched = adaptive_lambda(rows, 3)
    assert batched.shape == (6,)
    for row, lam in zip(rows, batched):
        assert lam == adaptive_lambda(row, 3)
    np.testing.assert_array_equal(adaptive_lambda(rows[:, :3], 3), np.zeros(6))


def test_address_batch_uses_adaptive_lambda_and_renormalize():
    bank = init_bank(7, 4, 5, seed=11, top_k=2)
    z = np.random.default_rng(12).normal(size=(5, 5))
    addr = address_batch(z, bank)
    np.testing.assert_array_equal(addr.lam, adaptive_lambda(addr.item_max, 2))
    expected = renormalize(threshold_shrink(addr.item_max, addr.lam[:, None], bank.epsilon))
    np.testing.assert_allclose(addr.kept_weights, expected)


def test_threshold_shrink_examples():
    assert threshold_shrink(np.array([0.1]), 0.25, 1e-12)[0] == 0.0
    assert threshold_shrink(np.array([0.5]), 0.25, 1e-12)[0] == pytest.approx(0.5, abs=1e-11)
    w = np.array([0.3])
    assert threshold_shrink(w, 0.0, 1e-12)[0] == pytest.approx(0.09 / (0.3 + 1e-12))
    # survivors of [0.4, 0.3, 0.2, 0.1] at lambda = 0.2
    out = threshold_shrink(np.array([0.4, 0.3, 0.2, 0.1]), 0.2, 1e-12)
    assert list(out > 0) == [True, True, False, False]


def test_renormalize_examples():
    np.testing.assert_allclose(renormalize(np.array([0.4, 0.3, 0.0, 0.0])), [4 / 7, 3 / 7, 0, 0])
    np.testing.assert_allclose(renormalize(np.array([0.0, 0.2, 0.0])), [0, 1, 0])
    np.testing.assert_allclose(renormalize(np.array([0.25, 0.75])), [0.25, 0.75])


def test_address_single_cell():
    bank = MemoryBank(items=np.array([[[0.5, -0.5]]]), top_k=1)
    res = address(np.array([1.0, 1.0]), bank)
    assert res.kept_items == [0]
    np.testing.assert_allclose(res.kept_weights, [1.0])


@pytest.mark.parametrize("n,s", list(itertools.product(range(1, 9), range(1, 5))))
def test_address_matches_brute_force(n, s):
    rng = np.random.default_rng(100 * n + s)
    items = init_items(n, s, 8, rng)
    top_k = min(5, n)
    bank = MemoryBank(items=items, top_k=top_k)
    for _ in range(100):
        z = rng.standard_normal(8)
        res = address(z, bank)
        w, idx, lam, kept = brute_force_address(z, items, top_k, bank.epsilon)
        assert list(res.argmax_idx) == idx
        assert res.lam == pytest.approx(lam, abs=1e-12)
        assert res.kept_items == [i for i, v in enumerate(kept) if v > 0]
        np.testing.assert_allclose(res.full_weights, w, atol=1e-12)
        np.testing.assert_allclose(res.kept_weights, kept, atol=1e-12)


def test_address_normalization_invariants_over_many_draws():
    rng = np.random.default_rng(7)
    for trial in range(100):
        n = int(rng.integers(1, 9))
        s = int(rng.integers(1, 5))
        top_k = int(rng.integers(1, n + 1))
        bank = MemoryBank(items=init_items(n, s, 6, rng), top_k=top_k)
        batch = address_batch(rng.standard_normal((100, 6)), bank)
        assert np.all(np.abs(batch.full_weights.sum(axis=(1, 2)) - 1.0) <= 1e-12)
        assert np.all(np.abs(batch.kept_weights.sum(axis=1) - 1.0) <= 1e-12)
        kept_counts = (batch.kept_weights > 0).sum(axis=1)
        assert np.all(kept_counts <= top_k)
        if n > top_k:
            top = -np.sort(-batch.item_max, axis=1)[:, : top_k + 1]
            distinct = np.all(np.diff(top, axis=1) < 0, axis=1)
            assert np.all(kept_counts[distinct] == top_k)
        assert np.all(batch.shrunk[batch.kept_weights == 0] == 0)


def test_address_is_scale_invariant():
    rng = np.random.default_rng(11)
    bank = init_bank(6, 3, 5, seed=rng, top_k=3)
    for _ in range(20):
        z = rng.standard_normal(5)
        a, b = address(z, bank), address(3.7 * z, bank)
        assert a.kept_items == b.kept_items
        np.testing.assert_allclose(a.kept_weights, b.kept_weights, atol=1e-12)


def test_degenerate_tie_falls_back_to_lowest_index_item():
    # identical items give identical per-item maxima, so the threshold removes all of them
    items = np.tile(np.array([[1.0, 0.0], [0.0, 1.0]]), (4, 1, 1))
    bank = MemoryBank(items=items, top_k=2)
    res = address(np.array([1.0, 0.2]), bank)
    assert res.fallback
    assert res.kept_items == [0]
    np.testing.assert_allclose(retrieve(res, bank), [1.0, 0.0])


def test_fixed_threshold_mode_ignores_top_k():
    rng = np.random.default_rng(2)
    items = init_items(8, 2, 4, rng)
    bank = MemoryBank(items=items, top_k=1, threshold_mode="fixed", fixed_threshold=0.005)
    res = address(rng.standard_normal(4), bank)
    assert res.lam == 0.005
    assert len(res.kept_items) > 1


def test_retrieve_single_and_midpoint():
    items = np.array([[[1.0, 2.0]], [[3.0, 0.0]], [[-1.0, -1.0]]])
    bank = MemoryBank(items=items, top_k=2)
    res = address(np.array([1.0, 1.0]), bank)
    res.kept_weights = np.array([1.0, 0.0, 0.0])
    res.kept_items = [0]
    np.testing.assert_allclose(retrieve(res, bank), [1.0, 2.0])
    res.kept_weights = np.array([0.5, 0.5, 0.0])
    res.kept_items = [0, 1]
    np.testing.assert_allclose(retrieve(res, bank), [2.0, 1.0])


def test_retrieve_matches_weighted_sum_oracle_and_hull():
    rng = np.random.default_rng(5)
    bank = init_bank(6, 3, 4, seed=rng, top_k=3)
    z = rng.standard_normal((10, 4))
    batch = address_batch(z, bank)
    zhat = retrieve_batch(batch, bank)
    for b in range(10):
        res = batch.row(b)
        oracle = sum(res.kept_weights[i] * bank.items[i, res.argmax_idx[i]] for i in res.kept_items)
        np.testing.assert_allclose(zhat[b], oracle, atol=1e-12)
        np.testing.assert_allclose(retrieve(res, bank), oracle, atol=1e-12)
        bound = max(np.linalg.norm(bank.items[i, res.argmax_idx[i]]) for i in res.kept_items)
        assert np.linalg.norm(zhat[b]) <= bound + 1e-12


def test_backward_retrieve_zero_upstream():
    rng = np.random.default_rng(0)
    bank = init_bank(5, 2, 3, seed=rng, top_k=2)
    batch = address_batch(rng.standard_normal((2, 3)), bank)
    g_items, g_z = backward_retrieve_batch(batch, bank, np.zeros((2, 3)))
    assert np.all(g_items == 0) and np.all(g_z == 0)


def _norm_sq_loss(bank, z):
    return float(np.sum(retrieve_batch(address_batch(z, bank), bank) ** 2))


def test_backward_retrieve_matches_finite_differences():
    rng = np.random.default_rng(42)
    h = 1e-5
    checked = 0
    while checked < 20:
        bank = init_bank(6, 3, 5, seed=rng, top_k=3)
        z = rng.standard_normal((1, 5))
        batch = address_batch(z, bank)
        gaps = np.abs(batch.item_max - batch.lam[:, None])
        gaps[0, batch.lam_item[0]] = np.inf
        ranked = np.sort(batch.full_weights, axis=2)
        if gaps.min() < 1e-5 or np.min(ranked[:, :, -1] - ranked[:, :, -2]) < 1e-5:
            continue
        zhat = retrieve_batch(batch, bank)
        g_items, g_z = backward_retrieve_batch(batch, bank, 2 * zhat)

        numeric = np.zeros_like(bank.items)
        flat, num_flat = bank.items.reshape(-1), numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            f_plus = _norm_sq_loss(bank, z)
            flat[k] = orig - h
            f_minus = _norm_sq_loss(bank, z)
            flat[k] = orig
            num_flat[k] = (f_plus - f_minus) / (2 * h)
        rel = np.abs(g_items - numeric) / np.maximum(np.maximum(np.abs(g_items), np.abs(numeric)), 1e-8)
        assert np.all((rel <= 1e-4) | (np.abs(g_items - numeric) <= 1e-8))

        num_z = np.zeros(5)
        for k in range(5):
            zp, zm = z.copy(), z.copy()
            zp[0, k] += h
            zm[0, k] -= h
            num_z[k] = (_norm_sq_loss(bank, zp) - _norm_sq_loss(bank, zm)) / (2 * h)
        rel_z = np.abs(g_z[0] - num_z) / np.maximum(np.maximum(np.abs(g_z[0]), np.abs(num_z)), 1e-8)
        assert np.all((rel_z <= 1e-4) | (np.abs(g_z[0] - num_z) <= 1e-8))
        checked += 1


def test_backward_retrieve_single_query_view():
    rng = np.random.default_rng(9)
    bank = init_bank(4, 2, 3, seed=rng, top_k=2)
    z = rng.standard_normal(3)
    g = rng.standard_normal(3)
    res = address(z, bank)
    g_items, g_z = backward_retrieve(res, bank, g, z=z)
    g_items_b, g_z_b = backward_retrieve_batch(address_batch(z[None, :], bank), bank, g[None, :])
    np.testing.assert_allclose(g_items, g_items_b)
    np.testing.assert_allclose(g_z, g_z_b[0])


def test_init_items_uniform_range_and_nonzero_rows():
    items = init_items(64, 30, 16, 0)
    assert np.all(np.abs(items) <= 1 / 4)
    assert np.all(np.linalg.norm(items, axis=2) > 0)


def test_usage_histogram_identical_queries():
    rng = np.random.default_rng(4)
    bank = init_bank(6, 3, 4, seed=rng, top_k=3)
    z = rng.standard_normal(4)
    hist = usage_histogram([address(z, bank) for _ in range(25)])
    assert len(hist) == 1
    assert sum(hist.values()) == 25


def test_usage_histogram_two_clusters():
    items = np.zeros((2, 2, 2))
    items[0, 0] = [1.0, 0.0]
    items[0, 1] = [-1.0, 0.2]
    items[1, 0] = [0.2, -1.0]
    items[1, 1] = [0.0, 1.0]
    bank = MemoryBank(items=items, top_k=1)
    rng = np.random.default_rng(0)
    queries = np.vstack(
        [np.array([1.0, 0.0]) + 0.05 * rng.standard_normal((20, 2)),
         np.array([0.0, 1.0]) + 0.05 * rng.standard_normal((20, 2))]
    )
    batch = address_batch(queries, bank)
    hist = usage_histogram(batch.row(b) for b in range(len(batch)))
    assert hist == {(0, 0): 20, (1, 1): 20}
    counts = usage_counts(batch, 2, 2)
    assert counts.sum() == 40
    assert counts[0, 0] == 20 and counts[1, 1] == 20

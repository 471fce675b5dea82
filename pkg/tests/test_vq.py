import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqprompt import numerics as nx
from vqprompt.vq import NEVER, Codebook, dead_codes, quantize, usage_report, utilization, vq_loss


def brute_force(r, codes):
    out = []
    for row in r:
        best, best_d = 0, None
        for k, c in enumerate(codes):
            d = float(((row - c) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def test_identity_case():
    cb = Codebook(np.eye(3))
    qp = quantize(np.eye(3)[[2, 0]], cb)
    assert qp.indices.tolist() == [2, 0]
    assert np.array_equal(qp.vectors.data, np.eye(3)[[2, 0]])


def test_tie_goes_to_smallest_index():
    codes = np.zeros((6, 2))
    codes[2] = [1.0, 0.0]
    codes[5] = [-1.0, 0.0]
    codes[[0, 1, 3, 4]] = 10.0
    assert quantize(np.array([[0.0, 0.0]]), Codebook(codes)).indices.tolist() == [2]


def test_vectors_bit_identical_to_rows():
    rng = np.random.default_rng(1)
    cb = Codebook(rng.normal(size=(8, 5)).astype(np.float32))
    qp = quantize(rng.normal(size=(3, 4, 5)).astype(np.float32), cb)
    assert np.array_equal(qp.vectors.data, cb.codes.data[qp.indices])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.integers(2, 64), st.integers(0, 2**31))
def test_matches_exhaustive_scan(k, d, seed):
    rng = np.random.default_rng(seed)
    codes = rng.normal(size=(k, d))
    r = rng.normal(size=(4, d))
    assert np.array_equal(quantize(r, Codebook(codes), track=False).indices, brute_force(r, codes))


def test_vq_loss_hand_values():
    r = nx.Parameter(np.array([[1.0, 0.0]]), "r")
    q = nx.Parameter(np.array([[0.0, 0.0]]), "q")
    cb_term, commit = vq_loss(r, q)
    assert cb_term.item() == 1.0 and commit.item() == 1.0
    same = vq_loss(r, nx.Tensor(r.data.copy()))
    assert same[0].item() == 0.0 and same[1].item() == 0.0


def test_vq_loss_routing():
    r = nx.Parameter(np.array([[0.5, -1.0], [2.0, 0.0]]), "r")
    q = nx.Parameter(np.array([[0.0, 1.0], [1.0, 1.0]]), "q")
    cb_term, commit = vq_loss(r, q)
    cb_term.backward()
    assert r.grad is None or not r.grad.any()
    assert q.grad.any()
    nx.zero_grad([r, q])
    commit.backward()
    assert q.grad is None or not q.grad.any()
    assert r.grad.any()


def test_utilization_counts():
    cb = Codebook(np.random.default_rng(0).normal(size=(8, 2)))
    assert utilization(cb, 10) == 0.0
    cb.record(np.array([0, 1, 2, 3, 4]))
    assert utilization(cb, 10) == 0.625
    cb.record(np.arange(8))
    assert utilization(cb, 1) == 1.0


def test_dead_codes_after_reset_and_staleness():
    cb = Codebook(np.random.default_rng(0).normal(size=(4, 2)))
    cb.reset_usage()
    assert dead_codes(cb, 5).size == 0
    cb.tick(3)
    cb.record(np.array([1]))
    cb.tick(3)
    assert dead_codes(cb, 5).tolist() == [0, 2, 3]


def test_never_used_codes_report_none():
    cb = Codebook(np.zeros((2, 1)) + np.array([[0.0], [1.0]]))
    rep = usage_report(cb, 10)
    assert rep["active_fraction"] == 0.0
    assert all(c["last_used_step"] is None for c in rep["codes"])
    assert cb.last_used_step[0] == NEVER


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50), st.lists(st.tuples(st.integers(0, 7), st.integers(0, 20)), max_size=30))
def test_dead_and_active_partition(window, events):
    cb = Codebook(np.random.default_rng(0).normal(size=(8, 3)))
    for code, gap in events:
        cb.tick(gap)
        cb.record(np.array([code]))
    dead = set(dead_codes(cb, window).tolist())
    active = set(np.flatnonzero(cb.current_step - cb.last_used_step < window).tolist())
    assert dead.isdisjoint(active) and dead | active == set(range(8))


def test_select_count_accumulates():
    cb = Codebook(np.random.default_rng(0).normal(size=(5, 2)))
    for _ in range(3):
        quantize(np.random.default_rng(1).normal(size=(2, 4, 2)), cb)
    assert cb.select_count.sum() == 3 * 2 * 4


def test_codebook_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Codebook(np.zeros((1, 3)))
    with pytest.raises(nx.ShapeError):
        quantize(np.zeros((1, 2)), Codebook(np.zeros((3, 3))))

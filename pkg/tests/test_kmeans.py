import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqprompt.kmeans import CodeBuffer, inertia, lloyd_kmeans, revive_dead_codes
from vqprompt.vq import Codebook


def test_analytic_1d_optimum():
    centers = lloyd_kmeans(np.array([0.0, 1.0, 10.0, 11.0]), 2, seed=0)
    assert sorted(centers.ravel().tolist()) == [0.5, 10.5]


def test_k_equals_points():
    pts = np.array([[0.0, 1.0], [3.0, 3.0], [-2.0, 5.0]])
    centers = lloyd_kmeans(pts, 3)
    assert sorted(map(tuple, centers)) == sorted(map(tuple, pts))


def test_too_many_clusters_rejected():
    with pytest.raises(ValueError):
        lloyd_kmeans(np.array([[1.0], [1.0], [2.0]]), 3)


@pytest.mark.parametrize("seed", range(100))
def test_inertia_never_increases(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(60, 3)) + rng.integers(0, 4, size=(60, 1)) * 3.0
    trace = []
    lloyd_kmeans(pts, int(rng.integers(2, 8)), max_iterations=20, seed=seed, trace=trace)
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


def reference_lloyd(points, centers, iterations):
    for _ in range(iterations):
        labels = np.array([np.argmin(((centers - p) ** 2).sum(1)) for p in points])
        for j in range(len(centers)):
            if (labels == j).any():
                centers[j] = points[labels == j].mean(0)
    return centers


def test_matches_reference_from_same_seeding():
    rng = np.random.default_rng(4)
    pts = np.concatenate([rng.normal(loc=c, scale=0.3, size=(30, 2)) for c in ([0, 0], [4, 0], [0, 4])])
    trace = []
    ours = lloyd_kmeans(pts, 3, max_iterations=1, seed=4, trace=trace)
    full = lloyd_kmeans(pts, 3, max_iterations=30, seed=4)
    ref = reference_lloyd(pts, ours.copy(), 29)
    assert inertia(pts, full) <= inertia(pts, ref) + 1e-9


def test_empty_cluster_repair_keeps_k_distinct_centers():
    pts = np.array([[0.0], [0.1], [0.2], [100.0]])
    centers = lloyd_kmeans(pts, 3, seed=1)
    assert len(np.unique(centers, axis=0)) == 3


def test_buffer_overwrites_oldest():
    buf = CodeBuffer(2, capacity=3)
    buf.extend(np.arange(8).reshape(4, 2))
    assert len(buf) == 3
    assert buf.contents()[:, 0].tolist() == [2, 4, 6]
    buf.extend(np.array([[9, 9]]))
    assert buf.contents()[:, 0].tolist() == [4, 6, 9]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.lists(st.integers(1, 5), max_size=10))
def test_buffer_never_exceeds_capacity(cap, chunks):
    buf = CodeBuffer(1, capacity=cap)
    seen = []
    for i, n in enumerate(chunks):
        rows = np.arange(len(seen), len(seen) + n, dtype=float)[:, None]
        seen.extend(rows.ravel().tolist())
        buf.extend(rows)
        assert len(buf) <= cap
    assert buf.contents().ravel().tolist() == seen[-cap:] if seen else len(buf) == 0


def test_revival_not_triggered_when_enough_active():
    cb = Codebook(np.random.default_rng(0).normal(size=(8, 2)))
    cb.record(np.arange(6))
    before = cb.codes.data.copy()
    buf = CodeBuffer(2)
    buf.extend(np.ones((4, 2)))
    assert revive_dead_codes(cb, buf, threshold=4, staleness=10).size == 0
    assert np.array_equal(cb.codes.data, before)


def test_full_replacement_when_all_dead():
    cb = Codebook(np.zeros((4, 2)) + np.arange(4)[:, None])
    cb.tick(100)
    buf = CodeBuffer(2)
    pts = np.array([[10.0, 0.0], [0.0, 10.0], [-10.0, 0.0], [0.0, -10.0]])
    buf.extend(pts)
    replaced = revive_dead_codes(cb, buf, threshold=2, staleness=50)
    assert replaced.tolist() == [0, 1, 2, 3]
    assert sorted(map(tuple, cb.codes.data)) == sorted(map(tuple, pts))
    assert (cb.select_count == 0).all() and (cb.last_used_step == cb.current_step).all()

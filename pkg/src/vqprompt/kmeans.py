"""Lloyd's K-means, codebook initialization and dead-code revival."""

from __future__ import annotations

import logging

import numpy as np

from . import numerics as nx
from .vq import Codebook, dead_codes

log = logging.getLogger(__name__)


class CodeBuffer:
    """Ring buffer of recent continuous prompt rows."""

    def __init__(self, dim: int, capacity: int = 4096, dtype=np.float64):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.data = np.zeros((capacity, dim), dtype=dtype)
        self.cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def extend(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows).reshape(-1, self.data.shape[1])
        if len(rows) >= self.capacity:
            rows = rows[-self.capacity :]
        n = len(rows)
        end = self.cursor + n
        if end <= self.capacity:
            self.data[self.cursor : end] = rows
        else:
            first = self.capacity - self.cursor
            self.data[self.cursor :] = rows[:first]
            self.data[: n - first] = rows[first:]
        self.cursor = end % self.capacity
        self.count = min(self.capacity, self.count + n)

    def contents(self) -> np.ndarray:
        """Stored rows, oldest first."""
        if self.count < self.capacity:
            return self.data[: self.count].copy()
        return np.concatenate([self.data[self.cursor :], self.data[: self.cursor]])


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return (diff * diff).sum(axis=-1)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a center; pick any unused distinct point
            idx = int(np.flatnonzero(closest == closest.max())[0])
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def inertia(points: np.ndarray, centers: np.ndarray) -> float:
    return float(_sq_dists(points, centers).min(axis=1).sum())


def lloyd_kmeans(
    points,
    k: int,
    max_iterations: int = 10,
    seed: int = 0,
    trace: list | None = None,
) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations.

    Stops at an assignment fixpoint or after ``max_iterations``. A cluster that
    empties out claims the point that is currently farthest from its own
    center. ``trace`` (if given) receives the within-cluster sum of squares
    after seeding and after every update.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if len(points) == 0:
        raise ValueError("lloyd_kmeans needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_distinct = len(np.unique(points, axis=0))
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct points")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(points, k, rng)
    labels = None
    if trace is not None:
        trace.append(inertia(points, centers))
    for _ in range(max_iterations):
        d = _sq_dists(points, centers)
        new_labels = d.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own = d[np.arange(len(points)), labels]
            # only steal from clusters that keep at least one member
            donors = counts[labels] > 1
            far = int(np.flatnonzero(donors)[np.argmax(own[donors])])
            counts[labels[far]] -= 1
            labels[far] = j
            counts[j] = 1
            d[far] = 0.0
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        centers = sums / counts[:, None]
        if trace is not None:
            trace.append(inertia(points, centers))
    return centers


def collect_prompts(model, src_batches) -> np.ndarray:
    """Continuous prompt rows for every sentence, flattened to (N * M, D)."""
    rows = []
    with nx.no_grad():
        for src in src_batches:
            rows.append(model.prompt_encoder(src).data.reshape(-1, model.cfg.d_model))
    return np.concatenate(rows).astype(np.float64)


def init_codebook(model, src_batches, size: int, seed: int = 0, max_iterations: int = 10) -> Codebook:
    """K-means centers of the encoder's continuous prompts as a fresh codebook."""
    vectors = collect_prompts(model, src_batches)
    if len(vectors) < size:
        raise ValueError(f"only {len(vectors)} prompt vectors for a codebook of {size}")
    centers = lloyd_kmeans(vectors, size, max_iterations=max_iterations, seed=seed)
    name = model.codebook.codes.name if model.codebook is not None else "vq.codes"
    codebook = Codebook(centers.astype(model.dtype), name=name)
    if model.codebook is not None:
        codebook.current_step = model.codebook.current_step
    codebook.reset_usage()
    return codebook


def revive_dead_codes(
    codebook: Codebook,
    buffer: CodeBuffer,
    threshold: int,
    staleness: int,
    seed: int = 0,
    max_iterations: int = 10,
) -> np.ndarray:
    """Replace dead codes with K-means centers of the buffer when too few are active.

    Returns the replaced indices (empty when the trigger does not fire).
    """
    dead = dead_codes(codebook, staleness)
    n_active = codebook.size - len(dead)
    if n_active >= threshold or len(dead) == 0:
        return np.array([], dtype=np.int64)
    points = buffer.contents()
    if len(points) == 0:
        raise ValueError("revival triggered with an empty code buffer")
    n_distinct = len(np.unique(points, axis=0))
    k = min(len(dead), n_distinct)
    if k < len(dead):
        log.warning("buffer has %d distinct vectors for %d dead codes; replacing %d", n_distinct, len(dead), k)
    centers = lloyd_kmeans(points, k, max_iterations=max_iterations, seed=seed)
    chosen = np.sort(dead)[:k]
    codebook.codes.data[chosen] = centers.astype(codebook.codes.data.dtype)
    codebook.reset_usage(chosen)
    return chosen

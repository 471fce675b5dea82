"""Codebook, nearest-code quantization, the VQ objective and usage tracking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx

# last_used_step of a code that has never been selected
NEVER = np.iinfo(np.int64).min // 2


class Codebook:
    """K x D table of prompt codes plus per-code usage statistics.

    ``current_step`` is advanced once per training step by the trainer.
    Quantizing with tracking enabled stamps the selected codes with it.
    """

    def __init__(self, codes, name: str = "vq.codes"):
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[0] < 2:
            raise ValueError(f"codebook needs shape (K>=2, D), got {codes.shape}")
        if not np.isfinite(codes).all():
            raise nx.NonFiniteError("codebook entries must be finite")
        if codes.dtype not in (np.float32, np.float64):
            codes = codes.astype(nx.get_default_dtype())
        self.codes = nx.Parameter(codes.copy(), name)
        self.select_count = np.zeros(codes.shape[0], dtype=np.int64)
        self.last_used_step = np.full(codes.shape[0], NEVER, dtype=np.int64)
        self.current_step = 0

    @classmethod
    def random(cls, size: int, dim: int, rng: np.random.Generator, scale: float = 1.0, name: str = "vq.codes"):
        dtype = nx.get_default_dtype()
        return cls((rng.standard_normal((size, dim)) * scale).astype(dtype), name=name)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def tick(self, n: int = 1) -> None:
        self.current_step += n

    def record(self, indices: np.ndarray) -> None:
        idx = np.asarray(indices).reshape(-1)
        np.add.at(self.select_count, idx, 1)
        self.last_used_step[idx] = self.current_step

    def reset_usage(self, rows=None) -> None:
        """Zero the counts of ``rows`` (all by default) and treat them as just placed."""
        rows = slice(None) if rows is None else np.asarray(rows, dtype=np.int64)
        self.select_count[rows] = 0
        self.last_used_step[rows] = self.current_step

    def set_codes(self, codes: np.ndarray) -> None:
        codes = np.asarray(codes, dtype=self.codes.data.dtype)
        if codes.shape != self.codes.shape:
            raise ValueError(f"codes shape {codes.shape} != {self.codes.shape}")
        self.codes.data[...] = codes


@dataclass
class QuantizedPrompt:
    vectors: nx.Tensor  # (..., M, D), rows gathered from the codebook
    indices: np.ndarray  # (..., M)


def nearest_codes(r: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the closest code for every row of ``r``; ties go to the smallest index."""
    if r.shape[-1] != codes.shape[-1]:
        raise nx.ShapeError(f"quantize: prompt width {r.shape[-1]} != code width {codes.shape[-1]}")
    if not np.isfinite(r).all():
        raise nx.NonFiniteError("quantize: continuous prompt contains non-finite values")
    diff = r[..., None, :] - codes
    return np.argmin((diff * diff).sum(axis=-1), axis=-1)


def quantize(r, codebook: Codebook, track: bool = True) -> QuantizedPrompt:
    r_data = r.data if isinstance(r, nx.Tensor) else np.asarray(r)
    idx = nearest_codes(r_data, codebook.codes.data)
    if track:
        codebook.record(idx)
    return QuantizedPrompt(nx.embedding(codebook.codes, idx), idx)


def _per_item(dist: nx.Tensor) -> nx.Tensor:
    # dist has shape (..., M): sum over prompt rows, mean over any batch axes
    total = nx.sum(dist, axis=-1)
    if total.data.ndim == 0:
        return total
    return nx.mean(total)


def vq_loss(r: nx.Tensor, q: nx.Tensor) -> tuple[nx.Tensor, nx.Tensor]:
    """(codebook term, commitment term).

    Both have the same forward value. The codebook term only moves ``q``; the
    commitment term only moves ``r``.
    """
    codebook_term = _per_item(nx.sq_l2(nx.stop_gradient(r), q))
    commitment_term = _per_item(nx.sq_l2(r, nx.stop_gradient(q)))
    return codebook_term, commitment_term


straight_through = nx.straight_through


def utilization(codebook: Codebook, window: int) -> float:
    """Fraction of codes selected within the trailing ``window`` steps."""
    if window < 1:
        raise ValueError("window must be >= 1")
    active = codebook.current_step - codebook.last_used_step < window
    return float(active.mean())


def active_codes(codebook: Codebook, window: int) -> np.ndarray:
    return np.flatnonzero(codebook.current_step - codebook.last_used_step < window)


def dead_codes(codebook: Codebook, staleness: int) -> np.ndarray:
    if staleness < 1:
        raise ValueError("staleness must be >= 1")
    return np.flatnonzero(codebook.current_step - codebook.last_used_step >= staleness)


def usage_report(codebook: Codebook, window: int) -> dict:
    active = codebook.current_step - codebook.last_used_step < window
    codes = []
    for k in range(codebook.size):
        last = int(codebook.last_used_step[k])
        codes.append(
            {
                "index": k,
                "select_count": int(codebook.select_count[k]),
                "last_used_step": None if last == NEVER else last,
                "active": bool(active[k]),
            }
        )
    return {
        "size": codebook.size,
        "current_step": codebook.current_step,
        "window": window,
        "active_fraction": float(active.mean()),
        "codes": codes,
    }

"""BLEU, self-BLEU, iBLEU and code-to-rule cluster purity."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .text import tokenize

MAX_ORDER = 4


@dataclass
class MetricConfig:
    alpha: float = 0.8
    max_order: int = MAX_ORDER
    smoothing: float = 1e-9  # sentence level only
    level: str = "corpus"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class BleuStats:
    """Sufficient statistics for BLEU; they add up across sentences."""

    matches: list[int]
    totals: list[int]
    hyp_len: int
    ref_len: int

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats(
            [a + b for a, b in zip(self.matches, other.matches)],
            [a + b for a, b in zip(self.totals, other.totals)],
            self.hyp_len + other.hyp_len,
            self.ref_len + other.ref_len,
        )

    def to_json(self) -> dict:
        return {"matches": self.matches, "totals": self.totals, "hyp_len": self.hyp_len, "ref_len": self.ref_len}


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(candidate: str, references: Sequence[str], max_order: int = MAX_ORDER) -> BleuStats:
    hyp = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not refs:
        raise ValueError("every candidate needs at least one reference")
    matches, totals = [], []
    for n in range(1, max_order + 1):
        h = _ngrams(hyp, n)
        best: Counter = Counter()
        for r in refs:
            best |= _ngrams(r, n)
        matches.append(sum(min(c, best[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    # closest reference length, shorter one on ties
    ref_len = min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
    return BleuStats(matches, totals, len(hyp), ref_len)


def score_from_stats(stats: BleuStats, smoothing: float = 0.0) -> float:
    """BLEU on the 0-100 scale; ``smoothing`` replaces zero match counts."""
    if stats.hyp_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(stats.matches, stats.totals):
        if t == 0:
            if smoothing <= 0:
                return 0.0
            m, t = smoothing, 1
        elif m == 0:
            if smoothing <= 0:
                return 0.0
            m = smoothing
        log_p += math.log(m / t)
    log_p /= len(stats.matches)
    if stats.hyp_len < stats.ref_len:
        log_bp = 1.0 - stats.ref_len / stats.hyp_len
    else:
        log_bp = 0.0
    return 100.0 * math.exp(log_p + log_bp)


def corpus_stats(candidates: Sequence[str], references: Sequence[Sequence[str]], max_order: int = MAX_ORDER):
    if len(candidates) == 0:
        raise ValueError("cannot score an empty candidate list")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference lists")
    per = [sentence_stats(c, refs, max_order) for c, refs in zip(candidates, references)]
    total = per[0]
    for s in per[1:]:
        total = total + s
    return total, per


def bleu(candidates: Sequence[str], references: Sequence[Sequence[str]], config: MetricConfig | None = None) -> float:
    config = config or MetricConfig()
    if config.level == "sentence":
        _, per = corpus_stats(candidates, references, config.max_order)
        return sum(score_from_stats(s, config.smoothing) for s in per) / len(per)
    total, _ = corpus_stats(candidates, references, config.max_order)
    return score_from_stats(total)


def self_bleu(candidates: Sequence[str], inputs: Sequence[str], config: MetricConfig | None = None) -> float:
    """BLEU of each output against its own input as the single reference."""
    if len(candidates) != len(inputs):
        raise ValueError(f"{len(candidates)} candidates but {len(inputs)} inputs")
    return bleu(candidates, [[x] for x in inputs], config)


def ibleu(bleu_score: float, self_bleu_score: float, alpha: float = 0.8) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * bleu_score - (1.0 - alpha) * self_bleu_score


def cluster_purity(assignments: Sequence, labels: Sequence) -> float:
    """Share of samples carrying the majority label of their index-tuple group."""
    if len(assignments) != len(labels):
        raise ValueError(f"{len(assignments)} assignments but {len(labels)} labels")
    if len(assignments) == 0:
        raise ValueError("cluster_purity needs at least one sample")
    groups: dict[tuple, Counter] = {}
    for a, y in zip(assignments, labels):
        groups.setdefault(tuple(int(v) for v in a), Counter())[y] += 1
    return sum(c.most_common(1)[0][1] for c in groups.values()) / len(assignments)


def contingency(assignments: Sequence, labels: Sequence) -> dict[str, dict[str, int]]:
    """rule label -> {code tuple (as "i-j-k-l") -> count}."""
    table: dict[str, dict[str, int]] = {}
    for a, y in zip(assignments, labels):
        key = "-".join(str(int(v)) for v in a)
        row = table.setdefault(str(y), {})
        row[key] = row.get(key, 0) + 1
    return {k: dict(sorted(v.items())) for k, v in sorted(table.items())}


@dataclass
class EvalReport:
    bleu: float
    self_bleu: float
    ibleu: float
    alpha: float
    n: int
    records: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {"bleu": self.bleu, "self_bleu": self.self_bleu, "ibleu": self.ibleu, "alpha": self.alpha, "n": self.n}


def score_outputs(inputs, outputs, references, config: MetricConfig | None = None) -> EvalReport:
    config = config or MetricConfig()
    ref_total, ref_per = corpus_stats(outputs, references, config.max_order)
    self_total, self_per = corpus_stats(outputs, [[x] for x in inputs], config.max_order)
    b = score_from_stats(ref_total)
    s = score_from_stats(self_total)
    records = [
        {
            "input": x,
            "output": y,
            "refs": list(refs),
            "bleu_stats": rs.to_json(),
            "self_bleu_stats": ss.to_json(),
            "sentence_bleu": score_from_stats(rs, config.smoothing),
        }
        for x, y, refs, rs, ss in zip(inputs, outputs, references, ref_per, self_per)
    ]
    return EvalReport(b, s, ibleu(b, s, config.alpha), config.alpha, len(outputs), records)


def report_from_records(records: Sequence[dict], alpha: float = 0.8) -> EvalReport:
    """Rebuild corpus scores from per-sentence records."""

    def total(key):
        stats = [BleuStats(**r[key]) for r in records]
        acc = stats[0]
        for s in stats[1:]:
            acc = acc + s
        return score_from_stats(acc)

    b, s = total("bleu_stats"), total("self_bleu_stats")
    return EvalReport(b, s, ibleu(b, s, alpha), alpha, len(records), list(records))

"""Synthetic template-rule paraphrase corpora and the JSONL cluster format.

A cluster file holds one JSON object per line::

    {"input": "what causes rain ?", "refs": ["why does rain happen ?"], "rule_id": "r09", "filler": "rain"}

``rule_id`` and ``filler`` are optional.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping, Sequence

from .rng import stream

SLOT = "$x"


@dataclass(frozen=True)
class TransformationRule:
    rule_id: str
    source: str
    target: str
    slot_type: str

    def __post_init__(self):
        for side in (self.source, self.target):
            if side.split().count(SLOT) != 1:
                raise ValueError(f"rule {self.rule_id}: template {side!r} must contain exactly one {SLOT}")

    def apply(self, filler: str) -> tuple[str, str]:
        return self.source.replace(SLOT, filler), self.target.replace(SLOT, filler)


@dataclass(frozen=True)
class ParaphraseCluster:
    input: str
    refs: tuple[str, ...]
    rule_id: str | None = None
    filler: str | None = None

    def __post_init__(self):
        if not self.refs:
            raise ValueError(f"cluster {self.input!r} has no references")

    def to_json(self) -> dict:
        d = {"input": self.input, "refs": list(self.refs)}
        if self.rule_id is not None:
            d["rule_id"] = self.rule_id
        if self.filler is not None:
            d["filler"] = self.filler
        return d


@dataclass
class Corpus:
    clusters: list[ParaphraseCluster]
    split: str = "all"
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clusters)

    def __iter__(self) -> Iterator[ParaphraseCluster]:
        return iter(self.clusters)

    def __eq__(self, other) -> bool:
        return isinstance(other, Corpus) and self.clusters == other.clusters

    def pairs(self) -> list[tuple[str, str]]:
        """One (input, reference) training pair per reference."""
        return [(c.input, r) for c in self.clusters for r in c.refs]

    def sentences(self) -> list[str]:
        out = []
        for c in self.clusters:
            out.append(c.input)
            out.extend(c.refs)
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for c in self.clusters:
            h.update(json.dumps(c.to_json(), sort_keys=True).encode("utf-8"))
        return h.hexdigest()[:16]


def load_rules(path=None) -> list[TransformationRule]:
    if path is None:
        raw = resources.files("vqprompt.data").joinpath("rules.json").read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    rules = [TransformationRule(**r) for r in json.loads(raw)]
    ids = [r.rule_id for r in rules]
    if len(set(ids)) != len(ids):
        raise ValueError("rule ids must be unique")
    return rules


def load_fillers(path=None) -> dict[str, list[str]]:
    if path is None:
        raw = resources.files("vqprompt.data").joinpath("fillers.json").read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    return json.loads(raw)


def generate_synthetic(
    rules: Sequence[TransformationRule],
    fillers: Mapping[str, Sequence[str]],
    n_per_rule: int,
    seed: int,
) -> Corpus:
    """Instantiate every rule with ``n_per_rule`` fillers drawn without replacement."""
    rng = stream(seed, "corpus")
    clusters = []
    for rule in rules:
        pool = list(fillers.get(rule.slot_type, ()))
        if len(pool) < n_per_rule:
            raise ValueError(
                f"slot type {rule.slot_type!r} has {len(pool)} fillers, rule {rule.rule_id} needs {n_per_rule}"
            )
        picks = rng.choice(len(pool), size=n_per_rule, replace=False) if n_per_rule else []
        for i in picks:
            filler = pool[int(i)]
            src, tgt = rule.apply(filler)
            clusters.append(ParaphraseCluster(src, (tgt,), rule.rule_id, filler))
    meta = {"generator": "synthetic", "n_per_rule": n_per_rule, "seed": seed, "rules": len(rules)}
    return Corpus(clusters, split="all", seed=seed, meta=meta)


def default_corpus(n_per_rule: int = 150, seed: int = 0) -> Corpus:
    return generate_synthetic(load_rules(), load_fillers(), n_per_rule, seed)


def save_clusters(corpus: Corpus, path) -> None:
    lines = [json.dumps(c.to_json(), ensure_ascii=False) for c in corpus.clusters]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_clusters(path, format: str = "jsonl") -> Corpus:  # noqa: A002
    if format != "jsonl":
        raise ValueError(f"unsupported cluster format {format!r}")
    clusters = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "input" not in obj or "refs" not in obj:
                raise ValueError(f"{path}:{lineno}: a cluster needs 'input' and 'refs'")
            refs = obj["refs"]
            if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
                raise ValueError(f"{path}:{lineno}: 'refs' must be a list of strings")
            if not refs:
                raise ValueError(f"{path}:{lineno}: 'refs' is empty")
            clusters.append(ParaphraseCluster(obj["input"], tuple(refs), obj.get("rule_id"), obj.get("filler")))
    return Corpus(clusters, split=Path(path).stem)


def split(corpus: Corpus, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Corpus, Corpus, Corpus]:
    """Deterministic train/val/test split that never lets a filler cross splits.

    Clusters sharing a filler (or, without one, an input) move together, so
    test fillers are unseen in training.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(corpus)
    if n < 3:
        raise ValueError(f"corpus of {n} clusters is too small to split")
    groups: dict[str, list[ParaphraseCluster]] = {}
    for c in corpus.clusters:
        groups.setdefault(c.filler if c.filler is not None else c.input, []).append(c)
    keys = sorted(groups)
    order = stream(seed, "split").permutation(len(keys))
    want_test = max(1, round(n * ratios[2]))
    want_val = max(1, round(n * ratios[1]))
    test, val, train = [], [], []
    for k in order:
        g = groups[keys[k]]
        if len(test) < want_test:
            test.extend(g)
        elif len(val) < want_val:
            val.extend(g)
        else:
            train.extend(g)
    # keep the source order inside each split
    pos = {id(c): i for i, c in enumerate(corpus.clusters)}
    parts = []
    for name, items in (("train", train), ("val", val), ("test", test)):
        items.sort(key=lambda c: pos[id(c)])
        parts.append(Corpus(items, split=name, seed=seed, meta=dict(corpus.meta, split_seed=seed)))
    return tuple(parts)


def pretraining_lines(
    train: Corpus,
    fillers: Mapping[str, Sequence[str]] | None = None,
    n_random: int = 4000,
    seed: int = 0,
) -> list[str]:
    """Text for LM pretraining.

    The training sentences, the filler lexicon itself, and ``n_random`` lines of
    3-9 lexicon words in random order, so every lexicon word is seen often
    enough for the LM to learn to copy it in any context.
    """
    lines = train.sentences()
    if fillers:
        lexicon = []
        for slot in sorted(fillers):
            lines.extend(fillers[slot])
            lexicon.extend(w for f in fillers[slot] for w in f.split())
        words = sorted(set(lexicon))
        rng = stream(seed, "pretrain-text")
        for _ in range(n_random):
            n = int(rng.integers(3, 10))
            lines.append(" ".join(words[int(i)] for i in rng.integers(0, len(words), size=n)))
    return lines


def rule_counts(corpus: Corpus) -> dict[str, int]:
    counts: dict[str, int] = {}
    for c in corpus.clusters:
        if c.rule_id is not None:
            counts[c.rule_id] = counts.get(c.rule_id, 0) + 1
    return dict(sorted(counts.items()))

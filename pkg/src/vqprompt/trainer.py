"""LM pretraining, two-stage VQ prompt training, and the variant ablation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import Corpus, load_fillers, pretraining_lines
from .kmeans import CodeBuffer, init_codebook, revive_dead_codes
from .metrics import MetricConfig, EvalReport, score_outputs
from .model import Batch, DecodingConfig, ModelConfig, VQPromptModel, make_batch, pad_batch, parameter_digest
from .rng import stream
from .text import BOS, EOS, RESERVED, UNK, Vocabulary, build_vocab, decode, encode
from .vq import Codebook, utilization, vq_loss

log = logging.getLogger(__name__)

VARIANTS = ("lm_only", "vq_naive", "vq_prompt")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainingConfig:
    variant: str = "vq_prompt"
    seed: int = 0
    # model
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    prompt_len: int = 4
    prompt_layers: int = 2
    share_embeddings: bool = True
    max_len: int = 32
    dtype: str = "float32"
    # codebook
    codebook_size: int = 64
    threshold: int = 32
    staleness: int = 200
    util_window: int = 200
    revival_every: int = 50
    buffer_capacity: int = 4096
    kmeans_iterations: int = 10
    init_sample: int = 1024
    naive_codebook_scale: float = 1.0
    # optimisation
    lr: float = 1e-3
    batch_size: int = 32
    warmup_epochs: int = 2
    epochs: int = 20
    vq_weight: float = 1.0
    commitment_weight: float = 1.0
    # LM pretraining
    pretrain_epochs: int = 8
    pretrain_lr: float = 1e-3
    noise: float = 0.15
    pretrain_random_lines: int = 4000
    infill: float = 0.5
    insert: float = 0.5
    # corpus
    n_per_rule: int = 150
    split_ratios: tuple = (0.8, 0.1, 0.1)
    # evaluation
    alpha: float = 0.8
    eval_max: int = 0  # 0 = whole validation split
    max_output_length: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.threshold > self.codebook_size:
            raise ValueError("threshold T must not exceed the codebook size")
        if self.warmup_epochs > self.epochs or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            raise ValueError("warm-up epochs must be fewer than total epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.split_ratios = tuple(self.split_ratios)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    def model_config(self, vocab_size: int, with_prompt: bool = True) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            prompt_len=self.prompt_len if with_prompt else 0,
            prompt_layers=self.prompt_layers,
            share_embeddings=self.share_embeddings,
            max_positions=max(64, self.max_len),
        )

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class LossBreakdown:
    step: int
    j_ml: float
    j_vq: float
    j_total: float
    active_fraction: float | None = None
    revived: int = 0
    stage: str = ""

    def to_json(self) -> dict:
        return asdict(self)


# --- data plumbing -----------------------------------------------------------


@dataclass
class EncodedPairs:
    src: list[tuple[int, ...]]
    tgt: list[tuple[int, ...]]

    def __len__(self) -> int:
        return len(self.src)

    def batch(self, idx) -> Batch:
        return make_batch([self.src[i] for i in idx], [self.tgt[i] for i in idx])


def encode_pairs(pairs: Sequence[tuple[str, str]], vocab: Vocabulary, max_len: int = 32) -> EncodedPairs:
    src = [encode(x, vocab, True, max_len).ids for x, _ in pairs]
    tgt = [encode(y, vocab, True, max_len).ids for _, y in pairs]
    return EncodedPairs(src, tgt)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# --- losses ------------------------------------------------------------------


def ml_loss(model: VQPromptModel, batch: Batch, mode: str | None = None, track: bool = False):
    """Mean token negative log-likelihood under teacher forcing, and the prompt info."""
    logits, info = model.logits(batch, mode, track)
    try:
        return nx.cross_entropy(logits, batch.tgt_out, batch.mask), info
    except nx.NonFiniteError as exc:
        raise nx.NonFiniteError(f"ml_loss: {exc}") from None


def total_loss(model: VQPromptModel, batch: Batch, cfg: TrainingConfig, mode: str | None = None, track: bool = False):
    """(j_total tensor, j_ml tensor, j_vq tensor or None, prompt info)."""
    j_ml, info = ml_loss(model, batch, mode, track)
    if info.q is None:
        return j_ml, j_ml, None, info
    codebook_term, commitment_term = vq_loss(info.r, info.q)
    j_vq = codebook_term + nx.scale(commitment_term, cfg.commitment_weight)
    return j_ml + nx.scale(j_vq, cfg.vq_weight), j_ml, j_vq, info


def loss_breakdown(model, batch, cfg, mode=None, step=0) -> LossBreakdown:
    with nx.no_grad():
        j_total, j_ml, j_vq, _ = total_loss(model, batch, cfg, mode, track=False)
    return LossBreakdown(step, j_ml.item(), 0.0 if j_vq is None else j_vq.item(), j_total.item())


# --- LM pretraining ----------------------------------------------------------


def add_noise(
    ids: Sequence[int],
    rate: float,
    rng: np.random.Generator,
    infill: float = 0.0,
    insert: float = 0.0,
    vocab_size: int = 0,
) -> tuple[int, ...]:
    """Corrupt a framed sequence: span infilling, junk insertion, token masking.

    With probability ``infill`` a span of 0-3 content tokens is replaced by a
    single UNK (length 0 inserts one). With probability ``insert`` 1-3 random
    non-reserved tokens are spliced in somewhere. Every original content token
    is then replaced by UNK with probability ``rate``.
    """
    ids = list(ids)
    body = ids[1:-1]
    if infill > 0 and rng.random() < infill and body:
        start = int(rng.integers(0, len(body) + 1))
        length = int(rng.integers(0, 4))
        body = body[:start] + [UNK] + body[start + length :]
    body = [UNK if rng.random() < rate else t for t in body]
    if insert > 0 and vocab_size > len(RESERVED) and rng.random() < insert:
        at = int(rng.integers(0, len(body) + 1))
        junk = rng.integers(len(RESERVED), vocab_size, size=int(rng.integers(1, 4))).tolist()
        body = body[:at] + junk + body[at:]
    return tuple([ids[0]] + body + [ids[-1]])


def pretrain_lm(
    model: VQPromptModel,
    lines: Sequence[str],
    vocab: Vocabulary,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    noise: float = 0.15,
    seed: int = 0,
    max_len: int = 32,
    infill: float = 0.0,
    insert: float = 0.0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> VQPromptModel:
    """Noisy-reconstruction pretraining of the LM alone (no prompt attached)."""
    if not lines:
        raise ValueError("pretraining corpus is empty")
    clean = [encode(t, vocab, True, max_len).ids for t in lines]
    rng = stream(seed, "pretrain")
    opt = nx.Adam(lr=lr)
    params = [p for p in model.lm.parameters if p.trainable]
    for epoch in range(epochs):
        losses = []
        for idx in epoch_batches(len(clean), batch_size, rng):
            src = [add_noise(clean[i], noise, rng, infill, insert, len(vocab)) for i in idx]
            batch = make_batch(src, [clean[i] for i in idx])
            nx.zero_grad(params)
            try:
                loss, _ = ml_loss(model, batch, mode="none")
            except nx.NonFiniteError as exc:
                raise TrainingDiverged(f"LM pretraining diverged in epoch {epoch}: {exc}") from None
            loss.backward()
            opt.step(params)
            losses.append(loss.item())
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)))
    return model


def reconstruction_accuracy(model: VQPromptModel, lines: Sequence[str], vocab: Vocabulary, max_len: int = 32) -> float:
    """Token accuracy of greedy reconstruction of clean lines (length mismatches count as errors)."""
    seqs = [encode(t, vocab, True, max_len).ids for t in lines]
    hits = total = 0
    for start in range(0, len(seqs), 64):
        chunk = seqs[start : start + 64]
        outs = model.generate(chunk, DecodingConfig(max_output_length=max_len), mode="none")
        for ref, out in zip(chunk, outs):
            gold = list(ref[1:-1])
            total += max(len(gold), len(out))
            hits += sum(a == b for a, b in zip(gold, out))
    return hits / max(total, 1)


# --- generation / evaluation helpers ----------------------------------------


def paraphrase(model: VQPromptModel, sentences: Sequence[str], vocab: Vocabulary, max_len: int = 32,
               decoding: DecodingConfig | None = None, batch_size: int = 64) -> list[str]:
    decoding = decoding or DecodingConfig(max_output_length=max_len)
    out = []
    for start in range(0, len(sentences), batch_size):
        chunk = [encode(s, vocab, True, max_len).ids for s in sentences[start : start + batch_size]]
        out.extend(decode(ids, vocab) for ids in model.generate(chunk, decoding))
    return out


def evaluate_model(model: VQPromptModel, corpus: Corpus, vocab: Vocabulary, config: MetricConfig | None = None,
                   max_len: int = 32, limit: int = 0) -> EvalReport:
    clusters = corpus.clusters[:limit] if limit else corpus.clusters
    inputs = [c.input for c in clusters]
    outputs = paraphrase(model, inputs, vocab, max_len)
    return score_outputs(inputs, outputs, [list(c.refs) for c in clusters], config)


def prompt_assignments(model: VQPromptModel, corpus: Corpus, vocab: Vocabulary, max_len: int = 32) -> np.ndarray:
    seqs = [encode(c.input, vocab, True, max_len).ids for c in corpus.clusters]
    rows = [model.prompt_indices(pad_batch(seqs[i : i + 128])) for i in range(0, len(seqs), 128)]
    return np.concatenate(rows)


# --- experiment setup --------------------------------------------------------


@dataclass
class Experiment:
    cfg: TrainingConfig
    train: Corpus
    val: Corpus
    test: Corpus
    vocab: Vocabulary
    lm_state: dict | None = None
    pretrain_history: list = field(default_factory=list)


def prepare(cfg: TrainingConfig, corpus: Corpus | None = None, splits=None, fillers=None) -> Experiment:
    """Corpus splits and vocabulary (the LM is not pretrained yet)."""
    from .corpus import default_corpus, split

    if splits is None:
        if corpus is None:
            corpus = default_corpus(cfg.n_per_rule, cfg.seed)
        splits = split(corpus, cfg.split_ratios, cfg.seed)
    train, val, test = splits
    if len(train) == 0:
        raise ValueError("training corpus is empty")
    if fillers is None and any(c.filler is not None for c in train.clusters):
        fillers = load_fillers()
    vocab = build_vocab(pretraining_lines(train, fillers))
    return Experiment(cfg, train, val, test, vocab)


def pretrained_lm_state(exp: Experiment, fillers=None) -> dict:
    """Pretrain (once per experiment) and cache the LM parameters."""
    if exp.lm_state is not None:
        return exp.lm_state
    cfg = exp.cfg
    with nx.precision(cfg.np_dtype):
        model = VQPromptModel(cfg.model_config(len(exp.vocab), with_prompt=False), seed=cfg.seed)
    if fillers is None and any(c.filler is not None for c in exp.train.clusters):
        fillers = load_fillers()
    lines = pretraining_lines(exp.train, fillers, cfg.pretrain_random_lines, cfg.seed)
    hist = []
    pretrain_lm(model, lines, exp.vocab, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.batch_size, cfg.noise,
                cfg.seed, cfg.max_len, cfg.infill, cfg.insert, on_epoch=lambda e, l: hist.append({"epoch": e, "loss": l}))
    exp.lm_state = model.lm_state()
    exp.pretrain_history = hist
    return exp.lm_state


def build_model(cfg: TrainingConfig, vocab: Vocabulary, lm_state: dict | None = None) -> VQPromptModel:
    with_prompt = cfg.variant != "lm_only"
    with nx.precision(cfg.np_dtype):
        model = VQPromptModel(cfg.model_config(len(vocab), with_prompt), seed=cfg.seed)
        if with_prompt:
            model.codebook = Codebook.random(
                cfg.codebook_size, cfg.d_model, stream(cfg.seed, "codebook"), cfg.naive_codebook_scale
            )
    if lm_state is not None:
        model.load_state(lm_state)
    if with_prompt:
        model.lm.freeze()
    return model


# --- the training loop -------------------------------------------------------


@dataclass
class TrainResult:
    model: VQPromptModel
    history: list[LossBreakdown]
    val_history: list[dict]
    revivals: list[dict]
    best_state: dict
    best_epoch: int
    optimizer: nx.Adam
    step: int

    @property
    def final_active_fraction(self) -> float | None:
        for h in reversed(self.history):
            if h.active_fraction is not None:
                return h.active_fraction
        return None


def _snapshot(model: VQPromptModel) -> dict:
    snap = {"params": model.state()}
    if model.codebook is not None:
        cb = model.codebook
        snap["codebook"] = (cb.select_count.copy(), cb.last_used_step.copy(), cb.current_step)
    return snap


def _restore(model: VQPromptModel, snap: dict) -> None:
    model.load_state(snap["params"])
    if "codebook" in snap and model.codebook is not None:
        counts, last, step = snap["codebook"]
        model.codebook.select_count[:] = counts
        model.codebook.last_used_step[:] = last
        model.codebook.current_step = step


class Trainer:
    """Runs one variant: optional warm-up, codebook init, then the main stage.

    * ``vq_prompt``: warm-up on continuous prompts, K-means codebook, VQ stage with revival.
    * ``vq_naive``: random codebook, VQ stage for the whole budget, no revival.
    * ``lm_only``: no prompt; the LM itself is fine-tuned.
    """

    def __init__(self, cfg: TrainingConfig, exp: Experiment, model: VQPromptModel | None = None,
                 log_fn: Callable[[dict], None] | None = None):
        self.cfg = cfg
        self.exp = exp
        if model is None:
            model = build_model(cfg, exp.vocab, exp.lm_state)
        self.model = model
        self.data = encode_pairs(exp.train.pairs(), exp.vocab, cfg.max_len)
        self.opt = nx.Adam(lr=cfg.lr)
        self.rng = stream(cfg.seed, "training")
        self.step = 0
        self.history: list[LossBreakdown] = []
        self.val_history: list[dict] = []
        self.revivals: list[dict] = []
        self.buffer = CodeBuffer(cfg.d_model, cfg.buffer_capacity) if model.prompt_encoder is not None else None
        self.log_fn = log_fn

    # one optimisation step; returns the breakdown
    def train_step(self, batch: Batch, mode: str) -> LossBreakdown:
        cfg, model = self.cfg, self.model
        params = model.trainable_parameters()
        nx.zero_grad(params)
        quantized = mode == "quantized"
        try:
            j_total, j_ml, j_vq, info = total_loss(model, batch, cfg, mode, track=quantized)
        except nx.NonFiniteError as exc:
            raise TrainingDiverged(f"step {self.step}: {exc}") from None
        j_total.backward()
        try:
            self.opt.step(params)
        except nx.NonFiniteError as exc:
            raise TrainingDiverged(f"step {self.step}: {exc}") from None
        active = None
        if quantized:
            active = utilization(model.codebook, cfg.util_window)
            self.buffer.extend(info.r.data)
        rec = LossBreakdown(
            self.step, j_ml.item(), 0.0 if j_vq is None else j_vq.item(), j_total.item(), active, 0, mode
        )
        self.step += 1
        if model.codebook is not None and quantized:
            model.codebook.tick()
        return rec

    def _maybe_revive(self, rec: LossBreakdown) -> None:
        cfg = self.cfg
        if cfg.variant != "vq_prompt" or self.step % cfg.revival_every:
            return
        cb = self.model.codebook
        replaced = revive_dead_codes(cb, self.buffer, cfg.threshold, cfg.staleness,
                                     seed=cfg.seed + self.step, max_iterations=cfg.kmeans_iterations)
        if len(replaced):
            self.opt.reset(cb.codes.name, replaced)
            n_active = int(cb.size - len(replaced))
            rec.revived = len(replaced)
            event = {"step": self.step, "active_count": n_active, "replaced": len(replaced)}
            self.revivals.append(event)
            log.info("revived %d dead codes at step %d", len(replaced), self.step)

    def init_codebook(self) -> None:
        cfg, model = self.cfg, self.model
        n = min(cfg.init_sample, len(self.exp.train))
        picks = stream(cfg.seed, "codebook-sample").choice(len(self.exp.train), size=n, replace=False)
        sents = [encode(self.exp.train.clusters[i].input, self.exp.vocab, True, cfg.max_len).ids for i in sorted(picks)]
        batches = [pad_batch(sents[i : i + 128]) for i in range(0, len(sents), 128)]
        old = model.codebook
        cb = init_codebook(model, batches, cfg.codebook_size, seed=cfg.seed, max_iterations=cfg.kmeans_iterations)
        cb.current_step = self.step
        cb.reset_usage()
        old.set_codes(cb.codes.data)
        old.current_step = cb.current_step
        old.reset_usage()
        self.opt.reset(old.codes.name)

    def validate(self, epoch: int) -> dict:
        rep = evaluate_model(self.model, self.exp.val, self.exp.vocab, MetricConfig(alpha=self.cfg.alpha),
                             self.cfg.max_len, self.cfg.eval_max)
        row = {"epoch": epoch, "step": self.step, **rep.summary()}
        self.val_history.append(row)
        return row

    def run(self, max_steps: int | None = None) -> TrainResult:
        cfg, model = self.cfg, self.model
        if len(self.data) == 0:
            raise ValueError("training corpus is empty")
        if cfg.variant == "vq_prompt":
            stages = [("continuous", cfg.warmup_epochs), ("quantized", cfg.epochs - cfg.warmup_epochs)]
        elif cfg.variant == "vq_naive":
            stages = [("quantized", cfg.epochs)]
        else:
            stages = [("none", cfg.epochs)]
        best = _snapshot(model)
        best_score, best_epoch = -math.inf, -1
        last_good = best
        epoch = 0
        for mode, n_epochs in stages:
            if mode == "quantized" and cfg.variant == "vq_prompt" and n_epochs > 0:
                self.init_codebook()
            for _ in range(n_epochs):
                for idx in epoch_batches(len(self.data), cfg.batch_size, self.rng):
                    if max_steps is not None and self.step >= max_steps:
                        break
                    try:
                        rec = self.train_step(self.data.batch(idx), mode)
                    except TrainingDiverged as exc:
                        exc.last_good = last_good
                        raise
                    if mode == "quantized":
                        self._maybe_revive(rec)
                    self.history.append(rec)
                    if self.log_fn is not None:
                        self.log_fn(rec.to_json())
                row = self.validate(epoch)
                last_good = _snapshot(model)
                # warm-up epochs are not eligible: their prompts are continuous
                if mode != "continuous" and row["ibleu"] > best_score:
                    best_score, best_epoch, best = row["ibleu"], epoch, last_good
                epoch += 1
                if max_steps is not None and self.step >= max_steps:
                    break
            if max_steps is not None and self.step >= max_steps:
                break
        return TrainResult(model, self.history, self.val_history, self.revivals, best, best_epoch, self.opt, self.step)


def train(cfg: TrainingConfig, exp: Experiment | None = None, log_fn=None, max_steps=None) -> TrainResult:
    if exp is None:
        exp = prepare(cfg)
    if exp.lm_state is None:
        pretrained_lm_state(exp)
    return Trainer(cfg, exp, log_fn=log_fn).run(max_steps)


def best_model(result: TrainResult) -> VQPromptModel:
    model = copy.deepcopy(result.model)
    _restore(model, result.best_state)
    return model


# --- ablation ----------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    seed: int
    bleu: float
    self_bleu: float
    ibleu: float
    active_fraction: float | None

    def to_json(self) -> dict:
        return asdict(self)


def run_ablation(base: TrainingConfig, seeds: Sequence[int] = (0,), variants: Sequence[str] = VARIANTS,
                 corpus: Corpus | None = None, on_result=None) -> list[AblationRow]:
    """Train every variant under identical seeds/budgets and score the test split."""
    rows = []
    for seed in seeds:
        seed_cfg = _with(base, seed=seed)
        exp = prepare(seed_cfg, corpus)
        pretrained_lm_state(exp)
        for variant in variants:
            cfg = _with(seed_cfg, variant=variant)
            result = Trainer(cfg, exp).run()
            model = best_model(result)
            rep = evaluate_model(model, exp.test, exp.vocab, MetricConfig(alpha=cfg.alpha), cfg.max_len)
            active = None if variant == "lm_only" else result.final_active_fraction
            row = AblationRow(variant, seed, rep.bleu, rep.self_bleu, rep.ibleu, active)
            rows.append(row)
            if on_result is not None:
                on_result(row, result, exp)
    return rows


def _with(cfg: TrainingConfig, **changes) -> TrainingConfig:
    d = cfg.to_dict()
    d.update(changes)
    return TrainingConfig(**d)


def summarize_ablation(rows: Sequence[AblationRow]) -> list[dict]:
    out = []
    for variant in VARIANTS:
        sel = [r for r in rows if r.variant == variant]
        if not sel:
            continue
        act = [r.active_fraction for r in sel if r.active_fraction is not None]
        out.append(
            {
                "variant": variant,
                "seeds": len(sel),
                "bleu": float(np.mean([r.bleu for r in sel])),
                "self_bleu": float(np.mean([r.self_bleu for r in sel])),
                "ibleu": float(np.mean([r.ibleu for r in sel])),
                "active_fraction": float(np.mean(act)) if act else None,
            }
        )
    return out

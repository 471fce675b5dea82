"""Tiny transformer encoder-decoder LM, the prompt encoder, and decoding.

The generative LM reads ``prompt ⊕ embedded input`` on its encoder side: the M
prompt rows are prepended to the position-encoded token embeddings, so with
M = 0 the model is a plain sequence-to-sequence transformer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .text import BOS, EOS, PAD

NEG = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    prompt_len: int = 4
    prompt_layers: int = 1
    share_embeddings: bool = True
    max_positions: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.prompt_len < 0:
            raise ValueError("prompt_len must be >= 0")


@dataclass
class DecodingConfig:
    mode: str = "greedy"
    beam_width: int = 1
    max_output_length: int = 32

    def __post_init__(self):
        if self.mode not in ("greedy", "beam"):
            raise ValueError(f"unknown decoding mode {self.mode!r}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def pad_batch(seqs, pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


class ParamStore:
    """Ordered name -> Parameter map shared by the model components."""

    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, nx.Parameter] = {}

    def normal(self, name: str, shape, std: float) -> nx.Parameter:
        return self.add(name, self.rng.standard_normal(shape) * std)

    def const(self, name: str, shape, value: float) -> nx.Parameter:
        return self.add(name, np.full(shape, value))

    def add(self, name: str, value: np.ndarray) -> nx.Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        p = nx.Parameter(np.asarray(value, dtype=self.dtype), name)
        self.params[name] = p
        return p


# --- building blocks --------------------------------------------------------


def _init_attention(store: ParamStore, prefix: str, d: int) -> None:
    for w in ("q", "k", "v", "o"):
        store.normal(f"{prefix}.w{w}", (d, d), 1.0 / math.sqrt(d))
        store.const(f"{prefix}.b{w}", (d,), 0.0)


def _init_ln(store: ParamStore, prefix: str, d: int) -> None:
    store.const(f"{prefix}.g", (d,), 1.0)
    store.const(f"{prefix}.b", (d,), 0.0)


def _init_ff(store: ParamStore, prefix: str, d: int, f: int) -> None:
    store.normal(f"{prefix}.w1", (d, f), 1.0 / math.sqrt(d))
    store.const(f"{prefix}.b1", (f,), 0.0)
    store.normal(f"{prefix}.w2", (f, d), 1.0 / math.sqrt(f))
    store.const(f"{prefix}.b2", (d,), 0.0)


def _ln(p, prefix, x):
    return nx.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _ff(p, prefix, x):
    h = nx.relu(nx.matmul(x, p[f"{prefix}.w1"]) + p[f"{prefix}.b1"])
    return nx.matmul(h, p[f"{prefix}.w2"]) + p[f"{prefix}.b2"]


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return nx.transpose(nx.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def attention(p, prefix, xq, xkv, mask_add, n_heads):
    """Multi-head scaled dot-product attention; ``mask_add`` is an additive mask."""
    b, tq, d = xq.shape
    q = _split_heads(nx.matmul(xq, p[f"{prefix}.wq"]) + p[f"{prefix}.bq"], n_heads)
    k = _split_heads(nx.matmul(xkv, p[f"{prefix}.wk"]) + p[f"{prefix}.bk"], n_heads)
    v = _split_heads(nx.matmul(xkv, p[f"{prefix}.wv"]) + p[f"{prefix}.bv"], n_heads)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // n_heads))
    if mask_add is not None:
        scores = scores + mask_add
    ctx = nx.matmul(nx.softmax(scores, axis=-1), v)
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    return nx.matmul(ctx, p[f"{prefix}.wo"]) + p[f"{prefix}.bo"]


def _encoder_stack(p, prefix, x, key_mask, n_layers, n_heads):
    for i in range(n_layers):
        lp = f"{prefix}.{i}"
        h = _ln(p, f"{lp}.ln1", x)
        x = x + attention(p, f"{lp}.att", h, h, key_mask, n_heads)
        x = x + _ff(p, f"{lp}.ff", _ln(p, f"{lp}.ln2", x))
    return _ln(p, f"{prefix}.lnf", x)


def _init_encoder_stack(store, prefix, n_layers, d, f):
    for i in range(n_layers):
        lp = f"{prefix}.{i}"
        _init_ln(store, f"{lp}.ln1", d)
        _init_attention(store, f"{lp}.att", d)
        _init_ln(store, f"{lp}.ln2", d)
        _init_ff(store, f"{lp}.ff", d, f)
    _init_ln(store, f"{prefix}.lnf", d)


def key_padding_mask(ids: np.ndarray, n_prefix: int, dtype) -> np.ndarray:
    """Additive mask (B, 1, 1, n_prefix + T) hiding PAD keys; prefix rows stay visible."""
    pad = ids == PAD
    if n_prefix:
        pad = np.concatenate([np.zeros((ids.shape[0], n_prefix), dtype=bool), pad], axis=1)
    return (pad[:, None, None, :] * NEG).astype(dtype)


def causal_mask(t: int, dtype) -> np.ndarray:
    return (np.triu(np.ones((t, t), dtype=bool), k=1) * NEG).astype(dtype)[None, None]


# --- the generative LM -------------------------------------------------------


class GenerativeLM:
    def __init__(self, cfg: ModelConfig, store: ParamStore):
        self.cfg = cfg
        d, f = cfg.d_model, cfg.d_ff
        store.normal("lm.embed", (cfg.vocab_size, d), 1.0)
        _init_encoder_stack(store, "lm.enc", cfg.enc_layers, d, f)
        for i in range(cfg.dec_layers):
            lp = f"lm.dec.{i}"
            _init_ln(store, f"{lp}.ln1", d)
            _init_attention(store, f"{lp}.self", d)
            _init_ln(store, f"{lp}.ln2", d)
            _init_attention(store, f"{lp}.cross", d)
            _init_ln(store, f"{lp}.ln3", d)
            _init_ff(store, f"{lp}.ff", d, f)
        _init_ln(store, "lm.dec.lnf", d)
        store.normal("lm.out.w", (d, cfg.vocab_size), 1.0 / math.sqrt(d))
        store.const("lm.out.b", (cfg.vocab_size,), 0.0)
        self.p = store.params
        self.pos = sinusoid_table(cfg.max_positions, d).astype(store.dtype)
        self.frozen = False

    @property
    def parameters(self) -> list[nx.Parameter]:
        return [p for n, p in self.p.items() if n.startswith("lm.")]

    def freeze(self) -> None:
        for p in self.parameters:
            p.freeze()
        self.frozen = True

    def unfreeze(self) -> None:
        for p in self.parameters:
            p.unfreeze()
        self.frozen = False

    def embed(self, ids: np.ndarray) -> nx.Tensor:
        """Token embeddings plus positions, (B, T, D)."""
        ids = np.asarray(ids)
        if ids.shape[-1] > self.cfg.max_positions:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds {self.cfg.max_positions} positions")
        return nx.embedding(self.p["lm.embed"], ids) + self.pos[: ids.shape[-1]]

    def encode(self, prompt: nx.Tensor | None, src_ids: np.ndarray):
        """Encoder states over ``prompt ⊕ e`` and the matching key mask."""
        e = self.embed(src_ids)
        n_prefix = 0
        if prompt is not None and prompt.shape[1] > 0:
            if prompt.shape[-1] != self.cfg.d_model:
                raise nx.ShapeError(f"prompt width {prompt.shape[-1]} != LM width {self.cfg.d_model}")
            if prompt.shape[0] != e.shape[0]:
                raise nx.ShapeError(f"prompt batch {prompt.shape[0]} != input batch {e.shape[0]}")
            n_prefix = prompt.shape[1]
            e = nx.concat([prompt, e], axis=1)
        mask = key_padding_mask(src_ids, n_prefix, e.dtype)
        memory = _encoder_stack(self.p, "lm.enc", e, mask, self.cfg.enc_layers, self.cfg.n_heads)
        return memory, mask

    def decode(self, memory: nx.Tensor, mem_mask: np.ndarray, tgt_in: np.ndarray) -> nx.Tensor:
        p, cfg = self.p, self.cfg
        x = self.embed(tgt_in)
        t = tgt_in.shape[1]
        self_mask = causal_mask(t, x.dtype)
        for i in range(cfg.dec_layers):
            lp = f"lm.dec.{i}"
            h = _ln(p, f"{lp}.ln1", x)
            x = x + attention(p, f"{lp}.self", h, h, self_mask, cfg.n_heads)
            x = x + attention(p, f"{lp}.cross", _ln(p, f"{lp}.ln2", x), memory, mem_mask, cfg.n_heads)
            x = x + _ff(p, f"{lp}.ff", _ln(p, f"{lp}.ln3", x))
        x = _ln(p, "lm.dec.lnf", x)
        return nx.matmul(x, p["lm.out.w"]) + p["lm.out.b"]

    def forward(self, prompt, src_ids, tgt_in) -> nx.Tensor:
        """Per-position vocabulary logits (B, T, V) under teacher forcing."""
        memory, mask = self.encode(prompt, src_ids)
        return self.decode(memory, mask, tgt_in)


# --- prompt encoder ----------------------------------------------------------


class PromptEncoder:
    """Token states from a small transformer, read out by M learned queries.

    Each query cross-attends over the input's encoder states and yields one
    continuous prompt row, so the output is (B, M, D) for any input length.
    """

    def __init__(self, cfg: ModelConfig, store: ParamStore):
        self.cfg = cfg
        d, f = cfg.d_model, cfg.d_ff
        if not cfg.share_embeddings:
            store.normal("pe.embed", (cfg.vocab_size, d), 1.0)
        _init_encoder_stack(store, "pe.enc", cfg.prompt_layers, d, f)
        store.normal("pe.queries", (max(cfg.prompt_len, 1), d), 1.0)
        _init_ln(store, "pe.lnq", d)
        _init_attention(store, "pe.read", d)
        _init_ln(store, "pe.ln_ff", d)
        _init_ff(store, "pe.ff", d, f)
        _init_ln(store, "pe.lnf", d)
        store.normal("pe.out.w", (d, d), 1.0 / math.sqrt(d))
        store.const("pe.out.b", (d,), 0.0)
        self.p = store.params
        self.pos = sinusoid_table(cfg.max_positions, d).astype(store.dtype)

    @property
    def parameters(self) -> list[nx.Parameter]:
        return [p for n, p in self.p.items() if n.startswith("pe.")]

    def __call__(self, src_ids: np.ndarray) -> nx.Tensor:
        src_ids = np.asarray(src_ids)
        if src_ids.ndim != 2 or src_ids.shape[1] == 0:
            raise ValueError("prompt encoder needs a non-empty (B, n) id batch")
        p, cfg = self.p, self.cfg
        table = p["lm.embed"] if cfg.share_embeddings else p["pe.embed"]
        e = nx.embedding(table, src_ids) + self.pos[: src_ids.shape[1]]
        mask = key_padding_mask(src_ids, 0, e.dtype)
        states = _encoder_stack(p, "pe.enc", e, mask, cfg.prompt_layers, cfg.n_heads)
        b = src_ids.shape[0]
        m = cfg.prompt_len
        queries = nx.embedding(p["pe.queries"], np.broadcast_to(np.arange(m), (b, m)))
        x = queries + attention(p, "pe.read", _ln(p, "pe.lnq", queries), states, mask, cfg.n_heads)
        x = x + _ff(p, "pe.ff", _ln(p, "pe.ln_ff", x))
        return nx.matmul(_ln(p, "pe.lnf", x), p["pe.out.w"]) + p["pe.out.b"]


# --- full model --------------------------------------------------------------


@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.tgt_out != PAD


def make_batch(src_seqs, tgt_seqs) -> Batch:
    """``tgt_seqs`` are framed (BOS ... EOS); input/output are shifted views."""
    tgt = pad_batch(tgt_seqs)
    return Batch(pad_batch(src_seqs), tgt[:, :-1], tgt[:, 1:])


@dataclass
class PromptInfo:
    prompt: nx.Tensor | None
    r: nx.Tensor | None = None
    q: nx.Tensor | None = None
    indices: np.ndarray | None = None


class VQPromptModel:
    """Prompt encoder + codebook + generative LM.

    ``prompt_mode`` selects what the LM sees: ``"none"`` (plain seq2seq),
    ``"continuous"`` (warm-up: r directly) or ``"quantized"`` (codebook rows
    with straight-through gradients).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None, codebook=None):
        from .rng import stream

        self.cfg = cfg
        self.seed = seed
        dtype = dtype or nx.get_default_dtype()
        self.dtype = dtype
        store = ParamStore(stream(seed, "init"), dtype)
        self.lm = GenerativeLM(cfg, store)
        self.prompt_encoder = PromptEncoder(cfg, store) if cfg.prompt_len > 0 else None
        self.params = store.params
        self.codebook = codebook
        self.prompt_mode = "quantized" if cfg.prompt_len > 0 else "none"

    def all_parameters(self) -> list[nx.Parameter]:
        ps = list(self.params.values())
        if self.codebook is not None:
            ps.append(self.codebook.codes)
        return ps

    def trainable_parameters(self) -> list[nx.Parameter]:
        return [p for p in self.all_parameters() if p.trainable]

    def prompt_for(self, src: np.ndarray, mode: str | None = None, track: bool = False) -> PromptInfo:
        from .vq import quantize

        mode = mode or self.prompt_mode
        if mode == "none" or self.prompt_encoder is None:
            return PromptInfo(None)
        r = self.prompt_encoder(src)
        if mode == "continuous":
            return PromptInfo(r, r=r)
        if mode != "quantized":
            raise ValueError(f"unknown prompt mode {mode!r}")
        if self.codebook is None:
            raise RuntimeError("quantized prompts need a codebook")
        qp = quantize(r, self.codebook, track=track)
        return PromptInfo(nx.straight_through(r, qp.vectors), r=r, q=qp.vectors, indices=qp.indices)

    def logits(self, batch: Batch, mode: str | None = None, track: bool = False):
        info = self.prompt_for(batch.src, mode, track)
        return self.lm.forward(info.prompt, batch.src, batch.tgt_in), info

    def prompt_indices(self, src: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return self.prompt_for(src, "quantized", track=False).indices

    # --- generation ----------------------------------------------------------

    def generate(self, src_seqs, config: DecodingConfig | None = None, mode: str | None = None) -> list[list[int]]:
        """Decode every source sequence; returned ids exclude BOS and EOS."""
        config = config or DecodingConfig()
        if config.mode == "beam" and config.beam_width > 1:
            return [self._beam(s, config, mode) for s in src_seqs]
        return self._greedy(src_seqs, config, mode)

    def _memory(self, src: np.ndarray, mode):
        info = self.prompt_for(src, mode, track=False)
        return self.lm.encode(info.prompt, src)

    def _greedy(self, src_seqs, config, mode) -> list[list[int]]:
        with nx.no_grad():
            src = pad_batch(src_seqs)
            memory, mask = self._memory(src, mode)
            b = src.shape[0]
            out = np.full((b, 1), BOS, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            for _ in range(config.max_output_length):
                logits = self.lm.decode(memory, mask, out).data[:, -1]
                nxt = np.argmax(logits, axis=-1)  # first maximum = lowest id on ties
                nxt[done] = PAD
                out = np.concatenate([out, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        results = []
        for row in out[:, 1:]:
            ids = []
            for i in row:
                if i in (EOS, PAD):
                    break
                ids.append(int(i))
            results.append(ids)
        return results

    def _beam(self, src_seq, config, mode) -> list[int]:
        k = config.beam_width
        with nx.no_grad():
            src = pad_batch([src_seq])
            memory, mask = self._memory(src, mode)
            alive = [((BOS,), 0.0)]
            finished: list[tuple[tuple[int, ...], float]] = []
            for _ in range(config.max_output_length):
                n = len(alive)
                prefix = np.array([seq for seq, _ in alive], dtype=np.int64)
                mem = nx.Tensor(np.repeat(memory.data, n, axis=0))
                logits = self.lm.decode(mem, np.repeat(mask, n, axis=0), prefix).data[:, -1].astype(np.float64)
                z = logits - logits.max(axis=-1, keepdims=True)
                logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
                total = (np.array([s for _, s in alive])[:, None] + logp).ravel()
                # stable sort keeps (beam, token) order among equal scores
                top = np.argsort(-total, kind="stable")[:k]
                v = logp.shape[1]
                alive = []
                for flat in top:
                    bi, tok = divmod(int(flat), v)
                    seq = tuple(prefix[bi].tolist()) + (tok,)
                    (finished if tok == EOS else alive).append((seq, float(total[flat])))
                if not alive:
                    break
                if finished and max(s for _, s in finished) >= max(s for _, s in alive):
                    break
            best = max(finished or alive, key=lambda c: c[1])[0]
        return [t for t in best[1:] if t not in (EOS, PAD)]

    # --- state -----------------------------------------------------------------

    def lm_state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.lm.parameters}

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.all_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.all_parameters():
            if p.name in state:
                p.data[...] = state[p.name]


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def parameter_digest(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()[:16]

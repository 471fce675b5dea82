import math

import numpy as np
import pytest

from vqprompt import numerics as nx
from vqprompt.model import make_batch, parameter_digest
from vqprompt.trainer import (
    Trainer,
    add_noise,
    build_model,
    encode_pairs,
    ml_loss,
    pretrain_lm,
    run_ablation,
    summarize_ablation,
    total_loss,
)
from vqprompt.text import BOS, EOS, UNK

from conftest import tiny_config


def test_uniform_logits_give_log_v(tiny_experiment):
    cfg = tiny_config(variant="lm_only")
    model = build_model(cfg, tiny_experiment.vocab)
    for name in ("lm.out.w", "lm.out.b"):
        model.params[name].data[...] = 0.0
    data = encode_pairs(tiny_experiment.train.pairs()[:8], tiny_experiment.vocab)
    loss, _ = ml_loss(model, data.batch(np.arange(8)))
    assert loss.item() == pytest.approx(math.log(len(tiny_experiment.vocab)), rel=1e-5)


def test_overfit_single_pair(tiny_experiment):
    cfg = tiny_config(variant="lm_only")
    with nx.precision(np.float64):
        model = build_model(cfg, tiny_experiment.vocab)
    data = encode_pairs(tiny_experiment.train.pairs()[:1], tiny_experiment.vocab)
    b = data.batch(np.array([0]))
    opt = nx.Adam(lr=3e-3)
    for _ in range(200):
        params = model.trainable_parameters()
        nx.zero_grad(params)
        loss, _ = ml_loss(model, b)
        loss.backward()
        opt.step(params)
    assert loss.item() < 0.05


def test_j_vq_zero_when_r_sits_on_codes(tiny_experiment):
    cfg = tiny_config()
    model = build_model(cfg, tiny_experiment.vocab)
    data = encode_pairs(tiny_experiment.train.pairs()[:4], tiny_experiment.vocab)
    b = data.batch(np.arange(4))
    r = model.prompt_encoder(b.src).data.reshape(-1, cfg.d_model)
    model.codebook.set_codes(r[: cfg.codebook_size])
    j_total, j_ml, j_vq, info = total_loss(model, data.batch(np.arange(2)), cfg, "quantized")
    # with codes equal to the first 8 rows (2 items x M=4), both items sit on codes
    assert j_vq.item() == 0.0 and j_total.item() == j_ml.item()


def test_lm_only_has_no_vq_term(tiny_experiment):
    cfg = tiny_config(variant="lm_only")
    model = build_model(cfg, tiny_experiment.vocab)
    data = encode_pairs(tiny_experiment.train.pairs()[:4], tiny_experiment.vocab)
    _, _, j_vq, _ = total_loss(model, data.batch(np.arange(4)), cfg)
    assert j_vq is None


def surrogate_objective(model, b, cfg):
    """Straight-through surrogate: selection and q - r offset held at their base values."""
    with nx.no_grad():
        info = model.prompt_for(b.src, "quantized")
    r0, q0, idx0 = info.r.data.copy(), info.q.data.copy(), info.indices.copy()

    def fn():
        r = model.prompt_encoder(b.src)
        logits = model.lm.forward(r + (q0 - r0), b.src, b.tgt_in)
        j_ml = nx.cross_entropy(logits, b.tgt_out, b.mask)
        q = nx.embedding(model.codebook.codes, idx0)
        cb_term = nx.mean(nx.sum(nx.sq_l2(nx.Tensor(r0), q), axis=-1))
        commit = nx.mean(nx.sum(nx.sq_l2(r, nx.Tensor(q0)), axis=-1))
        return j_ml + nx.scale(cb_term + nx.scale(commit, cfg.commitment_weight), cfg.vq_weight)

    return fn


def micro_model():
    from vqprompt.model import ModelConfig, VQPromptModel
    from vqprompt.vq import Codebook

    with nx.precision(np.float64):
        model = VQPromptModel(ModelConfig(20, 8, 2, 8, 1, 1, 2, 1), seed=0, dtype=np.float64)
        model.codebook = Codebook.random(4, 8, np.random.default_rng(0))
    model.lm.freeze()
    return model


def test_full_objective_matches_finite_differences():
    cfg = tiny_config(d_model=8, codebook_size=4, threshold=2, prompt_len=2, dtype="float64", commitment_weight=0.25)
    model = micro_model()
    b = make_batch([[1, 5, 6, 7, 2], [1, 8, 9, 2]], [[1, 10, 11, 2], [1, 12, 2]])
    details = {}
    err = nx.finite_difference_check(lambda: total_loss(model, b, cfg, "quantized")[0], model.all_parameters(),
                                     max_coords=6, details=details, numeric_fn=surrogate_objective(model, b, cfg))
    assert err < 1e-4
    assert all(details[p.name] == 0.0 for p in model.lm.parameters)


def test_zero_epochs_leaves_model_unchanged(tiny_experiment):
    cfg = tiny_config(epochs=0, warmup_epochs=0)
    tr = Trainer(cfg, tiny_experiment)
    before = parameter_digest(tr.model.all_parameters())
    tr.run()
    assert parameter_digest(tr.model.all_parameters()) == before


def test_stage_invariants(tiny_experiment):
    cfg = tiny_config(epochs=2, warmup_epochs=1)
    tr = Trainer(cfg, tiny_experiment)
    lm_before = parameter_digest(tr.model.lm.parameters)
    cb_before = parameter_digest([tr.model.codebook.codes])
    orig = tr.validate
    seen = {}

    def spy(epoch):
        if epoch == 0:
            seen["cb_after_warmup"] = parameter_digest([tr.model.codebook.codes])
        return orig(epoch)

    tr.validate = spy
    result = tr.run()
    assert seen["cb_after_warmup"] == cb_before
    assert parameter_digest(tr.model.lm.parameters) == lm_before
    assert result.final_active_fraction is not None


def test_same_seed_same_trace(tiny_experiment):
    cfg = tiny_config(epochs=2, warmup_epochs=1)
    a = Trainer(cfg, tiny_experiment).run(max_steps=12)
    b = Trainer(cfg, tiny_experiment).run(max_steps=12)
    assert [h.to_json() for h in a.history] == [h.to_json() for h in b.history]


def test_add_noise_keeps_framing(rng):
    ids = (BOS, 10, 11, 12, 13, EOS)
    for _ in range(50):
        out = add_noise(ids, 0.3, rng, infill=1.0, insert=1.0, vocab_size=30)
        assert out[0] == BOS and out[-1] == EOS
        assert all(0 <= t < 30 for t in out)
    assert add_noise(ids, 1.0, rng) == (BOS, UNK, UNK, UNK, UNK, EOS)


def test_pretraining_zero_epochs_and_frozen(tiny_experiment):
    cfg = tiny_config(variant="lm_only")
    model = build_model(cfg, tiny_experiment.vocab)
    before = parameter_digest(model.all_parameters())
    pretrain_lm(model, tiny_experiment.train.sentences(), tiny_experiment.vocab, epochs=0)
    assert parameter_digest(model.all_parameters()) == before
    model.lm.freeze()
    pretrain_lm(model, tiny_experiment.train.sentences()[:40], tiny_experiment.vocab, epochs=1)
    assert parameter_digest(model.all_parameters()) == before


def test_ablation_rows_and_summary():
    cfg = tiny_config(epochs=2, warmup_epochs=1)
    rows = run_ablation(cfg, seeds=(0,), corpus=None)
    assert [r.variant for r in rows] == ["lm_only", "vq_naive", "vq_prompt"]
    assert rows[0].active_fraction is None
    assert all(r.active_fraction is not None for r in rows[1:])
    summary = summarize_ablation(rows)
    assert len(summary) == 3 and summary[0]["active_fraction"] is None

import io
import json

import pytest

from vqprompt.cli import main, read_config, write_config
from vqprompt.trainer import TrainingConfig

from conftest import TINY


@pytest.fixture
def desk_cfg(tmp_path):
    path = tmp_path / "desk.cfg"
    lines = ["# tiny settings for tests"] + [f"{k} = {v}" for k, v in TINY.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_config_round_trip(tmp_path):
    cfg = TrainingConfig(lr=0.002, split_ratios=(0.7, 0.2, 0.1), share_embeddings=False, variant="vq_naive")
    write_config(cfg, tmp_path / "c.cfg")
    assert TrainingConfig(**read_config(tmp_path / "c.cfg")) == cfg


def test_unknown_key_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("lr = 0.1\nwarp_speed = 9\n")
    code, _, err = run(["generate-corpus", "--out", tmp_path / "c", "--config", bad], capsys)
    assert code != 0 and "warp_speed" in err and ":2:" in err


def test_unknown_command_and_flag(capsys):
    assert main(["fly"]) != 0
    assert main(["train", "--out", "x", "--warp-speed", "9"]) != 0
    assert main([]) != 0


def test_flags_override_file(tmp_path, desk_cfg, capsys):
    out = tmp_path / "corpus"
    code, _, _ = run(["generate-corpus", "--out", out, "--config", desk_cfg, "--seed", 4], capsys)
    assert code == 0
    meta = json.loads((out / "train.meta.json").read_text())
    assert meta["seed"] == 4 and meta["config"]["n_per_rule"] == TINY["n_per_rule"]
    assert read_config(out / "corpus.cfg")["seed"] == 4


def test_pipeline(tmp_path, desk_cfg, capsys, monkeypatch):
    data = tmp_path / "corpus"
    assert run(["generate-corpus", "--out", data, "--config", desk_cfg], capsys)[0] == 0
    lm = tmp_path / "lm.ckpt"
    assert run(["pretrain-lm", "--out", lm, "--data", data, "--config", desk_cfg], capsys)[0] == 0

    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, _, err = run(["train", "--out", out, "--data", data, "--lm", lm, "--config", desk_cfg, "--seed", 7], capsys)
        assert code == 0, err
        runs.append(out)
    assert (runs[0] / "metrics.json").read_text() == (runs[1] / "metrics.json").read_text()
    assert (runs[0] / "training_curves.png").stat().st_size > 0
    log_lines = (runs[0] / "train_log.jsonl").read_text().splitlines()
    assert {"step", "j_ml", "j_vq", "j_total", "active_fraction", "revived"} <= set(json.loads(log_lines[0]))

    ckpt = runs[0] / "best.ckpt"
    monkeypatch.setattr("sys.stdin", io.StringIO("what causes rain ?\n"))
    code, out, _ = run(["paraphrase", "--checkpoint", ckpt], capsys)
    assert code == 0 and len(out.splitlines()) == 1

    code, out, _ = run(["evaluate", "--checkpoint", ckpt, "--data", data / "test.jsonl"], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["ibleu"] == pytest.approx(rep["alpha"] * rep["bleu"] - (1 - rep["alpha"]) * rep["self_bleu"])
    assert rep["seed"] == 7

    code, out, _ = run(["inspect-codebook", "--checkpoint", ckpt, "--data", data / "test.jsonl",
                        "--out", tmp_path / "inspect"], capsys)
    rep = json.loads(out)
    assert code == 0 and 0.0 <= rep["active_fraction"] <= 1.0
    assert {k: sum(v.values()) for k, v in rep["contingency"].items()} == rep["rule_counts"]
    assert (tmp_path / "inspect" / "code_usage.png").exists()


def test_fresh_checkpoint_has_no_active_codes(tmp_path, desk_cfg, capsys):
    out = tmp_path / "fresh"
    code, _, err = run(["train", "--out", out, "--config", desk_cfg, "--epochs", 0, "--warmup-epochs", 0], capsys)
    assert code == 0, err
    code, text, _ = run(["inspect-codebook", "--checkpoint", out / "final.ckpt"], capsys)
    assert code == 0 and json.loads(text)["active_fraction"] == 0.0


def test_corrupt_checkpoint_diagnostic(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    code, _, err = run(["inspect-codebook", "--checkpoint", bad], capsys)
    assert code != 0 and "section" in err and len(err.strip().splitlines()) == 1


def test_ablate_writes_tsv_and_figure(tmp_path, desk_cfg, capsys):
    out = tmp_path / "abl"
    code, text, err = run(["ablate", "--out", out, "--config", desk_cfg, "--seeds", "0", "--epochs", 2], capsys)
    assert code == 0, err
    rows = text.strip().splitlines()
    assert rows[0].split("\t")[0] == "variant" and len(rows) == 4
    assert rows[1].split("\t")[-1] == "n/a"
    assert (out / "ablation.png").exists() and (out / "ablation.json").exists()

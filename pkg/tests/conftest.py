import sys

import numpy as np
import pytest

from vqprompt.corpus import default_corpus
from vqprompt.trainer import TrainingConfig, prepare

TINY = dict(
    d_model=16, n_heads=2, d_ff=32, enc_layers=1, dec_layers=1, prompt_layers=1,
    codebook_size=8, threshold=4, staleness=10, util_window=10, revival_every=5,
    batch_size=16, epochs=3, warmup_epochs=1, pretrain_epochs=1, pretrain_random_lines=50,
    n_per_rule=6, init_sample=64,
)


def tiny_config(**changes) -> TrainingConfig:
    return TrainingConfig(**{**TINY, **changes})


@pytest.fixture
def tiny_experiment():
    cfg = tiny_config()
    return prepare(cfg, default_corpus(cfg.n_per_rule, cfg.seed))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.summary_lines():
        terminalreporter.write_line(line)

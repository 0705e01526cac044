import numpy as np
import pytest
import torch

from qpa.nanolm import NanoLM, NanoLMConfig, load_corpus, pretrain

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY = NanoLMConfig(d_model=16, n_layers=1, n_heads=2, context=32)


@pytest.fixture(scope="session")
def corpus():
    return load_corpus("bundled:more_essays")


@pytest.fixture(scope="session")
def tiny_base(corpus):
    """A small frozen model, briefly pretrained so its lmhead features are not degenerate."""
    model = NanoLM(TINY, seed=0)
    pretrain(model, corpus, steps=30, seed=0, batch_size=8, lr=3e-3)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

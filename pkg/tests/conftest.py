import numpy as np
import pytest
from hypothesis import settings

from unlearnkit.datasets import ContrastivePair
from unlearnkit.model import ModelConfig, init_model

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

TOY = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, vocab_size=32, max_seq_len=16, init_seed=0)


@pytest.fixture
def toy_config():
    return TOY


@pytest.fixture
def toy_params():
    return init_model(TOY)


def random_pairs(n, seed=0, vocab=32, min_len=3, max_len=9, adv=5, dis=6):
    rng = np.random.default_rng(seed)
    return [
        ContrastivePair(tuple(int(x) for x in rng.integers(4, vocab, rng.integers(min_len, max_len))), adv, dis, "age")
        for _ in range(n)
    ]


@pytest.fixture
def toy_pairs():
    return random_pairs(12)


# acceptance criteria register their verdicts here; the summary prints them
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

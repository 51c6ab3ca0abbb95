import os

import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("ci", max_examples=100, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus():
    from lenctl.templates import SyntheticCorpusParams, gen_synthetic_corpus

    return gen_synthetic_corpus(SyntheticCorpusParams(n_examples=300, vocab_size=200, seed=7))


@pytest.fixture(scope="session")
def tok():
    from lenctl.tokenizer import Tokenizer

    return Tokenizer.build(synthetic_vocab=200, max_number=300)


# --- acceptance summary -----------------------------------------------------------------


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def acceptance(request):
    """Record one verdict line per acceptance criterion."""
    table = request.config._acceptance

    def record(n: int, ok: bool, detail: str) -> None:
        table[n] = (ok, detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = getattr(config, "_acceptance", {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        ok, detail = table[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

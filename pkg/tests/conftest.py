import pytest

from blockprune.corpus import load_sample_corpus
from helpers import ACCEPTANCE, trained_toy


@pytest.fixture(scope="session")
def corpus():
    return load_sample_corpus()


@pytest.fixture(scope="session")
def toy_cache(request):
    return request.config.cache.mkdir("blockprune-toys")


@pytest.fixture(scope="session")
def pretrained8(toy_cache, corpus):
    """8-block d=64 toy trained to its plateau (1200 steps) on the sample corpus."""
    return trained_toy(toy_cache, corpus, n_blocks=8, steps=1200)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])

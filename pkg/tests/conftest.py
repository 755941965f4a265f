import numpy as np
import pytest

from unsupseg import corpus
from unsupseg.contrastive import TrainConfig, train
from unsupseg.encoder import EncoderConfig

ACCEPTANCE_LINES = []


def record_acceptance(criterion, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


SMALL = EncoderConfig(channels=16, projection_dim=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_corpus")
    manifest = corpus.synth_corpus(root, 20, seed=3)
    return corpus.load_corpus(manifest, need_annotations=True)


@pytest.fixture(scope="session")
def small_model(small_corpus):
    """A quickly trained narrow encoder (not accurate; exercises the pipeline)."""
    waves = [w for _, w, _ in small_corpus]
    encoder, history = train(waves[:16], waves[16:], TrainConfig(epochs=2, seed=0), SMALL)
    return encoder, history

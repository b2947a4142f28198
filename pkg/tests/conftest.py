import os

import pytest
from hypothesis import HealthCheck, settings

from binsem.ingest import load_records

DATA = os.path.join(os.path.dirname(__file__), "data")
FIXTURE_CORPUS = os.path.join(DATA, "fixture_corpus.jsonl")

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def fixture_records():
    return load_records(FIXTURE_CORPUS)


@pytest.fixture(scope="session")
def desk_pretrained():
    """Desk-profile encoder pre-trained on the toy MLM corpus: (model, vocab)."""
    from binsem.corpus import build_vocab, encode
    from binsem.encoder import EncoderConfig, OptimizerConfig, pretrain
    from binsem.synth import toy_mlm_corpus

    nfs = toy_mlm_corpus(200, seed=0)
    vocab = build_vocab(nfs)
    cfg = EncoderConfig.desk(len(vocab))
    result = pretrain([encode(x, vocab, cfg.max_seq) for x in nfs], cfg, OptimizerConfig.desk(), seed=0)
    return result.model, vocab


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

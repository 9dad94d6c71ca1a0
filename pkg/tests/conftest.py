import logging

import pytest
import torch

from eventadapt import encoders, synthbench

torch.set_num_threads(1)
logging.getLogger("eventadapt").setLevel(logging.WARNING)

SMALL_SPEC = dict(source_train_sentences=120, source_dev_sentences=40, target_test_sentences=80,
                  target_raw_tokens=3000, source_raw_tokens=3000, sentences_per_doc=10,
                  lexicon_sizes={"V": 12, "N": 12, "E": 14, "J": 8})


@pytest.fixture(scope="session")
def small_bench():
    return synthbench.generate(synthbench.ShiftSpec(seed=3, **SMALL_SPEC))


@pytest.fixture(scope="session")
def tiny_encoder_dir(tmp_path_factory, small_bench):
    """Randomly initialised two-layer BERT with a short position limit (exercises windowing)."""
    texts = [" ".join(s.words) for s in small_bench.source_raw.sentences()]
    texts += ["patient underwent surgery", "extraordinarily unbelievable reconstruction"]
    return encoders.init_encoder(texts, tmp_path_factory.mktemp("tiny_enc"), vocab_size=300, hidden_size=16,
                                 num_layers=4, num_heads=2, intermediate_size=32, max_positions=24, seed=0)


@pytest.fixture(scope="session")
def tiny_encoder(tiny_encoder_dir):
    return encoders.ContextualEncoder.load(str(tiny_encoder_dir))


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

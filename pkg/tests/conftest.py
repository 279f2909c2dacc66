import pytest

from itercqr.data import Session, Turn, build_instances, generate_toy_corpus
from itercqr.generator import GeneratorConfig, GeneratorModel, fit_vocab


def make_session(sid, *turns):
    """``turns`` are (query, answer, gold_pids, topic) tuples."""
    return Session(
        sid,
        [Turn(k, q, a, list(g), topic) for k, (q, a, g, topic) in enumerate(turns, start=1)],
    )


@pytest.fixture(scope="session")
def toy_small():
    sessions, passages, qrels = generate_toy_corpus(0, 4, 3)
    return sessions, passages, qrels, build_instances(sessions)


@pytest.fixture
def tiny_model():
    vocab = fit_vocab(["where is paris located", "what is the weather in paris", "it is sunny"])
    config = GeneratorConfig(embedding_size=8, hidden_size=12, max_decode_len=6, learning_rate=1e-2, seed=3)
    return GeneratorModel(vocab, config)


# one line per acceptance criterion, echoed in the terminal summary so they
# survive output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

import pytest

import fixture_skb
from afretriever.embed import TEXT_ONLY, TEXT_PLUS_RELATIONS, EmbeddingSpace, HashingEmbedder


@pytest.fixture(scope="session")
def skb():
    return fixture_skb.build_skb()


@pytest.fixture(scope="session")
def embedder():
    return HashingEmbedder()


@pytest.fixture(scope="session")
def spaces(skb, embedder):
    return {v: EmbeddingSpace.build(skb, embedder, v) for v in (TEXT_ONLY, TEXT_PLUS_RELATIONS)}


@pytest.fixture
def label_of(skb):
    return lambda v: skb.node(v).label


@pytest.fixture
def node_of(skb):
    return lambda label: fixture_skb.node_id(skb, label)


@pytest.fixture
def make_estimator(skb, embedder, spaces):
    from afretriever import AFRetriever

    def make(chat=None, **params):
        chat = chat if chat is not None else fixture_skb.scripted_provider()
        return AFRetriever(chat_provider=chat, embedding_provider=embedder, **params).fit(skb, spaces=spaces)

    return make


@pytest.fixture
def queries(skb):
    return fixture_skb.query_records(skb)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import pytest
from hypothesis import settings

from curriculum_rl.fixtures import CorpusSizes, synthetic_corpus, synthetic_hierarchy

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def full_store():
    return synthetic_hierarchy()


@pytest.fixture(scope="session")
def small_store():
    return synthetic_hierarchy(leaves=60, principles=180)


@pytest.fixture(scope="session")
def corpus(full_store):
    return synthetic_corpus(full_store, CorpusSizes(), seed=0)


def minimal_tree(principles=1):
    """One root and a single chain down to a level-5 leaf."""
    leaf = {"id": "e", "name": "leaf", "level": 5,
            "principles": [{"id": f"p{i}", "kind": "definition", "statement": "s"}
                           for i in range(principles)]}
    node = leaf
    for level, pid in zip((4, 3, 2, 1), "dcba"):
        node = {"id": pid, "name": pid, "level": level, "children": [node]}
    return node


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)

import pytest

from repal.core import EntitySpan, RelationDefinition, RelationInstance
from repal.synthdata import make_dataset


@pytest.fixture(scope="session")
def synthetic_dataset():
    """Bundled 4-relation dataset: (definitions, gold instances, corpus store)."""
    return make_dataset(seed=0)


@pytest.fixture(scope="session")
def corpus_store(synthetic_dataset):
    return synthetic_dataset[2]


@pytest.fixture
def child_definition():
    return RelationDefinition(
        "P40", "<ENT1> was/is the child (not stepchild) of <ENT0>"
    )


@pytest.fixture
def branch_definition():
    return RelationDefinition(
        "P241",
        "<ENT1> was/is the military branch to which <ENT0> (a military unit, "
        "award, office, or person) belonged/belongs",
    )


@pytest.fixture
def simple_instance():
    return RelationInstance(
        sentence="A b C",
        head=EntitySpan("A", 0, 1),
        tail=EntitySpan("C", 4, 5),
        source="llm-generated",
    )


def make_instance(sentence, head_mention, tail_mention, **kwargs):
    h = sentence.index(head_mention)
    t = sentence.index(tail_mention)
    if t < h + len(head_mention) and h < t + len(tail_mention):
        t = sentence.index(tail_mention, h + len(head_mention))
    return RelationInstance(
        sentence=sentence,
        head=EntitySpan(head_mention, h, h + len(head_mention)),
        tail=EntitySpan(tail_mention, t, t + len(tail_mention)),
        **kwargs,
    )

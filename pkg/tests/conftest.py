"""Shared fixtures: small vocabularies, graphs, spaces and synthetic datasets."""

import numpy as np
import pytest

from src.config import TrainConfig, reset_config
from src.data.graph import BipartiteGraph, EntityClass, TripleStore, Vocabulary
from src.data.synthetic import GenSpec, generate
from src.embedding.space import EmbeddingSpace


@pytest.fixture(autouse=True)
def fresh_config():
    """Every test sees config.yaml defaults only."""
    reset_config()
    yield
    reset_config()


def random_space(num_entities, num_relations, k=4, d=3, seed=0, scale=0.5):
    """Space with random projections so gradients of H are exercised."""
    rng = np.random.default_rng(seed)
    return EmbeddingSpace(
        rng.normal(scale=scale, size=(num_entities, k)),
        rng.normal(scale=scale, size=(num_relations, d)),
        rng.normal(scale=scale, size=(num_relations, k, d)),
    )


@pytest.fixture
def medicine_kg():
    """Six medicines, one target, two relations."""
    vocab = Vocabulary()
    meds = [vocab.intern_entity(f"med_{i}", EntityClass.MEDICINE) for i in range(6)]
    target = vocab.intern_entity("protein_0", EntityClass.OTHER)
    interacts = vocab.intern_relation("interacts_with")
    targets = vocab.intern_relation("targets")
    store = TripleStore(vocab, [
        (meds[0], interacts, meds[1]),
        (meds[2], interacts, meds[3]),
        (meds[0], targets, target),
        (meds[4], targets, target),
        (meds[5], interacts, meds[4]),
    ])
    return vocab, store


@pytest.fixture
def toy_bipartite():
    """3 patients x 4 medicines with integer weights."""
    vocab = Vocabulary()
    patients = [vocab.intern_entity(f"patient_{i}", EntityClass.PATIENT) for i in range(3)]
    meds = [vocab.intern_entity(f"med_{i}", EntityClass.MEDICINE) for i in range(4)]
    graph = BipartiteGraph(vocab, [
        (patients[0], meds[0], 2.0),
        (patients[0], meds[1], 1.0),
        (patients[1], meds[1], 3.0),
        (patients[1], meds[2], 1.0),
        (patients[2], meds[3], 1.0),
        (patients[2], meds[0], 4.0),
    ])
    return vocab, graph


@pytest.fixture
def small_spec():
    """Desk-scale generator settings small enough for unit tests."""
    return GenSpec(
        patients=80,
        diseases=12,
        medicines=16,
        other_entities=8,
        latent_dim=4,
        blocks=2,
        within_rate=0.35,
        across_rate=0.02,
        diagnosis_within_rate=0.3,
        diagnosis_across_rate=0.01,
        interaction_density=0.1,
        similarity_density=0.1,
        target_density=0.1,
        cold_start_fraction=0.125,
        seed=3,
    )


@pytest.fixture
def small_dataset(small_spec):
    return generate(small_spec)


@pytest.fixture
def fast_train_config():
    return TrainConfig(
        dim_entity=8,
        dim_relation=8,
        epochs=3,
        batch_size=32,
        learning_rate=0.02,
        gamma=0.1,
        progress=False,
        seed=0,
    )

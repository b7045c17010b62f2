"""Translation energy, exact softmaxes, corrupted-triple sampling and the triple objective."""

import numpy as np
import pytest

from src.config import EnergyConfig
from src.data.graph import EntityClass, TripleStore, Vocabulary
from src.embedding.kg import (
    corruption_modes,
    energies,
    energy,
    ns_batch_objective_and_grads,
    ns_objective_and_grads,
    sample_negative_batch,
    sample_negative_triples,
    slot_log_distribution,
    triple_log_likelihood,
    triple_plausibility,
)
from src.embedding.space import EmbeddingSpace
from src.errors import SaturatedError, UnknownIdError

from .conftest import random_space


def _identity_space(entity, relation):
    entity = np.asarray(entity, dtype=float)
    relation = np.asarray(relation, dtype=float)
    k, d = entity.shape[1], relation.shape[1]
    projection = np.broadcast_to(np.eye(k, d), (len(relation), k, d)).copy()
    return EmbeddingSpace(entity, relation, projection)


def _tiny_store(triples):
    """Store over entities 'a', 'b' and relation 'r'."""
    vocab = Vocabulary()
    ids = {name: vocab.intern_entity(name, EntityClass.MEDICINE) for name in ('a', 'b')}
    r = vocab.intern_relation('r')
    return ids, r, TripleStore(vocab, [(ids[h], r, ids[t]) for h, t in triples])


class TestEnergy:

    def test_l1_example(self):
        space = _identity_space([[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0]])
        assert energy(space, EnergyConfig(bias=7, norm='L1'), 0, 0, 1) == pytest.approx(5.0)

    def test_l2_example(self):
        space = _identity_space([[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0]])
        assert energy(space, EnergyConfig(bias=7, norm='L2'), 0, 0, 1) == pytest.approx(7 - np.sqrt(2))

    def test_relation_translation_cancels(self):
        space = _identity_space([[1.0, 0.0], [0.0, 1.0]], [[-1.0, 1.0]])
        assert energy(space, EnergyConfig(bias=7), 0, 0, 1) == pytest.approx(7.0)

    def test_never_above_bias(self):
        space = random_space(5, 2, seed=4)
        z = energies(space, EnergyConfig(bias=3.0), np.arange(5), 1, np.arange(5)[::-1])
        assert (z <= 3.0).all()

    def test_projection_applies_to_difference(self):
        space = random_space(3, 1, k=4, d=2, seed=1)
        cfg = EnergyConfig(bias=0.0, norm='L2')
        h, t = space.entity[0], space.entity[2]
        expected = -np.linalg.norm(h @ space.projection[0] + space.relation[0] - t @ space.projection[0])
        assert energy(space, cfg, 0, 0, 2) == pytest.approx(expected)

    def test_unknown_ids(self):
        space = random_space(3, 1)
        with pytest.raises(UnknownIdError):
            energy(space, EnergyConfig(), 0, 0, 3)
        with pytest.raises(UnknownIdError):
            energy(space, EnergyConfig(), 0, 1, 2)

    def test_plausibility_is_sigmoid(self):
        space = _identity_space([[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0]])
        p = triple_plausibility(space, EnergyConfig(bias=2.0), 0, 0, 1)
        assert p == pytest.approx(0.5)


class TestExactSoftmax:

    @pytest.mark.parametrize("slot", ['head', 'tail', 'relation'])
    def test_sums_to_one(self, medicine_kg, slot):
        vocab, store = medicine_kg
        space = random_space(vocab.num_entities, vocab.num_relations, seed=2)
        for triple in store:
            _, log_p = slot_log_distribution(space, EnergyConfig(), store, triple, slot)
            assert np.exp(log_p).sum() == pytest.approx(1.0, abs=1e-12)

    def test_single_entity_graph_is_certain(self):
        ids, r, store = _tiny_store([('a', 'a')])
        space = random_space(2, 1, seed=0)
        assert triple_log_likelihood(space, EnergyConfig(), store, ids['a'], r, ids['a']) == pytest.approx(0.0)

    def test_uniform_energies(self, medicine_kg):
        vocab, store = medicine_kg
        space = EmbeddingSpace(
            np.zeros((vocab.num_entities, 3)),
            np.zeros((vocab.num_relations, 2)),
            np.zeros((vocab.num_relations, 3, 2)),
        )
        h, r, t = next(iter(store))
        expected = -2 * np.log(7) - np.log(2)
        assert triple_log_likelihood(space, EnergyConfig(), store, h, r, t) == pytest.approx(expected)

    def test_not_positive(self, medicine_kg):
        vocab, store = medicine_kg
        space = random_space(vocab.num_entities, vocab.num_relations, seed=5)
        for h, r, t in store:
            assert triple_log_likelihood(space, EnergyConfig(), store, h, r, t) <= 0.0


class TestNegativeSampling:

    def test_corrupted_triples_are_not_facts(self, medicine_kg):
        _, store = medicine_kg
        rng = np.random.default_rng(0)
        for mode in ('head', 'tail', 'relation'):
            count = 1 if mode == 'relation' else 3
            for positive in store:
                for neg in sample_negative_triples(store, positive, count, mode, rng):
                    assert neg not in store

    def test_only_the_corrupted_slot_changes(self, medicine_kg):
        _, store = medicine_kg
        rng = np.random.default_rng(1)
        positive = next(iter(store))
        for h, r, t in sample_negative_triples(store, positive, 5, 'corrupt-tail', rng):
            assert (h, r) == positive[:2]
        for h, r, t in sample_negative_triples(store, positive, 5, 'head', rng):
            assert (r, t) == positive[1:]

    def test_forced_choice(self):
        ids, r, store = _tiny_store([('a', 'a'), ('a', 'b')])
        rng = np.random.default_rng(0)
        for _ in range(3):
            negatives = sample_negative_triples(store, (ids['a'], r, ids['b']), 1, 'head', rng)
            assert negatives == [(ids['b'], r, ids['b'])]

    def test_saturated(self):
        ids, r, store = _tiny_store([('a', 'b'), ('b', 'b')])
        with pytest.raises(SaturatedError):
            sample_negative_triples(store, (ids['a'], r, ids['b']), 1, 'head', np.random.default_rng(0))

    def test_too_few_valid(self):
        ids, r, store = _tiny_store([('a', 'a'), ('a', 'b')])
        with pytest.raises(SaturatedError):
            sample_negative_triples(store, (ids['a'], r, ids['b']), 2, 'head', np.random.default_rng(0))

    def test_unknown_mode(self, medicine_kg):
        _, store = medicine_kg
        with pytest.raises(ValueError):
            sample_negative_triples(store, next(iter(store)), 1, 'sideways', np.random.default_rng(0))

    def test_uniform_over_valid_tails(self, medicine_kg):
        vocab, store = medicine_kg
        positive = (vocab.entity_id("med_0"), vocab.relation_id("targets"), vocab.entity_id("protein_0"))
        rng = np.random.default_rng(11)
        tails = np.array([
            t for _ in range(1000) for _, _, t in sample_negative_triples(store, positive, 6, 'tail', rng)
        ])
        counts = np.bincount(tails, minlength=vocab.num_entities)
        assert counts[positive[2]] == 0
        medicines = vocab.entities_of_class('medicine')
        assert np.all(np.abs(counts[medicines] - 1000) < 150)

    def test_relation_mode_needs_two_relations(self, medicine_kg):
        _, store = medicine_kg
        assert corruption_modes(store) == ('head', 'tail', 'relation')
        _, _, single = _tiny_store([('a', 'b')])
        assert corruption_modes(single) == ('head', 'tail')

    def test_batch_negatives_valid(self, medicine_kg):
        _, store = medicine_kg
        batch = sample_negative_batch(
            store, store.heads, store.relations, store.tails, 4, np.random.default_rng(3),
        )
        assert batch.heads.shape == (len(store), 4)
        for row in np.flatnonzero(batch.valid):
            hits = store.contains_many(batch.heads[row], batch.relations[row], batch.tails[row])
            assert not hits.any()


class TestTripleObjective:

    def test_value_at_equal_vectors(self):
        space = EmbeddingSpace(np.ones((3, 2)), np.zeros((1, 2)), np.zeros((1, 2, 2)))
        value, _ = ns_objective_and_grads(space, EnergyConfig(bias=0.0), (0, 0, 1), [(2, 0, 1)])
        assert value == pytest.approx(2 * np.log(0.5))

    def test_literal_negative_term(self):
        space = EmbeddingSpace(np.ones((3, 2)), np.zeros((1, 2)), np.zeros((1, 2, 2)))
        value, _ = ns_objective_and_grads(space, EnergyConfig(bias=0.0), (0, 0, 1), [(2, 0, 1)], literal=True)
        assert value == pytest.approx(np.log(0.5) + 0.5)

    def test_empty_negatives(self):
        space = random_space(3, 1)
        with pytest.raises(ValueError):
            ns_objective_and_grads(space, EnergyConfig(), (0, 0, 1), [])

    def test_batch_matches_single(self, medicine_kg):
        vocab, store = medicine_kg
        space = random_space(vocab.num_entities, vocab.num_relations, seed=6)
        cfg = EnergyConfig(bias=2.0)
        negatives = sample_negative_batch(
            store, store.heads, store.relations, store.tails, 2, np.random.default_rng(0),
        )
        batch = ns_batch_objective_and_grads(
            space, cfg, store.heads, store.relations, store.tails,
            negatives.heads, negatives.relations, negatives.tails,
        )
        for row, positive in enumerate(store):
            negs = list(zip(negatives.heads[row], negatives.relations[row], negatives.tails[row]))
            value, _ = ns_objective_and_grads(space, cfg, positive, negs)
            assert batch.values[row] == pytest.approx(value)

    def test_gradients_only_touch_used_blocks(self):
        space = random_space(8, 3, seed=7)
        _, grads = ns_objective_and_grads(space, EnergyConfig(), (0, 1, 2), [(5, 1, 2), (0, 2, 2)])
        assert grads.blocks() == {
            ('entity', 0), ('entity', 2), ('entity', 5),
            ('relation', 1), ('relation', 2),
            ('projection', 1), ('projection', 2),
        }

    @pytest.mark.parametrize("norm", ['L1', 'L2'])
    @pytest.mark.parametrize("literal", [False, True])
    def test_finite_differences(self, norm, literal):
        space = random_space(6, 2, k=4, d=3, seed=9)
        cfg = EnergyConfig(bias=1.5, norm=norm)
        positive = (0, 0, 1)
        negatives = [(4, 0, 1), (0, 1, 1), (0, 0, 5)]
        _, grads = ns_objective_and_grads(space, cfg, positive, negatives, literal=literal)

        eps = 1e-6
        for kind, index, grad in grads.items():
            block = space.block(kind, index)
            numeric = np.zeros_like(block)
            for pos in np.ndindex(block.shape):
                saved = block[pos]
                block[pos] = saved + eps
                up, _ = ns_objective_and_grads(space, cfg, positive, negatives, literal=literal)
                block[pos] = saved - eps
                down, _ = ns_objective_and_grads(space, cfg, positive, negatives, literal=literal)
                block[pos] = saved
                numeric[pos] = (up - down) / (2 * eps)
            np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6)

    def test_ascent_step_increases_objective(self):
        space = random_space(6, 2, seed=10)
        cfg = EnergyConfig(bias=1.0, norm='L2')
        positive, negatives = (0, 0, 1), [(3, 0, 1), (0, 0, 4)]
        before, grads = ns_objective_and_grads(space, cfg, positive, negatives)
        grads.apply(space, 1e-3)
        after, _ = ns_objective_and_grads(space, cfg, positive, negatives)
        assert after > before

"""Patient composition, candidate scoring and greedy interaction-penalised selection."""

import itertools

import numpy as np
import pytest

from src.config import EnergyConfig, RecommendConfig
from src.data.graph import EntityClass, Vocabulary
from src.embedding.kg import triple_plausibility
from src.embedding.space import EmbeddingSpace
from src.errors import ConfigError, EmptyCandidatesError, EmptyDiagnosesError, UnknownIdError
from src.recommendation.recommender import (
    MedicineRecommender,
    PatientQuery,
    compose_patient,
    pair_penalties,
    recommend,
    score_candidate,
)

from .conftest import random_space


def _distance(**options) -> RecommendConfig:
    return RecommendConfig(penalty_mode='distance', **options)


def _space(entity, relation=None):
    entity = np.asarray(entity, dtype=float)
    k = entity.shape[1]
    relation = np.zeros((1, k)) if relation is None else np.asarray(relation, dtype=float)
    projection = np.broadcast_to(np.eye(k), (len(relation), k, k)).copy()
    return EmbeddingSpace(entity, relation, projection)


@pytest.fixture
def clinic():
    """Two diseases, four medicines, one interaction relation; ids 0-1 diseases, 2-5 medicines."""
    vocab = Vocabulary()
    for name in ("disease_a", "disease_b"):
        vocab.intern_entity(name, EntityClass.DISEASE)
    for name in ("med_a", "med_b", "med_c", "med_cold"):
        vocab.intern_entity(name, EntityClass.MEDICINE)
    vocab.intern_entity("patient_x", EntityClass.PATIENT)
    vocab.intern_relation("interacts_with")
    space = _space([
        [1.0, 0.0],   # disease_a
        [0.0, 1.0],   # disease_b
        [3.0, 0.0],   # med_a
        [2.0, 5.0],   # med_b
        [1.0, 0.0],   # med_c
        [0.0, 4.0],   # med_cold
        [1.0, 0.0],   # patient_x
    ])
    return vocab, space


class TestComposePatient:

    def test_single_disease(self):
        space = _space([[2.0, -1.0]])
        np.testing.assert_allclose(compose_patient(space, [0]), np.exp(-1) * np.array([2.0, -1.0]))

    def test_identical_diseases(self):
        space = _space([[1.0, 3.0], [1.0, 3.0]])
        expected = (np.exp(-1) + np.exp(-2)) * np.array([1.0, 3.0])
        np.testing.assert_allclose(compose_patient(space, [0, 1]), expected)

    def test_weighted_sum_oracle(self):
        space = random_space(5, 1, seed=3)
        diagnoses = [4, 1, 2]
        expected = sum(np.exp(-(t + 1)) * space.entity[d] for t, d in enumerate(diagnoses))
        np.testing.assert_allclose(compose_patient(space, diagnoses), expected, atol=1e-12)

    def test_recent_first_reverses_weights(self):
        space = _space([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(compose_patient(space, [0, 1], recent_first=True), [np.exp(-2), np.exp(-1)])

    def test_linear_in_disease_vector(self):
        space = _space([[1.5, -2.0]])
        scaled = _space([[4.5, -6.0]])
        np.testing.assert_allclose(compose_patient(scaled, [0]), 3 * compose_patient(space, [0]))

    def test_empty(self):
        with pytest.raises(EmptyDiagnosesError):
            compose_patient(_space([[1.0, 0.0]]), [])

    def test_unknown_disease(self):
        with pytest.raises(UnknownIdError):
            compose_patient(_space([[1.0, 0.0]]), [3])


class TestScoreCandidate:

    def test_no_selection_is_affinity(self, clinic):
        _, space = clinic
        p = np.array([0.5, 0.25])
        assert score_candidate(space, _distance(), p, 3, [], 0) == pytest.approx(0.5 * 2 + 0.25 * 5)

    def test_zero_residual(self):
        space = _space([[1.0, 2.0], [1.0, 2.0]])
        p = np.array([1.0, 1.0])
        assert score_candidate(space, _distance(), p, 0, [1], 0) == pytest.approx(3.0)

    def test_l1_distance_penalty(self, clinic):
        _, space = clinic
        p = np.array([1.0, 0.0])
        # |2 - 3| + |5 - 0| = 6
        assert score_candidate(space, _distance(beta=1.0), p, 3, [2], 0) == pytest.approx(2.0 - 6.0)
        assert score_candidate(space, _distance(beta=0.5), p, 3, [2], 0) == pytest.approx(2.0 - 3.0)

    def test_two_selected_oracle(self):
        space = random_space(6, 1, k=3, d=3, seed=8)
        cfg = _distance(beta=0.7)
        energy = EnergyConfig(norm='L2')
        p = np.array([0.3, -0.2, 0.9])
        m = space.entity
        r = space.relation[0]
        expected = p @ m[5] - 0.7 * (np.linalg.norm(m[5] + r - m[1]) + np.linalg.norm(m[5] + r - m[2]))
        assert score_candidate(space, cfg, p, 5, [1, 2], 0, energy) == pytest.approx(expected, abs=1e-12)

    def test_projected_penalty(self):
        space = random_space(4, 1, k=3, d=2, seed=9)
        cfg = _distance(penalty_projection=True)
        p = np.ones(3)
        m, h, r = space.entity, space.projection[0], space.relation[0]
        expected = p @ m[0] - np.abs((m[0] - m[1]) @ h + r).sum()
        assert score_candidate(space, cfg, p, 0, [1], 0, EnergyConfig(norm='L1')) == pytest.approx(expected)

    def test_unprojected_needs_square(self):
        space = random_space(4, 1, k=3, d=2, seed=9)
        with pytest.raises(ConfigError):
            score_candidate(space, _distance(), np.ones(3), 0, [1], 0)

    def test_monotone_in_residual(self, clinic):
        _, space = clinic
        p = np.array([1.0, 0.0])
        scores = []
        for shift in (0.0, 1.0, 2.5, 4.0):
            moved = space.copy()
            moved.entity[2] += np.array([0.0, -shift])
            scores.append(score_candidate(moved, _distance(), p, 3, [2], 0))
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_plausibility_penalises_fitting_pairs(self):
        space = _space([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]], relation=[[1.0, 0.0]])
        cfg = RecommendConfig(penalty_mode='plausibility')
        energy = EnergyConfig(bias=2.0)
        penalties = pair_penalties(space, cfg, energy, np.array([1, 2]), 0, 0)
        # med 0 + r lands exactly on med 1, so the backward direction reaches sigma(bias)
        assert penalties[0] == pytest.approx(1 / (1 + np.exp(-2.0)))
        assert penalties[1] < penalties[0]
        forward = triple_plausibility(space, energy, np.array([1, 2]), 0, 0)
        backward = triple_plausibility(space, energy, 0, 0, np.array([1, 2]))
        np.testing.assert_allclose(penalties, np.maximum(forward, backward))


class TestGreedyRecommend:

    def test_k1_is_affinity_argmax(self, clinic):
        _, space = clinic
        result = recommend(space, _distance(), PatientQuery(patient=6), 1, [2, 3, 4, 5], 0)
        assert result.medicines() == [2]
        assert result.items[0].penalty == 0.0

    def test_tie_goes_to_lower_id(self):
        space = _space([[1.0, 0.0], [2.0, 1.0], [2.0, 1.0]])
        result = recommend(space, _distance(), PatientQuery(patient=0), 1, [2, 1], 0)
        assert result.medicines() == [1]

    def test_penalty_avoids_interacting_medicine(self, clinic):
        _, space = clinic
        result = recommend(space, _distance(), PatientQuery(patient=6), 2, [2, 3, 4], 0)
        # med_b has the larger affinity (2 > 1) but its residual against med_a is 6, med_c's is 2
        assert result.medicines() == [2, 4]

        p = space.entity[6]
        best = max(
            itertools.permutations([2, 3, 4], 2),
            key=lambda pair: (p @ space.entity[pair[0]]
                              + score_candidate(space, _distance(), p, pair[1], [pair[0]], 0)),
        )
        assert set(best) == set(result.medicines())

    def test_default_penalty_avoids_planted_interaction(self):
        # entity 0 is the patient; med 1 + r lands exactly on med 2, med 3 fits neither
        space = _space([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.9, 3.0]], relation=[[1.0, 0.0]])
        energy = EnergyConfig(bias=2.0)
        query = PatientQuery(patient=0)
        assert recommend(space, RecommendConfig(), query, 2, [1, 2, 3], 0, energy).medicines() == [2, 3]
        assert recommend(space, RecommendConfig(beta=0.0), query, 2, [1, 2, 3], 0, energy).medicines() == [2, 1]
        plausibility = RecommendConfig(penalty_mode='plausibility')
        assert recommend(space, plausibility, query, 2, [1, 2, 3], 0, energy).medicines() == [2, 3]
        # the translation residual is smallest for the interacting pair
        assert recommend(space, _distance(), query, 2, [1, 2, 3], 0, energy).medicines() == [2, 1]

    @pytest.mark.parametrize("cfg", [
        _distance(beta=0.3),
        RecommendConfig(penalty_mode='plausibility', beta=0.3),
        RecommendConfig(),
    ], ids=['distance', 'plausibility', 'partner'])
    def test_scores_match_score_candidate(self, cfg):
        space = random_space(8, 1, k=3, d=3, seed=12)
        candidates = list(range(1, 8))
        result = recommend(space, cfg, PatientQuery(patient=0), 4, candidates, 0)
        p = space.entity[0]
        selected = []
        for item in result.items:
            remaining = [c for c in candidates if c not in selected]
            scores = [score_candidate(space, cfg, p, c, selected, 0, pool=candidates) for c in remaining]
            assert item.score == pytest.approx(max(scores))
            assert item.score == pytest.approx(item.affinity - item.penalty)
            selected.append(item.medicine)

    def test_full_k_is_permutation(self):
        space = random_space(7, 1, k=3, d=3, seed=13)
        candidates = [1, 2, 3, 4, 5, 6]
        result = recommend(space, _distance(), PatientQuery(patient=0), 6, candidates, 0)
        assert sorted(result.medicines()) == candidates

    def test_candidate_order_irrelevant(self):
        space = random_space(7, 1, k=3, d=3, seed=14)
        a = recommend(space, _distance(), PatientQuery(patient=0), 3, [1, 2, 3, 4, 5, 6], 0)
        b = recommend(space, _distance(), PatientQuery(patient=0), 3, [6, 4, 2, 5, 3, 1], 0)
        assert a.medicines() == b.medicines()

    def test_k_larger_than_pool(self, clinic):
        _, space = clinic
        result = recommend(space, _distance(), PatientQuery(patient=6), 10, [2, 3], 0)
        assert len(result) == 2

    def test_exclusions(self, clinic):
        _, space = clinic
        result = recommend(space, _distance(), PatientQuery(patient=6, exclude={2}), 1, [2, 3, 4], 0)
        assert result.medicines() == [3]
        with pytest.raises(EmptyCandidatesError):
            recommend(space, _distance(), PatientQuery(patient=6, exclude={2, 3}), 1, [2, 3], 0)

    def test_new_patient_needs_diagnoses(self, clinic):
        _, space = clinic
        with pytest.raises(EmptyDiagnosesError):
            recommend(space, _distance(), PatientQuery(), 1, [2, 3], 0)

    def test_per_diagnosis_sets(self, clinic):
        _, space = clinic
        cfg = _distance(per_diagnosis=True, beta=0.0)
        result = recommend(space, cfg, PatientQuery(diagnoses=[0, 1]), 1, [2, 3, 4, 5], 0)
        # disease_a favours med_a, disease_b favours med_b (5 > 4)
        assert result.medicines() == [2, 3]
        assert result.k == 2

    def test_per_diagnosis_never_repeats(self, clinic):
        _, space = clinic
        cfg = _distance(per_diagnosis=True, beta=0.0)
        result = recommend(space, cfg, PatientQuery(diagnoses=[0, 0]), 2, [2, 3, 4, 5], 0)
        assert len(set(result.medicines())) == 4

    def test_to_frame(self, clinic):
        vocab, space = clinic
        frame = recommend(space, _distance(), PatientQuery(patient=6), 2, [2, 3, 4], 0).to_frame(vocab)
        assert list(frame.columns) == ['rank', 'medicine', 'score', 'affinity', 'penalty']
        assert list(frame['medicine']) == ['med_a', 'med_c']
        assert list(frame['rank']) == [1, 2]


class TestMedicineRecommender:

    def test_cold_start_medicine_reachable(self, clinic):
        vocab, space = clinic
        recommender = MedicineRecommender(space, vocab, RecommendConfig(k=1), EnergyConfig())
        result = recommender.for_diagnoses(["disease_b"])
        assert [vocab.entity_name(m) for m in result.medicines()] == ["med_b"]
        result = recommender.for_diagnoses(["disease_b"], exclude=["med_b"])
        assert [vocab.entity_name(m) for m in result.medicines()] == ["med_cold"]

    def test_existing_patient_and_candidates(self, clinic):
        vocab, space = clinic
        recommender = MedicineRecommender(space, vocab, RecommendConfig(k=2), EnergyConfig())
        result = recommender.for_patient("patient_x", candidates=["med_c", "med_cold"])
        assert sorted(vocab.entity_name(m) for m in result.medicines()) == ["med_c", "med_cold"]

    def test_wrong_class_rejected(self, clinic):
        vocab, space = clinic
        recommender = MedicineRecommender(space, vocab, RecommendConfig(), EnergyConfig())
        with pytest.raises(UnknownIdError):
            recommender.for_diagnoses(["med_a"])
        with pytest.raises(UnknownIdError):
            recommender.for_patient("disease_a")

    def test_unknown_interaction_relation(self, clinic):
        vocab, space = clinic
        with pytest.raises(UnknownIdError):
            MedicineRecommender(space, vocab, RecommendConfig(interaction_relations=['contraindicates']))

"""Jaccard and DDI metrics, filtered ranking, the co-occurrence baseline and significance tests."""

import random

import numpy as np
import pandas as pd
import pytest

from src.analysis.evaluation import (
    METHOD_ORDER,
    Evaluator,
    InteractionIndex,
    KMostFrequentBaseline,
    cold_start_eval,
    ddi_pair_rate,
    ddi_rate,
    jaccard,
    k_most_frequent_baseline,
    ranking_eval,
)
from src.analysis.statistics import StatisticalTests
from src.config import EnergyConfig, EvalConfig, RecommendConfig
from src.data.graph import BipartiteGraph, EntityClass, TripleStore, Vocabulary, split_edges
from src.data.synthetic import generate
from src.embedding.space import EmbeddingSpace
from src.embedding.trainer import train
from src.errors import EmptyHeldOutError, EmptyReferenceError, LeakageError
from src.recommendation.recommender import PatientQuery

from .conftest import random_space


class TestJaccard:

    def test_identical(self):
        assert jaccard({1, 2}, {2, 1}) == 1.0

    def test_disjoint(self):
        assert jaccard({1, 2}, {3}) == 0.0

    def test_half_overlap(self):
        assert jaccard({'a', 'b', 'c'}, {'b', 'c', 'd'}) == 0.5

    def test_symmetric_and_bounded(self):
        rng = random.Random(0)
        for _ in range(50):
            a = set(rng.sample(range(10), rng.randint(1, 6)))
            b = set(rng.sample(range(10), rng.randint(1, 6)))
            assert jaccard(a, b) == jaccard(b, a)
            assert 0.0 <= jaccard(a, b) <= 1.0

    def test_empty_reference(self):
        with pytest.raises(EmptyReferenceError):
            jaccard({1}, set())


class TestDdiRate:

    @pytest.fixture
    def meds(self, medicine_kg):
        vocab, store = medicine_kg
        return {i: vocab.entity_id(f"med_{i}") for i in range(6)}

    def test_three_of_ten(self, medicine_kg, meds):
        vocab, store = medicine_kg
        interacts = vocab.relation_id("interacts_with")
        sets = [
            [meds[0], meds[1]],
            [meds[2], meds[3], meds[0]],
            [meds[4], meds[5]],
            [meds[0], meds[2]],
            [meds[1], meds[3]],
            [meds[0], meds[4]],
            [meds[1], meds[5]],
            [meds[2]],
            [meds[3], meds[4]],
            [meds[0], meds[5]],
        ]
        assert ddi_rate(sets, store, interacts) == pytest.approx(0.3)
        shuffled = [list(reversed(s)) for s in sets]
        assert ddi_rate(shuffled, store, interacts) == pytest.approx(0.3)

    def test_direction_invariant(self, medicine_kg, meds):
        vocab, store = medicine_kg
        reversed_store = TripleStore(vocab, [(t, r, h) for h, r, t in store])
        sets = [[meds[1], meds[0]], [meds[4], meds[5]], [meds[2], meds[4]]]
        assert ddi_rate(sets, store) == ddi_rate(sets, reversed_store)

    def test_no_interactions(self, meds):
        assert ddi_rate([[meds[0], meds[1]]], None) == 0.0
        assert ddi_rate([], None) == 0.0

    def test_every_set_violates(self, medicine_kg, meds):
        vocab, store = medicine_kg
        sets = [[meds[0], meds[1]], [meds[3], meds[2]]]
        assert ddi_rate(sets, store, vocab.relation_id("interacts_with")) == 1.0

    def test_relation_filter(self, medicine_kg, meds):
        vocab, store = medicine_kg
        index = InteractionIndex(store, vocab.relation_id("targets"))
        assert len(index) == 2
        assert not index.interacts(meds[0], meds[1])

    def test_pair_rate(self, medicine_kg, meds):
        vocab, store = medicine_kg
        rate = ddi_pair_rate([[meds[0], meds[1], meds[2]]], store, vocab.relation_id("interacts_with"))
        assert rate == pytest.approx(1 / 3)


class TestRankingEval:

    def test_single_candidate(self):
        space = random_space(3, 1, seed=0)
        result = ranking_eval(space, [(0, 1)], [1], hits_n=1)
        assert result.hits == 1.0
        assert result.mean_rank == 1.0

    def test_null_model_mean_rank(self):
        rng = np.random.default_rng(0)
        users, items = 1000, 100
        space = EmbeddingSpace(rng.normal(size=(users + items, 4)), np.zeros((1, 4)), np.zeros((1, 4, 4)))
        held_out = [(u, users + int(rng.integers(0, items))) for u in range(users)]
        result = ranking_eval(space, held_out, np.arange(users, users + items))
        assert abs(result.mean_rank - 50.5) < 5

    def test_filtered_items_never_outrank_target(self):
        entity = np.array([[1.0, 0.0], [5.0, 0.0], [4.0, 0.0], [3.0, 0.0]])
        space = EmbeddingSpace(entity, np.zeros((1, 2)), np.zeros((1, 2, 2)))
        vocab = Vocabulary()
        vocab.intern_entity("p", EntityClass.PATIENT)
        for name in ("m1", "m2", "m3"):
            vocab.intern_entity(name, EntityClass.MEDICINE)
        known = BipartiteGraph(vocab, [(0, 1, 1.0)])

        unfiltered = ranking_eval(space, [(0, 3)], [1, 2, 3])
        assert unfiltered.ranks.tolist() == [3]
        filtered = ranking_eval(space, [(0, 3)], [1, 2, 3], known=[known])
        assert filtered.ranks.tolist() == [2]
        assert filtered.normalized_ranks.tolist() == [1.0]

    def test_other_held_out_edges_filtered(self):
        entity = np.array([[1.0, 0.0], [5.0, 0.0], [3.0, 0.0]])
        space = EmbeddingSpace(entity, np.zeros((1, 2)), np.zeros((1, 2, 2)))
        result = ranking_eval(space, [(0, 1), (0, 2)], [1, 2])
        assert result.ranks.tolist() == [1, 1]

    def test_empty_held_out(self):
        result = ranking_eval(random_space(3, 1), [], [1, 2])
        assert result.n == 0
        assert np.isnan(result.mean_rank)


@pytest.fixture
def cooccurrence():
    """One disease with medicine frequencies {m1: 5, m2: 3, m3: 3, m4: 1}; a second disease with one medicine."""
    vocab = Vocabulary()
    patients = [vocab.intern_entity(f"p{i}", EntityClass.PATIENT) for i in range(6)]
    m = {name: vocab.intern_entity(name, EntityClass.MEDICINE) for name in ("m1", "m2", "m3", "m4", "m5")}
    d = {name: vocab.intern_entity(name, EntityClass.DISEASE) for name in ("d1", "d2", "d_unseen")}
    pm_edges = [(patients[i], m["m1"], 1.0) for i in range(5)]
    pm_edges += [(patients[i], m["m3"], 2.0) for i in range(3)]
    pm_edges += [(patients[i], m["m2"], 1.0) for i in range(3)]
    pm_edges += [(patients[0], m["m4"], 1.0), (patients[5], m["m5"], 1.0)]
    pd_edges = [(patients[i], d["d1"], 1.0) for i in range(5)] + [(patients[5], d["d2"], 1.0)]
    return vocab, m, d, pm_edges, pd_edges


class TestKMostFrequentBaseline:

    def test_top_two_with_tie_break(self, cooccurrence):
        vocab, m, d, pm_edges, pd_edges = cooccurrence
        result = k_most_frequent_baseline(
            BipartiteGraph(vocab, pm_edges), BipartiteGraph(vocab, pd_edges, merge='dedup'), [d["d1"]], k=2,
        )
        assert result.medicines == {m["m1"], m["m2"]}
        assert result.unseen_diseases == []

    def test_single_cooccurring_medicine(self, cooccurrence):
        vocab, m, d, pm_edges, pd_edges = cooccurrence
        baseline = KMostFrequentBaseline(BipartiteGraph(vocab, pm_edges), BipartiteGraph(vocab, pd_edges), k=3)
        assert baseline.query([d["d2"]]).medicines == {m["m5"]}

    def test_unseen_disease_flagged(self, cooccurrence):
        vocab, m, d, pm_edges, pd_edges = cooccurrence
        baseline = KMostFrequentBaseline(BipartiteGraph(vocab, pm_edges), BipartiteGraph(vocab, pd_edges), k=3)
        result = baseline.query([d["d_unseen"]])
        assert result.medicines == set()
        assert result.unseen_diseases == [d["d_unseen"]]

    def test_exclusions_skip_to_next(self, cooccurrence):
        vocab, m, d, pm_edges, pd_edges = cooccurrence
        query = PatientQuery(diagnoses=[d["d1"]], exclude={m["m1"]})
        result = k_most_frequent_baseline(BipartiteGraph(vocab, pm_edges), BipartiteGraph(vocab, pd_edges), query, k=2)
        assert result.medicines == {m["m2"], m["m3"]}

    def test_edge_order_irrelevant(self, cooccurrence):
        vocab, m, d, pm_edges, pd_edges = cooccurrence
        shuffled_pm, shuffled_pd = list(pm_edges), list(pd_edges)
        random.Random(4).shuffle(shuffled_pm)
        random.Random(5).shuffle(shuffled_pd)
        original = KMostFrequentBaseline(BipartiteGraph(vocab, pm_edges), BipartiteGraph(vocab, pd_edges), k=2)
        shuffled = KMostFrequentBaseline(BipartiteGraph(vocab, shuffled_pm), BipartiteGraph(vocab, shuffled_pd), k=2)
        for disease in d.values():
            assert original.query([disease]).medicines == shuffled.query([disease]).medicines


class TestColdStartEval:

    def test_leakage(self, toy_bipartite):
        vocab, graph = toy_bipartite
        space = random_space(vocab.num_entities, 1)
        with pytest.raises(LeakageError):
            cold_start_eval(space, [(0, 3)], [3, 4, 5, 6], graph)

    def test_empty_held_out(self, toy_bipartite):
        vocab, graph = toy_bipartite
        with pytest.raises(EmptyHeldOutError):
            cold_start_eval(random_space(vocab.num_entities, 1), [], [3, 4], graph)

    def test_unseen_medicine_ranked(self, toy_bipartite):
        vocab, graph = toy_bipartite
        new_med = vocab.intern_entity("med_new", EntityClass.MEDICINE)
        space = random_space(vocab.num_entities, 1, seed=2)
        result = cold_start_eval(space, [(0, new_med)], [3, 4, 5, 6, new_med], graph, hits_n=10)
        assert result.n == 1
        assert result.hits == 1.0


class TestStatistics:

    def test_significance_labels(self):
        tests = StatisticalTests([0.01, 0.05, 0.10])
        assert tests._get_significance_level(0.005) == '***'
        assert tests._get_significance_level(0.03) == '**'
        assert tests._get_significance_level(0.07) == '*'
        assert tests._get_significance_level(0.2) == 'ns'

    def test_paired_comparison_detects_winner(self):
        method = pd.Series(np.linspace(0.5, 0.9, 30))
        baseline = method - np.linspace(0.05, 0.2, 30)
        result = StatisticalTests([0.01, 0.05, 0.10]).paired_comparison(method, baseline)
        assert result['sign_test']['valid']
        assert result['sign_test']['n_positive'] == 30
        assert result['wilcoxon_test']['p_value'] < 0.01

    def test_all_ties_invalid(self):
        scores = pd.Series([0.5] * 10)
        result = StatisticalTests().paired_comparison(scores, scores)
        assert not result['sign_test']['valid']
        assert not result['wilcoxon_test']['valid']

    def test_ranks_below_chance(self):
        result = StatisticalTests([0.01, 0.05, 0.10]).rank_vs_chance(pd.Series(np.linspace(0.05, 0.3, 20)))
        assert result['t_test']['p_value'] < 0.01
        assert result['t_test']['significance_level'] == '***'

    def test_summary_table(self):
        tests = StatisticalTests([0.01, 0.05, 0.10])
        results = {'ranks': tests.rank_vs_chance(pd.Series(np.linspace(0.05, 0.3, 20)))}
        table = tests.create_summary_table(results)
        assert list(table['test']) == ['t_test', 'wilcoxon_test']
        assert (table['comparison'] == 'ranks').all()


def _train_and_evaluate(dataset, config):
    split = split_edges(dataset.pm_graph, seed=42)
    space, _ = train({
        'kg_medicine': dataset.kg_medicine,
        'kg_disease': dataset.kg_disease,
        'pm_graph': split.train,
        'pd_graph': dataset.pd_graph,
    }, config)
    evaluator = Evaluator(space, dataset, split, config.energy, RecommendConfig(), EvalConfig(), progress=False)
    return evaluator.run(), split


class TestEvaluator:

    @pytest.fixture
    def report(self, small_dataset, fast_train_config):
        return _train_and_evaluate(small_dataset, fast_train_config)

    def test_rerun_is_identical(self, report, small_spec, fast_train_config):
        first, _ = report
        second, _ = _train_and_evaluate(generate(small_spec), fast_train_config)
        assert second.to_frame().equals(first.to_frame())
        assert second.records.equals(first.records)
        assert second.statistics == first.statistics
        assert second.to_frame().to_csv(sep='\t') == first.to_frame().to_csv(sep='\t')

    def test_method_rows(self, report):
        result, _ = report
        assert list(result.methods['method']) == METHOD_ORDER
        assert result.methods['mean_jaccard'].between(0, 1).all()
        assert result.methods['ddi_rate'].between(0, 1).all()
        assert 0.0 <= result.mean_jaccard <= 1.0

    def test_records(self, report):
        result, _ = report
        assert set(result.records['method']) == set(METHOD_ORDER)
        assert (result.records.groupby('method').size() == result.methods['queries'].iloc[0]).all()
        smr = result.records[result.records['method'] == 'smr']
        assert (smr['set_size'] <= 3).all()

    def test_ranking_and_cold_start(self, report, small_dataset):
        result, split = report
        assert result.ranking.n == len(split.test)
        assert result.cold_start is not None
        assert result.cold_start.n == len(small_dataset.ground_truth.cold_start_edges)
        frame = result.to_frame()
        assert {'ranking', 'cold_start'} <= set(frame['method'])
        assert 'hits_at_10' in frame.columns

    def test_statistics_attached(self, report):
        result, _ = report
        assert 'smr_vs_k_most_frequent' in result.statistics

    def test_cold_start_medicines_never_recommended(self, report, small_dataset):
        result, _ = report
        cold = set(small_dataset.ground_truth.cold_start_medicines)
        assert cold
        recommended = result.records[result.records['method'] != 'k_most_frequent']['recommended']
        names = {name for row in recommended for name in row.split(',') if name}
        assert names
        assert not names & cold

    def test_warm_candidates(self, small_dataset):
        vocab = small_dataset.vocab
        split = split_edges(small_dataset.pm_graph, seed=42)
        space = EmbeddingSpace.initialize(vocab.num_entities, vocab.num_relations, 4, 4, np.random.default_rng(0))
        evaluator = Evaluator(space, small_dataset, split, EnergyConfig(), RecommendConfig(), EvalConfig(),
                              progress=False)
        cold = {vocab.entity_id(name) for name in small_dataset.ground_truth.cold_start_medicines}
        warm = set(evaluator.warm_medicines.tolist())
        assert warm == set(small_dataset.pm_graph.items.tolist())
        assert not warm & cold
        assert cold <= set(evaluator.medicines.tolist())

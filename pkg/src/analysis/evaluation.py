"""Recommendation metrics, ranking protocols and the K-most-frequent baseline."""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from ..config import EnergyConfig, EvalConfig, RecommendConfig, get_config
from ..data.graph import BipartiteGraph, DatasetSplit, EntityClass, HeterogeneousDataset, TripleStore
from ..embedding.space import EmbeddingSpace
from ..errors import EmptyHeldOutError, EmptyReferenceError, LeakageError
from ..recommendation.recommender import MedicineRecommender, PatientQuery
from .statistics import StatisticalTests

logger = logging.getLogger(__name__)

EdgeInput = Union[BipartiteGraph, Iterable[Tuple[int, ...]]]


def jaccard(recommended: Iterable[int], reference: Iterable[int]) -> float:
    """|A & B| / |A | B| against a nonempty reference set."""
    recommended, reference = set(recommended), set(reference)
    if not reference:
        raise EmptyReferenceError("Jaccard needs a nonempty reference set")
    return len(recommended & reference) / len(recommended | reference)


class InteractionIndex:
    """Unordered interacting medicine pairs (symmetric closure of the interaction triples)."""

    def __init__(self, store: Optional[TripleStore], relations: Union[int, Sequence[int], None] = None):
        """
        Args:
            store: Medicine knowledge graph (None or empty for no interactions)
            relations: Interaction relation id(s); all relations when None
        """
        self.pairs: Set[FrozenSet[int]] = set()
        if store is None or len(store) == 0:
            return
        if relations is not None:
            relations = {int(relations)} if np.isscalar(relations) else {int(r) for r in relations}
        for h, r, t in store:
            if h != t and (relations is None or r in relations):
                self.pairs.add(frozenset((h, t)))

    def __len__(self) -> int:
        return len(self.pairs)

    def interacts(self, a: int, b: int) -> bool:
        return frozenset((int(a), int(b))) in self.pairs

    def violations(self, medicines: Iterable[int]) -> List[Tuple[int, int]]:
        """Interacting pairs inside one set, each pair once."""
        meds = sorted(set(int(m) for m in medicines))
        return [(a, b) for i, a in enumerate(meds) for b in meds[i + 1:] if self.interacts(a, b)]


def _index(interactions, relation) -> InteractionIndex:
    if isinstance(interactions, InteractionIndex):
        return interactions
    return InteractionIndex(interactions, relation)


def ddi_rate(
    recommendations: Sequence[Iterable[int]],
    interactions: Union[TripleStore, InteractionIndex, None],
    relation: Union[int, Sequence[int], None] = None
) -> float:
    """
    Fraction of recommendation sets holding at least one interacting pair.

    Args:
        recommendations: Medicine sets
        interactions: Medicine KG (or a prebuilt InteractionIndex)
        relation: Interaction relation id(s)

    Returns:
        Rate in [0, 1]; 0 for no sets
    """
    if len(recommendations) == 0:
        return 0.0
    index = _index(interactions, relation)
    return sum(1 for meds in recommendations if index.violations(meds)) / len(recommendations)


def ddi_pair_rate(
    recommendations: Sequence[Iterable[int]],
    interactions: Union[TripleStore, InteractionIndex, None],
    relation: Union[int, Sequence[int], None] = None
) -> float:
    """Interacting pairs over all medicine pairs of all sets."""
    index = _index(interactions, relation)
    pairs = violating = 0
    for meds in recommendations:
        n = len(set(meds))
        pairs += n * (n - 1) // 2
        violating += len(index.violations(meds))
    return violating / pairs if pairs else 0.0


@dataclass
class RankingResult:
    """Filtered ranks of held-out edges."""

    hits: float
    mean_rank: float
    n: int
    ranks: np.ndarray = field(default_factory=lambda: np.empty(0))
    normalized_ranks: np.ndarray = field(default_factory=lambda: np.empty(0))
    hits_n: int = 10


def _edge_arrays(edges: EdgeInput) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(edges, BipartiteGraph):
        return edges.users, edges.items
    rows = [(int(e[0]), int(e[1])) for e in edges]
    arr = np.array(rows, dtype=np.int64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def ranking_eval(
    space: EmbeddingSpace,
    held_out: EdgeInput,
    candidates: Sequence[int],
    hits_n: int = 10,
    known: Optional[Sequence[BipartiteGraph]] = None
) -> RankingResult:
    """
    Filtered link-prediction ranking of held-out user-item edges.

    Each target is ranked among the candidates by p . m; items the user is
    known to have (in any ``known`` graph or elsewhere in ``held_out``) are
    removed before ranking, except the target itself. Rank is 1 plus the
    number of remaining candidates scoring strictly higher.

    Args:
        space: Embedding parameters
        held_out: Edges to rank
        candidates: Item ids ranked against
        hits_n: N of hits@N
        known: Graphs whose edges are filtered

    Returns:
        RankingResult (hits is the fraction of ranks <= N)
    """
    users, items = _edge_arrays(held_out)
    cand = np.unique(np.asarray(candidates, dtype=np.int64))
    if len(users) == 0:
        logger.warning("Ranking requested on an empty held-out set")
        return RankingResult(hits=float('nan'), mean_rank=float('nan'), n=0, hits_n=hits_n)

    positives: Dict[int, Set[int]] = {}
    for graph in known or []:
        for u, i, _ in graph:
            positives.setdefault(u, set()).add(i)
    for u, i in zip(users.tolist(), items.tolist()):
        positives.setdefault(u, set()).add(i)

    ranks = np.empty(len(users), dtype=np.int64)
    sizes = np.empty(len(users), dtype=np.int64)
    cand_vecs = space.entity[cand]
    for n, (u, target) in enumerate(zip(users.tolist(), items.tolist())):
        scores = cand_vecs @ space.entity[u]
        target_score = float(space.entity[target] @ space.entity[u])
        filtered = np.isin(cand, list(positives.get(u, ())))
        higher = (scores > target_score) & ~filtered
        ranks[n] = 1 + int(higher.sum())
        sizes[n] = int((~filtered).sum()) + 1

    normalized = np.where(sizes > 1, (ranks - 1) / np.maximum(sizes - 1, 1), 0.0)
    return RankingResult(
        hits=float(np.mean(ranks <= hits_n)),
        mean_rank=float(np.mean(ranks)),
        n=len(ranks),
        ranks=ranks,
        normalized_ranks=normalized,
        hits_n=hits_n,
    )


@dataclass
class BaselineResult:
    medicines: Set[int]
    unseen_diseases: List[int]


class KMostFrequentBaseline:
    """Top-K medicines co-occurring with each disease across training patients."""

    def __init__(self, train_edges: BipartiteGraph, pd_edges: BipartiteGraph, k: int = 3):
        """
        Fit the co-occurrence table.

        Args:
            train_edges: Patient-medicine training edges
            pd_edges: Patient-disease edges
            k: Medicines per disease
        """
        self.k = k
        pm = pd.DataFrame({'patient': train_edges.users, 'medicine': train_edges.items})
        pdx = pd.DataFrame({'patient': pd_edges.users, 'disease': pd_edges.items})
        pairs = pm.merge(pdx, on='patient').drop_duplicates(['patient', 'disease', 'medicine'])
        counts = pairs.groupby(['disease', 'medicine']).size().rename('count').reset_index()
        self.table = counts.sort_values(['disease', 'count', 'medicine'],
                                        ascending=[True, False, True]).reset_index(drop=True)
        self._ranked: Dict[int, List[int]] = {
            int(disease): group['medicine'].astype(int).tolist()
            for disease, group in self.table.groupby('disease', sort=True)
        }
        logger.info(f"Baseline co-occurrence table: {len(self.table)} disease-medicine pairs "
                    f"over {len(self._ranked)} diseases")

    def query(self, diagnoses: Iterable[int], exclude: Iterable[int] = (), k: Optional[int] = None) -> BaselineResult:
        """Union over diagnoses of the K most frequent medicines (ties to the lower id)."""
        k = self.k if k is None else k
        exclude = {int(m) for m in exclude}
        medicines: Set[int] = set()
        unseen: List[int] = []
        for disease in diagnoses:
            ranked = self._ranked.get(int(disease))
            if ranked is None:
                unseen.append(int(disease))
                continue
            medicines.update([m for m in ranked if m not in exclude][:k])
        if unseen:
            logger.debug(f"Diseases absent from training co-occurrences: {unseen}")
        return BaselineResult(medicines, unseen)


def k_most_frequent_baseline(
    train_edges: BipartiteGraph,
    pd_edges: BipartiteGraph,
    query: Union[PatientQuery, Sequence[int]],
    k: int = 3
) -> BaselineResult:
    """
    K-most-frequent co-occurrence baseline for one query.

    Returns:
        BaselineResult with the medicine set and the diseases flagged unseen
    """
    diagnoses = query.diagnoses if isinstance(query, PatientQuery) else query
    exclude = query.exclude if isinstance(query, PatientQuery) else ()
    return KMostFrequentBaseline(train_edges, pd_edges, k).query(diagnoses, exclude)


def cold_start_eval(
    space: EmbeddingSpace,
    held_out_new_medicines: EdgeInput,
    candidates: Sequence[int],
    train_edges: BipartiteGraph,
    hits_n: int = 10,
    kg_stores: Sequence[TripleStore] = (),
    known: Optional[Sequence[BipartiteGraph]] = None
) -> RankingResult:
    """
    Ranking protocol restricted to medicines unseen in training prescriptions.

    Args:
        space: Embedding parameters
        held_out_new_medicines: Edges whose medicines have no training edge
        candidates: Medicine ids ranked against
        train_edges: Training patient-medicine edges (leakage check and filter)
        hits_n: N of hits@N
        kg_stores: Knowledge graphs used to flag targets without KG triples
        known: Extra graphs to filter (defaults to the training edges)

    Returns:
        RankingResult
    """
    users, items = _edge_arrays(held_out_new_medicines)
    if len(users) == 0:
        raise EmptyHeldOutError("cold-start evaluation needs at least one held-out edge")

    targets = set(items.tolist())
    leaked = sorted(targets & set(train_edges.items.tolist()))
    if leaked:
        raise LeakageError(f"{len(leaked)} cold-start medicine(s) have training edges, e.g. {leaked[:5]}")

    in_kg = set()
    for store in kg_stores:
        in_kg.update(store.entities.tolist())
    if kg_stores:
        orphans = sorted(targets - in_kg)
        if orphans:
            logger.warning(f"{len(orphans)} cold-start medicine(s) appear in no KG triple; their rank is chance-level")

    return ranking_eval(space, held_out_new_medicines, candidates, hits_n,
                        known=known if known is not None else [train_edges])


@dataclass
class EvalReport:
    """All evaluation rows of one run."""

    methods: pd.DataFrame
    ranking: Optional[RankingResult] = None
    cold_start: Optional[RankingResult] = None
    records: pd.DataFrame = field(default_factory=pd.DataFrame)
    statistics: Dict[str, Dict] = field(default_factory=dict)
    split: str = 'test'

    def _method(self, name: str, column: str) -> float:
        rows = self.methods[self.methods['method'] == name]
        return float(rows[column].iloc[0]) if len(rows) else float('nan')

    @property
    def mean_jaccard(self) -> float:
        return self._method('smr', 'mean_jaccard')

    @property
    def ddi_rate(self) -> float:
        return self._method('smr', 'ddi_rate')

    def to_frame(self) -> pd.DataFrame:
        """Report rows: one per method plus ranking and cold-start rows."""
        frame = self.methods.copy()
        extra = []
        for name, result in (('ranking', self.ranking), ('cold_start', self.cold_start)):
            if result is None:
                continue
            extra.append({
                'method': name,
                'queries': result.n,
                f'hits_at_{result.hits_n}': result.hits,
                'mean_rank': result.mean_rank,
                'mean_normalized_rank': float(np.mean(result.normalized_ranks)) if result.n else float('nan'),
            })
        if extra:
            frame = pd.concat([frame, pd.DataFrame(extra)], ignore_index=True)
        return frame


METHOD_ORDER = [
    'smr', 'smr_per_diagnosis', 'smr_distance', 'smr_plausibility', 'affinity_only', 'k_most_frequent',
]


class Evaluator:
    """Runs every method on the held-out prescriptions of a split."""

    def __init__(
        self,
        space: EmbeddingSpace,
        dataset: HeterogeneousDataset,
        split: DatasetSplit,
        energy: EnergyConfig,
        rec_config: Optional[RecommendConfig] = None,
        eval_config: Optional[EvalConfig] = None,
        progress: bool = True
    ):
        """
        Initialize evaluator.

        Args:
            space: Trained embedding space
            dataset: Dataset the space was trained on
            split: Patient-medicine edge split used in training
            energy: Bias and norm used in training
            rec_config: Recommendation options of the 'smr' row
            eval_config: Evaluation protocol options
            progress: Show per-query progress
        """
        config = get_config()
        self.space = space
        self.dataset = dataset
        self.split = split
        self.energy = energy
        self.rec_config = (rec_config if rec_config is not None else config.recommend_config()).validate()
        self.eval_config = (eval_config if eval_config is not None else config.eval_config()).validate()
        self.progress = progress
        self.statistics = StatisticalTests(self.eval_config.significance_levels)

        vocab = dataset.vocab
        self.medicines = vocab.entities_of_class(EntityClass.MEDICINE)
        # medicines without any prescription are ranked only by the cold-start protocol
        self.warm_medicines = np.intersect1d(self.medicines, dataset.pm_graph.items)
        relations = [vocab.relation_id(n) for n in self.rec_config.interaction_relations if vocab.has_relation(n)]
        self.interactions = InteractionIndex(dataset.kg_medicine, relations)

    def _recommenders(self) -> Dict[str, MedicineRecommender]:
        base = self.rec_config
        variants = {
            'smr': base,
            'smr_per_diagnosis': replace(base, per_diagnosis=True),
            'smr_distance': replace(base, penalty_mode='distance', beta=self.eval_config.distance_beta,
                                    penalty_projection=base.penalty_projection or self.space.k != self.space.d),
            'smr_plausibility': replace(base, penalty_mode='plausibility',
                                        beta=self.eval_config.plausibility_beta),
            'affinity_only': replace(base, beta=0.0),
        }
        return {name: MedicineRecommender(self.space, self.dataset.vocab, cfg, self.energy)
                for name, cfg in variants.items()}

    def queries(self) -> List[Tuple[int, List[int], Set[int], Set[int]]]:
        """(patient, diagnoses, reference medicines, known medicines) per held-out patient."""
        held_out = self.split.partition(self.eval_config.split)
        known_graphs = [self.split.train] + ([self.split.valid] if self.eval_config.split == 'test' else [])
        out = []
        for patient in held_out.user_ids():
            diagnoses = self.dataset.pd_graph.items_of(patient)
            if not diagnoses:
                continue
            known = set()
            for graph in known_graphs:
                known.update(graph.items_of(patient))
            reference = set(held_out.items_of(patient)) - known
            if reference:
                out.append((patient, diagnoses, reference, known))
        return out

    def run(self) -> EvalReport:
        """
        Evaluate every method.

        Returns:
            EvalReport with method rows, ranking and cold-start results, per-query records
        """
        cfg = self.eval_config
        queries = self.queries()
        if not queries:
            raise EmptyHeldOutError(f"no {cfg.split} patients with held-out prescriptions and diagnoses")

        recommenders = self._recommenders()
        baseline = KMostFrequentBaseline(self.split.train, self.dataset.pd_graph, cfg.baseline_k)
        records = []
        for patient, diagnoses, reference, known in tqdm(queries, desc="Evaluating", disable=not self.progress):
            exclude = known if cfg.filter_known else set()
            outputs = {}
            for name, recommender in recommenders.items():
                if name == 'smr_per_diagnosis':
                    query = PatientQuery(diagnoses=diagnoses, candidates=self.warm_medicines, exclude=exclude)
                else:
                    query = PatientQuery(patient=patient, candidates=self.warm_medicines, exclude=exclude)
                outputs[name] = recommender.recommend(query, cfg.k).medicines()
            result = baseline.query(diagnoses, exclude)
            outputs['k_most_frequent'] = sorted(result.medicines)

            for name in METHOD_ORDER:
                meds = outputs[name]
                records.append({
                    'patient': self.dataset.vocab.entity_name(patient),
                    'method': name,
                    'jaccard': jaccard(meds, reference),
                    'ddi': bool(self.interactions.violations(meds)),
                    'ddi_pairs': len(self.interactions.violations(meds)),
                    'set_size': len(meds),
                    'unseen_diseases': len(result.unseen_diseases) if name == 'k_most_frequent' else 0,
                    'recommended': ','.join(self.dataset.vocab.entity_name(m) for m in meds),
                    'reference': ','.join(self.dataset.vocab.entity_name(m) for m in sorted(reference)),
                })

        frame = pd.DataFrame(records)
        methods = self._summarize(frame)
        report = EvalReport(methods=methods, records=frame, split=cfg.split)

        known_graphs = [self.split.train] + ([self.split.valid] if cfg.split == 'test' else [])
        report.ranking = ranking_eval(self.space, self.split.partition(cfg.split), self.warm_medicines,
                                      cfg.hits_n, known=known_graphs)
        report.cold_start = self._cold_start()

        smr = frame[frame['method'] == 'smr']['jaccard']
        base = frame[frame['method'] == 'k_most_frequent']['jaccard']
        report.statistics['smr_vs_k_most_frequent'] = self.statistics.paired_comparison(smr, base)
        if report.cold_start is not None and report.cold_start.n:
            report.statistics['cold_start_vs_chance'] = self.statistics.rank_vs_chance(
                pd.Series(report.cold_start.normalized_ranks)
            )

        logger.info(f"Evaluated {len(queries)} {cfg.split} queries: smr Jaccard {report.mean_jaccard:.4f}, "
                    f"DDI rate {report.ddi_rate:.4f}, hits@{cfg.hits_n} {report.ranking.hits:.4f}")
        return report

    def _summarize(self, frame: pd.DataFrame) -> pd.DataFrame:
        rows = []
        for name in METHOD_ORDER:
            part = frame[frame['method'] == name]
            pairs = (part['set_size'] * (part['set_size'] - 1) // 2).sum()
            rows.append({
                'method': name,
                'queries': len(part),
                'mean_jaccard': float(part['jaccard'].mean()),
                'ddi_rate': float(part['ddi'].mean()),
                'ddi_pair_rate': float(part['ddi_pairs'].sum() / pairs) if pairs else 0.0,
                'mean_set_size': float(part['set_size'].mean()),
            })
        return pd.DataFrame(rows)

    def _cold_start(self) -> Optional[RankingResult]:
        truth = self.dataset.ground_truth
        if truth is None or truth.cold_start_edges is None or len(truth.cold_start_edges) == 0:
            return None
        return cold_start_eval(
            self.space, truth.cold_start_edges, self.medicines, self.split.train,
            self.eval_config.hits_n, kg_stores=[self.dataset.kg_medicine],
            known=[self.split.train, self.split.valid, self.split.test],
        )

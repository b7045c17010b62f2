"""Patient composition from diagnoses and greedy interaction-penalised medicine selection."""

import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Set, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from ..config import EnergyConfig, RecommendConfig, get_config
from ..data.graph import EntityClass, Vocabulary
from ..embedding.kg import energies, norm_and_grad, triple_plausibility
from ..embedding.space import EmbeddingSpace
from ..errors import ConfigError, EmptyCandidatesError, EmptyDiagnosesError, UnknownIdError

logger = logging.getLogger(__name__)

RelationIds = Union[int, Sequence[int]]


@dataclass
class PatientQuery:
    """
    Who to recommend for.

    Attributes:
        diagnoses: Disease ids in increasing timestamp order
        patient: Existing patient id; its trained vector is used directly
        candidates: Medicine ids to choose from (all medicines if None)
        exclude: Medicine ids never recommended (e.g. already prescribed)
    """

    diagnoses: List[int] = field(default_factory=list)
    patient: Optional[int] = None
    candidates: Optional[Sequence[int]] = None
    exclude: Set[int] = field(default_factory=set)


@dataclass
class RecommendedMedicine:
    medicine: int
    score: float
    affinity: float
    penalty: float


@dataclass
class RecommendationResult:
    """Selected medicines in greedy order; score = affinity - penalty at selection time."""

    items: List[RecommendedMedicine]
    k: int

    def medicines(self) -> List[int]:
        return [item.medicine for item in self.items]

    def __len__(self) -> int:
        return len(self.items)

    def to_frame(self, vocab: Optional[Vocabulary] = None) -> pd.DataFrame:
        rows = []
        for rank, item in enumerate(self.items, start=1):
            rows.append({
                'rank': rank,
                'medicine': vocab.entity_name(item.medicine) if vocab is not None else item.medicine,
                'score': item.score,
                'affinity': item.affinity,
                'penalty': item.penalty,
            })
        return pd.DataFrame(rows, columns=['rank', 'medicine', 'score', 'affinity', 'penalty'])


def compose_patient(space: EmbeddingSpace, diagnoses: Sequence[int], recent_first: bool = False) -> np.ndarray:
    """
    Patient vector from time-ordered diagnoses: sum_t exp(-t) d_t, t from 1.

    Args:
        space: Embedding parameters
        diagnoses: Disease ids, earliest first
        recent_first: Give the largest weight to the latest diagnosis instead

    Returns:
        Vector of length k
    """
    if len(diagnoses) == 0:
        raise EmptyDiagnosesError("a new-patient query needs at least one diagnosis")
    for disease in diagnoses:
        space.check_entity(disease)
    order = list(reversed(diagnoses)) if recent_first else list(diagnoses)
    weights = np.exp(-np.arange(1, len(order) + 1, dtype=np.float64))
    return weights @ space.entity[np.asarray(order, dtype=np.int64)]


def _relation_list(space: EmbeddingSpace, relations: RelationIds) -> List[int]:
    relations = [relations] if np.isscalar(relations) else list(relations)
    for r in relations:
        space.check_relation(r)
    return [int(r) for r in relations]


def pair_penalties(
    space: EmbeddingSpace,
    cfg: RecommendConfig,
    energy: EnergyConfig,
    candidates: np.ndarray,
    selected: int,
    relations: RelationIds
) -> np.ndarray:
    """
    Penalty of pairing each candidate with one already selected medicine.

    'distance' mode: ||m_n + r - m_o|| summed over the relations (through
    H_r when penalty_projection is on). 'plausibility' mode: the largest
    sigma(z) over the relations and both pair directions. 'partner' mode:
    the largest probability, over relations and directions, that a candidate
    is the interaction partner of the selected medicine, the triple softmax
    running over ``candidates``.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    relations = _relation_list(space, relations)
    out = np.zeros(len(candidates))
    if cfg.penalty_mode == 'partner':
        for r in relations:
            as_tail = softmax(energies(space, energy, selected, r, candidates))
            as_head = softmax(energies(space, energy, candidates, r, selected))
            out = np.maximum(out, np.maximum(as_tail, as_head))
        return out
    if cfg.penalty_mode == 'plausibility':
        for r in relations:
            forward = triple_plausibility(space, energy, candidates, r, selected)
            backward = triple_plausibility(space, energy, selected, r, candidates)
            out = np.maximum(out, np.maximum(forward, backward))
        return out

    for r in relations:
        m_n = space.entity[candidates]
        m_o = space.entity[int(selected)]
        if cfg.penalty_projection:
            residual = (m_n - m_o) @ space.projection[r] + space.relation[r]
        else:
            if space.k != space.d:
                raise ConfigError("the unprojected penalty needs k == d; enable penalty_projection")
            residual = m_n + space.relation[r] - m_o
        value, _ = norm_and_grad(residual, energy.norm)
        out += value
    return out


def score_candidate(
    space: EmbeddingSpace,
    cfg: RecommendConfig,
    p: np.ndarray,
    candidate: int,
    selected: Sequence[int],
    interaction_relation: RelationIds,
    energy: Optional[EnergyConfig] = None,
    pool: Optional[Sequence[int]] = None
) -> float:
    """
    Greedy ranking score of one candidate.

    Args:
        space: Embedding parameters
        cfg: Recommendation options (beta, penalty mode, projection)
        p: Patient vector
        candidate: Medicine id
        selected: Medicines already selected
        interaction_relation: Relation id (or ids) of the interaction relation
        energy: Trained bias and norm (overridden by cfg.norm / cfg.bias)
        pool: Candidates the partner penalty normalises over (defaults to
            the candidate and the selected medicines)

    Returns:
        p . m_n - beta * sum over selected of the pair penalty
    """
    space.check_entity(candidate)
    for o in selected:
        space.check_entity(o)
    energy = cfg.energy(energy if energy is not None else EnergyConfig())
    if cfg.penalty_mode == 'partner':
        support = np.array(sorted({int(m) for m in (pool if pool is not None else selected)} | {int(candidate)}))
    else:
        support = np.array([int(candidate)])
    at = int(np.flatnonzero(support == int(candidate))[0])
    score = float(np.dot(p, space.entity[int(candidate)]))
    for o in selected:
        score -= cfg.penalty_scale * float(pair_penalties(space, cfg, energy, support, o, interaction_relation)[at])
    return score


def _greedy(
    space: EmbeddingSpace,
    cfg: RecommendConfig,
    energy: EnergyConfig,
    p: np.ndarray,
    pool: np.ndarray,
    available: np.ndarray,
    penalty: np.ndarray,
    k: int,
    relations: List[int]
) -> List[RecommendedMedicine]:
    """Greedy steps over a sorted pool; ``available`` and ``penalty`` are updated in place."""
    affinity = space.entity[pool] @ p
    chosen = []
    for _ in range(k):
        if not available.any():
            break
        score = np.where(available, affinity - cfg.penalty_scale * penalty, -np.inf)
        # argmax returns the first maximum; the pool is sorted so ties go to the lower id
        pos = int(np.argmax(score))
        chosen.append(RecommendedMedicine(
            medicine=int(pool[pos]),
            score=float(score[pos]),
            affinity=float(affinity[pos]),
            penalty=float(cfg.penalty_scale * penalty[pos]),
        ))
        available[pos] = False
        if cfg.penalty_scale != 0:
            penalty += pair_penalties(space, cfg, energy, pool, int(pool[pos]), relations)
    return chosen


def recommend(
    space: EmbeddingSpace,
    cfg: RecommendConfig,
    query: PatientQuery,
    k: int,
    candidates: Iterable[int],
    interaction_relation: RelationIds,
    energy: Optional[EnergyConfig] = None
) -> RecommendationResult:
    """
    Greedy top-k selection under the interaction-penalised score.

    Step n picks the highest-scoring remaining candidate given the n-1
    medicines already selected; ties go to the lower id.

    Args:
        space: Embedding parameters
        cfg: Recommendation options
        query: Diagnoses or existing patient, plus exclusions
        k: Medicines per set (per diagnosis in per-diagnosis mode)
        candidates: Medicine ids to choose from
        interaction_relation: Relation id (or ids) used by the penalty
        energy: Trained bias and norm

    Returns:
        RecommendationResult
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    exclude = {int(m) for m in query.exclude}
    pool = np.array(sorted({int(m) for m in candidates} - exclude), dtype=np.int64)
    if len(pool) == 0:
        raise EmptyCandidatesError("no candidate medicines to recommend from")
    for m in pool:
        space.check_entity(m)
    energy = cfg.energy(energy if energy is not None else EnergyConfig())
    relations = _relation_list(space, interaction_relation)

    available = np.ones(len(pool), dtype=bool)
    penalty = np.zeros(len(pool))

    if query.patient is not None:
        space.check_entity(query.patient)
        p = space.entity[int(query.patient)]
        return RecommendationResult(_greedy(space, cfg, energy, p, pool, available, penalty, k, relations), k)

    if not query.diagnoses:
        raise EmptyDiagnosesError("a new-patient query needs at least one diagnosis")

    if cfg.per_diagnosis:
        items: List[RecommendedMedicine] = []
        for disease in query.diagnoses:
            p = compose_patient(space, [disease])
            items.extend(_greedy(space, cfg, energy, p, pool, available, penalty, k, relations))
        return RecommendationResult(items, k * len(query.diagnoses))

    p = compose_patient(space, query.diagnoses, recent_first=cfg.recent_first)
    return RecommendationResult(_greedy(space, cfg, energy, p, pool, available, penalty, k, relations), k)


class MedicineRecommender:
    """Recommendation service over a trained space and its vocabulary."""

    def __init__(
        self,
        space: EmbeddingSpace,
        vocab: Vocabulary,
        config: Optional[RecommendConfig] = None,
        energy: Optional[EnergyConfig] = None
    ):
        """
        Initialize recommender.

        Args:
            space: Trained embedding space
            vocab: Vocabulary the space was trained over
            config: Recommendation options (defaults from config.yaml)
            energy: Bias and norm used in training
        """
        self.space = space
        self.vocab = vocab
        self.config = (config if config is not None else get_config().recommend_config()).validate()
        self.energy = energy if energy is not None else get_config().train_config().energy
        self.medicines = vocab.entities_of_class(EntityClass.MEDICINE)

        missing = [name for name in self.config.interaction_relations if not vocab.has_relation(name)]
        if missing:
            raise UnknownIdError(f"unknown interaction relation(s): {missing}")
        self.relations = [vocab.relation_id(name) for name in self.config.interaction_relations]

    def recommend(self, query: PatientQuery, k: Optional[int] = None) -> RecommendationResult:
        candidates = self.medicines if query.candidates is None else query.candidates
        return recommend(self.space, self.config, query, k or self.config.k,
                         candidates, self.relations, self.energy)

    def for_diagnoses(self, diagnoses: Sequence[str], k: Optional[int] = None,
                      candidates: Optional[Sequence[str]] = None,
                      exclude: Iterable[str] = ()) -> RecommendationResult:
        """Recommend for a new patient given disease names in time order."""
        query = PatientQuery(
            diagnoses=[self._entity(name, EntityClass.DISEASE) for name in diagnoses],
            candidates=None if candidates is None else [self._entity(n, EntityClass.MEDICINE) for n in candidates],
            exclude={self._entity(name, EntityClass.MEDICINE) for name in exclude},
        )
        return self.recommend(query, k)

    def for_patient(self, patient: str, k: Optional[int] = None,
                    candidates: Optional[Sequence[str]] = None,
                    exclude: Iterable[str] = ()) -> RecommendationResult:
        """Recommend for an existing patient by name."""
        query = PatientQuery(
            patient=self._entity(patient, EntityClass.PATIENT),
            candidates=None if candidates is None else [self._entity(n, EntityClass.MEDICINE) for n in candidates],
            exclude={self._entity(name, EntityClass.MEDICINE) for name in exclude},
        )
        return self.recommend(query, k)

    def _entity(self, name: str, entity_class: EntityClass) -> int:
        entity_id = self.vocab.entity_id(name)
        if self.vocab.class_of(entity_id) is not entity_class:
            raise UnknownIdError(f"{name!r} is a {self.vocab.class_of(entity_id).value}, not a {entity_class.value}")
        return entity_id

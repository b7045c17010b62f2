"""Heterogeneous graph storage: interning, triple stores, bipartite graphs, splits."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from ..errors import BadRatiosError, ClassConflictError, UnknownClassError, UnknownIdError

logger = logging.getLogger(__name__)

# Packed triple keys: head << 42 | relation << 21 | tail
KEY_BITS = 21
KEY_LIMIT = 1 << KEY_BITS


class EntityClass(str, Enum):
    """Class tag carried by every interned entity."""

    PATIENT = 'patient'
    DISEASE = 'disease'
    MEDICINE = 'medicine'
    OTHER = 'other'

    @classmethod
    def parse(cls, value) -> 'EntityClass':
        if isinstance(value, EntityClass):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise UnknownClassError(f"unknown entity class {value!r}") from None


def pack_keys(heads, relations, tails) -> np.ndarray:
    """Pack (h, r, t) id arrays into int64 keys."""
    heads = np.asarray(heads, dtype=np.int64)
    relations = np.asarray(relations, dtype=np.int64)
    tails = np.asarray(tails, dtype=np.int64)
    return (heads << (2 * KEY_BITS)) | (relations << KEY_BITS) | tails


class Vocabulary:
    """Dense name <-> id interning for entities (with class tags) and relations."""

    def __init__(self):
        self.entity_names: List[str] = []
        self.entity_classes: List[EntityClass] = []
        self._entity_ids: Dict[str, int] = {}
        self.relation_names: List[str] = []
        self._relation_ids: Dict[str, int] = {}

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def intern_entity(self, name: str, entity_class) -> int:
        """
        Intern an entity name.

        Args:
            name: Surface name (nonempty)
            entity_class: EntityClass or its string tag

        Returns:
            Dense entity id; the same name always returns the same id
        """
        if not name:
            raise ValueError("entity name must be nonempty")
        entity_class = EntityClass.parse(entity_class)
        existing = self._entity_ids.get(name)
        if existing is not None:
            known = self.entity_classes[existing]
            if known is not entity_class:
                raise ClassConflictError(
                    f"entity {name!r} already interned as {known.value}, not {entity_class.value}"
                )
            return existing
        if len(self.entity_names) >= KEY_LIMIT:
            raise ValueError(f"more than {KEY_LIMIT} entities are not supported")
        new_id = len(self.entity_names)
        self.entity_names.append(name)
        self.entity_classes.append(entity_class)
        self._entity_ids[name] = new_id
        return new_id

    def intern_relation(self, name: str) -> int:
        """Intern a relation name and return its dense id."""
        if not name:
            raise ValueError("relation name must be nonempty")
        existing = self._relation_ids.get(name)
        if existing is not None:
            return existing
        if len(self.relation_names) >= KEY_LIMIT:
            raise ValueError(f"more than {KEY_LIMIT} relations are not supported")
        new_id = len(self.relation_names)
        self.relation_names.append(name)
        self._relation_ids[name] = new_id
        return new_id

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_ids[name]
        except KeyError:
            raise UnknownIdError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self._relation_ids[name]
        except KeyError:
            raise UnknownIdError(f"unknown relation {name!r}") from None

    def has_entity(self, name: str) -> bool:
        return name in self._entity_ids

    def has_relation(self, name: str) -> bool:
        return name in self._relation_ids

    def entity_name(self, entity_id: int) -> str:
        self.check_entity(entity_id)
        return self.entity_names[entity_id]

    def class_of(self, entity_id: int) -> EntityClass:
        self.check_entity(entity_id)
        return self.entity_classes[entity_id]

    def check_entity(self, entity_id: int):
        if not 0 <= int(entity_id) < self.num_entities:
            raise UnknownIdError(f"unknown entity id {entity_id}")

    def check_relation(self, relation_id: int):
        if not 0 <= int(relation_id) < self.num_relations:
            raise UnknownIdError(f"unknown relation id {relation_id}")

    def entities_of_class(self, entity_class) -> np.ndarray:
        """Sorted ids of every entity with the given class."""
        entity_class = EntityClass.parse(entity_class)
        return np.array(
            [i for i, c in enumerate(self.entity_classes) if c is entity_class],
            dtype=np.int64,
        )


class TripleStore:
    """Deduplicated multi-relational (head, relation, tail) facts over a vocabulary."""

    def __init__(self, vocab: Vocabulary, triples: Iterable[Tuple[int, int, int]] = ()):
        """
        Build a store; duplicate triples are dropped and counted.

        Args:
            vocab: Vocabulary every id refers to
            triples: Iterable of (head, relation, tail) ids
        """
        self.vocab = vocab
        seen: Set[Tuple[int, int, int]] = set()
        ordered: List[Tuple[int, int, int]] = []
        duplicates = 0
        for h, r, t in triples:
            h, r, t = int(h), int(r), int(t)
            vocab.check_entity(h)
            vocab.check_relation(r)
            vocab.check_entity(t)
            if (h, r, t) in seen:
                duplicates += 1
                continue
            seen.add((h, r, t))
            ordered.append((h, r, t))

        self.duplicates = duplicates
        self._members = frozenset(seen)
        arr = np.array(ordered, dtype=np.int64).reshape(-1, 3)
        self.heads = arr[:, 0].copy()
        self.relations = arr[:, 1].copy()
        self.tails = arr[:, 2].copy()
        self._sorted_keys = np.sort(pack_keys(self.heads, self.relations, self.tails))

        # Adjacency indices
        self.by_relation: Dict[int, np.ndarray] = {}
        self.by_entity: Dict[int, np.ndarray] = {}
        for r in np.unique(self.relations):
            self.by_relation[int(r)] = np.flatnonzero(self.relations == r)
        incident: Dict[int, List[int]] = {}
        for idx, (h, _, t) in enumerate(ordered):
            incident.setdefault(h, []).append(idx)
            if t != h:
                incident.setdefault(t, []).append(idx)
        self.by_entity = {e: np.array(rows, dtype=np.int64) for e, rows in incident.items()}

        self.entities = np.unique(np.concatenate([self.heads, self.tails]))
        self.relation_ids = np.unique(self.relations)

    def __len__(self) -> int:
        return len(self.heads)

    def __contains__(self, triple) -> bool:
        h, r, t = triple
        return (int(h), int(r), int(t)) in self._members

    def __iter__(self):
        return zip(self.heads.tolist(), self.relations.tolist(), self.tails.tolist())

    def contains_many(self, heads, relations, tails) -> np.ndarray:
        """Vectorised membership test; broadcasts its inputs."""
        keys = pack_keys(heads, relations, tails)
        if len(self._sorted_keys) == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        return self._sorted_keys[pos] == keys

    def named_triples(self) -> Set[Tuple[str, str, str]]:
        """Triples as (head name, relation name, tail name)."""
        names = self.vocab.entity_names
        rels = self.vocab.relation_names
        return {(names[h], rels[r], names[t]) for h, r, t in self}


class BipartiteGraph:
    """Weighted user-item edges with per-user weight sums and per-item mass."""

    def __init__(
        self,
        vocab: Vocabulary,
        edges: Iterable[Tuple[int, int, float]] = (),
        merge: str = 'sum'
    ):
        """
        Build a bipartite graph.

        Args:
            vocab: Vocabulary every id refers to
            edges: Iterable of (user, item, weight)
            merge: 'sum' adds weights of repeated pairs (patient-medicine),
                'dedup' keeps a single weight-1 edge (patient-disease)
        """
        if merge not in ('sum', 'dedup'):
            raise ValueError(f"merge must be 'sum' or 'dedup', got {merge!r}")
        self.vocab = vocab
        self.merge = merge

        index: Dict[Tuple[int, int], int] = {}
        users: List[int] = []
        items: List[int] = []
        weights: List[float] = []
        merged = 0
        for u, i, w in edges:
            u, i, w = int(u), int(i), float(w)
            vocab.check_entity(u)
            vocab.check_entity(i)
            if not w > 0 or not np.isfinite(w):
                raise ValueError(f"edge weight must be positive and finite, got {w}")
            if merge == 'dedup':
                w = 1.0
            pos = index.get((u, i))
            if pos is not None:
                merged += 1
                if merge == 'sum':
                    weights[pos] += w
                continue
            index[(u, i)] = len(users)
            users.append(u)
            items.append(i)
            weights.append(w)

        self.merged = merged
        self._index = index
        self.users = np.array(users, dtype=np.int64)
        self.items = np.array(items, dtype=np.int64)
        self.weights = np.array(weights, dtype=np.float64)

        self._user_edges: Dict[int, List[int]] = {}
        for pos, u in enumerate(users):
            self._user_edges.setdefault(u, []).append(pos)
        # Per-user sums accumulate in edge order so they equal a sequential sum
        self.user_sums: Dict[int, float] = {}
        for u, positions in self._user_edges.items():
            total = 0.0
            for pos in positions:
                total += weights[pos]
            self.user_sums[u] = total

    def __len__(self) -> int:
        return len(self.users)

    def __contains__(self, pair) -> bool:
        u, i = pair
        return (int(u), int(i)) in self._index

    def __iter__(self):
        return zip(self.users.tolist(), self.items.tolist(), self.weights.tolist())

    def user_ids(self) -> List[int]:
        """Users in first-appearance order."""
        return list(self._user_edges)

    def positions_of(self, user: int) -> List[int]:
        """Edge positions of a user in ingestion order."""
        return self._user_edges.get(int(user), [])

    def item_ids(self) -> np.ndarray:
        return np.unique(self.items)

    def items_of(self, user: int) -> List[int]:
        """Items of a user in ingestion order."""
        return [int(self.items[pos]) for pos in self._user_edges.get(int(user), [])]

    def weight(self, user: int, item: int) -> float:
        pos = self._index.get((int(user), int(item)))
        return 0.0 if pos is None else float(self.weights[pos])

    def user_sum(self, user: int) -> float:
        return self.user_sums.get(int(user), 0.0)

    def item_mass(self, num_entities: Optional[int] = None) -> np.ndarray:
        """Total incident weight per entity id."""
        size = num_entities if num_entities is not None else self.vocab.num_entities
        return np.bincount(self.items, weights=self.weights, minlength=size)

    def user_mass(self, num_entities: Optional[int] = None) -> np.ndarray:
        size = num_entities if num_entities is not None else self.vocab.num_entities
        return np.bincount(self.users, weights=self.weights, minlength=size)

    def subgraph(self, positions: Sequence[int]) -> 'BipartiteGraph':
        """Graph restricted to the given edge positions (order preserved)."""
        positions = np.asarray(positions, dtype=np.int64)
        return BipartiteGraph(
            self.vocab,
            zip(self.users[positions], self.items[positions], self.weights[positions]),
            merge=self.merge,
        )

    def named_edges(self) -> Dict[Tuple[str, str], float]:
        names = self.vocab.entity_names
        return {(names[u], names[i]): w for u, i, w in self}


@dataclass
class DatasetSplit:
    """Disjoint train / validation / test partitions of bipartite edges."""

    train: BipartiteGraph
    valid: BipartiteGraph
    test: BipartiteGraph
    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 42

    def sizes(self) -> Tuple[int, int, int]:
        return (len(self.train), len(self.valid), len(self.test))

    def partition(self, name: str) -> BipartiteGraph:
        if name not in ('train', 'valid', 'test'):
            raise ValueError(f"unknown partition {name!r}")
        return getattr(self, name)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_edges(
    graph: BipartiteGraph,
    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 42
) -> DatasetSplit:
    """
    Split bipartite edges into train / validation / test.

    Args:
        graph: Graph to split
        ratios: (r_train, r_valid, r_test), positive, summing to 1
        seed: Permutation seed

    Returns:
        DatasetSplit; sizes are within one edge of ratio * total
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not r > 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatiosError(f"ratios must be three positive numbers summing to 1, got {ratios}")

    n = len(graph)
    n_train = min(n, _round_half_up(ratios[0] * n))
    n_valid = min(n - n_train, _round_half_up(ratios[1] * n))

    order = np.random.default_rng(seed).permutation(n)
    parts = (
        np.sort(order[:n_train]),
        np.sort(order[n_train:n_train + n_valid]),
        np.sort(order[n_train + n_valid:]),
    )
    split = DatasetSplit(
        train=graph.subgraph(parts[0]),
        valid=graph.subgraph(parts[1]),
        test=graph.subgraph(parts[2]),
        ratios=ratios,
        seed=seed,
    )
    logger.info(f"Split {n} edges into train/valid/test = {split.sizes()}")
    return split


@dataclass
class GroundTruth:
    """Planted structure recorded by the synthetic generator (names, not ids)."""

    blocks: Dict[str, int] = field(default_factory=dict)
    latent: Dict[str, List[float]] = field(default_factory=dict)
    interaction_pairs: List[Tuple[str, str]] = field(default_factory=list)
    cold_start_medicines: List[str] = field(default_factory=list)
    relation_vectors: Dict[str, List[float]] = field(default_factory=dict)
    cold_start_edges: Optional[BipartiteGraph] = None


@dataclass
class HeterogeneousDataset:
    """The four graphs of one dataset over a shared vocabulary."""

    vocab: Vocabulary
    kg_medicine: TripleStore
    kg_disease: TripleStore
    pm_graph: BipartiteGraph
    pd_graph: BipartiteGraph
    ground_truth: Optional[GroundTruth] = None

    def medicines(self) -> np.ndarray:
        return self.vocab.entities_of_class(EntityClass.MEDICINE)

    def diseases(self) -> np.ndarray:
        return self.vocab.entities_of_class(EntityClass.DISEASE)

    def patients(self) -> np.ndarray:
        return self.vocab.entities_of_class(EntityClass.PATIENT)

    def tallies(self) -> Dict[str, int]:
        """Entity and relation counts in the shape of a dataset summary table."""
        vocab = self.vocab
        return {
            'diseases': int(len(self.diseases())),
            'medicines': int(len(self.medicines())),
            'patients': int(len(self.patients())),
            'medicine_related_entities': int(len(vocab.entities_of_class(EntityClass.OTHER))),
            'medicine_related_triples': len(self.kg_medicine),
            'disease_related_triples': len(self.kg_disease),
            'patient_disease_edges': len(self.pd_graph),
            'patient_medicine_edges': len(self.pm_graph),
        }

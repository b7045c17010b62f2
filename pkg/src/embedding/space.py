"""Parameter store shared by every objective: entity vectors, relation vectors, projections."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from ..errors import NonFiniteError, UnknownIdError

logger = logging.getLogger(__name__)

BLOCK_KINDS = ('entity', 'relation', 'projection')


class EmbeddingSpace:
    """
    One parameter block per interned id.

    Attributes:
        entity: (num_entities, k) vectors for patients, diseases, medicines and other entities
        relation: (num_relations, d) relation vectors
        projection: (num_relations, k, d) projection matrices
    """

    def __init__(self, entity: np.ndarray, relation: np.ndarray, projection: np.ndarray):
        entity = np.asarray(entity, dtype=np.float64)
        relation = np.asarray(relation, dtype=np.float64)
        projection = np.asarray(projection, dtype=np.float64)
        if entity.ndim != 2 or relation.ndim != 2 or projection.ndim != 3:
            raise ValueError("entity and relation must be 2-d, projection 3-d")
        k, d = entity.shape[1], relation.shape[1]
        if k < 1 or d < 1:
            raise ValueError(f"dimensions must be >= 1, got k={k}, d={d}")
        if projection.shape != (relation.shape[0], k, d):
            raise ValueError(
                f"projection shape {projection.shape} does not match ({relation.shape[0]}, {k}, {d})"
            )
        self.entity = entity
        self.relation = relation
        self.projection = projection

    @classmethod
    def initialize(
        cls,
        num_entities: int,
        num_relations: int,
        k: int,
        d: int,
        rng: Optional[np.random.Generator] = None
    ) -> 'EmbeddingSpace':
        """
        Translation-model initialization.

        Entity vectors are uniform in [-6/sqrt(k), 6/sqrt(k)], relation vectors
        uniform in [-6/sqrt(d), 6/sqrt(d)], projections the identity-padded k x d matrix.
        """
        if k < 1 or d < 1:
            raise ValueError(f"dimensions must be >= 1, got k={k}, d={d}")
        rng = rng if rng is not None else np.random.default_rng()
        bound_k = 6.0 / np.sqrt(k)
        bound_d = 6.0 / np.sqrt(d)
        entity = rng.uniform(-bound_k, bound_k, size=(num_entities, k))
        relation = rng.uniform(-bound_d, bound_d, size=(num_relations, d))
        projection = np.broadcast_to(np.eye(k, d), (num_relations, k, d)).copy()
        return cls(entity, relation, projection)

    @property
    def k(self) -> int:
        return self.entity.shape[1]

    @property
    def d(self) -> int:
        return self.relation.shape[1]

    @property
    def num_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation.shape[0]

    def check_entity(self, entity_id: int):
        if not 0 <= int(entity_id) < self.num_entities:
            raise UnknownIdError(f"unknown entity id {entity_id}")

    def check_relation(self, relation_id: int):
        if not 0 <= int(relation_id) < self.num_relations:
            raise UnknownIdError(f"unknown relation id {relation_id}")

    def copy(self) -> 'EmbeddingSpace':
        return EmbeddingSpace(self.entity.copy(), self.relation.copy(), self.projection.copy())

    def equals(self, other: 'EmbeddingSpace') -> bool:
        """Bitwise equality of every parameter block."""
        return (np.array_equal(self.entity, other.entity)
                and np.array_equal(self.relation, other.relation)
                and np.array_equal(self.projection, other.projection))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.entity).all()
                    and np.isfinite(self.relation).all()
                    and np.isfinite(self.projection).all())

    def block(self, kind: str, index: int) -> np.ndarray:
        """View of one parameter block."""
        if kind == 'entity':
            return self.entity[index]
        if kind == 'relation':
            return self.relation[index]
        if kind == 'projection':
            return self.projection[index]
        raise ValueError(f"unknown block kind {kind!r}")


class SparseGradients:
    """Gradients for the parameter blocks an objective actually touched."""

    def __init__(self):
        self.entity: Dict[int, np.ndarray] = {}
        self.relation: Dict[int, np.ndarray] = {}
        self.projection: Dict[int, np.ndarray] = {}

    def _add(self, table: Dict[int, np.ndarray], index: int, grad: np.ndarray):
        index = int(index)
        if index in table:
            table[index] = table[index] + grad
        else:
            table[index] = np.array(grad, dtype=np.float64)

    def add_entity(self, index: int, grad: np.ndarray):
        self._add(self.entity, index, grad)

    def add_relation(self, index: int, grad: np.ndarray):
        self._add(self.relation, index, grad)

    def add_projection(self, index: int, grad: np.ndarray):
        self._add(self.projection, index, grad)

    def merge(self, other: 'SparseGradients', scale: float = 1.0) -> 'SparseGradients':
        for kind in BLOCK_KINDS:
            table = getattr(self, kind)
            for index, grad in getattr(other, kind).items():
                self._add(table, index, scale * grad)
        return self

    def items(self) -> Iterator[Tuple[str, int, np.ndarray]]:
        for kind in BLOCK_KINDS:
            for index, grad in getattr(self, kind).items():
                yield kind, index, grad

    def blocks(self):
        """Set of (kind, id) pairs with a gradient."""
        return {(kind, index) for kind, index, _ in self.items()}

    def __len__(self) -> int:
        return len(self.entity) + len(self.relation) + len(self.projection)

    def is_finite(self) -> bool:
        return all(np.isfinite(grad).all() for _, _, grad in self.items())

    def apply(self, space: EmbeddingSpace, learning_rate: float):
        """Gradient ascent step on the touched blocks."""
        for kind, index, grad in self.items():
            space.block(kind, index)[...] += learning_rate * grad


@dataclass
class BatchGradients:
    """Flat (id, gradient) rows for a mini-batch; duplicate ids accumulate on apply."""

    values: np.ndarray
    entity_ids: np.ndarray
    entity_grads: np.ndarray
    relation_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    relation_grads: Optional[np.ndarray] = None
    projection_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    projection_grads: Optional[np.ndarray] = None

    def apply(self, space: EmbeddingSpace, learning_rate: float):
        """Gradient ascent step; rows sharing an id add up."""
        np.add.at(space.entity, self.entity_ids, learning_rate * self.entity_grads)
        if len(self.relation_ids):
            np.add.at(space.relation, self.relation_ids, learning_rate * self.relation_grads)
        if len(self.projection_ids):
            np.add.at(space.projection, self.projection_ids, learning_rate * self.projection_grads)

    def to_sparse(self) -> SparseGradients:
        grads = SparseGradients()
        for idx, g in zip(self.entity_ids, self.entity_grads):
            grads.add_entity(idx, g)
        for idx, g in zip(self.relation_ids, self.relation_grads if len(self.relation_ids) else []):
            grads.add_relation(idx, g)
        for idx, g in zip(self.projection_ids, self.projection_grads if len(self.projection_ids) else []):
            grads.add_projection(idx, g)
        return grads


def check_finite(value, what: str, step: Optional[int] = None):
    """Raise NonFiniteError if a scalar or array holds NaN or infinity."""
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite {what}", step=step)

"""
Synthetic heterogeneous datasets with planted structure.

Every entity gets a latent vector near the centroid of its block. Prescriptions
and diagnoses are sampled from latent affinity; knowledge-graph triples are
kept where a planted translation fits best. A subset of medicines keeps its KG
links but has all prescriptions moved to a separate cold-start file.
"""

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit, logit

from ..config import Config, get_config
from ..errors import SpecError
from .graph import (
    BipartiteGraph,
    EntityClass,
    GroundTruth,
    HeterogeneousDataset,
    TripleStore,
    Vocabulary,
)
from .storage import MANIFEST_FILE, DataStorage

logger = logging.getLogger(__name__)

INTERACTION_RELATION = 'interacts_with'
SIMILARITY_RELATION = 'similar_to'
TARGET_RELATION = 'targets'
HIERARCHY_RELATION = 'is_a'
ASSOCIATION_RELATION = 'associated_with'


@dataclass
class GenSpec:
    """Sizes, planted structure and noise of a synthetic dataset."""

    patients: int = 500
    diseases: int = 70
    medicines: int = 80
    other_entities: int = 40
    medicine_relations: int = 3
    disease_relations: int = 1
    latent_dim: int = 8
    blocks: int = 8
    within_rate: float = 0.5
    across_rate: float = 0.002
    diagnosis_within_rate: float = 0.15
    diagnosis_across_rate: float = 0.002
    noise: float = 0.3
    interaction_density: float = 0.03
    similarity_density: float = 0.05
    target_density: float = 0.05
    cold_start_fraction: float = 0.1
    seed: int = 0

    @classmethod
    def from_config(cls, config: Optional[Config] = None, **overrides) -> 'GenSpec':
        """Build from the 'generation' section; keyword overrides win (None is ignored)."""
        config = config if config is not None else get_config()
        values = config.section('generation')
        values.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise SpecError(f"unknown generation keys: {sorted(unknown)}")
        return cls(**values).validate()

    def validate(self) -> 'GenSpec':
        for name in ('patients', 'diseases', 'medicines', 'other_entities', 'medicine_relations',
                     'disease_relations', 'latent_dim', 'blocks'):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise SpecError(f"{name} must be an integer >= 1, got {value!r}")
        for name in ('within_rate', 'across_rate', 'diagnosis_within_rate', 'diagnosis_across_rate',
                     'interaction_density', 'similarity_density', 'target_density'):
            value = getattr(self, name)
            if not 0.0 <= float(value) <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1], got {value!r}")
        if not 0.0 <= self.cold_start_fraction < 1.0:
            raise SpecError(f"cold_start_fraction must lie in [0, 1), got {self.cold_start_fraction!r}")
        if self.noise < 0:
            raise SpecError(f"noise must be >= 0, got {self.noise!r}")
        if self.blocks > self.latent_dim:
            raise SpecError(f"blocks ({self.blocks}) cannot exceed latent_dim ({self.latent_dim})")
        if self.blocks > min(self.patients, self.diseases, self.medicines):
            raise SpecError("every block needs at least one patient, disease and medicine")
        if self.cold_start_fraction > 0 and self.medicine_relations < 2:
            raise SpecError("cold-start medicines need the similarity relation (medicine_relations >= 2)")
        return self

    def medicine_relation_names(self) -> List[str]:
        names = [INTERACTION_RELATION, SIMILARITY_RELATION, TARGET_RELATION]
        for extra in range(2, self.medicine_relations - 1):
            names.append(f"{TARGET_RELATION}_{extra}")
        return names[:self.medicine_relations]

    def disease_relation_names(self) -> List[str]:
        names = [HIERARCHY_RELATION, ASSOCIATION_RELATION]
        for extra in range(2, self.disease_relations):
            names.append(f"{ASSOCIATION_RELATION}_{extra}")
        return names[:self.disease_relations]


def _rate_logit(rate: float) -> float:
    return float(logit(np.clip(rate, 1e-9, 1 - 1e-9)))


class SyntheticGenerator:
    """Deterministic generator driven by one seeded random stream."""

    def __init__(self, spec: Optional[GenSpec] = None):
        """
        Initialize generator.

        Args:
            spec: Generation parameters (defaults from config.yaml)
        """
        self.spec = (spec if spec is not None else GenSpec.from_config()).validate()

    def _latent(self, rng: np.random.Generator, blocks: np.ndarray, centroids: np.ndarray) -> np.ndarray:
        dim = centroids.shape[1]
        return centroids[blocks] + rng.normal(0.0, self.spec.noise / np.sqrt(dim), size=(len(blocks), dim))

    def _bipartite(self, rng, users, items, within, across, weighted):
        """Affinity matrix, sampled edge mask and edge weights for a user x item grid."""
        affinity = users @ items.T
        lo, hi = _rate_logit(across), _rate_logit(within)
        prob = expit(lo + (hi - lo) * affinity)
        present = rng.random(affinity.shape) < prob
        if weighted:
            weights = 1.0 + rng.poisson(2.0 * np.maximum(affinity, 0.0))
        else:
            weights = np.ones_like(affinity)
        return affinity, present, weights

    @staticmethod
    def _lowest(scores: np.ndarray, fraction: float) -> np.ndarray:
        """Positions of the round(fraction * n) smallest scores (stable order)."""
        count = int(np.floor(fraction * len(scores) + 0.5))
        if count == 0 or len(scores) == 0:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.argsort(scores, kind='stable')[:count])

    def generate(self) -> HeterogeneousDataset:
        """
        Generate a dataset.

        Returns:
            HeterogeneousDataset with ground truth (latent vectors, planted
            interaction pairs, cold-start medicines and their held-out edges)
        """
        spec = self.spec
        rng = np.random.default_rng(spec.seed)
        dim = spec.latent_dim

        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        centroids = q.T[:spec.blocks]

        patient_block = np.arange(spec.patients) % spec.blocks
        disease_block = np.arange(spec.diseases) % spec.blocks
        medicine_block = np.arange(spec.medicines) % spec.blocks
        other_block = rng.integers(0, spec.blocks, size=spec.other_entities)

        patient_vec = self._latent(rng, patient_block, centroids)
        disease_vec = self._latent(rng, disease_block, centroids)
        medicine_vec = self._latent(rng, medicine_block, centroids)
        other_vec = self._latent(rng, other_block, centroids)

        patient_names = [f"patient_{i:04d}" for i in range(spec.patients)]
        disease_names = [f"disease_{i:03d}" for i in range(spec.diseases)]
        medicine_names = [f"medicine_{i:03d}" for i in range(spec.medicines)]
        other_names = [f"entity_{i:03d}" for i in range(spec.other_entities)]

        n_cold = int(np.floor(spec.cold_start_fraction * spec.medicines + 0.5))
        n_cold = min(n_cold, spec.medicines - 1)
        cold = np.sort(rng.choice(spec.medicines, size=n_cold, replace=False)) if n_cold else np.empty(0, dtype=np.int64)
        is_cold = np.zeros(spec.medicines, dtype=bool)
        is_cold[cold] = True

        relation_vectors: Dict[str, np.ndarray] = {}
        med_triples: List[Tuple[str, str, str, EntityClass, EntityClass]] = []
        interaction_pairs: List[Tuple[str, str]] = []
        med_relations = spec.medicine_relation_names()

        # Interactions: same-block ordered pairs that best fit a planted translation
        if INTERACTION_RELATION in med_relations:
            r_int = rng.normal(size=dim)
            r_int *= 0.5 / np.linalg.norm(r_int)
            relation_vectors[INTERACTION_RELATION] = r_int
            a_idx, b_idx = np.nonzero(
                (medicine_block[:, None] == medicine_block[None, :]) & ~np.eye(spec.medicines, dtype=bool)
            )
            residual = np.linalg.norm(medicine_vec[a_idx] + r_int - medicine_vec[b_idx], axis=1)
            for pos in self._lowest(residual, spec.interaction_density):
                a, b = medicine_names[a_idx[pos]], medicine_names[b_idx[pos]]
                med_triples.append((a, INTERACTION_RELATION, b, EntityClass.MEDICINE, EntityClass.MEDICINE))
                interaction_pairs.append((a, b))

        # Similarity: closest same-block pairs, plus a link for every cold-start medicine
        if SIMILARITY_RELATION in med_relations:
            a_idx, b_idx = np.nonzero(np.triu(medicine_block[:, None] == medicine_block[None, :], k=1))
            distance = np.linalg.norm(medicine_vec[a_idx] - medicine_vec[b_idx], axis=1)
            linked = set()
            for pos in self._lowest(distance, spec.similarity_density):
                linked.add((int(a_idx[pos]), int(b_idx[pos])))
            for m in cold:
                warm = np.flatnonzero(~is_cold & (medicine_block == medicine_block[m]))
                if len(warm) == 0:
                    warm = np.flatnonzero(~is_cold)
                nearest = int(warm[np.argmin(np.linalg.norm(medicine_vec[warm] - medicine_vec[m], axis=1))])
                linked.add((min(int(m), nearest), max(int(m), nearest)))
            for a, b in sorted(linked):
                med_triples.append((medicine_names[a], SIMILARITY_RELATION, medicine_names[b],
                                    EntityClass.MEDICINE, EntityClass.MEDICINE))

        # Medicine -> other entity relations
        target_relations = [name for name in med_relations if name.startswith(TARGET_RELATION)]
        covered = np.zeros(spec.other_entities, dtype=bool)
        for name in target_relations:
            r_vec = rng.normal(size=dim)
            r_vec *= 0.5 / np.linalg.norm(r_vec)
            relation_vectors[name] = r_vec
            residual = np.linalg.norm(
                medicine_vec[:, None, :] + r_vec - other_vec[None, :, :], axis=2
            )
            flat = residual.ravel()
            for pos in self._lowest(flat, spec.target_density):
                m, o = divmod(int(pos), spec.other_entities)
                covered[o] = True
                med_triples.append((medicine_names[m], name, other_names[o],
                                    EntityClass.MEDICINE, EntityClass.OTHER))
        if target_relations:
            residual = np.linalg.norm(
                medicine_vec[:, None, :] + relation_vectors[target_relations[0]] - other_vec[None, :, :], axis=2
            )
            for o in np.flatnonzero(~covered):
                m = int(np.argmin(residual[:, o]))
                med_triples.append((medicine_names[m], target_relations[0], other_names[o],
                                    EntityClass.MEDICINE, EntityClass.OTHER))

        # Disease hierarchy: one random tree per block
        dis_triples: List[Tuple[str, str, str, EntityClass, EntityClass]] = []
        dis_relations = spec.disease_relation_names()
        for block in range(spec.blocks):
            members = np.flatnonzero(disease_block == block)
            for i in range(1, len(members)):
                parent = members[rng.integers(0, i)]
                dis_triples.append((disease_names[members[i]], HIERARCHY_RELATION, disease_names[parent],
                                    EntityClass.DISEASE, EntityClass.DISEASE))
        for name in dis_relations[1:]:
            a_idx, b_idx = np.nonzero(np.triu(disease_block[:, None] == disease_block[None, :], k=1))
            distance = np.linalg.norm(disease_vec[a_idx] - disease_vec[b_idx], axis=1)
            for pos in self._lowest(distance, spec.similarity_density):
                dis_triples.append((disease_names[a_idx[pos]], name, disease_names[b_idx[pos]],
                                    EntityClass.DISEASE, EntityClass.DISEASE))

        # Prescriptions
        affinity, present, weights = self._bipartite(
            rng, patient_vec, medicine_vec, spec.within_rate, spec.across_rate, weighted=True
        )
        warm_idx = np.flatnonzero(~is_cold)
        for p in range(spec.patients):
            if not present[p, warm_idx].any():
                present[p, warm_idx[np.argmax(affinity[p, warm_idx])]] = True
        pm_rows, cold_rows = [], []
        for p, m in zip(*np.nonzero(present)):
            row = (patient_names[p], medicine_names[m], float(weights[p, m]))
            (cold_rows if is_cold[m] else pm_rows).append(row)

        # Diagnoses, strongest affinity first (read back as time order)
        d_affinity, d_present, _ = self._bipartite(
            rng, patient_vec, disease_vec, spec.diagnosis_within_rate, spec.diagnosis_across_rate, weighted=False
        )
        pd_rows = []
        for p in range(spec.patients):
            if not d_present[p].any():
                d_present[p, np.argmax(d_affinity[p])] = True
            chosen = np.flatnonzero(d_present[p])
            for d in chosen[np.argsort(-d_affinity[p, chosen], kind='stable')]:
                pd_rows.append((patient_names[p], disease_names[d], 1.0))

        # Intern in the order the loader reads files so ids survive a round trip
        vocab = Vocabulary()
        kg_medicine = self._triples(vocab, med_triples, med_relations)
        kg_disease = self._triples(vocab, dis_triples, dis_relations)
        pm_graph = self._edges(vocab, pm_rows, EntityClass.MEDICINE, 'sum')
        pd_graph = self._edges(vocab, pd_rows, EntityClass.DISEASE, 'dedup')
        cold_edges = self._edges(vocab, cold_rows, EntityClass.MEDICINE, 'sum')

        blocks = {}
        latent = {}
        for names, block_ids, vectors in (
            (patient_names, patient_block, patient_vec),
            (disease_names, disease_block, disease_vec),
            (medicine_names, medicine_block, medicine_vec),
            (other_names, other_block, other_vec),
        ):
            for name, block, vector in zip(names, block_ids, vectors):
                if vocab.has_entity(name):
                    blocks[name] = int(block)
                    latent[name] = vector.tolist()

        truth = GroundTruth(
            blocks=blocks,
            latent=latent,
            interaction_pairs=interaction_pairs,
            cold_start_medicines=[medicine_names[m] for m in cold],
            relation_vectors={name: vec.tolist() for name, vec in relation_vectors.items()},
            cold_start_edges=cold_edges,
        )
        dataset = HeterogeneousDataset(vocab, kg_medicine, kg_disease, pm_graph, pd_graph, truth)
        logger.info(f"Generated dataset (seed {spec.seed}): {dataset.tallies()}; "
                    f"{len(cold)} cold-start medicines with {len(cold_edges)} held-out edges")
        return dataset

    @staticmethod
    def _triples(vocab: Vocabulary, rows, relation_names: List[str]) -> TripleStore:
        ids = []
        for head, relation, tail, head_class, tail_class in rows:
            ids.append((vocab.intern_entity(head, head_class),
                        vocab.intern_relation(relation),
                        vocab.intern_entity(tail, tail_class)))
        return TripleStore(vocab, ids)

    @staticmethod
    def _edges(vocab: Vocabulary, rows, item_class: EntityClass, merge: str) -> BipartiteGraph:
        edges = [(vocab.intern_entity(user, EntityClass.PATIENT), vocab.intern_entity(item, item_class), w)
                 for user, item, w in rows]
        return BipartiteGraph(vocab, edges, merge=merge)


def generate(spec: Optional[GenSpec] = None) -> HeterogeneousDataset:
    """Generate a synthetic dataset (see SyntheticGenerator.generate)."""
    return SyntheticGenerator(spec).generate()


def write_dataset(
    dataset: HeterogeneousDataset,
    directory: Union[str, Path],
    spec: Optional[GenSpec] = None
) -> Dict[str, Any]:
    """
    Write a dataset directory with its manifest.

    Args:
        dataset: Dataset to write
        directory: Output directory
        spec: Generation parameters recorded in the manifest

    Returns:
        Manifest (counts, seed, spec, SHA-256 checksums)
    """
    storage = DataStorage()
    manifest = storage.write_dataset(dataset, directory)
    if spec is not None:
        manifest['seed'] = spec.seed
        manifest['spec'] = asdict(spec)
    storage.write_manifest(manifest, directory)
    logger.info(f"Wrote dataset to {directory} ({MANIFEST_FILE} with {len(manifest['files'])} checksums)")
    return manifest

"""Translation energy with relation projections, negative sampling and gradients for KG triples."""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from ..config import EnergyConfig
from ..data.graph import TripleStore
from ..errors import NonFiniteError, SaturatedError
from .space import BatchGradients, EmbeddingSpace, SparseGradients, check_finite

logger = logging.getLogger(__name__)

CORRUPTION_MODES = ('head', 'tail', 'relation')
MODE_ALIASES = {'corrupt-head': 'head', 'corrupt-tail': 'tail', 'corrupt-relation': 'relation'}

Triple = Tuple[int, int, int]


def log_sigmoid(x):
    """Stable log(sigmoid(x))."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def norm_and_grad(u: np.ndarray, norm: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Norm over the last axis and its (sub)gradient.

    The L1 subgradient at a zero coordinate is 0; the L2 gradient at the origin is 0.
    """
    if norm == 'L1':
        return np.abs(u).sum(axis=-1), np.sign(u)
    value = np.sqrt(np.square(u).sum(axis=-1))
    safe = np.where(value > 0, value, 1.0)
    return value, u / safe[..., None]


def residuals(space: EmbeddingSpace, heads, relations, tails) -> np.ndarray:
    """Translation residual (h - t) H_r + r for arrays of ids."""
    heads = np.asarray(heads, dtype=np.int64)
    relations = np.asarray(relations, dtype=np.int64)
    tails = np.asarray(tails, dtype=np.int64)
    diff = space.entity[heads] - space.entity[tails]
    return np.einsum('...k,...kd->...d', diff, space.projection[relations]) + space.relation[relations]


def energies(space: EmbeddingSpace, cfg: EnergyConfig, heads, relations, tails) -> np.ndarray:
    """Vectorised z(h, r, t) = b - ||h H_r + r - t H_r||."""
    value, _ = norm_and_grad(residuals(space, heads, relations, tails), cfg.norm)
    return cfg.bias - value


def energy(space: EmbeddingSpace, cfg: EnergyConfig, h: int, r: int, t: int) -> float:
    """
    Energy of one triple.

    Args:
        space: Embedding parameters
        cfg: Bias and norm
        h: Head entity id
        r: Relation id
        t: Tail entity id

    Returns:
        b - ||h H_r + r - t H_r||, never above b
    """
    space.check_entity(h)
    space.check_relation(r)
    space.check_entity(t)
    return float(energies(space, cfg, h, r, t))


def triple_plausibility(space: EmbeddingSpace, cfg: EnergyConfig, heads, relations, tails):
    """sigma(z(h, r, t)); probability-like score of a triple being a fact."""
    return expit(energies(space, cfg, heads, relations, tails))


# ----------------------------------------------------------------------
# Exact softmax terms
# ----------------------------------------------------------------------

def softmax_support(store: TripleStore, slot: str, triple: Triple) -> np.ndarray:
    """Normalisation set for one slot: the graph's entities, or its relations."""
    h, r, t = triple
    if slot == 'relation':
        return np.union1d(store.relation_ids, [r]).astype(np.int64)
    return np.union1d(store.entities, [h, t]).astype(np.int64)


def slot_log_distribution(
    space: EmbeddingSpace,
    cfg: EnergyConfig,
    store: TripleStore,
    triple: Triple,
    slot: str
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact log-softmax over one slot of a triple.

    Args:
        slot: 'head' for P(h|r,t), 'tail' for P(t|h,r), 'relation' for P(r|h,t)

    Returns:
        (support ids, log probabilities over the support)
    """
    h, r, t = triple
    support = softmax_support(store, slot, triple)
    if slot == 'head':
        z = energies(space, cfg, support, r, t)
    elif slot == 'tail':
        z = energies(space, cfg, h, r, support)
    elif slot == 'relation':
        z = energies(space, cfg, h, support, t)
    else:
        raise ValueError(f"unknown slot {slot!r}")
    return support, z - logsumexp(z)


def triple_log_likelihood(
    space: EmbeddingSpace,
    cfg: EnergyConfig,
    store: TripleStore,
    h: int,
    r: int,
    t: int
) -> float:
    """
    log P(h|r,t) + log P(t|h,r) + log P(r|h,t) with exact softmaxes.

    Entity softmaxes run over the entities of ``store``; the relation softmax
    over its relations. Only feasible for small graphs.
    """
    space.check_entity(h)
    space.check_relation(r)
    space.check_entity(t)
    triple = (int(h), int(r), int(t))
    total = 0.0
    for slot, target in (('head', h), ('tail', t), ('relation', r)):
        support, log_p = slot_log_distribution(space, cfg, store, triple, slot)
        total += float(log_p[np.searchsorted(support, target)])
    return total


# ----------------------------------------------------------------------
# Negative sampling
# ----------------------------------------------------------------------

def _normalize_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in CORRUPTION_MODES:
        raise ValueError(f"unknown corruption mode {mode!r}")
    return mode


def corruption_modes(store: TripleStore) -> Tuple[str, ...]:
    """Relation corruption needs at least two relations in the graph."""
    return CORRUPTION_MODES if len(store.relation_ids) >= 2 else CORRUPTION_MODES[:2]


def _corrupt(triple: Triple, mode: str, values: np.ndarray):
    h, r, t = triple
    n = len(values)
    if mode == 'head':
        return values, np.full(n, r), np.full(n, t)
    if mode == 'tail':
        return np.full(n, h), np.full(n, r), values
    return np.full(n, h), values, np.full(n, t)


def sample_negative_triples(
    store: TripleStore,
    positive: Triple,
    count: int,
    mode: str,
    rng: np.random.Generator
) -> List[Triple]:
    """
    Draw corrupted triples absent from the store.

    The corrupted slot is drawn uniformly from the graph's entities (or its
    relations) and redrawn while the result is a known fact.

    Args:
        store: Graph whose facts are excluded
        positive: (h, r, t) to corrupt
        count: Number of negatives (C1)
        mode: 'head', 'tail' or 'relation'
        rng: Random generator

    Returns:
        List of ``count`` corrupted triples
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    mode = _normalize_mode(mode)
    universe = store.relation_ids if mode == 'relation' else store.entities
    if mode == 'relation':
        universe = np.union1d(universe, [positive[1]])
    else:
        universe = np.union1d(universe, [positive[0], positive[2]])

    valid = ~store.contains_many(*_corrupt(positive, mode, universe))
    if valid.sum() < count:
        raise SaturatedError(
            f"only {int(valid.sum())} valid {mode} corruptions of {positive}, {count} requested"
        )

    out: List[Triple] = []
    while len(out) < count:
        draws = universe[rng.integers(0, len(universe), size=2 * count)]
        heads, rels, tails = _corrupt(positive, mode, draws)
        keep = ~store.contains_many(heads, rels, tails)
        for h, r, t in zip(heads[keep], rels[keep], tails[keep]):
            out.append((int(h), int(r), int(t)))
            if len(out) == count:
                break
    return out


@dataclass
class NegativeBatch:
    """Corruptions for a mini-batch of positives; rows with ``valid`` False are dropped."""

    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    modes: np.ndarray
    valid: np.ndarray


def sample_negative_batch(
    store: TripleStore,
    heads: np.ndarray,
    relations: np.ndarray,
    tails: np.ndarray,
    count: int,
    rng: np.random.Generator,
    max_rounds: int = 10
) -> NegativeBatch:
    """
    Vectorised corruption of a mini-batch.

    Each positive picks its mode uniformly (relation corruption only when the
    graph has two or more relations). Draws that hit a known fact are redrawn
    up to ``max_rounds`` times; positives still holding an invalid draw are
    marked saturated.
    """
    heads = np.asarray(heads, dtype=np.int64)
    relations = np.asarray(relations, dtype=np.int64)
    tails = np.asarray(tails, dtype=np.int64)
    b = len(heads)
    n_modes = len(corruption_modes(store))
    modes = rng.integers(0, n_modes, size=b)
    entities = store.entities
    relation_ids = store.relation_ids

    neg_h = np.repeat(heads[:, None], count, axis=1)
    neg_r = np.repeat(relations[:, None], count, axis=1)
    neg_t = np.repeat(tails[:, None], count, axis=1)
    pending = np.ones((b, count), dtype=bool)

    for _ in range(max_rounds):
        if not pending.any():
            break
        rows, cols = np.nonzero(pending)
        row_modes = modes[rows]
        ent_draw = entities[rng.integers(0, len(entities), size=len(rows))]
        rel_draw = relation_ids[rng.integers(0, len(relation_ids), size=len(rows))]
        neg_h[rows, cols] = np.where(row_modes == 0, ent_draw, heads[rows])
        neg_t[rows, cols] = np.where(row_modes == 1, ent_draw, tails[rows])
        neg_r[rows, cols] = np.where(row_modes == 2, rel_draw, relations[rows])
        pending[rows, cols] = store.contains_many(neg_h[rows, cols], neg_r[rows, cols], neg_t[rows, cols])

    valid = ~pending.any(axis=1)
    if not valid.all():
        logger.debug(f"{int((~valid).sum())} of {b} positives saturated after {max_rounds} rounds")
    return NegativeBatch(neg_h, neg_r, neg_t, modes, valid)


# ----------------------------------------------------------------------
# Negative-sampling objective
# ----------------------------------------------------------------------

def ns_batch_objective_and_grads(
    space: EmbeddingSpace,
    cfg: EnergyConfig,
    heads: np.ndarray,
    relations: np.ndarray,
    tails: np.ndarray,
    neg_heads: np.ndarray,
    neg_relations: np.ndarray,
    neg_tails: np.ndarray,
    literal: bool = False
) -> BatchGradients:
    """
    Negative-sampling objective of a batch of triples, with gradients.

    Per positive: log sigma(z_pos) + sum_n log sigma(-z_neg). With ``literal``
    the negatives contribute sigma(z_neg) instead.

    Args:
        heads, relations, tails: (B,) positives
        neg_heads, neg_relations, neg_tails: (B, C) corruptions

    Returns:
        BatchGradients with per-positive values
    """
    h = np.concatenate([np.asarray(heads)[:, None], neg_heads], axis=1)
    r = np.concatenate([np.asarray(relations)[:, None], neg_relations], axis=1)
    t = np.concatenate([np.asarray(tails)[:, None], neg_tails], axis=1)

    diff = space.entity[h] - space.entity[t]
    proj = space.projection[r]
    u = np.einsum('bck,bckd->bcd', diff, proj) + space.relation[r]
    dist, g = norm_and_grad(u, cfg.norm)
    z = cfg.bias - dist

    z_pos, z_neg = z[:, 0], z[:, 1:]
    if literal:
        values = log_sigmoid(z_pos) + expit(z_neg).sum(axis=1)
        c_neg = expit(z_neg) * expit(-z_neg)
    else:
        values = log_sigmoid(z_pos) + log_sigmoid(-z_neg).sum(axis=1)
        c_neg = -expit(z_neg)
    coef = np.concatenate([expit(-z_pos)[:, None], c_neg], axis=1)
    check_finite(values, 'triple objective')

    # dz/dr = -g, dz/dh = -H g, dz/dt = H g, dz/dH = -outer(h - t, g)
    cg = coef[..., None] * g
    hg = np.einsum('bckd,bcd->bck', proj, cg)
    d_proj = -np.einsum('bck,bcd->bckd', diff, cg)

    k, d = space.k, space.d
    return BatchGradients(
        values=values,
        entity_ids=np.concatenate([h.ravel(), t.ravel()]),
        entity_grads=np.concatenate([-hg.reshape(-1, k), hg.reshape(-1, k)]),
        relation_ids=r.ravel(),
        relation_grads=-cg.reshape(-1, d),
        projection_ids=r.ravel(),
        projection_grads=d_proj.reshape(-1, k, d),
    )


def ns_objective_and_grads(
    space: EmbeddingSpace,
    cfg: EnergyConfig,
    positive: Triple,
    negatives: Sequence[Triple],
    literal: bool = False
) -> Tuple[float, SparseGradients]:
    """
    Negative-sampling objective of one positive triple.

    Args:
        space: Embedding parameters
        cfg: Bias and norm
        positive: (h, r, t)
        negatives: Corrupted triples (nonempty)
        literal: Use sigma(z_neg) for negatives instead of log sigma(-z_neg)

    Returns:
        (value, gradients for exactly the blocks the triples touch)
    """
    if not negatives:
        raise ValueError("negatives must be nonempty")
    for h, r, t in [positive, *negatives]:
        space.check_entity(h)
        space.check_relation(r)
        space.check_entity(t)
    neg = np.asarray(negatives, dtype=np.int64).reshape(1, -1, 3)
    batch = ns_batch_objective_and_grads(
        space, cfg,
        np.array([positive[0]]), np.array([positive[1]]), np.array([positive[2]]),
        neg[..., 0], neg[..., 1], neg[..., 2],
        literal=literal,
    )
    grads = batch.to_sparse()
    if not grads.is_finite():
        raise NonFiniteError("non-finite triple gradient")
    return float(batch.values[0]), grads

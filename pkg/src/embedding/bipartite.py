"""Bipartite proximity model: conditional softmax, weighted log-likelihood and negative sampling."""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from ..data.graph import BipartiteGraph
from ..errors import EmptySamplerError, EmptyUniverseError, NonFiniteError
from .kg import log_sigmoid
from .space import BatchGradients, EmbeddingSpace, SparseGradients, check_finite

logger = logging.getLogger(__name__)

NOISE_POWER = 0.75

Edge = Tuple[int, int, float]


def _universe(graph: BipartiteGraph, universe) -> np.ndarray:
    items = graph.item_ids() if universe is None else np.unique(np.asarray(universe, dtype=np.int64))
    if len(items) == 0:
        raise EmptyUniverseError("softmax over an empty item universe")
    return items


def conditional_log_distribution(space: EmbeddingSpace, user: int, universe) -> np.ndarray:
    """log P(item | user) for every item of the universe, in universe order."""
    universe = np.asarray(universe, dtype=np.int64)
    if len(universe) == 0:
        raise EmptyUniverseError("softmax over an empty item universe")
    space.check_entity(user)
    logits = space.entity[universe] @ space.entity[int(user)]
    return logits - logsumexp(logits)


def conditional_prob(space: EmbeddingSpace, user: int, item: int, universe) -> float:
    """
    Softmax probability of an item given a user.

    Args:
        space: Embedding parameters
        user: Patient id
        item: Medicine or disease id (must belong to the universe)
        universe: Item ids the softmax normalises over

    Returns:
        exp(m_j . p_i) / sum over the universe of exp(m . p_i)
    """
    universe = np.asarray(universe, dtype=np.int64)
    space.check_entity(item)
    positions = np.flatnonzero(universe == int(item))
    if len(universe) and not len(positions):
        raise ValueError(f"item {item} is not in the universe")
    log_p = conditional_log_distribution(space, user, universe)
    return float(np.exp(log_p[positions[0]]))


def _per_user(graph: BipartiteGraph):
    """Yield (user, item positions, weights) in first-appearance order."""
    for user in graph.user_ids():
        positions = graph.positions_of(user)
        yield user, graph.items[positions], graph.weights[positions]


def weighted_loglik(space: EmbeddingSpace, graph: BipartiteGraph, universe=None) -> float:
    """
    Sum over edges of w_ij log P(item_j | user_i).

    For the patient-disease graph every weight is 1. Exact evaluation; the
    universe defaults to the graph's items.
    """
    if len(graph) == 0:
        return 0.0
    items = _universe(graph, universe)
    item_vecs = space.entity[items]
    total = 0.0
    for user, user_items, weights in _per_user(graph):
        p = space.entity[user]
        log_norm = logsumexp(item_vecs @ p)
        total += float(np.dot(weights, space.entity[user_items] @ p - log_norm))
    return total


def weighted_loglik_grads(
    space: EmbeddingSpace,
    graph: BipartiteGraph,
    universe=None
) -> Tuple[float, SparseGradients]:
    """
    Exact gradients of the weighted log-likelihood.

    For user i with weight sum s_i:
        d/dp_i = sum_j w_ij m_j - s_i E_P[m]
        d/dm_l = w_il p_i - s_i P(l | i) p_i
    """
    grads = SparseGradients()
    if len(graph) == 0:
        return 0.0, grads
    items = _universe(graph, universe)
    item_vecs = space.entity[items]
    total = 0.0
    for user, user_items, weights in _per_user(graph):
        p = space.entity[user]
        logits = item_vecs @ p
        log_norm = logsumexp(logits)
        probs = np.exp(logits - log_norm)
        s = weights.sum()
        total += float(np.dot(weights, space.entity[user_items] @ p - log_norm))

        grads.add_entity(user, weights @ space.entity[user_items] - s * (probs @ item_vecs))
        for item, w in zip(user_items, weights):
            grads.add_entity(item, w * p)
        for item, prob in zip(items, probs):
            grads.add_entity(item, -s * prob * p)
    return total, grads


def kl_objective_and_grads(
    space: EmbeddingSpace,
    graph: BipartiteGraph,
    universe=None
) -> Tuple[float, SparseGradients]:
    """
    Negative weighted KL divergence between empirical and model distributions.

    Value: -sum_i s_i KL(w_i. / s_i || P(. | i)), constants included. Its
    gradient is taken through the logits s_l = m_l . p_i as
    s_i (empirical_l - P(l | i)).
    """
    grads = SparseGradients()
    if len(graph) == 0:
        return 0.0, grads
    items = _universe(graph, universe)
    item_vecs = space.entity[items]
    index = {int(item): pos for pos, item in enumerate(items)}
    total = 0.0
    for user, user_items, weights in _per_user(graph):
        p = space.entity[user]
        s = weights.sum()
        empirical = np.zeros(len(items))
        for item, w in zip(user_items, weights):
            empirical[index[int(item)]] += w / s
        logits = item_vecs @ p
        log_model = logits - logsumexp(logits)
        support = empirical > 0
        kl = float(np.sum(empirical[support] * (np.log(empirical[support]) - log_model[support])))
        total -= s * kl

        d_logits = s * (empirical - np.exp(log_model))
        grads.add_entity(user, d_logits @ item_vecs)
        for item, coef in zip(items, d_logits):
            grads.add_entity(item, coef * p)
    return total, grads


class NoiseSampler:
    """
    Alias-table sampler for negative items, proportional to mass^0.75.

    Items of zero mass stay in ``items`` but are never drawn.
    """

    def __init__(self, items: Sequence[int], mass: Sequence[float], power: float = NOISE_POWER):
        """
        Build the alias table.

        Args:
            items: Item ids of the universe
            mass: Total incident weight per item (same order as items)
            power: Exponent applied to the mass
        """
        self.items = np.asarray(items, dtype=np.int64)
        mass = np.asarray(mass, dtype=np.float64)
        if mass.shape != self.items.shape:
            raise ValueError("items and mass must have the same length")
        if np.any(mass < 0) or not np.isfinite(mass).all():
            raise ValueError("mass must be finite and non-negative")
        self.power = power

        weights = np.where(mass > 0, mass, 0.0) ** power
        total = weights.sum()
        if not total > 0:
            raise EmptySamplerError("noise sampler has no item with positive mass")
        self.probabilities = weights / total

        self._support = np.flatnonzero(weights > 0)
        self._accept, self._alias = self._build_alias(self.probabilities[self._support])

    @classmethod
    def from_graph(
        cls,
        graph: BipartiteGraph,
        universe: Optional[Sequence[int]] = None,
        power: float = NOISE_POWER
    ) -> 'NoiseSampler':
        """Sampler over the graph's items (or an explicit universe) with mass = incident weight."""
        items = graph.item_ids() if universe is None else np.unique(np.asarray(universe, dtype=np.int64))
        mass = graph.item_mass(graph.vocab.num_entities)
        return cls(items, mass[items] if len(items) else [], power)

    @staticmethod
    def _build_alias(probs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Vose's alias method."""
        n = len(probs)
        scaled = probs * n
        accept = np.ones(n)
        alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            accept[s] = scaled[s]
            alias[s] = g
            scaled[g] = scaled[g] + scaled[s] - 1.0
            if scaled[g] < 1.0:
                small.append(g)
            else:
                large.append(g)
        # Leftovers are 1 up to rounding
        for i in small + large:
            accept[i] = 1.0
        return accept, alias

    def __len__(self) -> int:
        return len(self.items)

    @property
    def support(self) -> np.ndarray:
        """Items that can be drawn."""
        return self.items[self._support]

    def probability(self, item: int) -> float:
        positions = np.flatnonzero(self.items == int(item))
        return float(self.probabilities[positions[0]]) if len(positions) else 0.0

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        """Draw item ids i.i.d.; ``size`` may be an int or a shape."""
        columns = rng.integers(0, len(self._support), size=size)
        coins = rng.random(size=size)
        picked = np.where(coins < self._accept[columns], columns, self._alias[columns])
        return self.items[self._support[picked]]


def sample_negative_items(sampler: NoiseSampler, count: int, rng: np.random.Generator) -> List[int]:
    """
    Draw ``count`` noise items i.i.d. from the mass^0.75 law.

    Args:
        sampler: Noise sampler
        count: Number of negatives (C2)
        rng: Random generator

    Returns:
        List of item ids
    """
    if sampler is None or len(sampler.support) == 0:
        raise EmptySamplerError("noise sampler is empty")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [int(i) for i in sampler.sample(count, rng)]


def ns_edge_batch_objective_and_grads(
    space: EmbeddingSpace,
    users: np.ndarray,
    items: np.ndarray,
    neg_items: np.ndarray,
    literal: bool = False
) -> BatchGradients:
    """
    Negative-sampling objective of a batch of edges, with gradients.

    Per edge: log sigma(m_j . p_i) + sum_n log sigma(-m_n . p_i). With
    ``literal`` the negatives contribute log sigma(+m_n . p_i).

    Args:
        users: (B,) patient ids
        items: (B,) positive item ids
        neg_items: (B, C) noise item ids
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    neg_items = np.asarray(neg_items, dtype=np.int64)

    p = space.entity[users]
    m = space.entity[items]
    m_neg = space.entity[neg_items]
    z_pos = np.einsum('bk,bk->b', p, m)
    z_neg = np.einsum('bck,bk->bc', m_neg, p)

    if literal:
        values = log_sigmoid(z_pos) + log_sigmoid(z_neg).sum(axis=1)
        c_neg = expit(-z_neg)
    else:
        values = log_sigmoid(z_pos) + log_sigmoid(-z_neg).sum(axis=1)
        c_neg = -expit(z_neg)
    c_pos = expit(-z_pos)
    check_finite(values, 'edge objective')

    k = space.k
    d_user = c_pos[:, None] * m + np.einsum('bc,bck->bk', c_neg, m_neg)
    d_item = c_pos[:, None] * p
    d_neg = c_neg[..., None] * p[:, None, :]
    return BatchGradients(
        values=values,
        entity_ids=np.concatenate([users, items, neg_items.ravel()]),
        entity_grads=np.concatenate([d_user, d_item, d_neg.reshape(-1, k)]),
    )


def ns_edge_objective_and_grads(
    space: EmbeddingSpace,
    edge: Edge,
    negatives: Sequence[int],
    literal: bool = False
) -> Tuple[float, SparseGradients]:
    """
    Negative-sampling objective of one bipartite edge.

    The edge weight does not scale the value; the trainer draws edges with
    probability proportional to their weight instead.

    Args:
        space: Embedding parameters
        edge: (user, item, weight)
        negatives: Noise item ids (nonempty)
        literal: Use log sigma(+m_n . p) for negatives

    Returns:
        (value, gradients for the user, the item and every noise item)
    """
    if len(negatives) == 0:
        raise ValueError("negatives must be nonempty")
    user, item = int(edge[0]), int(edge[1])
    for entity in (user, item, *negatives):
        space.check_entity(entity)
    batch = ns_edge_batch_objective_and_grads(
        space, np.array([user]), np.array([item]), np.asarray([negatives], dtype=np.int64), literal
    )
    grads = batch.to_sparse()
    if not grads.is_finite():
        raise NonFiniteError("non-finite edge gradient")
    return float(batch.values[0]), grads

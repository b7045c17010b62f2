"""
Joint trainer: mini-batch negative-sampling SGD over the knowledge graphs and
the two bipartite graphs, sharing one parameter store.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from ..config import TASKS, TrainConfig, get_config
from ..data.graph import BipartiteGraph, TripleStore, Vocabulary
from ..errors import ConfigError, NonFiniteError
from .bipartite import NoiseSampler, ns_edge_batch_objective_and_grads, weighted_loglik
from .kg import (
    corruption_modes,
    ns_batch_objective_and_grads,
    sample_negative_batch,
    triple_log_likelihood,
)
from .space import EmbeddingSpace, SparseGradients

logger = logging.getLogger(__name__)

# Store key -> task name
STORE_TASKS = {
    'kg_medicine': 'kg_medicine',
    'kg_disease': 'kg_disease',
    'pm_graph': 'pm_edge',
    'pd_graph': 'pd_edge',
}


def regularizer_and_grads(space: EmbeddingSpace, gamma: float) -> Tuple[float, SparseGradients]:
    """
    Hinge-norm penalty gamma * sum [||x|| - 1]_+ over entity and relation vectors.

    The value is a penalty, subtracted from the maximised objective. Gradients
    are returned only for blocks whose L2 norm exceeds 1.

    Returns:
        (value, gradient of the penalty)
    """
    grads = SparseGradients()
    value = 0.0
    for kind, table in (('entity', space.entity), ('relation', space.relation)):
        norms = np.linalg.norm(table, axis=1)
        active = np.flatnonzero(norms > 1.0)
        value += float(np.sum(norms[active] - 1.0))
        for idx in active:
            g = gamma * table[idx] / norms[idx]
            if kind == 'entity':
                grads.add_entity(idx, g)
            else:
                grads.add_relation(idx, g)
    return gamma * value, grads


def regularizer_value(space: EmbeddingSpace, gamma: float) -> float:
    total = 0.0
    for table in (space.entity, space.relation):
        total += float(np.maximum(np.linalg.norm(table, axis=1) - 1.0, 0.0).sum())
    return gamma * total


def hinge_proximal_step(table: np.ndarray, tau: float) -> int:
    """
    Proximal step of the hinge penalty on every row of a parameter table.

    Rows with ||x|| > 1 are pulled toward the unit sphere by at most tau and
    never inside it; other rows are left untouched.

    Returns:
        Number of rows that were above norm 1
    """
    norms = np.linalg.norm(table, axis=1)
    active = norms > 1.0
    if tau > 0 and active.any():
        target = np.maximum(norms[active] - tau, 1.0)
        table[active] *= (target / norms[active])[:, None]
    return int(active.sum())


def _hinge_rows(rows: np.ndarray) -> np.ndarray:
    """Per-row x / ||x|| where ||x|| > 1, else 0."""
    norms = np.linalg.norm(rows, axis=1)
    out = np.zeros_like(rows)
    active = norms > 1.0
    out[active] = rows[active] / norms[active, None]
    return out


@dataclass
class _Task:
    """One term of the joint objective with its sampling state."""

    name: str
    kind: str  # 'kg' or 'edge'
    size: int
    store: Optional[TripleStore] = None
    graph: Optional[BipartiteGraph] = None
    edge_sampler: Optional[NoiseSampler] = None
    noise: Optional[NoiseSampler] = None


@dataclass
class TrainReport:
    """Per-epoch objective estimates and bookkeeping of one training run."""

    epochs: int = 0
    objectives: Dict[str, List[float]] = field(default_factory=lambda: {t: [] for t in TASKS})
    regularizer: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    initial_objectives: Dict[str, float] = field(default_factory=dict)
    initial_regularizer: float = 0.0
    wall_time: float = 0.0
    update_counts: Dict[str, int] = field(default_factory=lambda: {t: 0 for t in TASKS})
    entity_updates: Dict[str, np.ndarray] = field(default_factory=dict)
    dropped: Dict[str, int] = field(default_factory=lambda: {t: 0 for t in TASKS})
    workers: int = 1

    def to_frame(self) -> pd.DataFrame:
        """One row per epoch."""
        frame = pd.DataFrame({task: values for task, values in self.objectives.items()})
        frame['regularizer'] = self.regularizer
        frame['learning_rate'] = self.learning_rates
        frame.insert(0, 'epoch', np.arange(1, self.epochs + 1))
        return frame

    def final_objective(self, task: str) -> float:
        values = self.objectives.get(task, [])
        return values[-1] if values else float('nan')

    def to_dict(self) -> Dict:
        return {
            'epochs': self.epochs,
            'workers': self.workers,
            'wall_time': self.wall_time,
            'objectives': self.objectives,
            'regularizer': self.regularizer,
            'learning_rates': self.learning_rates,
            'initial_objectives': self.initial_objectives,
            'initial_regularizer': self.initial_regularizer,
            'update_counts': self.update_counts,
            'entities_updated': {task: int(np.count_nonzero(c)) for task, c in self.entity_updates.items()},
            'dropped': self.dropped,
        }


class _EpochTally:
    """Per-worker accumulators merged after every epoch."""

    def __init__(self, num_entities: int):
        self.sums = {t: 0.0 for t in TASKS}
        self.counts = {t: 0 for t in TASKS}
        self.dropped = {t: 0 for t in TASKS}
        self.entity_updates = {t: np.zeros(num_entities, dtype=np.int64) for t in TASKS}


class JointTrainer:
    """Maximises the sum of the four negative-sampling objectives minus the hinge penalty."""

    def __init__(self, config: Optional[TrainConfig] = None):
        """
        Initialize trainer.

        Args:
            config: Training hyperparameters (defaults from config.yaml)
        """
        self.config = (config if config is not None else get_config().train_config()).validate()
        self.energy = self.config.energy

    # ------------------------------------------------------------------
    # Setup
    # ------------------------------------------------------------------

    def _vocabulary(self, stores: Mapping[str, object]) -> Vocabulary:
        vocabs = {id(s.vocab): s.vocab for s in stores.values() if s is not None}
        if not vocabs:
            raise ConfigError("train needs at least one graph")
        if len(vocabs) > 1:
            raise ConfigError("all graphs must share one vocabulary")
        return next(iter(vocabs.values()))

    def _build_tasks(self, stores: Mapping[str, object]) -> List[_Task]:
        unknown = set(stores) - set(STORE_TASKS)
        if unknown:
            raise ConfigError(f"unknown graph names: {sorted(unknown)}")

        tasks = []
        for key, name in STORE_TASKS.items():
            data = stores.get(key)
            if data is None or len(data) == 0:
                continue
            if isinstance(data, TripleStore):
                tasks.append(_Task(name, 'kg', len(data), store=data))
            else:
                edge_sampler = NoiseSampler(np.arange(len(data)), data.weights, power=1.0)
                noise = NoiseSampler.from_graph(data)
                tasks.append(_Task(name, 'edge', len(data), graph=data,
                                   edge_sampler=edge_sampler, noise=noise))
        return tasks

    def _task_probabilities(self, tasks: List[_Task]) -> np.ndarray:
        weights = np.array(
            [task.size * float(self.config.task_weights.get(task.name, 1.0)) for task in tasks]
        )
        if not weights.sum() > 0:
            raise ConfigError("task weights leave no task with positive probability")
        return weights / weights.sum()

    def _expected_touches(
        self,
        tasks: List[_Task],
        probs: np.ndarray,
        instances: int,
        space: EmbeddingSpace
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Expected gradient rows per entity and relation in one epoch.

        Scaling the lazily applied hinge gradient by the inverse of these
        counts keeps its per-epoch expectation equal to the full penalty gradient.
        Counts below one are floored at one when applied, so a rarely touched
        row never takes more than a single full hinge step.
        """
        cfg = self.config
        ent = np.zeros(space.num_entities)
        rel = np.zeros(space.num_relations)
        for task, p in zip(tasks, probs):
            draws = p * instances
            if task.kind == 'kg':
                store = task.store
                n_modes = len(corruption_modes(store))
                p_mode = 1.0 / n_modes
                p_rel = p_mode if n_modes == 3 else 0.0
                head_deg = np.bincount(store.heads, minlength=space.num_entities)
                tail_deg = np.bincount(store.tails, minlength=space.num_entities)
                rel_count = np.bincount(store.relations, minlength=space.num_relations)
                c1 = cfg.negatives_kg

                ent += draws * (head_deg + tail_deg) / task.size
                ent[store.entities] += draws * c1 * 2 * p_mode / len(store.entities)
                ent += draws * c1 * ((p_mode + p_rel) * tail_deg + (p_mode + p_rel) * head_deg) / task.size
                rel += draws * rel_count / task.size
                rel += draws * c1 * 2 * p_mode * rel_count / task.size
                if p_rel:
                    rel[store.relation_ids] += draws * c1 * p_rel / len(store.relation_ids)
            else:
                graph = task.graph
                total = graph.weights.sum()
                ent += draws * graph.user_mass(space.num_entities) / total
                ent += draws * graph.item_mass(space.num_entities) / total
                ent[task.noise.items] += draws * cfg.negatives_edge * task.noise.probabilities
        return ent, rel

    # ------------------------------------------------------------------
    # Steps
    # ------------------------------------------------------------------

    def _batch_gradients(self, space: EmbeddingSpace, task: _Task, size: int,
                         rng: np.random.Generator, tally: Optional[_EpochTally]):
        cfg = self.config
        if task.kind == 'kg':
            store = task.store
            idx = rng.integers(0, task.size, size=size)
            heads, rels, tails = store.heads[idx], store.relations[idx], store.tails[idx]
            neg = sample_negative_batch(store, heads, rels, tails, cfg.negatives_kg, rng)
            keep = neg.valid
            if tally is not None:
                tally.dropped[task.name] += int((~keep).sum())
            if not keep.any():
                return None
            return ns_batch_objective_and_grads(
                space, self.energy, heads[keep], rels[keep], tails[keep],
                neg.heads[keep], neg.relations[keep], neg.tails[keep],
                literal=cfg.sigmoid_triple_negatives,
            )

        graph = task.graph
        positions = task.edge_sampler.sample(size, rng)
        negatives = task.noise.sample((size, cfg.negatives_edge), rng)
        return ns_edge_batch_objective_and_grads(
            space, graph.users[positions], graph.items[positions], negatives,
            literal=cfg.logsigmoid_edge_negatives,
        )

    def _apply(self, space: EmbeddingSpace, grads, lr: float,
               ent_touches: np.ndarray, rel_touches: np.ndarray, step: int):
        """Ascent on the objective, descent on the lazily scaled hinge penalty."""
        gamma = self.config.gamma
        ids = grads.entity_ids
        update = grads.entity_grads
        if gamma > 0:
            scale = gamma / np.maximum(ent_touches[ids], 1.0)
            update = update - scale[:, None] * _hinge_rows(space.entity[ids])
        np.add.at(space.entity, ids, lr * update)

        if len(grads.relation_ids):
            rids = grads.relation_ids
            r_update = grads.relation_grads
            if gamma > 0:
                scale = gamma / np.maximum(rel_touches[rids], 1.0)
                r_update = r_update - scale[:, None] * _hinge_rows(space.relation[rids])
            np.add.at(space.relation, rids, lr * r_update)
        if len(grads.projection_ids):
            np.add.at(space.projection, grads.projection_ids, lr * grads.projection_grads)

        limit = self.config.max_param_magnitude
        touched = space.entity[np.unique(ids)]
        if not np.isfinite(touched).all() or np.abs(touched).max() > limit:
            raise NonFiniteError(f"parameters diverged beyond magnitude {limit:g}", step=step)
        if len(grads.relation_ids):
            rows = space.relation[np.unique(grads.relation_ids)]
            if not np.isfinite(rows).all() or np.abs(rows).max() > limit:
                raise NonFiniteError(f"relation vectors diverged beyond magnitude {limit:g}", step=step)
        if len(grads.projection_ids):
            blocks = space.projection[np.unique(grads.projection_ids)]
            if not np.isfinite(blocks).all() or np.abs(blocks).max() > limit:
                raise NonFiniteError(f"projection diverged beyond magnitude {limit:g}", step=step)

    def _learning_rate(self, step: int, total_steps: int) -> float:
        cfg = self.config
        if cfg.lr_schedule == 'linear' and total_steps > 0:
            return cfg.learning_rate * max(cfg.min_lr_fraction, 1.0 - step / total_steps)
        return cfg.learning_rate

    def _run_batches(self, space, tasks, probs, batch_ids, epoch, batches_per_epoch,
                     ent_touches, rel_touches, rng) -> _EpochTally:
        cfg = self.config
        tally = _EpochTally(space.num_entities)
        total_steps = cfg.epochs * batches_per_epoch
        for b in batch_ids:
            step = epoch * batches_per_epoch + b
            task = tasks[rng.choice(len(tasks), p=probs)]
            grads = self._batch_gradients(space, task, cfg.batch_size, rng, tally)
            if grads is None:
                continue
            self._apply(space, grads, self._learning_rate(step, total_steps),
                        ent_touches, rel_touches, step)
            tally.sums[task.name] += float(grads.values.sum())
            tally.counts[task.name] += len(grads.values)
            tally.entity_updates[task.name] += np.bincount(grads.entity_ids, minlength=space.num_entities)
        return tally

    # ------------------------------------------------------------------
    # Entry points
    # ------------------------------------------------------------------

    def train(self, stores: Mapping[str, object]) -> Tuple[EmbeddingSpace, TrainReport]:
        """
        Train the joint embedding.

        Args:
            stores: Mapping with any of kg_medicine, kg_disease (TripleStore)
                and pm_graph, pd_graph (BipartiteGraph), all over one vocabulary

        Returns:
            Tuple of (trained space, TrainReport)
        """
        cfg = self.config
        vocab = self._vocabulary(stores)
        workers = max(1, int(cfg.workers))

        seeds = np.random.SeedSequence(cfg.seed).spawn(1 + workers)
        init_rng = np.random.default_rng(seeds[0])
        worker_rngs = [np.random.default_rng(s) for s in seeds[1:]]

        space = EmbeddingSpace.initialize(
            vocab.num_entities, vocab.num_relations, cfg.dim_entity, cfg.dim_relation, init_rng
        )
        report = TrainReport(workers=workers)
        report.entity_updates = {t: np.zeros(vocab.num_entities, dtype=np.int64) for t in TASKS}
        report.initial_regularizer = regularizer_value(space, cfg.gamma)

        tasks = self._build_tasks(stores)
        total_size = sum(task.size for task in tasks)
        if cfg.epochs == 0 or total_size == 0:
            logger.info("Nothing to train; returning the initialized space")
            return space, report

        probs = self._task_probabilities(tasks)
        batches_per_epoch = math.ceil(total_size / cfg.batch_size)
        ent_touches, rel_touches = self._expected_touches(
            tasks, probs, batches_per_epoch * cfg.batch_size, space
        )
        for task in tasks:
            grads = self._batch_gradients(space, task, cfg.batch_size, init_rng, None)
            if grads is not None:
                report.initial_objectives[task.name] = float(grads.values.mean())

        logger.info(
            f"Training on {total_size} instances ({', '.join(f'{t.name}={t.size}' for t in tasks)}); "
            f"{cfg.epochs} epochs x {batches_per_epoch} batches, {workers} worker(s)"
        )

        start = time.perf_counter()
        executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            for epoch in tqdm(range(cfg.epochs), desc="Training", disable=not cfg.progress):
                if executor is None:
                    tallies = [self._run_batches(
                        space, tasks, probs, range(batches_per_epoch), epoch, batches_per_epoch,
                        ent_touches, rel_touches, worker_rngs[0],
                    )]
                else:
                    futures = [
                        executor.submit(
                            self._run_batches, space, tasks, probs,
                            range(w, batches_per_epoch, workers), epoch, batches_per_epoch,
                            ent_touches, rel_touches, worker_rngs[w],
                        )
                        for w in range(workers)
                    ]
                    tallies = [f.result() for f in futures]
                if cfg.hinge_sweep and cfg.gamma > 0:
                    self._hinge_sweep(space, epoch, batches_per_epoch)
                self._record_epoch(report, tallies, space, epoch, batches_per_epoch)
        finally:
            if executor is not None:
                executor.shutdown(wait=True)

        report.wall_time = time.perf_counter() - start
        logger.info(f"Training finished in {report.wall_time:.2f}s; final objectives "
                    + ', '.join(f"{t}={report.final_objective(t):.4f}" for t in TASKS
                                if report.update_counts[t]))
        return space, report

    def _hinge_sweep(self, space: EmbeddingSpace, epoch: int, batches_per_epoch: int):
        """Epoch-end proximal hinge step with strength gamma times the learning rate summed over the epoch."""
        total_steps = self.config.epochs * batches_per_epoch
        tau = self.config.gamma * sum(
            self._learning_rate(epoch * batches_per_epoch + b, total_steps) for b in range(batches_per_epoch)
        )
        pulled = hinge_proximal_step(space.entity, tau) + hinge_proximal_step(space.relation, tau)
        logger.debug(f"Epoch {epoch + 1}: hinge step of {tau:.4f} on {pulled} row(s) above norm 1")

    def _record_epoch(self, report: TrainReport, tallies: List[_EpochTally],
                      space: EmbeddingSpace, epoch: int, batches_per_epoch: int):
        for task in TASKS:
            total = sum(t.sums[task] for t in tallies)
            count = sum(t.counts[task] for t in tallies)
            report.objectives[task].append(total / count if count else float('nan'))
            report.update_counts[task] += count
            report.dropped[task] += sum(t.dropped[task] for t in tallies)
            for t in tallies:
                report.entity_updates[task] += t.entity_updates[task]
        report.regularizer.append(regularizer_value(space, self.config.gamma))
        report.learning_rates.append(
            self._learning_rate(epoch * batches_per_epoch, self.config.epochs * batches_per_epoch)
        )
        report.epochs += 1
        logger.debug(f"Epoch {epoch + 1}: " + ', '.join(
            f"{t}={report.objectives[t][-1]:.4f}" for t in TASKS if report.update_counts[t]
        ) + f", regularizer={report.regularizer[-1]:.4f}")


def train(stores: Mapping[str, object], config: Optional[TrainConfig] = None) -> Tuple[EmbeddingSpace, TrainReport]:
    """Train a joint embedding (see JointTrainer.train)."""
    return JointTrainer(config).train(stores)


def evaluate_objective(
    space: EmbeddingSpace,
    stores: Mapping[str, object],
    config: Optional[TrainConfig] = None,
    exact: bool = True,
    seed: int = 0
) -> Dict[str, float]:
    """
    Evaluate every term of the joint objective.

    Args:
        space: Embedding parameters
        stores: Same mapping as for train
        config: Supplies bias, norm, gamma and negative counts
        exact: Exact softmax terms (small graphs only); otherwise mean sampled
            negative-sampling objective per instance
        seed: Seed of the sampled estimate

    Returns:
        Dict with one value per task, the regularizer (a penalty), the total
        and a ``sampled`` flag
    """
    config = config if config is not None else get_config().train_config()
    energy = config.energy
    terms = {task: 0.0 for task in TASKS}

    if exact:
        for key, task in STORE_TASKS.items():
            data = stores.get(key)
            if data is None or len(data) == 0:
                continue
            if isinstance(data, TripleStore):
                terms[task] = float(sum(
                    triple_log_likelihood(space, energy, data, h, r, t) for h, r, t in data
                ))
            else:
                terms[task] = weighted_loglik(space, data)
    else:
        trainer = JointTrainer(config)
        rng = np.random.default_rng(seed)
        for task in trainer._build_tasks(stores):
            grads = trainer._batch_gradients(space, task, task.size, rng, None)
            if grads is not None:
                terms[task.name] = float(grads.values.mean())

    terms['regularizer'] = regularizer_value(space, config.gamma)
    terms['total'] = sum(terms[t] for t in TASKS) - terms['regularizer']
    terms['sampled'] = not exact
    return terms

"""Experiment pipeline for MedKGRec: generate, train, recommend, evaluate."""

import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import pandas as pd

from .. import __version__
from ..config import Config, EnergyConfig, get_config
from ..data.graph import DatasetSplit, EntityClass, HeterogeneousDataset, Vocabulary, split_edges
from ..data.storage import (
    COLD_START_FILE,
    DATASET_FILES,
    EMBEDDINGS_FILE,
    GROUND_TRUTH_FILE,
    LATENT_FILE,
    MANIFEST_FILE,
    DataStorage,
)
from ..data.synthetic import GenSpec, SyntheticGenerator
from ..embedding.space import EmbeddingSpace
from ..embedding.trainer import JointTrainer, TrainReport
from ..errors import ConfigError, ParseError
from ..recommendation.recommender import MedicineRecommender
from .evaluation import EvalReport, Evaluator
from .statistics import StatisticalTests

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SPLIT_FILES = {'train': 'pm_train.tsv', 'valid': 'pm_valid.tsv', 'test': 'pm_test.tsv'}
TRAIN_REPORT_FILE = 'train_report.json'
TRAIN_HISTORY_FILE = 'train_history.tsv'
RECOMMENDATIONS_FILE = 'recommendations.tsv'
REPORT_FILE = 'report.tsv'
RECORDS_FILE = 'records.jsonl'
STATISTICS_FILE = 'statistics.tsv'
STATISTICS_JSON_FILE = 'statistics.json'
EVALUATION_DIR = 'evaluation'
FIGURES_DIR = 'figures'


@dataclass
class RunManifest:
    """
    Provenance of one run, written as manifest.json next to its outputs.

    Attributes:
        command: Subcommand that produced the outputs
        config: Effective configuration snapshot
        inputs: Input file name -> SHA-256
        outputs: Output file name -> SHA-256
        timings: Stage name -> seconds
        details: Command-specific facts (seed, counts, energy, split)
        version: Package version
        created: Local timestamp
    """

    command: str
    config: Dict[str, Any]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)
    version: str = __version__
    created: str = field(default_factory=lambda: datetime.now().isoformat(timespec='seconds'))

    def record_inputs(self, storage: DataStorage, paths: Iterable[Path]):
        for path in paths:
            self.inputs[str(path)] = storage.file_checksum(path)

    def record_outputs(self, storage: DataStorage, paths: Iterable[Path]):
        for path in paths:
            self.outputs[Path(path).name] = storage.file_checksum(path)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class _Timer:
    """Accumulates wall time per named stage."""

    def __init__(self):
        self.timings: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start


class ExperimentPipeline:
    """Runs every stage of an experiment against on-disk artifacts."""

    def __init__(self, config: Optional[Config] = None, progress: bool = True, plots: bool = False):
        """
        Initialize pipeline.

        Args:
            config: Effective configuration (global instance if None)
            progress: Show progress bars
            plots: Render figures into <out>/figures/
        """
        self.config = config if config is not None else get_config()
        self.progress = progress
        self.plots = plots
        self.storage = DataStorage()

    # ------------------------------------------------------------------
    # generate
    # ------------------------------------------------------------------

    def generate(self, out_dir: PathLike, seed: Optional[int] = None) -> RunManifest:
        """
        Generate a synthetic dataset directory.

        Args:
            out_dir: Output directory
            seed: Overrides generation.seed

        Returns:
            RunManifest of the run
        """
        timer = _Timer()
        spec = GenSpec.from_config(self.config, seed=seed)
        with timer.stage('generate'):
            dataset = SyntheticGenerator(spec).generate()
        with timer.stage('write'):
            written = self.storage.write_dataset(dataset, out_dir)

        manifest = RunManifest('generate', self.config.snapshot(), timings=timer.timings)
        manifest.outputs = written['files']
        manifest.details = {'seed': spec.seed, 'spec': asdict(spec), 'counts': written['counts']}
        self.storage.write_manifest(manifest.to_dict(), out_dir)
        logger.info(f"Generated dataset in {out_dir}: {written['counts']}")
        return manifest

    # ------------------------------------------------------------------
    # train
    # ------------------------------------------------------------------

    def train(self, data_dir: PathLike, out_dir: PathLike) -> Tuple[EmbeddingSpace, TrainReport]:
        """
        Split prescriptions, train the joint embedding and write the model directory.

        Only patient-medicine edges are split; diagnoses and both knowledge
        graphs are used in full.

        Args:
            data_dir: Dataset directory
            out_dir: Model directory (embeddings, vocabulary, split files, report)

        Returns:
            Tuple of (trained space, TrainReport)
        """
        logger.info("=" * 80)
        logger.info(f"Training on {data_dir}")
        logger.info("=" * 80)

        timer = _Timer()
        train_cfg = self.config.train_config()
        split_cfg = self.config.split_config()

        with timer.stage('load'):
            dataset = self.storage.load_dataset(data_dir)
        split = split_edges(dataset.pm_graph, split_cfg.ratios, split_cfg.seed)

        stores = {
            'kg_medicine': dataset.kg_medicine,
            'kg_disease': dataset.kg_disease,
            'pm_graph': split.train,
            'pd_graph': dataset.pd_graph,
        }
        with timer.stage('train'):
            space, report = JointTrainer(train_cfg).train(stores)

        out = Path(out_dir)
        with timer.stage('write'):
            outputs = [self.storage.save_embeddings(space, out / EMBEDDINGS_FILE)]
            outputs.extend(self.storage.write_vocabulary(dataset.vocab, out))
            for name, filename in SPLIT_FILES.items():
                outputs.append(self.storage.write_bipartite(split.partition(name), out / filename))
            outputs.append(self.storage.save_json(report.to_dict(), out / TRAIN_REPORT_FILE))
            outputs.append(self.storage.save_table(report.to_frame(), out / TRAIN_HISTORY_FILE))
            if self.plots:
                outputs.extend(self._training_figures(report, out / FIGURES_DIR))

        manifest = RunManifest('train', self.config.snapshot(), timings=timer.timings)
        manifest.record_inputs(self.storage, self._dataset_files(data_dir))
        manifest.record_outputs(self.storage, outputs)
        manifest.details = {
            'seed': train_cfg.seed,
            'workers': report.workers,
            'energy': asdict(train_cfg.energy),
            'split': {'ratios': list(split.ratios), 'seed': split.seed, 'sizes': list(split.sizes())},
            'counts': dataset.tallies(),
        }
        self.storage.write_manifest(manifest.to_dict(), out)
        logger.info(f"Model written to {out}")
        return space, report

    # ------------------------------------------------------------------
    # Model directories
    # ------------------------------------------------------------------

    def load_model(self, model: PathLike) -> Tuple[EmbeddingSpace, Vocabulary, Path, Dict[str, Any]]:
        """
        Load a model directory (or its embeddings file).

        Args:
            model: Model directory, or the embeddings file inside one

        Returns:
            Tuple of (space, vocabulary, model directory, manifest or {})
        """
        model = Path(model)
        model_dir = model if model.is_dir() else model.parent
        embeddings_path = model / EMBEDDINGS_FILE if model.is_dir() else model

        space = self.storage.load_embeddings(embeddings_path)
        vocab = self.storage.load_vocabulary(model_dir)
        if vocab.num_entities != space.num_entities or vocab.num_relations != space.num_relations:
            raise ParseError(
                f"vocabulary ({vocab.num_entities} entities, {vocab.num_relations} relations) does not "
                f"match embeddings ({space.num_entities}, {space.num_relations})",
                path=str(embeddings_path),
            )
        manifest_path = model_dir / MANIFEST_FILE
        manifest = self.storage.load_json(manifest_path) if manifest_path.exists() else {}
        return space, vocab, model_dir, manifest

    def model_energy(self, manifest: Dict[str, Any]) -> EnergyConfig:
        """Bias and norm the model was trained with (configured ones if unrecorded)."""
        recorded = manifest.get('details', {}).get('energy')
        if recorded:
            return EnergyConfig(**recorded).validate()
        return self.config.train_config().energy

    def load_split(self, model_dir: PathLike, vocab: Vocabulary,
                   manifest: Optional[Dict[str, Any]] = None) -> DatasetSplit:
        """Reload the prescription split written next to the embeddings."""
        model_dir = Path(model_dir)
        parts = {
            name: self.storage.load_bipartite(model_dir / filename, vocab, EntityClass.MEDICINE, 'sum')
            for name, filename in SPLIT_FILES.items()
        }
        recorded = (manifest or {}).get('details', {}).get('split', {})
        split_cfg = self.config.split_config()
        return DatasetSplit(
            train=parts['train'],
            valid=parts['valid'],
            test=parts['test'],
            ratios=tuple(recorded.get('ratios', split_cfg.ratios)),
            seed=recorded.get('seed', split_cfg.seed),
        )

    # ------------------------------------------------------------------
    # recommend
    # ------------------------------------------------------------------

    def recommend(
        self,
        model: PathLike,
        diagnoses: Sequence[str] = (),
        patient: Optional[str] = None,
        k: Optional[int] = None,
        candidates_file: Optional[PathLike] = None,
        exclude: Sequence[str] = (),
        out_dir: Optional[PathLike] = None
    ) -> pd.DataFrame:
        """
        Recommend medicines for a new patient (diagnoses) or an existing one.

        Args:
            model: Model directory or embeddings file
            diagnoses: Disease names, earliest first
            patient: Existing patient name (takes precedence over diagnoses)
            k: Set size (recommendation.k if None)
            candidates_file: Medicine names to choose from, one per line
            exclude: Medicine names never recommended
            out_dir: Also write recommendations.tsv and a manifest here

        Returns:
            DataFrame with columns rank, medicine, score, affinity, penalty
        """
        timer = _Timer()
        with timer.stage('load'):
            space, vocab, model_dir, model_manifest = self.load_model(model)
        rec_cfg = self.config.recommend_config()
        recommender = MedicineRecommender(space, vocab, rec_cfg, self.model_energy(model_manifest))
        candidates = self.storage.load_names(candidates_file) if candidates_file else None

        with timer.stage('recommend'):
            if patient is not None:
                result = recommender.for_patient(patient, k, candidates=candidates, exclude=exclude)
            else:
                result = recommender.for_diagnoses(list(diagnoses), k, candidates=candidates, exclude=exclude)
        frame = result.to_frame(vocab)

        if out_dir is not None:
            out = Path(out_dir)
            path = self.storage.save_table(frame, out / RECOMMENDATIONS_FILE)
            manifest = RunManifest('recommend', self.config.snapshot(), timings=timer.timings)
            inputs = [model_dir / EMBEDDINGS_FILE] + ([Path(candidates_file)] if candidates_file else [])
            manifest.record_inputs(self.storage, inputs)
            manifest.record_outputs(self.storage, [path])
            manifest.details = {'diagnoses': list(diagnoses), 'patient': patient, 'exclude': list(exclude)}
            self.storage.write_manifest(manifest.to_dict(), out)
        return frame

    # ------------------------------------------------------------------
    # evaluate
    # ------------------------------------------------------------------

    def evaluate(self, data_dir: PathLike, model: PathLike, out_dir: Optional[PathLike] = None) -> EvalReport:
        """
        Evaluate a trained model on its held-out prescriptions.

        Args:
            data_dir: Dataset directory the model was trained on
            model: Model directory or embeddings file
            out_dir: Report directory (<model dir>/evaluation if None)

        Returns:
            EvalReport
        """
        logger.info("=" * 80)
        logger.info(f"Evaluating {model} on {data_dir}")
        logger.info("=" * 80)

        timer = _Timer()
        eval_cfg = self.config.eval_config()
        with timer.stage('load'):
            dataset = self.storage.load_dataset(data_dir)
            space, vocab, model_dir, model_manifest = self.load_model(model)
            self._check_same_vocabulary(dataset, vocab)
            split = self.load_split(model_dir, dataset.vocab, model_manifest)

        evaluator = Evaluator(
            space, dataset, split, self.model_energy(model_manifest),
            self.config.recommend_config(), eval_cfg, progress=self.progress,
        )
        with timer.stage('evaluate'):
            report = evaluator.run()

        out = Path(out_dir) if out_dir is not None else model_dir / EVALUATION_DIR
        statistics = StatisticalTests(eval_cfg.significance_levels)
        with timer.stage('write'):
            outputs = [
                self.storage.save_table(report.to_frame(), out / REPORT_FILE),
                self.storage.save_records(report.records, out / RECORDS_FILE),
                self.storage.save_table(statistics.create_summary_table(report.statistics), out / STATISTICS_FILE),
                self.storage.save_json(report.statistics, out / STATISTICS_JSON_FILE),
            ]
            if self.plots:
                outputs.extend(self._evaluation_figures(report, out / FIGURES_DIR))

        manifest = RunManifest('evaluate', self.config.snapshot(), timings=timer.timings)
        manifest.record_inputs(
            self.storage,
            self._dataset_files(data_dir)
            + [model_dir / EMBEDDINGS_FILE] + [model_dir / name for name in SPLIT_FILES.values()],
        )
        manifest.record_outputs(self.storage, outputs)
        manifest.details = {
            'split': report.split,
            'queries': int(report.methods['queries'].max()) if len(report.methods) else 0,
            'mean_jaccard': report.mean_jaccard,
            'ddi_rate': report.ddi_rate,
        }
        self.storage.write_manifest(manifest.to_dict(), out)
        logger.info(f"Evaluation written to {out}")
        return report

    def _check_same_vocabulary(self, dataset: HeterogeneousDataset, vocab: Vocabulary):
        if (dataset.vocab.entity_names != vocab.entity_names
                or dataset.vocab.relation_names != vocab.relation_names):
            raise ConfigError("the embeddings were trained on a different dataset (entity tables differ)")

    def _dataset_files(self, data_dir: PathLike) -> List[Path]:
        data_dir = Path(data_dir)
        names = list(DATASET_FILES.values()) + [COLD_START_FILE, GROUND_TRUTH_FILE, LATENT_FILE]
        return [data_dir / name for name in names if (data_dir / name).exists()]

    # ------------------------------------------------------------------
    # Figures
    # ------------------------------------------------------------------

    def _training_figures(self, report: TrainReport, directory: Path) -> List[Path]:
        from ..visualization.plots import ResultsVisualizer

        visualizer = ResultsVisualizer()
        fig = visualizer.plot_training_curves(report.to_frame())
        path = self.storage.save_figure(fig, directory / 'training_curves.png', visualizer.dpi)
        visualizer.close(fig)
        return [path]

    def _evaluation_figures(self, report: EvalReport, directory: Path) -> List[Path]:
        from ..visualization.plots import ResultsVisualizer

        visualizer = ResultsVisualizer()
        paths = []
        figures = {'method_comparison.png': visualizer.plot_method_comparison(report.methods)}
        if report.ranking is not None:
            cold = report.cold_start.normalized_ranks if report.cold_start is not None else None
            figures['rank_distribution.png'] = visualizer.plot_rank_distribution(
                report.ranking.normalized_ranks, cold
            )
        for filename, fig in figures.items():
            paths.append(self.storage.save_figure(fig, directory / filename, visualizer.dpi))
            visualizer.close(fig)
        return paths

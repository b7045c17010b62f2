"""Data storage and persistence for graphs, embeddings and run artifacts."""

import hashlib
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from ..embedding.space import EmbeddingSpace
from ..errors import IoError, ParseError
from .graph import (
    BipartiteGraph,
    EntityClass,
    GroundTruth,
    HeterogeneousDataset,
    TripleStore,
    Vocabulary,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# File names inside a dataset directory
DATASET_FILES = {
    'kg_medicine': 'kg_medicine.tsv',
    'kg_disease': 'kg_disease.tsv',
    'pm_graph': 'patient_medicine.tsv',
    'pd_graph': 'patient_disease.tsv',
}
COLD_START_FILE = 'cold_start_edges.tsv'
GROUND_TRUTH_FILE = 'ground_truth.json'
LATENT_FILE = 'latent.tsv'
MANIFEST_FILE = 'manifest.json'
EMBEDDINGS_FILE = 'embeddings.txt'
ENTITIES_FILE = 'entities.tsv'
RELATIONS_FILE = 'relations.tsv'


@contextmanager
def io_errors(path: PathLike, action: str) -> Iterator[None]:
    """Re-raise OS failures as IoError."""
    try:
        yield
    except IoError:
        raise
    except OSError as e:
        raise IoError(f"cannot {action} {path}: {e.strerror or e}") from e


def _fmt(value: float) -> str:
    return format(float(value), '.17g')


def _data_lines(path: Path) -> Iterator[Tuple[int, List[str]]]:
    """Yield (line number, tab-separated fields), skipping blanks and # comments."""
    with io_errors(path, 'read'):
        with open(path, 'r', encoding='utf-8') as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.rstrip('\r\n')
                if not line.strip() or line.lstrip().startswith('#'):
                    continue
                yield lineno, line.split('\t')


class DataStorage:
    """Reads and writes every on-disk format used by MedKGRec."""

    # ------------------------------------------------------------------
    # Knowledge-graph triples
    # ------------------------------------------------------------------

    def load_triples(self, path: PathLike, vocab: Optional[Vocabulary] = None) -> TripleStore:
        """
        Load a triple TSV file.

        Format: head<TAB>relation<TAB>tail<TAB>head_class<TAB>tail_class

        Args:
            path: File to read
            vocab: Vocabulary to intern into (a fresh one if None)

        Returns:
            TripleStore; ``store.duplicates`` holds the number of dropped duplicates
        """
        path = Path(path)
        vocab = vocab if vocab is not None else Vocabulary()
        triples = []
        for lineno, parts in _data_lines(path):
            if len(parts) != 5 or not all(p.strip() for p in parts):
                raise ParseError(f"expected 5 tab-separated columns, got {len(parts)}",
                                 line=lineno, path=str(path))
            head, relation, tail, head_class, tail_class = (p.strip() for p in parts)
            try:
                h_class = EntityClass.parse(head_class)
                t_class = EntityClass.parse(tail_class)
            except ParseError as e:
                raise type(e)(str(e), line=lineno, path=str(path)) from None
            h = vocab.intern_entity(head, h_class)
            t = vocab.intern_entity(tail, t_class)
            r = vocab.intern_relation(relation)
            triples.append((h, r, t))

        store = TripleStore(vocab, triples)
        logger.info(f"Loaded {len(store)} triples from {path} ({store.duplicates} duplicates dropped)")
        return store

    def write_triples(self, store: TripleStore, path: PathLike) -> Path:
        """Write a store in the triple TSV format."""
        path = Path(path)
        names = store.vocab.entity_names
        classes = store.vocab.entity_classes
        rels = store.vocab.relation_names
        with io_errors(path, 'write'):
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                for h, r, t in store:
                    f.write(f"{names[h]}\t{rels[r]}\t{names[t]}\t{classes[h].value}\t{classes[t].value}\n")
        return path

    # ------------------------------------------------------------------
    # Bipartite edges
    # ------------------------------------------------------------------

    def load_bipartite(
        self,
        path: PathLike,
        vocab: Vocabulary,
        item_class,
        merge: str = 'sum'
    ) -> BipartiteGraph:
        """
        Load a bipartite TSV file.

        Format: user<TAB>item<TAB>weight (weight optional, default 1)

        Args:
            path: File to read
            vocab: Vocabulary to intern into (users are patients)
            item_class: Class of the item side (medicine or disease)
            merge: How repeated pairs combine ('sum' or 'dedup')

        Returns:
            BipartiteGraph
        """
        path = Path(path)
        item_class = EntityClass.parse(item_class)
        edges = []
        for lineno, parts in _data_lines(path):
            if len(parts) not in (2, 3) or not all(p.strip() for p in parts[:2]):
                raise ParseError(f"expected 2 or 3 tab-separated columns, got {len(parts)}",
                                 line=lineno, path=str(path))
            weight = 1.0
            if len(parts) == 3 and parts[2].strip():
                try:
                    weight = float(parts[2])
                except ValueError:
                    raise ParseError(f"bad weight {parts[2]!r}", line=lineno, path=str(path)) from None
                if not weight > 0 or not np.isfinite(weight):
                    raise ParseError(f"weight must be positive, got {parts[2]!r}", line=lineno, path=str(path))
            user = vocab.intern_entity(parts[0].strip(), EntityClass.PATIENT)
            item = vocab.intern_entity(parts[1].strip(), item_class)
            edges.append((user, item, weight))

        graph = BipartiteGraph(vocab, edges, merge=merge)
        logger.info(f"Loaded {len(graph)} {item_class.value} edges from {path} ({graph.merged} repeats merged)")
        return graph

    def write_bipartite(self, graph: BipartiteGraph, path: PathLike) -> Path:
        """Write edges in the bipartite TSV format (ingestion order)."""
        path = Path(path)
        names = graph.vocab.entity_names
        with io_errors(path, 'write'):
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                for u, i, w in graph:
                    f.write(f"{names[u]}\t{names[i]}\t{_fmt(w)}\n")
        return path

    def load_names(self, path: PathLike) -> List[str]:
        """One name per line (first tab-separated field), e.g. a candidate medicine list."""
        return [parts[0].strip() for _, parts in _data_lines(Path(path)) if parts[0].strip()]

    # ------------------------------------------------------------------
    # Name <-> id tables
    # ------------------------------------------------------------------

    def write_vocabulary(self, vocab: Vocabulary, directory: PathLike) -> Tuple[Path, Path]:
        """Write entities.tsv (id, name, class) and relations.tsv (id, name)."""
        directory = Path(directory)
        entities_path = directory / ENTITIES_FILE
        relations_path = directory / RELATIONS_FILE
        with io_errors(directory, 'write'):
            directory.mkdir(parents=True, exist_ok=True)
            with open(entities_path, 'w', encoding='utf-8') as f:
                for idx, (name, cls) in enumerate(zip(vocab.entity_names, vocab.entity_classes)):
                    f.write(f"{idx}\t{name}\t{cls.value}\n")
            with open(relations_path, 'w', encoding='utf-8') as f:
                for idx, name in enumerate(vocab.relation_names):
                    f.write(f"{idx}\t{name}\n")
        return entities_path, relations_path

    def load_vocabulary(self, directory: PathLike) -> Vocabulary:
        """Rebuild a vocabulary from its name <-> id tables."""
        directory = Path(directory)
        vocab = Vocabulary()
        for lineno, parts in _data_lines(directory / ENTITIES_FILE):
            if len(parts) != 3:
                raise ParseError("expected id, name, class", line=lineno, path=str(directory / ENTITIES_FILE))
            if vocab.intern_entity(parts[1], parts[2]) != int(parts[0]):
                raise ParseError(f"entity ids must be dense and ordered, got {parts[0]}",
                                 line=lineno, path=str(directory / ENTITIES_FILE))
        for lineno, parts in _data_lines(directory / RELATIONS_FILE):
            if len(parts) != 2:
                raise ParseError("expected id, name", line=lineno, path=str(directory / RELATIONS_FILE))
            if vocab.intern_relation(parts[1]) != int(parts[0]):
                raise ParseError(f"relation ids must be dense and ordered, got {parts[0]}",
                                 line=lineno, path=str(directory / RELATIONS_FILE))
        return vocab

    # ------------------------------------------------------------------
    # Embeddings
    # ------------------------------------------------------------------

    def save_embeddings(self, space: EmbeddingSpace, path: PathLike) -> Path:
        """
        Write embeddings as text.

        Layout: header ``k d num_entities num_relations``; one line per entity
        ``id v1..vk``; one per relation ``id v1..vd``; one per projection
        matrix ``id`` followed by its k*d row-major entries.
        """
        path = Path(path)
        with io_errors(path, 'write'):
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                f.write(f"{space.k} {space.d} {space.num_entities} {space.num_relations}\n")
                for idx, row in enumerate(space.entity):
                    f.write(f"{idx} " + ' '.join(_fmt(v) for v in row) + '\n')
                for idx, row in enumerate(space.relation):
                    f.write(f"{idx} " + ' '.join(_fmt(v) for v in row) + '\n')
                for idx, matrix in enumerate(space.projection):
                    f.write(f"{idx} " + ' '.join(_fmt(v) for v in matrix.ravel()) + '\n')
        logger.info(f"Saved embeddings ({space.num_entities} entities, {space.num_relations} relations) to {path}")
        return path

    def load_embeddings(self, path: PathLike) -> EmbeddingSpace:
        """Read embeddings written by save_embeddings."""
        path = Path(path)
        with io_errors(path, 'read'):
            with open(path, 'r', encoding='utf-8') as f:
                lines = f.read().splitlines()
        if not lines:
            raise ParseError("empty embeddings file", path=str(path))
        try:
            k, d, n_ent, n_rel = (int(x) for x in lines[0].split())
        except ValueError:
            raise ParseError("bad header, expected 'k d num_entities num_relations'", line=1, path=str(path)) from None

        expected = 1 + n_ent + 2 * n_rel
        if len(lines) != expected:
            raise ParseError(f"expected {expected} lines, found {len(lines)}", path=str(path))

        def _block(start: int, count: int, width: int) -> np.ndarray:
            out = np.empty((count, width), dtype=np.float64)
            for offset in range(count):
                lineno = start + offset + 1
                parts = lines[start + offset].split()
                if len(parts) != width + 1 or int(parts[0]) != offset:
                    raise ParseError(f"expected id {offset} and {width} values", line=lineno, path=str(path))
                out[offset] = np.array(parts[1:], dtype=np.float64)
            return out

        entity = _block(1, n_ent, k)
        relation = _block(1 + n_ent, n_rel, d)
        projection = _block(1 + n_ent + n_rel, n_rel, k * d).reshape(n_rel, k, d)
        return EmbeddingSpace(entity, relation, projection)

    # ------------------------------------------------------------------
    # Datasets
    # ------------------------------------------------------------------

    def load_dataset(self, directory: PathLike) -> HeterogeneousDataset:
        """
        Load the four graphs of a dataset directory over one vocabulary.

        Args:
            directory: Directory holding the dataset TSV files

        Returns:
            HeterogeneousDataset (ground truth attached when present)
        """
        directory = Path(directory)
        if not directory.is_dir():
            raise IoError(f"dataset directory not found: {directory}")

        vocab = Vocabulary()
        kg_medicine = self.load_triples(directory / DATASET_FILES['kg_medicine'], vocab)
        kg_disease = self.load_triples(directory / DATASET_FILES['kg_disease'], vocab)
        pm_graph = self.load_bipartite(directory / DATASET_FILES['pm_graph'], vocab, EntityClass.MEDICINE, 'sum')
        pd_graph = self.load_bipartite(directory / DATASET_FILES['pd_graph'], vocab, EntityClass.DISEASE, 'dedup')

        ground_truth = None
        if (directory / GROUND_TRUTH_FILE).exists():
            raw = self.load_json(directory / GROUND_TRUTH_FILE)
            ground_truth = GroundTruth(
                blocks=raw.get('blocks', {}),
                interaction_pairs=[tuple(p) for p in raw.get('interaction_pairs', [])],
                cold_start_medicines=raw.get('cold_start_medicines', []),
                relation_vectors=raw.get('relation_vectors', {}),
            )
            if (directory / LATENT_FILE).exists():
                for _, parts in _data_lines(directory / LATENT_FILE):
                    ground_truth.latent[parts[0]] = [float(v) for v in parts[1:]]
            if (directory / COLD_START_FILE).exists():
                ground_truth.cold_start_edges = self.load_bipartite(
                    directory / COLD_START_FILE, vocab, EntityClass.MEDICINE, 'sum'
                )

        return HeterogeneousDataset(vocab, kg_medicine, kg_disease, pm_graph, pd_graph, ground_truth)

    def write_dataset(self, dataset: HeterogeneousDataset, directory: PathLike) -> Dict[str, Any]:
        """
        Write a dataset directory and its manifest.

        Args:
            dataset: Dataset to write
            directory: Output directory (created if missing)

        Returns:
            Manifest dictionary (counts, seed, checksums)
        """
        directory = Path(directory)
        with io_errors(directory, 'create'):
            directory.mkdir(parents=True, exist_ok=True)

        written = [
            self.write_triples(dataset.kg_medicine, directory / DATASET_FILES['kg_medicine']),
            self.write_triples(dataset.kg_disease, directory / DATASET_FILES['kg_disease']),
            self.write_bipartite(dataset.pm_graph, directory / DATASET_FILES['pm_graph']),
            self.write_bipartite(dataset.pd_graph, directory / DATASET_FILES['pd_graph']),
        ]

        truth = dataset.ground_truth
        if truth is not None:
            if truth.cold_start_edges is not None:
                written.append(self.write_bipartite(truth.cold_start_edges, directory / COLD_START_FILE))
            written.append(self.save_json({
                'blocks': truth.blocks,
                'interaction_pairs': [list(p) for p in truth.interaction_pairs],
                'cold_start_medicines': truth.cold_start_medicines,
                'relation_vectors': truth.relation_vectors,
            }, directory / GROUND_TRUTH_FILE))
            latent_path = directory / LATENT_FILE
            with io_errors(latent_path, 'write'):
                with open(latent_path, 'w', encoding='utf-8') as f:
                    for name, vector in truth.latent.items():
                        f.write(name + '\t' + '\t'.join(_fmt(v) for v in vector) + '\n')
            written.append(latent_path)

        return {
            'counts': dataset.tallies(),
            'files': {p.name: self.file_checksum(p) for p in written},
        }

    # ------------------------------------------------------------------
    # Reports, manifests, figures
    # ------------------------------------------------------------------

    def save_json(self, obj: Any, path: PathLike) -> Path:
        """Save JSON with numpy types converted."""
        path = Path(path)
        with io_errors(path, 'write'):
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(self._clean_for_json(obj), f, indent=2, sort_keys=True)
                f.write('\n')
        return path

    def load_json(self, path: PathLike) -> Any:
        path = Path(path)
        with io_errors(path, 'read'):
            with open(path, 'r', encoding='utf-8') as f:
                try:
                    return json.load(f)
                except json.JSONDecodeError as e:
                    raise ParseError(f"invalid JSON: {e.msg}", line=e.lineno, path=str(path)) from None

    def save_table(self, table: pd.DataFrame, path: PathLike) -> Path:
        """Save a DataFrame as TSV."""
        path = Path(path)
        with io_errors(path, 'write'):
            path.parent.mkdir(parents=True, exist_ok=True)
            table.to_csv(path, sep='\t', index=False, float_format='%.6f')
        logger.info(f"Saved table with {len(table)} rows to {path}")
        return path

    def save_records(self, records: pd.DataFrame, path: PathLike) -> Path:
        """Save a DataFrame as JSON lines."""
        path = Path(path)
        with io_errors(path, 'write'):
            path.parent.mkdir(parents=True, exist_ok=True)
            records.to_json(path, orient='records', lines=True, double_precision=10)
        return path

    def save_figure(self, fig, path: PathLike, dpi: int = 150) -> Path:
        """Save a matplotlib figure."""
        path = Path(path)
        with io_errors(path, 'write'):
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, dpi=dpi, bbox_inches='tight')
        logger.info(f"Saved figure to {path}")
        return path

    def file_checksum(self, path: PathLike) -> str:
        """SHA-256 of a file."""
        digest = hashlib.sha256()
        with io_errors(path, 'read'):
            with open(path, 'rb') as f:
                for chunk in iter(lambda: f.read(1 << 16), b''):
                    digest.update(chunk)
        return digest.hexdigest()

    def write_manifest(self, manifest: Dict[str, Any], directory: PathLike) -> Path:
        return self.save_json(manifest, Path(directory) / MANIFEST_FILE)

    def _clean_for_json(self, obj: Any) -> Any:
        """
        Clean object for JSON serialization (convert numpy types, etc.).

        Args:
            obj: Object to clean

        Returns:
            JSON-serializable object
        """
        if isinstance(obj, dict):
            return {str(key): self._clean_for_json(value) for key, value in obj.items()}
        elif isinstance(obj, (list, tuple)):
            return [self._clean_for_json(item) for item in obj]
        elif isinstance(obj, (np.bool_, bool)):
            return bool(obj)
        elif isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.ndarray):
            return self._clean_for_json(obj.tolist())
        elif isinstance(obj, Path):
            return str(obj)
        elif isinstance(obj, float) and not np.isfinite(obj):
            return None
        else:
            return obj


def load_triples(path: PathLike, vocab: Optional[Vocabulary] = None) -> TripleStore:
    """Load a triple TSV file (see DataStorage.load_triples)."""
    return DataStorage().load_triples(path, vocab)


def write_triples(store: TripleStore, path: PathLike) -> Path:
    """Write a triple TSV file (see DataStorage.write_triples)."""
    return DataStorage().write_triples(store, path)

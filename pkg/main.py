#!/usr/bin/env python3
"""
MedKGRec - Main Entry Point

Joint knowledge-graph and bipartite-graph embedding for interaction-aware
medicine recommendation.
"""

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

from src.analysis.pipeline import ExperimentPipeline
from src.config import PENALTY_MODES, Config, get_config, reset_config
from src.errors import MedRecError

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s %(message)s'

logger = logging.getLogger(__name__)


def _common_arguments() -> argparse.ArgumentParser:
    """Flags accepted by every subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='Seed of the run (generation.seed or training.seed)')
    common.add_argument('--config', type=str, help='Override file, YAML or flat key = value')
    common.add_argument('--workers', type=int, help='Training worker threads (>= 2 runs lock-free parallel SGD)')
    common.add_argument('--deterministic', action='store_true', help='Force a single worker for reproducible runs')
    common.add_argument('--log-level', type=str, default=None,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='Logging level')
    common.add_argument('--plots', action='store_true', help='Render figures into <out>/figures/')
    common.add_argument('--no-progress', action='store_true', help='Hide progress bars')
    return common


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with the generate, train, recommend and evaluate subcommands."""
    common = _common_arguments()
    parser = argparse.ArgumentParser(
        prog='main.py',
        description='MedKGRec: knowledge-graph embeddings for interaction-aware medicine recommendation',
        epilog='Precedence: command-line flags > --config file > config.yaml > built-in defaults.',
    )
    subparsers = parser.add_subparsers(dest='command', required=True, metavar='{generate,train,recommend,evaluate}')

    generate = subparsers.add_parser('generate', parents=[common], help='Write a synthetic dataset directory')
    generate.add_argument('--out', required=True, help='Output dataset directory')
    generate.add_argument('--patients', type=int, help='Number of patients')
    generate.add_argument('--medicines', type=int, help='Number of medicines')
    generate.add_argument('--diseases', type=int, help='Number of diseases')
    generate.add_argument('--noise', type=float, help='Latent noise around block centroids')
    generate.add_argument('--cold-start-fraction', type=float, help='Share of medicines without prescriptions')

    train = subparsers.add_parser('train', parents=[common], help='Train the joint embedding on a dataset')
    train.add_argument('--data', required=True, help='Dataset directory')
    train.add_argument('--out', required=True, help='Model directory')
    train.add_argument('--epochs', type=int, help='Passes over the training instances')
    train.add_argument('--dim', type=int, help='Entity dimension k')
    train.add_argument('--dim-relation', type=int, help='Relation dimension d')
    train.add_argument('--learning-rate', type=float, help='Initial learning rate')
    train.add_argument('--lr-schedule', choices=['constant', 'linear'], help='Learning-rate schedule')
    train.add_argument('--gamma', type=float, help='Weight of the hinge-norm regularizer')
    train.add_argument('--batch-size', type=int, help='Instances per mini-batch')
    train.add_argument('--negatives-kg', type=int, help='Corrupted triples per positive triple')
    train.add_argument('--negatives-edge', type=int, help='Noise items per positive edge')
    train.add_argument('--norm', choices=['L1', 'L2'], help='Norm of the translation energy')
    train.add_argument('--bias', type=float, help='Bias b of the translation energy')
    train.add_argument('--sigmoid-triple-negatives', '--eq13-literal', action='store_true',
                       help='Negative triples score sigma(z) instead of log sigma(-z)')
    train.add_argument('--logsigmoid-edge-negatives', '--eq14-literal', action='store_true',
                       help='Negative edges score log sigma(z) instead of log sigma(-z)')

    recommend = subparsers.add_parser(
        'recommend', parents=[common], help='Recommend medicines; prints rank, medicine, score, affinity, penalty',
    )
    recommend.add_argument('--embeddings', required=True, help='Model directory or its embeddings.txt')
    target = recommend.add_mutually_exclusive_group(required=True)
    target.add_argument('--diagnoses', type=str, help='Comma-separated disease names, earliest first')
    target.add_argument('--patient', type=str, help='Existing patient name')
    recommend.add_argument('--k', type=int, help='Medicines per set')
    recommend.add_argument('--candidates', type=str, help='File with one candidate medicine name per line')
    recommend.add_argument('--exclude', type=str, default='', help='Comma-separated medicines never recommended')
    _recommendation_arguments(recommend)
    recommend.add_argument('--out', type=str, help='Also write recommendations.tsv and a manifest here')

    evaluate = subparsers.add_parser(
        'evaluate', parents=[common],
        help='Evaluate on held-out prescriptions; writes report.tsv (method, queries, mean_jaccard, '
             'ddi_rate, ddi_pair_rate, mean_set_size, hits_at_N, mean_rank, mean_normalized_rank) '
             'and records.jsonl (patient, method, jaccard, ddi, ddi_pairs, set_size, unseen_diseases, '
             'recommended, reference)',
    )
    evaluate.add_argument('--data', required=True, help='Dataset directory')
    evaluate.add_argument('--embeddings', required=True, help='Model directory or its embeddings.txt')
    evaluate.add_argument('--out', type=str, help='Report directory (default <model dir>/evaluation)')
    evaluate.add_argument('--split', choices=['valid', 'test'], help='Held-out partition to evaluate')
    evaluate.add_argument('--hits-n', type=int, help='N of hits@N')
    evaluate.add_argument('--k', type=int, help='Medicines per recommended set')
    _recommendation_arguments(evaluate)

    return parser


def _recommendation_arguments(parser: argparse.ArgumentParser):
    parser.add_argument('--beta', type=float, help='Scale of the interaction penalty')
    parser.add_argument('--penalty-projection', action='store_true',
                        help='Project the penalty through the interaction relation matrix')
    parser.add_argument('--penalty-mode', choices=list(PENALTY_MODES), help='Pair penalty form')
    parser.add_argument('--per-diagnosis', action='store_true', help='Top-k per diagnosis instead of one pooled set')
    parser.add_argument('--recent-first', action='store_true', help='Give the latest diagnosis the largest weight')


def _split_names(value: Optional[str]) -> List[str]:
    return [name.strip() for name in (value or '').split(',') if name.strip()]


def _flag(args: argparse.Namespace, name: str):
    return getattr(args, name, None)


def _switch(args: argparse.Namespace, name: str) -> Optional[bool]:
    """True when a store_true flag was given, else None so the configured value stays."""
    return True if getattr(args, name, False) else None


def apply_overrides(config: Config, args: argparse.Namespace):
    """Write command-line flags into the configuration (flags win over files)."""
    config.set('training.workers', _flag(args, 'workers'))
    if args.deterministic:
        config.set('training.workers', 1)
    if args.no_progress:
        config.set('training.progress', False)

    if args.command == 'generate':
        config.set('generation.seed', _flag(args, 'seed'))
        config.set('generation.patients', _flag(args, 'patients'))
        config.set('generation.medicines', _flag(args, 'medicines'))
        config.set('generation.diseases', _flag(args, 'diseases'))
        config.set('generation.noise', _flag(args, 'noise'))
        config.set('generation.cold_start_fraction', _flag(args, 'cold_start_fraction'))
    elif args.command == 'train':
        config.set('training.seed', _flag(args, 'seed'))
        for name in ('epochs', 'learning_rate', 'lr_schedule', 'gamma', 'batch_size',
                     'negatives_kg', 'negatives_edge', 'norm', 'bias'):
            config.set(f'training.{name}', _flag(args, name))
        config.set('training.dim_entity', _flag(args, 'dim'))
        config.set('training.dim_relation', _flag(args, 'dim_relation'))
        config.set('training.sigmoid_triple_negatives', _switch(args, 'sigmoid_triple_negatives'))
        config.set('training.logsigmoid_edge_negatives', _switch(args, 'logsigmoid_edge_negatives'))
    elif args.command in ('recommend', 'evaluate'):
        config.set('recommendation.beta', _flag(args, 'beta'))
        config.set('recommendation.penalty_mode', _flag(args, 'penalty_mode'))
        config.set('recommendation.penalty_projection', _switch(args, 'penalty_projection'))
        config.set('recommendation.per_diagnosis', _switch(args, 'per_diagnosis'))
        config.set('recommendation.recent_first', _switch(args, 'recent_first'))
        if args.command == 'evaluate':
            config.set('evaluation.split', _flag(args, 'split'))
            config.set('evaluation.hits_n', _flag(args, 'hits_n'))
            config.set('evaluation.k', _flag(args, 'k'))


def run_generate(pipeline: ExperimentPipeline, args: argparse.Namespace) -> int:
    manifest = pipeline.generate(args.out)
    counts = manifest.details['counts']
    print(f"Wrote dataset to {args.out} (seed {manifest.details['seed']}): "
          + ', '.join(f"{key}={value}" for key, value in counts.items()))
    return 0


def run_train(pipeline: ExperimentPipeline, args: argparse.Namespace) -> int:
    _, report = pipeline.train(args.data, args.out)
    print("\n" + "=" * 80)
    print("TRAINING SUMMARY")
    print("=" * 80)
    print(f"Epochs: {report.epochs}  Workers: {report.workers}  Wall time: {report.wall_time:.2f}s")
    for task, values in report.objectives.items():
        if report.update_counts[task]:
            print(f"  {task}: {report.initial_objectives.get(task, float('nan')):.4f} -> {values[-1]:.4f}")
    print(f"Model written to {args.out}")
    print("=" * 80)
    return 0


def run_recommend(pipeline: ExperimentPipeline, args: argparse.Namespace) -> int:
    frame = pipeline.recommend(
        args.embeddings,
        diagnoses=_split_names(args.diagnoses),
        patient=args.patient,
        k=args.k,
        candidates_file=args.candidates,
        exclude=_split_names(args.exclude),
        out_dir=args.out,
    )
    frame.to_csv(sys.stdout, sep='\t', index=False, float_format='%.6f')
    return 0


def run_evaluate(pipeline: ExperimentPipeline, args: argparse.Namespace) -> int:
    report = pipeline.evaluate(args.data, args.embeddings, args.out)
    print("\n" + "=" * 80)
    print(f"EVALUATION SUMMARY ({report.split} split)")
    print("=" * 80)
    print(report.to_frame().to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print("\nStatistical Significance:")
    for comparison, tests in report.statistics.items():
        for test_name, result in tests.items():
            if result.get('valid', False):
                print(f"  {comparison} / {test_name}: {result['significance_level']} (p={result['p_value']:.4g})")
    print("=" * 80)
    return 0


COMMANDS: Dict[str, Callable[[ExperimentPipeline, argparse.Namespace], int]] = {
    'generate': run_generate,
    'train': run_train,
    'recommend': run_recommend,
    'evaluate': run_evaluate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point for MedKGRec.

    Args:
        argv: Arguments without the program name (sys.argv[1:] if None)

    Returns:
        Exit code: 0 success, 1 categorized error, 2 usage error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        reset_config()
        config = get_config(args.config)
        level = args.log_level or config.log_level
        logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, force=True)

        apply_overrides(config, args)
        progress = bool(config.get('training.progress', True))
        pipeline = ExperimentPipeline(config, progress=progress, plots=args.plots)
        return COMMANDS[args.command](pipeline, args)
    except MedRecError as e:
        logger.debug("Run failed", exc_info=True)
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())

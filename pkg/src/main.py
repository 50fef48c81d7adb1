"""Main Entry Point for the Retrosynthesis Engine."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from src.checkpoint import decode_checkpoint
from src.config import RunConfig, load_config
from src.dataset import ingest
from src.formatter import format_accuracy_table, format_checkpoint, format_ingest_stats, format_prediction
from src.molgraph import Molecule
from src.numcore import DivergenceError
from src.parser import parse_smiles
from src.pipeline import (
    evaluate_center_topk,
    evaluate_topk,
    evaluate_translation_topk,
    load_models,
    metric_records,
    predict,
    run_train_center,
    run_train_translate,
    write_vocab_artifact,
)
from src.records import write_records

logger = logging.getLogger(__name__)


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Path to a key = value config file')
    common.add_argument('--seed', type=int, help='Run seed (default: 0)')
    common.add_argument(
        '--class-known',
        action='store_true',
        default=None,
        help='Condition both modules on the reaction class',
    )
    common.add_argument('--data', help='Reaction file (default: data/desk_corpus.tsv)')
    common.add_argument('--checkpoint-dir', help='Checkpoint directory (default: checkpoints)')
    common.add_argument('--workers', type=int, help='Worker threads (default: 1)')
    common.add_argument('--output', help='Write line-delimited JSON records to this file')
    common.add_argument('--verbose', action='store_true', help='Log at DEBUG level')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_arguments()
    parser = argparse.ArgumentParser(
        description='Template-free retrosynthesis: reaction centers, synthons and reactant generation'
    )
    commands = parser.add_subparsers(dest='command', required=True)

    commands.add_parser('ingest', parents=[common], help='Parse the reaction file and report statistics')

    for name, what in (('train-center', 'the reaction-center scorer'),
                       ('train-translate', 'the synthon translation model')):
        train = commands.add_parser(name, parents=[common], help=f'Train {what}')
        train.add_argument('--epochs', type=int, help='Epochs to run (default: 100)')
        train.add_argument('--resume', action='store_true', help='Continue from the saved checkpoint')

    pred = commands.add_parser('predict', parents=[common], help='Predict reactants for products')
    pred.add_argument('target', help='Product SMILES, or a file with one product per line')
    pred.add_argument('--k', type=int, default=10, help='Candidates per product (default: 10)')
    pred.add_argument('--class-id', type=int, help='Reaction class 1..10 for class-known models')
    pred.add_argument('--centers-k', type=int, help='Center hypotheses per product (default: 1)')
    pred.add_argument('--samples', type=int, help='Latent samples per synthon (default: 1)')
    pred.add_argument('--beam', type=int, help='Beam width (default: 10)')

    for name in ('eval', 'eval-center', 'eval-translate'):
        ev = commands.add_parser(name, parents=[common], help=f'Top-k accuracy ({name})')
        ev.add_argument('--split', default='test', choices=('train', 'val', 'test'),
                        help='Dataset split (default: test)')
        ev.add_argument('--centers-k', type=int, help='Center hypotheses per product (default: 1)')
        ev.add_argument('--samples', type=int, help='Latent samples per synthon (default: 1)')

    inspect = commands.add_parser('inspect-checkpoint', parents=[common], help='Summarize a checkpoint file')
    inspect.add_argument('path', help='Checkpoint file')
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        'seed': args.seed,
        'class_known': args.class_known,
        'data_path': args.data,
        'checkpoint_dir': args.checkpoint_dir,
        'workers': args.workers,
    }
    for key in ('epochs', 'centers_k', 'samples', 'beam'):
        overrides[key] = getattr(args, key, None)
    return load_config(args.config, overrides)


def _read_products(target: str) -> List[Tuple[str, Optional[int]]]:
    """A product string, or a file of 'SMILES[<TAB>class]' lines; '#' lines are comments."""
    path = Path(target)
    if not path.is_file():
        return [(target, None)]
    products = []
    for line in path.read_text(encoding='utf-8').splitlines():
        if not line.strip() or line.lstrip().startswith('#'):
            continue
        fields = line.split('\t')
        class_id = int(fields[1]) if len(fields) > 1 and fields[1].strip() not in ('', '0') else None
        products.append((fields[0].strip(), class_id))
    return products


def _emit(records: Sequence[dict], output: Optional[str]) -> None:
    if output is not None and not write_records(records, output):
        logger.warning(f"Records were not written to {output}")


def cmd_ingest(args: argparse.Namespace, config: RunConfig) -> int:
    dataset = ingest(config.data_path, config.seed)
    stats = dataset.stats.as_record()
    print(format_ingest_stats(stats))
    write_vocab_artifact(dataset, config)
    _emit([dict(stats, module='ingest')], args.output)
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    dataset = ingest(config.data_path, config.seed)
    if args.command == 'train-center':
        result = run_train_center(dataset, config, resume=args.resume)
    else:
        result = run_train_translate(dataset, config, resume=args.resume)
    if result.history:
        last = result.history[-1]
        print(f"Finished {len(result.history)} epochs, final loss {last['loss']:.4f}")
    _emit(result.history, args.output)
    return 0


def cmd_predict(args: argparse.Namespace, config: RunConfig) -> int:
    models = load_models(config)
    records, failures = [], 0
    for index, (text, class_id) in enumerate(_read_products(args.target)):
        class_id = args.class_id if args.class_id is not None else class_id
        try:
            product: Molecule = parse_smiles(text)
            prediction = predict(product, args.k, class_id, models, config, reaction_index=index)
        except ValueError as e:
            logger.error(f"Cannot predict for {text!r}: {e}")
            failures += 1
            continue
        ranked = [c.as_record(rank) for rank, c in enumerate(prediction.candidates, start=1)]
        print(format_prediction(text, ranked))
        record = {'module': 'predict', 'index': index, 'product': text, 'class_id': class_id,
                  'predictions': ranked}
        if config.samples > 1:
            record['per_sample'] = [None if c is None else c.as_record(1) for c in prediction.per_sample]
        records.append(record)
    _emit(records, args.output)
    return 1 if failures and not records else 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    dataset = ingest(config.data_path, config.seed)
    models = load_models(config)
    if args.command == 'eval':
        evaluation = evaluate_topk(dataset, args.split, config, models)
        title = f"Top-k exact match ({args.split})"
    elif args.command == 'eval-center':
        evaluation = evaluate_center_topk(dataset, args.split, config, models)
        title = f"Reaction center top-k ({args.split})"
    else:
        evaluation = evaluate_translation_topk(dataset, args.split, config, models)
        title = f"Synthon translation top-k, oracle centers ({args.split})"
    print(format_accuracy_table(evaluation.table, title))
    _emit(evaluation.records + metric_records(evaluation, args.command, args.split), args.output)
    return 0


def cmd_inspect(args: argparse.Namespace, config: RunConfig) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {args.path}")
    ckpt = decode_checkpoint(path.read_bytes())
    meta = {
        'module': ckpt.module,
        'config_hash': ckpt.config_hash,
        'model': ckpt.model,
        'atom_vocab': list(ckpt.atom_vocab.elements),
        'tensors': len(ckpt.params),
        'values': int(sum(p.size for p in ckpt.params.values())),
        'new_atoms': None if ckpt.vocab is None else ckpt.vocab.size,
        'adam_step': None if ckpt.adam is None else ckpt.adam.step,
        'best_weights': ckpt.best is not None,
    }
    print(format_checkpoint(meta))
    if ckpt.config_hash != config.config_hash():
        print("Note: config hash differs from the current configuration")
    _emit([dict(meta, extra=ckpt.extra)], args.output)
    return 0


HANDLERS = {
    'ingest': cmd_ingest,
    'train-center': cmd_train,
    'train-translate': cmd_train,
    'predict': cmd_predict,
    'eval': cmd_eval,
    'eval-center': cmd_eval,
    'eval-translate': cmd_eval,
    'inspect-checkpoint': cmd_inspect,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one CLI command.

    Returns:
        Process exit status: 0 on success, 1 on a missing file or invalid input
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    try:
        config = _config(args)
        return HANDLERS[args.command](args, config)
    except FileNotFoundError as e:
        logger.error(f"File not found: {e}")
        return 1
    except ValueError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except DivergenceError as e:
        logger.error(f"Training diverged: {e}")
        return 1


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()

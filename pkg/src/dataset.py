"""Dataset Module for the Retrosynthesis Engine.

Reads the reaction file, skips malformed lines with a diagnostic, assigns a
seeded 80/10/10 split and freezes vocabularies from the training split.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.center import derive_labels, split_synthons, true_centers
from src.edits import EditError, NewAtomVocabulary, diff_edits, initial_state, match_reactants
from src.molgraph import AtomVocabulary, MoleculeError, Reaction, ReactionError
from src.parser import ParseError, parse_reaction_line
from src.translate import TranslationPair

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
TRAIN_FRACTION = 0.8


@dataclass
class IngestStats:
    """Counts reported by ingest."""
    lines: int = 0
    reactions: int = 0
    skipped: int = 0
    reagents_dropped: int = 0
    pairs_skipped: int = 0
    split_counts: Dict[str, int] = field(default_factory=dict)
    center_histogram: Dict[str, int] = field(default_factory=dict)
    class_counts: Dict[str, int] = field(default_factory=dict)

    def as_record(self) -> dict:
        return {
            'lines': self.lines,
            'reactions': self.reactions,
            'skipped': self.skipped,
            'reagents_dropped': self.reagents_dropped,
            'pairs_skipped': self.pairs_skipped,
            'splits': dict(self.split_counts),
            'centers': dict(self.center_histogram),
            'classes': dict(self.class_counts),
        }


@dataclass
class Dataset:
    """Parsed reactions, their labels and split, and the frozen vocabularies."""
    reactions: List[Reaction]
    labels: List[np.ndarray]
    splits: List[str]
    atom_vocab: AtomVocabulary
    vocab: NewAtomVocabulary
    classes: Tuple[int, ...]
    stats: IngestStats
    seed: int = 0

    def indices(self, split: str) -> List[int]:
        if split not in SPLITS:
            raise ValueError(f"Unknown split {split!r}; expected one of {SPLITS}")
        return [i for i, s in enumerate(self.splits) if s == split]

    def split(self, split: str) -> List[Reaction]:
        return [self.reactions[i] for i in self.indices(split)]

    def translation_pairs(self, split: str) -> List[TranslationPair]:
        """Oracle-center synthon/reactant pairs of a split; unusable pairs are skipped."""
        pairs = []
        for i in self.indices(split):
            found = oracle_pairs(self.reactions[i], self.labels[i])
            if found is None:
                continue
            if not all(self._in_vocabulary(p) for p in found):
                logger.warning(f"Skipping reaction {i} of {split}: atoms outside the training vocabularies")
                continue
            pairs.extend(found)
        return pairs

    def _in_vocabulary(self, pair: TranslationPair) -> bool:
        elements = set(self.atom_vocab.elements)
        if any(a.element not in elements for a in pair.target.atoms):
            return False
        try:
            pair.edits.slots(self.vocab)
        except EditError:
            return False
        return True


def oracle_pairs(rxn: Reaction, labels: np.ndarray) -> Optional[List[TranslationPair]]:
    """
    Translation pairs from cutting a product at its true centers.

    Returns:
        One pair per synthon, or None (with a warning) when some synthon
        cannot be grown into its reactant by adding bonds
    """
    synthons = split_synthons(rxn.product, true_centers(labels))
    try:
        owners = match_reactants([[a.map_num for a in s.molecule.atoms] for s in synthons], rxn.reactants)
        pairs = []
        for synthon, owner in zip(synthons, owners):
            source = initial_state(synthon.molecule, synthon.cut_orders)
            target = rxn.reactants[owner]
            pairs.append(TranslationPair(diff_edits(source, target), target, rxn.class_id))
        return pairs
    except (EditError, MoleculeError) as e:
        logger.warning(f"Skipping translation pairs of a reaction: {e}")
        return None


def _split_assignment(count: int, seed: int) -> List[str]:
    order = np.random.default_rng(seed).permutation(count)
    n_train = int(count * TRAIN_FRACTION)
    n_val = (count - n_train) // 2
    assignment = [''] * count
    for rank, index in enumerate(order):
        if rank < n_train:
            assignment[index] = 'train'
        elif rank < n_train + n_val:
            assignment[index] = 'val'
        else:
            assignment[index] = 'test'
    return assignment


def _center_bucket(labels: np.ndarray) -> str:
    count = len(true_centers(labels))
    return str(count) if count < 2 else '2+'


def _vocabularies(
    reactions: Sequence[Reaction], labels: Sequence[np.ndarray]
) -> Tuple[AtomVocabulary, NewAtomVocabulary, int]:
    """Atom and new-atom vocabularies of some reactions, plus the count of unusable ones."""
    atom_vocab = AtomVocabulary.from_molecules(
        mol for rxn in reactions for mol in (rxn.product,) + tuple(rxn.reactants)
    )
    edit_sets, unusable = [], 0
    for rxn, label in zip(reactions, labels):
        pairs = oracle_pairs(rxn, label)
        if pairs is None:
            unusable += 1
            continue
        edit_sets += [p.edits for p in pairs]
    return atom_vocab, NewAtomVocabulary.from_edit_sets(edit_sets), unusable


def _classes(reactions) -> Tuple[int, ...]:
    return tuple(sorted({rxn.class_id for rxn in reactions if rxn.class_id is not None}))


def ingest(path: str, seed: int = 0) -> Dataset:
    """
    Parse a reaction file into a split Dataset.

    Args:
        path: Reaction file (see docs/ingestion.md)
        seed: Split seed

    Returns:
        Dataset with vocabularies built from the training split only

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If no line yields a valid reaction
    """
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Reaction file not found: {path}")

    stats = IngestStats()
    reactions: List[Reaction] = []
    labels: List[np.ndarray] = []
    with source.open(encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            stats.lines += 1
            try:
                rxn = parse_reaction_line(line)
                if rxn is None:
                    continue
                label = derive_labels(rxn)
            except (ParseError, ReactionError, MoleculeError) as e:
                logger.warning(f"{source.name}:{number}: skipped, {e}")
                stats.skipped += 1
                continue
            stats.reagents_dropped += len(rxn.reagents)
            reactions.append(rxn)
            labels.append(label)

    if not reactions:
        raise ValueError(f"No valid reactions in {path}")

    splits = _split_assignment(len(reactions), seed)
    train = [i for i, s in enumerate(splits) if s == 'train']
    atom_vocab, vocab, stats.pairs_skipped = _vocabularies(
        [reactions[i] for i in train], [labels[i] for i in train]
    )

    stats.reactions = len(reactions)
    stats.split_counts = {s: splits.count(s) for s in SPLITS}
    stats.center_histogram = dict(sorted(Counter(_center_bucket(y) for y in labels).items()))
    stats.class_counts = {
        str(k): v for k, v in sorted(Counter(r.class_id or 0 for r in reactions).items())
    }
    classes = _classes(reactions[i] for i in train)

    logger.info(
        f"Ingested {stats.reactions} reactions from {source.name} "
        f"({stats.skipped} skipped, splits {stats.split_counts})"
    )
    return Dataset(
        reactions=reactions,
        labels=labels,
        splits=splits,
        atom_vocab=atom_vocab,
        vocab=vocab,
        classes=classes,
        stats=stats,
        seed=seed,
    )


def subset(dataset: Dataset, indices: Sequence[int], split: str = 'train') -> Dataset:
    """
    A Dataset restricted to the given reactions, all assigned to one split.

    Vocabularies are rebuilt from the chosen reactions.
    """
    chosen = list(indices)
    reactions = [dataset.reactions[i] for i in chosen]
    labels = [dataset.labels[i] for i in chosen]
    atom_vocab, vocab, _ = _vocabularies(reactions, labels)
    return Dataset(
        reactions=reactions,
        labels=labels,
        splits=[split] * len(chosen),
        atom_vocab=atom_vocab,
        vocab=vocab,
        classes=_classes(reactions),
        stats=dataset.stats,
        seed=dataset.seed,
    )

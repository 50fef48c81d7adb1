"""Reaction Center Module for the Retrosynthesis Engine.

Derives label matrices from atom-mapped reactions, scores every atom pair of
a product with an R-GCN and a feedforward scorer, trains that scorer with a
weighted cross-entropy, selects centers and cuts products into synthons.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.canonical import canonical_ranks
from src.config import RunConfig
from src.matcher import CENTER_KS
from src.molgraph import (
    NUM_BOND_TYPES,
    NUM_CLASSES,
    AtomVocabulary,
    Molecule,
    MoleculeError,
    Reaction,
    connected_components,
    remove_bonds,
    valence_used,
)
from src.numcore import (
    AdamState,
    DivergenceError,
    FeedForward,
    Params,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    all_finite,
    carry_best,
    init_uniform,
)
from src.records import timestamp
from src.rgcn import RgcnParams, edge_operators, encode_on_tape

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 20.0
LOG_FLOOR = 1e-12
SHUFFLE_STREAM = 1

Pair = Tuple[int, int]


class ClassConditioningError(ValueError):
    """Raised when a class id and the class-conditioning setting disagree."""


@dataclass(frozen=True)
class CenterParams:
    """
    Shape of the center scorer.

    The scorer input for a pair (i, j) is h_i || h_j || bond one-hot || h_G,
    followed by the class embedding when class_width > 0.
    """
    encoder: RgcnParams
    scorer: FeedForward
    class_width: int = 0

    CLASS_TABLE = 'center.class_embedding'

    @classmethod
    def build(
        cls, atom_width: int, width: int, layers: int, hidden: int, class_width: int = 0
    ) -> 'CenterParams':
        encoder = RgcnParams(name='center.rgcn', in_width=atom_width, width=width, layers=layers)
        pair_width = 3 * width + NUM_BOND_TYPES + class_width
        scorer = FeedForward(name='center.m_r', widths=(pair_width, hidden, 1))
        return cls(encoder=encoder, scorer=scorer, class_width=class_width)

    @classmethod
    def from_config(cls, config: RunConfig, atom_vocab: AtomVocabulary) -> 'CenterParams':
        return cls.build(
            atom_width=atom_vocab.width,
            width=config.width,
            layers=config.layers,
            hidden=config.head_hidden,
            class_width=config.class_width if config.class_known else 0,
        )

    @property
    def class_known(self) -> bool:
        return self.class_width > 0

    def param_names(self) -> List[str]:
        names = self.encoder.param_names() + self.scorer.param_names()
        if self.class_known:
            names.append(self.CLASS_TABLE)
        return names

    def init(self, rng: np.random.Generator) -> Params:
        params: Params = {}
        self.encoder.init(params, rng)
        self.scorer.init(params, rng)
        if self.class_known:
            params[self.CLASS_TABLE] = init_uniform(rng, self.class_width, (NUM_CLASSES, self.class_width))
        return params


@dataclass(frozen=True)
class Synthon:
    """A connected piece of a cut product; cut_orders[k] is the bond order removed at atom k."""
    molecule: Molecule
    parent_index: Tuple[int, ...]
    cut_orders: Tuple[int, ...]

    @property
    def attachment(self) -> Tuple[bool, ...]:
        return tuple(order > 0 for order in self.cut_orders)


def derive_labels(rxn: Reaction) -> np.ndarray:
    """
    Binary label matrix Y over product atoms.

    Y[i, j] = 1 iff the product bonds i and j while their map-aligned reactant
    atoms are not bonded (bond existence only; a type change is not a center).

    Raises:
        ReactionError: If a product atom is unmapped or its map is missing
    """
    rxn.validate()
    owners: Dict[int, Tuple[int, int]] = {}
    for r_idx, reactant in enumerate(rxn.reactants):
        for num, a_idx in reactant.map_index().items():
            owners[num] = (r_idx, a_idx)

    product = rxn.product
    n = product.num_atoms
    labels = np.zeros((n, n), dtype=np.int8)
    for i, j, _ in product.bonds():
        ri, ai = owners[product.atoms[i].map_num]
        rj, aj = owners[product.atoms[j].map_num]
        if ri != rj or not rxn.reactants[ri].is_bonded(ai, aj):
            labels[i, j] = labels[j, i] = 1
    return labels


def true_centers(labels: np.ndarray) -> List[Pair]:
    ii, jj = np.nonzero(np.triu(labels, k=1))
    return [(int(i), int(j)) for i, j in zip(ii, jj)]


@dataclass
class _PairLayout:
    """Per-product arrays reused across epochs."""
    product: Molecule
    pairs: List[Pair]
    first: List[int]
    second: List[int]
    bond_features: np.ndarray
    features: np.ndarray
    operators: List[np.ndarray]


def _pair_layout(product: Molecule, atom_vocab: AtomVocabulary) -> _PairLayout:
    n = product.num_atoms
    ranks = canonical_ranks(product)
    pairs, first, second = [], [], []
    bond_features = np.zeros((n * (n - 1) // 2, NUM_BOND_TYPES))
    for i in range(n):
        for j in range(i + 1, n):
            lo, hi = (i, j) if ranks[i] < ranks[j] else (j, i)
            bond = product.bond_type(i, j)
            if bond is not None:
                bond_features[len(pairs), int(bond)] = 1.0
            pairs.append((i, j))
            first.append(lo)
            second.append(hi)
    return _PairLayout(
        product=product,
        pairs=pairs,
        first=first,
        second=second,
        bond_features=bond_features,
        features=atom_vocab.featurize(product),
        operators=edge_operators(product),
    )


def _check_class(spec: CenterParams, class_id: Optional[int]) -> None:
    if class_id is not None and not spec.class_known:
        raise ClassConditioningError(f"Class id {class_id} given but class conditioning is disabled")
    if class_id is None and spec.class_known:
        raise ClassConditioningError("Class conditioning is enabled but no class id was given")
    if class_id is not None and not 1 <= class_id <= NUM_CLASSES:
        raise ClassConditioningError(f"Class id {class_id} outside 1..{NUM_CLASSES}")


def _scores_on_tape(
    tape: Tape, params: Params, spec: CenterParams, layout: _PairLayout, class_id: Optional[int]
) -> Tensor:
    """Sigmoid scores for layout.pairs as a P x 1 tensor."""
    h = encode_on_tape(tape, params, spec.encoder, layout.features, layout.operators)
    count = len(layout.pairs)
    graph = tape.matmul(tape.constant(np.ones((count, 1))), tape.sum_rows(h))
    parts = [
        tape.gather_rows(h, layout.first),
        tape.gather_rows(h, layout.second),
        tape.constant(layout.bond_features),
        graph,
    ]
    if spec.class_known:
        table = tape.watch(params, spec.CLASS_TABLE)
        parts.append(tape.gather_rows(table, [class_id - 1] * count))
    logits = spec.scorer.forward(tape, params, tape.concat(parts))
    return tape.sigmoid(logits)


def _to_matrix(n: int, pairs: Sequence[Pair], scores: np.ndarray) -> np.ndarray:
    matrix = np.zeros((n, n))
    for (i, j), s in zip(pairs, scores.reshape(-1)):
        matrix[i, j] = matrix[j, i] = s
    return matrix


def score_pairs(
    product: Molecule,
    params: Params,
    spec: CenterParams,
    atom_vocab: AtomVocabulary,
    class_id: Optional[int] = None,
) -> np.ndarray:
    """
    Score every unordered atom pair of a product.

    Args:
        product: Nonempty product molecule
        params: Weights for spec
        spec: Scorer shape
        atom_vocab: Vocabulary behind the node features
        class_id: Reaction class, required iff class conditioning is enabled

    Returns:
        Symmetric n x n matrix; off-diagonal entries in (0, 1), diagonal 0

    Raises:
        ClassConditioningError: If class_id disagrees with the conditioning setting
    """
    _check_class(spec, class_id)
    n = product.num_atoms
    if n < 2:
        return np.zeros((n, n))
    layout = _pair_layout(product, atom_vocab)
    scores = _scores_on_tape(Tape(), params, spec, layout, class_id).value
    return _to_matrix(n, layout.pairs, scores)


def center_loss(scores: np.ndarray, labels: np.ndarray, lam: float = DEFAULT_LAMBDA) -> float:
    """
    Weighted cross-entropy summed once over unordered pairs.

    Raises:
        ShapeError: If the matrices differ in shape
        ValueError: If lam < 1
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"Score matrix {scores.shape} vs label matrix {labels.shape}")
    if lam < 1.0:
        raise ValueError(f"lambda must be >= 1, got {lam}")
    iu = np.triu_indices(scores.shape[0], k=1)
    s = np.clip(scores[iu], LOG_FLOOR, 1.0 - LOG_FLOOR)
    y = labels[iu]
    return float(-np.sum(lam * y * np.log(s) + (1.0 - y) * np.log(1.0 - s)))


def _loss_on_tape(tape: Tape, scores: Tensor, targets: np.ndarray, lam: float) -> Tensor:
    ones = tape.constant(np.ones(scores.shape))
    positive = tape.mul(tape.log(scores, LOG_FLOOR), tape.constant(lam * targets))
    negative = tape.mul(
        tape.log(tape.add(tape.scale(scores, -1.0), ones), LOG_FLOOR),
        tape.constant(1.0 - targets),
    )
    return tape.scale(tape.sum_all(tape.add(positive, negative)), -1.0)


def select_centers(
    scores: np.ndarray, threshold: float, k: int, product: Molecule
) -> List[Pair]:
    """
    Top-k bonded pairs scoring above threshold, best first.

    Ties keep index order. An empty list means no center was found and the
    product is its own synthon.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    eligible = [
        (float(scores[i, j]), i, j)
        for i, j, _ in product.bonds()
        if scores[i, j] > threshold
    ]
    eligible.sort(key=lambda item: (-item[0], item[1], item[2]))
    return [(i, j) for _, i, j in eligible[:k]]


def split_synthons(product: Molecule, centers: Sequence[Pair]) -> List[Synthon]:
    """
    Remove the center bonds and return each connected piece as a synthon.

    Atom records are left untouched; the removed valence is reported per atom
    in Synthon.cut_orders.

    Raises:
        BondError: If a center pair is not bonded
    """
    cut = remove_bonds(product, centers)
    removed = [valence_used(product, i) - valence_used(cut, i) for i in range(product.num_atoms)]
    return [
        Synthon(molecule=component, parent_index=members, cut_orders=tuple(removed[m] for m in members))
        for component, members in connected_components(cut)
    ]


def center_hit(
    scores: np.ndarray, labels: np.ndarray, product: Molecule, k: int, threshold: float
) -> bool:
    """
    True when every labeled center bond is among the top-k selected pairs.

    A reaction without centers is a hit when nothing is selected.
    """
    truth = set(true_centers(labels))
    chosen = select_centers(scores, threshold, k, product)
    if not truth:
        return not chosen
    return truth <= set(chosen)


@dataclass
class CenterTraining:
    """Outcome of train_center: final and best-validation weights plus history."""
    params: Params
    best_params: Params
    adam: AdamState
    best_val_loss: Optional[float] = None
    history: List[dict] = field(default_factory=list)


@dataclass
class _Example:
    layout: _PairLayout
    targets: np.ndarray
    labels: np.ndarray
    class_id: Optional[int]


def _examples(
    reactions: Sequence[Reaction], atom_vocab: AtomVocabulary, spec: CenterParams
) -> List[_Example]:
    examples = []
    for rxn in reactions:
        if rxn.product.num_atoms < 2:
            continue
        labels = derive_labels(rxn)
        try:
            layout = _pair_layout(rxn.product, atom_vocab)
        except MoleculeError as e:
            logger.warning(f"Skipping a reaction outside the atom vocabulary: {e}")
            continue
        targets = np.array([[labels[i, j]] for i, j in layout.pairs], dtype=np.float64)
        class_id = rxn.class_id if spec.class_known else None
        try:
            _check_class(spec, class_id)
        except ClassConditioningError as e:
            logger.warning(f"Skipping a reaction for the class-conditioned scorer: {e}")
            continue
        examples.append(_Example(layout=layout, targets=targets, labels=labels, class_id=class_id))
    return examples


def _example_pass(
    example: _Example, params: Params, spec: CenterParams, lam: float, with_grads: bool
) -> Tuple[float, Optional[Params], np.ndarray]:
    tape = Tape()
    scores = _scores_on_tape(tape, params, spec, example.layout, example.class_id)
    loss = _loss_on_tape(tape, scores, example.targets, lam)
    grads = tape.backward(loss, params) if with_grads else None
    matrix = _to_matrix(example.layout.product.num_atoms, example.layout.pairs, scores.value)
    return loss.item(), grads, matrix


def _accuracy(hits: Dict[int, int], total: int) -> Dict[str, float]:
    return {f"top{k}": (hits[k] / total if total else 0.0) for k in CENTER_KS}


def _evaluate(
    examples: Sequence[_Example], params: Params, spec: CenterParams, lam: float
) -> float:
    if not examples:
        return float('nan')
    return sum(_example_pass(e, params, spec, lam, False)[0] for e in examples) / len(examples)


def train_center(
    reactions: Sequence[Reaction],
    config: RunConfig,
    atom_vocab: AtomVocabulary,
    validation: Sequence[Reaction] = (),
    params: Optional[Params] = None,
    adam: Optional[AdamState] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    start_epoch: int = 0,
    best: Optional[Tuple[Params, Optional[float]]] = None,
) -> CenterTraining:
    """
    Train the center scorer with Adam on mini-batches.

    Args:
        reactions: Training reactions
        config: Hyperparameters (epochs, batch, lr, lam, seed, workers, ...)
        atom_vocab: Node-feature vocabulary
        validation: Optional reactions for per-epoch validation loss
        params: Weights to resume from (freshly initialized when None)
        adam: Optimizer state to resume from
        on_epoch: Called with every history record as it is produced
        start_epoch: Epochs already run; numbering and shuffles continue from it
        best: Best-validation weights and loss carried over from those epochs

    Returns:
        CenterTraining with per-epoch history records

    Raises:
        ValueError: If no usable training reaction is given
        DivergenceError: On a non-finite loss or parameter
    """
    spec = CenterParams.from_config(config, atom_vocab)
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = spec.init(rng)
    if adam is None:
        adam = AdamState.fresh(params, lr=config.lr)

    train = _examples(reactions, atom_vocab, spec)
    if not train:
        raise ValueError("No usable training reactions for the center scorer")
    held_out = _examples(validation, atom_vocab, spec)

    best_params, best_val = carry_best(params, best)
    history: List[dict] = []
    last_epoch = start_epoch + config.epochs

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        for epoch in range(start_epoch + 1, last_epoch + 1):
            order = np.random.default_rng([config.seed, SHUFFLE_STREAM, epoch]).permutation(len(train))
            total_loss = 0.0
            hits = {k: 0 for k in CENTER_KS}
            for start in range(0, len(order), config.batch):
                batch = [train[i] for i in order[start:start + config.batch]]
                results = list(pool.map(
                    lambda e: _example_pass(e, params, spec, config.lam, True), batch
                ))
                batch_loss = 0.0
                grads = {name: np.zeros_like(value) for name, value in params.items()}
                for example, (loss, example_grads, matrix) in zip(batch, results):
                    batch_loss += loss
                    for name, g in example_grads.items():
                        grads[name] += g
                    for k in CENTER_KS:
                        hits[k] += center_hit(
                            matrix, example.labels, example.layout.product, k, config.threshold
                        )
                if not np.isfinite(batch_loss):
                    logger.error(f"Center training diverged at epoch {epoch}, batch {start // config.batch}")
                    raise DivergenceError(
                        f"Non-finite center loss {batch_loss} at epoch {epoch}, batch "
                        f"{start // config.batch}; max |param| = {_max_abs(params):.3g}"
                    )
                grads = {name: g / len(batch) for name, g in grads.items()}
                params, adam = adam_step(adam, params, grads)
                if not all_finite(params):
                    logger.error(f"Center parameters became non-finite at epoch {epoch}")
                    raise DivergenceError(f"Non-finite center parameters at epoch {epoch}")
                total_loss += batch_loss

            record = {
                'module': 'center',
                'epoch': epoch,
                'loss': total_loss / len(train),
                'timestamp': timestamp(),
            }
            record.update(_accuracy(hits, len(train)))
            if held_out:
                val_loss = _evaluate(held_out, params, spec, config.lam)
                record['val_loss'] = val_loss
                if val_loss < best_val:
                    best_val = val_loss
                    best_params = {name: value.copy() for name, value in params.items()}
            else:
                best_params = {name: value.copy() for name, value in params.items()}
            history.append(record)
            logger.info(
                f"Center epoch {epoch}/{last_epoch}: loss={record['loss']:.4f} "
                f"top1={record['top1']:.3f}"
                + (f" val_loss={record['val_loss']:.4f}" if 'val_loss' in record else '')
            )
            if on_epoch is not None:
                on_epoch(record)

    return CenterTraining(
        params=params, best_params=best_params, adam=adam,
        best_val_loss=None if math.isinf(best_val) else best_val, history=history,
    )


def _max_abs(params: Params) -> float:
    return max((float(np.nanmax(np.abs(p))) for p in params.values() if p.size), default=0.0)

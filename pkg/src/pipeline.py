"""Pipeline Module for the Retrosynthesis Engine.

Glues the two learned modules together: loads checkpoints, predicts ranked
reactant sets for a product, evaluates top-k exact match on a dataset split
and runs the training loops with checkpointing and history records.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.beam import Decoded, beam_generate
from src.canonical import reactant_set, write_canonical
from src.center import (
    CenterParams,
    CenterTraining,
    Pair,
    center_hit,
    score_pairs,
    select_centers,
    split_synthons,
    train_center,
)
from src.checkpoint import Checkpoint, CheckpointError, check_params, checkpoint_load, checkpoint_save
from src.config import MODEL_KEYS, RunConfig
from src.dataset import Dataset, oracle_pairs
from src.edits import DecodeState, EditError, initial_state
from src.matcher import CENTER_KS, DEFAULT_KS, AccuracyTable, ReactantSet, first_hit_rank
from src.molgraph import AtomVocabulary, Molecule, Reaction
from src.numcore import Params
from src.records import timestamp, write_records
from src.translate import TranslateParams, TranslateTraining, train_translate

logger = logging.getLogger(__name__)

CENTER_CHECKPOINT = 'center.ckpt'
TRANSLATE_CHECKPOINT = 'translate.ckpt'
VOCAB_ARTIFACT = 'vocab.json'


def history_path(config: RunConfig, module: str) -> Path:
    return Path(config.checkpoint_dir) / f'{module}_history.jsonl'


@dataclass
class Models:
    """Trained weights of both modules with their shapes."""
    center_spec: CenterParams
    center_params: Params
    center_vocab: AtomVocabulary
    translate_spec: TranslateParams
    translate_params: Params


@dataclass(frozen=True)
class CenterHypothesis:
    """A set of center bonds to cut and its log-score."""
    centers: Tuple[Pair, ...]
    log_score: float


@dataclass(frozen=True)
class Candidate:
    """One ranked reactant set."""
    reactants: ReactantSet
    score: float
    centers: Tuple[Pair, ...] = ()

    def as_record(self, rank: int) -> dict:
        return {
            'rank': rank,
            'reactants': list(self.reactants),
            'score': round(self.score, 6),
            'centers': [list(pair) for pair in self.centers],
        }


@dataclass
class Prediction:
    """Merged ranking plus the top candidate obtained with each latent sample."""
    candidates: List[Candidate]
    per_sample: List[Optional[Candidate]] = field(default_factory=list)
    hypotheses: List[CenterHypothesis] = field(default_factory=list)


@dataclass
class Evaluation:
    """An accuracy table and one record per evaluated reaction."""
    table: AccuracyTable
    records: List[dict]


def _expected_shapes(spec) -> Dict[str, Tuple[int, ...]]:
    return {name: value.shape for name, value in spec.init(np.random.default_rng(0)).items()}


def _model_config(config: RunConfig, ckpt: Checkpoint) -> RunConfig:
    model = {key: ckpt.model[key] for key in MODEL_KEYS if key in ckpt.model}
    if model.get('class_known', config.class_known) != config.class_known:
        logger.warning(
            f"{ckpt.module} checkpoint was trained with class_known={model['class_known']}; using that setting"
        )
    return config.with_overrides(**model)


def load_models(config: RunConfig) -> Models:
    """
    Load both checkpoints from config.checkpoint_dir.

    Model shapes come from each checkpoint's metadata, so a run may pass a
    different config as long as the checkpoints are consistent.

    Raises:
        FileNotFoundError: If a checkpoint is missing
        CheckpointError: On corruption or a shape mismatch
    """
    directory = Path(config.checkpoint_dir)
    center = checkpoint_load(str(directory / CENTER_CHECKPOINT), config.config_hash())
    if center.module != 'center':
        raise CheckpointError(f"{CENTER_CHECKPOINT} holds a {center.module!r} checkpoint")
    center_spec = CenterParams.from_config(_model_config(config, center), center.atom_vocab)
    check_params(center.weights, _expected_shapes(center_spec))

    translate = checkpoint_load(str(directory / TRANSLATE_CHECKPOINT), config.config_hash())
    if translate.module != 'translate':
        raise CheckpointError(f"{TRANSLATE_CHECKPOINT} holds a {translate.module!r} checkpoint")
    if translate.vocab is None:
        raise CheckpointError("Translation checkpoint has no new-atom vocabulary")
    translate_spec = TranslateParams.from_config(
        _model_config(config, translate), translate.atom_vocab, translate.vocab
    )
    check_params(translate.weights, _expected_shapes(translate_spec))
    return Models(center_spec, center.weights, center.atom_vocab, translate_spec, translate.weights)


def center_hypotheses(
    scores: np.ndarray, product: Molecule, threshold: float, centers_k: int
) -> List[CenterHypothesis]:
    """
    Center hypotheses for a scored product.

    Each selected pair is one hypothesis scored log s. With nothing above the
    threshold the whole product is the synthon, scored log(1 - max bonded s).
    """
    chosen = select_centers(scores, threshold, centers_k, product)
    if chosen:
        return [CenterHypothesis((pair,), math.log(max(scores[pair], 1e-12))) for pair in chosen]
    bonded = [scores[i, j] for i, j, _ in product.bonds()]
    log_score = math.log(max(1.0 - max(bonded), 1e-12)) if bonded else 0.0
    return [CenterHypothesis((), log_score)]


def _latent(config: RunConfig, latent: int, *key: int) -> np.ndarray:
    return np.random.default_rng([config.seed, *key]).standard_normal(latent)


def _merge_beams(beams: Sequence[Sequence[Decoded]], k: int) -> List[Decoded]:
    best: Dict[str, Decoded] = {}
    for beam in beams:
        for decoded in beam:
            if decoded.canonical not in best or decoded.log_likelihood > best[decoded.canonical].log_likelihood:
                best[decoded.canonical] = decoded
    return sorted(best.values(), key=lambda d: (-d.log_likelihood, d.canonical))[:k]


def combine_synthon_beams(
    beams: Sequence[Sequence[Decoded]], base_score: float, k: int, centers: Tuple[Pair, ...] = ()
) -> List[Candidate]:
    """
    Best k reactant sets from the cross product of per-synthon beams.

    A combination scores base_score plus the sum of its log-likelihoods.
    Partial combinations are deduplicated and cut to k after each synthon;
    since scores add, the kept prefixes contain the overall top k.
    """
    partial: List[Tuple[float, Tuple[Molecule, ...]]] = [(base_score, ())]
    for beam in beams:
        extended: Dict[ReactantSet, Tuple[float, Tuple[Molecule, ...]]] = {}
        for score, molecules in partial:
            for decoded in beam:
                combo = molecules + (decoded.molecule,)
                key = reactant_set(combo)
                total = score + decoded.log_likelihood
                if key not in extended or total > extended[key][0]:
                    extended[key] = (total, combo)
        ranked = sorted(extended.items(), key=lambda item: (-item[1][0], item[0]))
        partial = [value for _, value in ranked[:k]]
    if not beams:
        return []
    return [Candidate(reactant_set(molecules), score, centers) for score, molecules in partial]


def _rank(candidates: Sequence[Candidate], k: int) -> List[Candidate]:
    best: Dict[ReactantSet, Candidate] = {}
    for candidate in candidates:
        if candidate.reactants not in best or candidate.score > best[candidate.reactants].score:
            best[candidate.reactants] = candidate
    return sorted(best.values(), key=lambda c: (-c.score, c.reactants))[:k]


def decode_synthons(
    states: Sequence[DecodeState],
    models: Models,
    config: RunConfig,
    class_id: Optional[int],
    key: Tuple[int, ...],
    k: int,
) -> Tuple[List[List[Decoded]], List[List[List[Decoded]]]]:
    """
    Beam-decode every synthon once per latent sample.

    Returns:
        (merged beams per synthon, beams per sample per synthon)
    """
    spec = models.translate_spec
    merged, per_sample = [], [[] for _ in range(config.samples)]
    for index, state in enumerate(states):
        beams = []
        for sample in range(config.samples):
            z = _latent(config, spec.latent, *key, index, sample)
            beam = beam_generate(state, models.translate_params, spec, k, config.max_steps, z, class_id)
            beams.append(beam)
            per_sample[sample].append(beam)
        merged.append(_merge_beams(beams, k))
    return merged, per_sample


def _conditioning(spec, class_id: Optional[int]) -> Optional[int]:
    return class_id if spec.class_known else None


def score_center_pairs(product: Molecule, models: Models, class_id: Optional[int]) -> np.ndarray:
    return score_pairs(
        product, models.center_params, models.center_spec, models.center_vocab,
        _conditioning(models.center_spec, class_id),
    )


def predict(
    product: Molecule,
    k: int,
    class_id: Optional[int],
    models: Models,
    config: RunConfig,
    reaction_index: int = 0,
) -> Prediction:
    """
    Ranked reactant sets for a product.

    Args:
        product: Product molecule (atom maps are ignored)
        k: Number of candidates to return
        class_id: Reaction class, used only by class-conditioned models
        models: Loaded checkpoints
        config: Beam width, step limit, threshold, centers_k, samples and seed
        reaction_index: Seeds the latent draws together with config.seed

    Returns:
        Prediction with at most k candidates, best first

    Raises:
        ClassConditioningError: If the models need a class id and none is given
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    product = product.strip_maps()
    scores = score_center_pairs(product, models, class_id)
    hypotheses = center_hypotheses(scores, product, config.threshold, config.centers_k)
    width = max(k, config.beam)
    translate_class = _conditioning(models.translate_spec, class_id)

    candidates: List[Candidate] = []
    per_sample: List[List[Candidate]] = [[] for _ in range(config.samples)]
    for number, hypothesis in enumerate(hypotheses):
        synthons = split_synthons(product, hypothesis.centers)
        try:
            states = [initial_state(s.molecule, s.cut_orders) for s in synthons]
        except EditError as e:
            logger.debug(f"Skipping center hypothesis {hypothesis.centers}: {e}")
            continue
        merged, sampled = decode_synthons(
            states, models, config, translate_class, (reaction_index, number), width
        )
        candidates += combine_synthon_beams(merged, hypothesis.log_score, width, hypothesis.centers)
        for sample, beams in enumerate(sampled):
            per_sample[sample] += combine_synthon_beams(beams, hypothesis.log_score, 1, hypothesis.centers)

    return Prediction(
        candidates=_rank(candidates, k),
        per_sample=[(_rank(found, 1) or [None])[0] for found in per_sample],
        hypotheses=hypotheses,
    )


def _class_for(rxn: Reaction, spec) -> Optional[int]:
    return rxn.class_id if spec.class_known else None


def _run_parallel(jobs: Sequence, work: Callable, workers: int, what: str) -> List:
    """Ordered map over jobs; a failing job yields None and a warning."""
    def guarded(job):
        try:
            return work(job)
        except (ValueError, ArithmeticError) as e:
            logger.warning(f"{what} failed for reaction {job}: {e}")
            return None

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, jobs))


def _product_key(rxn: Reaction) -> str:
    return write_canonical(rxn.product.strip_maps())


def evaluate_topk(
    dataset: Dataset,
    split: str,
    config: RunConfig,
    models: Optional[Models] = None,
    ks: Sequence[int] = DEFAULT_KS,
    predictor: Optional[Callable[[int, Reaction, int], Prediction]] = None,
) -> Evaluation:
    """
    End-to-end top-k exact match on one split.

    Args:
        dataset: Ingested dataset
        split: 'train', 'val' or 'test'
        config: Decoding settings
        models: Loaded checkpoints (unused when predictor is given)
        ks: Cutoffs to report
        predictor: Called as predictor(index, reaction, k); defaults to predict

    Returns:
        Evaluation with per-class rows and one record per reaction

    Note:
        A reaction whose prediction fails is logged and counted as a miss.
    """
    if predictor is None:
        if models is None:
            raise ValueError("evaluate_topk needs models or a predictor")

        def predictor(index: int, rxn: Reaction, k: int) -> Prediction:
            return predict(rxn.product, k, rxn.class_id, models, config, reaction_index=index)

    table = AccuracyTable(ks=tuple(ks))
    top = max(table.ks)
    indices = dataset.indices(split)
    results = _run_parallel(
        indices, lambda i: predictor(i, dataset.reactions[i], top), config.workers, "Prediction"
    )

    records = []
    for index, prediction in zip(indices, results):
        rxn = dataset.reactions[index]
        truth = reactant_set(rxn.reactants)
        candidates = prediction.candidates[:top] if prediction is not None else []
        rank = first_hit_rank([c.reactants for c in candidates], truth)
        table.add_rank(rank, rxn.class_id)
        records.append({
            'module': 'eval',
            'split': split,
            'reaction': index,
            'class_id': rxn.class_id,
            'product': _product_key(rxn),
            'truth': list(truth),
            'rank': rank,
            'predictions': [c.as_record(r) for r, c in enumerate(candidates, start=1)],
        })
    logger.info(f"Top-k on {split}: " + ', '.join(f"top{k}={table.accuracy(k):.3f}" for k in table.ks))
    return Evaluation(table, records)


def evaluate_center_topk(
    dataset: Dataset,
    split: str,
    config: RunConfig,
    models: Optional[Models] = None,
    ks: Sequence[int] = CENTER_KS,
    scorer: Optional[Callable[[Reaction], np.ndarray]] = None,
) -> Evaluation:
    """
    Center top-k accuracy on one split: a hit needs every true center bond
    among the top-k pairs above the threshold.
    """
    if scorer is None:
        if models is None:
            raise ValueError("evaluate_center_topk needs models or a scorer")

        def scorer(rxn: Reaction) -> np.ndarray:
            return score_center_pairs(rxn.product, models, rxn.class_id)

    table = AccuracyTable(ks=tuple(ks))
    indices = dataset.indices(split)
    results = _run_parallel(indices, lambda i: scorer(dataset.reactions[i]), config.workers, "Center scoring")

    records = []
    for index, scores in zip(indices, results):
        rxn, labels = dataset.reactions[index], dataset.labels[index]
        if scores is None:
            hits = {k: False for k in table.ks}
            chosen = []
        else:
            hits = {k: center_hit(scores, labels, rxn.product, k, config.threshold) for k in table.ks}
            chosen = select_centers(scores, config.threshold, max(table.ks), rxn.product)
        table.add_hits(hits, rxn.class_id)
        records.append({
            'module': 'eval-center',
            'split': split,
            'reaction': index,
            'class_id': rxn.class_id,
            'product': _product_key(rxn),
            'truth': [[int(i), int(j)] for i, j in zip(*np.nonzero(np.triu(labels, k=1)))],
            'selected': [list(pair) for pair in chosen],
            'hits': {str(k): bool(v) for k, v in hits.items()},
        })
    logger.info(f"Center top-k on {split}: " + ', '.join(f"top{k}={table.accuracy(k):.3f}" for k in table.ks))
    return Evaluation(table, records)


def _translate_oracle(index: int, dataset: Dataset, models: Models, config: RunConfig, k: int) -> List[Candidate]:
    rxn = dataset.reactions[index]
    pairs = oracle_pairs(rxn, dataset.labels[index])
    if pairs is None:
        raise EditError("oracle synthons cannot be grown into the reactants")
    states = [pair.edits.source for pair in pairs]
    merged, _ = decode_synthons(
        states, models, config, _class_for(rxn, models.translate_spec), (index, 0), max(k, config.beam)
    )
    return _rank(combine_synthon_beams(merged, 0.0, max(k, config.beam)), k)


def evaluate_translation_topk(
    dataset: Dataset,
    split: str,
    config: RunConfig,
    models: Models,
    ks: Sequence[int] = DEFAULT_KS,
) -> Evaluation:
    """Top-k exact match when decoding starts from synthons cut at the true centers."""
    table = AccuracyTable(ks=tuple(ks))
    top = max(table.ks)
    indices = dataset.indices(split)
    results = _run_parallel(
        indices, lambda i: _translate_oracle(i, dataset, models, config, top), config.workers, "Translation"
    )

    records = []
    for index, candidates in zip(indices, results):
        rxn = dataset.reactions[index]
        truth = reactant_set(rxn.reactants)
        candidates = candidates or []
        rank = first_hit_rank([c.reactants for c in candidates], truth)
        table.add_rank(rank, rxn.class_id)
        records.append({
            'module': 'eval-translate',
            'split': split,
            'reaction': index,
            'class_id': rxn.class_id,
            'product': _product_key(rxn),
            'truth': list(truth),
            'rank': rank,
            'predictions': [c.as_record(r) for r, c in enumerate(candidates, start=1)],
        })
    logger.info(f"Translation top-k on {split}: " + ', '.join(f"top{k}={table.accuracy(k):.3f}" for k in table.ks))
    return Evaluation(table, records)


def metric_records(evaluation: Evaluation, name: str, split: str) -> List[dict]:
    """One record per accuracy-table row."""
    return [dict(row, metric=name, split=split) for row in evaluation.table.rows()]


def write_vocab_artifact(dataset: Dataset, config: RunConfig) -> bool:
    """Record the frozen vocabularies and split sizes next to the checkpoints."""
    record = {
        'atom_vocab': list(dataset.atom_vocab.elements),
        'new_atom_vocab': [list(entry) for entry in dataset.vocab.entries],
        'classes': list(dataset.classes),
        'seed': dataset.seed,
        'stats': dataset.stats.as_record(),
    }
    return write_records([record], str(Path(config.checkpoint_dir) / VOCAB_ARTIFACT))


def _model_record(config: RunConfig) -> Dict[str, object]:
    return {key: getattr(config, key) for key in MODEL_KEYS}


def _training_extra(result, done: int, config: RunConfig) -> Dict[str, object]:
    return {
        'epochs': done + config.epochs,
        'seed': config.seed,
        'best_val_loss': result.best_val_loss,
        'saved': timestamp(),
    }


def _history_writer(config: RunConfig, module: str, resume: bool) -> Callable[[dict], None]:
    path = str(history_path(config, module))
    if not resume:
        write_records([], path)

    def on_epoch(record: dict) -> None:
        write_records([record], path, append=True)

    return on_epoch


def run_train_center(dataset: Dataset, config: RunConfig, resume: bool = False) -> CenterTraining:
    """
    Train the center scorer on the train split and checkpoint it.

    The checkpoint keeps the final weights with their optimizer state, for
    resuming, and the best-validation weights, for decoding. With resume,
    training continues from the final weights at the saved epoch count.

    Raises:
        FileNotFoundError: If resume is set and no checkpoint exists
        CheckpointError: If the checkpoint does not fit the dataset
    """
    path = Path(config.checkpoint_dir) / CENTER_CHECKPOINT
    params = adam = best = None
    done = 0
    if resume:
        ckpt = checkpoint_load(str(path), config.config_hash(), atom_vocab=dataset.atom_vocab)
        check_params(ckpt.params, _expected_shapes(CenterParams.from_config(config, dataset.atom_vocab)))
        params, adam, done = ckpt.params, ckpt.adam, int(ckpt.extra.get('epochs', 0))
        best = (ckpt.weights, ckpt.extra.get('best_val_loss'))
        logger.info(f"Resuming center training after {done} epochs")

    result = train_center(
        dataset.split('train'),
        config,
        dataset.atom_vocab,
        validation=dataset.split('val'),
        params=params,
        adam=adam,
        on_epoch=_history_writer(config, 'center', resume),
        start_epoch=done,
        best=best,
    )
    checkpoint_save(str(path), Checkpoint(
        module='center',
        params=result.params,
        atom_vocab=dataset.atom_vocab,
        config_hash=config.config_hash(),
        model=_model_record(config),
        adam=result.adam,
        extra=_training_extra(result, done, config),
        best=result.best_params,
    ))
    return result


def run_train_translate(dataset: Dataset, config: RunConfig, resume: bool = False) -> TranslateTraining:
    """
    Train the translation model on oracle synthons of the train split and
    checkpoint it the same way as run_train_center.

    Raises:
        FileNotFoundError: If resume is set and no checkpoint exists
        CheckpointError: If the checkpoint does not fit the dataset
    """
    path = Path(config.checkpoint_dir) / TRANSLATE_CHECKPOINT
    params = adam = best = None
    done = 0
    if resume:
        ckpt = checkpoint_load(
            str(path), config.config_hash(), atom_vocab=dataset.atom_vocab, vocab=dataset.vocab
        )
        spec = TranslateParams.from_config(config, dataset.atom_vocab, dataset.vocab)
        check_params(ckpt.params, _expected_shapes(spec))
        params, adam, done = ckpt.params, ckpt.adam, int(ckpt.extra.get('epochs', 0))
        best = (ckpt.weights, ckpt.extra.get('best_val_loss'))
        logger.info(f"Resuming translation training after {done} epochs")

    result = train_translate(
        dataset.translation_pairs('train'),
        config,
        dataset.atom_vocab,
        dataset.vocab,
        validation=dataset.translation_pairs('val'),
        params=params,
        adam=adam,
        on_epoch=_history_writer(config, 'translate', resume),
        start_epoch=done,
        best=best,
    )
    checkpoint_save(str(path), Checkpoint(
        module='translate',
        params=result.params,
        atom_vocab=dataset.atom_vocab,
        config_hash=config.config_hash(),
        model=_model_record(config),
        vocab=dataset.vocab,
        adam=result.adam,
        extra=_training_extra(result, done, config),
        best=result.best_params,
    ))
    return result

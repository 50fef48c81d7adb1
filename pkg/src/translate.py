"""Synthon Translation Module for the Retrosynthesis Engine.

A latent-conditioned policy grows a synthon into a reactant one bond at a
time. Four heads score the stop flag, the first node, the second node
(an existing atom or a vocabulary slot) and the bond type. Training
maximizes an evidence lower bound with a Gaussian posterior over the latent
code and a standard-normal prior.
"""

import functools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.center import ClassConditioningError
from src.config import RunConfig
from src.edits import (
    Action,
    DecodeState,
    EditSet,
    NewAtomVocabulary,
    TraceSample,
    apply_action,
    enumerate_all_traces,
    enumerate_bfs_traces,
    sample_trace,
)
from src.molgraph import NUM_BOND_TYPES, NUM_CLASSES, AtomVocabulary, Molecule
from src.numcore import (
    AdamState,
    DivergenceError,
    FeedForward,
    Params,
    Tape,
    Tensor,
    adam_step,
    all_finite,
    carry_best,
    init_uniform,
    log_softmax,
)
from src.records import timestamp
from src.rgcn import RgcnParams, edge_operators, encode_on_tape

logger = logging.getLogger(__name__)

CONTINUE, STOP_FLAG = 0, 1
MAX_EXACT_EDITS = 6
MAX_ENUMERATED_TRACES = 100_000
LOGVAR_BOUND = 10.0
SHUFFLE_STREAM = 2


class TraceTooLargeError(ValueError):
    """Raised when exact trace enumeration is requested for too many edits."""


@dataclass(frozen=True)
class TranslateParams:
    """Shapes and vocabularies of the translation model; weights live in a Params dict."""
    encoder: RgcnParams
    stop_head: FeedForward
    first_head: FeedForward
    second_head: FeedForward
    bond_head: FeedForward
    mu_head: FeedForward
    logvar_head: FeedForward
    atom_vocab: AtomVocabulary
    vocab: NewAtomVocabulary
    latent: int
    class_width: int = 0

    CLASS_TABLE = 'translate.class_embedding'

    @classmethod
    def build(
        cls,
        atom_vocab: AtomVocabulary,
        vocab: NewAtomVocabulary,
        width: int,
        layers: int,
        latent: int,
        hidden: int,
        class_width: int = 0,
    ) -> 'TranslateParams':
        context = width + latent + class_width
        return cls(
            encoder=RgcnParams(name='translate.rgcn', in_width=atom_vocab.width + 1, width=width, layers=layers),
            stop_head=FeedForward('translate.m_t', (context, hidden, 2)),
            first_head=FeedForward('translate.m_f', (width + context, hidden, 1)),
            second_head=FeedForward('translate.m_s', (2 * width + context, hidden, 1)),
            bond_head=FeedForward('translate.m_e', (2 * width + context, hidden, NUM_BOND_TYPES)),
            mu_head=FeedForward('translate.m_mu', (2 * width, hidden, latent)),
            logvar_head=FeedForward('translate.m_sigma', (2 * width, hidden, latent)),
            atom_vocab=atom_vocab,
            vocab=vocab,
            latent=latent,
            class_width=class_width,
        )

    @classmethod
    def from_config(
        cls, config: RunConfig, atom_vocab: AtomVocabulary, vocab: NewAtomVocabulary
    ) -> 'TranslateParams':
        return cls.build(
            atom_vocab=atom_vocab,
            vocab=vocab,
            width=config.width,
            layers=config.layers,
            latent=config.latent,
            hidden=config.head_hidden,
            class_width=config.class_width if config.class_known else 0,
        )

    @property
    def class_known(self) -> bool:
        return self.class_width > 0

    @property
    def heads(self) -> Tuple[FeedForward, ...]:
        return (self.stop_head, self.first_head, self.second_head, self.bond_head,
                self.mu_head, self.logvar_head)

    def param_names(self) -> List[str]:
        names = self.encoder.param_names()
        for head in self.heads:
            names += head.param_names()
        if self.class_known:
            names.append(self.CLASS_TABLE)
        return names

    def init(self, rng: np.random.Generator) -> Params:
        params: Params = {}
        self.encoder.init(params, rng)
        for head in self.heads:
            head.init(params, rng)
        if self.class_known:
            params[self.CLASS_TABLE] = init_uniform(rng, self.class_width, (NUM_CLASSES, self.class_width))
        return params


@dataclass(frozen=True)
class TranslationPair:
    """Supervision for one synthon: its edits toward the target reactant."""
    edits: EditSet
    target: Molecule
    class_id: Optional[int] = None


# Encoding

@functools.lru_cache(maxsize=16)
def _vocab_features(spec: TranslateParams) -> np.ndarray:
    width = spec.atom_vocab.width + 1
    if not spec.vocab.size:
        return np.zeros((0, width))
    rows = [np.append(spec.atom_vocab.encode_atom(spec.vocab.atom(s)), 0.0) for s in range(spec.vocab.size)]
    return np.stack(rows)


def _state_features(spec: TranslateParams, state: DecodeState) -> np.ndarray:
    flags = np.asarray(state.attachment, dtype=np.float64).reshape(-1, 1)
    return np.hstack([spec.atom_vocab.featurize(state.molecule), flags])


def _encode_state(
    tape: Tape, params: Params, spec: TranslateParams, state: DecodeState, with_vocab: bool
) -> Tensor:
    """Node embeddings; with_vocab appends one isolated node per vocabulary slot."""
    features = _state_features(spec, state)
    operators = edge_operators(state.molecule)
    if with_vocab and spec.vocab.size:
        m, n = spec.vocab.size, state.num_atoms
        features = np.vstack([features, _vocab_features(spec)])
        padded = []
        for op in operators:
            block = np.eye(n + m)
            block[:n, :n] = op
            padded.append(block)
        operators = padded
    return encode_on_tape(tape, params, spec.encoder, features, operators)


def _broadcast(tape: Tape, row: Tensor, count: int) -> Tensor:
    return tape.matmul(tape.constant(np.ones((count, 1))), row)


def _context(
    tape: Tape, params: Params, spec: TranslateParams, nodes: Tensor, n: int,
    z: Tensor, class_id: Optional[int],
) -> Tensor:
    """h_S || z (|| class embedding) as one row."""
    parts = [tape.sum_rows(tape.gather_rows(nodes, range(n))), z]
    if spec.class_known:
        parts.append(tape.gather_rows(tape.watch(params, spec.CLASS_TABLE), [class_id - 1]))
    return tape.concat(parts)


def _check_class(spec: TranslateParams, class_id: Optional[int]) -> None:
    if (class_id is not None) != spec.class_known:
        raise ClassConditioningError(
            f"Class id {class_id} does not fit class conditioning={spec.class_known}"
        )
    if class_id is not None and not 1 <= class_id <= NUM_CLASSES:
        raise ClassConditioningError(f"Class id {class_id} outside 1..{NUM_CLASSES}")


@dataclass
class _StepHeads:
    """Head outputs for one state on one tape."""
    tape: Tape
    params: Params
    spec: TranslateParams
    nodes: Tensor
    context: Tensor
    n: int

    @property
    def extended(self) -> int:
        return self.n + self.spec.vocab.size

    def stop_logits(self) -> Tensor:
        return self.spec.stop_head.forward(self.tape, self.params, self.context)

    def first_logits(self) -> Tensor:
        tape = self.tape
        rows = tape.concat([tape.gather_rows(self.nodes, range(self.n)), _broadcast(tape, self.context, self.n)])
        return tape.transpose(self.spec.first_head.forward(tape, self.params, rows))

    def second_logits(self, first: int) -> Tensor:
        tape, count = self.tape, self.extended
        rows = tape.concat([
            self.nodes,
            _broadcast(tape, tape.gather_rows(self.nodes, [first]), count),
            _broadcast(tape, self.context, count),
        ])
        return tape.transpose(self.spec.second_head.forward(tape, self.params, rows))

    def bond_logits(self, first: int, second: int) -> Tensor:
        tape = self.tape
        row = tape.concat([
            tape.gather_rows(self.nodes, [first]),
            tape.gather_rows(self.nodes, [second]),
            self.context,
        ])
        return self.spec.bond_head.forward(tape, self.params, row)

    def second_mask(self, first: int) -> np.ndarray:
        mask = np.ones(self.extended, dtype=bool)
        mask[first] = False
        return mask


def _heads(
    tape: Tape, params: Params, spec: TranslateParams, state: DecodeState,
    z: Tensor, class_id: Optional[int],
) -> _StepHeads:
    nodes = _encode_state(tape, params, spec, state, with_vocab=True)
    context = _context(tape, params, spec, nodes, state.num_atoms, z, class_id)
    return _StepHeads(tape, params, spec, nodes, context, state.num_atoms)


# Step distributions

@dataclass
class StepDistributions:
    """
    Probabilities for one state.

    first has n + m entries (zero past n); second[a2] and bond[a2, a3] are the
    conditionals given the earlier choices.
    """
    stop: np.ndarray
    first: np.ndarray
    second: np.ndarray
    bond: np.ndarray


@dataclass
class StepLogTable:
    """Log-probabilities of every action from one state, batched over (a2, a3)."""
    stop: np.ndarray
    first: np.ndarray
    second: np.ndarray
    bond: np.ndarray

    def action_logprob(self, action: Action) -> float:
        if action.stop:
            return float(self.stop[STOP_FLAG])
        return float(
            self.stop[CONTINUE]
            + self.first[action.first]
            + self.second[action.first, action.second]
            + self.bond[action.first, action.second, action.bond]
        )


def step_log_table(
    state: DecodeState,
    z: np.ndarray,
    params: Params,
    spec: TranslateParams,
    class_id: Optional[int] = None,
) -> StepLogTable:
    """
    Every head evaluated for every (a2, a3) choice from one state.

    Raises:
        ClassConditioningError: If class_id disagrees with the conditioning setting
    """
    _check_class(spec, class_id)
    tape = Tape()
    heads = _heads(tape, params, spec, state, tape.constant(np.asarray(z).reshape(1, -1)), class_id)
    n, ext = heads.n, heads.extended

    stop = log_softmax(heads.stop_logits().value)
    first = np.full(ext, -np.inf)
    first[:n] = log_softmax(heads.first_logits().value)

    a2 = np.repeat(np.arange(n), ext)
    a3 = np.tile(np.arange(ext), n)
    context = _broadcast(tape, heads.context, n * ext)
    pair_rows = tape.concat([tape.gather_rows(heads.nodes, a3), tape.gather_rows(heads.nodes, a2), context])
    second_logits = spec.second_head.forward(tape, params, pair_rows).value.reshape(n, ext)
    bond_rows = tape.concat([tape.gather_rows(heads.nodes, a2), tape.gather_rows(heads.nodes, a3), context])
    bond_logits = spec.bond_head.forward(tape, params, bond_rows).value.reshape(n, ext, NUM_BOND_TYPES)

    second = np.full((n, ext), -np.inf)
    for i in range(n):
        mask = heads.second_mask(i)
        if mask.any():
            second[i] = log_softmax(second_logits[i], mask)
    shifted = bond_logits - bond_logits.max(axis=2, keepdims=True)
    bond = shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True))
    return StepLogTable(stop=stop, first=first, second=second, bond=bond)


def step_distributions(
    state: DecodeState,
    z: np.ndarray,
    params: Params,
    spec: TranslateParams,
    class_id: Optional[int] = None,
) -> StepDistributions:
    """Masked, normalized distributions of the four action parts at one state."""
    table = step_log_table(state, z, params, spec, class_id)
    return StepDistributions(
        stop=np.exp(table.stop),
        first=np.exp(table.first),
        second=np.exp(table.second),
        bond=np.exp(table.bond),
    )


# Trace likelihood

def action_problem(state: DecodeState, action: Action, vocab: NewAtomVocabulary) -> Optional[str]:
    """Why an action cannot be taken from a state, or None when it can."""
    if action.stop:
        return None
    n = state.num_atoms
    if action.first >= n:
        return f"first node {action.first} is not one of {n} atoms"
    if action.second >= n + vocab.size:
        return f"second node {action.second} beyond {n} atoms + {vocab.size} slots"
    if action.second == action.first:
        return "second node repeats the first"
    if action.second < n and state.molecule.is_bonded(action.first, action.second):
        return f"atoms {action.first} and {action.second} are already bonded"
    return None


def _trace_nll_on_tape(
    tape: Tape, params: Params, spec: TranslateParams, trace: TraceSample,
    z: Tensor, class_id: Optional[int],
) -> Tensor:
    _check_class(spec, class_id)
    total = None
    for state, action in zip(trace.states(spec.vocab), trace.actions):
        heads = _heads(tape, params, spec, state, z, class_id)
        terms = [tape.softmax_cross_entropy(heads.stop_logits(), STOP_FLAG if action.stop else CONTINUE)]
        if not action.stop:
            terms.append(tape.softmax_cross_entropy(heads.first_logits(), action.first))
            terms.append(tape.softmax_cross_entropy(
                heads.second_logits(action.first), action.second, heads.second_mask(action.first)
            ))
            terms.append(tape.softmax_cross_entropy(heads.bond_logits(action.first, action.second), action.bond))
        for term in terms:
            total = term if total is None else tape.add(total, term)
    return total


def trace_logprob(
    trace: TraceSample,
    z: np.ndarray,
    params: Params,
    spec: TranslateParams,
    class_id: Optional[int] = None,
) -> float:
    """
    log p(trace | z, S^0), the sum of per-step action log-probabilities.

    Returns -inf (and logs the offending step) when an action is illegal.
    """
    _check_class(spec, class_id)
    state = trace.initial
    for step, action in enumerate(trace.actions):
        problem = action_problem(state, action, spec.vocab)
        if problem is not None:
            logger.warning(f"Illegal action {action} at step {step}: {problem}")
            return -math.inf
        if not action.stop:
            state = apply_action(state, action, spec.vocab)
    tape = Tape()
    nll = _trace_nll_on_tape(tape, params, spec, trace, tape.constant(np.asarray(z).reshape(1, -1)), class_id)
    return -nll.item()


def _logsumexp(values: Sequence[float]) -> float:
    values = np.asarray(values, dtype=np.float64)
    if not values.size or not np.isfinite(values).any():
        return -math.inf
    top = values.max()
    return float(top + math.log(np.exp(values - top).sum()))


def _prefix_logprobs(
    traces: Sequence[TraceSample], z: np.ndarray, params: Params,
    spec: TranslateParams, class_id: Optional[int],
) -> List[float]:
    """Trace log-probabilities sharing one step table per distinct action prefix."""
    tables: Dict[Tuple[Action, ...], StepLogTable] = {}
    results = []
    for trace in traces:
        total, state = 0.0, trace.initial
        for step, action in enumerate(trace.actions):
            prefix = trace.actions[:step]
            if prefix not in tables:
                tables[prefix] = step_log_table(state, z, params, spec, class_id)
            total += tables[prefix].action_logprob(action)
            if not action.stop:
                state = apply_action(state, action, spec.vocab)
        results.append(total)
    return results


def _guard(edits: EditSet) -> None:
    if len(edits) > MAX_EXACT_EDITS:
        raise TraceTooLargeError(f"{len(edits)} edits exceed the exact-enumeration limit of {MAX_EXACT_EDITS}")


def marginal_logprob_exact(
    edits: EditSet,
    z: np.ndarray,
    params: Params,
    spec: TranslateParams,
    class_id: Optional[int] = None,
) -> float:
    """
    log of the summed probability of every legal trace realizing the edits.

    Raises:
        TraceTooLargeError: If there are more than MAX_EXACT_EDITS edits
    """
    _guard(edits)
    traces = enumerate_all_traces(edits, spec.vocab)
    return _logsumexp(_prefix_logprobs(traces, z, params, spec, class_id))


def bfs_marginal_logprob_exact(
    edits: EditSet,
    z: np.ndarray,
    params: Params,
    spec: TranslateParams,
    class_id: Optional[int] = None,
) -> float:
    """As marginal_logprob_exact, restricted to breadth-first traces."""
    _guard(edits)
    traces = enumerate_bfs_traces(edits, spec.vocab)
    return _logsumexp(_prefix_logprobs(traces, z, params, spec, class_id))


def estimate_marginal_logprob(
    edits: EditSet,
    z: np.ndarray,
    params: Params,
    spec: TranslateParams,
    rng: np.random.Generator,
    samples: int = 64,
    class_id: Optional[int] = None,
) -> float:
    """
    Monte-Carlo estimate of the breadth-first marginal.

    log|T| + log-mean-exp of trace log-probabilities over `samples` traces drawn
    uniformly from the breadth-first trace set T.
    """
    traces = enumerate_bfs_traces(edits, spec.vocab)
    if len(traces) > MAX_ENUMERATED_TRACES:
        raise TraceTooLargeError(f"{len(traces)} breadth-first traces are too many to sample uniformly")
    picks = [traces[i] for i in rng.integers(0, len(traces), size=samples)]
    logprobs = _prefix_logprobs(picks, z, params, spec, class_id)
    return math.log(len(traces)) + _logsumexp(logprobs) - math.log(samples)


# Posterior and objective

def _posterior_on_tape(
    tape: Tape, params: Params, spec: TranslateParams, source: DecodeState, target: Molecule
) -> Tuple[Tensor, Tensor]:
    target_state = DecodeState(target, (False,) * target.num_atoms)
    h_g = tape.sum_rows(_encode_state(tape, params, spec, target_state, with_vocab=False))
    h_s = tape.sum_rows(_encode_state(tape, params, spec, source, with_vocab=False))
    joint = tape.concat([h_g, h_s])
    mu = spec.mu_head.forward(tape, params, joint)
    logvar = tape.clamp(spec.logvar_head.forward(tape, params, joint), -LOGVAR_BOUND, LOGVAR_BOUND)
    return mu, logvar


def posterior(
    target: Molecule, source: DecodeState, params: Params, spec: TranslateParams
) -> Tuple[np.ndarray, np.ndarray]:
    """(mu, log sigma^2) of q(z | G, S); log sigma^2 is clamped to [-10, 10]."""
    tape = Tape()
    mu, logvar = _posterior_on_tape(tape, params, spec, source, target)
    return mu.value.reshape(-1), logvar.value.reshape(-1)


def reparameterize(mu: np.ndarray, logvar: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """z = mu + sigma * eps with eps standard normal."""
    mu = np.asarray(mu, dtype=np.float64)
    return mu + np.exp(0.5 * np.asarray(logvar)) * rng.standard_normal(mu.shape)


def kl_to_standard_normal(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)) in closed form."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0))


def _kl_on_tape(tape: Tape, mu: Tensor, logvar: Tensor) -> Tensor:
    terms = tape.add(
        tape.add(tape.mul(mu, mu), tape.exp(logvar)),
        tape.add(tape.scale(logvar, -1.0), tape.constant(-np.ones(logvar.shape))),
    )
    return tape.scale(tape.sum_all(terms), 0.5)


def elbo_on_tape(
    tape: Tape,
    params: Params,
    spec: TranslateParams,
    pair: TranslationPair,
    traces: Sequence[TraceSample],
    noises: Sequence[np.ndarray],
) -> Tuple[Tensor, Tensor]:
    """
    Negative ELBO for fixed traces and standard-normal noises.

    Returns:
        (loss, kl) tensors; loss = mean trace NLL under z = mu + sigma * eps, plus KL
    """
    class_id = pair.class_id if spec.class_known else None
    mu, logvar = _posterior_on_tape(tape, params, spec, pair.edits.source, pair.target)
    sigma = tape.exp(tape.scale(logvar, 0.5))
    total = None
    for trace, eps in zip(traces, noises):
        z = tape.add(mu, tape.mul(sigma, tape.constant(np.asarray(eps).reshape(1, -1))))
        nll = _trace_nll_on_tape(tape, params, spec, trace, z, class_id)
        total = nll if total is None else tape.add(total, nll)
    kl = _kl_on_tape(tape, mu, logvar)
    return tape.add(tape.scale(total, 1.0 / len(traces)), kl), kl


def _draw(
    pair: TranslationPair, spec: TranslateParams, rng: np.random.Generator, mc_traces: int
) -> Tuple[List[TraceSample], List[np.ndarray]]:
    traces = [sample_trace(pair.edits, spec.vocab, rng) for _ in range(mc_traces)]
    noises = [rng.standard_normal(spec.latent) for _ in range(mc_traces)]
    return traces, noises


def elbo_loss(
    pair: TranslationPair,
    params: Params,
    spec: TranslateParams,
    rng: np.random.Generator,
    mc_traces: int = 1,
) -> float:
    """Negative ELBO of one pair with mc_traces sampled traces and latent draws."""
    if mc_traces < 1:
        raise ValueError(f"mc_traces must be >= 1, got {mc_traces}")
    traces, noises = _draw(pair, spec, rng, mc_traces)
    return elbo_on_tape(Tape(), params, spec, pair, traces, noises)[0].item()


def elbo_gradients(
    pair: TranslationPair,
    params: Params,
    spec: TranslateParams,
    traces: Sequence[TraceSample],
    noises: Sequence[np.ndarray],
) -> Tuple[float, float, Params]:
    """(loss, kl, gradients) for fixed traces and noises."""
    tape = Tape()
    loss, kl = elbo_on_tape(tape, params, spec, pair, traces, noises)
    return loss.item(), kl.item(), tape.backward(loss, params)


# Training

@dataclass
class TranslateTraining:
    """Outcome of train_translate: final and best-validation weights plus history."""
    params: Params
    best_params: Params
    adam: AdamState
    best_val_loss: Optional[float] = None
    history: List[dict] = field(default_factory=list)


def _validation_loss(
    pairs: Sequence[TranslationPair], params: Params, spec: TranslateParams, seed: int, mc_traces: int
) -> float:
    rng = np.random.default_rng([seed, 1])
    losses = [elbo_loss(p, params, spec, rng, mc_traces) for p in pairs]
    return float(np.mean(losses)) if losses else float('nan')


def _conditionable(
    pairs: Sequence[TranslationPair], spec: TranslateParams, role: str
) -> List[TranslationPair]:
    """Pairs the model can condition on; class-less pairs are dropped when classes are known."""
    if not spec.class_known:
        return list(pairs)
    kept = [p for p in pairs if p.class_id is not None and 1 <= p.class_id <= NUM_CLASSES]
    if len(kept) < len(pairs):
        logger.warning(f"Skipping {len(pairs) - len(kept)} {role} pairs without a reaction class")
    return kept


def train_translate(
    pairs: Sequence[TranslationPair],
    config: RunConfig,
    atom_vocab: AtomVocabulary,
    vocab: NewAtomVocabulary,
    validation: Sequence[TranslationPair] = (),
    params: Optional[Params] = None,
    adam: Optional[AdamState] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    start_epoch: int = 0,
    best: Optional[Tuple[Params, Optional[float]]] = None,
) -> TranslateTraining:
    """
    Train the translation model on synthon/reactant pairs with Adam.

    Traces and latent noises are drawn in the calling thread so runs with the
    same seed are identical whatever the worker count. Each epoch draws from
    its own stream keyed by the epoch number, so a run resumed with
    start_epoch, its weights, optimizer state and best snapshot continues
    exactly like an uninterrupted one.

    Raises:
        ValueError: If no pair fits the model's class conditioning
        DivergenceError: On a non-finite loss or parameter
    """
    spec = TranslateParams.from_config(config, atom_vocab, vocab)
    pairs = _conditionable(pairs, spec, 'training')
    validation = _conditionable(validation, spec, 'validation')
    if not pairs:
        raise ValueError("No translation pairs to train on")
    if params is None:
        params = spec.init(np.random.default_rng([config.seed, SHUFFLE_STREAM]))
    if adam is None:
        adam = AdamState.fresh(params, lr=config.lr)

    best_params, best_val = carry_best(params, best)
    history: List[dict] = []
    last_epoch = start_epoch + config.epochs

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        for epoch in range(start_epoch + 1, last_epoch + 1):
            rng = np.random.default_rng([config.seed, SHUFFLE_STREAM, epoch])
            order = rng.permutation(len(pairs))
            total_loss = total_kl = 0.0
            for start in range(0, len(order), config.batch):
                batch = [pairs[i] for i in order[start:start + config.batch]]
                draws = [_draw(p, spec, rng, config.mc_traces) for p in batch]
                results = list(pool.map(
                    lambda job: elbo_gradients(job[0], params, spec, *job[1]), zip(batch, draws)
                ))
                grads = {name: np.zeros_like(value) for name, value in params.items()}
                batch_loss = 0.0
                for loss, kl, pair_grads in results:
                    batch_loss += loss
                    total_kl += kl
                    for name, g in pair_grads.items():
                        grads[name] += g
                if not np.isfinite(batch_loss):
                    logger.error(f"Translation training diverged at epoch {epoch}, batch {start // config.batch}")
                    raise DivergenceError(
                        f"Non-finite translation loss {batch_loss} at epoch {epoch}, "
                        f"batch {start // config.batch}"
                    )
                grads = {name: g / len(batch) for name, g in grads.items()}
                params, adam = adam_step(adam, params, grads)
                if not all_finite(params):
                    logger.error(f"Translation parameters became non-finite at epoch {epoch}")
                    raise DivergenceError(f"Non-finite translation parameters at epoch {epoch}")
                total_loss += batch_loss

            record = {
                'module': 'translate',
                'epoch': epoch,
                'loss': total_loss / len(pairs),
                'kl': total_kl / len(pairs),
                'timestamp': timestamp(),
            }
            if validation:
                val_loss = _validation_loss(validation, params, spec, config.seed, config.mc_traces)
                record['val_loss'] = val_loss
                if val_loss < best_val:
                    best_val = val_loss
                    best_params = {name: value.copy() for name, value in params.items()}
            else:
                best_params = {name: value.copy() for name, value in params.items()}
            history.append(record)
            logger.info(
                f"Translate epoch {epoch}/{last_epoch}: loss={record['loss']:.4f} kl={record['kl']:.4f}"
                + (f" val_loss={record['val_loss']:.4f}" if 'val_loss' in record else '')
            )
            if on_epoch is not None:
                on_epoch(record)

    return TranslateTraining(
        params=params, best_params=best_params, adam=adam,
        best_val_loss=None if math.isinf(best_val) else best_val, history=history,
    )

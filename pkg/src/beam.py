"""Beam Search Module for the Retrosynthesis Engine.

Decodes a synthon into ranked reactant candidates. Every live candidate
proposes its top-k valid actions, the pooled children are cut back to k, and
stopped children move to the terminal pool.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np

from src.canonical import write_canonical
from src.edits import STOP, Action, DecodeState, apply_action
from src.molgraph import BondError, Molecule, valence_ok
from src.numcore import Params
from src.translate import CONTINUE, STOP_FLAG, StepLogTable, TranslateParams, step_log_table

logger = logging.getLogger(__name__)


class Decoded(NamedTuple):
    """A decoded reactant with its accumulated log-likelihood."""
    molecule: Molecule
    log_likelihood: float
    canonical: str


@dataclass
class _Candidate:
    state: DecodeState
    log_likelihood: float
    actions: Tuple[Action, ...] = ()


def _ranked_actions(table: StepLogTable, n: int) -> Iterator[Tuple[float, Action]]:
    """Continue actions in descending log-probability, ties in index order."""
    scores = (
        table.stop[CONTINUE]
        + table.first[:n, None, None]
        + table.second[:, :, None]
        + table.bond
    )
    flat = scores.reshape(-1)
    order = np.argsort(-flat, kind='stable')
    ext, bonds = scores.shape[1], scores.shape[2]
    for index in order:
        value = float(flat[index])
        if not np.isfinite(value):
            return
        first, rest = divmod(int(index), ext * bonds)
        second, bond = divmod(rest, bonds)
        yield value, Action(False, first, second, bond)


def _expand(
    candidate: _Candidate,
    table: StepLogTable,
    spec: TranslateParams,
    k: int,
) -> List[Tuple[_Candidate, bool]]:
    """Top-k valid children of one candidate as (child, stopped) pairs."""
    children: List[Tuple[float, int, _Candidate, bool]] = []
    if valence_ok(candidate.state.molecule).ok:
        stopped = _Candidate(candidate.state, candidate.log_likelihood + float(table.stop[STOP_FLAG]),
                             candidate.actions + (STOP,))
        children.append((stopped.log_likelihood, 0, stopped, True))

    n = candidate.state.num_atoms
    found = 0
    for logp, action in _ranked_actions(table, n):
        if found >= k:
            break
        if action.second < n and candidate.state.molecule.is_bonded(action.first, action.second):
            continue
        try:
            state = apply_action(candidate.state, action, spec.vocab)
        except BondError:
            continue
        if not valence_ok(state.molecule).ok:
            continue
        found += 1
        child = _Candidate(state, candidate.log_likelihood + logp, candidate.actions + (action,))
        children.append((child.log_likelihood, found, child, False))

    children.sort(key=lambda item: (-item[0], item[1]))
    return [(child, stopped) for _, _, child, stopped in children[:k]]


def beam_generate(
    initial: DecodeState,
    params: Params,
    spec: TranslateParams,
    k: int,
    max_steps: int,
    z: np.ndarray,
    class_id: Optional[int] = None,
) -> List[Decoded]:
    """
    Decode one synthon state into at most k reactants.

    Args:
        initial: Synthon state with hydrogens restored
        params: Translation weights
        spec: Translation model shape
        k: Beam width
        max_steps: Maximum number of actions per candidate (stop included)
        z: Latent code for the whole search
        class_id: Reaction class when class conditioning is enabled

    Returns:
        Distinct molecules (by canonical string) sorted by descending
        log-likelihood; every molecule passes valence_ok
    """
    if k < 1 or max_steps < 1:
        raise ValueError(f"beam width and max_steps must be >= 1, got {k} and {max_steps}")

    beam = [_Candidate(initial, 0.0)]
    terminal: List[_Candidate] = []
    for step in range(max_steps):
        pooled: List[Tuple[float, int, _Candidate, bool]] = []
        for rank, candidate in enumerate(beam):
            table = step_log_table(candidate.state, z, params, spec, class_id)
            for order, (child, stopped) in enumerate(_expand(candidate, table, spec, k)):
                pooled.append((child.log_likelihood, rank * (k + 1) + order, child, stopped))
        pooled.sort(key=lambda item: (-item[0], item[1]))
        beam = []
        for _, _, child, stopped in pooled[:k]:
            if stopped:
                terminal.append(child)
            else:
                beam.append(child)
        logger.debug(f"Beam step {step + 1}: {len(beam)} live, {len(terminal)} finished")
        if not beam:
            break

    # candidates still growing at max_steps are stopped and pay for the stop action
    for candidate in beam:
        if valence_ok(candidate.state.molecule).ok:
            table = step_log_table(candidate.state, z, params, spec, class_id)
            terminal.append(_Candidate(
                candidate.state,
                candidate.log_likelihood + float(table.stop[STOP_FLAG]),
                candidate.actions + (STOP,),
            ))

    best: Dict[str, Decoded] = {}
    for candidate in terminal:
        molecule = candidate.state.molecule.strip_maps()
        key = write_canonical(molecule)
        if key not in best or candidate.log_likelihood > best[key].log_likelihood:
            best[key] = Decoded(molecule, candidate.log_likelihood, key)
    ranked = sorted(best.values(), key=lambda d: (-d.log_likelihood, d.canonical))
    return ranked[:k]

"""Graph Edit Module for the Retrosynthesis Engine.

A synthon grows into a reactant through actions that each add one bond,
optionally materializing a new atom from the new-atom vocabulary. This module
extracts the edits separating a synthon from its reactant and orders them
into traces.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.canonical import write_canonical
from src.molgraph import (
    MAX_H_COUNT,
    NUM_BOND_TYPES,
    AtomRecord,
    Molecule,
    MoleculeError,
    valence_used,
)

logger = logging.getLogger(__name__)


class EditError(ValueError):
    """Raised when a synthon cannot be grown into its reactant by adding bonds."""


@dataclass(frozen=True)
class Action:
    """
    One decoding step.

    first indexes an atom of the current graph; second indexes the extended
    graph (current atoms, then vocabulary slots); bond is a BondType value.
    """
    stop: bool
    first: Optional[int] = None
    second: Optional[int] = None
    bond: Optional[int] = None

    def __post_init__(self):
        fields = (self.first, self.second, self.bond)
        if self.stop:
            if any(f is not None for f in fields):
                raise EditError("A stop action carries no node or bond")
            return
        if any(f is None for f in fields):
            raise EditError("A continue action needs first, second and bond")
        if self.first == self.second:
            raise EditError(f"Action selects node {self.first} twice")
        if self.first < 0 or self.second < 0 or not 0 <= self.bond < NUM_BOND_TYPES:
            raise EditError(f"Action out of range: {self}")

    def __str__(self) -> str:
        if self.stop:
            return 'stop'
        return f"bond({self.first}, {self.second}, type={self.bond})"


STOP = Action(stop=True)


@dataclass(frozen=True)
class DecodeState:
    """A partially grown graph; attachment marks atoms whose bonds were cut."""
    molecule: Molecule
    attachment: Tuple[bool, ...]

    def __post_init__(self):
        if len(self.attachment) != self.molecule.num_atoms:
            raise EditError("Attachment flags do not match the atom count")

    @property
    def num_atoms(self) -> int:
        return self.molecule.num_atoms


@dataclass(frozen=True)
class NewAtomVocabulary:
    """
    Atoms a decoder may materialize, keyed by (element, charge, hydrogens).

    Hydrogens are those of the isolated atom; every bond added to it consumes
    them again.
    """
    entries: Tuple[Tuple[str, int, int], ...]

    @classmethod
    def from_edit_sets(cls, edit_sets: Iterable['EditSet']) -> 'NewAtomVocabulary':
        keys = {_atom_key(atom) for edits in edit_sets for atom in edits.new_atoms}
        return cls(tuple(sorted(keys)))

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def index(self, atom: AtomRecord) -> int:
        try:
            return self.entries.index(_atom_key(atom))
        except ValueError:
            raise EditError(f"New atom {_atom_key(atom)} is not in the vocabulary") from None

    def atom(self, slot: int) -> AtomRecord:
        element, charge, h_count = self.entries[slot]
        return AtomRecord(element, charge, h_count)


def _atom_key(atom: AtomRecord) -> Tuple[str, int, int]:
    return (atom.element, atom.charge, atom.h_count)


@dataclass(frozen=True)
class EditSet:
    """
    Edits turning a decode state into a reactant.

    Bonds use node ids: ids below num_existing are atoms of the source state,
    id num_existing + t is new atom t.
    """
    source: DecodeState
    new_atoms: Tuple[AtomRecord, ...]
    bonds: Tuple[Tuple[int, int, int], ...]

    @property
    def num_existing(self) -> int:
        return self.source.num_atoms

    def __len__(self) -> int:
        return len(self.bonds)

    def is_new(self, node: int) -> bool:
        return node >= self.num_existing

    def slots(self, vocab: NewAtomVocabulary) -> List[int]:
        return [vocab.index(atom) for atom in self.new_atoms]


@dataclass(frozen=True)
class TraceSample:
    """An initial state and its ordered actions, the last being stop."""
    initial: DecodeState
    actions: Tuple[Action, ...]

    def __post_init__(self):
        if not self.actions or not self.actions[-1].stop:
            raise EditError("A trace must end with stop")
        if any(a.stop for a in self.actions[:-1]):
            raise EditError("Stop may only appear as the last action")

    def __len__(self) -> int:
        return len(self.actions)

    def states(self, vocab: NewAtomVocabulary) -> Iterator[DecodeState]:
        """The state before each action, S^0 .. S^{T-1}."""
        state = self.initial
        for action in self.actions:
            yield state
            if not action.stop:
                state = apply_action(state, action, vocab)

    def final(self, vocab: NewAtomVocabulary) -> DecodeState:
        state = self.initial
        for action in self.actions[:-1]:
            state = apply_action(state, action, vocab)
        return state


def initial_state(molecule: Molecule, cut_orders: Sequence[int]) -> DecodeState:
    """
    Start state for a synthon: each atom regains its cut bond order as hydrogens.

    Raises:
        EditError: If restoring would exceed the hydrogen limit
    """
    atoms = []
    for atom, order in zip(molecule.atoms, cut_orders):
        h_count = atom.h_count + order
        if h_count > MAX_H_COUNT:
            raise EditError(f"Restoring {order} hydrogens on {atom.element} exceeds {MAX_H_COUNT}")
        atoms.append(atom.with_h(h_count))
    return DecodeState(
        molecule=molecule.replace_atoms(atoms),
        attachment=tuple(order > 0 for order in cut_orders),
    )


def apply_action(state: DecodeState, action: Action, vocab: NewAtomVocabulary) -> DecodeState:
    """
    Add one bond (and possibly one vocabulary atom) to a state.

    Raises:
        EditError: On a stop action or a second index past the vocabulary
        BondError: If the pair is already bonded
    """
    if action.stop:
        raise EditError("Cannot apply a stop action")
    n = state.num_atoms
    if action.first >= n:
        raise EditError(f"First node {action.first} is not an atom of the current graph")
    molecule, attachment, second = state.molecule, state.attachment, action.second
    if second >= n:
        slot = second - n
        if slot >= vocab.size:
            raise EditError(f"Vocabulary slot {slot} out of range ({vocab.size} entries)")
        molecule = molecule.add_atom(vocab.atom(slot))
        attachment = attachment + (False,)
        second = n
    molecule = molecule.add_bond(action.first, second, action.bond, consume_hydrogens=True)
    return DecodeState(molecule=molecule, attachment=attachment)


def diff_edits(source: DecodeState, target: Molecule) -> EditSet:
    """
    Bonds and atoms that turn source into target, aligned by atom-map numbers.

    Every source atom must be mapped and present in target with the same
    element, charge and hydrogen-plus-valence total; every source bond must
    exist in target with the same type. Target atoms whose map is absent from
    source (or that are unmapped) become new atoms, recorded in their isolated
    form.

    Raises:
        EditError: If source is not a subgraph of target
    """
    mol = source.molecule
    target_index = target.map_index()
    to_target: List[int] = []
    for i, atom in enumerate(mol.atoms):
        if atom.map_num is None:
            raise EditError(f"Synthon atom {i} ({atom.element}) is unmapped")
        if atom.map_num not in target_index:
            raise EditError(f"Map number {atom.map_num} missing from the reactant")
        g = target_index[atom.map_num]
        other = target.atoms[g]
        if (other.element, other.charge) != (atom.element, atom.charge):
            raise EditError(
                f"Atom :{atom.map_num} changes from {atom.element}{atom.charge:+d} "
                f"to {other.element}{other.charge:+d}"
            )
        if atom.h_count + valence_used(mol, i) != other.h_count + valence_used(target, g):
            raise EditError(f"Atom :{atom.map_num} needs hydrogens removed, not bonds added")
        to_target.append(g)

    for i, j, bond in mol.bonds():
        if target.bond_type(to_target[i], to_target[j]) != bond:
            raise EditError(f"Synthon bond {i}-{j} is absent or retyped in the reactant")

    n = mol.num_atoms
    node_of: Dict[int, int] = {g: i for i, g in enumerate(to_target)}
    new_atoms = []
    for g, atom in enumerate(target.atoms):
        if g in node_of:
            continue
        node_of[g] = n + len(new_atoms)
        try:
            new_atoms.append(AtomRecord(atom.element, atom.charge, atom.h_count + valence_used(target, g)))
        except MoleculeError as e:
            raise EditError(f"New atom {atom.element} cannot be isolated: {e}") from e

    bonds = []
    for gi, gj, bond in target.bonds():
        u, v = node_of[gi], node_of[gj]
        if u < n and v < n and mol.is_bonded(u, v):
            continue
        bonds.append((min(u, v), max(u, v), int(bond)))
    bonds.sort()

    edits = EditSet(source=source, new_atoms=tuple(new_atoms), bonds=tuple(bonds))
    _verify_replay(edits, target)
    return edits


def _verify_replay(edits: EditSet, target: Molecule) -> None:
    vocab = NewAtomVocabulary.from_edit_sets([edits])
    actions = next(_BreadthFirstWalk(edits, vocab).paths())
    final = TraceSample(edits.source, actions + (STOP,)).final(vocab)
    if write_canonical(final.molecule) != write_canonical(target):
        raise EditError("Replaying the edits does not reproduce the reactant")


def match_reactants(
    synthon_maps: Sequence[Iterable[int]], reactants: Sequence[Molecule]
) -> List[int]:
    """
    Reactant index for each synthon, given the synthons' atom-map numbers.

    Raises:
        EditError: If a synthon spans reactants or two synthons share one
    """
    owners: Dict[int, int] = {}
    for r_idx, reactant in enumerate(reactants):
        for num in reactant.map_index():
            owners[num] = r_idx
    chosen = []
    for maps in synthon_maps:
        found = {owners.get(num) for num in maps}
        if None in found or len(found) != 1:
            raise EditError(f"Synthon maps {sorted(maps)} do not sit in exactly one reactant")
        chosen.append(found.pop())
    if len(set(chosen)) != len(chosen):
        raise EditError("Two synthons grow into the same reactant")
    return chosen


# Trace ordering

DISTINCT_SAMPLE_LIMIT = 1_000

WalkState = Tuple[List[int], Dict[int, int], int, frozenset]


class _BreadthFirstWalk:
    """
    Breadth-first emission of an edit set.

    The queue starts with the source atoms that touch an edit; popping a node
    emits all its pending bonds in some order, enqueuing newly materialized
    atoms. A path is one seed order plus one bond order per popped node.
    """

    def __init__(self, edits: EditSet, vocab: NewAtomVocabulary):
        self.edits = edits
        self.slots = edits.slots(vocab)
        self.n = edits.num_existing
        self.incident: Dict[int, List[int]] = {}
        for e, (u, v, _) in enumerate(edits.bonds):
            self.incident.setdefault(u, []).append(e)
            self.incident.setdefault(v, []).append(e)
        self.seeds = sorted(node for node in self.incident if node < self.n)
        self._completions: Dict[tuple, int] = {}

    def starts(self) -> Iterator[WalkState]:
        placed = {i: i for i in range(self.n)}
        for seed_order in itertools.permutations(self.seeds):
            yield list(seed_order), placed, self.n, frozenset()

    def children(self, queue, placed, count, done) -> Iterator[Tuple[List[Action], WalkState]]:
        """Emitted actions and next state for each bond order of the queue head."""
        u, rest = queue[0], queue[1:]
        pending = [e for e in self.incident.get(u, ()) if e not in done]
        for order in itertools.permutations(pending):
            now_placed, now_count, now_queue, emitted = dict(placed), count, list(rest), []
            for e in order:
                a, b, bond = self.edits.bonds[e]
                w = b if a == u else a
                if w in now_placed:
                    emitted.append(Action(False, now_placed[u], now_placed[w], bond))
                else:
                    emitted.append(Action(False, now_placed[u], now_count + self.slots[w - self.n], bond))
                    now_placed[w] = now_count
                    now_count += 1
                    now_queue.append(w)
            yield emitted, (now_queue, now_placed, now_count, done | frozenset(order))

    def completions(self, queue, placed, count, done) -> int:
        """Number of paths from this state that place every edit."""
        if not queue:
            return int(len(done) == len(self.edits.bonds))
        # the count depends on which atoms are placed, not on their indices
        key = (tuple(queue), frozenset(placed), done)
        if key not in self._completions:
            self._completions[key] = sum(
                self.completions(*child) for _, child in self.children(queue, placed, count, done)
            )
        return self._completions[key]

    def count(self) -> int:
        total = sum(self.completions(*state) for state in self.starts())
        if not total:
            raise EditError("Some edits are not reachable from the synthon")
        return total

    def paths(self) -> Iterator[Tuple[Action, ...]]:
        """Actions of every path (without the final stop), seeds and bonds in natural order first."""
        def expand(state, actions):
            if not state[0]:
                if len(state[3]) != len(self.edits.bonds):
                    raise EditError("Some edits are not reachable from the synthon")
                yield actions
                return
            for emitted, child in self.children(*state):
                yield from expand(child, actions + tuple(emitted))

        for state in self.starts():
            yield from expand(state, ())

    def sample(self, rng: np.random.Generator) -> Tuple[Action, ...]:
        """One path drawn uniformly: every choice is weighted by its completions."""
        options = list(self.starts())
        state = options[_weighted_pick(rng, [self.completions(*s) for s in options])]
        actions: List[Action] = []
        while state[0]:
            branches = list(self.children(*state))
            emitted, state = branches[_weighted_pick(rng, [self.completions(*c) for _, c in branches])]
            actions.extend(emitted)
        return tuple(actions)


def _weighted_pick(rng: np.random.Generator, weights: Sequence[int]) -> int:
    total = float(sum(weights))
    if total <= 0:
        raise EditError("Some edits are not reachable from the synthon")
    return int(rng.choice(len(weights), p=np.asarray(weights, dtype=np.float64) / total))


def sample_trace(
    edits: EditSet,
    vocab: NewAtomVocabulary,
    rng: np.random.Generator,
    limit: int = DISTINCT_SAMPLE_LIMIT,
) -> TraceSample:
    """
    Draw one breadth-first trace uniformly; an empty edit set gives [stop].

    Args:
        edits: Edits to order
        vocab: New-atom vocabulary giving the slot of each new atom
        rng: Random source
        limit: Up to this many paths the distinct traces are listed and one
            is picked; above it a path is drawn uniformly by completion counts

    Note:
        Bond orders that spell the same action sequence (interchangeable new
        atoms) are one trace when listed, but one draw each above the limit.
    """
    walk = _BreadthFirstWalk(edits, vocab)
    if walk.count() <= limit:
        traces = list(dict.fromkeys(walk.paths()))
        actions = traces[int(rng.integers(len(traces)))]
    else:
        actions = walk.sample(rng)
    return TraceSample(initial=edits.source, actions=actions + (STOP,))


def enumerate_bfs_traces(edits: EditSet, vocab: NewAtomVocabulary) -> List[TraceSample]:
    """Every distinct breadth-first trace, in discovery order."""
    seen = dict.fromkeys(_BreadthFirstWalk(edits, vocab).paths())
    return [TraceSample(edits.source, actions + (STOP,)) for actions in seen]


def enumerate_all_traces(edits: EditSet, vocab: NewAtomVocabulary) -> List[TraceSample]:
    """
    Every legal trace: any bond order keeping the grown region attached.

    A bond between two placed atoms may be emitted from either end; a bond to
    an unplaced atom must start at the placed end.
    """
    n = edits.num_existing
    slots = edits.slots(vocab)
    traces: List[TraceSample] = []

    def grow(placed, count, remaining, actions):
        if not remaining:
            traces.append(TraceSample(edits.source, actions + (STOP,)))
            return
        for e in sorted(remaining):
            a, b, bond = edits.bonds[e]
            later = remaining - {e}
            if a in placed and b in placed:
                for u, w in ((a, b), (b, a)):
                    grow(placed, count, later, actions + (Action(False, placed[u], placed[w], bond),))
            elif a in placed or b in placed:
                u, w = (a, b) if a in placed else (b, a)
                step = Action(False, placed[u], count + slots[w - n], bond)
                grow({**placed, w: count}, count + 1, later, actions + (step,))

    grow({i: i for i in range(n)}, n, frozenset(range(len(edits.bonds))), ())
    return traces

"""Molecular Graph Module for the Retrosynthesis Engine.

Molecules are immutable labeled graphs: a tuple of AtomRecord plus an
n x n x b adjacency tensor over bond types. Every surgery helper returns a
new Molecule.
"""

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np


class BondType(IntEnum):
    """Bond types indexing the last axis of the adjacency tensor."""
    SINGLE = 0
    DOUBLE = 1
    TRIPLE = 2
    AROMATIC = 3


NUM_BOND_TYPES = len(BondType)
BOND_ORDER = {BondType.SINGLE: 1, BondType.DOUBLE: 2, BondType.TRIPLE: 3, BondType.AROMATIC: 1}

ORGANIC_SUBSET = ('B', 'C', 'N', 'O', 'P', 'S', 'F', 'Cl', 'Br', 'I')
AROMATIC_SYMBOLS = {'b': 'B', 'c': 'C', 'n': 'N', 'o': 'O', 'p': 'P', 's': 'S'}
HALOGENS = ('F', 'Cl', 'Br', 'I')

# Capacity before charge adjustment
MAX_VALENCE = {'B': 3, 'C': 4, 'N': 3, 'O': 2, 'P': 5, 'S': 6, 'F': 1, 'Cl': 1, 'Br': 1, 'I': 1}

# Valences an organic-subset atom may take when hydrogens are implicit
DEFAULT_VALENCES = {
    'B': (3,), 'C': (4,), 'N': (3, 5), 'O': (2,), 'P': (3, 5), 'S': (2, 4, 6),
    'F': (1,), 'Cl': (1,), 'Br': (1,), 'I': (1,),
}

MIN_CHARGE, MAX_CHARGE = -2, 2
MAX_H_COUNT = 4
NUM_CLASSES = 10


class MoleculeError(ValueError):
    """Raised for malformed atoms or adjacency."""


class BondError(MoleculeError):
    """Raised when a bond edit refers to a pair in the wrong state."""


class ReactionError(ValueError):
    """Raised when a reaction breaks the atom-mapping rules."""


@dataclass(frozen=True)
class AtomRecord:
    """A heavy atom: element, formal charge, hydrogen count and optional map number."""
    element: str
    charge: int = 0
    h_count: int = 0
    map_num: Optional[int] = None

    def __post_init__(self):
        if not MIN_CHARGE <= self.charge <= MAX_CHARGE:
            raise MoleculeError(f"Charge {self.charge} outside [{MIN_CHARGE}, {MAX_CHARGE}]")
        if not 0 <= self.h_count <= MAX_H_COUNT:
            raise MoleculeError(f"Hydrogen count {self.h_count} outside [0, {MAX_H_COUNT}]")
        if self.map_num is not None and self.map_num < 1:
            raise MoleculeError(f"Atom-map number must be positive, got {self.map_num}")

    def unmapped(self) -> "AtomRecord":
        return AtomRecord(self.element, self.charge, self.h_count)

    def with_h(self, h_count: int) -> "AtomRecord":
        return AtomRecord(self.element, self.charge, h_count, self.map_num)


class ValenceCheck(NamedTuple):
    ok: bool
    violations: List[int]


class Molecule:
    """
    Immutable molecular graph.

    The adjacency tensor is symmetric, has an empty diagonal and holds at
    most one bond type per atom pair; these are checked on construction.
    """

    __slots__ = ('_atoms', '_adjacency')

    def __init__(self, atoms: Sequence[AtomRecord], adjacency: np.ndarray):
        atoms = tuple(atoms)
        n = len(atoms)
        adjacency = np.asarray(adjacency, dtype=np.int8)
        if adjacency.shape != (n, n, NUM_BOND_TYPES):
            raise MoleculeError(f"Adjacency shape {adjacency.shape} does not fit {n} atoms")
        if not np.array_equal(adjacency, adjacency.transpose(1, 0, 2)):
            raise MoleculeError("Adjacency is not symmetric")
        if n and adjacency[np.arange(n), np.arange(n)].any():
            raise MoleculeError("Self-bond in adjacency")
        if (adjacency.sum(axis=2) > 1).any() or adjacency.min(initial=0) < 0:
            raise MoleculeError("More than one bond type on an atom pair")
        maps = [a.map_num for a in atoms if a.map_num is not None]
        if len(maps) != len(set(maps)):
            raise MoleculeError("Duplicate atom-map numbers")
        adjacency = adjacency.copy()
        adjacency.flags.writeable = False
        self._atoms = atoms
        self._adjacency = adjacency

    @classmethod
    def from_bonds(
        cls, atoms: Sequence[AtomRecord], bonds: Iterable[Tuple[int, int, int]]
    ) -> "Molecule":
        n = len(atoms)
        adjacency = np.zeros((n, n, NUM_BOND_TYPES), dtype=np.int8)
        for i, j, bond in bonds:
            if i == j:
                raise MoleculeError(f"Self-bond on atom {i}")
            if adjacency[i, j].any():
                raise BondError(f"Atoms {i} and {j} are already bonded")
            adjacency[i, j, bond] = adjacency[j, i, bond] = 1
        return cls(atoms, adjacency)

    @property
    def atoms(self) -> Tuple[AtomRecord, ...]:
        return self._atoms

    @property
    def adjacency(self) -> np.ndarray:
        return self._adjacency

    @property
    def num_atoms(self) -> int:
        return len(self._atoms)

    def __len__(self) -> int:
        return len(self._atoms)

    def __repr__(self) -> str:
        return f"Molecule(atoms={len(self._atoms)}, bonds={len(self.bonds())})"

    def bond_type(self, i: int, j: int) -> Optional[BondType]:
        hit = np.flatnonzero(self._adjacency[i, j])
        return BondType(int(hit[0])) if hit.size else None

    def is_bonded(self, i: int, j: int) -> bool:
        return bool(self._adjacency[i, j].any())

    def bonds(self) -> List[Tuple[int, int, BondType]]:
        """All bonds as (i, j, type) with i < j, in index order."""
        ii, jj, kk = np.nonzero(self._adjacency)
        return [(int(i), int(j), BondType(int(k))) for i, j, k in zip(ii, jj, kk) if i < j]

    def neighbors(self, i: int) -> List[Tuple[int, BondType]]:
        jj, kk = np.nonzero(self._adjacency[i])
        return [(int(j), BondType(int(k))) for j, k in zip(jj, kk)]

    def degree(self, i: int) -> int:
        return int(self._adjacency[i].sum())

    def is_aromatic(self, i: int) -> bool:
        return bool(self._adjacency[i, :, BondType.AROMATIC].any())

    def map_index(self) -> Dict[int, int]:
        return {a.map_num: idx for idx, a in enumerate(self._atoms) if a.map_num is not None}

    def valence_used(self, i: int) -> int:
        return valence_used(self, i)

    # Surgery; all return new molecules

    def replace_atoms(self, atoms: Sequence[AtomRecord]) -> "Molecule":
        return Molecule(atoms, self._adjacency)

    def strip_maps(self) -> "Molecule":
        return Molecule([a.unmapped() for a in self._atoms], self._adjacency)

    def add_atom(self, atom: AtomRecord) -> "Molecule":
        n = self.num_atoms
        adjacency = np.zeros((n + 1, n + 1, NUM_BOND_TYPES), dtype=np.int8)
        adjacency[:n, :n] = self._adjacency
        return Molecule(self._atoms + (atom,), adjacency)

    def add_bond(self, i: int, j: int, bond: int, consume_hydrogens: bool = False) -> "Molecule":
        """
        Return a copy with bond (i, j) set.

        With consume_hydrogens, hydrogens on both atoms drop by the valence the
        bond uses (floored at zero).

        Raises:
            BondError: If i == j or the pair is already bonded
        """
        if i == j:
            raise BondError(f"Self-bond on atom {i}")
        if self.is_bonded(i, j):
            raise BondError(f"Atoms {i} and {j} are already bonded")
        adjacency = self._adjacency.copy()
        adjacency[i, j, bond] = adjacency[j, i, bond] = 1
        result = Molecule(self._atoms, adjacency)
        if consume_hydrogens:
            result = _shift_hydrogens(self, result, (i, j))
        return result

    def relabel(self, order: Sequence[int]) -> "Molecule":
        """New molecule whose atom k is this molecule's atom order[k]."""
        order = np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(self.num_atoms)):
            raise MoleculeError("relabel() needs a permutation of atom indices")
        adjacency = self._adjacency[np.ix_(order, order)]
        return Molecule([self._atoms[k] for k in order], adjacency)

    def subgraph(self, indices: Sequence[int]) -> "Molecule":
        indices = list(indices)
        adjacency = self._adjacency[np.ix_(indices, indices)]
        return Molecule([self._atoms[k] for k in indices], adjacency)


def _shift_hydrogens(before: Molecule, after: Molecule, touched: Iterable[int]) -> Molecule:
    """Move hydrogens on touched atoms so hydrogens + valence used stays constant."""
    atoms = list(after.atoms)
    for i in set(touched):
        total = before.atoms[i].h_count + valence_used(before, i)
        # Aromatic N/P gain a valence unit only when hydrogen-free
        h = total - valence_used(after, i, h_count=0)
        if h > 0:
            h = total - valence_used(after, i, h_count=h)
        atoms[i] = atoms[i].with_h(min(max(h, 0), MAX_H_COUNT))
    return after.replace_atoms(atoms)


def valence_used(mol: Molecule, i: int, h_count: Optional[int] = None) -> int:
    """
    Valence taken up by heavy-atom bonds on atom i.

    h_count overrides the recorded hydrogens when deciding the aromatic extra unit.

    Aromatic bonds count one each, plus one extra unit for aromatic B/C and
    for hydrogen-free aromatic N/P (the pyridine case); aromatic O, S and
    [nH] donate their lone pair and get no extra unit.
    """
    atom = mol.atoms[i]
    used = 0
    aromatic = 0
    for _, bond in mol.neighbors(i):
        if bond == BondType.AROMATIC:
            aromatic += 1
        else:
            used += BOND_ORDER[bond]
    if aromatic:
        used += aromatic
        h = atom.h_count if h_count is None else h_count
        if atom.element in ('B', 'C') or (atom.element in ('N', 'P') and h == 0):
            used += 1
    return used


def valence_capacity(atom: AtomRecord) -> int:
    """Maximum valence after the charge adjustment (see docs/smiles_grammar.md)."""
    base = MAX_VALENCE.get(atom.element)
    if base is None:
        raise MoleculeError(f"No valence rule for element {atom.element}")
    if atom.element == 'C':
        return base - abs(atom.charge)
    if atom.element == 'B':
        return base - atom.charge
    return base + atom.charge


def implicit_hydrogens(element: str, used: int, charge: int = 0) -> int:
    """Hydrogens an organic-subset atom carries when written without brackets."""
    if charge != 0 or element not in DEFAULT_VALENCES:
        return 0
    for valence in DEFAULT_VALENCES[element]:
        if valence >= used:
            return valence - used
    return 0


def valence_ok(mol: Molecule) -> ValenceCheck:
    """
    Check every atom against its valence capacity.

    Returns:
        ValenceCheck(ok, violations) where violations lists offending atom indices
    """
    violations = [
        i for i, atom in enumerate(mol.atoms)
        if valence_used(mol, i) + atom.h_count > valence_capacity(atom)
    ]
    return ValenceCheck(ok=not violations, violations=violations)


def remove_bonds(mol: Molecule, pairs: Iterable[Tuple[int, int]]) -> Molecule:
    """
    Clear the listed bonds, keeping atom indices and records unchanged.

    Raises:
        BondError: If a pair is not currently bonded
    """
    adjacency = mol.adjacency.copy()
    for i, j in pairs:
        if not adjacency[i, j].any():
            raise BondError(f"Atoms {i} and {j} are not bonded")
        adjacency[i, j] = 0
        adjacency[j, i] = 0
    return Molecule(mol.atoms, adjacency)


def connected_components(mol: Molecule) -> List[Tuple[Molecule, Tuple[int, ...]]]:
    """
    Split a molecule into connected pieces.

    Returns:
        (component, parent indices) pairs ordered by their smallest parent index;
        component atom k is parent atom indices[k]
    """
    seen = [False] * mol.num_atoms
    components = []
    for start in range(mol.num_atoms):
        if seen[start]:
            continue
        seen[start] = True
        stack = [start]
        members = []
        while stack:
            i = stack.pop()
            members.append(i)
            for j, _ in mol.neighbors(i):
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        members.sort()
        components.append((mol.subgraph(members), tuple(members)))
    return components


@dataclass(frozen=True)
class Reaction:
    """Atom-mapped reaction: reactants >> single product, optional class 1..10."""
    reactants: Tuple[Molecule, ...]
    product: Molecule
    class_id: Optional[int] = None
    reagents: Tuple[Molecule, ...] = field(default=())

    def validate(self) -> None:
        """
        Enforce the atom-mapping rules.

        Raises:
            ReactionError: On an unmapped product atom, a product map missing
                from the reactants or present in more than one, or a bad class id
        """
        if self.class_id is not None and not 1 <= self.class_id <= NUM_CLASSES:
            raise ReactionError(f"Reaction class {self.class_id} outside 1..{NUM_CLASSES}")
        if not self.reactants:
            raise ReactionError("Reaction has no reactants")
        owners: Dict[int, int] = {}
        for r_idx, reactant in enumerate(self.reactants):
            for num in reactant.map_index():
                if num in owners:
                    raise ReactionError(f"Map number {num} appears in two reactants")
                owners[num] = r_idx
        for idx, atom in enumerate(self.product.atoms):
            if atom.map_num is None:
                raise ReactionError(f"Product atom {idx} ({atom.element}) is unmapped")
            if atom.map_num not in owners:
                raise ReactionError(f"Product map number {atom.map_num} not found in reactants")

    def reactant_of(self, map_num: int) -> Tuple[int, int]:
        """(reactant index, atom index) holding the given map number."""
        for r_idx, reactant in enumerate(self.reactants):
            index = reactant.map_index()
            if map_num in index:
                return r_idx, index[map_num]
        raise ReactionError(f"Map number {map_num} not found in reactants")


@dataclass(frozen=True)
class AtomVocabulary:
    """Frozen element vocabulary behind the node-feature encoding."""
    elements: Tuple[str, ...]

    @classmethod
    def from_molecules(cls, molecules: Iterable[Molecule]) -> "AtomVocabulary":
        found = {atom.element for mol in molecules for atom in mol.atoms}
        return cls(tuple(sorted(found)))

    @property
    def width(self) -> int:
        return len(self.elements) + (MAX_CHARGE - MIN_CHARGE + 1) + (MAX_H_COUNT + 1)

    def encode_atom(self, atom: AtomRecord) -> np.ndarray:
        try:
            element_slot = self.elements.index(atom.element)
        except ValueError:
            raise MoleculeError(f"Element {atom.element} is not in the vocabulary") from None
        row = np.zeros(self.width)
        row[element_slot] = 1.0
        offset = len(self.elements)
        row[offset + atom.charge - MIN_CHARGE] = 1.0
        offset += MAX_CHARGE - MIN_CHARGE + 1
        row[offset + atom.h_count] = 1.0
        return row

    def featurize(self, mol: Molecule) -> np.ndarray:
        """Node feature matrix X, one row per atom."""
        if not mol.num_atoms:
            return np.zeros((0, self.width))
        return np.stack([self.encode_atom(a) for a in mol.atoms])

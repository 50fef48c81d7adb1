"""Canonical SMILES Module for the Retrosynthesis Engine.

Ranks atoms by iterative neighborhood refinement on (element, charge,
H-count, degree, bond-type multiset). Remaining ties are broken by trying
members of the lowest tied class and keeping the lexicographically smallest
serialization, so the output never depends on input atom order. Members that
an automorphism found earlier maps onto a searched one are skipped, which
keeps highly symmetric molecules cheap.
"""

from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from src.molgraph import (
    AROMATIC_SYMBOLS,
    ORGANIC_SUBSET,
    BondType,
    Molecule,
    connected_components,
    implicit_hydrogens,
    valence_used,
)

_LOWERCASE = {element: symbol for symbol, element in AROMATIC_SYMBOLS.items()}


def _dense_ranks(keys: Sequence) -> List[int]:
    ordered = sorted(set(keys))
    lookup = {key: rank for rank, key in enumerate(ordered)}
    return [lookup[key] for key in keys]


def _atom_invariant(mol: Molecule, i: int, with_maps: bool) -> Tuple:
    atom = mol.atoms[i]
    bond_multiset = tuple(sorted(int(b) for _, b in mol.neighbors(i)))
    key = (atom.element, atom.charge, atom.h_count, mol.degree(i), bond_multiset)
    if with_maps:
        key += (atom.map_num or 0,)
    return key


def _refine(mol: Molecule, ranks: List[int]) -> List[int]:
    """Split rank classes by sorted (neighbor rank, bond type) lists until stable."""
    neighbors = [mol.neighbors(i) for i in range(mol.num_atoms)]
    classes = len(set(ranks))
    while True:
        keys = [
            (ranks[i], tuple(sorted((ranks[j], int(b)) for j, b in neighbors[i])))
            for i in range(mol.num_atoms)
        ]
        refined = _dense_ranks(keys)
        count = len(set(refined))
        if count == classes:
            return refined
        ranks, classes = refined, count


def _break_tie(ranks: List[int], chosen: int) -> List[int]:
    doubled = [2 * r for r in ranks]
    doubled[chosen] -= 1
    return _dense_ranks(doubled)


Permutation = Tuple[int, ...]


class _TieSearch:
    """
    Depth-first search over tie-breaking choices for the smallest serialization.

    Each leaf is compared with the first leaf and the best one; when the
    strings agree, the atom correspondence between them is checked as an
    automorphism and kept. A node skips any tied member lying in the orbit of
    one it already searched, under the kept automorphisms that preserve the
    node's ranking.
    """

    def __init__(self, mol: Molecule, keep_maps: bool):
        self.mol = mol
        self.keep_maps = keep_maps
        self.invariants = [_atom_invariant(mol, i, keep_maps) for i in range(mol.num_atoms)]
        self.bonds = [{j: int(b) for j, b in mol.neighbors(i)} for i in range(mol.num_atoms)]
        self.first: Optional[Tuple[str, List[int]]] = None
        self.best: Optional[Tuple[str, List[int]]] = None
        self.automorphisms: List[Permutation] = []

    def run(self) -> Tuple[str, List[int]]:
        return self._search(_dense_ranks(self.invariants))

    def _search(self, ranks: List[int]) -> Tuple[str, List[int]]:
        ranks = _refine(self.mol, ranks)
        if len(set(ranks)) == self.mol.num_atoms:
            leaf = (_serialize(self.mol, ranks, self.keep_maps), ranks)
            self._record(leaf)
            return leaf

        counts: Dict[int, int] = {}
        for r in ranks:
            counts[r] = counts.get(r, 0) + 1
        tied = min(r for r, c in counts.items() if c > 1)

        best: Optional[Tuple[str, List[int]]] = None
        searched: List[int] = []
        for member in (i for i, r in enumerate(ranks) if r == tied):
            orbit = self._orbits(ranks)
            if any(orbit[member] == orbit[s] for s in searched):
                continue
            searched.append(member)
            candidate = self._search(_break_tie(ranks, member))
            if best is None or candidate[0] < best[0]:
                best = candidate
        return best

    def _record(self, leaf: Tuple[str, List[int]]) -> None:
        for reference in (self.first, self.best):
            if reference is not None and reference[0] == leaf[0]:
                mapping = _rank_mapping(reference[1], leaf[1])
                if mapping not in self.automorphisms and self._is_automorphism(mapping):
                    self.automorphisms.append(mapping)
        if self.first is None:
            self.first = leaf
        if self.best is None or leaf[0] < self.best[0]:
            self.best = leaf

    def _is_automorphism(self, mapping: Permutation) -> bool:
        if all(mapping[i] == i for i in range(len(mapping))):
            return False
        for i, image in enumerate(mapping):
            if self.invariants[i] != self.invariants[image]:
                return False
            if {mapping[j]: b for j, b in self.bonds[i].items()} != self.bonds[image]:
                return False
        return True

    def _orbits(self, ranks: List[int]) -> List[int]:
        """Orbit label per atom under the kept automorphisms that preserve ranks."""
        parent = list(range(len(ranks)))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for mapping in self.automorphisms:
            if all(ranks[image] == ranks[i] for i, image in enumerate(mapping)):
                for i, image in enumerate(mapping):
                    parent[find(i)] = find(image)
        return [find(i) for i in range(len(ranks))]


def _rank_mapping(source: List[int], target: List[int]) -> Permutation:
    """Send the atom holding each rank in source to the atom holding it in target."""
    by_rank = [0] * len(target)
    for i, r in enumerate(target):
        by_rank[r] = i
    return tuple(by_rank[r] for r in source)


def canonical_ranks(mol: Molecule, keep_maps: bool = False) -> List[int]:
    """
    Canonical rank of every atom, a permutation of 0..n-1.

    Relabeling the molecule by these ranks gives the same graph whatever the
    input atom order was.
    """
    if not mol.num_atoms:
        return []
    return _TieSearch(mol, keep_maps).run()[1]


def write_canonical(mol: Molecule, keep_maps: bool = False) -> str:
    """
    Canonical SMILES string; atom-map numbers are dropped unless keep_maps is set.

    Components are written separately and joined by '.' in sorted order.
    """
    if not mol.num_atoms:
        return ''
    return _TieSearch(mol, keep_maps).run()[0]


def canonical_order(mol: Molecule) -> List[int]:
    """Atom indices sorted by canonical rank."""
    ranks = canonical_ranks(mol)
    return sorted(range(mol.num_atoms), key=lambda i: ranks[i])


def reactant_set(molecules: Iterable[Molecule]) -> Tuple[str, ...]:
    """Order-insensitive exact-match key: sorted distinct canonical strings per component."""
    strings = set()
    for mol in molecules:
        for component, _ in connected_components(mol):
            strings.add(write_canonical(component))
    return tuple(sorted(strings))


def _written_aromatic(mol: Molecule, i: int) -> bool:
    return mol.is_aromatic(i) and mol.atoms[i].element in _LOWERCASE


def _atom_token(mol: Molecule, i: int, keep_maps: bool) -> str:
    atom = mol.atoms[i]
    aromatic = _written_aromatic(mol, i)
    symbol = _LOWERCASE[atom.element] if aromatic else atom.element
    map_num = atom.map_num if keep_maps else None

    # Bare organic atoms re-parse with hydrogens computed as if none were written
    bare_h = implicit_hydrogens(atom.element, valence_used(mol, i, h_count=0))
    if atom.charge == 0 and map_num is None and atom.element in ORGANIC_SUBSET and atom.h_count == bare_h:
        return symbol

    token = '[' + symbol
    if atom.h_count:
        token += 'H' + (str(atom.h_count) if atom.h_count > 1 else '')
    if atom.charge:
        sign = '+' if atom.charge > 0 else '-'
        token += sign + (str(abs(atom.charge)) if abs(atom.charge) > 1 else '')
    if map_num is not None:
        token += f':{map_num}'
    return token + ']'


def _bond_token(mol: Molecule, i: int, j: int) -> str:
    bond = mol.bond_type(i, j)
    both_lower = _written_aromatic(mol, i) and _written_aromatic(mol, j)
    if bond == BondType.SINGLE:
        return '-' if both_lower else ''
    if bond == BondType.DOUBLE:
        return '='
    if bond == BondType.TRIPLE:
        return '#'
    return '' if both_lower else ':'


def _ring_label(label: int) -> str:
    return str(label) if label < 10 else f'%{label:02d}'


def _serialize(mol: Molecule, ranks: List[int], keep_maps: bool) -> str:
    pieces = []
    for component, members in connected_components(mol):
        local_ranks = [ranks[m] for m in members]
        pieces.append(_serialize_component(component, local_ranks, keep_maps))
    return '.'.join(sorted(pieces))


def _serialize_component(mol: Molecule, ranks: List[int], keep_maps: bool) -> str:
    n = mol.num_atoms
    by_rank = [sorted(mol.neighbors(i), key=lambda nb: ranks[nb[0]]) for i in range(n)]
    start = min(range(n), key=lambda i: ranks[i])

    # Pass 1: DFS tree, preorder and ring-closure partners
    order: Dict[int, int] = {}
    children: Dict[int, List[int]] = {i: [] for i in range(n)}
    closures: Dict[int, List[int]] = {i: [] for i in range(n)}
    seen_pairs = set()
    stack = [(start, -1, iter(by_rank[start]))]
    order[start] = 0
    while stack:
        u, parent, neighbors = stack[-1]
        advanced = False
        for v, _ in neighbors:
            if v == parent:
                continue
            if v in order:
                pair = (min(u, v), max(u, v))
                if pair not in seen_pairs:
                    seen_pairs.add(pair)
                    closures[u].append(v)
                    closures[v].append(u)
                continue
            order[v] = len(order)
            children[u].append(v)
            stack.append((v, u, iter(by_rank[v])))
            advanced = True
            break
        if not advanced:
            stack.pop()

    # Pass 2: emit tokens with ring labels allocated in output order
    open_labels: Dict[Tuple[int, int], int] = {}
    free_labels: List[int] = []
    next_label = [1]
    out: List[str] = []

    def take_label() -> int:
        if free_labels:
            free_labels.sort()
            return free_labels.pop(0)
        label = next_label[0]
        next_label[0] += 1
        return label

    def emit(u: int):
        out.append(_atom_token(mol, u, keep_maps))
        closing = sorted((v for v in closures[u] if order[v] < order[u]),
                         key=lambda v: open_labels[(v, u)])
        opening = sorted((v for v in closures[u] if order[v] > order[u]), key=lambda v: order[v])
        for v in closing:
            label = open_labels.pop((v, u))
            out.append(_ring_label(label))
            free_labels.append(label)
        for v in opening:
            label = take_label()
            open_labels[(u, v)] = label
            out.append(_bond_token(mol, u, v) + _ring_label(label))
        kids = children[u]
        for k, child in enumerate(kids):
            last = k == len(kids) - 1
            if not last:
                out.append('(')
            out.append(_bond_token(mol, u, child))
            emit(child)
            if not last:
                out.append(')')

    emit(start)
    return ''.join(out)

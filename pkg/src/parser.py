"""SMILES Parser Module for the Retrosynthesis Engine.

Parses the SMILES subset documented in docs/smiles_grammar.md into
Molecule values, and atom-mapped reaction lines into Reaction values.
"""

import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from src.molgraph import (
    AROMATIC_SYMBOLS,
    MAX_VALENCE,
    NUM_CLASSES,
    ORGANIC_SUBSET,
    AtomRecord,
    BondType,
    Molecule,
    MoleculeError,
    Reaction,
    ReactionError,
    connected_components,
    implicit_hydrogens,
    valence_ok,
    valence_used,
)

BOND_SYMBOLS = {'-': BondType.SINGLE, '=': BondType.DOUBLE, '#': BondType.TRIPLE, ':': BondType.AROMATIC}

BRACKET_PATTERN = re.compile(
    r'^(?P<symbol>[A-Z][a-z]?|[bcnops])'
    r'(?P<h>H(?P<hcount>\d)?)?'
    r'(?P<charge>\+\+|--|[+-]\d?)?'
    r'(?::(?P<map>\d+))?$'
)


class ParseError(ValueError):
    """SMILES or reaction-line error carrying the offending position."""

    def __init__(self, message: str, position: int, text: str = ''):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}" + (f" in {text!r}" if text else ''))


@dataclass
class _PendingAtom:
    record: AtomRecord
    aromatic: bool
    bracket: bool
    position: int


@dataclass
class _RingOpen:
    atom: int
    bond: Optional[BondType]
    position: int


def parse_bracket_atom(body: str, position: int, text: str = '') -> Tuple[AtomRecord, bool]:
    """
    Parse the inside of a bracket atom like 'CH3:1', 'nH', 'O-' or 'NH4+'.

    Returns:
        Tuple of (atom record, aromatic flag)
    """
    if body and (body[0].isdigit() or '@' in body):
        raise ParseError(f"Isotopes and chirality are not supported: [{body}]", position, text)
    match = BRACKET_PATTERN.match(body)
    if not match:
        raise ParseError(f"Malformed bracket atom [{body}]", position, text)

    symbol = match.group('symbol')
    aromatic = symbol in AROMATIC_SYMBOLS
    element = AROMATIC_SYMBOLS.get(symbol, symbol)
    if element not in MAX_VALENCE:
        raise ParseError(f"Unknown element {symbol}", position, text)

    h_count = 0
    if match.group('h'):
        h_count = int(match.group('hcount') or 1)

    charge_text = match.group('charge') or ''
    if charge_text in ('++', '--'):
        charge = 2 if charge_text == '++' else -2
    elif charge_text:
        magnitude = int(charge_text[1:] or 1)
        charge = magnitude if charge_text[0] == '+' else -magnitude
    else:
        charge = 0

    map_num = int(match.group('map')) if match.group('map') else None
    try:
        return AtomRecord(element, charge, h_count, map_num), aromatic
    except MoleculeError as e:
        raise ParseError(str(e), position, text) from None


def parse_smiles(text: str) -> Molecule:
    """
    Parse a SMILES string from the supported subset.

    Atoms are numbered in token order. Organic-subset atoms get implicit
    hydrogens from their default valences; bracket atoms keep the written count.

    Args:
        text: SMILES string

    Returns:
        Molecule satisfying every Molecule invariant

    Raises:
        ParseError: On lexical errors, unclosed rings or branches, unknown
            elements and valence violations; position points into text
    """
    if not text:
        raise ParseError("Empty SMILES", 0, text)

    atoms: List[_PendingAtom] = []
    bonds: List[Tuple[int, int, Optional[BondType], int]] = []
    branches: List[Tuple[Optional[int], int]] = []
    rings: Dict[int, _RingOpen] = {}
    prev: Optional[int] = None
    pending_bond: Optional[Tuple[BondType, int]] = None
    pos = 0

    def attach(atom_index: int):
        nonlocal pending_bond
        if prev is not None:
            bond = pending_bond[0] if pending_bond else None
            bonds.append((prev, atom_index, bond, pending_bond[1] if pending_bond else pos))
        elif pending_bond is not None:
            raise ParseError("Bond symbol without a preceding atom", pending_bond[1], text)
        pending_bond = None

    while pos < len(text):
        char = text[pos]

        if char == '[':
            end = text.find(']', pos)
            if end < 0:
                raise ParseError("Unclosed bracket atom", pos, text)
            record, aromatic = parse_bracket_atom(text[pos + 1:end], pos, text)
            atoms.append(_PendingAtom(record, aromatic, True, pos))
            attach(len(atoms) - 1)
            prev = len(atoms) - 1
            pos = end + 1

        elif char.isalpha():
            two = text[pos:pos + 2]
            if two in ('Cl', 'Br'):
                symbol = two
            elif char in ORGANIC_SUBSET or char in AROMATIC_SYMBOLS:
                symbol = char
            else:
                raise ParseError(f"Unknown element {char}", pos, text)
            element = AROMATIC_SYMBOLS.get(symbol, symbol)
            atoms.append(_PendingAtom(AtomRecord(element), symbol in AROMATIC_SYMBOLS, False, pos))
            attach(len(atoms) - 1)
            prev = len(atoms) - 1
            pos += len(symbol)

        elif char in BOND_SYMBOLS:
            if pending_bond is not None:
                raise ParseError("Two bond symbols in a row", pos, text)
            pending_bond = (BOND_SYMBOLS[char], pos)
            pos += 1

        elif char.isdigit() or char == '%':
            if char == '%':
                digits = text[pos + 1:pos + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise ParseError("Ring label % needs two digits", pos, text)
                label, width = int(digits), 3
            else:
                label, width = int(char), 1
            if prev is None:
                raise ParseError("Ring label without a preceding atom", pos, text)
            bond = pending_bond[0] if pending_bond else None
            pending_bond = None
            if label in rings:
                opened = rings.pop(label)
                if opened.atom == prev:
                    raise ParseError(f"Ring {label} closes on its own atom", pos, text)
                if bond is not None and opened.bond is not None and bond != opened.bond:
                    raise ParseError(f"Conflicting bond symbols on ring {label}", pos, text)
                bonds.append((opened.atom, prev, bond if bond is not None else opened.bond, pos))
            else:
                rings[label] = _RingOpen(prev, bond, pos)
            pos += width

        elif char == '(':
            if prev is None:
                raise ParseError("Branch without a preceding atom", pos, text)
            branches.append((prev, pos))
            pos += 1

        elif char == ')':
            if not branches:
                raise ParseError("Unmatched closing parenthesis", pos, text)
            if pending_bond is not None:
                raise ParseError("Dangling bond symbol", pending_bond[1], text)
            prev = branches.pop()[0]
            pos += 1

        elif char == '.':
            if pending_bond is not None:
                raise ParseError("Dangling bond symbol", pending_bond[1], text)
            if branches:
                raise ParseError("Component separator inside a branch", pos, text)
            prev = None
            pos += 1

        else:
            raise ParseError(f"Unexpected character {char!r}", pos, text)

    if pending_bond is not None:
        raise ParseError("Dangling bond symbol", pending_bond[1], text)
    if branches:
        raise ParseError("Unclosed branch", branches[-1][1], text)
    if rings:
        first = min(rings.values(), key=lambda r: r.position)
        raise ParseError("Unclosed ring bond", first.position, text)

    return _assemble(atoms, bonds, text)


def _assemble(atoms: List[_PendingAtom], bonds, text: str) -> Molecule:
    resolved = []
    for i, j, bond, position in bonds:
        if bond is None:
            bond = BondType.AROMATIC if atoms[i].aromatic and atoms[j].aromatic else BondType.SINGLE
        resolved.append((i, j, bond, position))

    try:
        mol = Molecule.from_bonds([a.record for a in atoms], [(i, j, b) for i, j, b, _ in resolved])
    except MoleculeError as e:
        position = resolved[-1][3] if resolved else 0
        raise ParseError(str(e), position, text) from None

    filled = []
    for idx, pending in enumerate(atoms):
        record = pending.record
        if not pending.bracket:
            used = valence_used(mol, idx)
            record = record.with_h(implicit_hydrogens(record.element, used))
        filled.append(record)
    mol = mol.replace_atoms(filled)

    check = valence_ok(mol)
    if not check.ok:
        bad = check.violations[0]
        raise ParseError(f"Valence violation on atom {bad} ({mol.atoms[bad].element})",
                         atoms[bad].position, text)
    return mol


def split_molecules(text: str) -> List[Molecule]:
    """Parse a dot-separated side into one Molecule per connected component."""
    return [component for component, _ in connected_components(parse_smiles(text))]


def parse_reaction_smiles(text: str, class_id: Optional[int] = None) -> Reaction:
    """
    Parse 'reactants>>product' (or 'reactants>agents>product') into a Reaction.

    Reactant components that share no map number with the product are kept
    as reagents, not reactants.

    Raises:
        ParseError: On malformed SMILES or arrow structure
        ReactionError: If the mapping rules are broken or there are several products
    """
    parts = text.strip().split('>')
    if len(parts) != 3:
        raise ParseError("Expected 'reactants>>product'", 0, text)
    reactant_text, _, product_text = parts
    if not reactant_text or not product_text:
        raise ParseError("Empty reaction side", 0, text)

    products = split_molecules(product_text)
    if len(products) != 1:
        raise ReactionError(f"Expected a single product, found {len(products)}")
    product = products[0]

    product_maps = set(product.map_index())
    reactants, reagents = [], []
    for molecule in split_molecules(reactant_text):
        if product_maps & set(molecule.map_index()):
            reactants.append(molecule)
        else:
            reagents.append(molecule)

    reaction = Reaction(tuple(reactants), product, class_id, tuple(reagents))
    reaction.validate()
    return reaction


def parse_reaction_line(line: str) -> Optional[Reaction]:
    """
    Parse one line of a reaction file.

    Format: '<reactants>>><product>' TAB '<class id>' where class 0 means
    unknown. Blank lines and lines starting with '#' yield None.

    Raises:
        ParseError: If the line shape or class id is malformed
        ReactionError: If the reaction breaks the mapping rules
    """
    line = line.rstrip('\r\n')
    if not line.strip() or line.lstrip().startswith('#'):
        return None

    fields = line.split('\t')
    if len(fields) != 2:
        raise ParseError(f"Expected 2 tab-separated fields, got {len(fields)}", 0, line)
    rxn_text, class_text = fields[0].strip(), fields[1].strip()
    if not class_text.isdigit():
        raise ParseError(f"Invalid class id {class_text!r}", len(fields[0]) + 1, line)
    class_id = int(class_text)
    if class_id > NUM_CLASSES:
        raise ParseError(f"Class id {class_id} outside 0..{NUM_CLASSES}", len(fields[0]) + 1, line)
    return parse_reaction_smiles(rxn_text, class_id or None)

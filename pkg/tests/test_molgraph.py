"""Tests for molecule graphs, valence rules and reactions."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.molgraph import (
    NUM_BOND_TYPES,
    AtomRecord,
    AtomVocabulary,
    BondError,
    BondType,
    Molecule,
    MoleculeError,
    Reaction,
    ReactionError,
    connected_components,
    implicit_hydrogens,
    remove_bonds,
    valence_ok,
    valence_used,
)
from src.canonical import write_canonical
from src.parser import parse_smiles


class TestMolecule:
    def test_asymmetric_adjacency_rejected(self):
        adjacency = np.zeros((2, 2, NUM_BOND_TYPES), dtype=np.int8)
        adjacency[0, 1, 0] = 1
        with pytest.raises(MoleculeError):
            Molecule([AtomRecord('C'), AtomRecord('C')], adjacency)

    def test_self_bond_rejected(self):
        with pytest.raises(MoleculeError):
            Molecule.from_bonds([AtomRecord('C')], [(0, 0, 0)])

    def test_duplicate_maps_rejected(self):
        with pytest.raises(MoleculeError):
            Molecule.from_bonds([AtomRecord('C', map_num=1), AtomRecord('O', map_num=1)], [])

    def test_atom_record_ranges(self):
        with pytest.raises(MoleculeError):
            AtomRecord('C', charge=3)
        with pytest.raises(MoleculeError):
            AtomRecord('C', h_count=5)
        with pytest.raises(MoleculeError):
            AtomRecord('C', map_num=0)

    def test_add_bond_twice(self):
        mol = parse_smiles('CC')
        with pytest.raises(BondError):
            mol.add_bond(0, 1, BondType.SINGLE)

    def test_add_bond_consumes_hydrogens(self):
        mol = Molecule.from_bonds([AtomRecord('C', h_count=4), AtomRecord('O', h_count=2)], [])
        bonded = mol.add_bond(0, 1, BondType.SINGLE, consume_hydrogens=True)
        assert [a.h_count for a in bonded.atoms] == [3, 1]

    def test_double_bond_consumes_two(self):
        mol = Molecule.from_bonds([AtomRecord('C', h_count=4), AtomRecord('O', h_count=2)], [])
        bonded = mol.add_bond(0, 1, BondType.DOUBLE, consume_hydrogens=True)
        assert [a.h_count for a in bonded.atoms] == [2, 0]

    def test_adjacency_is_read_only(self):
        mol = parse_smiles('CC')
        with pytest.raises(ValueError):
            mol.adjacency[0, 1, 0] = 0

    def test_strip_maps(self):
        mol = parse_smiles('[CH3:1][OH:2]').strip_maps()
        assert mol.map_index() == {}

    @given(st.permutations(range(5)))
    def test_relabel_keeps_bonds(self, order):
        mol = parse_smiles('CC(=O)NC')
        moved = mol.relabel(order)
        inverse = {old: new for new, old in enumerate(order)}
        moved_bonds = {(min(inverse[i], inverse[j]), max(inverse[i], inverse[j]), b) for i, j, b in mol.bonds()}
        assert set(moved.bonds()) == moved_bonds


class TestValence:
    def test_benzene_carbon(self):
        assert valence_used(parse_smiles('c1ccccc1'), 0) == 3

    def test_pyridine_nitrogen_gets_extra_unit(self):
        mol = parse_smiles('c1ccncc1')
        assert valence_used(mol, 3) == 3

    def test_pyrrole_nitrogen_has_no_extra_unit(self):
        mol = parse_smiles('c1cc[nH]c1')
        assert valence_used(mol, 3) == 2

    def test_furan_oxygen(self):
        mol = parse_smiles('c1ccoc1')
        assert valence_used(mol, 3) == 2

    def test_overfull_carbon(self):
        mol = Molecule.from_bonds([AtomRecord('C', h_count=4), AtomRecord('C', h_count=3)], [(0, 1, 0)])
        check = valence_ok(mol)
        assert not check.ok
        assert check.violations == [0]

    def test_charged_nitrogen_capacity(self):
        assert valence_ok(parse_smiles('C[N+](C)(C)C')).ok

    @pytest.mark.parametrize('element, used, expected', [
        ('C', 2, 2), ('N', 3, 0), ('N', 4, 1), ('S', 3, 1), ('O', 3, 0), ('Cl', 1, 0),
    ])
    def test_implicit_hydrogens(self, element, used, expected):
        assert implicit_hydrogens(element, used) == expected


class TestSurgery:
    def test_remove_and_split(self):
        mol = parse_smiles('CCOC')
        pieces = connected_components(remove_bonds(mol, [(1, 2)]))
        assert [members for _, members in pieces] == [(0, 1), (2, 3)]
        assert [piece.num_atoms for piece, _ in pieces] == [2, 2]

    def test_remove_missing_bond(self):
        with pytest.raises(BondError):
            remove_bonds(parse_smiles('CCO'), [(0, 2)])

    def test_records_unchanged_by_removal(self):
        mol = parse_smiles('CCO')
        assert remove_bonds(mol, [(0, 1)]).atoms == mol.atoms

    def test_readding_removed_bonds_restores_molecule(self):
        mol = parse_smiles('CC(=O)Nc1ccccc1')
        pairs = [(1, 2), (3, 4), (4, 9), (6, 7)]
        types = [mol.bond_type(i, j) for i, j in pairs]
        stripped = remove_bonds(mol, pairs)
        assert write_canonical(stripped) != write_canonical(mol)
        restored = stripped
        for (i, j), bond in zip(pairs, types):
            restored = restored.add_bond(i, j, int(bond))
        assert np.array_equal(restored.adjacency, mol.adjacency)
        assert write_canonical(restored) == write_canonical(mol)

    def test_component_index_maps_round_trip(self):
        mol = parse_smiles('CCO.N.c1ccccc1.[Na+]')
        mol = mol.relabel(np.random.default_rng(0).permutation(mol.num_atoms))
        pieces = connected_components(mol)
        local = {}
        for c, (piece, members) in enumerate(pieces):
            for k, parent in enumerate(members):
                local[parent] = (c, k)
        assert sorted(local) == list(range(mol.num_atoms))
        for parent, (c, k) in local.items():
            piece, members = pieces[c]
            assert members[k] == parent
            assert piece.atoms[k] == mol.atoms[parent]
        for piece, members in pieces:
            for a in range(piece.num_atoms):
                for b in range(piece.num_atoms):
                    assert piece.bond_type(a, b) == mol.bond_type(members[a], members[b])
        assert sum(int(p.adjacency.sum()) for p, _ in pieces) == int(mol.adjacency.sum())


class TestReaction:
    def _reaction(self, product: str) -> Reaction:
        reactants = (parse_smiles('[CH3:1]Cl'), parse_smiles('[OH2:2]'))
        return Reaction(reactants, parse_smiles(product))

    def test_valid(self):
        self._reaction('[CH3:1][OH:2]').validate()

    def test_unmapped_product_atom(self):
        with pytest.raises(ReactionError):
            self._reaction('[CH3:1]O').validate()

    def test_map_in_two_reactants(self):
        rxn = Reaction((parse_smiles('[CH3:1]Cl'), parse_smiles('[OH:1]C')), parse_smiles('[CH4:1]'))
        with pytest.raises(ReactionError):
            rxn.validate()

    def test_class_range(self):
        rxn = Reaction((parse_smiles('[CH4:1]'),), parse_smiles('[CH4:1]'), class_id=11)
        with pytest.raises(ReactionError):
            rxn.validate()

    def test_reactant_of(self):
        assert self._reaction('[CH3:1][OH:2]').reactant_of(2) == (1, 0)


class TestAtomVocabulary:
    def test_featurize_one_hot_blocks(self):
        mol = parse_smiles('C[O-]')
        vocab = AtomVocabulary.from_molecules([mol])
        features = vocab.featurize(mol)
        assert features.shape == (2, vocab.width)
        assert np.array_equal(features.sum(axis=1), [3.0, 3.0])
        assert vocab.elements == ('C', 'O')

    def test_unknown_element(self):
        vocab = AtomVocabulary(('C',))
        with pytest.raises(MoleculeError):
            vocab.featurize(parse_smiles('O'))

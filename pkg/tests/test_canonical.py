"""Tests for canonical ranks and canonical SMILES."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.canonical import canonical_order, canonical_ranks, reactant_set, write_canonical
from src.parser import parse_reaction_line, parse_smiles
from tests.conftest import load_reactions

CORPUS_MOLECULES = [m for rxn in load_reactions() for m in (rxn.product, *rxn.reactants)]
RELABELINGS = 20


def _corpus_molecules(path):
    molecules = []
    for line in path.read_text(encoding='utf-8').splitlines():
        rxn = parse_reaction_line(line)
        if rxn is not None:
            molecules.append(rxn.product)
            molecules.extend(rxn.reactants)
    return molecules


class TestWriteCanonical:
    @pytest.mark.parametrize('a, b', [
        ('CCO', 'OCC'),
        ('CC(=O)NC', 'CNC(C)=O'),
        ('c1ccccc1C', 'Cc1ccccc1'),
        ('OC(=O)C=C', 'C=CC(O)=O'),
    ])
    def test_same_molecule_same_string(self, a, b):
        assert write_canonical(parse_smiles(a)) == write_canonical(parse_smiles(b))

    def test_different_molecules_differ(self):
        assert write_canonical(parse_smiles('CCO')) != write_canonical(parse_smiles('COC'))

    def test_benzene(self):
        assert write_canonical(parse_smiles('c1ccccc1')) == 'c1ccccc1'

    def test_maps_dropped_by_default(self):
        mol = parse_smiles('[CH3:1][OH:2]')
        assert ':' not in write_canonical(mol)
        assert ':1' in write_canonical(mol, keep_maps=True)

    def test_components_sorted(self):
        assert write_canonical(parse_smiles('O.CC')) == write_canonical(parse_smiles('CC.O'))

    def test_round_trip_over_corpus(self, desk_corpus):
        for mol in _corpus_molecules(desk_corpus):
            text = write_canonical(mol)
            assert write_canonical(parse_smiles(text)) == text

    def test_round_trip_keeps_hydrogens_and_charges(self):
        for text in ('[NH4+]', 'C[O-]', '[CH2]', 'c1cc[nH]c1', 'C[N+](C)(C)C'):
            mol = parse_smiles(text)
            again = parse_smiles(write_canonical(mol))
            assert sorted((a.element, a.charge, a.h_count) for a in again.atoms) == \
                sorted((a.element, a.charge, a.h_count) for a in mol.atoms)

    @settings(max_examples=200, deadline=None)
    @given(st.sampled_from(['CC(=O)NC', 'COc1ccc(C)cc1', 'CC(C)COC', 'OCCNC(C)=O', 'C=CCN(C)C']),
           st.randoms(use_true_random=False))
    def test_permutation_invariance(self, text, random):
        mol = parse_smiles(text)
        order = list(range(mol.num_atoms))
        random.shuffle(order)
        assert write_canonical(mol.relabel(order)) == write_canonical(mol)

    @pytest.mark.parametrize('index', range(len(CORPUS_MOLECULES)))
    def test_corpus_molecule_under_relabeling(self, index):
        mol = CORPUS_MOLECULES[index]
        rng = np.random.default_rng(index)
        expected = write_canonical(mol)
        mapped = write_canonical(mol, keep_maps=True)
        for _ in range(RELABELINGS):
            moved = mol.relabel(rng.permutation(mol.num_atoms))
            assert write_canonical(moved) == expected
            assert write_canonical(moved, keep_maps=True) == mapped

    @pytest.mark.parametrize('text', [
        'FC(F)(F)C(C(F)(F)F)(C(F)(F)F)C(F)(F)F',
        'CC(C)(C)c1cc(C(C)(C)C)cc(C(C)(C)C)c1',
        'C12C3C4C1C5C2C3C45',
    ])
    def test_highly_symmetric_molecules(self, text):
        mol = parse_smiles(text)
        expected = write_canonical(mol)
        assert write_canonical(parse_smiles(expected)) == expected
        rng = np.random.default_rng(4)
        for _ in range(RELABELINGS):
            assert write_canonical(mol.relabel(rng.permutation(mol.num_atoms))) == expected


class TestRanks:
    def test_ranks_are_permutation(self):
        mol = parse_smiles('CC(C)COC')
        assert sorted(canonical_ranks(mol)) == list(range(mol.num_atoms))

    def test_relabel_by_ranks_is_order_free(self):
        mol = parse_smiles('OCCNC(C)=O')
        moved = mol.relabel([3, 0, 6, 2, 5, 1, 4])
        a = mol.relabel(canonical_order(mol))
        b = moved.relabel(canonical_order(moved))
        assert np.array_equal(a.adjacency, b.adjacency)
        assert a.atoms == b.atoms

    def test_empty(self):
        assert canonical_ranks(parse_smiles('C').subgraph([])) == []


class TestReactantSet:
    def test_sorted_and_distinct(self):
        key = reactant_set([parse_smiles('O'), parse_smiles('CC'), parse_smiles('O')])
        assert key == tuple(sorted({'O', 'CC'}))

    def test_order_insensitive(self):
        a = reactant_set([parse_smiles('CC(=O)Cl'), parse_smiles('CN')])
        b = reactant_set([parse_smiles('NC'), parse_smiles('ClC(C)=O')])
        assert a == b

"""Tests for decode states, edit extraction, reactant matching and traces."""

from collections import Counter

import numpy as np
import pytest

from src.canonical import write_canonical
from src.center import split_synthons
from src.edits import (
    DISTINCT_SAMPLE_LIMIT,
    STOP,
    Action,
    EditError,
    NewAtomVocabulary,
    TraceSample,
    apply_action,
    diff_edits,
    enumerate_all_traces,
    enumerate_bfs_traces,
    initial_state,
    match_reactants,
    sample_trace,
)
from src.molgraph import BondError, valence_ok
from src.parser import parse_reaction_smiles, parse_smiles

AMIDE = '[CH3:1][C:2](=[O:3])Cl.[NH2:4][CH3:5]>>[CH3:1][C:2](=[O:3])[NH:4][CH3:5]'


def _canon(text):
    return write_canonical(parse_smiles(text))


def _edits(source_smiles, target_smiles, cut_orders=None):
    source = parse_smiles(source_smiles)
    cuts = cut_orders if cut_orders is not None else [0] * source.num_atoms
    return diff_edits(initial_state(source, cuts), parse_smiles(target_smiles))


@pytest.fixture
def amide():
    rxn = parse_reaction_smiles(AMIDE)
    acyl, amine = split_synthons(rxn.product, [(1, 3)])
    return rxn, acyl, amine


class TestInitialState:
    def test_restores_cut_order_as_hydrogens(self, amide):
        _, acyl, amine = amide
        state = initial_state(acyl.molecule, acyl.cut_orders)
        assert [a.h_count for a in state.molecule.atoms] == [3, 1, 0]
        assert state.attachment == (False, True, False)
        assert valence_ok(state.molecule).ok
        assert [a.h_count for a in initial_state(amine.molecule, amine.cut_orders).molecule.atoms] == [2, 3]

    def test_hydrogen_limit(self):
        with pytest.raises(EditError):
            initial_state(parse_smiles('[CH3]'), [2])


class TestActions:
    def test_stop_carries_nothing(self):
        with pytest.raises(EditError):
            Action(stop=True, first=0)

    def test_continue_needs_all_fields(self):
        with pytest.raises(EditError):
            Action(stop=False, first=0, second=1)

    def test_same_node_twice(self):
        with pytest.raises(EditError):
            Action(False, 1, 1, 0)

    def test_bond_type_range(self):
        with pytest.raises(EditError):
            Action(False, 0, 1, 4)

    def test_str(self):
        assert str(STOP) == 'stop'
        assert str(Action(False, 0, 2, 1)) == 'bond(0, 2, type=1)'


class TestApplyAction:
    vocab = NewAtomVocabulary((('Cl', 0, 1), ('O', 0, 2)))

    def test_new_atom_consumes_hydrogens(self, amide):
        _, acyl, _ = amide
        state = initial_state(acyl.molecule, acyl.cut_orders)
        grown = apply_action(state, Action(False, 1, 3, 0), self.vocab)
        assert grown.num_atoms == 4
        assert grown.attachment == (False, True, False, False)
        assert write_canonical(grown.molecule) == _canon('CC(=O)Cl')

    def test_bond_between_existing_atoms(self):
        state = initial_state(parse_smiles('CCCC'), [0, 0, 0, 0])
        ring = apply_action(state, Action(False, 0, 3, 0), self.vocab)
        assert write_canonical(ring.molecule) == _canon('C1CCC1')

    def test_already_bonded(self):
        state = initial_state(parse_smiles('CC'), [0, 0])
        with pytest.raises(BondError):
            apply_action(state, Action(False, 0, 1, 0), self.vocab)

    def test_slot_out_of_range(self):
        state = initial_state(parse_smiles('CC'), [0, 0])
        with pytest.raises(EditError):
            apply_action(state, Action(False, 0, 4, 0), self.vocab)

    def test_first_must_be_existing(self):
        state = initial_state(parse_smiles('CC'), [0, 0])
        with pytest.raises(EditError):
            apply_action(state, Action(False, 2, 0, 0), self.vocab)

    def test_stop_cannot_be_applied(self):
        state = initial_state(parse_smiles('CC'), [0, 0])
        with pytest.raises(EditError):
            apply_action(state, STOP, self.vocab)


class TestDiffEdits:
    def test_acyl_chloride(self, amide):
        rxn, acyl, _ = amide
        edits = diff_edits(initial_state(acyl.molecule, acyl.cut_orders), rxn.reactants[0])
        assert [(a.element, a.h_count) for a in edits.new_atoms] == [('Cl', 1)]
        assert edits.bonds == ((1, 3, 0),)
        assert edits.is_new(3) and not edits.is_new(2)

    def test_unchanged_synthon_has_no_edits(self, amide):
        rxn, _, amine = amide
        edits = diff_edits(initial_state(amine.molecule, amine.cut_orders), rxn.reactants[1])
        assert len(edits) == 0
        assert edits.new_atoms == ()

    def test_zero_center_ester(self):
        edits = _edits('[CH3:1][C:2](=[O:3])[OH:4]', '[CH3:1][C:2](=[O:3])[O:4]C')
        assert [(a.element, a.h_count) for a in edits.new_atoms] == [('C', 4)]
        assert edits.bonds == ((3, 4, 0),)

    def test_replay_reproduces_reactant_on_corpus(self, desk_reactions):
        from src.center import derive_labels, true_centers
        for rxn in desk_reactions:
            synthons = split_synthons(rxn.product, true_centers(derive_labels(rxn)))
            maps = [[rxn.product.atoms[i].map_num for i in s.parent_index] for s in synthons]
            owners = match_reactants(maps, rxn.reactants)
            for synthon, owner in zip(synthons, owners):
                edits = diff_edits(initial_state(synthon.molecule, synthon.cut_orders), rxn.reactants[owner])
                vocab = NewAtomVocabulary.from_edit_sets([edits])
                final = sample_trace(edits, vocab, np.random.default_rng(0)).final(vocab)
                assert write_canonical(final.molecule) == write_canonical(rxn.reactants[owner])

    def test_missing_map(self):
        with pytest.raises(EditError):
            _edits('[CH3:1][OH:2]', '[CH3:1]Cl')

    def test_retyped_bond(self):
        with pytest.raises(EditError):
            _edits('[CH3:1][CH3:2]', '[CH2:1]=[CH2:2]')

    def test_element_change(self):
        with pytest.raises(EditError):
            _edits('[CH3:1][OH:2]', '[CH3:1][NH2:2]')

    def test_hydrogen_removal_is_not_an_edit(self):
        with pytest.raises(EditError):
            _edits('[CH3:1][OH:2]', '[CH3:1][O:2]')

    def test_unmapped_synthon_atom(self):
        with pytest.raises(EditError):
            _edits('[CH3:1]O', '[CH3:1]OC')


class TestMatchReactants:
    def test_assigns_each_synthon(self, amide):
        rxn, _, _ = amide
        assert match_reactants([[4, 5], [1, 2, 3]], rxn.reactants) == [1, 0]

    def test_synthon_spanning_reactants(self, amide):
        rxn, _, _ = amide
        with pytest.raises(EditError):
            match_reactants([[2, 4]], rxn.reactants)

    def test_two_synthons_one_reactant(self, amide):
        rxn, _, _ = amide
        with pytest.raises(EditError):
            match_reactants([[1], [2]], rxn.reactants)

    def test_unknown_map(self, amide):
        rxn, _, _ = amide
        with pytest.raises(EditError):
            match_reactants([[99]], rxn.reactants)


class TestTraces:
    def test_trace_must_end_with_stop(self):
        state = initial_state(parse_smiles('C'), [0])
        with pytest.raises(EditError):
            TraceSample(state, (Action(False, 0, 1, 0),))
        with pytest.raises(EditError):
            TraceSample(state, (STOP, STOP))

    def test_empty_edits_give_stop(self):
        edits = _edits('[CH3:1][OH:2]', '[CH3:1][OH:2]')
        vocab = NewAtomVocabulary.from_edit_sets([edits])
        assert sample_trace(edits, vocab, np.random.default_rng(0)).actions == (STOP,)
        assert [t.actions for t in enumerate_bfs_traces(edits, vocab)] == [(STOP,)]
        assert [t.actions for t in enumerate_all_traces(edits, vocab)] == [(STOP,)]

    def test_branching_new_atom(self):
        edits = _edits('[CH3:1][OH:2]', '[CH3:1][O:2]C(C)N')
        vocab = NewAtomVocabulary.from_edit_sets([edits])
        assert vocab.entries == (('C', 0, 4), ('N', 0, 3))
        bfs = enumerate_bfs_traces(edits, vocab)
        assert [t.actions[0] for t in bfs] == [Action(False, 1, 2, 0)] * 2
        assert {t.actions[1:] for t in bfs} == {
            (Action(False, 2, 3, 0), Action(False, 2, 5, 0), STOP),
            (Action(False, 2, 4, 0), Action(False, 2, 4, 0), STOP),
        }

    def test_all_traces_include_interleavings(self):
        edits = _edits('[NH2:1][CH2:2][OH:3]', '[NH:1](CC)[CH2:2][O:3]C')
        vocab = NewAtomVocabulary.from_edit_sets([edits])
        bfs = {t.actions for t in enumerate_bfs_traces(edits, vocab)}
        every = {t.actions for t in enumerate_all_traces(edits, vocab)}
        assert len(bfs) == 2
        assert len(every) == 3
        assert bfs < every

    def test_every_trace_reaches_the_reactant(self):
        target = parse_smiles('[NH:1](CC)[CH2:2][O:3]C')
        edits = _edits('[NH2:1][CH2:2][OH:3]', '[NH:1](CC)[CH2:2][O:3]C')
        vocab = NewAtomVocabulary.from_edit_sets([edits])
        for trace in enumerate_all_traces(edits, vocab):
            states = list(trace.states(vocab))
            assert len(states) == len(trace)
            assert write_canonical(trace.final(vocab).molecule) == write_canonical(target)

    def test_sampled_trace_is_breadth_first(self):
        edits = _edits('[NH2:1][CH2:2][OH:3]', '[NH:1](CC)[CH2:2][O:3]C')
        vocab = NewAtomVocabulary.from_edit_sets([edits])
        bfs = {t.actions for t in enumerate_bfs_traces(edits, vocab)}
        rng = np.random.default_rng(7)
        drawn = {sample_trace(edits, vocab, rng).actions for _ in range(40)}
        assert drawn == bfs

    @pytest.mark.parametrize('limit', [DISTINCT_SAMPLE_LIMIT, 0])
    def test_breadth_first_traces_drawn_uniformly(self, limit):
        # seed 0 carries three pending bonds, seed 1 only one
        edits = _edits('[CH4:1].[CH4:2]', 'Cl[CH:1](Br)[CH3:2]')
        vocab = NewAtomVocabulary.from_edit_sets([edits])
        universe = [t.actions for t in enumerate_bfs_traces(edits, vocab)]
        assert len(universe) == 8
        rng = np.random.default_rng(11)
        draws = 4000
        counts = Counter(sample_trace(edits, vocab, rng, limit=limit).actions for _ in range(draws))
        assert set(counts) == set(universe)
        expected = draws / len(universe)
        chi_square = sum((counts[t] - expected) ** 2 / expected for t in universe)
        # 0.001 critical value at 7 degrees of freedom
        assert chi_square < 24.32

    def test_vocabulary_lookup(self):
        vocab = NewAtomVocabulary((('Cl', 0, 1),))
        assert vocab.atom(0).element == 'Cl'
        with pytest.raises(EditError):
            vocab.index(parse_smiles('Br').atoms[0])

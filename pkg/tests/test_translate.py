"""Tests for the synthon translation policy, its marginals and the ELBO."""

import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.center import ClassConditioningError
from src.edits import (
    Action,
    NewAtomVocabulary,
    STOP,
    TraceSample,
    diff_edits,
    enumerate_bfs_traces,
    initial_state,
)
from src.molgraph import AtomVocabulary
from src.parser import parse_smiles
from src.translate import (
    LOGVAR_BOUND,
    TraceTooLargeError,
    TranslateParams,
    TranslationPair,
    bfs_marginal_logprob_exact,
    elbo_gradients,
    elbo_loss,
    elbo_on_tape,
    estimate_marginal_logprob,
    kl_to_standard_normal,
    marginal_logprob_exact,
    posterior,
    reparameterize,
    step_distributions,
    step_log_table,
    trace_logprob,
    train_translate,
)
from src.numcore import Tape
from tests.conftest import assert_gradients_close, numeric_gradient

SOURCE = '[NH2:1][CH2:2][OH:3]'
TARGET = '[NH:1](CC)[CH2:2][O:3]C'


def _pair(source=SOURCE, target=TARGET, class_id=None):
    target_mol = parse_smiles(target)
    source_mol = parse_smiles(source)
    edits = diff_edits(initial_state(source_mol, [0] * source_mol.num_atoms), target_mol)
    return TranslationPair(edits=edits, target=target_mol, class_id=class_id)


def _spec(pairs, width=4, latent=3, hidden=5, class_width=0):
    atom_vocab = AtomVocabulary.from_molecules(
        m for p in pairs for m in (p.target, p.edits.source.molecule)
    )
    vocab = NewAtomVocabulary.from_edit_sets(p.edits for p in pairs)
    return TranslateParams.build(atom_vocab, vocab, width=width, layers=2, latent=latent,
                                 hidden=hidden, class_width=class_width)


@pytest.fixture
def model():
    pair = _pair()
    spec = _spec([pair])
    params = spec.init(np.random.default_rng(0))
    z = np.random.default_rng(1).standard_normal(spec.latent)
    return pair, spec, params, z


class TestStepDistributions:
    def test_normalized_and_masked(self, model):
        pair, spec, params, z = model
        state = pair.edits.source
        n, ext = state.num_atoms, state.num_atoms + spec.vocab.size
        dist = step_distributions(state, z, params, spec)
        assert dist.stop.sum() == pytest.approx(1.0)
        assert dist.first.shape == (ext,)
        assert dist.first.sum() == pytest.approx(1.0)
        assert np.all(dist.first[n:] == 0)
        for i in range(n):
            assert dist.second[i, i] == 0
            assert dist.second[i].sum() == pytest.approx(1.0)
            assert np.allclose(dist.bond[i].sum(axis=1), 1.0)

    def test_class_conditioning_mismatch(self, model):
        pair, spec, params, z = model
        with pytest.raises(ClassConditioningError):
            step_log_table(pair.edits.source, z, params, spec, class_id=1)

    def test_class_conditioned_model_requires_class(self):
        pair = _pair(class_id=3)
        spec = _spec([pair], class_width=2)
        params = spec.init(np.random.default_rng(0))
        z = np.zeros(spec.latent)
        with pytest.raises(ClassConditioningError):
            step_log_table(pair.edits.source, z, params, spec)
        table = step_log_table(pair.edits.source, z, params, spec, class_id=3)
        assert np.exp(table.stop).sum() == pytest.approx(1.0)

    def test_elbo_of_unclassified_pair_under_class_conditioning(self):
        spec = _spec([_pair(class_id=3)], class_width=2)
        params = spec.init(np.random.default_rng(0))
        with pytest.raises(ClassConditioningError):
            elbo_loss(_pair(), params, spec, np.random.default_rng(0))


class TestTraceLikelihood:
    def test_matches_step_tables(self, model):
        pair, spec, params, z = model
        trace = enumerate_bfs_traces(pair.edits, spec.vocab)[0]
        expected = sum(
            step_log_table(state, z, params, spec).action_logprob(action)
            for state, action in zip(trace.states(spec.vocab), trace.actions)
        )
        assert trace_logprob(trace, z, params, spec) == pytest.approx(expected)

    def test_trace_probability_at_most_one(self, model):
        pair, spec, params, z = model
        for trace in enumerate_bfs_traces(pair.edits, spec.vocab):
            assert trace_logprob(trace, z, params, spec) < 0.0

    def test_illegal_action_is_impossible(self, model):
        pair, spec, params, z = model
        trace = TraceSample(pair.edits.source, (Action(False, 0, 1, 0), STOP))
        assert trace_logprob(trace, z, params, spec) == -math.inf


class TestMarginals:
    def test_exact_marginal_bounds(self, model):
        pair, spec, params, z = model
        bfs = enumerate_bfs_traces(pair.edits, spec.vocab)
        logprobs = [trace_logprob(t, z, params, spec) for t in bfs]
        bfs_marginal = bfs_marginal_logprob_exact(pair.edits, z, params, spec)
        exact = marginal_logprob_exact(pair.edits, z, params, spec)
        assert bfs_marginal == pytest.approx(math.log(sum(math.exp(lp) for lp in logprobs)))
        assert max(logprobs) <= bfs_marginal <= exact + 1e-12
        assert np.mean(logprobs) + math.log(len(bfs)) <= bfs_marginal + 1e-12
        assert exact < 0.0

    def test_monte_carlo_estimate_converges(self, model):
        pair, spec, params, z = model
        exact = bfs_marginal_logprob_exact(pair.edits, z, params, spec)
        estimate = estimate_marginal_logprob(pair.edits, z, params, spec, np.random.default_rng(3), samples=4000)
        assert abs(estimate - exact) < 0.1

    def test_single_trace_estimate_is_exact(self):
        pair = _pair('[CH3:1][OH:2]', '[CH3:1][O:2]C')
        spec = _spec([pair])
        params = spec.init(np.random.default_rng(0))
        z = np.zeros(spec.latent)
        exact = marginal_logprob_exact(pair.edits, z, params, spec)
        estimate = estimate_marginal_logprob(pair.edits, z, params, spec, np.random.default_rng(0), samples=3)
        assert estimate == pytest.approx(exact)

    def test_too_many_edits(self):
        pair = _pair('[CH4:1]', '[CH3:1]CCCCCCC')
        assert len(pair.edits) == 7
        spec = _spec([pair])
        params = spec.init(np.random.default_rng(0))
        with pytest.raises(TraceTooLargeError):
            marginal_logprob_exact(pair.edits, np.zeros(spec.latent), params, spec)
        with pytest.raises(TraceTooLargeError):
            bfs_marginal_logprob_exact(pair.edits, np.zeros(spec.latent), params, spec)


class TestLatent:
    def test_kl_hand_values(self):
        assert kl_to_standard_normal(np.zeros(3), np.zeros(3)) == 0.0
        assert kl_to_standard_normal([1.0], [0.0]) == pytest.approx(0.5)
        assert kl_to_standard_normal([0.0], [math.log(2.0)]) == pytest.approx(0.5 * (1.0 - math.log(2.0)))

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=6))
    def test_kl_non_negative(self, pairs):
        mu, logvar = zip(*pairs)
        assert kl_to_standard_normal(mu, logvar) >= -1e-12

    def test_reparameterize(self):
        mu = np.array([1.0, -2.0])
        assert np.allclose(reparameterize(mu, np.full(2, -40.0), np.random.default_rng(0)), mu)
        first = reparameterize(mu, np.zeros(2), np.random.default_rng(5))
        second = reparameterize(mu, np.zeros(2), np.random.default_rng(5))
        assert np.array_equal(first, second)
        assert np.allclose(first - mu, np.random.default_rng(5).standard_normal(2))

    def test_posterior_logvar_is_clamped(self, model):
        pair, spec, params, _ = model
        big = {name: value * 1000.0 for name, value in params.items()}
        mu, logvar = posterior(pair.target, pair.edits.source, big, spec)
        assert mu.shape == logvar.shape == (spec.latent,)
        assert np.all(np.abs(logvar) <= LOGVAR_BOUND)


class TestElbo:
    def test_loss_is_nll_plus_kl(self, model):
        pair, spec, params, _ = model
        trace = enumerate_bfs_traces(pair.edits, spec.vocab)[0]
        eps = np.random.default_rng(2).standard_normal(spec.latent)
        loss, kl, _ = elbo_gradients(pair, params, spec, [trace], [eps])
        mu, logvar = posterior(pair.target, pair.edits.source, params, spec)
        z = mu + np.exp(0.5 * logvar) * eps
        assert kl == pytest.approx(kl_to_standard_normal(mu, logvar))
        assert loss == pytest.approx(kl - trace_logprob(trace, z, params, spec))

    def test_gradients_match_finite_differences(self):
        pair = _pair('[CH3:1][OH:2]', '[CH3:1][O:2]CN')
        spec = _spec([pair], width=3, latent=2, hidden=3)
        params = spec.init(np.random.default_rng(6))
        trace = enumerate_bfs_traces(pair.edits, spec.vocab)[0]
        eps = [np.random.default_rng(7).standard_normal(spec.latent)]

        def loss():
            return elbo_on_tape(Tape(), params, spec, pair, [trace], eps)[0].item()

        _, _, grads = elbo_gradients(pair, params, spec, [trace], eps)
        for name in spec.param_names():
            assert_gradients_close(grads[name], numeric_gradient(loss, params, name))

    def test_needs_a_trace(self, model):
        pair, spec, params, _ = model
        with pytest.raises(ValueError):
            elbo_loss(pair, params, spec, np.random.default_rng(0), mc_traces=0)


class TestTraining:
    def test_history_and_worker_independence(self, tiny_config):
        pairs = [_pair(), _pair('[CH3:1][OH:2]', '[CH3:1][O:2]C'), _pair('[CH3:1][OH:2]', '[CH3:1][OH:2]')]
        spec = _spec(pairs)
        single = train_translate(pairs, tiny_config, spec.atom_vocab, spec.vocab, validation=pairs[:1])
        threaded = train_translate(
            pairs, tiny_config.with_overrides(workers=2), spec.atom_vocab, spec.vocab, validation=pairs[:1]
        )
        assert [r['epoch'] for r in single.history] == [1, 2]
        assert {'loss', 'kl', 'val_loss', 'timestamp'} <= set(single.history[0])
        for name in single.params:
            assert np.allclose(single.params[name], threaded.params[name], rtol=0, atol=1e-12)

    def test_loss_decreases(self, tiny_config):
        pairs = [_pair(), _pair('[CH3:1][OH:2]', '[CH3:1][O:2]C')]
        spec = _spec(pairs)
        result = train_translate(pairs, tiny_config.with_overrides(epochs=40), spec.atom_vocab, spec.vocab)
        assert np.mean([r['loss'] for r in result.history[-5:]]) < np.mean([r['loss'] for r in result.history[:5]])

    def test_empty_pairs(self, tiny_config):
        pair = _pair()
        spec = _spec([pair])
        with pytest.raises(ValueError):
            train_translate([], tiny_config, spec.atom_vocab, spec.vocab)

    def test_class_known_training_drops_unclassified_pairs(self, tiny_config, caplog):
        classified, unclassified = _pair(class_id=2), _pair()
        spec = _spec([classified])
        config = tiny_config.with_overrides(class_known=True, epochs=1)
        with caplog.at_level(logging.WARNING):
            result = train_translate([classified, unclassified], config, spec.atom_vocab, spec.vocab)
        assert len(result.history) == 1
        assert 'Skipping 1 training pairs without a reaction class' in caplog.text
        with pytest.raises(ValueError):
            train_translate([unclassified], config, spec.atom_vocab, spec.vocab)

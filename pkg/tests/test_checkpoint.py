"""Tests for the binary checkpoint format."""

import hashlib
import logging
import struct

import numpy as np
import pytest

from src.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    CheckpointError,
    check_params,
    checkpoint_load,
    checkpoint_save,
    decode_checkpoint,
    encode_checkpoint,
)
from src.edits import NewAtomVocabulary
from src.molgraph import AtomVocabulary
from src.numcore import AdamState, adam_step

ATOMS = AtomVocabulary(('C', 'N', 'O'))
VOCAB = NewAtomVocabulary((('Cl', 0, 1), ('O', 0, 2)))


@pytest.fixture
def ckpt():
    rng = np.random.default_rng(0)
    params = {'b.w0': rng.normal(size=(3, 2)), 'a.bias': rng.normal(size=(1, 2)), 'scalar': np.array([2.5])}
    adam = AdamState.fresh(params, lr=0.003)
    adam_step(adam, params, {name: np.ones_like(value) for name, value in params.items()})
    return Checkpoint(
        module='translate',
        params=params,
        atom_vocab=ATOMS,
        config_hash='ab' * 32,
        model={'width': 2, 'layers': 1},
        vocab=VOCAB,
        adam=adam,
        extra={'epochs': 3},
    )


def _reseal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


def test_round_trip_is_byte_identical(ckpt):
    data = encode_checkpoint(ckpt)
    decoded = decode_checkpoint(data)
    assert encode_checkpoint(decoded) == data
    for name in ckpt.params:
        assert np.array_equal(decoded.params[name], ckpt.params[name])
    assert decoded.adam.step == 1
    assert np.array_equal(decoded.adam.v['b.w0'], ckpt.adam.v['b.w0'])
    assert decoded.vocab == VOCAB
    assert decoded.atom_vocab == ATOMS
    assert decoded.extra == {'epochs': 3}


def test_best_weights_kept_apart_from_resume_weights(ckpt):
    assert ckpt.weights is ckpt.params
    ckpt.best = {name: value + 1.0 for name, value in ckpt.params.items()}
    data = encode_checkpoint(ckpt)
    decoded = decode_checkpoint(data)
    assert encode_checkpoint(decoded) == data
    assert set(decoded.params) == set(decoded.best) == set(ckpt.params)
    for name in ckpt.params:
        assert np.array_equal(decoded.params[name], ckpt.params[name])
        assert np.array_equal(decoded.weights[name], ckpt.params[name] + 1.0)
    assert set(decoded.adam.m) == set(ckpt.params)


def test_without_optimizer_or_vocab(ckpt):
    ckpt.adam = None
    ckpt.vocab = None
    decoded = decode_checkpoint(encode_checkpoint(ckpt))
    assert decoded.adam is None and decoded.vocab is None
    assert set(decoded.params) == set(ckpt.params)


def test_flipped_byte_is_detected(ckpt):
    data = bytearray(encode_checkpoint(ckpt))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match='checksum'):
        decode_checkpoint(bytes(data))


def test_truncation_is_detected(ckpt):
    with pytest.raises(CheckpointError):
        decode_checkpoint(encode_checkpoint(ckpt)[:-7])


def test_bad_magic():
    with pytest.raises(CheckpointError, match='Not a checkpoint'):
        decode_checkpoint(b'NOTACKPT' + bytes(64))


def test_unsupported_version(ckpt):
    body = encode_checkpoint(ckpt)[:-32]
    offset = len(MAGIC)
    body = body[:offset] + struct.pack('<I', FORMAT_VERSION + 1) + body[offset + 4:]
    with pytest.raises(CheckpointError, match='version'):
        decode_checkpoint(_reseal(body))


def test_trailing_bytes(ckpt):
    body = encode_checkpoint(ckpt)[:-32] + b'\x00'
    with pytest.raises(CheckpointError, match='Trailing'):
        decode_checkpoint(_reseal(body))


class TestLoad:
    def test_save_and_load(self, ckpt, tmp_path):
        path = tmp_path / 'nested' / 'translate.ckpt'
        checkpoint_save(str(path), ckpt)
        loaded = checkpoint_load(str(path), config_hash=ckpt.config_hash, atom_vocab=ATOMS, vocab=VOCAB)
        assert encode_checkpoint(loaded) == path.read_bytes()

    def test_hash_mismatch_only_warns(self, ckpt, tmp_path, caplog):
        path = tmp_path / 'c.ckpt'
        checkpoint_save(str(path), ckpt)
        with caplog.at_level(logging.WARNING):
            checkpoint_load(str(path), config_hash='cd' * 32)
        assert 'config hash' in caplog.text

    def test_vocabulary_mismatch(self, ckpt, tmp_path):
        path = tmp_path / 'c.ckpt'
        checkpoint_save(str(path), ckpt)
        with pytest.raises(CheckpointError, match='Atom vocabulary'):
            checkpoint_load(str(path), atom_vocab=AtomVocabulary(('C', 'O')))
        with pytest.raises(CheckpointError, match='New-atom vocabulary'):
            checkpoint_load(str(path), vocab=NewAtomVocabulary((('Cl', 0, 1),)))

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            checkpoint_load(str(tmp_path / 'missing.ckpt'))


class TestCheckParams:
    def test_accepts_exact_shapes(self):
        check_params({'w': np.zeros((2, 3))}, {'w': (2, 3)})

    def test_missing_or_extra(self):
        with pytest.raises(CheckpointError, match='missing'):
            check_params({'w': np.zeros((2, 3))}, {'w': (2, 3), 'b': (1, 3)})
        with pytest.raises(CheckpointError):
            check_params({'w': np.zeros((2, 3)), 'x': np.zeros(1)}, {'w': (2, 3)})

    def test_shape(self):
        with pytest.raises(CheckpointError, match='shape'):
            check_params({'w': np.zeros((3, 2))}, {'w': (2, 3)})

"""Checkpoint Module for the Retrosynthesis Engine.

Binary layout (all integers little-endian):

    MAGIC | version u32 | meta length u32 | meta JSON | entry count u32 | entries | sha256

Each entry is name length u16, UTF-8 name, ndim u8, ndim x u32 dims and the
float64 data. Adam moments are stored as 'adam.m/<name>' and 'adam.v/<name>',
best-validation weights as 'best/<name>'.
The trailing SHA-256 covers every preceding byte.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.edits import NewAtomVocabulary
from src.molgraph import AtomVocabulary
from src.numcore import AdamState, Params

logger = logging.getLogger(__name__)

MAGIC = b'RETROCKP'
FORMAT_VERSION = 1
DIGEST_SIZE = 32
MOMENT_PREFIXES = ('adam.m/', 'adam.v/')
BEST_PREFIX = 'best/'


class CheckpointError(ValueError):
    """Raised for corrupt, truncated or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    """
    Everything needed to resume training or to decode with one module.

    params are the weights the optimizer state belongs to; best holds the
    best-validation weights when they differ from a plain final snapshot.
    """
    module: str
    params: Params
    atom_vocab: AtomVocabulary
    config_hash: str
    model: Dict[str, object]
    vocab: Optional[NewAtomVocabulary] = None
    adam: Optional[AdamState] = None
    extra: Dict[str, object] = field(default_factory=dict)
    best: Optional[Params] = None

    @property
    def weights(self) -> Params:
        """Weights to decode with."""
        return self.params if self.best is None else self.best


def _meta(ckpt: Checkpoint) -> Dict[str, object]:
    meta = {
        'module': ckpt.module,
        'config_hash': ckpt.config_hash,
        'model': ckpt.model,
        'atom_vocab': list(ckpt.atom_vocab.elements),
        'new_atom_vocab': None if ckpt.vocab is None else [list(e) for e in ckpt.vocab.entries],
        'adam': None,
        'extra': ckpt.extra,
    }
    if ckpt.adam is not None:
        meta['adam'] = {
            'lr': ckpt.adam.lr,
            'beta1': ckpt.adam.beta1,
            'beta2': ckpt.adam.beta2,
            'eps': ckpt.adam.eps,
            'step': ckpt.adam.step,
        }
    return meta


def _entries(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    entries = [(name, ckpt.params[name]) for name in sorted(ckpt.params)]
    if ckpt.adam is not None:
        for prefix, moments in zip(MOMENT_PREFIXES, (ckpt.adam.m, ckpt.adam.v)):
            entries += [(prefix + name, moments[name]) for name in sorted(moments)]
    if ckpt.best is not None:
        entries += [(BEST_PREFIX + name, ckpt.best[name]) for name in sorted(ckpt.best)]
    return entries


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Serialize a checkpoint; equal checkpoints give identical bytes."""
    meta = json.dumps(_meta(ckpt), sort_keys=True, separators=(',', ':')).encode('utf-8')
    entries = _entries(ckpt)
    chunks = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(meta)), meta, struct.pack('<I', len(entries))]
    for name, array in entries:
        array = np.ascontiguousarray(array, dtype='<f8')
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<H', len(encoded)) + encoded)
        chunks.append(struct.pack('<B', array.ndim) + struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(array.tobytes())
    body = b''.join(chunks)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError("Checkpoint is truncated")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointError: On a bad magic, unsupported version, checksum failure
            or malformed content
    """
    if len(data) < len(MAGIC) + DIGEST_SIZE or not data.startswith(MAGIC):
        raise CheckpointError("Not a checkpoint file")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("Checkpoint checksum mismatch (file is corrupt)")

    reader = _Reader(body)
    reader.take(len(MAGIC))
    version, meta_len = reader.unpack('<II')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        meta = json.loads(reader.take(meta_len).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Malformed checkpoint metadata: {e}") from e

    (count,) = reader.unpack('<I')
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I')
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(reader.take(8 * size), dtype='<f8').reshape(shape).astype(np.float64)
    if reader.offset != len(body):
        raise CheckpointError("Trailing bytes after the last entry")

    params = {k: v for k, v in arrays.items() if not k.startswith(MOMENT_PREFIXES + (BEST_PREFIX,))}
    best = {k[len(BEST_PREFIX):]: v for k, v in arrays.items() if k.startswith(BEST_PREFIX)} or None
    adam = None
    if meta.get('adam') is not None:
        settings = meta['adam']
        adam = AdamState(
            lr=settings['lr'], beta1=settings['beta1'], beta2=settings['beta2'],
            eps=settings['eps'], step=settings['step'],
            m={k[len('adam.m/'):]: v for k, v in arrays.items() if k.startswith('adam.m/')},
            v={k[len('adam.v/'):]: v for k, v in arrays.items() if k.startswith('adam.v/')},
        )
    vocab = None
    if meta.get('new_atom_vocab') is not None:
        vocab = NewAtomVocabulary(tuple(tuple(e) for e in meta['new_atom_vocab']))
    return Checkpoint(
        module=meta['module'],
        params=params,
        atom_vocab=AtomVocabulary(tuple(meta['atom_vocab'])),
        config_hash=meta['config_hash'],
        model=meta['model'],
        vocab=vocab,
        adam=adam,
        extra=meta.get('extra') or {},
        best=best,
    )


def checkpoint_save(path: str, ckpt: Checkpoint) -> None:
    """Write a checkpoint, creating parent directories."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_checkpoint(ckpt))
    logger.info(f"Saved {ckpt.module} checkpoint ({len(ckpt.params)} tensors) to {target}")


def checkpoint_load(
    path: str,
    config_hash: Optional[str] = None,
    atom_vocab: Optional[AtomVocabulary] = None,
    vocab: Optional[NewAtomVocabulary] = None,
) -> Checkpoint:
    """
    Read a checkpoint and check it against the current run.

    A config-hash mismatch only logs a warning; vocabulary mismatches are
    rejected because parameter shapes depend on them.

    Raises:
        FileNotFoundError: If path does not exist
        CheckpointError: On corruption or a vocabulary mismatch
    """
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    ckpt = decode_checkpoint(source.read_bytes())
    if config_hash is not None and ckpt.config_hash != config_hash:
        logger.warning(
            f"Checkpoint {path} was written with config hash {ckpt.config_hash[:12]}, "
            f"current run has {config_hash[:12]}"
        )
    if atom_vocab is not None and ckpt.atom_vocab != atom_vocab:
        raise CheckpointError(
            f"Atom vocabulary mismatch: checkpoint has {len(ckpt.atom_vocab.elements)} elements, "
            f"dataset has {len(atom_vocab.elements)}"
        )
    if vocab is not None and ckpt.vocab != vocab:
        raise CheckpointError(
            f"New-atom vocabulary mismatch: checkpoint has {0 if ckpt.vocab is None else ckpt.vocab.size} "
            f"entries, dataset has {vocab.size}"
        )
    logger.info(f"Loaded {ckpt.module} checkpoint from {source}")
    return ckpt


def check_params(params: Params, expected: Dict[str, Tuple[int, ...]]) -> None:
    """
    Require params to hold exactly the expected names and shapes.

    Raises:
        CheckpointError: On a missing, extra or reshaped tensor
    """
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"Parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise CheckpointError(f"{name} has shape {params[name].shape}, expected {tuple(shape)}")

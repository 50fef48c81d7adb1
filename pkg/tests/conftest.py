"""Shared fixtures for the test suite."""

from pathlib import Path
from typing import Callable, List

import numpy as np
import pytest

from src.config import RunConfig
from src.molgraph import Reaction
from src.numcore import Params
from src.parser import parse_reaction_line

ROOT = Path(__file__).resolve().parent.parent
DESK_CORPUS = ROOT / 'data' / 'desk_corpus.tsv'


def numeric_gradient(loss: Callable[[], float], params: Params, name: str, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of loss() with respect to params[name]."""
    value = params[name]
    grad = np.zeros_like(value)
    for index in np.ndindex(value.shape):
        original = value[index]
        value[index] = original + eps
        up = loss()
        value[index] = original - eps
        down = loss()
        value[index] = original
        grad[index] = (up - down) / (2 * eps)
    return grad


def assert_gradients_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, atol: float = 1e-7):
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    error = np.abs(analytic - numeric)
    assert np.all(error <= rtol * scale + atol), f"max error {error.max():.3g}"


@pytest.fixture
def desk_corpus() -> Path:
    return DESK_CORPUS


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    """Fast settings for unit tests; checkpoints go to a temporary directory."""
    return RunConfig(
        layers=2,
        width=8,
        latent=3,
        head_hidden=8,
        class_width=4,
        lr=0.01,
        batch=4,
        epochs=2,
        beam=3,
        max_steps=6,
        seed=0,
        data_path=str(DESK_CORPUS),
        checkpoint_dir=str(tmp_path / 'checkpoints'),
    )


@pytest.fixture
def desk_config(tmp_path) -> RunConfig:
    """Desk-scale settings used by the overfit runs."""
    return RunConfig(
        layers=3,
        width=64,
        latent=10,
        head_hidden=64,
        class_width=8,
        lr=0.003,
        batch=4,
        epochs=200,
        beam=10,
        max_steps=12,
        seed=0,
        data_path=str(DESK_CORPUS),
        checkpoint_dir=str(tmp_path / 'checkpoints'),
    )


def load_reactions(path: Path = DESK_CORPUS) -> List[Reaction]:
    lines = path.read_text(encoding='utf-8').splitlines()
    return [rxn for rxn in (parse_reaction_line(line) for line in lines) if rxn is not None]


@pytest.fixture(scope='session')
def desk_reactions() -> List[Reaction]:
    return load_reactions()

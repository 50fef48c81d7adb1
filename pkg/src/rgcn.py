"""Relational GCN Module for the Retrosynthesis Engine.

H^l = sum_i ReLU(E_i H^{l-1} W_i^l), E_i = A[:, :, i] + I, one weight matrix
per bond type and layer, no bias and no degree normalization. The graph
embedding is the column sum of H^L.
"""

from dataclasses import dataclass
from typing import List

import numpy as np

from src.molgraph import NUM_BOND_TYPES, Molecule, MoleculeError
from src.numcore import Params, ShapeError, Tape, Tensor, init_uniform


@dataclass(frozen=True)
class RgcnParams:
    """Shape of one R-GCN encoder; the weights themselves live in a Params dict."""
    name: str
    in_width: int
    width: int
    layers: int
    bond_types: int = NUM_BOND_TYPES

    def weight_name(self, layer: int, bond: int) -> str:
        return f"{self.name}.l{layer}.w{bond}"

    def param_names(self) -> List[str]:
        return [
            self.weight_name(layer, bond)
            for layer in range(1, self.layers + 1)
            for bond in range(self.bond_types)
        ]

    def init(self, params: Params, rng: np.random.Generator) -> None:
        for layer in range(1, self.layers + 1):
            fan_in = self.in_width if layer == 1 else self.width
            for bond in range(self.bond_types):
                params[self.weight_name(layer, bond)] = init_uniform(rng, fan_in, (fan_in, self.width))


def edge_operators(mol: Molecule) -> List[np.ndarray]:
    """E_i = A[:, :, i] + I for every bond type."""
    eye = np.eye(mol.num_atoms)
    return [mol.adjacency[:, :, bond].astype(np.float64) + eye for bond in range(mol.adjacency.shape[2])]


def encode_on_tape(
    tape: Tape,
    params: Params,
    spec: RgcnParams,
    features: np.ndarray,
    operators: List[np.ndarray],
) -> Tensor:
    """Record the encoder on a tape and return node embeddings H^L."""
    if features.ndim != 2 or features.shape[1] != spec.in_width:
        raise ShapeError(f"{spec.name}: feature width {features.shape} != {spec.in_width}")
    if not features.shape[0]:
        raise MoleculeError("Cannot encode an empty molecule")
    if len(operators) != spec.bond_types:
        raise ShapeError(f"{spec.name}: expected {spec.bond_types} edge operators")

    h = tape.constant(features)
    edge = [tape.constant(e) for e in operators]
    for layer in range(1, spec.layers + 1):
        total = None
        for bond in range(spec.bond_types):
            w = tape.watch(params, spec.weight_name(layer, bond))
            message = tape.relu(tape.matmul(tape.matmul(edge[bond], h), w))
            total = message if total is None else tape.add(total, message)
        h = total
    return h


def encode(mol: Molecule, params: Params, spec: RgcnParams, features: np.ndarray) -> np.ndarray:
    """
    Node embeddings H^L for a molecule.

    Args:
        mol: Molecule providing the adjacency
        params: Weights containing every name from spec.param_names()
        spec: Encoder shape
        features: n x d node features (see AtomVocabulary.featurize)

    Returns:
        n x k array

    Raises:
        ShapeError: If the feature width does not match the encoder
    """
    if features.shape[0] != mol.num_atoms:
        raise ShapeError(f"{features.shape[0]} feature rows for {mol.num_atoms} atoms")
    tape = Tape()
    return encode_on_tape(tape, params, spec, features, edge_operators(mol)).value


def readout(node_embeddings: np.ndarray) -> np.ndarray:
    """Graph embedding h_G as the column-wise sum of H."""
    node_embeddings = np.asarray(node_embeddings, dtype=np.float64)
    if node_embeddings.ndim != 2 or not node_embeddings.shape[0]:
        raise ShapeError("readout() needs a non-empty n x k matrix")
    return node_embeddings.sum(axis=0)

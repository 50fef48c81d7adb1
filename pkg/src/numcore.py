"""Numeric Core Module for the Retrosynthesis Engine.

Dense float64 tensors on top of numpy, a recorded-tape reverse mode over a
closed operation vocabulary, feedforward networks and the Adam optimizer.

Operation vocabulary recorded on a Tape (each has a hand-written gradient):
    matmul, add (row broadcast), mul (row broadcast), scale, exp, log
    (floored), relu, sigmoid, clamp, concat, gather_rows, transpose, sum_rows,
    sum_all, softmax_cross_entropy (masked, single target).
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

Params = Dict[str, np.ndarray]

DEFAULT_LEARNING_RATE = 0.0001


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up."""


class DegenerateDistributionError(ValueError):
    """Raised when a masked softmax has no entry left to normalize over."""


class UsageError(RuntimeError):
    """Raised when the tape is driven out of order."""


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss or parameters."""


def as_matrix(values) -> np.ndarray:
    """Coerce scalars and vectors into a 2-D float64 array (vectors become rows)."""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"Expected at most 2 dimensions, got {array.ndim}")
    return array


def sigmoid(x):
    """Numerically stable logistic function, elementwise on scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    decay = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay))
    if out.ndim == 0:
        return float(out)
    return out


def _check_mask(logits: np.ndarray, mask: Optional[Sequence[bool]]) -> np.ndarray:
    if mask is None:
        return np.ones(logits.shape[-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (logits.shape[-1],):
        raise ShapeError(f"Mask length {mask.shape} does not match logits {logits.shape}")
    if not mask.any():
        raise DegenerateDistributionError("All entries are masked")
    return mask


def log_softmax(logits, mask: Optional[Sequence[bool]] = None) -> np.ndarray:
    """Masked log-softmax of a vector; masked entries are -inf."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    mask = _check_mask(logits, mask)
    out = np.full(logits.shape, -np.inf)
    kept = logits[mask]
    shifted = kept - kept.max()
    out[mask] = shifted - math.log(np.exp(shifted).sum())
    return out


def softmax(logits, mask: Optional[Sequence[bool]] = None) -> np.ndarray:
    """
    Masked softmax of a vector.

    Args:
        logits: Real scores
        mask: Optional booleans, False entries get probability exactly 0

    Returns:
        Probability vector summing to 1

    Raises:
        DegenerateDistributionError: If every entry is masked
    """
    log_probs = log_softmax(logits, mask)
    probs = np.zeros_like(log_probs)
    finite = np.isfinite(log_probs)
    probs[finite] = np.exp(log_probs[finite])
    return probs / probs.sum()


@dataclass
class Tensor:
    """A 2-D value living on a Tape."""
    value: np.ndarray
    tape: "Tape"
    index: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.value.shape}")
        return float(self.value.reshape(-1)[0])


@dataclass
class _Record:
    inputs: Tuple[int, ...]
    vjp: Optional[Callable[[np.ndarray], Tuple[np.ndarray, ...]]]


class Tape:
    """
    Records a forward computation so gradients can be pulled back from a scalar.

    Parameters enter through watch(); everything else is a constant. Each
    watched parameter appears once per tape, so repeated uses accumulate.
    """

    def __init__(self):
        self._values: List[np.ndarray] = []
        self._records: List[_Record] = []
        self._watched: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._records)

    def _push(self, value: np.ndarray, inputs: Tuple[int, ...] = (), vjp=None) -> Tensor:
        self._values.append(value)
        self._records.append(_Record(inputs=inputs, vjp=vjp))
        return Tensor(value=value, tape=self, index=len(self._values) - 1)

    def _own(self, *tensors: Tensor):
        for t in tensors:
            if t.tape is not self:
                raise UsageError("Tensor belongs to a different tape")

    def constant(self, value) -> Tensor:
        return self._push(as_matrix(value))

    def watch(self, params: Params, name: str) -> Tensor:
        """Track a named parameter; returns the same tensor on repeated calls."""
        if name in self._watched:
            idx = self._watched[name]
            return Tensor(value=self._values[idx], tape=self, index=idx)
        if name not in params:
            raise KeyError(f"Unknown parameter: {name}")
        tensor = self._push(as_matrix(params[name]))
        self._watched[name] = tensor.index
        return tensor

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        self._own(a, b)
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul {a.shape} @ {b.shape}")
        av, bv = a.value, b.value
        return self._push(av @ bv, (a.index, b.index), lambda g: (g @ bv.T, av.T @ g))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum; b may be a single row broadcast over a's rows."""
        self._own(a, b)
        broadcast = _broadcast_rows(a, b, "add")

        def vjp(g):
            gb = g.sum(axis=0, keepdims=True) if broadcast else g
            return g, gb

        return self._push(a.value + b.value, (a.index, b.index), vjp)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product; b may be a single row broadcast over a's rows."""
        self._own(a, b)
        broadcast = _broadcast_rows(a, b, "mul")
        av, bv = a.value, b.value

        def vjp(g):
            gb = g * av
            if broadcast:
                gb = gb.sum(axis=0, keepdims=True)
            return g * bv, gb

        return self._push(av * bv, (a.index, b.index), vjp)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        self._own(a)
        return self._push(a.value * factor, (a.index,), lambda g: (g * factor,))

    def exp(self, a: Tensor) -> Tensor:
        self._own(a)
        out = np.exp(a.value)
        return self._push(out, (a.index,), lambda g: (g * out,))

    def log(self, a: Tensor, floor: float = 1e-12) -> Tensor:
        """Natural log of max(a, floor); no gradient flows through floored entries."""
        self._own(a)
        live = a.value > floor
        safe = np.where(live, a.value, floor)
        return self._push(np.log(safe), (a.index,), lambda g: (np.where(live, g / safe, 0.0),))

    def relu(self, a: Tensor) -> Tensor:
        self._own(a)
        live = a.value > 0
        return self._push(np.where(live, a.value, 0.0), (a.index,), lambda g: (g * live,))

    def sigmoid(self, a: Tensor) -> Tensor:
        self._own(a)
        out = sigmoid(a.value)
        return self._push(out, (a.index,), lambda g: (g * out * (1.0 - out),))

    def clamp(self, a: Tensor, low: float, high: float) -> Tensor:
        self._own(a)
        live = (a.value >= low) & (a.value <= high)
        return self._push(np.clip(a.value, low, high), (a.index,), lambda g: (g * live,))

    def concat(self, tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
        self._own(*tensors)
        values = [t.value for t in tensors]
        try:
            out = np.concatenate(values, axis=axis)
        except ValueError as e:
            raise ShapeError(f"concat: {e}") from e
        bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
        return self._push(
            out,
            tuple(t.index for t in tensors),
            lambda g: tuple(np.split(g, bounds, axis=axis)),
        )

    def gather_rows(self, a: Tensor, rows: Sequence[int]) -> Tensor:
        self._own(a)
        rows = np.asarray(rows, dtype=np.int64)
        n = a.shape[0]

        def vjp(g):
            ga = np.zeros((n, g.shape[1]))
            np.add.at(ga, rows, g)
            return (ga,)

        return self._push(a.value[rows], (a.index,), vjp)

    def transpose(self, a: Tensor) -> Tensor:
        self._own(a)
        return self._push(a.value.T.copy(), (a.index,), lambda g: (g.T,))

    def sum_rows(self, a: Tensor) -> Tensor:
        """Column-wise sum, n x k -> 1 x k."""
        self._own(a)
        n = a.shape[0]
        return self._push(
            a.value.sum(axis=0, keepdims=True), (a.index,), lambda g: (np.repeat(g, n, axis=0),)
        )

    def sum_all(self, a: Tensor) -> Tensor:
        self._own(a)
        shape = a.shape
        return self._push(
            np.array([[a.value.sum()]]), (a.index,), lambda g: (np.full(shape, g[0, 0]),)
        )

    def softmax_cross_entropy(
        self, logits: Tensor, target: int, mask: Optional[Sequence[bool]] = None
    ) -> Tensor:
        """-log softmax(logits)[target] for a 1 x m row under an optional mask."""
        self._own(logits)
        if logits.shape[0] != 1:
            raise ShapeError(f"softmax_cross_entropy expects one row, got {logits.shape}")
        log_probs = log_softmax(logits.value, mask)
        if not np.isfinite(log_probs[target]):
            raise DegenerateDistributionError(f"Target {target} is masked out")
        probs = np.where(np.isfinite(log_probs), np.exp(log_probs), 0.0)

        def vjp(g):
            grad = probs.copy()
            grad[target] -= 1.0
            return (g[0, 0] * grad.reshape(1, -1),)

        return self._push(np.array([[-log_probs[target]]]), (logits.index,), vjp)

    def backward(self, root: Tensor, params: Params) -> Params:
        """
        Pull gradients back from a scalar root.

        Args:
            root: 1 x 1 tensor recorded on this tape
            params: The full parameter set; unused parameters get zero gradients

        Returns:
            Gradient arrays keyed and shaped like params

        Raises:
            UsageError: If nothing was recorded or root is not from this tape
        """
        if not self._records:
            raise UsageError("backward() called before any forward computation")
        if root.tape is not self:
            raise UsageError("Root tensor was not recorded on this tape")
        if root.value.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got {root.shape}")

        grads: List[Optional[np.ndarray]] = [None] * len(self._values)
        grads[root.index] = np.ones_like(root.value)
        for idx in range(root.index, -1, -1):
            g = grads[idx]
            record = self._records[idx]
            if g is None or record.vjp is None:
                continue
            for input_idx, input_grad in zip(record.inputs, record.vjp(g)):
                if grads[input_idx] is None:
                    grads[input_idx] = input_grad.copy()
                else:
                    grads[input_idx] += input_grad

        out: Params = {}
        for name, value in params.items():
            idx = self._watched.get(name)
            if idx is None or grads[idx] is None:
                out[name] = np.zeros_like(value, dtype=np.float64)
            else:
                out[name] = grads[idx].reshape(np.shape(value))
        return out


def _broadcast_rows(a: Tensor, b: Tensor, op: str) -> bool:
    if a.shape == b.shape:
        return False
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return True
    raise ShapeError(f"{op}: cannot combine {a.shape} with {b.shape}")


def init_uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class FeedForward:
    """ReLU multilayer perceptron with raw-logit output; weights live in a Params dict."""
    name: str
    widths: Tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ShapeError(f"{self.name}: invalid layer widths {self.widths}")

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    def param_names(self) -> List[str]:
        names = []
        for layer in range(len(self.widths) - 1):
            names += [f"{self.name}.w{layer}", f"{self.name}.b{layer}"]
        return names

    def init(self, params: Params, rng: np.random.Generator) -> None:
        for layer, (fan_in, fan_out) in enumerate(zip(self.widths, self.widths[1:])):
            params[f"{self.name}.w{layer}"] = init_uniform(rng, fan_in, (fan_in, fan_out))
            params[f"{self.name}.b{layer}"] = init_uniform(rng, fan_in, (1, fan_out))

    def forward(self, tape: Tape, params: Params, x: Tensor) -> Tensor:
        if x.shape[1] != self.input_width:
            raise ShapeError(f"{self.name}: input width {x.shape[1]} != {self.input_width}")
        last = len(self.widths) - 2
        for layer in range(last + 1):
            w = tape.watch(params, f"{self.name}.w{layer}")
            b = tape.watch(params, f"{self.name}.b{layer}")
            x = tape.add(tape.matmul(x, w), b)
            if layer != last:
                x = tape.relu(x)
        return x


def feedforward_apply(net: FeedForward, params: Params, inputs) -> np.ndarray:
    """
    Evaluate a feedforward network on one input vector without keeping a tape.

    Raises:
        ShapeError: If the input length does not match the first layer width
    """
    x = np.asarray(inputs, dtype=np.float64).reshape(-1)
    if x.shape[0] != net.input_width:
        raise ShapeError(f"{net.name}: input length {x.shape[0]} != {net.input_width}")
    tape = Tape()
    return net.forward(tape, params, tape.constant(x)).value.reshape(-1)


@dataclass
class AdamState:
    """Adam moments and step counter; beta/eps use the usual defaults."""
    lr: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: Params, lr: float = DEFAULT_LEARNING_RATE) -> "AdamState":
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(state: AdamState, params: Params, grads: Params) -> Tuple[Params, AdamState]:
    """
    Apply one bias-corrected Adam update in place.

    Args:
        state: Moments and step counter, updated in place
        params: Parameter arrays, updated in place
        grads: Gradients keyed like params

    Returns:
        (params, state) after the update

    Raises:
        ShapeError: If any gradient or moment shape disagrees with its parameter
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.shape:
            raise ShapeError(f"Gradient for {name} has shape {np.shape(g)}, expected {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        if state.m[name].shape != p.shape or state.v[name].shape != p.shape:
            raise ShapeError(f"Adam moments for {name} do not match {p.shape}")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def all_finite(params: Params) -> bool:
    return all(np.isfinite(p).all() for p in params.values())


def carry_best(params: Params, best: Optional[Tuple[Params, Optional[float]]]) -> Tuple[Params, float]:
    """Starting best-validation snapshot: the carried one, else a copy of params with no loss yet."""
    if best is None:
        return {name: value.copy() for name, value in params.items()}, math.inf
    weights, loss = best
    return {name: value.copy() for name, value in weights.items()}, math.inf if loss is None else loss

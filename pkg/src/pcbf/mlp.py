"""Scalar multilayer perceptron with exact input and parameter derivatives.

The network is a stack of dense layers, tanh on every hidden layer and
identity on the scalar output.  Parameters live in per-layer arrays with
a canonical flat view packed layer by layer as ``[W.ravel(), b]``.  Both
the plain evaluators here and the graph-backed evaluators used by the
training losses operate in float64 and are deterministic: the same
parameters and points always produce bit-identical results.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff
from .autodiff import Var

CHECKPOINT_MAGIC = b"PCBF1"


@dataclass
class MlpParams:
    """Per-layer weights ``(fan_out, fan_in)`` and biases ``(fan_out,)``."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def size(self) -> int:
        """Total parameter count p = sum of (fan_in + 1) * fan_out."""
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, layer_sizes: Sequence[int], theta: np.ndarray) -> "MlpParams":
        layer_sizes = _validated_sizes(layer_sizes)
        theta = np.asarray(theta, dtype=np.float64)
        expected = sum((layer_sizes[i] + 1) * layer_sizes[i + 1]
                       for i in range(len(layer_sizes) - 1))
        if theta.ndim != 1 or theta.size != expected:
            raise ValueError(
                f"flat parameter vector must have length {expected}, got {theta.size}")
        weights, biases, k = [], [], 0
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(theta[k:k + fan_in * fan_out]
                           .reshape(fan_out, fan_in).copy())
            k += fan_in * fan_out
            biases.append(theta[k:k + fan_out].copy())
            k += fan_out
        return cls(list(layer_sizes), weights, biases)

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_sizes),
                         [W.copy() for W in self.weights],
                         [b.copy() for b in self.biases])


@dataclass
class DualEval:
    """Value plus input gradient of the network at one point."""

    value: float
    input_grad: np.ndarray
    param_grad: np.ndarray | None = None


def _validated_sizes(layer_sizes: Sequence[int]) -> list[int]:
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("layer_sizes needs at least an input and an output entry")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"layer_sizes must be positive, got {sizes}")
    if sizes[-1] != 1:
        raise ValueError(f"output layer must be scalar, got {sizes[-1]}")
    return sizes


def mlp_init(layer_sizes: Sequence[int], seed: int) -> MlpParams:
    """Fresh parameters: zero-mean weights scaled by 1/sqrt(fan_in), zero biases."""
    sizes = _validated_sizes(layer_sizes)
    rng = np.random.default_rng(int(seed) % 2 ** 64)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(sizes, weights, biases)


def _as_batch(x, n: int) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        if X.shape[0] != n:
            raise ValueError(f"expected a state of dimension {n}, got {X.shape}")
        return X[None, :], True
    if X.ndim == 2:
        if X.shape[1] != n:
            raise ValueError(f"expected states of dimension {n}, got {X.shape}")
        return X, False
    raise ValueError(f"expected a 1-D or 2-D state array, got shape {X.shape}")


def mlp_forward(params: MlpParams, x):
    """Network value at ``x``; batched input ``(N, n)`` gives ``(N,)``."""
    X, single = _as_batch(x, params.n_inputs)
    Z = X
    last = len(params.weights) - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        A = Z @ W.T + b
        Z = np.tanh(A) if l < last else A
    out = Z[:, 0]
    return float(out[0]) if single else out


def mlp_input_gradient(params: MlpParams, x):
    """Exact gradient of the scalar output w.r.t. the input point(s)."""
    X, single = _as_batch(x, params.n_inputs)
    hidden = []
    Z = X
    last = len(params.weights) - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        A = Z @ W.T + b
        if l < last:
            Z = np.tanh(A)
            hidden.append(Z)
        else:
            Z = A
    G = np.ones((X.shape[0], 1)) @ params.weights[last]
    for l in range(last - 1, -1, -1):
        G = (G * (1.0 - hidden[l] ** 2)) @ params.weights[l]
    return G[0] if single else G


def mlp_forward_and_input_gradient(params: MlpParams, x):
    """Both outputs of the two functions above, sharing one forward pass."""
    X, single = _as_batch(x, params.n_inputs)
    hidden = []
    Z = X
    last = len(params.weights) - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        A = Z @ W.T + b
        if l < last:
            Z = np.tanh(A)
            hidden.append(Z)
        else:
            Z = A
    val = Z[:, 0]
    G = np.ones((X.shape[0], 1)) @ params.weights[last]
    for l in range(last - 1, -1, -1):
        G = (G * (1.0 - hidden[l] ** 2)) @ params.weights[l]
    if single:
        return float(val[0]), G[0]
    return val, G


def eval_dual(params: MlpParams, x, with_param_grad: bool = False) -> DualEval:
    v, g = mlp_forward_and_input_gradient(params, x)
    pg = None
    if with_param_grad:
        pg = param_gradient(lambda net: net.value(np.asarray(x))[0], params)
    return DualEval(value=v, input_grad=g, param_grad=pg)


class MlpGraph:
    """The network bound to autodiff leaves, for building differentiable scalars.

    ``value`` and ``value_and_input_grad`` return graph nodes, so any
    scalar assembled from them by Var arithmetic can be differentiated
    w.r.t. the flat parameter vector with :func:`param_gradient`.  The
    input gradient is itself built from graph operations (the layered
    chain rule with tanh' = 1 - z^2), which is what makes second-order
    terms like d/dtheta of <v, grad_x nn(x)> come out exact.
    """

    def __init__(self, params: MlpParams):
        self.layer_sizes = list(params.layer_sizes)
        self.weights = [Var(W) for W in params.weights]
        self.biases = [Var(b) for b in params.biases]

    def leaves(self) -> list[Var]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def value(self, x) -> Var:
        X, _ = _as_batch(x, self.layer_sizes[0])
        Z = Var(X)
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            A = Z @ W.T + b
            Z = autodiff.tanh(A) if l < last else A
        return Z.reshape((X.shape[0],))

    def value_and_input_grad(self, x) -> tuple[Var, Var]:
        X, _ = _as_batch(x, self.layer_sizes[0])
        N = X.shape[0]
        Z = Var(X)
        hidden = []
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            A = Z @ W.T + b
            if l < last:
                Z = autodiff.tanh(A)
                hidden.append(Z)
            else:
                Z = A
        val = Z.reshape((N,))
        G = Var(np.ones((N, 1))) @ self.weights[last]
        for l in range(last - 1, -1, -1):
            G = (G * (1.0 - hidden[l] ** 2)) @ self.weights[l]
        return val, G


def param_gradient(functional: Callable[[MlpGraph], Var],
                   params: MlpParams) -> np.ndarray:
    """Exact gradient of ``functional`` w.r.t. the flattened parameters.

    ``functional`` receives an :class:`MlpGraph` and must return a
    scalar Var built from its ``value`` / ``value_and_input_grad``
    outputs combined by smooth Var arithmetic.
    """
    net = MlpGraph(params)
    out = functional(net)
    if not isinstance(out, Var):
        raise TypeError("functional must return an autodiff Var")
    gs = autodiff.grad(out, net.leaves())
    return np.concatenate([g.ravel() for g in gs])


def _functional_value(functional, params: MlpParams) -> float:
    out = functional(MlpGraph(params))
    return float(out.value)


def finite_diff_check(functional, params: MlpParams, step: float = 1e-5,
                      max_coords: int = 256, seed: int = 0) -> float:
    """Worst relative disagreement between analytic and central-difference
    gradients of ``functional``, probing every coordinate (or a seeded
    random subset of ``max_coords`` when p is large)."""
    analytic = param_gradient(functional, params)
    theta = params.flatten()
    p = theta.size
    if p <= max_coords:
        coords = np.arange(p)
    else:
        rng = np.random.default_rng(seed)
        coords = np.sort(rng.choice(p, size=max_coords, replace=False))
    sizes = params.layer_sizes
    worst = 0.0
    for i in coords:
        th = theta.copy()
        th[i] = theta[i] + step
        fp = _functional_value(functional, MlpParams.unflatten(sizes, th))
        th[i] = theta[i] - step
        fm = _functional_value(functional, MlpParams.unflatten(sizes, th))
        fd = (fp - fm) / (2.0 * step)
        denom = max(abs(fd) + abs(analytic[i]), 1e-8)
        worst = max(worst, abs(fd - analytic[i]) / denom)
    return worst


# checkpoint I/O ------------------------------------------------------
#
# Layout (all little-endian):
#   magic    5 bytes  b"PCBF1"
#   n_sizes  int32    number of layer_sizes entries
#   sizes    int32[n_sizes]
#   theta    float64[p] flat parameters in canonical order


def write_params_stream(f, params: MlpParams) -> None:
    sizes = params.layer_sizes
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<i", len(sizes)))
    f.write(struct.pack(f"<{len(sizes)}i", *sizes))
    f.write(params.flatten().astype("<f8").tobytes())


def read_params_stream(f) -> MlpParams:
    magic = f.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    (n_sizes,) = struct.unpack("<i", f.read(4))
    if not 2 <= n_sizes <= 64:
        raise ValueError(f"implausible layer count {n_sizes}")
    sizes = list(struct.unpack(f"<{n_sizes}i", f.read(4 * n_sizes)))
    sizes = _validated_sizes(sizes)
    p = sum((sizes[i] + 1) * sizes[i + 1] for i in range(len(sizes) - 1))
    raw = f.read(8 * p)
    if len(raw) != 8 * p:
        raise ValueError("checkpoint truncated")
    theta = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return MlpParams.unflatten(sizes, theta)


def save_params(path, params: MlpParams) -> None:
    with open(path, "wb") as f:
        write_params_stream(f, params)


def load_params(path) -> MlpParams:
    with open(path, "rb") as f:
        return read_params_stream(f)

"""Small tanh MLPs with hand-written reverse-mode gradients.

Inputs are rows: ``x`` of shape ``(in,)`` or ``(batch, in)``. Parameter
gradients from a batch are summed over rows, so shard-wise accumulation is
order independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch
from .io import atomic_write_text, matrix_to_csv


def softplus(a):
    return np.logaddexp(0.0, a)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "identity"

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatch("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionMismatch(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionMismatch(f"layer {i} input {w.shape[1]} != previous output")
        if self.output not in ("identity", "softplus"):
            raise ValueError(f"unknown output transform {self.output!r}")

    @classmethod
    def init(cls, layer_dims, seed=None, output="identity", zero_last=False) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        if zero_last:
            weights[-1][:] = 0.0
        return cls(weights, biases, output)

    @classmethod
    def constant(cls, layer_dims, value, output="identity") -> "Mlp":
        """A net whose output is ``value`` for every input (zero weights)."""
        net = cls([np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])],
                  [np.zeros(o) for o in layer_dims[1:]], output)
        pre = softplus_inv(value) if output == "softplus" else value
        net.biases[-1][:] = pre
        return net

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.output)

    def __call__(self, x):
        return forward(self, x)


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def __add__(self, other: "MlpGrads") -> "MlpGrads":
        return MlpGrads([a + b for a, b in zip(self.weights, other.weights)],
                        [a + b for a, b in zip(self.biases, other.biases)])


def _run(net: Mlp, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != net.layer_dims[0]:
        raise DimensionMismatch(f"input has {h.shape[-1]} features, net expects {net.layer_dims[0]}")
    acts = [h]
    last = len(net.weights) - 1
    pre = None
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        pre = h @ w.T + b
        h = np.tanh(pre) if i < last else pre
        acts.append(h)
    out = softplus(pre) if net.output == "softplus" else h
    return single, acts, pre, out


def forward(net: Mlp, x) -> np.ndarray:
    single, _, _, out = _run(net, x)
    return out[0] if single else out


def grad(net: Mlp, x, upstream) -> tuple[MlpGrads, np.ndarray]:
    """Gradients of ``sum(upstream * forward(net, x))``.

    Returns parameter gradients (summed over the batch) and the input gradient
    with the same shape as ``x``.
    """
    single, acts, pre, out = _run(net, x)
    up = np.asarray(upstream, dtype=float)
    up = up[None, :] if up.ndim == 1 else up
    if up.shape != out.shape:
        raise DimensionMismatch(f"upstream shape {up.shape} != output shape {out.shape}")
    delta = up * sigmoid(pre) if net.output == "softplus" else up
    gw: list[np.ndarray] = [None] * len(net.weights)
    gb: list[np.ndarray] = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i]
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
    dx = delta[0] if single else delta
    return MlpGrads(gw, gb), dx


@dataclass
class Optimizer:
    """Preconditioned gradient step ``w <- w - lr * A * g``.

    ``precond`` is ``"identity"``, ``"rms"`` (running root-mean-square
    diagonal, refreshed every step) or a list of arrays giving a fixed
    diagonal ``A`` per parameter.
    """

    lr: float = 1e-3
    precond: str | list = "identity"
    beta: float = 0.999
    eps: float = 1e-8
    state: list = field(default_factory=list, repr=False)
    steps: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if not isinstance(self.precond, str):
            if any(np.any(np.asarray(a) < 0) for a in self.precond):
                raise ValueError("preconditioner entries must be >= 0")

    def scale(self, grads: list[np.ndarray]) -> list[np.ndarray]:
        if isinstance(self.precond, str):
            if self.precond == "identity":
                return [np.ones_like(g) for g in grads]
            if self.precond == "rms":
                if not self.state:
                    self.state = [np.zeros_like(g) for g in grads]
                self.steps += 1
                out = []
                for i, g in enumerate(grads):
                    self.state[i] = self.beta * self.state[i] + (1 - self.beta) * g * g
                    v = self.state[i] / (1 - self.beta**self.steps)
                    out.append(1.0 / (np.sqrt(v) + self.eps))
                return out
            raise ValueError(f"unknown preconditioner {self.precond!r}")
        return [np.broadcast_to(np.asarray(a, dtype=float), g.shape) for a, g in zip(self.precond, grads)]


def sgd_step(net: Mlp, grads: MlpGrads, opt: Optimizer, maximize: bool = False) -> Mlp:
    """One preconditioned step; descends by default, ascends with ``maximize``.

    Objectives to increase use ``maximize``; losses are minimised, which is
    the same step with the gradient sign flipped.
    """
    g = grads.params()
    a = opt.scale(g)
    sign = 1.0 if maximize else -1.0
    new = [p + sign * opt.lr * s * d for p, s, d in zip(net.params(), a, g)]
    return Mlp(new[0::2], new[1::2], net.output)


def save_mlp(path, net: Mlp) -> Path:
    lines = ["layer_dims," + ",".join(str(d) for d in net.layer_dims), f"output,{net.output}"]
    body = "\n".join(lines) + "\n"
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        body += f"W{i}\n" + matrix_to_csv(w) + f"b{i}\n" + matrix_to_csv(b[None, :])
    return atomic_write_text(path, body)


def load_mlp(path) -> Mlp:
    lines = Path(path).read_text().splitlines()
    head, *dims = lines[0].split(",")
    if head != "layer_dims":
        raise ValueError(f"{path}: missing layer manifest")
    dims = [int(d) for d in dims]
    output = lines[1].split(",")[1]
    pos = 2
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        assert lines[pos] == f"W{i}", f"{path}: expected W{i}"
        w = np.array([[float(v) for v in ln.split(",")] for ln in lines[pos + 1:pos + 1 + fan_out]])
        pos += 1 + fan_out
        assert lines[pos] == f"b{i}", f"{path}: expected b{i}"
        b = np.array([float(v) for v in lines[pos + 1].split(",")])
        pos += 2
        weights.append(w.reshape(fan_out, fan_in))
        biases.append(b)
    return Mlp(weights, biases, output)

"""Sequence chaining: a gated recurrent cell turns step-s posteriors into step-s+1 priors.

The cell runs independently at every grid location. Its input is the 3x3
neighbourhood of the posterior mean and standard deviation of the temporal
node (edge-padded), so a learned stencil can represent transport such as a
drifting front. The prediction is ``skip * centre_mean + V . h + c``: with
``skip = 1`` and everything else zero it is pure persistence.

Nothing about this architecture or its training protocol comes from an
external reference; it is a minimal stand-in for a sequence predictor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import NoObservationWarning, SequenceExhausted
from .io import atomic_write_text, fmt, matrix_to_csv
from .neuralnet import Optimizer, sigmoid

N_IN = 18
_NAMES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh", "V", "skip", "c")


@dataclass
class GruCell:
    Wz: np.ndarray
    Uz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    br: np.ndarray
    Wh: np.ndarray
    Uh: np.ndarray
    bh: np.ndarray
    V: np.ndarray
    skip: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        for name in _NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        H = self.H
        shapes = {"Wz": (H, N_IN), "Uz": (H, H), "bz": (H,), "Wr": (H, N_IN), "Ur": (H, H),
                  "br": (H,), "Wh": (H, N_IN), "Uh": (H, H), "bh": (H,), "V": (H,),
                  "skip": (), "c": ()}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def H(self) -> int:
        return self.bz.shape[0]

    def params(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in _NAMES]

    @classmethod
    def from_params(cls, params) -> "GruCell":
        return cls(*params)

    @classmethod
    def zeros(cls, H=16, bias=0.0, skip=0.0) -> "GruCell":
        z = lambda *s: np.zeros(s)
        return cls(z(H, N_IN), z(H, H), z(H), z(H, N_IN), z(H, H), z(H), z(H, N_IN), z(H, H),
                   z(H), z(H), np.array(skip), np.array(bias))

    @classmethod
    def persistence(cls, H=16) -> "GruCell":
        return cls.zeros(H, skip=1.0)

    @classmethod
    def init(cls, H=16, seed=None, scale=0.1) -> "GruCell":
        """Small random weights around the persistence configuration."""
        rng = np.random.default_rng(seed)
        cell = cls.persistence(H)
        for name in ("Wz", "Wr", "Wh"):
            setattr(cell, name, rng.uniform(-1, 1, (H, N_IN)) * np.sqrt(6.0 / (H + N_IN)))
        for name in ("Uz", "Ur", "Uh"):
            setattr(cell, name, rng.uniform(-1, 1, (H, H)) * np.sqrt(3.0 / H))
        cell.V = rng.uniform(-scale, scale, H)
        return cell


def stencil(field2d) -> np.ndarray:
    """``(rows*cols, 9)`` edge-padded 3x3 neighbourhoods, row-major offsets."""
    f = np.asarray(field2d, dtype=float)
    p = np.pad(f, 1, mode="edge")
    r, c = f.shape
    cols = [p[1 + dr:1 + dr + r, 1 + dc:1 + dc + c].ravel() for dr in (-1, 0, 1) for dc in (-1, 0, 1)]
    return np.stack(cols, axis=1)


def features(mean2d, var2d) -> np.ndarray:
    return np.concatenate([stencil(mean2d), stencil(np.sqrt(np.maximum(var2d, 0.0)))], axis=1)


def cell_forward(cell: GruCell, x, h):
    """One step at every location. Returns ``(prediction, h_new, cache)``."""
    z = sigmoid(x @ cell.Wz.T + h @ cell.Uz.T + cell.bz)
    r = sigmoid(x @ cell.Wr.T + h @ cell.Ur.T + cell.br)
    ht = np.tanh(x @ cell.Wh.T + (r * h) @ cell.Uh.T + cell.bh)
    h_new = (1 - z) * h + z * ht
    pred = cell.skip * x[:, 4] + h_new @ cell.V + cell.c
    return pred, h_new, (x, h, z, r, ht, h_new)


def cell_backward(cell: GruCell, cache, dpred, dh_new):
    """Reverse pass of ``cell_forward``; returns ``(param grads, dh)``."""
    x, h, z, r, ht, h_new = cache
    dh_new = dh_new + dpred[:, None] * cell.V
    g = {"V": h_new.T @ dpred, "skip": np.array(dpred @ x[:, 4]), "c": np.array(dpred.sum())}
    dz = dh_new * (ht - h)
    dht = dh_new * z
    dh = dh_new * (1 - z)
    da_h = dht * (1 - ht**2)
    g["Wh"], g["bh"], g["Uh"] = da_h.T @ x, da_h.sum(0), da_h.T @ (r * h)
    drh = da_h @ cell.Uh
    dr = drh * h
    dh = dh + drh * r
    da_r = dr * r * (1 - r)
    g["Wr"], g["Ur"], g["br"] = da_r.T @ x, da_r.T @ h, da_r.sum(0)
    dh = dh + da_r @ cell.Ur
    da_z = dz * z * (1 - z)
    g["Wz"], g["Uz"], g["bz"] = da_z.T @ x, da_z.T @ h, da_z.sum(0)
    dh = dh + da_z @ cell.Uz
    return [g[n] for n in _NAMES], dh


@dataclass
class SequenceState:
    step: int
    S: int
    means: dict
    vars: dict
    hidden: np.ndarray
    node_id: str = ""
    shape: tuple = ()

    def __post_init__(self):
        if not 1 <= self.step <= self.S:
            raise ValueError(f"step {self.step} outside [1, {self.S}]")
        for k, v in self.vars.items():
            if np.any(np.asarray(v) < 0):
                raise ValueError(f"posterior variance of {k!r} is negative")
        if not np.all(np.isfinite(self.hidden)):
            raise ValueError("hidden state is not finite")


def advance(state: SequenceState, cell: GruCell):
    """Predict the temporal node at ``step + 1``; returns ``(prediction, next state)``.

    The returned state carries the new hidden memory; its means/vars are the
    ones it was built from until the caller fills in the next posterior.
    """
    if state.step >= state.S:
        raise SequenceExhausted(f"step {state.step} is the last of {state.S}")
    node = state.node_id or next(iter(state.means))
    shape = state.shape or _square(np.asarray(state.means[node]).size)
    x = features(np.asarray(state.means[node]).reshape(shape),
                 np.asarray(state.vars[node]).reshape(shape))
    pred, h, _ = cell_forward(cell, x, state.hidden)
    return pred, replace(state, step=state.step + 1, hidden=h)


def _square(n):
    k = int(round(np.sqrt(n)))
    if k * k != n:
        raise ValueError("pass the grid shape for non-square fields")
    return (k, k)


def sequence_loss(cell: GruCell, inputs, targets, with_grad=True):
    """Mean squared one-step-ahead error over a batch of sequences.

    ``inputs`` is a list over steps of feature arrays ``(n, 18)`` (locations
    of all sequences stacked); ``targets[s]`` is the truth at step ``s + 1``.
    """
    n = inputs[0].shape[0]
    h = np.zeros((n, cell.H))
    caches, preds = [], []
    for x in inputs:
        pred, h, cache = cell_forward(cell, x, h)
        caches.append(cache)
        preds.append(pred)
    scale = 1.0 / (len(inputs) * n)
    loss = scale * sum(float(((p - t) ** 2).sum()) for p, t in zip(preds, targets))
    if not with_grad:
        return loss
    grads = [np.zeros_like(p) for p in cell.params()]
    dh = np.zeros((n, cell.H))
    for cache, p, t in zip(reversed(caches), reversed(preds), reversed(targets)):
        g, dh = cell_backward(cell, cache, 2 * scale * (p - t), dh)
        grads = [a + b for a, b in zip(grads, g)]
    return loss, grads


@dataclass
class TemporalTrainConfig:
    H: int = 16
    sequences: int = 64
    epochs: int = 300
    lr: float = 1e-2
    input_noise: float = 0.15
    seed: int = 0


def training_sequences(make_truth, n_seq, S, input_noise, seed):
    """Noisy-input / clean-target pairs from ``make_truth(rng) -> list of 2-D fields``."""
    rng = np.random.default_rng(seed)
    inputs = [[] for _ in range(S - 1)]
    targets = [[] for _ in range(S - 1)]
    for _ in range(n_seq):
        truth = make_truth(rng)
        for s in range(S - 1):
            mean = truth[s] + input_noise * rng.standard_normal(truth[s].shape)
            var = np.full(truth[s].shape, input_noise**2)
            inputs[s].append(features(mean, var))
            targets[s].append(truth[s + 1].ravel())
    return [np.concatenate(x) for x in inputs], [np.concatenate(t) for t in targets]


def train_cell(make_truth, S, config: TemporalTrainConfig | None = None):
    """Fit the cell by full-batch backpropagation through time; returns ``(cell, losses)``."""
    config = config or TemporalTrainConfig()
    inputs, targets = training_sequences(make_truth, config.sequences, S, config.input_noise,
                                         [config.seed, 0])
    cell = GruCell.init(config.H, [config.seed, 1])
    opt = Optimizer(lr=config.lr, precond="rms", beta=0.99)
    losses = []
    for _ in range(config.epochs):
        loss, grads = sequence_loss(cell, inputs, targets)
        losses.append(loss)
        scale = opt.scale(grads)
        cell = GruCell.from_params([p - opt.lr * a * g for p, a, g in zip(cell.params(), scale, grads)])
    losses.append(sequence_loss(cell, inputs, targets, with_grad=False))
    return cell, losses


def save_cell(path, cell: GruCell) -> Path:
    body = f"gru,{cell.H}\n"
    for name, p in zip(_NAMES, cell.params()):
        body += name + "\n" + matrix_to_csv(np.atleast_2d(p))
    return atomic_write_text(path, body)


def load_cell(path) -> GruCell:
    lines = Path(path).read_text().splitlines()
    head, H = lines[0].split(",")
    if head != "gru":
        raise ValueError(f"{path}: not a recurrent cell file")
    H = int(H)
    rows = {"Wz": H, "Uz": H, "Wr": H, "Ur": H, "Wh": H, "Uh": H}
    params, pos = [], 1
    for name in _NAMES:
        assert lines[pos] == name, f"{path}: expected {name}"
        k = rows.get(name, 1)
        block = np.array([[float(v) for v in ln.split(",")] for ln in lines[pos + 1:pos + 1 + k]])
        pos += 1 + k
        if name in ("skip", "c"):
            block = block.reshape(())
        elif name not in rows:
            block = block.ravel()
        params.append(block)
    return GruCell.from_params(params)


# ------------------------------------------------------------------ rollout

@dataclass
class StepResult:
    step: int
    ensembles: dict
    prediction: dict = field(default_factory=dict)
    flags: tuple = ()


def rollout(S, infer_step, cell: GruCell | None, temporal_nodes, shape, observed=None):
    """Chain per-step inference through the recurrent cell.

    ``infer_step(s, prior_means) -> ensembles`` runs one static inference
    with the temporal nodes' prior means replaced (``None`` at the first
    step). ``observed[s]`` false marks a step without observations, which is
    flagged. ``S == 1`` is plain static inference.
    """
    results = []
    prior = None
    hidden = None
    for s in range(S):
        flags = []
        if observed is not None and not observed[s]:
            warnings.warn(f"step {s + 1} has no observations; prior-only inference",
                          NoObservationWarning)
            flags.append("no_observations")
        ens = infer_step(s, prior)
        res = StepResult(s + 1, ens, dict(prior or {}), tuple(flags))
        results.append(res)
        if S == 1 or s == S - 1 or cell is None:
            continue
        prior = {}
        for node in temporal_nodes:
            e = ens[node]
            if hidden is None:
                hidden = {k: np.zeros((e.samples.shape[1], cell.H)) for k in temporal_nodes}
            state = SequenceState(s + 1, S, {node: e.mean()}, {node: e.var()}, hidden[node],
                                  node, tuple(shape))
            pred, state = advance(state, cell)
            hidden[node] = state.hidden
            prior[node] = pred
    return results


def persistence_forecast(results, node) -> list:
    """Previous-step posterior means as next-step predictions (index 0 is None)."""
    return [None] + [r.ensembles[node].mean() for r in results[:-1]]


def cell_summary(cell: GruCell) -> str:
    return ",".join(fmt(v) for v in (cell.skip, cell.c, np.linalg.norm(cell.V)))

"""Forward SDEs per latent node, Gaussian perturbation kernels and DSM training.

A node's forward process is

    dz = [f(z, parents, t) + lam(t) * sum_k (phi_k - z)] dt + g(t) dW

integrated by Euler-Maruyama. ``targets`` arguments hold the stacked
``phi_k`` fields (shape ``(K, ...)``); the guidance pull is summed over them.
Everything is cellwise, so batch axes broadcast freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import Diverged, NegativeVariance, NonFiniteState, OddStepCount, ZeroVariance
from .neuralnet import Mlp, Optimizer, forward, grad, sgd_step


class LinearDecay:
    """``lam(t) = lambda0 * (1 - t/T)``, zero at the horizon."""

    def __init__(self, lambda0: float, T: float):
        if lambda0 < 0:
            raise ValueError("lambda0 must be >= 0")
        self.lambda0 = float(lambda0)
        self.T = float(T)

    def __call__(self, t):
        return self.lambda0 * np.clip(1.0 - np.asarray(t, dtype=float) / self.T, 0.0, None)


class MlpDrift:
    """Drift network over features ``[z, parent_1, ..., parent_p, t/T]``."""

    def __init__(self, net: Mlp, T: float):
        self.net = net
        self.T = float(T)

    def _features(self, z, parents, t):
        z = np.asarray(z, dtype=float)
        tau = np.broadcast_to(np.asarray(t, dtype=float) / self.T, z.shape)
        cols = [z] + [np.broadcast_to(p, z.shape) for p in parents] + [tau]
        return np.stack(cols, axis=-1).reshape(-1, len(cols))

    def __call__(self, z, parents, t):
        z = np.asarray(z, dtype=float)
        return forward(self.net, self._features(z, parents, t))[:, 0].reshape(z.shape)

    def dz(self, z, parents, t):
        z = np.asarray(z, dtype=float)
        x = self._features(z, parents, t)
        _, dx = grad(self.net, x, np.ones((x.shape[0], 1)))
        return dx[:, 0].reshape(z.shape)


class MlpDiffusion:
    """Diffusion coefficient ``g(t)`` from a softplus-output network of ``t/T``."""

    def __init__(self, net: Mlp, T: float):
        if net.output != "softplus":
            raise ValueError("diffusion net needs a softplus output to stay positive")
        self.net = net
        self.T = float(T)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return forward(self.net, (t / self.T).reshape(-1, 1))[:, 0].reshape(t.shape)


def zero_drift(z, parents, t):
    return np.zeros_like(np.asarray(z, dtype=float))


zero_drift.dz = lambda z, parents, t: np.zeros_like(np.asarray(z, dtype=float))


@dataclass
class NodeSDE:
    node_id: str
    drift: Callable = zero_drift
    diffusion: Callable = lambda t: np.ones_like(np.asarray(t, dtype=float))
    lam: Callable = lambda t: np.zeros_like(np.asarray(t, dtype=float))
    T: float = 1.0
    steps: int = 32

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if self.steps <= 0 or self.steps % 2:
            raise OddStepCount(f"steps must be a positive even integer, got {self.steps}")
        grid = np.linspace(0.0, self.T, 2 * self.steps + 1)
        if np.any(np.asarray(self.lam(grid)) < 0):
            raise ValueError("lambda schedule must be non-negative on [0, T]")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    def g(self, t):
        return np.asarray(self.diffusion(t), dtype=float)


def _pull(z, targets):
    if targets is None:
        return 0.0
    targets = np.asarray(targets, dtype=float)
    return targets.sum(axis=0) - targets.shape[0] * z


def _pull_count(targets) -> int:
    return 0 if targets is None else np.asarray(targets).shape[0]


def _parents_at(parents, j, n, shape):
    out = []
    for p in parents:
        p = np.asarray(p, dtype=float)
        if p.ndim == len(shape) + 1 and p.shape[0] == n + 1:
            out.append(p[j])
        else:
            out.append(p)
    return out


def forward_path(sde: NodeSDE, z0, parents=(), targets=None, seed=None) -> np.ndarray:
    """Euler-Maruyama forward trajectory ``(steps + 1, *z0.shape)``.

    ``parents`` entries are static fields or paths on the same time grid.
    ``seed`` may be an int, a Generator, or a list of Generators (one per
    leading row of ``z0``, for per-trajectory streams).
    """
    z = np.array(z0, dtype=float)
    n, dt = sde.steps, sde.dt
    draw = _noise_source(seed, z.shape)
    traj = np.empty((n + 1,) + z.shape)
    traj[0] = z
    for j in range(n):
        t = j * dt
        par = _parents_at(parents, j, n, z.shape)
        drift = sde.drift(z, par, t) + sde.lam(t) * _pull(z, targets)
        z = z + drift * dt + sde.g(t) * math.sqrt(dt) * draw()
        if not np.all(np.isfinite(z)):
            raise NonFiniteState("forward path diverged", step=j + 1)
        traj[j + 1] = z
    return traj


def _noise_source(seed, shape):
    if isinstance(seed, (list, tuple)):
        gens = list(seed)
        if len(gens) != shape[0]:
            raise ValueError("need one generator per leading row")
        return lambda: np.stack([g.standard_normal(shape[1:]) for g in gens])
    rng = np.random.default_rng(seed)
    return lambda: rng.standard_normal(shape)


def _drift_dz(drift, z, parents, t):
    if hasattr(drift, "dz"):
        return drift.dz(z, parents, t)
    h = 1e-4 * (1.0 + np.abs(z))
    return (drift(z + h, parents, t) - drift(z - h, parents, t)) / (2 * h)


def kernel_mu(sde: NodeSDE, z0, t=None, parents=(), targets=None, n_steps=None,
              path=False, tangent=False):
    """Noiseless Euler recursion for the kernel mean ``mu(t, z0)``.

    ``[0, t]`` is split into ``n_steps`` (default ``sde.steps``) pieces; ``t``
    may be an array matching the leading axis of ``z0`` for per-sample times.
    With ``tangent`` the cellwise derivative ``d mu / d z0`` is returned too.
    """
    mu = np.array(z0, dtype=float)
    n = sde.steps if n_steps is None else int(n_steps)
    t = sde.T if t is None else t
    t_arr = np.asarray(t, dtype=float)
    dt = t_arr / n if n else t_arr * 0.0
    if t_arr.ndim:
        dt = dt.reshape(dt.shape + (1,) * (mu.ndim - dt.ndim))
    deriv = np.ones_like(mu)
    k = _pull_count(targets)
    out = [mu] if path else None
    for j in range(n):
        s = j * dt
        par = _parents_at(parents, j, n, mu.shape)
        lam = sde.lam(s)
        step = sde.drift(mu, par, s) + lam * _pull(mu, targets)
        if tangent:
            deriv = deriv * (1.0 + (_drift_dz(sde.drift, mu, par, s) - lam * k) * dt)
        mu = mu + step * dt
        if not np.all(np.isfinite(mu)):
            raise NonFiniteState("kernel mean diverged", step=j + 1)
        if path:
            out.append(mu)
    res = np.stack(out) if path else mu
    return (res, deriv) if tangent else res


def joint_kernel_mu(sdes: dict, parent_ids: dict, order, z0s: dict, targets: dict, t,
                    n_steps=None) -> dict:
    """Co-evolved kernel means: each node's drift sees its parents' running means."""
    mus = {k: np.array(z0s[k], dtype=float) for k in order}
    sde0 = sdes[order[0]]
    n = sde0.steps if n_steps is None else int(n_steps)
    t_arr = np.asarray(t, dtype=float)
    for node_id in order:
        if sdes[node_id].steps != sde0.steps or sdes[node_id].T != sde0.T:
            raise ValueError("co-evolved nodes must share the time grid")
    dt = t_arr / n
    if t_arr.ndim:
        dt = dt.reshape(dt.shape + (1,) * (mus[order[0]].ndim - dt.ndim))
    for j in range(n):
        s = j * dt
        new = {}
        for node_id in order:
            sde = sdes[node_id]
            mu = mus[node_id]
            par = [mus[p] for p in parent_ids.get(node_id, ())]
            step = sde.drift(mu, par, s) + sde.lam(s) * _pull(mu, targets.get(node_id))
            new[node_id] = mu + step * dt
            if not np.all(np.isfinite(new[node_id])):
                raise NonFiniteState(f"kernel mean of {node_id!r} diverged", step=j + 1)
        mus = new
    return mus


def simpson_weights(n: int) -> np.ndarray:
    if n <= 0 or n % 2:
        raise OddStepCount(f"Simpson's rule needs an even step count, got {n}")
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


def kernel_sigma(sde: NodeSDE, t=None, n_steps=None):
    """Composite Simpson estimate of ``int_0^t g(r)^2 dr`` (same for every cell)."""
    n = sde.steps if n_steps is None else int(n_steps)
    w = simpson_weights(n)
    t = sde.T if t is None else t
    t_arr = np.asarray(t, dtype=float)
    times = t_arr[..., None] * (np.arange(n + 1) / n)
    g2 = sde.g(times) ** 2
    return (g2 @ w) * (t_arr / n)


@dataclass
class PerturbationKernel:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), self.mu.shape)


def sample_perturbed(kernel: PerturbationKernel, seed=None):
    """Reparameterised draw ``z_t = mu + sqrt(Sigma) * eps``; returns ``(z_t, eps)``."""
    if np.any(kernel.sigma < 0):
        raise NegativeVariance("perturbation kernel has a negative variance")
    eps = np.random.default_rng(seed).standard_normal(kernel.mu.shape)
    return kernel.mu + np.sqrt(kernel.sigma) * eps, eps


def time_weight(t):
    """``gamma(t) = 1 / (1 + t)``."""
    return 1.0 / (1.0 + np.asarray(t, dtype=float))


def _expand(a, like):
    a = np.asarray(a, dtype=float)
    return a.reshape(a.shape + (1,) * (np.ndim(like) - a.ndim))


def dsm_terms(s, t, eps, sigma):
    """DSM loss and its gradient w.r.t. the score values ``s`` (batch on axis 0).

    Per sample: ``gamma(t) * sum_cells Sigma * (s + eps / sqrt(Sigma))**2``.
    """
    s = np.asarray(s, dtype=float)
    sigma = np.broadcast_to(_expand(sigma, s), s.shape)
    if np.any(sigma <= 0):
        raise ZeroVariance("diffusion time below the variance floor")
    gam = np.broadcast_to(_expand(time_weight(t), s), s.shape)
    resid = s + eps / np.sqrt(sigma)
    per = gam * sigma * resid**2
    b = s.shape[0] if s.ndim else 1
    loss = per.reshape(b, -1).sum(axis=1).mean()
    return loss, 2.0 * gam * sigma * resid / b


def dsm_loss(score, t, z_t, eps, sigma) -> float:
    """Weighted denoising score matching loss of ``score(z_t, t)``."""
    return float(dsm_terms(score(z_t, t), t, eps, sigma)[0])


class ScoreModel:
    """Cellwise score network ``s(z, t)`` with variance-aware scaling.

    The net sees ``[(z - shift) * c(t), t/T]`` and its output is multiplied by
    ``c(t) = 1 / sqrt(Sigma(t) + data_var)``, which keeps inputs and targets of
    order one across diffusion times. ``shift`` may be a per-cell field, so a
    net trained on residuals about one mean serves any other mean.
    """

    def __init__(self, net: Mlp, sde: NodeSDE, shift=0.0, data_var: float = 1.0):
        self.net = net
        self.sde = sde
        self.shift = np.asarray(shift, dtype=float)
        self.data_var = float(data_var)
        self._sigma_cache: dict[float, float] = {}

    def sigma(self, t):
        t_arr = np.asarray(t, dtype=float)
        if t_arr.ndim == 0:
            key = float(t_arr)
            if key not in self._sigma_cache:
                self._sigma_cache[key] = float(kernel_sigma(self.sde, key))
            return self._sigma_cache[key]
        return kernel_sigma(self.sde, t_arr)

    def _scale(self, t, z):
        return _expand(1.0 / np.sqrt(self.sigma(t) + self.data_var), z)

    def _features(self, z, t):
        c = self._scale(t, z)
        u = (z - self.shift) * c
        tau = np.broadcast_to(_expand(np.asarray(t, dtype=float) / self.sde.T, z), z.shape)
        return np.stack([u, tau], axis=-1).reshape(-1, 2), c

    def __call__(self, z, t):
        z = np.asarray(z, dtype=float)
        x, c = self._features(z, t)
        return forward(self.net, x)[:, 0].reshape(z.shape) * c

    def dz(self, z, t):
        """Cellwise derivative ``d s / d z``."""
        z = np.asarray(z, dtype=float)
        x, c = self._features(z, t)
        _, dx = grad(self.net, x, np.ones((x.shape[0], 1)))
        return dx[:, 0].reshape(z.shape) * c * c

    def value_and_dz(self, z, t):
        return self(z, t), self.dz(z, t)

    def loss_and_grads(self, z_t, t, eps, sigma):
        x, c = self._features(z_t, t)
        out = forward(self.net, x)[:, 0].reshape(z_t.shape)
        loss, ds = dsm_terms(out * c, t, eps, sigma)
        grads, _ = grad(self.net, x, (ds * c).reshape(-1, 1))
        return loss, grads


@dataclass
class ScoreDataset:
    """Per-cell training starts for one node plus whatever co-evolves with it.

    ``z0[k]`` and ``targets[k]`` (shape ``(K, n)`` or ``None``) are given for
    the node and every ancestor its drift depends on; ``parent_ids`` wires them.
    """

    node_id: str
    z0: dict
    targets: dict = field(default_factory=dict)
    parent_ids: dict = field(default_factory=dict)
    order: list = field(default_factory=list)

    def __post_init__(self):
        if not self.order:
            self.order = [self.node_id]
        self.z0 = {k: np.asarray(v, dtype=float).ravel() for k, v in self.z0.items()}
        sizes = {v.size for v in self.z0.values()}
        if len(sizes) != 1:
            raise ValueError("every co-evolved start array must have the same length")

    def __len__(self):
        return self.z0[self.node_id].size

    @classmethod
    def single(cls, node_id, z0, targets=None) -> "ScoreDataset":
        tg = {} if targets is None else {node_id: np.asarray(targets, dtype=float)}
        return cls(node_id, {node_id: z0}, tg)

    def subset(self, idx):
        z0 = {k: v[idx] for k, v in self.z0.items()}
        tg = {k: (None if v is None else v[:, idx]) for k, v in self.targets.items()}
        return z0, tg


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1024
    lr: float = 3e-3
    seed: int = 0
    hidden: tuple = (32, 32)
    t_min_frac: float = 1e-3
    steps_per_epoch: int | None = 50
    eval_size: int = 2048
    lr_decay: float = 0.97


def _sample_kernel(sdes, dataset, idx, t, rng):
    z0, tg = dataset.subset(idx)
    mus = joint_kernel_mu(sdes, dataset.parent_ids, dataset.order, z0, tg, t)
    mu = mus[dataset.node_id]
    sigma = kernel_sigma(sdes[dataset.node_id], t)
    eps = rng.standard_normal(mu.shape)
    return mu + np.sqrt(sigma) * eps, eps, sigma


def train_score(sde, dataset: ScoreDataset, config: TrainConfig | None = None,
                sdes: dict | None = None):
    """Fit a cellwise score net by denoising score matching.

    Returns ``(ScoreModel, losses)`` where ``losses[e]`` is the DSM loss after
    epoch ``e`` on a fixed evaluation batch (common random numbers keep the
    curve comparable across epochs); ``losses[0]`` is the untrained loss.
    """
    config = config or TrainConfig()
    sdes = dict(sdes or {})
    sdes[dataset.node_id] = sde
    rng = np.random.default_rng(config.seed)
    data = dataset.z0[dataset.node_id]
    n = len(dataset)
    net = Mlp.init([2, *config.hidden, 1], seed=rng.integers(2**63), zero_last=False)
    net.weights[-1] *= 0.1
    model = ScoreModel(net, sde, shift=float(data.mean()), data_var=max(float(data.var()), 1e-4))
    t_min = config.t_min_frac * sde.T

    eval_idx = rng.integers(0, n, size=min(config.eval_size, max(n, config.batch_size)))
    eval_t = rng.uniform(t_min, sde.T, size=eval_idx.size)
    eval_zt, eval_eps, eval_sigma = _sample_kernel(sdes, dataset, eval_idx, eval_t, rng)

    def evaluate():
        return float(dsm_terms(model(eval_zt, eval_t), eval_t, eval_eps, eval_sigma)[0])

    opt = Optimizer(lr=config.lr, precond="rms")
    losses = [evaluate()]
    steps = config.steps_per_epoch or max(1, n // config.batch_size)
    for _ in range(config.epochs):
        for _ in range(steps):
            idx = rng.integers(0, n, size=config.batch_size)
            t = rng.uniform(t_min, sde.T, size=config.batch_size)
            z_t, eps, sigma = _sample_kernel(sdes, dataset, idx, t, rng)
            loss, grads = model.loss_and_grads(z_t, t, eps, sigma)
            if not np.isfinite(loss):
                raise Diverged("score matching loss is not finite")
            model.net = sgd_step(model.net, grads, opt)
        opt.lr *= config.lr_decay
        losses.append(evaluate())
        if not np.isfinite(losses[-1]):
            raise Diverged("score matching loss is not finite")
    return model, losses

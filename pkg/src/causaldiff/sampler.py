"""Reverse-time posterior sampling, KDE entropy, ELBO and the outer fit loop.

Nodes are sampled in topological order. Trajectory ``m`` of a child
conditions on trajectory ``m`` of each parent, and every trajectory draws its
noise from its own stream ``default_rng([seed, node_index, m])``, so results
do not depend on how trajectories are grouped or threaded.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .causal_score import EvidenceTerm, conditional_score
from .diffusion import NodeSDE, _pull, forward_path, kernel_mu, zero_drift
from .errors import (
    DegenerateEnsembleWarning,
    Diverged,
    MaxIterationsWarning,
    NonFiniteState,
    NoObservationWarning,
    SingularCovariance,
    TrainingMissing,
)
from .graph import CausalGraph, cell_moments, node_moments
from .multires import (
    Grid,
    ObservationSource,
    _ratio,
    coarsen,
    finest,
    init_child,
    phi_map,
)

H_MIN = 1e-6
LOG_2PI = math.log(2 * math.pi)


@dataclass
class Model:
    """Everything inference needs: graph, per-node SDEs and scores, sources."""

    graph: CausalGraph
    sdes: dict
    sources: list = field(default_factory=list)
    scores: dict = field(default_factory=dict)
    base_shape: tuple = (1, 1)
    base_cell_size: float = 1.0

    def __post_init__(self):
        self.base_shape = tuple(int(v) for v in self.base_shape)
        d = self.base_shape[0] * self.base_shape[1]
        for node in self.graph.nodes:
            if node.dim != d:
                raise ValueError(f"node {node.id!r} has {node.dim} cells, base grid has {d}")
        for src in self.sources:
            if src.node_id not in self.graph.ids:
                raise ValueError(f"source {src.id!r} attached to unknown node {src.node_id!r}")
            _ratio(src.cell_size, self.base_cell_size)

    @property
    def n_cells(self) -> int:
        return self.base_shape[0] * self.base_shape[1]

    def sources_for(self, node_id, observed_only=True) -> list[ObservationSource]:
        return [s for s in self.sources
                if s.node_id == node_id and (s.grid is not None or not observed_only)]

    def factor(self, src: ObservationSource) -> int:
        return _ratio(src.cell_size, self.base_cell_size)


# --------------------------------------------------------------- single steps

def reverse_step(z, t, dt, sde: NodeSDE, score, parents=(), targets=None, noise=None, seed=None):
    """One reverse-time Euler-Maruyama step from ``t`` to ``t - dt``.

    ``z' = z - [f + lam * pull - g^2 * score] dt + g sqrt(dt) eps`` where
    ``score`` is the (conditional) score value at ``(z, t)``.
    """
    z = np.asarray(z, dtype=float)
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal(z.shape)
    g = sde.g(t)
    drift = sde.drift(z, parents, t) + sde.lam(t) * _pull(z, targets) - g**2 * score
    out = z - drift * dt + g * math.sqrt(dt) * noise
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"reverse step at t={t:.6g} produced non-finite values")
    return out


def langevin_correct(z, t, score, sigma, kappa, seed=None, noise=None, preconditioned=True):
    """Langevin corrector ``z + kappa*S*s + sqrt(2*kappa)*S^(1/2)*eps``.

    ``score`` is a value or a callable ``score(z, t)``. With
    ``preconditioned`` the drift is scaled by ``S = sigma`` as well as the
    noise, making it a Langevin step of size ``kappa * sigma`` that leaves the
    target invariant; otherwise the drift is ``kappa * s`` and the two
    coincide at ``sigma = 1``.
    """
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    z = np.asarray(z, dtype=float)
    if kappa == 0:
        return z.copy()
    s = score(z, t) if callable(score) else np.asarray(score, dtype=float)
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal(z.shape)
    sigma = np.asarray(sigma, dtype=float)
    pre = sigma if preconditioned else 1.0
    return z + kappa * pre * s + np.sqrt(2 * kappa * sigma) * noise


# ---------------------------------------------------------------- ensembles

def scott_bandwidth(samples) -> np.ndarray:
    """Per-dimension ``M^(-1/5) * std`` (D = 1 per location), floored at ``H_MIN``."""
    samples = np.asarray(samples, dtype=float)
    m = samples.shape[0]
    std = samples.std(axis=0, ddof=1) if m > 1 else np.zeros(samples.shape[1:])
    h = m ** (-1.0 / 5.0) * std
    if np.any(h < H_MIN):
        warnings.warn("ensemble has (near) zero spread; bandwidth floored", DegenerateEnsembleWarning)
        h = np.maximum(h, H_MIN)
    return h


@dataclass
class PosteriorEnsemble:
    node_id: str
    samples: np.ndarray
    bandwidth: np.ndarray | None = None
    trajectories: np.ndarray | None = None
    flags: tuple = ()

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[0] < 2:
            raise ValueError(f"ensemble {self.node_id!r} needs M >= 2 samples")
        if not np.all(np.isfinite(self.samples)):
            raise NonFiniteState(f"ensemble {self.node_id!r} has non-finite samples")
        if self.bandwidth is None:
            self.bandwidth = scott_bandwidth(self.samples)

    @property
    def M(self) -> int:
        return self.samples.shape[0]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def var(self) -> np.ndarray:
        return self.samples.var(axis=0, ddof=1)


def kde_logdensity(ensemble, z, bandwidth=None) -> np.ndarray:
    """Gaussian-kernel log density, one independent 1-D KDE per location.

    ``ensemble`` is a PosteriorEnsemble or an ``(M,)`` / ``(M, d)`` array;
    ``z`` has shape ``(..., d)`` (or ``(...)`` for 1-D samples).
    """
    if isinstance(ensemble, PosteriorEnsemble):
        samples, h = ensemble.samples, ensemble.bandwidth if bandwidth is None else bandwidth
    else:
        samples = np.asarray(ensemble, dtype=float)
        h = bandwidth
    flat = samples.ndim == 1
    if flat:
        samples = samples[:, None]
        z = np.asarray(z, dtype=float)[..., None]
    z = np.asarray(z, dtype=float)
    if h is None:
        h = scott_bandwidth(samples)
    h = np.asarray(h, dtype=float)
    if np.any(h <= 0):
        raise ValueError("bandwidth must be positive")
    m = samples.shape[0]
    u = (z[..., None, :] - samples) / h
    out = logsumexp(-0.5 * u * u, axis=-2) - math.log(m) - np.log(h) - 0.5 * LOG_2PI
    return out[..., 0] if flat else out


# --------------------------------------------------------------- ELBO terms

def likelihood_term(log_y, mean, var):
    """Log-normal log density of ``y = exp(log_y)``, summed over the last axis.

    ``mean`` and ``var`` are the moments ``C`` and ``D`` of ``log y``; the
    ``-log y`` Jacobian is included.
    """
    log_y = np.asarray(log_y, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise SingularCovariance("log-normal variance must be positive")
    r = log_y - mean
    per = -0.5 * (LOG_2PI + np.log(var)) - 0.5 * r * r / var - log_y
    return per.sum(axis=-1) if per.ndim else per


def _gauss_logpdf(x, mean, var):
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise SingularCovariance("Gaussian variance must be positive")
    r = x - mean
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * r * r / var


def prior_term(graph: CausalGraph, latents: dict, per_node=False):
    """Average over samples of ``sum_i sum_cells log p(z_i | parents)``.

    ``latents[node]`` has shape ``(M, d)``; roots use their per-cell marginal
    ``N(prior_mean, prior_var)``, children the structural conditional.
    """
    parts = {}
    for node_id in graph.topo_order:
        node = graph[node_id]
        z = np.atleast_2d(latents[node_id])
        parents = graph.parents(node_id)
        if parents:
            mean = node.intercept + sum(a * np.atleast_2d(latents[p])
                                        for a, p in zip(node.coeffs, parents))
            lp = _gauss_logpdf(z, mean, node.sigma**2)
        else:
            lp = _gauss_logpdf(z, node.prior_mean, node.prior_var)
        parts[node_id] = float(lp.sum(axis=-1).mean())
    total = sum(parts.values())
    return (total, parts) if per_node else total


def source_moments(model: Model, src: ObservationSource, latents: dict, latent_var=None):
    """Moments ``(C, D)`` of ``log y`` on the source grid for every sample.

    ``latent_var`` optionally maps node ids to per-cell kernel variances at
    the source's observation time (zero at ``t = 0``).
    """
    r = model.factor(src)
    mean = src.theta0
    var = src.eta**2
    for p, coef in src.theta.items():
        z = np.atleast_2d(latents[p])
        blocks = coarsen(z.reshape(z.shape[0], *model.base_shape), r).reshape(z.shape[0], -1)
        mean = mean + coef * blocks
        if latent_var is not None and p in latent_var:
            v = np.broadcast_to(latent_var[p], (model.n_cells,)).reshape(model.base_shape)
            var = var + coef**2 * coarsen(v, r).ravel() / r**2
    return mean, np.broadcast_to(var, np.shape(mean))


@dataclass
class ElboReport:
    likelihood_term: float
    prior_term: float
    entropy_term: float
    per_node: dict = field(default_factory=dict)
    elbo: float = field(init=False)

    def __post_init__(self):
        self.elbo = self.likelihood_term + self.prior_term + self.entropy_term


def elbo(model: Model, ensembles: dict) -> ElboReport:
    """ELBO averaged over locations and samples.

    Term one sums log-normal densities over every observed source cell, term
    two the causal prior, and the entropy term is minus the per-location KDE
    log density evaluated at the ensemble's own samples (leave-self-in).
    """
    latents = {k: e.samples for k, e in ensembles.items()}
    L = model.n_cells
    per_node = {k: [0.0, 0.0, 0.0] for k in model.graph.ids}
    for src in model.sources:
        if src.grid is None:
            continue
        C, D = source_moments(model, src, latents)
        t1 = float(likelihood_term(np.log(src.grid.values).ravel(), C, D).mean())
        per_node[src.node_id][0] += t1 / L
    _, prior_parts = prior_term(model.graph, latents, per_node=True)
    for k, v in prior_parts.items():
        per_node[k][1] = v / L
    for k, ens in ensembles.items():
        logq = kde_logdensity(ens, ens.samples)
        per_node[k][2] = -float(logq.sum(axis=-1).mean()) / L
    totals = [math.fsum(v[i] for v in per_node.values()) for i in range(3)]
    if not all(np.isfinite(totals)):
        raise Diverged("ELBO is not finite")
    return ElboReport(*totals, per_node={k: tuple(v) for k, v in per_node.items()})


# --------------------------------------------------------- posterior sampling

@dataclass
class SamplerConfig:
    M: int = 64
    seed: int = 0
    kappa: float = 0.05
    langevin: bool = True
    reverse_guidance: bool = True
    stabilized: bool = True
    evidence: bool = True
    threads: int = 1
    chunk: int = 16
    keep_trajectories: bool = False


@dataclass
class _NodePlan:
    index: int
    node_id: str
    sde: NodeSDE
    score: object
    parent_ids: list
    parent_samples: list
    parent_sdes: list
    parent_targets: list
    root_init: np.ndarray | None
    init_source: ObservationSource | None
    context: dict
    targets: np.ndarray | None
    evidence: list
    moments: object
    self_var: np.ndarray
    flags: tuple


def _context(model: Model, ensembles: dict, means: dict) -> dict:
    """Current best field for every node: ensemble mean if sampled, else prior mean."""
    return {k: (ensembles[k].mean() if k in ensembles else means[k]) for k in model.graph.ids}


def _grid_ctx(model, ctx):
    return {k: Grid(np.asarray(v).reshape(model.base_shape), model.base_cell_size)
            for k, v in ctx.items()}


def node_targets(model: Model, node_id, ctx) -> np.ndarray | None:
    """Stacked ``phi`` fields ``(K, d)`` of the node's observed sources."""
    srcs = [s for s in model.sources_for(node_id) if s.theta_self != 0]
    if not srcs:
        return None
    gctx = _grid_ctx(model, ctx)
    return np.stack([phi_map(s.grid, gctx, s, model.base_cell_size).ravel() for s in srcs])


def node_evidence(model: Model, node_id, ctx) -> list[EvidenceTerm]:
    terms = []
    for src in model.sources_for(node_id):
        if src.theta_self == 0:
            continue
        r = model.factor(src)
        offset = src.theta0
        for p in src.other_parents:
            field_ = np.asarray(ctx[p]).reshape(model.base_shape)
            offset = offset + src.theta[p] * coarsen(field_, r).ravel()
        terms.append(EvidenceTerm(np.log(src.grid.values).ravel(), src.theta_self, offset,
                                  src.eta, r, model.base_shape))
    return terms


def _plan(model: Model, node_id, index, ensembles, means, covs_diag, config: SamplerConfig):
    graph = model.graph
    node = graph[node_id]
    if node_id not in model.scores:
        raise TrainingMissing(f"no trained score for node {node_id!r}")
    ctx = _context(model, ensembles, means)
    parent_ids = graph.parents(node_id)
    srcs = [s for s in model.sources_for(node_id) if s.theta_self != 0]
    flags = []
    targets = node_targets(model, node_id, ctx)
    root_init = None
    init_source = finest(srcs)
    if not parent_ids:
        if init_source is None:
            warnings.warn(f"node {node_id!r} unobserved; starting at prior mean",
                          NoObservationWarning)
            root_init = node.prior_mean.copy()
        else:
            gctx = _grid_ctx(model, ctx)
            root_init = phi_map(init_source.grid, gctx, init_source, model.base_cell_size).ravel()
    if init_source is None:
        flags.append("unobserved")
    moments = node_moments(graph, node_id, (means, covs_diag[1])) if parent_ids else None
    return _NodePlan(
        index=index, node_id=node_id, sde=model.sdes[node_id], score=model.scores[node_id],
        parent_ids=parent_ids,
        parent_samples=[ensembles[p].samples for p in parent_ids],
        parent_sdes=[model.sdes[p] for p in parent_ids],
        parent_targets=[node_targets(model, p, ctx) for p in parent_ids],
        root_init=root_init, init_source=init_source, context=ctx,
        targets=targets,
        evidence=node_evidence(model, node_id, ctx) if config.evidence else [],
        moments=moments, self_var=covs_diag[0][node_id], flags=tuple(flags),
    )


def _mean_fn(plan: _NodePlan, parents, t):
    sde = plan.sde
    if sde.drift is zero_drift and plan.targets is None:
        return None
    if sde.drift is zero_drift:
        par = ()
    else:
        par = [kernel_mu(ps, p, t=t, targets=pt, path=True)
               for ps, p, pt in zip(plan.parent_sdes, parents, plan.parent_targets)]

    def fn(z0):
        return kernel_mu(sde, z0, t=t, parents=par, targets=plan.targets, tangent=True)

    return fn


def _run_chunk(plan: _NodePlan, model: Model, rows, config: SamplerConfig):
    sde = plan.sde
    d = model.n_cells
    gens = [np.random.default_rng([config.seed, plan.index, int(m)]) for m in rows]

    def noise():
        return np.stack([g.standard_normal(d) for g in gens])

    parents = [p[rows] for p in plan.parent_samples]
    node = model.graph[plan.node_id]
    if plan.parent_ids:
        eps = noise() if node.noise_weight else None
        z = init_child(node, parents, source=plan.init_source,
                       context=_grid_ctx(model, plan.context) if plan.init_source else None,
                       base_shape=model.base_shape, base_cell_size=model.base_cell_size, eps=eps)
        z = np.broadcast_to(z, (len(rows), d)).copy()
    else:
        z = np.broadcast_to(plan.root_init, (len(rows), d)).copy()

    parent_paths = [kernel_mu(ps, p, targets=pt, path=True)
                    for ps, p, pt in zip(plan.parent_sdes, parents, plan.parent_targets)]
    z = _forward_end(sde, z, parent_paths, plan.targets, gens)
    pvals = np.stack(parents, axis=-1) if parents else None
    guide = plan.targets if config.reverse_guidance else None

    def cond(z, t):
        return conditional_score(
            z, t, plan.score, plan.score.sigma(t), parent_values=pvals, moments=plan.moments,
            evidence=plan.evidence, self_var=plan.self_var, mean_fn=_mean_fn(plan, parents, t),
            stabilized=config.stabilized,
        )

    n, dt = sde.steps, sde.dt
    traj = [z] if config.keep_trajectories else None
    for j in range(n, 0, -1):
        t = j * dt
        z = reverse_step(z, t, dt, sde, cond(z, t), parents=[p[j] for p in parent_paths],
                         targets=guide, noise=noise())
        t_new = (j - 1) * dt
        if config.langevin and config.kappa > 0 and t_new > 0:
            z = langevin_correct(z, t_new, cond(z, t_new), plan.score.sigma(t_new),
                                 config.kappa, noise=noise())
            if not np.all(np.isfinite(z)):
                raise NonFiniteState(f"Langevin correction at t={t_new:.6g} diverged")
        if traj is not None:
            traj.append(z)
    return z, (np.stack(traj) if traj is not None else None)


def _forward_end(sde, z0, parent_paths, targets, gens):
    return forward_path(sde, z0, parents=parent_paths, targets=targets, seed=gens)[-1]


def sample_posterior(model: Model, config: SamplerConfig | None = None, nodes=None) -> dict:
    """``M`` reverse trajectories per node, parents before children.

    ``nodes`` restricts sampling to a prefix-closed subset of the graph.
    Trajectories run in fixed chunks of ``config.chunk`` on up to
    ``config.threads`` workers; chunking never changes the numbers.
    """
    config = config or SamplerConfig()
    if config.M < 2:
        raise ValueError("M must be at least 2")
    means, covs = cell_moments(model.graph)
    order = model.graph.topo_order
    diag = {k: covs[:, i, i] for i, k in enumerate(order)}
    wanted = order if nodes is None else [k for k in order if k in set(nodes)]
    ensembles: dict[str, PosteriorEnsemble] = {}
    chunks = [np.arange(i, min(i + config.chunk, config.M)) for i in range(0, config.M, config.chunk)]
    for node_id in wanted:
        plan = _plan(model, node_id, order.index(node_id), ensembles, means, (diag, covs), config)
        if config.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                parts = list(pool.map(lambda r: _run_chunk(plan, model, r, config), chunks))
        else:
            parts = [_run_chunk(plan, model, r, config) for r in chunks]
        samples = np.concatenate([p[0] for p in parts])
        trajs = np.concatenate([p[1] for p in parts], axis=1) if config.keep_trajectories else None
        ensembles[node_id] = PosteriorEnsemble(node_id, samples, trajectories=trajs, flags=plan.flags)
    return ensembles


# ------------------------------------------------------------------- fitting

@dataclass
class FitConfig:
    iterations: int = 20
    lr: float = 1.0
    params: tuple = ("theta0", "theta", "causal")
    tol: float = 1e-3
    window: int = 10
    retrain_every: int = 0


@dataclass
class FitResult:
    model: Model
    trace: list
    converged: bool
    best_model: Model | None = None
    best_elbo: float = -np.inf


def _with_params(model: Model, sources, nodes) -> Model:
    graph = CausalGraph(nodes, model.graph.edges)
    return replace(model, graph=graph, sources=sources)


def _update_sources(model, latents, params, lr):
    out = []
    for src in model.sources:
        if src.grid is None:
            out.append(src)
            continue
        log_y = np.log(src.grid.values).ravel()
        theta0, theta = src.theta0, dict(src.theta)
        if "theta0" in params:
            C, D = source_moments(model, replace(src, theta0=theta0, theta=theta), latents)
            g = float(((log_y - C) / D).sum(axis=-1).mean())
            h = float((1.0 / D).sum(axis=-1).mean())
            theta0 += lr * g / h
        if "theta" in params:
            r = model.factor(src)
            for p in list(theta):
                C, D = source_moments(model, replace(src, theta0=theta0, theta=theta), latents)
                z = np.atleast_2d(latents[p])
                x = coarsen(z.reshape(z.shape[0], *model.base_shape), r).reshape(z.shape[0], -1)
                g = float(((log_y - C) * x / D).sum(axis=-1).mean())
                h = float((x * x / D).sum(axis=-1).mean())
                if h > 0:
                    theta[p] += lr * g / h
        out.append(replace(src, theta0=theta0, theta=theta))
    return out


def _update_nodes(graph, latents, lr):
    nodes = []
    for node in graph.nodes:
        parents = graph.parents(node.id)
        if not parents or node.sigma == 0:
            nodes.append(node)
            continue
        z = np.atleast_2d(latents[node.id])
        ps = [np.atleast_2d(latents[p]) for p in parents]
        a0, a = node.intercept, list(node.coeffs)

        def resid():
            return z - a0 - sum(c * p for c, p in zip(a, ps))

        a0 += lr * float(resid().sum(axis=-1).mean()) / z.shape[-1]
        for i, p in enumerate(ps):
            g = float((resid() * p).sum(axis=-1).mean())
            h = float((p * p).sum(axis=-1).mean())
            if h > 0:
                a[i] += lr * g / h
        nodes.append(replace(node, intercept=a0, coeffs=tuple(a)))
    return nodes


def fit(model: Model, config: FitConfig | None = None, sampler: SamplerConfig | None = None,
        retrain=None) -> FitResult:
    """Coordinate ascent on the ELBO over observation and causal parameters.

    Each iteration samples the posterior under the current parameters, then
    takes diagonally preconditioned steps (inverse curvature times ``lr``) on
    the closed-form likelihood and prior terms with the samples held fixed.
    ``retrain(model) -> model`` refreshes the score nets every
    ``retrain_every`` iterations when given. Stops when parameters settle or
    the windowed ELBO average stops moving; otherwise warns with
    ``MaxIterationsWarning`` and returns the best model seen.
    """
    config = config or FitConfig()
    sampler = sampler or SamplerConfig()
    trace: list[ElboReport] = []
    best, best_elbo = model, -np.inf
    converged = config.iterations == 0
    for it in range(config.iterations):
        if retrain is not None and config.retrain_every and it % config.retrain_every == 0:
            model = retrain(model)
        ens = sample_posterior(model, sampler)
        rep = elbo(model, ens)
        trace.append(rep)
        if rep.elbo > best_elbo:
            best, best_elbo = model, rep.elbo
        latents = {k: e.samples for k, e in ens.items()}
        sources = _update_sources(model, latents, config.params, config.lr)
        nodes = (_update_nodes(model.graph, latents, config.lr) if "causal" in config.params
                 else list(model.graph.nodes))
        new = _with_params(model, sources, nodes)
        step = _param_change(model, new)
        model = new
        if step < config.tol:
            converged = True
            break
        w = config.window
        if len(trace) >= 2 * w:
            now = np.mean([r.elbo for r in trace[-w:]])
            prev = np.mean([r.elbo for r in trace[-2 * w:-w]])
            if abs(now - prev) < config.tol * (1.0 + abs(now)):
                converged = True
                break
    if not converged:
        warnings.warn(f"fit stopped after {config.iterations} iterations without settling",
                      MaxIterationsWarning)
        return FitResult(best, trace, False, best, best_elbo)
    return FitResult(model, trace, True, best, best_elbo)


def parameters(model: Model) -> dict:
    """Flat view of the fitted parameters (for traces and drift checks)."""
    out = {}
    for src in model.sources:
        out[f"{src.id}.theta0"] = src.theta0
        for p, v in src.theta.items():
            out[f"{src.id}.theta.{p}"] = v
    for node in model.graph.nodes:
        if model.graph.parents(node.id):
            out[f"{node.id}.a0"] = node.intercept
            for p, v in zip(model.graph.parents(node.id), node.coeffs):
                out[f"{node.id}.a.{p}"] = v
    return out


def _param_change(old: Model, new: Model) -> float:
    a, b = parameters(old), parameters(new)
    return max((abs(b[k] - a[k]) / (1.0 + abs(a[k])) for k in a), default=0.0)

"""Glue from a scenario config to trained models, posteriors and metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import (
    LinearDecay,
    MlpDiffusion,
    MlpDrift,
    NodeSDE,
    ScoreDataset,
    TrainConfig,
    train_score,
    zero_drift,
)
from .graph import cell_moments, sample_prior
from .multires import Grid, finest, init_child
from .neuralnet import Mlp
from .sampler import FitConfig, Model, SamplerConfig, elbo, fit, node_targets, sample_posterior
from .diffusion import ScoreModel
from .scenario import (
    Bundle,
    ScenarioConfig,
    _blob_at,
    build_graph,
    evaluate,
    exceedance_map,
    make_sources,
)
from .temporal import GruCell, TemporalTrainConfig, persistence_forecast, rollout, train_cell


def make_sdes(cfg: ScenarioConfig, seed=0) -> dict:
    graph = build_graph(cfg)
    sc = cfg.sde
    out = {}
    for i, node_id in enumerate(graph.topo_order):
        diffusion = MlpDiffusion(Mlp.constant([1, 8, 1], sc.g0, "softplus"), sc.T)
        if sc.drift == "mlp":
            n_in = 2 + len(graph.parents(node_id))
            net = Mlp.init([n_in, *sc.hidden, 1], seed=[seed, 3, i], zero_last=True)
            drift = MlpDrift(net, sc.T)
        else:
            drift = zero_drift
        out[node_id] = NodeSDE(node_id, drift, diffusion, LinearDecay(sc.lambda0, sc.T), sc.T, sc.steps)
    return out


def build_model(cfg: ScenarioConfig, observations: dict | None = None, drop=None,
                prior_means=None, scores=None, sdes=None) -> Model:
    graph = build_graph(cfg, prior_means)
    return Model(graph, sdes or make_sdes(cfg, cfg.seed), make_sources(cfg, observations, drop),
                 dict(scores or {}), cfg.shape, cfg.cell_size)


def train_config(cfg: ScenarioConfig, seed) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, seed=seed,
                       hidden=tuple(t.hidden), steps_per_epoch=t.steps_per_epoch,
                       eval_size=t.eval_size, lr_decay=t.lr_decay)


def score_data(cfg: ScenarioConfig, model: Model, seed) -> dict:
    """Training starts ``(draws, d)`` per node.

    ``prior``: ancestral draws from the causal prior. ``init``: the
    diffusion initialisations (inverse link for observed roots, hybrid starts
    for children) repeated over fresh noise draws.
    """
    graph = model.graph
    draws = cfg.train.draws
    rng = np.random.default_rng([seed, 2])
    if cfg.train.score_data == "prior":
        return sample_prior(graph, rng, size=draws)
    means, _ = cell_moments(graph)
    ctx = dict(means)
    out = {}
    for node_id in graph.topo_order:
        node = graph[node_id]
        parents = graph.parents(node_id)
        if not parents:
            tg = node_targets(model, node_id, ctx)
            base = node.prior_mean if tg is None else tg[0]
            out[node_id] = np.broadcast_to(base, (draws, node.dim)).copy()
        else:
            src = [s for s in model.sources_for(node_id) if s.theta_self != 0]
            f = finest(src)
            gctx = {k: Grid(np.asarray(v).reshape(model.base_shape), model.base_cell_size)
                    for k, v in ctx.items()} if f is not None else None
            out[node_id] = init_child(node, [out[p] for p in parents], source=f, context=gctx,
                                      rng=rng, base_shape=model.base_shape,
                                      base_cell_size=model.base_cell_size, size=draws)
        ctx[node_id] = out[node_id].mean(axis=0)
    return out


def train_scores(cfg: ScenarioConfig, model: Model, seed=None, nodes=None):
    """Fit one score net per node; returns ``(scores, losses)`` dicts."""
    seed = cfg.seed if seed is None else seed
    data = score_data(cfg, model, seed)
    graph = model.graph
    means, _ = cell_moments(graph)
    scores, losses = {}, {}
    for i, node_id in enumerate(graph.topo_order):
        if nodes is not None and node_id not in nodes:
            continue
        order = graph.ancestors(node_id) + [node_id]
        draws = data[node_id].shape[0]
        ctx = dict(means)
        targets = {}
        for k in order:
            tg = node_targets(model, k, ctx)
            targets[k] = None if tg is None else np.tile(tg, (1, draws))
        ds = ScoreDataset(node_id, {k: data[k] for k in order}, targets,
                          {k: graph.parents(k) for k in order}, order)
        scores[node_id], losses[node_id] = train_score(
            model.sdes[node_id], ds, train_config(cfg, seed * 1000 + i), model.sdes)
    return scores, losses


def sampler_config(cfg: ScenarioConfig, seed=None, threads=1) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(M=s.M, seed=cfg.seed if seed is None else seed, kappa=s.kappa,
                         langevin=s.langevin, reverse_guidance=s.reverse_guidance,
                         stabilized=s.stabilized, evidence=s.evidence, threads=threads,
                         chunk=s.chunk)


def fit_config(cfg: ScenarioConfig) -> FitConfig:
    f = cfg.fit
    return FitConfig(iterations=f.iterations, lr=f.lr, params=tuple(f.params), tol=f.tol,
                     window=f.window, retrain_every=f.retrain_every)


@dataclass
class Inference:
    model: Model
    ensembles: dict
    trace: list


def infer(cfg: ScenarioConfig, model: Model, seed=None, threads=1) -> Inference:
    """Optionally fit parameters, then sample the posterior and score it."""
    scfg = sampler_config(cfg, seed, threads)
    trace = []
    if cfg.fit.iterations > 0:
        res = fit(model, fit_config(cfg), scfg)
        model, trace = res.model, res.trace
    ens = sample_posterior(model, scfg)
    trace = trace + [elbo(model, ens)]
    return Inference(model, ens, trace)


def score_nodes(cfg: ScenarioConfig, ensembles: dict, truth: dict) -> dict:
    """Metrics of the posterior mean of every node against its ground truth."""
    q = cfg.evaluate.positive_quantile
    return {k: evaluate(e.mean(), truth[k], truth_quantile=q) for k, e in ensembles.items()}


def probability_maps(cfg: ScenarioConfig, ensembles: dict) -> dict:
    """Exceedance probability of each node's posterior-mean upper quantile."""
    q = cfg.evaluate.positive_quantile
    out = {}
    for k, e in ensembles.items():
        thr = float(np.quantile(e.mean(), q))
        out[k] = exceedance_map(e.samples, thr).reshape(cfg.shape)
    return out


def run_static(cfg: ScenarioConfig, bundle: Bundle, drop=None, seed=None, threads=1,
               scores=None):
    """Train (unless ``scores`` given), infer and evaluate a single-step scenario."""
    model = build_model(cfg, bundle.observations[0], drop=drop, scores=scores)
    losses = {}
    if scores is None:
        model.scores, losses = train_scores(cfg, model, seed)
    inf = infer(cfg, model, seed, threads)
    metrics = score_nodes(cfg, inf.ensembles, {k: v.ravel() for k, v in bundle.truth[0].items()})
    return inf, metrics, losses


# ------------------------------------------------------------------ temporal

def train_temporal(cfg: ScenarioConfig, seed=None):
    """Fit the recurrent cell on blobs drifting with the configured velocity.

    Start position, amplitude and width are jittered per training sequence
    so the cell learns the transport rather than one trajectory.
    """
    tc = cfg.temporal
    seed = cfg.seed if seed is None else seed
    rows, cols = cfg.shape

    def make_truth(rng):
        start = (rng.uniform(0, rows), rng.uniform(0, cols))
        amp = tc.amplitude * rng.uniform(0.75, 1.25)
        width = tc.width * rng.uniform(0.75, 1.25)
        return [_blob_at(cfg.shape, start, tc.velocity, s, amp, width) for s in range(tc.S)]

    tcfg = TemporalTrainConfig(H=tc.hidden, sequences=tc.train_sequences, epochs=tc.epochs,
                               lr=tc.lr, input_noise=tc.input_noise, seed=seed)
    return train_cell(make_truth, tc.S, tcfg)


def shifted_scores(scores: dict, base: ScenarioConfig, prior_means: dict | None) -> dict:
    """Score models re-centred on injected per-cell prior means."""
    if not prior_means:
        return scores
    const = {n.id: n.prior_mean for n in base.nodes}
    out = dict(scores)
    for k, mean in prior_means.items():
        sc = scores[k]
        out[k] = ScoreModel(sc.net, sc.sde, sc.shift + (np.asarray(mean) - const[k]), sc.data_var)
    return out


@dataclass
class RolloutOutput:
    steps: list
    metrics: list


def run_rollout(cfg: ScenarioConfig, bundle: Bundle, scores: dict, cell: GruCell | None,
                seed=None, threads=1, sdes=None):
    """Per-step inference chained through ``cell``, with per-step metrics.

    ``metrics[s]`` holds the posterior metrics per node and, from the second
    step on, ``forecast`` and ``persistence`` reports for each temporal node.
    """
    sdes = sdes or make_sdes(cfg, cfg.seed)
    S = bundle.S

    def infer_step(s, prior):
        model = build_model(cfg, bundle.observations[s], prior_means=prior,
                            scores=shifted_scores(scores, cfg, prior), sdes=sdes)
        return infer(cfg, model, seed, threads).ensembles

    observed = [bool(o) for o in bundle.observations]
    nodes = [n for n in cfg.temporal.nodes]
    steps = rollout(S, infer_step, cell, nodes, cfg.shape, observed)
    q = cfg.evaluate.positive_quantile
    metrics = []
    for s, res in enumerate(steps):
        truth = {k: v.ravel() for k, v in bundle.truth[s].items()}
        m = {"posterior": score_nodes(cfg, res.ensembles, truth)}
        if s > 0:
            m["forecast"] = {k: evaluate(res.prediction[k], truth[k], truth_quantile=q)
                             for k in res.prediction}
            m["persistence"] = {k: evaluate(persistence_forecast(steps, k)[s], truth[k],
                                            truth_quantile=q) for k in res.prediction}
        metrics.append(m)
    return RolloutOutput(steps, metrics)

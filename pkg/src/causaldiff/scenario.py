"""Scenario configs, synthetic ground truth, probability-map classes and metrics.

A scenario is a TOML file (``spec_version = 1``) with tables ``grid``,
``sde``, ``train``, ``sampler``, ``fit``, ``evaluate``, ``ablation`` and
``temporal`` plus arrays of tables ``nodes`` and ``sources``. Unknown keys
are rejected so typos fail loudly. Bundled presets live next to this module.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import average_precision_score

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .errors import (
    ConfigInvalid,
    DegenerateLabels,
    IncommensurateResolutions,
    OutOfRange,
)
from .graph import CausalGraph, LatentNode, sample_prior
from .multires import Grid, ObservationSource, _ratio, observe

SPEC_VERSION = 1
PRESETS = ("earthquake", "hurricane", "wildfire")


@dataclass
class NodeConfig:
    id: str
    parents: list = field(default_factory=list)
    coeffs: list = field(default_factory=list)
    intercept: float = 0.0
    sigma: float = 1.0
    prior_mean: float = 0.0
    prior_var: float = 1.0
    lengthscale: float = 0.0
    obs_weight: float = 0.0
    noise_weight: float = 0.0
    temporal: bool = False


@dataclass
class SourceConfig:
    id: str
    node: str
    cell_size: float = 1.0
    theta0: float = 0.0
    theta: dict = field(default_factory=dict)
    eta: float = 0.1
    resolution_k: int = 0
    obs_time: float = 0.0


@dataclass
class SdeSection:
    T: float = 1.0
    steps: int = 64
    lambda0: float = 0.0
    g0: float = 1.0
    drift: str = "zero"
    hidden: list = field(default_factory=lambda: [32, 32])


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 1024
    lr: float = 3e-3
    steps_per_epoch: int = 50
    lr_decay: float = 0.97
    hidden: list = field(default_factory=lambda: [32, 32])
    eval_size: int = 2048
    score_data: str = "prior"
    draws: int = 8


@dataclass
class SamplerSection:
    M: int = 64
    kappa: float = 0.05
    langevin: bool = True
    reverse_guidance: bool = True
    stabilized: bool = True
    evidence: bool = True
    chunk: int = 16


@dataclass
class FitSection:
    iterations: int = 0
    lr: float = 1.0
    params: list = field(default_factory=lambda: ["theta0", "theta", "causal"])
    tol: float = 1e-3
    window: int = 10
    retrain_every: int = 0


@dataclass
class EvaluateSection:
    positive_quantile: float = 0.8
    scheme: str = "four"


@dataclass
class AblationSection:
    drop_sources: list = field(default_factory=list)


@dataclass
class TemporalSection:
    S: int = 1
    nodes: list = field(default_factory=list)
    hidden: int = 16
    velocity: list = field(default_factory=lambda: [1, 0])
    amplitude: float = 2.0
    width: float = 2.5
    start: list = field(default_factory=lambda: [8.0, 4.0])
    noise: float = 0.1
    missing_steps: list = field(default_factory=list)
    train_sequences: int = 64
    epochs: int = 300
    lr: float = 1e-2
    input_noise: float = 0.15


@dataclass
class ScenarioConfig:
    name: str
    rows: int
    cols: int
    nodes: list
    sources: list = field(default_factory=list)
    cell_size: float = 1.0
    seed: int = 0
    output_dir: str = "runs"
    spec_version: int = SPEC_VERSION
    sde: SdeSection = field(default_factory=SdeSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    fit: FitSection = field(default_factory=FitSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    temporal: TemporalSection = field(default_factory=TemporalSection)

    def __post_init__(self):
        check_config(self)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def active_sources(self, drop=None) -> list[SourceConfig]:
        """Sources minus ``drop``; ``drop=True`` applies the ablation list."""
        if drop is True:
            drop = self.ablation.drop_sources
        drop = set(drop or ())
        return [s for s in self.sources if s.id not in drop]

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{where}: expected a table")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigInvalid(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigInvalid(f"{where}: {exc}") from None


_SECTIONS = {
    "sde": SdeSection, "train": TrainSection, "sampler": SamplerSection, "fit": FitSection,
    "evaluate": EvaluateSection, "ablation": AblationSection, "temporal": TemporalSection,
}


def config_from_dict(data: dict) -> ScenarioConfig:
    data = dict(data)
    if data.get("spec_version") != SPEC_VERSION:
        raise ConfigInvalid(f"spec_version must be {SPEC_VERSION}, got {data.get('spec_version')!r}")
    grid = data.pop("grid", {})
    if not isinstance(grid, dict) or set(grid) - {"rows", "cols", "cell_size"}:
        raise ConfigInvalid("grid: expected rows, cols and optional cell_size")
    if "rows" not in grid or "cols" not in grid:
        raise ConfigInvalid("grid: rows and cols are required")
    nodes = [_build(NodeConfig, n, f"nodes[{i}]") for i, n in enumerate(data.pop("nodes", []))]
    sources = [_build(SourceConfig, s, f"sources[{i}]") for i, s in enumerate(data.pop("sources", []))]
    kw = {k: _build(cls, data.pop(k), k) for k, cls in _SECTIONS.items() if k in data}
    top = {"name", "seed", "output_dir", "spec_version"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigInvalid(f"unknown top-level keys {unknown}")
    if "name" not in data:
        raise ConfigInvalid("name is required")
    return ScenarioConfig(rows=grid["rows"], cols=grid["cols"],
                          cell_size=grid.get("cell_size", 1.0), nodes=nodes, sources=sources,
                          **kw, **data)


def check_config(cfg: ScenarioConfig):
    if not (isinstance(cfg.rows, int) and isinstance(cfg.cols, int) and cfg.rows > 0 and cfg.cols > 0):
        raise ConfigInvalid("grid rows/cols must be positive integers")
    if not cfg.cell_size > 0:
        raise ConfigInvalid("grid cell_size must be positive")
    if not cfg.nodes:
        raise ConfigInvalid("at least one node is required")
    ids = [n.id for n in cfg.nodes]
    for n in cfg.nodes:
        if len(n.coeffs) != len(n.parents):
            raise ConfigInvalid(f"node {n.id!r}: {len(n.coeffs)} coeffs for {len(n.parents)} parents")
        if n.prior_var < 0 or n.sigma < 0 or n.noise_weight < 0:
            raise ConfigInvalid(f"node {n.id!r}: variances and weights must be >= 0")
    for s in cfg.sources:
        if s.node not in ids:
            raise ConfigInvalid(f"source {s.id!r}: unknown node {s.node!r}")
        for p in s.theta:
            if p not in ids:
                raise ConfigInvalid(f"source {s.id!r}: theta names unknown node {p!r}")
        if not s.eta >= 0:
            raise ConfigInvalid(f"source {s.id!r}: eta must be >= 0")
        k = _ratio(s.cell_size, cfg.cell_size)
        if cfg.rows % k or cfg.cols % k:
            raise IncommensurateResolutions(
                f"source {s.id!r}: cell size {s.cell_size} does not tile the {cfg.rows}x{cfg.cols} grid")
    if len({s.id for s in cfg.sources}) != len(cfg.sources):
        raise ConfigInvalid("source ids must be unique")
    for d in cfg.ablation.drop_sources:
        if d not in {s.id for s in cfg.sources}:
            raise ConfigInvalid(f"ablation drops unknown source {d!r}")
    if cfg.evaluate.scheme not in ("four", "five"):
        raise ConfigInvalid("evaluate.scheme must be 'four' or 'five'")
    if not 0 < cfg.evaluate.positive_quantile < 1:
        raise ConfigInvalid("evaluate.positive_quantile must be in (0, 1)")
    if cfg.sde.steps <= 0 or cfg.sde.steps % 2:
        raise ConfigInvalid("sde.steps must be a positive even integer")
    if cfg.sde.drift not in ("zero", "mlp"):
        raise ConfigInvalid("sde.drift must be 'zero' or 'mlp'")
    if cfg.train.score_data not in ("prior", "init"):
        raise ConfigInvalid("train.score_data must be 'prior' or 'init'")
    if cfg.sampler.M < 2:
        raise ConfigInvalid("sampler.M must be at least 2")
    if cfg.temporal.S < 1:
        raise ConfigInvalid("temporal.S must be >= 1")
    for t in cfg.temporal.nodes:
        if t not in ids:
            raise ConfigInvalid(f"temporal node {t!r} is not a graph node")
    build_graph(cfg)


def load_config(path_or_name) -> ScenarioConfig:
    """Parse a scenario file, or a bundled preset by name."""
    text = None
    if str(path_or_name) in PRESETS:
        text = resources.files("causaldiff.presets").joinpath(f"{path_or_name}.toml").read_text()
    else:
        path = Path(path_or_name)
        if not path.is_file():
            raise ConfigInvalid(f"no config file or preset named {str(path_or_name)!r}")
        text = path.read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"{path_or_name}: {exc}") from None
    return config_from_dict(data)


# ------------------------------------------------------------------- graph

def squared_exp_cov(shape, lengthscale: float, var: float, cell_size: float = 1.0) -> np.ndarray:
    """Stationary squared-exponential covariance over grid cell centres."""
    r, c = np.indices(shape)
    pts = np.stack([r.ravel(), c.ravel()], axis=1) * cell_size
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    cov = var * np.exp(-0.5 * d2 / lengthscale**2)
    return cov + 1e-6 * var * np.eye(len(pts))


def build_graph(cfg: ScenarioConfig, prior_means: dict | None = None) -> CausalGraph:
    d = cfg.n_cells
    nodes, edges = [], []
    for n in cfg.nodes:
        if n.lengthscale > 0 and not n.parents:
            cov = squared_exp_cov(cfg.shape, n.lengthscale, n.prior_var, cfg.cell_size)
        else:
            cov = n.prior_var
        mean = n.prior_mean if prior_means is None or n.id not in prior_means else prior_means[n.id]
        nodes.append(LatentNode(n.id, d, n.intercept, tuple(n.coeffs), n.obs_weight, n.noise_weight,
                                mean, cov, n.sigma, n.temporal))
        edges.extend((p, n.id) for p in n.parents)
    return CausalGraph(nodes, edges)


def make_sources(cfg: ScenarioConfig, observations: dict | None = None, drop=None) -> list:
    """ObservationSources for the active sources (grids attached when given)."""
    out = []
    for s in cfg.active_sources(drop):
        grid = None if observations is None else observations.get(s.id)
        out.append(ObservationSource(s.id, s.node, grid, s.theta0, dict(s.theta), s.eta,
                                     s.resolution_k, s.cell_size, s.obs_time))
    return out


# --------------------------------------------------------------- scenarios

@dataclass
class Bundle:
    """Ground truth plus observations; ``truth[s][node]`` is a 2-D field per step."""

    truth: list
    observations: list
    config: ScenarioConfig

    @property
    def S(self) -> int:
        return len(self.truth)


def _blob_at(shape, start, velocity, s, amplitude, width) -> np.ndarray:
    r, c = np.indices(shape)
    cy = start[0] + velocity[0] * s
    cx = start[1] + velocity[1] * s
    return amplitude * np.exp(-0.5 * ((r - cy) ** 2 + (c - cx) ** 2) / width**2)


def _blob(cfg: ScenarioConfig, s: int) -> np.ndarray:
    tc = cfg.temporal
    return _blob_at(cfg.shape, tc.start, tc.velocity, s, tc.amplitude, tc.width)


def generate_scenario(cfg: ScenarioConfig, seed=None) -> Bundle:
    """Ancestral ground truth on the base grid and log-normal observations.

    Static scenarios produce one step. Temporal scenarios advect a Gaussian
    blob for each temporal node (``start + velocity * s``) with white noise on
    top; the other nodes are redrawn each step conditional on it.
    """
    seed = cfg.seed if seed is None else seed
    graph = build_graph(cfg)
    temporal = set(cfg.temporal.nodes) if cfg.temporal.S > 1 else set()
    truth, observations = [], []
    for s in range(cfg.temporal.S):
        if temporal:
            draw = _temporal_draw(cfg, graph, temporal, s, seed)
        else:
            draw = sample_prior(graph, np.random.default_rng([seed, 0, s]))
        fields_ = {k: v.reshape(cfg.shape) for k, v in draw.items()}
        truth.append(fields_)
        obs = {}
        if s not in cfg.temporal.missing_steps:
            for k, src in enumerate(make_sources(cfg)):
                parents = {p: Grid(fields_[p], cfg.cell_size) for p in src.theta}
                obs[src.id] = observe(parents, src, np.random.default_rng([seed, 1, s, k]))
        observations.append(obs)
    return Bundle(truth, observations, cfg)


def _temporal_draw(cfg, graph, temporal, s, seed):
    rng = np.random.default_rng([seed, 0, s])
    out = {}
    for node_id in graph.topo_order:
        node = graph[node_id]
        eps = rng.standard_normal(node.dim)
        if node_id in temporal:
            out[node_id] = _blob(cfg, s).ravel() + cfg.temporal.noise * eps
        elif not graph.parents(node_id):
            f = node.prior_factor()
            out[node_id] = node.prior_mean + (eps * f if f.ndim == 1 else f @ eps)
        else:
            out[node_id] = node.intercept + node.sigma * eps + sum(
                a * out[p] for a, p in zip(node.coeffs, graph.parents(node_id)))
    return out


# ------------------------------------------------------------ classification

SCHEMES = {
    "four": ((0.3, 0.65, 0.8), ("slight", "moderate", "partial collapse", "collapse")),
    "five": ((0.15, 0.5, 0.7, 0.85), ("none", "slight", "moderate", "partial collapse", "collapse")),
}


def classify_map(prob, scheme="four") -> np.ndarray:
    """Integer damage level per cell; bins are closed on the upper edge."""
    edges, _ = SCHEMES[scheme]
    prob = np.asarray(prob, dtype=float)
    if np.any(~((prob >= 0) & (prob <= 1))):
        raise OutOfRange("probabilities must lie in [0, 1]")
    return np.searchsorted(np.asarray(edges), prob, side="left")


def level_names(scheme="four") -> tuple:
    return SCHEMES[scheme][1]


def exceedance_map(samples, threshold) -> np.ndarray:
    """Fraction of ensemble members above ``threshold`` in each cell."""
    return (np.asarray(samples) > threshold).mean(axis=0)


# ----------------------------------------------------------------- metrics

def auc(scores, labels) -> float:
    """Rank-statistic ROC AUC (ties get half credit)."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs both classes in the truth labels")
    ranks = rankdata(scores)
    u2 = 2 * ranks[labels].sum() - n_pos * (n_pos + 1)
    return float(u2) / (2 * n_pos * n_neg)


def pairwise_auc(scores, labels) -> float:
    """Brute-force AUC over all positive/negative pairs."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise DegenerateLabels("AUC needs both classes in the truth labels")
    diff = pos[:, None] - neg[None, :]
    u2 = 2 * int((diff > 0).sum()) + int((diff == 0).sum())
    return float(u2) / (2 * pos.size * neg.size)


@dataclass
class MetricsReport:
    auc: float | None
    tpr: float
    tnr: float
    f1: float
    ap: float | None
    threshold: float
    n_pos: int
    n_cells: int
    flags: tuple = ()


def evaluate(pred, truth, positive_threshold=None, truth_quantile=0.8) -> MetricsReport:
    """Compare a score field with ground truth.

    Truth positives are cells at or above the ``truth_quantile`` quantile of
    the truth field. Predicted positives are cells strictly above
    ``positive_threshold``, which defaults to the same quantile of the
    prediction (equal positive rates). With single-class truth, AUC and AP
    are reported as ``None`` and flagged.
    """
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"prediction has {pred.size} cells, truth {truth.size}")
    labels = truth >= np.quantile(truth, truth_quantile)
    thr = float(np.quantile(pred, truth_quantile)) if positive_threshold is None else float(positive_threshold)
    hat = pred > thr if positive_threshold is not None else pred >= thr
    tp = int((hat & labels).sum())
    fp = int((hat & ~labels).sum())
    fn = int((~hat & labels).sum())
    tn = int((~hat & ~labels).sum())
    tpr = tp / (tp + fn) if tp + fn else 0.0
    tnr = tn / (tn + fp) if tn + fp else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    flags = []
    try:
        a = auc(pred, labels)
        ap = float(average_precision_score(labels, pred))
    except DegenerateLabels:
        a, ap = None, None
        flags.append("degenerate_labels")
    return MetricsReport(a, tpr, tnr, f1, ap, thr, int(labels.sum()), labels.size, tuple(flags))

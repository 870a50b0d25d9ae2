"""Causal Bayesian network of latent fields with linear-Gaussian links.

Each latent node is a field of ``dim`` grid cells. A child is generated
cellwise as ``z = a0 + sum_p a_p * z_p + sigma * eps`` with scalar
coefficients shared by every cell; roots are drawn from their own
``prior_mean`` / ``prior_cov``.
"""

from __future__ import annotations

import graphlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CycleDetected, DanglingEdge, DimensionMismatch, SingularCovariance


@dataclass
class LatentNode:
    id: str
    dim: int
    intercept: float = 0.0
    coeffs: tuple[float, ...] = ()
    obs_weight: float = 0.0
    noise_weight: float = 0.0
    prior_mean: np.ndarray | float = 0.0
    prior_cov: np.ndarray | float = 1.0
    sigma: float = 1.0
    temporal: bool = False

    def __post_init__(self):
        if int(self.dim) <= 0:
            raise ValueError(f"node {self.id!r}: dim must be positive, got {self.dim}")
        self.dim = int(self.dim)
        self.coeffs = tuple(float(c) for c in self.coeffs)
        if self.noise_weight < 0:
            raise ValueError(f"node {self.id!r}: noise_weight must be >= 0")
        if self.sigma < 0:
            raise ValueError(f"node {self.id!r}: sigma must be >= 0")
        self.prior_mean = np.broadcast_to(
            np.asarray(self.prior_mean, dtype=float), (self.dim,)
        ).copy()
        cov = np.asarray(self.prior_cov, dtype=float)
        if cov.ndim == 0:
            cov = np.full(self.dim, float(cov))
        if cov.ndim == 1:
            if cov.shape != (self.dim,) or np.any(cov < 0):
                raise ValueError(f"node {self.id!r}: bad diagonal prior_cov")
        elif cov.shape == (self.dim, self.dim):
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError(f"node {self.id!r}: prior_cov is not symmetric")
            if np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
                raise ValueError(f"node {self.id!r}: prior_cov is not PSD")
        else:
            raise ValueError(f"node {self.id!r}: prior_cov shape {cov.shape}")
        self.prior_cov = cov

    @property
    def prior_var(self) -> np.ndarray:
        """Per-cell marginal prior variance."""
        cov = self.prior_cov
        return cov if cov.ndim == 1 else np.diag(cov).copy()

    def prior_factor(self) -> np.ndarray:
        """Lower factor ``L`` with ``L @ L.T == prior_cov`` (diagonal returns a vector)."""
        cov = self.prior_cov
        if cov.ndim == 1:
            return np.sqrt(cov)
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class CausalGraph:
    nodes: list[LatentNode]
    edges: list[tuple[str, str]] = field(default_factory=list)
    topo_order: list[str] = field(init=False)

    def __post_init__(self):
        self.edges = [tuple(e) for e in self.edges]
        self.topo_order = validate(self)
        for node in self.nodes:
            n_par = len(self.parents(node.id))
            if len(node.coeffs) != n_par:
                raise DimensionMismatch(
                    f"node {node.id!r} has {len(node.coeffs)} coefficients "
                    f"for {n_par} parents"
                )

    def __getitem__(self, node_id: str) -> LatentNode:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def parents(self, node_id: str) -> list[str]:
        """Parents in edge-declaration order (the order of ``coeffs``)."""
        return [p for p, c in self.edges if c == node_id]

    def children(self, node_id: str) -> list[str]:
        return [c for p, c in self.edges if p == node_id]

    def ancestors(self, node_id: str) -> list[str]:
        seen: set[str] = set()
        stack = list(self.parents(node_id))
        while stack:
            p = stack.pop()
            if p not in seen:
                seen.add(p)
                stack.extend(self.parents(p))
        return [n for n in self.topo_order if n in seen]

    def is_root(self, node_id: str) -> bool:
        return not self.parents(node_id)


def validate(graph: CausalGraph) -> list[str]:
    """Check ids and edges, return a topological order.

    Ties between simultaneously ready nodes break by ascending id, so the
    order is reproducible and adding a leaf never reorders existing nodes.
    """
    ids = [n.id for n in graph.nodes]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate node ids in {ids}")
    known = set(ids)
    sorter = graphlib.TopologicalSorter({i: () for i in ids})
    for parent, child in graph.edges:
        if parent not in known or child not in known:
            raise DanglingEdge(f"edge {parent!r} -> {child!r} references a missing node")
        sorter.add(child, parent)
    try:
        sorter.prepare()
    except graphlib.CycleError as exc:
        raise CycleDetected(f"cycle through {exc.args[1]}") from None
    order: list[str] = []
    while sorter.is_active():
        ready = sorted(sorter.get_ready())
        order.extend(ready)
        sorter.done(*ready)
    return order


def causal_mean(node: LatentNode, parent_values) -> np.ndarray:
    """``a0 + sum_p a_p * parent_p`` cellwise; a root returns its intercept everywhere."""
    parent_values = list(parent_values)
    if len(parent_values) != len(node.coeffs):
        raise DimensionMismatch(
            f"node {node.id!r}: {len(parent_values)} parent fields for "
            f"{len(node.coeffs)} coefficients"
        )
    out = np.full(node.dim, node.intercept, dtype=float)
    for a, value in zip(node.coeffs, parent_values):
        value = np.asarray(value, dtype=float)
        if value.shape[-1] != node.dim:
            raise DimensionMismatch(
                f"node {node.id!r}: parent field has {value.shape[-1]} cells, expected {node.dim}"
            )
        out = out + a * value
    return out


def sample_prior(graph: CausalGraph, seed=None, size: int | None = None) -> dict[str, np.ndarray]:
    """Ancestral sampling in topological order.

    Returns ``{node_id: field}`` with shape ``(dim,)`` or ``(size, dim)``.
    """
    rng = np.random.default_rng(seed)
    shape = () if size is None else (size,)
    out: dict[str, np.ndarray] = {}
    for node_id in graph.topo_order:
        node = graph[node_id]
        eps = rng.standard_normal(shape + (node.dim,))
        parents = graph.parents(node_id)
        if not parents:
            factor = node.prior_factor()
            noise = eps * factor if factor.ndim == 1 else eps @ factor.T
            out[node_id] = node.prior_mean + noise
        else:
            out[node_id] = causal_mean(node, [out[p] for p in parents]) + node.sigma * eps
    return out


def joint_moments(graph: CausalGraph) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of all nodes stacked in topological order.

    Builds the full ``(n*d, n*d)`` covariance, so intended for small graphs.
    All nodes must share one ``dim``.
    """
    order = graph.topo_order
    dims = {graph[n].dim for n in order}
    if len(dims) != 1:
        raise DimensionMismatch("joint_moments needs every node on the same grid")
    d = dims.pop()
    n = len(order)
    index = {node_id: k for k, node_id in enumerate(order)}
    B = np.zeros((n * d, n * d))
    c = np.zeros(n * d)
    S = np.zeros((n * d, n * d))
    eye = np.eye(d)
    for node_id in order:
        node = graph[node_id]
        k = index[node_id]
        blk = slice(k * d, (k + 1) * d)
        parents = graph.parents(node_id)
        if not parents:
            c[blk] = node.prior_mean
            cov = node.prior_cov
            S[blk, blk] = np.diag(cov) if cov.ndim == 1 else cov
        else:
            c[blk] = node.intercept
            S[blk, blk] = node.sigma**2 * eye
            for a, p in zip(node.coeffs, parents):
                j = index[p]
                B[blk, j * d:(j + 1) * d] = a * eye
    inv = np.linalg.inv(np.eye(n * d) - B)
    return inv @ c, inv @ S @ inv.T


def cell_moments(graph: CausalGraph) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Per-cell means and node-by-node covariances.

    Cross-cell covariance is dropped (only root prior variances enter), which
    is exact for the per-cell marginals. Returns ``(means, covs)`` where
    ``covs[c]`` is the ``(n, n)`` covariance at cell ``c`` in topological order.
    """
    order = graph.topo_order
    dims = {graph[n].dim for n in order}
    if len(dims) != 1:
        raise DimensionMismatch("cell_moments needs every node on the same grid")
    d = dims.pop()
    n = len(order)
    index = {node_id: k for k, node_id in enumerate(order)}
    means: dict[str, np.ndarray] = {}
    covs = np.zeros((d, n, n))
    for node_id in order:
        node = graph[node_id]
        k = index[node_id]
        parents = graph.parents(node_id)
        if not parents:
            means[node_id] = node.prior_mean.copy()
            covs[:, k, k] = node.prior_var
            continue
        means[node_id] = causal_mean(node, [means[p] for p in parents])
        for j in range(k):
            covs[:, k, j] = sum(a * covs[:, index[p], j] for a, p in zip(node.coeffs, parents))
            covs[:, j, k] = covs[:, k, j]
        covs[:, k, k] = node.sigma**2 + sum(
            a * b * covs[:, index[p], index[q]]
            for a, p in zip(node.coeffs, parents)
            for b, q in zip(node.coeffs, parents)
        )
    return means, covs


@dataclass
class JointMoments:
    """Per-cell moments of a node and its parents, as consumed by the causal score.

    Shapes: ``parent_mean (d, p)``, ``parent_cov (d, p, p)``,
    ``cross_cov (d, p, 1)``, ``self_cov (d, 1, 1)``, ``self_mean (d,)``.
    """

    parent_mean: np.ndarray
    parent_cov: np.ndarray
    cross_cov: np.ndarray
    self_cov: np.ndarray
    self_mean: np.ndarray


def node_moments(graph: CausalGraph, node_id: str, moments=None) -> JointMoments:
    means, covs = moments if moments is not None else cell_moments(graph)
    order = graph.topo_order
    k = order.index(node_id)
    pidx = [order.index(p) for p in graph.parents(node_id)]
    if not pidx:
        raise SingularCovariance(f"node {node_id!r} has no parents")
    parent_mean = np.stack([means[p] for p in graph.parents(node_id)], axis=-1)
    parent_cov = covs[:, pidx][:, :, pidx]
    cross = covs[:, pidx, k][:, :, None]
    self_cov = covs[:, k, k][:, None, None]
    return JointMoments(parent_mean, parent_cov, cross, self_cov, means[node_id])

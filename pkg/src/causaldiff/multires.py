"""Multi-resolution grids, the log-normal observation link and its inverse.

Observations live on their own native grid. Latent fields are flat vectors
on the base grid; ``Grid`` carries the cell size needed to move between the
two by block averaging (coarsening) or replication (refinement).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateLink,
    DimensionMismatch,
    IncommensurateResolutions,
    NonPositiveObservation,
    NoObservation,
    NoObservationWarning,
)
from .io import atomic_write_text, fmt, matrix_to_csv


@dataclass
class Grid:
    values: np.ndarray
    cell_size: float = 1.0

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.ndim != 2:
            raise ValueError(f"grid values must be 2-D, got shape {self.values.shape}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        self.cell_size = float(self.cell_size)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    @classmethod
    def from_flat(cls, values, shape, cell_size=1.0) -> "Grid":
        return cls(np.asarray(values, dtype=float).reshape(shape), cell_size)


def _ratio(a: float, b: float) -> int:
    r = a / b
    k = int(round(r))
    if k < 1 or abs(r - k) > 1e-9 * max(1.0, r):
        raise IncommensurateResolutions(f"cell sizes {a} and {b} are not an integer ratio")
    return k


def coarsen(values: np.ndarray, factor: int) -> np.ndarray:
    """Block mean over ``factor x factor`` cells on the last two axes."""
    if factor == 1:
        return np.array(values, dtype=float)
    *lead, r, c = values.shape
    if r % factor or c % factor:
        raise IncommensurateResolutions(f"{r}x{c} grid does not tile into {factor}x{factor} blocks")
    blocks = values.reshape(*lead, r // factor, factor, c // factor, factor)
    return blocks.mean(axis=(-3, -1))


def refine(values: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour replication on the last two axes."""
    if factor == 1:
        return np.array(values, dtype=float)
    return np.repeat(np.repeat(values, factor, axis=-2), factor, axis=-1)


def regrid(src: Grid, target_cell_size: float) -> Grid:
    """Move a grid to another cell size (area mean down, replication up)."""
    if target_cell_size >= src.cell_size:
        values = coarsen(src.values, _ratio(target_cell_size, src.cell_size))
    else:
        values = refine(src.values, _ratio(src.cell_size, target_cell_size))
    return Grid(values, target_cell_size)


def regrid_array(values, shape, from_size: float, to_size: float) -> np.ndarray:
    """``regrid`` for flat fields with optional leading batch axes."""
    values = np.asarray(values, dtype=float)
    lead = values.shape[:-1]
    grid = values.reshape(*lead, *shape)
    if to_size >= from_size:
        out = coarsen(grid, _ratio(to_size, from_size))
    else:
        out = refine(grid, _ratio(from_size, to_size))
    return out.reshape(*lead, -1)


@dataclass
class ObservationSource:
    """One background-knowledge layer for latent ``node_id``.

    ``theta`` maps every observation parent (including ``node_id`` itself) to
    its coefficient in ``log y = theta0 + sum theta_p * parent_p + eta * eps``.
    """

    id: str
    node_id: str
    grid: Grid | None
    theta0: float = 0.0
    theta: dict[str, float] = field(default_factory=dict)
    eta: float = 0.1
    resolution_k: int = 0
    cell_size: float | None = None
    obs_time: float = 0.0

    def __post_init__(self):
        if not self.theta:
            self.theta = {self.node_id: 1.0}
        self.theta = {k: float(v) for k, v in self.theta.items()}
        if self.eta < 0:
            raise ValueError(f"source {self.id!r}: eta must be >= 0")
        if self.cell_size is None:
            if self.grid is None:
                raise ValueError(f"source {self.id!r}: need a grid or a cell_size")
            self.cell_size = self.grid.cell_size
        if self.grid is not None:
            if abs(self.grid.cell_size - self.cell_size) > 1e-12:
                raise ValueError(f"source {self.id!r}: grid cell size disagrees")
            if np.any(~(self.grid.values > 0)):
                raise NonPositiveObservation(f"source {self.id!r} has non-positive values")

    @property
    def theta_self(self) -> float:
        return self.theta.get(self.node_id, 0.0)

    @property
    def other_parents(self) -> list[str]:
        return [p for p in self.theta if p != self.node_id]


def _as_grid(value, cell_size: float, shape=None) -> Grid:
    if isinstance(value, Grid):
        return value
    value = np.asarray(value, dtype=float)
    if shape is not None:
        value = value.reshape(shape)
    return Grid(value, cell_size)


def log_mean(parents: dict, source: ObservationSource) -> np.ndarray:
    """``theta0 + sum_p theta_p * parent_p`` at the source resolution."""
    out = source.theta0
    for p, coef in source.theta.items():
        if p not in parents:
            raise DimensionMismatch(f"source {source.id!r} needs parent field {p!r}")
        out = out + coef * regrid(_as_grid(parents[p], source.cell_size), source.cell_size).values
    return np.asarray(out, dtype=float)


def observe(parents: dict, source: ObservationSource, seed=None) -> Grid:
    """Draw ``y`` from the log-normal link. ``parents`` maps ids to Grids."""
    rng = np.random.default_rng(seed)
    mean = log_mean(parents, source)
    log_y = mean + source.eta * rng.standard_normal(mean.shape)
    return Grid(np.exp(log_y), source.cell_size)


def phi_map(y: Grid, other_parents: dict, source: ObservationSource,
            target_cell_size: float | None = None) -> np.ndarray:
    """Invert the log link for the source's own latent.

    Returns a 2-D array at ``target_cell_size`` (defaults to the source grid).
    """
    theta_z = source.theta_self
    if theta_z == 0:
        raise DegenerateLink(f"source {source.id!r} has zero coefficient on {source.node_id!r}")
    if np.any(~(y.values > 0)):
        raise NonPositiveObservation(f"source {source.id!r}: observation must be strictly positive")
    resid = np.log(y.values) - source.theta0
    for p in source.other_parents:
        if p not in other_parents:
            raise DimensionMismatch(f"source {source.id!r} needs parent field {p!r}")
        par = regrid(_as_grid(other_parents[p], y.cell_size), y.cell_size).values
        resid = resid - source.theta[p] * par
    out = Grid(resid / theta_z, y.cell_size)
    if target_cell_size is not None:
        out = regrid(out, target_cell_size)
    return out.values


def finest(sources):
    """Finest-resolution source (smallest cell size, then largest k index)."""
    sources = list(sources)
    if not sources:
        return None
    return min(sources, key=lambda s: (s.cell_size, -s.resolution_k))


def _phi_flat(source, context, base_shape, base_cell_size):
    ctx = {p: _as_grid(v, base_cell_size, base_shape) for p, v in (context or {}).items()}
    return phi_map(source.grid, ctx, source, base_cell_size).ravel()


def init_parent(node, sources, context=None, base_shape=None, base_cell_size=1.0,
                fallback=True) -> np.ndarray:
    """Start a parent node at the inverse link of its finest source.

    With no source the node starts at ``prior_mean`` (a ``NoObservationWarning``
    is emitted) unless ``fallback`` is false, in which case ``NoObservation``
    is raised.
    """
    src = finest(sources)
    if src is None:
        if not fallback:
            raise NoObservation(f"node {node.id!r} has no observation source")
        warnings.warn(f"node {node.id!r} unobserved; starting at prior mean", NoObservationWarning)
        return np.array(node.prior_mean, dtype=float)
    base_shape = base_shape or src.grid.shape
    return _phi_flat(src, context, base_shape, base_cell_size)


def init_child(node, parent_states, source=None, context=None, rng=None, base_shape=None,
               base_cell_size=1.0, size=None, eps=None) -> np.ndarray:
    """Hybrid start: causal mean + ``obs_weight * phi(y)`` + ``noise_weight * eps``.

    ``eps`` overrides the draw from ``rng`` (used for per-trajectory streams).
    """
    parent_states = [np.asarray(p, dtype=float) for p in parent_states]
    if len(parent_states) != len(node.coeffs):
        raise DimensionMismatch(
            f"node {node.id!r}: {len(parent_states)} parent states for {len(node.coeffs)} coefficients"
        )
    rng = np.random.default_rng(rng)
    z = np.full(node.dim, node.intercept, dtype=float)
    for a, p in zip(node.coeffs, parent_states):
        if p.shape[-1] != node.dim:
            raise DimensionMismatch(f"parent state has {p.shape[-1]} cells, expected {node.dim}")
        z = z + a * p
    if source is not None and node.obs_weight != 0:
        base_shape = base_shape or source.grid.shape
        z = z + node.obs_weight * _phi_flat(source, context, base_shape, base_cell_size)
    if node.noise_weight:
        if eps is None:
            shape = z.shape if size is None else (size,) + z.shape[-1:]
            eps = rng.standard_normal(shape)
        z = z + node.noise_weight * eps
    return z


def write_grid(path, grid: Grid) -> Path:
    header = f"rows,cols,cell_size\n{grid.rows},{grid.cols},{fmt(grid.cell_size)}\n"
    return atomic_write_text(path, header + matrix_to_csv(grid.values))


def read_grid(path) -> Grid:
    lines = Path(path).read_text().splitlines()
    if lines[0] != "rows,cols,cell_size":
        raise ValueError(f"{path}: not a grid file")
    rows, cols, cell = lines[1].split(",")
    values = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:2 + int(rows)]])
    if values.shape != (int(rows), int(cols)):
        raise ValueError(f"{path}: expected {rows}x{cols} values, found {values.shape}")
    return Grid(values, float(cell))

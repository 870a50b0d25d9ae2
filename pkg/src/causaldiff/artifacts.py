"""On-disk layout of a run directory.

::

    manifest.json            config digest, seed, package versions, stages run
    config.json              the resolved scenario config
    bundle/index.csv         step,kind,id,file for every grid below
    bundle/s<k>/truth_<node>.csv, bundle/s<k>/obs_<source>.csv
    scores/<node>.mlp        score net; scores/<node>.meta holds shift,data_var
    scores/temporal.gru      recurrent cell (temporal scenarios)
    posterior/, rollout/     per-step grids plus elbo.csv / metrics.csv

Every file is plain text written atomically, and contains no timestamps, so
a fixed (config, seed) reproduces the directory byte for byte.
"""

from __future__ import annotations

import json
import platform
from pathlib import Path

import numpy as np
import scipy
import sklearn

from .diffusion import ScoreModel
from .errors import ArtifactMissing, TrainingMissing
from .io import atomic_write_text, fmt, read_table, write_table
from .multires import Grid, read_grid, write_grid
from .neuralnet import load_mlp, save_mlp
from .scenario import Bundle, ScenarioConfig
from .temporal import GruCell, load_cell, save_cell

__version__ = "0.1.0"


def versions() -> dict:
    return {"causaldiff": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "python": platform.python_version()}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_manifest(out, cfg: ScenarioConfig, seed, stage: str, extra=None) -> Path:
    """Record a stage in ``manifest.json`` (stages accumulate across commands)."""
    path = Path(out) / "manifest.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data.update({"config_digest": cfg.digest(), "seed": int(seed), "versions": versions()})
    stages = data.setdefault("stages", {})
    stages[stage] = {"seed": int(seed), **(extra or {})}
    atomic_write_text(Path(out) / "config.json", _dumps(cfg.to_dict()))
    return atomic_write_text(path, _dumps(data))


def write_field(path, values, shape) -> Path:
    return write_grid(path, Grid(np.asarray(values, dtype=float).reshape(shape)))


def save_bundle(out, bundle: Bundle) -> Path:
    root = Path(out) / "bundle"
    rows = []
    for s, (truth, obs) in enumerate(zip(bundle.truth, bundle.observations)):
        for k in sorted(truth):
            f = f"s{s + 1}/truth_{k}.csv"
            write_grid(root / f, Grid(truth[k], bundle.config.cell_size))
            rows.append((s + 1, "truth", k, f))
        for k in sorted(obs):
            f = f"s{s + 1}/obs_{k}.csv"
            write_grid(root / f, obs[k])
            rows.append((s + 1, "obs", k, f))
    return write_table(root / "index.csv", ["step", "kind", "id", "file"], rows)


def load_bundle(out, cfg: ScenarioConfig) -> Bundle:
    root = Path(out) / "bundle"
    if not (root / "index.csv").exists():
        raise ArtifactMissing(f"no bundle under {root}; run `generate` first")
    _, rows = read_table(root / "index.csv")
    S = cfg.temporal.S
    truth = [{} for _ in range(S)]
    obs = [{} for _ in range(S)]
    for step, kind, k, f in rows:
        grid = read_grid(root / f)
        if kind == "truth":
            truth[int(step) - 1][k] = grid.values
        else:
            obs[int(step) - 1][k] = grid
    return Bundle(truth, obs, cfg)


def save_scores(out, scores: dict, losses: dict | None = None):
    root = Path(out) / "scores"
    for k, sc in sorted(scores.items()):
        save_mlp(root / f"{k}.mlp", sc.net)
        write_table(root / f"{k}.meta", ["shift", "data_var"],
                    [(float(sc.shift), float(sc.data_var))])
    for k, trace in sorted((losses or {}).items()):
        write_table(root / f"losses_{k}.csv", ["epoch", "loss"],
                    [(i, float(v)) for i, v in enumerate(trace)])


def load_scores(out, sdes: dict, nodes) -> dict:
    root = Path(out) / "scores"
    scores = {}
    for k in nodes:
        if not (root / f"{k}.mlp").exists():
            raise TrainingMissing(f"no trained score for node {k!r} under {root}; run `train` first")
        _, ((shift, var),) = read_table(root / f"{k}.meta")
        scores[k] = ScoreModel(load_mlp(root / f"{k}.mlp"), sdes[k], float(shift), float(var))
    return scores


def save_temporal(out, cell: GruCell, losses) -> None:
    root = Path(out) / "scores"
    save_cell(root / "temporal.gru", cell)
    write_table(root / "losses_temporal.csv", ["epoch", "loss"],
                [(i, float(v)) for i, v in enumerate(losses)])


def load_temporal(out) -> GruCell:
    path = Path(out) / "scores" / "temporal.gru"
    if not path.exists():
        raise TrainingMissing(f"no recurrent cell at {path}; run `train` first")
    return load_cell(path)


def metric_row(step, node, kind, m) -> tuple:
    opt = lambda v: "" if v is None else fmt(v)
    return (step, node, kind, opt(m.auc), fmt(m.tpr), fmt(m.tnr), fmt(m.f1), opt(m.ap),
            fmt(m.threshold), m.n_pos, m.n_cells, "|".join(m.flags))


METRIC_HEADER = ["step", "node", "kind", "auc", "tpr", "tnr", "f1", "ap", "threshold",
                 "n_pos", "n_cells", "flags"]

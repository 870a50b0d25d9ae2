"""Command-line entry point: ``causaldiff <command> --config PRESET_OR_PATH``.

Commands run one pipeline stage each and share a run directory (``--out``,
default the config's ``output_dir``):

    generate   synthetic truth and observation grids
    train      score nets for every node (and the recurrent cell if temporal)
    infer      per-step posterior ensembles, probability and class maps
    rollout    temporal inference chained through the recurrent cell
    evaluate   metrics.csv from whatever posteriors exist
    report     report.md summarising metrics and damage-level counts

Structured failures exit with the error's ``exit_code``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import artifacts as art
from .errors import ArtifactMissing, CausalDiffError
from .io import atomic_write_text, fmt, read_table, write_table
from .multires import read_grid
from .pipeline import (
    build_model,
    infer,
    make_sdes,
    probability_maps,
    run_rollout,
    train_scores,
    train_temporal,
)
from .scenario import classify_map, evaluate, generate_scenario, level_names, load_config

log = logging.getLogger("causaldiff")

COMMANDS = ("generate", "train", "infer", "rollout", "evaluate", "report")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML path or preset name")
    common.add_argument("--seed", type=int, default=None, help="defaults to the config seed")
    common.add_argument("--out", default=None, help="run directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="causaldiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "infer":
            p.add_argument("--ablate", action="store_true",
                           help="drop the config's ablation sources (writes posterior_ablated/)")
    return parser


def _write_posterior(root: Path, cfg, s, ensembles, extra=None):
    step = root / f"s{s + 1}"
    probs = probability_maps(cfg, ensembles)
    for k, e in sorted(ensembles.items()):
        art.write_field(step / f"mean_{k}.csv", e.mean(), cfg.shape)
        art.write_field(step / f"var_{k}.csv", e.var(), cfg.shape)
        art.write_field(step / f"prob_{k}.csv", probs[k], cfg.shape)
        art.write_field(step / f"class_{k}.csv", classify_map(probs[k], cfg.evaluate.scheme), cfg.shape)
    for k, v in sorted((extra or {}).items()):
        art.write_field(step / f"prediction_{k}.csv", v, cfg.shape)


def _elbo_row(s, r):
    return (s + 1, fmt(r.elbo), fmt(r.likelihood_term), fmt(r.prior_term), fmt(r.entropy_term))


ELBO_HEADER = ["step", "elbo", "likelihood", "prior", "entropy"]


def cmd_generate(cfg, seed, out, args):
    bundle = generate_scenario(cfg, seed)
    art.save_bundle(out, bundle)
    log.info("bundle with %d step(s) written to %s", bundle.S, out / "bundle")


def cmd_train(cfg, seed, out, args):
    bundle = art.load_bundle(out, cfg)
    model = build_model(cfg, bundle.observations[0])
    scores, losses = train_scores(cfg, model, seed)
    art.save_scores(out, scores, losses)
    for k, trace in losses.items():
        log.info("score %s: final loss %.4f", k, trace[-1])
    if cfg.temporal.S > 1 and cfg.temporal.nodes:
        cell, tl = train_temporal(cfg, seed)
        art.save_temporal(out, cell, tl)
        log.info("recurrent cell: loss %.4f -> %.4f", tl[0], tl[-1])


def _scores(cfg, out):
    sdes = make_sdes(cfg, cfg.seed)
    return sdes, art.load_scores(out, sdes, [n.id for n in cfg.nodes])


def cmd_infer(cfg, seed, out, args):
    sdes, scores = _scores(cfg, out)
    bundle = art.load_bundle(out, cfg)
    ablate = getattr(args, "ablate", False)
    root = out / ("posterior_ablated" if ablate else "posterior")
    rows = []
    for s in range(bundle.S):
        model = build_model(cfg, bundle.observations[s], drop=True if ablate else None,
                            scores=scores, sdes=sdes)
        inf = infer(cfg, model, seed, args.threads)
        _write_posterior(root, cfg, s, inf.ensembles)
        rows.append(_elbo_row(s, inf.trace[-1]))
        if len(inf.trace) > 1:
            write_table(root / f"s{s + 1}" / "fit_trace.csv", ["iteration", "elbo"],
                        [(i, fmt(r.elbo)) for i, r in enumerate(inf.trace)])
        log.info("step %d: elbo %.4f", s + 1, inf.trace[-1].elbo)
    write_table(root / "elbo.csv", ELBO_HEADER, rows)


def cmd_rollout(cfg, seed, out, args):
    sdes, scores = _scores(cfg, out)
    bundle = art.load_bundle(out, cfg)
    cell = art.load_temporal(out) if cfg.temporal.S > 1 and cfg.temporal.nodes else None
    res = run_rollout(cfg, bundle, scores, cell, seed, args.threads, sdes)
    root = out / "rollout"
    rows = []
    for s, step in enumerate(res.steps):
        _write_posterior(root, cfg, s, step.ensembles, step.prediction)
        if step.flags:
            atomic_write_text(root / f"s{s + 1}" / "flags.txt", "\n".join(step.flags) + "\n")
        for kind in ("forecast", "persistence"):
            for k, m in sorted(res.metrics[s].get(kind, {}).items()):
                rows.append(art.metric_row(s + 1, k, kind, m))
                log.info("step %d %s %s: F1 %.3f", s + 1, kind, k, m.f1)
    write_table(root / "forecast_metrics.csv", art.METRIC_HEADER, rows)


def _read_field(path):
    return read_grid(path).values.ravel()


def cmd_evaluate(cfg, seed, out, args):
    bundle = art.load_bundle(out, cfg)
    q = cfg.evaluate.positive_quantile
    rows = []
    found = False
    for kind, dirname in (("posterior", "posterior"), ("ablated", "posterior_ablated"),
                          ("rollout", "rollout")):
        root = out / dirname
        if not root.exists():
            continue
        found = True
        for s in range(bundle.S):
            for k in sorted(bundle.truth[s]):
                truth = bundle.truth[s][k].ravel()
                mean = _read_field(root / f"s{s + 1}" / f"mean_{k}.csv")
                rows.append(art.metric_row(s + 1, k, kind, evaluate(mean, truth, truth_quantile=q)))
                pred = root / f"s{s + 1}" / f"prediction_{k}.csv"
                if kind == "rollout" and pred.exists():
                    prev = _read_field(root / f"s{s}" / f"mean_{k}.csv")
                    for name, field in (("forecast", _read_field(pred)), ("persistence", prev)):
                        rows.append(art.metric_row(s + 1, k, name,
                                                   evaluate(field, truth, truth_quantile=q)))
    if not found:
        raise ArtifactMissing("no posterior or rollout outputs; run `infer` or `rollout` first")
    write_table(out / "metrics.csv", art.METRIC_HEADER, rows)
    for r in rows:
        log.info("step %s %-7s %-11s auc=%s f1=%s", r[0], r[1], r[2], r[3] or "-", r[6])


def cmd_report(cfg, seed, out, args):
    path = out / "metrics.csv"
    if not path.exists():
        raise ArtifactMissing(f"{path} missing; run `evaluate` first")
    header, rows = read_table(path)
    cols = ["step", "node", "kind", "auc", "tpr", "tnr", "f1", "ap"]
    idx = [header.index(c) for c in cols]
    short = lambda v: v if v in ("",) or not _is_float(v) else f"{float(v):.4f}"
    lines = [f"# {cfg.name}", "", f"config digest `{cfg.digest()}`, seed {seed}", "",
             "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(short(r[i]) if i >= 3 else r[i] for i in idx) + " |")
    classes = sorted((out / "posterior" / "s1").glob("class_*.csv")) if (out / "posterior").exists() else []
    if classes:
        names = level_names(cfg.evaluate.scheme)
        lines += ["", f"Damage levels at step 1 ({cfg.evaluate.scheme}-level scheme):", "",
                  "| node | " + " | ".join(names) + " |", "|---|" + "---|" * len(names)]
        for f in classes:
            counts = np.bincount(read_grid(f).values.astype(int).ravel(), minlength=len(names))
            lines.append(f"| {f.stem[6:]} | " + " | ".join(str(c) for c in counts) + " |")
    atomic_write_text(out / "report.md", "\n".join(lines) + "\n")


def _is_float(v):
    try:
        float(v)
        return True
    except ValueError:
        return False


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer,
            "rollout": cmd_rollout, "evaluate": cmd_evaluate, "report": cmd_report}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        out = Path(args.out if args.out is not None else cfg.output_dir)
        HANDLERS[args.command](cfg, seed, out, args)
        art.write_manifest(out, cfg, seed, args.command)
    except CausalDiffError as err:
        print(f"causaldiff {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return err.exit_code
    return 0


def main():
    sys.exit(run())

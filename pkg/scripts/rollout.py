"""Temporal rollout on the wildfire preset: forecast vs persistence per step.

    python scripts/rollout.py [--config wildfire] [--seed 11]
"""

import argparse
import time

from causaldiff.pipeline import build_model, run_rollout, train_scores, train_temporal
from causaldiff.scenario import generate_scenario, load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="wildfire")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()

    cfg = load_config(args.config)
    bundle = generate_scenario(cfg, args.seed)
    t0 = time.perf_counter()
    scores, _ = train_scores(cfg, build_model(cfg, bundle.observations[0]), args.seed)
    cell, losses = train_temporal(cfg, args.seed)
    print(f"training {time.perf_counter() - t0:.0f}s, cell loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    out = run_rollout(cfg, bundle, scores, cell, args.seed)
    for s, m in enumerate(out.metrics):
        line = f"step {s + 1}: posterior " + ", ".join(
            f"{k} auc {r.auc:.3f}" for k, r in sorted(m["posterior"].items()))
        for k in m.get("forecast", {}):
            line += f" | {k} F1 forecast {m['forecast'][k].f1:.3f} persistence {m['persistence'][k].f1:.3f}"
        print(line)


if __name__ == "__main__":
    main()

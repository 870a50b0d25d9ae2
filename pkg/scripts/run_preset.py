"""Static inference on a preset, full sources vs the ablation list.

    python scripts/run_preset.py earthquake
    python scripts/run_preset.py hurricane --seed 3
"""

import argparse
import time

from causaldiff.pipeline import run_static
from causaldiff.scenario import generate_scenario, load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config", help="preset name or TOML path")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    cfg = load_config(args.config)
    bundle = generate_scenario(cfg, args.seed)
    t0 = time.perf_counter()
    inf, full, _ = run_static(cfg, bundle, seed=args.seed, threads=args.threads)
    print(f"full sources ({time.perf_counter() - t0:.0f}s), elbo {inf.trace[-1].elbo:.4f}")
    for k, m in sorted(full.items()):
        print(f"  {k:4s} auc {m.auc:.4f}  tpr {m.tpr:.3f}  tnr {m.tnr:.3f}  f1 {m.f1:.3f}  ap {m.ap:.3f}")
    if not cfg.ablation.drop_sources:
        return
    t0 = time.perf_counter()
    _, dropped, _ = run_static(cfg, bundle, drop=True, seed=args.seed, threads=args.threads,
                               scores=inf.model.scores)
    print(f"without {', '.join(cfg.ablation.drop_sources)} ({time.perf_counter() - t0:.0f}s)")
    for k, m in sorted(dropped.items()):
        print(f"  {k:4s} auc {m.auc:.4f}  (change {m.auc - full[k].auc:+.4f})")


if __name__ == "__main__":
    main()

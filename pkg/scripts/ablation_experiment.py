"""Full CFM against its single-component ablations (no shuffle, no clean features, no per-channel alpha).

    python3 scripts/ablation_experiment.py --per-class 10 --out results/ablation.json
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np  # noqa: E402

from _common import dump, parser, per_source, run_seeds, setup_logging  # noqa: E402
from cfmlab import bench  # noqa: E402


def run(seeds=(0, 1, 2), zoo_dir=None, iters=100, per_class=10, zoo=None) -> dict:
    recipes = bench.ablation_recipes()
    cfg = bench.SuiteConfig(
        recipes=recipes, zoo_dir=zoo_dir, iterations=iters, attack_per_class=per_class, cfm_prob=0.25, alpha_max=0.75
    )
    reports = run_seeds(cfg, seeds, zoo)
    summary = {"seeds": list(seeds), "iterations": iters, "images": per_class * cfg.num_classes, "mean": {}}
    for r in recipes:
        summary["mean"][r] = float(np.mean(list(per_source(reports, r).values())))
    full = summary["mean"][recipes[0]]
    summary["full_minus_ablation_points"] = {r: 100 * (full - summary["mean"][r]) for r in recipes[1:]}
    return summary


def main() -> None:
    args = parser(__doc__.splitlines()[0]).parse_args()
    setup_logging(args.verbose)
    dump(run(args.seeds, args.zoo, args.iters, args.per_class), args.out)


if __name__ == "__main__":
    main()

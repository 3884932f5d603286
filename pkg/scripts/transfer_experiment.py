"""RDI vs CFM-RDI targeted transfer on the tiny-model zoo, averaged over seeds.

    python3 scripts/transfer_experiment.py --out results/transfer.json
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np  # noqa: E402

from _common import dump, parser, per_source, run_seeds, setup_logging  # noqa: E402
from cfmlab import bench  # noqa: E402

RECIPES = ("RDI", "CFM-RDI")


def run(seeds=(0, 1, 2), zoo_dir=None, iters=100, per_class=20, zoo=None) -> dict:
    cfg = bench.SuiteConfig(
        recipes=list(RECIPES), zoo_dir=zoo_dir, iterations=iters, attack_per_class=per_class, cfm_prob=0.25, alpha_max=0.75
    )
    reports = run_seeds(cfg, seeds, zoo)
    summary = {"seeds": list(seeds), "iterations": iters, "images": per_class * cfg.num_classes}
    for r in RECIPES:
        src = per_source(reports, r)
        summary[r] = {"per_source": src, "mean": float(np.mean(list(src.values())))}
        summary[r]["white_box"] = {
            s: float(np.mean([rep.rate(r, s, s) for rep in reports])) for s in src
        }
    summary["gain_points"] = 100 * (summary["CFM-RDI"]["mean"] - summary["RDI"]["mean"])
    return summary


def main() -> None:
    args = parser(__doc__.splitlines()[0]).parse_args()
    setup_logging(args.verbose)
    dump(run(args.seeds, args.zoo, args.iters, args.per_class), args.out)


if __name__ == "__main__":
    main()

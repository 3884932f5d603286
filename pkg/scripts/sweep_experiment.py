"""3x3 sweep over mixing probability and alpha_max for CFM-RDI, averaged over seeds.

    python3 scripts/sweep_experiment.py --per-class 10 --out results/sweep.json
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np  # noqa: E402

from _common import dump, parser, run_seeds, setup_logging  # noqa: E402
from cfmlab import bench  # noqa: E402

DEFAULT_CELL = (0.1, 0.75)


def run(seeds=(0, 1, 2), zoo_dir=None, iters=100, per_class=10, zoo=None) -> dict:
    cfg = bench.SuiteConfig(recipes=bench.sweep_recipes(), zoo_dir=zoo_dir, iterations=iters, attack_per_class=per_class)
    reports = run_seeds(cfg, seeds, zoo)
    grid = np.mean([bench.sweep_table(rep) for rep in reports], axis=0)
    i = bench.SWEEP_PROBS.index(DEFAULT_CELL[0])
    j = bench.SWEEP_ALPHAS.index(DEFAULT_CELL[1])
    return {
        "seeds": list(seeds),
        "iterations": iters,
        "images": per_class * cfg.num_classes,
        "probs": list(bench.SWEEP_PROBS),
        "alphas": list(bench.SWEEP_ALPHAS),
        "grid": grid.tolist(),
        "default_cell": list(DEFAULT_CELL),
        "default_value": float(grid[i, j]),
        "grid_max": float(grid.max()),
        "gap_points": float(100 * (grid.max() - grid[i, j])),
    }


def main() -> None:
    args = parser(__doc__.splitlines()[0]).parse_args()
    setup_logging(args.verbose)
    dump(run(args.seeds, args.zoo, args.iters, args.per_class), args.out)


if __name__ == "__main__":
    main()

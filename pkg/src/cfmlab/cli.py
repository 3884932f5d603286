"""Command-line driver: ``cfmlab {train,attack,evaluate,suite,sweep}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import tomli

from . import bench
from .data import LabeledImageSet, load_image_set, save_image_set
from .models import ARCHS, load_weights, save_weights

log = logging.getLogger("cfmlab")


def load_config(path: Optional[str]) -> bench.SuiteConfig:
    if not path:
        return bench.SuiteConfig()
    with open(path, "rb") as fh:
        return bench.SuiteConfig.from_dict(tomli.load(fh))


def apply_overrides(cfg: bench.SuiteConfig, args) -> bench.SuiteConfig:
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.epsilon is not None:
        kw["epsilon"] = args.epsilon / 255 if args.epsilon > 1 else args.epsilon
    if args.iters is not None:
        kw["iterations"] = args.iters
    if args.recipe:
        kw["recipes"] = list(args.recipe)
    if args.out:
        out = Path(args.out)
        kw["csv_path"] = str(out / "report.csv")
        kw["json_path"] = str(out / "report.json")
    if getattr(args, "zoo", None):
        kw["zoo_dir"] = args.zoo
    return replace(cfg, **kw) if kw else cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float, help="L-inf budget, in [0,1] or in pixel units if > 1")
    p.add_argument("--iters", type=int, help="attack iterations T")
    p.add_argument("--recipe", action="append", help="attack recipe, repeatable (e.g. RDI, CFM-RDI)")
    p.add_argument("--out", help="output directory for report.csv / report.json or adversarial set")
    p.add_argument("--zoo", help="directory of <arch>.cfmw weight files")


def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    out = Path(args.out or cfg.zoo_dir or "zoo")
    out.mkdir(parents=True, exist_ok=True)
    sets = bench.training_sets(cfg)
    for arch in args.arch or ARCHS:
        model, acc = bench.train_zoo_model(arch, cfg, *sets)
        save_weights(model, out / f"{arch}.cfmw")
        print(f"{arch}\ttest_accuracy={acc:.4f}\t{out / f'{arch}.cfmw'}")
    return 0


def cmd_attack(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    model = load_weights(args.model)
    recipe = cfg.recipes[0]
    data = load_image_set(args.data) if args.data else bench.attack_set(cfg)
    if data.target_labels is None:
        raise SystemExit("attack set has no target labels")
    adv, seconds = bench.craft(model, data, cfg.attack_config(recipe), cfg.batch_size)
    out = Path(args.out or "adv")
    out.mkdir(parents=True, exist_ok=True)
    save_image_set(LabeledImageSet(adv, data.true_labels, data.target_labels, data.num_classes), out / "adv.cfmw")
    hits = bench.evaluate_transfer(adv, data.target_labels, model)
    print(f"{recipe}\twhite-box {hits}/{len(data)}\t{seconds / len(data):.4f}s/image\t{out / 'adv.cfmw'}")
    return 0


def cmd_evaluate(args) -> int:
    data = load_image_set(args.adv)
    if data.target_labels is None:
        raise SystemExit("adversarial set has no target labels")
    for path in args.model:
        hits = bench.evaluate_transfer(data.images, data.target_labels, load_weights(path))
        print(f"{path}\t{hits}/{len(data)}\t{hits / len(data):.6f}")
    return 0


def _print_summary(report: bench.TransferReport, recipes: List[str]) -> None:
    for r in recipes:
        per_src = {s: report.transfer(r, s) for s in dict.fromkeys(x.source for x in report.rows if x.attack == r)}
        cells = "  ".join(f"{s}={v:.3f}" for s, v in per_src.items())
        print(f"{r:<28} mean={np.mean(list(per_src.values())):.3f}  {cells}")


def cmd_suite(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    report = bench.run_suite(cfg)
    _print_summary(report, cfg.recipes)
    return 0


def cmd_sweep(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    cfg = replace(cfg, recipes=bench.sweep_recipes(rest=args.rest))
    report = bench.run_suite(cfg)
    grid = bench.sweep_table(report, rest=args.rest)
    print("p \\ alpha_max " + " ".join(f"{a:>7g}" for a in bench.SWEEP_ALPHAS))
    for p, row in zip(bench.SWEEP_PROBS, grid):
        print(f"{p:<14g}" + " ".join(f"{v:7.3f}" for v in row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfmlab", description="Targeted transfer attacks with clean feature mixup.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the model zoo and write CFMW weight files")
    _add_common(p)
    p.add_argument("--arch", action="append", choices=ARCHS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="craft adversarial images on one source model")
    _add_common(p)
    p.add_argument("--model", required=True, help="source model .cfmw")
    p.add_argument("--data", help="image set .cfmw with target labels (default: the suite attack set)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="targeted success of an adversarial set on target models")
    p.add_argument("--adv", required=True, help="adversarial image set .cfmw")
    p.add_argument("--model", required=True, action="append", help="target model .cfmw, repeatable")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("suite", help="every recipe from every source against every target")
    _add_common(p)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("sweep", help="3x3 grid over mixing probability and alpha_max")
    _add_common(p)
    p.add_argument("--rest", default="RDI", help="recipe tokens combined with CFM (default RDI)")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

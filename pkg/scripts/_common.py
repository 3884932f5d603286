"""Shared helpers for the experiment scripts."""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from cfmlab import bench

DEFAULT_ZOO = Path(__file__).resolve().parent.parent / "results" / "zoo"
SEEDS = (0, 1, 2)


def parser(desc: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=desc)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--zoo", default=str(DEFAULT_ZOO))
    ap.add_argument("--iters", type=int, default=100)
    ap.add_argument("--per-class", type=int, default=20, help="attack images per class")
    ap.add_argument("--out", help="write the summary JSON here")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")


def run_seeds(base: bench.SuiteConfig, seeds, zoo=None):
    """One report per seed, all sharing one zoo."""
    zoo = zoo if zoo is not None else bench.load_zoo(base)
    return [bench.run_suite(replace(base, seed=s), zoo) for s in seeds]


def per_source(reports, recipe: str) -> dict:
    """Mean over seeds of the transfer success per source."""
    sources = list(dict.fromkeys(r.source for r in reports[0].rows if r.attack == recipe))
    return {s: float(np.mean([rep.transfer(recipe, s) for rep in reports])) for s in sources}


def dump(summary: dict, path) -> None:
    text = json.dumps(summary, indent=2)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    print(text)

"""Transfer benchmark: recipes, model zoo, suite runner and reports.

A recipe is a dash-separated list of attack components, e.g. ``CFM-RDI`` or
``SI-CFM[p=0.1,a=0.5]-RDI``. MI and TI are part of every recipe unless the
``NOMI`` / ``NOTI`` tokens remove them. CFM options go in brackets:

    p=<float>   mixing probability      a=<float>   alpha_max
    noshuffle   mix each image with its own clean features
    noclean     mix with the batch's current (perturbed) features
    nochannel   one alpha per image instead of per channel
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng as rngmod
from .attack import AttackConfig, run_attack
from .cfm import CfmConfig
from .data import (
    LabeledImageSet,
    assign_targets,
    load_cifar10_binary,
    make_synthetic,
    stratified_sample,
)
from .models import ARCHS, Model, TrainConfig, build_model, load_weights, predict, save_weights, train
from .tensor import ShapeError
from .transforms import TransformConfig

log = logging.getLogger(__name__)

CSV_HEADER = ["attack", "source", "target", "success_count", "total", "success_rate", "seconds_per_image"]
SWEEP_PROBS = (0.05, 0.1, 0.15)
SWEEP_ALPHAS = (0.5, 0.75, 1.0)
ABLATIONS = ("noshuffle", "noclean", "nochannel")
ZOO_SEED = 100  # model i of the zoo is initialised and shuffled with ZOO_SEED + i

_TOKEN = re.compile(r"^([A-Za-z]+)(?:\[([^\]]*)\])?$")
_TRANSFORM_TOKENS = {"DI": "di", "RDI": "rdi", "SI": "si", "VT": "vt", "ADMIX": "admix"}


class RecipeError(ValueError):
    pass


# ---------------------------------------------------------------- recipes


def _split_recipe(name: str) -> List[str]:
    # split on dashes outside brackets
    parts, depth, cur = [], 0, ""
    for ch in name:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "-" and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    parts.append(cur)
    return [p.strip() for p in parts if p.strip()]


def _cfm_options(opts: str, default: CfmConfig) -> CfmConfig:
    kw = asdict(default)
    for item in filter(None, (o.strip() for o in opts.split(","))):
        key, _, val = item.partition("=")
        key = key.strip().lower()
        try:
            if key == "p":
                kw["mixing_prob"] = float(val)
            elif key == "a":
                kw["alpha_max"] = float(val)
            elif key == "noshuffle" and not val:
                kw["shuffle"] = False
            elif key == "noclean" and not val:
                kw["use_clean_features"] = False
            elif key == "nochannel" and not val:
                kw["channelwise_alpha"] = False
            else:
                raise RecipeError(f"unknown CFM option {item!r}")
        except ValueError as exc:
            raise RecipeError(f"bad CFM option {item!r}: {exc}") from exc
    return CfmConfig(**kw)


def parse_recipe(name: str, base: Optional[AttackConfig] = None, cfm_default: Optional[CfmConfig] = None) -> AttackConfig:
    """Build the AttackConfig for a recipe name on top of base (epsilon, eta, T, loss, seed)."""
    base = base or AttackConfig()
    cfm_default = cfm_default or CfmConfig()
    tokens = _split_recipe(name)
    if not tokens:
        raise RecipeError("empty recipe")
    flags = {"ti": True}
    momentum = True
    cfm = None
    for tok in tokens:
        m = _TOKEN.match(tok)
        if not m:
            raise RecipeError(f"cannot parse recipe token {tok!r} in {name!r}")
        word, opts = m.group(1).upper(), m.group(2)
        if opts is not None and word != "CFM":
            raise RecipeError(f"only CFM takes options, got {tok!r}")
        if word in _TRANSFORM_TOKENS:
            flags[_TRANSFORM_TOKENS[word]] = True
        elif word == "CFM":
            cfm = _cfm_options(opts or "", cfm_default)
        elif word in ("MI", "TI"):
            pass  # on by default, accepted for readability
        elif word == "NOMI":
            momentum = False
        elif word == "NOTI":
            flags["ti"] = False
        else:
            raise RecipeError(f"unknown recipe token {tok!r} in {name!r}")
    if flags.get("di") and flags.get("rdi"):
        raise RecipeError("DI and RDI are alternatives, pick one")
    tc = TransformConfig(**{**asdict(base.transform), **{k: False for k in _TRANSFORM_TOKENS.values()}, "ti": False, **flags})
    return AttackConfig(
        epsilon=base.epsilon,
        eta=base.eta,
        iterations=base.iterations,
        mu=base.mu,
        momentum=momentum,
        mi_normalize=base.mi_normalize,
        transform=tc,
        cfm=cfm,
        loss=base.loss,
        seed=base.seed,
    )


def sweep_recipes(probs: Sequence[float] = SWEEP_PROBS, alphas: Sequence[float] = SWEEP_ALPHAS, rest: str = "RDI") -> List[str]:
    """One CFM recipe per (p, alpha_max) cell, p-major."""
    return [f"CFM[p={p:g},a={a:g}]-{rest}" for p in probs for a in alphas]


def ablation_recipes(rest: str = "RDI") -> List[str]:
    return [f"CFM-{rest}"] + [f"CFM[{a}]-{rest}" for a in ABLATIONS]


# ---------------------------------------------------------------- config


@dataclass
class SuiteConfig:
    recipes: List[str] = field(default_factory=lambda: ["RDI", "CFM-RDI"])
    sources: List[str] = field(default_factory=lambda: list(ARCHS))
    targets: List[str] = field(default_factory=lambda: list(ARCHS))
    # data
    data: str = "synthetic"  # or "cifar10"
    cifar_dir: Optional[str] = None
    image_size: int = 16
    num_classes: int = 10
    train_per_class: int = 200
    attack_per_class: int = 20
    # zoo
    zoo_dir: Optional[str] = None  # load <arch>.cfmw from here, train and save missing ones
    train_epochs: int = 10
    train_lr: float = 0.02
    # attack
    batch_size: int = 20
    seed: int = 0
    epsilon: float = 16 / 255
    eta: float = 2 / 255
    iterations: int = 100
    loss: str = "logit"
    cfm_prob: float = 0.25
    alpha_max: float = 0.75
    # output
    csv_path: Optional[str] = None
    json_path: Optional[str] = None

    def __post_init__(self):
        for arch in list(self.sources) + list(self.targets):
            if arch not in ARCHS:
                raise ValueError(f"unknown model id {arch!r}, expected one of {ARCHS}")
        if self.data not in ("synthetic", "cifar10"):
            raise ValueError(f"data must be 'synthetic' or 'cifar10', got {self.data!r}")
        if self.data == "cifar10" and not self.cifar_dir:
            raise ValueError("data = 'cifar10' needs cifar_dir")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.recipes:
            raise ValueError("at least one recipe is required")
        for r in self.recipes:
            self.attack_config(r)  # validates

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (3, 32, 32) if self.data == "cifar10" else (3, self.image_size, self.image_size)

    def attack_config(self, recipe: str) -> AttackConfig:
        base = AttackConfig(
            epsilon=self.epsilon, eta=self.eta, iterations=self.iterations, loss=self.loss, seed=self.seed
        )
        return parse_recipe(recipe, base, CfmConfig(mixing_prob=self.cfm_prob, alpha_max=self.alpha_max))

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        """Accepts a flat mapping or one nested a level deep (TOML sections are flattened)."""
        flat = {}
        for k, v in d.items():
            if isinstance(v, dict):
                flat.update(v)
            else:
                flat[k] = v
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**flat)


# ---------------------------------------------------------------- data and zoo


def training_sets(cfg: SuiteConfig) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """(train, test) sets for the zoo. They do not depend on the suite seed."""
    if cfg.data == "cifar10":
        tr = load_cifar10_binary(cfg.cifar_dir, "train")
        te = load_cifar10_binary(cfg.cifar_dir, "test")
        return stratified_sample(tr, cfg.train_per_class, seed=1), stratified_sample(te, 50, seed=2)
    shape = cfg.input_shape
    return (
        make_synthetic(cfg.num_classes, cfg.train_per_class, shape, seed=1),
        make_synthetic(cfg.num_classes, 50, shape, seed=2),
    )


def attack_set(cfg: SuiteConfig) -> LabeledImageSet:
    """Stratified attack images with random targets, both keyed by the suite seed."""
    if cfg.data == "cifar10":
        pool = load_cifar10_binary(cfg.cifar_dir, "test")
        images = stratified_sample(pool, cfg.attack_per_class, seed=cfg.seed)
    else:
        images = make_synthetic(cfg.num_classes, cfg.attack_per_class, cfg.input_shape, seed=1000 + cfg.seed)
    return assign_targets(images, seed=cfg.seed)


def train_zoo_model(arch: str, cfg: SuiteConfig, train_set=None, test_set=None) -> Tuple[Model, float]:
    if train_set is None:
        train_set, test_set = training_sets(cfg)
    seed = ZOO_SEED + ARCHS.index(arch)
    model = build_model(arch, cfg.input_shape, cfg.num_classes, seed=seed)
    tc = TrainConfig(epochs=cfg.train_epochs, learning_rate=cfg.train_lr, seed=seed)
    res = train(model, train_set, tc, test_set)
    log.info("trained %s: test accuracy %.3f", arch, res.accuracy)
    return model, res.accuracy


def load_zoo(cfg: SuiteConfig, archs: Optional[Sequence[str]] = None) -> Dict[str, Model]:
    """Models for archs (default: every source and target). Missing files are trained and saved."""
    archs = list(dict.fromkeys(archs or list(cfg.sources) + list(cfg.targets)))
    zoo: Dict[str, Model] = {}
    sets = None
    for arch in archs:
        path = Path(cfg.zoo_dir) / f"{arch}.cfmw" if cfg.zoo_dir else None
        if path is not None and path.exists():
            zoo[arch] = load_weights(path)
            continue
        if sets is None:
            sets = training_sets(cfg)
        zoo[arch], _ = train_zoo_model(arch, cfg, *sets)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_weights(zoo[arch], path)
    return zoo


# ---------------------------------------------------------------- evaluation


def evaluate_transfer(adv_images, targets, target_model: Model) -> int:
    """Number of images the model classifies as their target (argmax, ties to the lowest index)."""
    adv = np.asarray(adv_images, dtype=np.float32)
    targets = np.asarray(targets)
    if adv.ndim != 4 or tuple(adv.shape[1:]) != tuple(target_model.input_shape):
        raise ShapeError(f"batch {adv.shape} does not fit model input {target_model.input_shape}")
    if len(targets) != len(adv):
        raise ShapeError(f"{len(targets)} targets for {len(adv)} images")
    return int(np.sum(predict(target_model, adv) == targets))


def craft(model: Model, dataset: LabeledImageSet, cfg: AttackConfig, batch_size: int = 20) -> Tuple[np.ndarray, float]:
    """Adversarial images for the whole set, batch by batch. Returns (images, seconds)."""
    out = np.empty_like(dataset.images)
    start = time.perf_counter()
    for b in range(0, len(dataset), batch_size):
        sl = slice(b, b + batch_size)
        # each batch gets its own stream family so batches are independent attack runs
        bcfg = replace(cfg, seed=rngmod.derive_seed(cfg.seed, b // batch_size))
        out[sl] = run_attack(model, dataset.images[sl], dataset.target_labels[sl], bcfg).x_adv
    return out, time.perf_counter() - start


# ---------------------------------------------------------------- report


@dataclass
class ReportRow:
    attack: str
    source: str
    target: str
    success_count: int
    total: int
    seconds_per_image: float

    @property
    def success_rate(self) -> float:
        return self.success_count / self.total if self.total else 0.0


@dataclass
class TransferReport:
    rows: List[ReportRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    version: str = ""

    def rate(self, attack: str, source: str, target: str) -> float:
        for r in self.rows:
            if (r.attack, r.source, r.target) == (attack, source, target):
                return r.success_rate
        raise KeyError((attack, source, target))

    def transfer(self, attack: str, source: str) -> float:
        """Mean success over the targets that are not the source."""
        rates = [r.success_rate for r in self.rows if r.attack == attack and r.source == source and r.target != source]
        if not rates:
            raise KeyError((attack, source))
        return float(np.mean(rates))

    def mean_transfer(self, attack: str) -> float:
        sources = list(dict.fromkeys(r.source for r in self.rows if r.attack == attack))
        return float(np.mean([self.transfer(attack, s) for s in sources]))

    def to_json(self) -> str:
        rows = [{**asdict(r), "success_rate": r.success_rate} for r in self.rows]
        return json.dumps({"version": self.version, "config": self.config, "rows": rows}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TransferReport":
        d = json.loads(text)
        rows = [ReportRow(**{k: v for k, v in r.items() if k != "success_rate"}) for r in d["rows"]]
        return cls(rows, d.get("config", {}), d.get("version", ""))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(
                [r.attack, r.source, r.target, r.success_count, r.total, f"{r.success_rate:.6f}", f"{r.seconds_per_image:.6g}"]
            )
        return buf.getvalue()


def write_report(report: TransferReport, csv_path=None, json_path=None) -> None:
    if csv_path:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        Path(csv_path).write_text(report.to_csv())
    if json_path:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        Path(json_path).write_text(report.to_json())


def version_stamp() -> str:
    try:
        ver = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        ver = "0+unknown"
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{ver}+g{rev}" if rev else ver


# ---------------------------------------------------------------- suite


def run_suite(
    cfg: SuiteConfig,
    zoo: Optional[Dict[str, Model]] = None,
    dataset: Optional[LabeledImageSet] = None,
) -> TransferReport:
    """Craft on every (recipe, source) and evaluate on every target. Rows follow config order."""
    zoo = zoo if zoo is not None else load_zoo(cfg)
    missing = [a for a in list(cfg.sources) + list(cfg.targets) if a not in zoo]
    if missing:
        raise KeyError(f"models missing from zoo: {missing}")
    dataset = dataset if dataset is not None else attack_set(cfg)
    report = TransferReport(config=asdict(cfg), version=version_stamp())
    n = len(dataset)
    for recipe in cfg.recipes:
        acfg = cfg.attack_config(recipe)
        for src in cfg.sources:
            adv, seconds = craft(zoo[src], dataset, acfg, cfg.batch_size)
            for tgt in cfg.targets:
                hits = evaluate_transfer(adv, dataset.target_labels, zoo[tgt])
                report.rows.append(ReportRow(recipe, src, tgt, hits, n, seconds / n))
            log.info("%s from %s: %.1fs", recipe, src, seconds)
    write_report(report, cfg.csv_path, cfg.json_path)
    return report


def sweep_table(report: TransferReport, probs=SWEEP_PROBS, alphas=SWEEP_ALPHAS, rest: str = "RDI") -> np.ndarray:
    """[len(probs), len(alphas)] grid of mean transfer success from a sweep report."""
    names = sweep_recipes(probs, alphas, rest)
    vals = [report.mean_transfer(n) for n in names]
    return np.array(vals).reshape(len(probs), len(alphas))

"""Transfer-attack harness: fine-tuning, scratch training, sample-wise learning curves, SLC-AUC."""
from __future__ import annotations

import copy
import csv
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import DomainDataset, SubsetSpec, stratified_subset
from .model import (SplitClassifier, build_model, enforce_mask, mask_gradients, reset_classifier, to_labels,
                    to_tensor)

CACHE_COLUMNS = ("init_kind", "n", "seed", "scheme", "lr", "accuracy")


class SmallSubsetWarning(UserWarning):
    """Fine-tuning subset has fewer samples than there are classes."""


@dataclass(frozen=True)
class FineTuneConfig:
    scheme: str = "FF"
    lr: float = 1e-3
    epochs: int = 30
    step_size: int = 10
    step_gamma: float = 0.1
    batch_size: int = 256
    seeds: tuple = (0, 1, 2, 3, 4)
    head_init: str = "reinit"
    revive_zeros: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scheme", self.scheme.upper())
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.scheme not in ("FF", "LP"):
            raise ValueError(f"scheme must be FF or LP, got {self.scheme!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.head_init not in ("reinit", "keep"):
            raise ValueError(f"unknown head_init {self.head_init!r}")


@dataclass
class LearningCurve:
    n: list[int]
    mean_acc: list[float]
    std_acc: list[float]
    init_kind: str
    per_seed: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.n, self.n[1:])):
            raise ValueError("grid sizes must be strictly increasing")
        if len(self.mean_acc) != len(self.n) or len(self.std_acc) != len(self.n):
            raise ValueError("curve arrays must match the grid length")

    @property
    def points(self) -> list[tuple[int, float, float]]:
        return list(zip(self.n, self.mean_acc, self.std_acc))


@dataclass
class SLCResult:
    curve_transfer: LearningCurve
    curve_scratch: LearningCurve
    auc: float


# ---------------------------------------------------------------- training loops

def evaluate(model: SplitClassifier, ds: DomainDataset, batch_size: int = 512) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(ds), batch_size):
            logits = model(to_tensor(ds.x[i:i + batch_size]))
            correct += int((logits.argmax(1) == to_labels(ds.y[i:i + batch_size])).sum())
    return correct / len(ds)


def train_classifier(model: SplitClassifier, train: DomainDataset, *, epochs: int, lr: float,
                     batch_size: int, seed: int, scheme: str = "FF", step_size: int = 10,
                     step_gamma: float = 0.1, respect_mask: bool = True) -> SplitClassifier:
    """Adam + step-decay training in place.  LP trains the head only."""
    if scheme == "LP":
        params = list(model.classifier.parameters())
    else:
        params = list(model.parameters())
    if epochs == 0 or len(train) == 0:
        return model
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=step_size, gamma=step_gamma)
    rng = np.random.default_rng(seed)
    x, y = to_tensor(train.x), to_labels(train.y)
    bs = max(1, min(batch_size, len(train)))
    for _ in range(epochs):
        model.train()
        if scheme == "LP":
            model.feature_extractor.eval()
        perm = rng.permutation(len(train))
        for i in range(0, len(train), bs):
            idx = perm[i:i + bs]
            opt.zero_grad()
            F.cross_entropy(model(x[idx]), y[idx]).backward()
            if respect_mask:
                mask_gradients(model)
            opt.step()
            if respect_mask:
                enforce_mask(model)
        sched.step()
    model.eval()
    return model


def _check_subset(subset: DomainDataset) -> None:
    if len(subset) == 0:
        raise ValueError("fine-tuning subset is empty")
    if len(subset) < subset.num_classes:
        warnings.warn(f"subset of {len(subset)} samples is smaller than {subset.num_classes} classes",
                      SmallSubsetWarning, stacklevel=3)


def finetune(init_model: SplitClassifier, target_train_subset: DomainDataset, target_test: DomainDataset,
             cfg: FineTuneConfig, seed: int = 0) -> float:
    """Attack: re-initialise the head, fine-tune on the subset, return test accuracy.

    Under FF pruned weights stay at zero unless ``cfg.revive_zeros`` is set.
    """
    _check_subset(target_train_subset)
    model = copy.deepcopy(init_model)
    if cfg.head_init == "reinit":
        reset_classifier(model, seed=10_000 + seed)
    if cfg.revive_zeros:
        model.mask = None
    train_classifier(model, target_train_subset, epochs=cfg.epochs, lr=cfg.lr,
                     batch_size=cfg.batch_size, seed=seed, scheme=cfg.scheme,
                     step_size=cfg.step_size, step_gamma=cfg.step_gamma)
    return evaluate(model, target_test)


def train_scratch(architecture_id: str, target_train_subset: DomainDataset, target_test: DomainDataset,
                  cfg: FineTuneConfig, seed: int = 0) -> float:
    """Baseline: the same protocol from a seeded random initialisation, all weights trainable."""
    _check_subset(target_train_subset)
    model = build_model(architecture_id, target_train_subset.num_classes,
                        target_train_subset.image_shape, seed=20_000 + seed)
    train_classifier(model, target_train_subset, epochs=cfg.epochs, lr=cfg.lr,
                     batch_size=cfg.batch_size, seed=seed, scheme="FF",
                     step_size=cfg.step_size, step_gamma=cfg.step_gamma)
    return evaluate(model, target_test)


# ---------------------------------------------------------------- curves

class CurveCache:
    """Per-experiment CSV of finished (init_kind, n, seed, scheme, lr) cells."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.hits = 0
        self._rows: dict[tuple, float] = {}
        if self.path.exists():
            with open(self.path, newline="") as fh:
                for r in csv.DictReader(fh):
                    self._rows[self._key(r["init_kind"], r["n"], r["seed"], r["scheme"], r["lr"])] = \
                        float(r["accuracy"])

    @staticmethod
    def _key(init_kind, n, seed, scheme, lr) -> tuple:
        return (str(init_kind), int(n), int(seed), str(scheme).upper(), repr(float(lr)))

    def get(self, *key) -> float | None:
        v = self._rows.get(self._key(*key))
        if v is not None:
            self.hits += 1
        return v

    def put(self, init_kind, n, seed, scheme, lr, accuracy: float) -> None:
        self._rows[self._key(init_kind, n, seed, scheme, lr)] = float(accuracy)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(CACHE_COLUMNS)
            w.writerow([init_kind, int(n), int(seed), str(scheme).upper(), repr(float(lr)), repr(float(accuracy))])


def _run_cell(init, subset, test, cfg, seed) -> float:
    torch.set_num_threads(1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SmallSubsetWarning)
        if isinstance(init, str):
            return train_scratch(init, subset, test, cfg, seed)
        return finetune(init, subset, test, cfg, seed)


def build_slc(init: SplitClassifier | str, target_train: DomainDataset, target_test: DomainDataset,
              sizes: Sequence[int], cfg: FineTuneConfig, *, cache: CurveCache | None = None,
              jobs: int = 1, init_kind: str | None = None) -> LearningCurve:
    """Accuracy at each subset size, averaged over ``cfg.seeds``.

    ``init`` is a model (transfer curve) or an architecture id (scratch curve).
    For a given seed the subsets over ``sizes`` are nested, and the transfer and
    scratch curves see the same subsets.
    """
    sizes = [int(s) for s in sizes]
    if any(s > len(target_train) for s in sizes):
        raise ValueError(f"grid {sizes} exceeds the target training split ({len(target_train)})")
    kind = init_kind or ("scratch" if isinstance(init, str) else "transfer")
    scheme = "FF" if isinstance(init, str) else cfg.scheme
    results: dict[tuple[int, int], float] = {}
    todo = []
    for n in sizes:
        for s in cfg.seeds:
            hit = cache.get(kind, n, s, scheme, cfg.lr) if cache is not None else None
            if hit is not None:
                results[(n, s)] = hit
            else:
                todo.append((n, s))

    def subset(n, s):
        return stratified_subset(target_train, SubsetSpec(n, stratified=n >= target_train.num_classes, seed=s))

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {(n, s): pool.submit(_run_cell, init, subset(n, s), target_test, cfg, s) for n, s in todo}
            computed = {k: f.result() for k, f in futs.items()}
    else:
        computed = {(n, s): _run_cell(init, subset(n, s), target_test, cfg, s) for n, s in todo}
    for (n, s) in todo:  # fixed order keeps the cache file deterministic
        results[(n, s)] = computed[(n, s)]
        if cache is not None:
            cache.put(kind, n, s, scheme, cfg.lr, computed[(n, s)])

    means, stds, per_seed = [], [], {}
    for n in sizes:
        accs = np.array([results[(n, s)] for s in cfg.seeds])
        per_seed[n] = accs.tolist()
        means.append(float(accs.mean()))
        stds.append(float(accs.std(ddof=1)) if len(accs) >= 2 else 0.0)
    return LearningCurve(sizes, means, stds, kind, per_seed)


def slc_auc(curve_transfer, curve_scratch=None) -> float:
    """Signed area between two learning curves over log10(n), trapezoid rule.

    Accepts two ``LearningCurve`` objects (or an ``SLCResult``-like pair).  The
    sum is accumulated in exact rational arithmetic on the float inputs and
    rounded once, so sign flips and exact shifts are reproduced bit for bit.
    """
    if curve_scratch is None:
        curve_transfer, curve_scratch = curve_transfer.curve_transfer, curve_transfer.curve_scratch
    n_t, n_s = list(curve_transfer.n), list(curve_scratch.n)
    if n_t != n_s:
        raise ValueError(f"curves are on different grids: {n_t} vs {n_s}")
    if len(n_t) < 2:
        raise ValueError("need at least two grid points")
    xs = [Fraction(math.log10(n)) for n in n_t]
    gaps = [Fraction(a) - Fraction(b) for a, b in zip(curve_transfer.mean_acc, curve_scratch.mean_acc)]
    area = sum((xs[i + 1] - xs[i]) * (gaps[i] + gaps[i + 1]) / 2 for i in range(len(xs) - 1))
    return float(area)


def slc(model: SplitClassifier, architecture_id: str, target_train: DomainDataset,
        target_test: DomainDataset, sizes: Sequence[int], cfg: FineTuneConfig, *,
        cache: CurveCache | None = None, jobs: int = 1,
        scratch_curve: LearningCurve | None = None) -> SLCResult:
    transfer = build_slc(model, target_train, target_test, sizes, cfg, cache=cache, jobs=jobs)
    if scratch_curve is None:
        scratch_curve = build_slc(architecture_id, target_train, target_test, sizes, cfg, cache=cache, jobs=jobs)
    return SLCResult(transfer, scratch_curve, slc_auc(transfer, scratch_curve))


# ---------------------------------------------------------------- reports

def slc_report(result: SLCResult, config_hash: str, extra: dict | None = None) -> dict:
    def pack(c: LearningCurve):
        return {"mean": c.mean_acc, "std": c.std_acc,
                "per_seed": {str(k): v for k, v in c.per_seed.items()}}
    return {
        "grid": result.curve_transfer.n,
        "transfer": pack(result.curve_transfer),
        "scratch": pack(result.curve_scratch),
        "auc": result.auc,
        "config_hash": config_hash,
        **(extra or {}),
    }


def write_report(report: dict, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return p


def report_to_result(report: dict) -> SLCResult:
    grid = [int(n) for n in report["grid"]]

    def unpack(key):
        c = report[key]
        per = {int(k): v for k, v in c.get("per_seed", {}).items()}
        return LearningCurve(grid, list(c["mean"]), list(c["std"]), key, per)
    return SLCResult(unpack("transfer"), unpack("scratch"), float(report["auc"]))


def plot_slc(result: SLCResult, path: str | Path, title: str | None = None) -> Path:
    """Transfer (red) and scratch (blue) curves on a log axis with the gap shaded."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with plt.rc_context({"svg.hashsalt": "ntprune"}):  # stable SVG element ids
        t, s = result.curve_transfer, result.curve_scratch
        fig, ax = plt.subplots(figsize=(5, 3.6))
        ax.errorbar(t.n, t.mean_acc, yerr=t.std_acc, color="tab:red", ls="--", marker="o",
                    capsize=3, label="transfer")
        ax.errorbar(s.n, s.mean_acc, yerr=s.std_acc, color="tab:blue", ls="--", marker="s",
                    capsize=3, label="scratch")
        ax.fill_between(t.n, t.mean_acc, s.mean_acc, color="grey", alpha=0.3)
        ax.set_xscale("log")
        ax.set_xlabel("target training samples")
        ax.set_ylabel("test accuracy")
        ax.set_title(title or f"SLC-AUC = {result.auc:+.3f}")
        ax.legend(loc="lower right")
        fig.tight_layout()
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(p, metadata={"Date": None} if p.suffix == ".svg" else None)
        plt.close(fig)
    return p


def config_dict(cfg: FineTuneConfig) -> dict:
    return asdict(cfg)


def default_jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))

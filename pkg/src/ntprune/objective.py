"""Non-transferable pruning objective: source CE, capped target penalty, Fisher-space ratio."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import torch
import torch.nn.functional as F

from .model import FeatureBatch, SplitClassifier, to_labels, to_tensor

HISTORY_COLUMNS = ("iteration", "L_S", "L_T", "R_T", "R_Phi_T", "total", "density",
                   "primal_residual", "dual_residual")


@dataclass(frozen=True)
class NTPLossConfig:
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 0.1
    epsilon_denom: float = 1e-8
    r_cap: float = 1e6
    # "class_means": centre of the class means; "sample_mean": mean over all samples
    numerator: str = "class_means"

    def __post_init__(self):
        for f in ("alpha", "beta", "gamma", "epsilon_denom", "r_cap"):
            v = getattr(self, f)
            if math.isnan(v) or v < 0:
                raise ValueError(f"{f} must be a nonnegative number, got {v}")
        for f in ("beta", "epsilon_denom", "r_cap"):
            if getattr(self, f) == 0:
                raise ValueError(f"{f} must be positive")
        if not math.isfinite(self.epsilon_denom) or not math.isfinite(self.r_cap):
            raise ValueError("epsilon_denom and r_cap must be finite")
        if self.numerator not in ("class_means", "sample_mean"):
            raise ValueError(f"unknown numerator form {self.numerator!r}")


@dataclass
class LossBreakdown:
    L_S: torch.Tensor
    L_T: torch.Tensor
    R_T: torch.Tensor
    R_Phi_T: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


@dataclass
class FeatureStats:
    class_means: torch.Tensor  # (present classes, feature_dim)
    classes: torch.Tensor      # label id of each row of class_means
    class_counts: torch.Tensor
    global_mean: torch.Tensor
    within_sum: torch.Tensor
    between_sum: torch.Tensor


def _batch(batch):
    x, y = batch
    return to_tensor(x), to_labels(y)


def source_loss(model: SplitClassifier, source_batch) -> torch.Tensor:
    x, y = _batch(source_batch)
    logits = model(x)
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    return F.cross_entropy(logits, y)


def capped_target_penalty(target_ce: torch.Tensor, cfg: NTPLossConfig) -> torch.Tensor:
    """``-min(beta, alpha * L_T)``; flat (zero gradient) once the cap is hit."""
    if not torch.isfinite(target_ce).all():
        raise FloatingPointError(f"non-finite target loss {float(target_ce)}")
    return -torch.clamp(cfg.alpha * target_ce, max=cfg.beta)


def target_penalty(model: SplitClassifier, target_batch, cfg: NTPLossConfig):
    """Return ``(R_T, L_T)`` for a target batch."""
    x, y = _batch(target_batch)
    l_t = F.cross_entropy(model(x), y)
    return capped_target_penalty(l_t, cfg), l_t


def between_class_spread(class_means: torch.Tensor, z: torch.Tensor | None = None,
                         form: str = "class_means") -> torch.Tensor:
    """Numerator of the Fisher ratio: sum over classes of ||mean_c - centre||_2.

    ``form="class_means"`` centres on the average of the class means;
    ``form="sample_mean"`` centres on the mean over all samples ``z``.
    """
    if form == "sample_mean":
        centre = z.mean(dim=0)
    else:
        centre = class_means.mean(dim=0)
    return torch.linalg.vector_norm(class_means - centre, dim=1).sum()


def feature_stats(features: FeatureBatch, form: str = "class_means") -> FeatureStats:
    z, y = features.z, features.y
    if z.shape[0] == 0:
        raise ValueError("empty feature batch")
    classes = torch.unique(y)  # sorted; absent classes simply do not appear
    onehot = (y[:, None] == classes[None, :]).to(z.dtype)
    counts = onehot.sum(dim=0)
    means = (onehot.T @ z) / counts[:, None]
    own_mean = means[torch.searchsorted(classes, y)]
    within = torch.linalg.vector_norm(z - own_mean, dim=1).sum()
    between = between_class_spread(means, z, form)
    return FeatureStats(means, classes, counts.to(torch.long), means.mean(dim=0), within, between)


def fisher_regularizer(features: FeatureBatch, cfg: NTPLossConfig) -> torch.Tensor:
    """gamma * between / within, with a floored denominator and a cap at singularities."""
    if torch.unique(features.y).numel() < 2:
        raise ValueError("Fisher regulariser needs at least two classes in the batch")
    st = feature_stats(features, cfg.numerator)
    if float(st.within_sum.detach()) > cfg.epsilon_denom:
        return cfg.gamma * st.between_sum / st.within_sum
    return torch.clamp(cfg.gamma * st.between_sum / cfg.epsilon_denom, max=cfg.r_cap)


def ntp_loss(model: SplitClassifier, source_batch, target_batch, cfg: NTPLossConfig,
             *, joint_forward: bool = False) -> LossBreakdown:
    """Objective terms for one (source, target) batch pair.

    ``joint_forward`` pushes both batches through the network together so that
    batch-norm layers in training mode see one shared set of batch statistics.
    """
    xs, ys = _batch(source_batch)
    xt, yt = _batch(target_batch)
    if joint_forward:
        z_all = model.features(torch.cat([xs, xt]))
        logits_all = model.classifier(z_all)
        l_s = F.cross_entropy(logits_all[: len(xs)], ys)
        z, logits_t = z_all[len(xs):], logits_all[len(xs):]
    else:
        l_s = source_loss(model, (xs, ys))
        z = model.features(xt)
        logits_t = model.classifier(z)
    l_t = F.cross_entropy(logits_t, yt)
    r_t = capped_target_penalty(l_t, cfg)
    if cfg.gamma > 0:
        r_phi = fisher_regularizer(FeatureBatch(z, yt), cfg)
    else:
        r_phi = torch.zeros((), dtype=l_s.dtype)
    return LossBreakdown(l_s, l_t, r_t, r_phi, l_s + r_t + r_phi)


class HistoryWriter:
    """Appends one row per ADMM iteration to a training-history CSV."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(HISTORY_COLUMNS)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c, "")) for c in HISTORY_COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v

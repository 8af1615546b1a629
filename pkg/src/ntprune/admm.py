"""ADMM pruning loop for the non-transferable objective.

Each iteration trains the weights against the objective plus a quadratic pull
toward ``Z - U`` (W-update), soft-thresholds ``W + U`` into the sparse auxiliary
``Z`` (Z-update), then accumulates the disagreement into the scaled dual ``U``.
Only the feature extractor's weight tensors take part in the penalty and mask.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .datasets import DomainDataset, SubsetSpec, stratified_subset
from .model import (SparsityMask, SplitClassifier, apply_mask, density, enforce_mask, mask_gradients,
                    recalibrate_batchnorm, to_labels, to_tensor)
from .objective import LossBreakdown, NTPLossConfig, ntp_loss, source_loss

log = logging.getLogger(__name__)

TERMINATIONS = ("sparsity_reached", "converged", "max_iterations", "diverged")


@dataclass(frozen=True)
class ADMMConfig:
    rho: float = 1e-2
    lam: float = 1e-4
    target_sparsity: float = 0.8
    max_sparsity: float = 0.99
    w_epochs: int = 10
    max_iterations: int = 50
    lr: float = 1e-3
    source_fraction: float = 0.10
    target_fraction: float = 0.10
    convergence_tol: float = 1e-4
    batch_size: int = 64
    optimizer: str = "adam"
    seed: int = 0
    retrain_epochs: int = 0
    # batch-norm handling in W-updates: "frozen" keeps running stats fixed;
    # "joint" and "separate" train on batch statistics (one shared forward, or one
    # per domain) and afterwards re-estimate running stats on the source subset
    bn_mode: str = "frozen"

    def __post_init__(self):
        if not 0.0 < self.target_sparsity <= self.max_sparsity < 1.0:
            raise ValueError("need 0 < target_sparsity <= max_sparsity < 1")
        if self.rho <= 0 or self.lam < 0:
            raise ValueError("rho must be positive and lam nonnegative")
        if self.w_epochs < 0 or self.max_iterations < 1:
            raise ValueError("w_epochs must be >= 0 and max_iterations >= 1")
        for f in ("source_fraction", "target_fraction"):
            if not 0.0 < getattr(self, f) <= 1.0:
                raise ValueError(f"{f} must lie in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.bn_mode not in ("frozen", "joint", "separate"):
            raise ValueError(f"unknown bn_mode {self.bn_mode!r}")

    @property
    def tau(self) -> float:
        return self.lam / self.rho


@dataclass
class ADMMState:
    W: torch.Tensor
    Z: torch.Tensor
    U: torch.Tensor
    t: int = 0
    w_trace: list = field(default_factory=list)

    @classmethod
    def initial(cls, model: SplitClassifier) -> "ADMMState":
        w = model.prunable_vector().values
        return cls(W=w.clone(), Z=w.clone(), U=torch.zeros_like(w), t=0)


@dataclass
class PruneResult:
    pruned_model: SplitClassifier
    mask: SparsityMask
    history: list[dict]
    termination_reason: str
    failed: bool = False
    state: ADMMState | None = None


def sparsity(params) -> float:
    return 1.0 - density(params)


def soft_threshold(v: torch.Tensor, tau: float) -> torch.Tensor:
    return torch.sign(v) * torch.clamp(v.abs() - tau, min=0.0)


class DivergenceError(FloatingPointError):
    pass


def _penalty(model: SplitClassifier, target: torch.Tensor, rho: float) -> torch.Tensor:
    pieces = [p.reshape(-1) for _, p in model.prunable_parameters()]
    return 0.5 * rho * (torch.cat(pieces) - target).pow(2).sum()


def augmented_objective(model: SplitClassifier, state: ADMMState, source: DomainDataset,
                        target: DomainDataset, cfg: ADMMConfig, loss_cfg: NTPLossConfig) -> float:
    was = model.training
    model.eval()
    with torch.no_grad():
        br = ntp_loss(model, (source.x, source.y), (target.x, target.y), loss_cfg)
        val = br.total + _penalty(model, state.Z - state.U, cfg.rho)
    model.train(was)
    return float(val)


def _batches(n_src: int, n_tgt: int, batch: int, rng: np.random.Generator):
    ps, pt = rng.permutation(n_src), rng.permutation(n_tgt)
    steps = math.ceil(max(n_src, n_tgt) / batch)
    bs = min(batch, n_src)
    bt = min(batch, n_tgt)
    for i in range(steps):
        si = np.take(ps, np.arange(i * bs, (i + 1) * bs), mode="wrap")
        ti = np.take(pt, np.arange(i * bt, (i + 1) * bt), mode="wrap")
        yield si, ti


def w_update(state: ADMMState, model: SplitClassifier, source_subset: DomainDataset,
             target_subset: DomainDataset, cfg: ADMMConfig, loss_cfg: NTPLossConfig,
             *, seed: int | None = None, trace: bool = False) -> ADMMState:
    """Run ``cfg.w_epochs`` epochs of minibatch training on the augmented objective.

    The model is updated in place and its prunable weights become the new ``W``.
    With ``trace=True`` the full-subset augmented objective is recorded before
    training and after every epoch in ``state.w_trace``.
    """
    if cfg.w_epochs == 0:
        return replace(state, W=model.prunable_vector().values, w_trace=[])
    rng = np.random.default_rng(cfg.seed + 7919 * state.t if seed is None else seed)
    anchor = (state.Z - state.U).detach()
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr)
    else:
        opt = torch.optim.SGD(params, lr=cfg.lr)
    xs, ys = to_tensor(source_subset.x), to_labels(source_subset.y)
    xt, yt = to_tensor(target_subset.x), to_labels(target_subset.y)
    w_trace = [augmented_objective(model, state, source_subset, target_subset, cfg, loss_cfg)] if trace else []
    model.train(cfg.bn_mode != "frozen")
    for _ in range(cfg.w_epochs):
        for si, ti in _batches(len(xs), len(xt), cfg.batch_size, rng):
            opt.zero_grad()
            br = ntp_loss(model, (xs[si], ys[si]), (xt[ti], yt[ti]), loss_cfg,
                          joint_forward=cfg.bn_mode == "joint")
            loss = br.total + _penalty(model, anchor, cfg.rho)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite augmented loss at ADMM iteration {state.t}")
            loss.backward()
            opt.step()
        if trace:
            w_trace.append(augmented_objective(model, state, source_subset, target_subset, cfg, loss_cfg))
            model.train(cfg.bn_mode != "frozen")
    if cfg.bn_mode != "frozen":
        recalibrate_batchnorm(model, source_subset.x)
    model.eval()
    W = model.prunable_vector().values
    if not torch.isfinite(W).all():
        raise DivergenceError(f"non-finite weights after ADMM iteration {state.t}")
    return replace(state, W=W, w_trace=w_trace)


def z_update(state: ADMMState, cfg: ADMMConfig) -> ADMMState:
    """Closed-form minimiser of lam*||Z||_1 + rho/2*||W - Z + U||^2."""
    return replace(state, Z=soft_threshold(state.W + state.U, cfg.tau))


def u_update(state: ADMMState) -> ADMMState:
    return replace(state, U=state.U + (state.W - state.Z), t=state.t + 1)


def final_mask(state: ADMMState, cfg: ADMMConfig) -> SparsityMask:
    """Support of Z; when that is sparser than ``max_sparsity``, keep the top
    ``1 - target_sparsity`` share of |W + U| instead (ties go to lower index)."""
    mask = SparsityMask.from_support(state.Z)
    if mask.sparsity <= cfg.max_sparsity:
        return mask
    n = state.W.numel()
    keep_n = n - int(round(cfg.target_sparsity * n))
    mag = (state.W + state.U).abs().numpy()
    order = np.lexsort((np.arange(n), -mag))  # descending magnitude, then ascending index
    keep = np.zeros(n, dtype=bool)
    keep[order[:keep_n]] = True
    return SparsityMask(torch.from_numpy(keep))


def _evaluate(model, source, target, loss_cfg) -> LossBreakdown:
    model.eval()
    with torch.no_grad():
        return ntp_loss(model, (source.x, source.y), (target.x, target.y), loss_cfg)


def _retrain_source(model: SplitClassifier, source: DomainDataset, cfg: ADMMConfig) -> None:
    rng = np.random.default_rng(cfg.seed + 104729)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr)
    x, y = to_tensor(source.x), to_labels(source.y)
    model.train()
    for _ in range(cfg.retrain_epochs):
        perm = rng.permutation(len(x))
        for i in range(0, len(x), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            opt.zero_grad()
            source_loss(model, (x[idx], y[idx])).backward()
            mask_gradients(model)
            opt.step()
            enforce_mask(model)
    model.eval()


def run_ntp(model: SplitClassifier, source: DomainDataset, target: DomainDataset,
            cfg: ADMMConfig, loss_cfg: NTPLossConfig, *, history_writer=None) -> PruneResult:
    """Prune a source-pretrained model so it resists transfer to ``target``.

    ``source`` and ``target`` are full training splits; pruning subsets are drawn
    from them at the configured fractions.  The input model is not modified.
    """
    model = copy.deepcopy(model)
    src = stratified_subset(source, SubsetSpec(float(cfg.source_fraction), True, cfg.seed))
    tgt = stratified_subset(target, SubsetSpec(float(cfg.target_fraction), True, cfg.seed + 1))
    state = ADMMState.initial(model)
    history: list[dict] = []
    reason, failed, streak = "max_iterations", False, 0
    prev_total = None
    for _ in range(cfg.max_iterations):
        try:
            state = w_update(state, model, src, tgt, cfg, loss_cfg)
        except DivergenceError as exc:
            log.warning("%s", exc)
            reason, failed = "diverged", True
            break
        z_prev = state.Z
        state = z_update(state, cfg)
        state = u_update(state)
        br = _evaluate(model, src, tgt, loss_cfg).as_floats()
        row = {
            "iteration": state.t,
            **br,
            "density": density(state.Z),
            "primal_residual": float(torch.linalg.vector_norm(state.W - state.Z)),
            "dual_residual": cfg.rho * float(torch.linalg.vector_norm(state.Z - z_prev)),
        }
        history.append(row)
        if history_writer is not None:
            history_writer.append(row)
        log.info("admm t=%d total=%.4f sparsity(Z)=%.4f", state.t, br["total"], 1 - row["density"])
        if not math.isfinite(br["total"]):
            reason, failed = "diverged", True
            break
        if 1.0 - row["density"] >= cfg.target_sparsity:
            reason = "sparsity_reached"
            break
        if prev_total is not None and abs(br["total"] - prev_total) < cfg.convergence_tol:
            streak += 1
            if streak >= 3:
                reason = "converged"
                break
        else:
            streak = 0
        prev_total = br["total"]

    mask = final_mask(state, cfg)
    apply_mask(model, mask)
    if cfg.bn_mode != "frozen":
        recalibrate_batchnorm(model, src.x)
    if cfg.retrain_epochs > 0 and not failed:
        _retrain_source(model, src, cfg)
    return PruneResult(model, mask, history, reason, failed, state)

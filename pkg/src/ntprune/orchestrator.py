"""End-to-end pipeline stages: pretrain, prune, score transferability, report, plot.

Every artifact of a configuration lives under ``<out>/<config hash>/``::

    config.json
    pretrain/            checkpoint + metrics.json
    prune-<method>/      checkpoint + mask + history.csv + metrics.json
    slc/cache.csv        finished (init, n, seed, scheme, lr) cells
    slc/<label>/         report.json, curves.csv, slc.svg
"""
from __future__ import annotations

import csv
import json
import logging
import os
from pathlib import Path

from .admm import run_ntp
from .baselines import one_shot_magnitude_prune
from .config import ExperimentConfig
from .datasets import (DomainDataset, SyntheticPairConfig, generate_synthetic_domain_pair, load_image_domain,
                       train_test_split)
from .model import build_model, load_checkpoint, save_checkpoint
from .objective import HistoryWriter
from .transferability import (CurveCache, SLCResult, build_slc, evaluate, plot_slc, report_to_result, slc_auc,
                              slc_report, train_classifier, write_report)

log = logging.getLogger(__name__)

OUT_ENV = "NTPRUNE_OUT"
METHODS = ("ntp", "magnitude")


class PipelineError(RuntimeError):
    """A stage could not complete (missing inputs, divergence)."""


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def run_dir(cfg: ExperimentConfig, out_root: str | Path | None = None) -> Path:
    return Path(out_root if out_root is not None else default_out_root()) / cfg.hash


def _write_json(path: Path, obj: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _prepare(cfg: ExperimentConfig, out_root) -> Path:
    d = run_dir(cfg, out_root)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(cfg.to_json())
    return d


def load_domains(cfg: ExperimentConfig) -> tuple[DomainDataset, DomainDataset, DomainDataset, DomainDataset]:
    """(source_train, source_test, target_train, target_test) for a config."""
    spec, seed = cfg.data, cfg.seed_for("data")
    if spec.kind == "synthetic":
        src, tgt = generate_synthetic_domain_pair(SyntheticPairConfig(
            num_classes=spec.num_classes, per_class=spec.per_class, image_size=spec.image_size,
            shift=spec.shift, seed=seed))
    else:
        src = load_image_domain(spec.source, spec.image_size)
        tgt = load_image_domain(spec.target, spec.image_size)
        if src.label_set != tgt.label_set:
            raise PipelineError(f"source and target label sets differ: {src.label_set} vs {tgt.label_set}")
    s_tr, s_te = train_test_split(src, spec.test_fraction, seed=seed + 1)
    t_tr, t_te = train_test_split(tgt, spec.test_fraction, seed=seed + 2)
    return s_tr, s_te, t_tr, t_te


def _load_stage_model(d: Path, stage: str):
    if not (d / stage / "manifest.json").exists():
        hint = "pretrain" if stage == "pretrain" else f"prune --method {stage.split('-', 1)[1]}"
        raise PipelineError(f"no checkpoint at {d / stage}; run `{hint}` first")
    return load_checkpoint(d / stage)


# ---------------------------------------------------------------- stages

def cmd_pretrain(cfg: ExperimentConfig, out_root=None) -> dict:
    d = _prepare(cfg, out_root)
    s_tr, s_te, t_tr, t_te = load_domains(cfg)
    seed = cfg.seed_for("pretrain")
    model = build_model(cfg.architecture, s_tr.num_classes, s_tr.image_shape, seed=seed)
    p = cfg.pretrain
    train_classifier(model, s_tr, epochs=p.epochs, lr=p.lr, batch_size=p.batch_size, seed=seed,
                     scheme="FF", step_size=p.step_size, step_gamma=p.step_gamma)
    metrics = {
        "stage": "pretrain",
        "config_hash": cfg.hash,
        "architecture": cfg.architecture,
        "parameters": sum(q.numel() for q in model.parameters()),
        "epochs": p.epochs,
        "source_test_accuracy": evaluate(model, s_te),
        "target_test_accuracy": evaluate(model, t_te),
    }
    log.info("pretrained %s: source %.3f, target %.3f", cfg.architecture,
             metrics["source_test_accuracy"], metrics["target_test_accuracy"])
    save_checkpoint(model, d / "pretrain", provenance={"stage": "pretrain", "config_hash": cfg.hash}, seed=seed)
    _write_json(d / "pretrain" / "metrics.json", metrics)
    return metrics


def cmd_prune(cfg: ExperimentConfig, method: str = "ntp", out_root=None) -> dict:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    d = _prepare(cfg, out_root)
    model = _load_stage_model(d, "pretrain")
    s_tr, s_te, t_tr, t_te = load_domains(cfg)
    stage = d / f"prune-{method}"
    stage.mkdir(parents=True, exist_ok=True)
    metrics = {"stage": "prune", "method": method, "config_hash": cfg.hash}
    if method == "ntp":
        admm_cfg = cfg.admm_config()
        res = run_ntp(model, s_tr, t_tr, admm_cfg, cfg.loss, history_writer=HistoryWriter(stage / "history.csv"))
        pruned, mask = res.pruned_model, res.mask
        metrics.update(termination_reason=res.termination_reason, failed=res.failed,
                       iterations=len(res.history), target_sparsity=admm_cfg.target_sparsity)
    else:
        pruned, mask = one_shot_magnitude_prune(model, cfg.magnitude)
        metrics.update(target_sparsity=cfg.magnitude.sparsity, scope=cfg.magnitude.scope, failed=False)
    metrics.update(
        mask_sparsity=mask.sparsity,
        source_test_accuracy=evaluate(pruned, s_te),
        target_test_accuracy=evaluate(pruned, t_te),
    )
    save_checkpoint(pruned, stage, provenance={"stage": f"prune-{method}", "config_hash": cfg.hash},
                    seed=cfg.seed_for("prune"))
    _write_json(stage / "metrics.json", metrics)
    if metrics["failed"]:
        raise PipelineError(f"pruning diverged; partial history in {stage / 'history.csv'}")
    return metrics


def slc_label(method: str | None, scheme: str, revive_zeros: bool = False) -> str:
    label = f"{method or 'pretrained'}-{scheme.lower()}"
    return label + "-revive" if revive_zeros else label


def cmd_slc(cfg: ExperimentConfig, method: str | None = None, scheme: str | None = None,
            revive_zeros: bool | None = None, jobs: int = 1, out_root=None) -> dict:
    """Score the pretrained (``method=None``) or pruned model against scratch training."""
    d = _prepare(cfg, out_root)
    stage = "pretrain" if method is None else f"prune-{method}"
    model = _load_stage_model(d, stage)
    _, _, t_tr, t_te = load_domains(cfg)
    ft = cfg.finetune_config(scheme=scheme.upper() if scheme else None, revive_zeros=revive_zeros)
    label = slc_label(method, ft.scheme, ft.revive_zeros)
    sizes = list(cfg.grid.sizes)
    cache = CurveCache(d / "slc" / "cache.csv")
    transfer = build_slc(model, t_tr, t_te, sizes, ft, cache=cache, jobs=jobs,
                         init_kind=f"transfer:{label}")
    scratch = build_slc(cfg.architecture, t_tr, t_te, sizes, ft, cache=cache, jobs=jobs, init_kind="scratch")
    result = SLCResult(transfer, scratch, slc_auc(transfer, scratch))
    out = d / "slc" / label
    report = slc_report(result, cfg.hash, {
        "label": label, "method": method or "none", "scheme": ft.scheme, "lr": ft.lr,
        "revive_zeros": ft.revive_zeros, "pair": _pair_name(cfg), "seeds": list(ft.seeds),
    })
    write_report(report, out / "report.json")
    _write_curves(result, out / "curves.csv")
    plot_slc(result, out / "slc.svg", title=_title(label, result.auc))
    log.info("%s: SLC-AUC %+.4f (%d cached cells)", label, result.auc, cache.hits)
    report["cache_hits"] = cache.hits
    return report


def _title(label: str, auc: float) -> str:
    return f"{label}: SLC-AUC = {auc:+.3f}"


def _pair_name(cfg: ExperimentConfig) -> str:
    if cfg.data.kind == "synthetic":
        return f"glyphs->glyphs[{cfg.data.shift}]"
    return f"{Path(cfg.data.source).name}->{Path(cfg.data.target).name}"


def _write_curves(result: SLCResult, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    t, s = result.curve_transfer, result.curve_scratch
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "transfer_mean", "transfer_std", "scratch_mean", "scratch_std"])
        for row in zip(t.n, t.mean_acc, t.std_acc, s.mean_acc, s.std_acc):
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


REPORT_COLUMNS = ("run", "pair", "method", "scheme", "lr", "revive_zeros", "auc")


def cmd_report(run_dirs, out_dir: str | Path) -> dict:
    """Merge every SLC report found under ``run_dirs`` into report.csv / report.txt."""
    rows, failures = [], []
    found = 0
    for rd in sorted(Path(r) for r in run_dirs):
        for rp in sorted(rd.glob("slc/*/report.json")):
            found += 1
            try:
                rep = json.loads(rp.read_text())
                rows.append({"run": rd.name, "pair": rep.get("pair", "?"), "method": rep["method"],
                             "scheme": rep["scheme"], "lr": rep["lr"], "revive_zeros": rep["revive_zeros"],
                             "auc": float(rep["auc"])})
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                failures.append({"path": str(rp), "error": f"{type(exc).__name__}: {exc}"})
    if found == 0:
        raise PipelineError(f"no SLC reports under {[str(r) for r in run_dirs]}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "auc": repr(r["auc"])})
    text = format_table(rows, failures)
    (out / "report.txt").write_text(text)
    return {"rows": rows, "failures": failures, "text": text}


def format_table(rows: list[dict], failures: list[dict]) -> str:
    header = ["run", "pair", "method", "scheme", "lr", "SLC-AUC"]
    body = [[r["run"], r["pair"], r["method"] + ("+revive" if r["revive_zeros"] else ""), r["scheme"],
             f"{r['lr']:g}", f"{r['auc']:+.4f}"] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(header), line(["-" * w for w in widths])] + [line(b) for b in body]
    if failures:
        out += ["", "failures:"] + [f"  {f['path']}: {f['error']}" for f in failures]
    return "\n".join(out) + "\n"


def cmd_plot(cfg: ExperimentConfig, out_root=None, fmt: str = "svg") -> list[Path]:
    """Re-render every SLC figure of a run from its stored report."""
    d = run_dir(cfg, out_root)
    reports = sorted(d.glob("slc/*/report.json"))
    if not reports:
        raise PipelineError(f"no SLC reports under {d}; run `slc` first")
    paths = []
    for rp in reports:
        result = report_to_result(json.loads(rp.read_text()))
        paths.append(plot_slc(result, rp.parent / f"slc.{fmt}", title=_title(rp.parent.name, result.auc)))
    return paths


def config_summary(cfg: ExperimentConfig) -> dict:
    return {"hash": cfg.hash, **cfg.to_dict(), "admm_seed": cfg.admm_config().seed,
            "finetune_seeds": list(cfg.finetune_config().seeds)}

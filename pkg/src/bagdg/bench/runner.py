"""Multi-seed benchmark: generate, train, adapt, evaluate, report."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..adapt import AdaptConfig, adapt
from ..errors import BagError, StorageError
from ..model import stage1_probs
from ..scm import SOURCE, TARGET, LabeledDataset, generate
from .config import VARIANTS, RunConfig, TrainConfig, load_config
from .storage import dump_json
from .training import accuracy, erm_probs, init_bag, run_erm, train_source

log = logging.getLogger(__name__)

CSV_COLUMNS = ("variant", "seed", "source_val_acc", "target_pre_acc", "target_post_acc")


@dataclass
class RunReport:
    config: dict
    seeds: list[int]
    variants: list[str]
    records: list[dict]
    summary: dict
    failures: list[dict]

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "seeds": self.seeds,
            "variants": self.variants,
            "summary": self.summary,
            "records": self.records,
            "failures": self.failures,
        }

    def mean(self, variant: str, key: str = "target_post_acc") -> float:
        return self.summary[variant][key]["mean"]


def seed_data(run: RunConfig, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    scm = run.scm_for_seed(seed)
    return generate(scm, run.train.n_source, SOURCE, seed), generate(scm, run.train.n_target, TARGET, seed)


def run_variant(variant: str, cfg: TrainConfig, source: LabeledDataset, target: LabeledDataset) -> dict:
    """Train one variant on ``source`` and score it on ``target``."""
    vcfg = cfg.for_variant(variant)
    if variant == "ERM":
        ref = init_bag(cfg, source.n_x, source.n_classes, int(source.e.max()) + 1, None).n_params()
        res = run_erm(vcfg, source, reference_params=ref)
        acc = accuracy(erm_probs(res.model, target.X), target.y)
        return {
            "variant": variant,
            "seed": cfg.seed,
            "source_val_acc": res.source_val_acc,
            "target_pre_acc": acc,
            "target_post_acc": acc,
            "train_loss_trace": res.loss_trace,
            "adaptation": None,
        }
    res = train_source(vcfg, source)
    pre = accuracy(stage1_probs(res.model, target.X), target.y)
    acfg = AdaptConfig(
        epochs=vcfg.tta_epochs,
        step_size=vcfg.tta_step_size,
        correction_mode=vcfg.correction_mode,
        seed=vcfg.seed,
    )
    _, rep = adapt(res.model, target.X, acfg, target.y)
    calib = res.model.calib
    return {
        "variant": variant,
        "seed": cfg.seed,
        "source_val_acc": res.source_val_acc,
        "target_pre_acc": pre,
        "target_post_acc": rep.post_accuracy,
        "train_loss_trace": res.loss_trace,
        "adaptation": {
            "pseudo_label_accuracy": rep.pseudo_label_accuracy,
            "pseudo_agreement": rep.pseudo_agreement,
            "mode_used": rep.mode_used,
            "margin": rep.margin,
            "calibration": None if calib is None else np.asarray(getattr(calib, "eps", [calib.h0, calib.h1])).tolist(),
            "loss_trace": rep.loss_trace,
        },
    }


def _stats(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if arr.size >= 2 else None
    return {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}


def summarise(records: list[dict], variants) -> dict:
    out = {}
    for v in variants:
        rows = sorted((r for r in records if r["variant"] == v), key=lambda r: r["seed"])
        out[v] = {k: _stats([r[k] for r in rows]) for k in CSV_COLUMNS[2:]}
    return out


def run_benchmark(run: RunConfig, seeds, variants=VARIANTS) -> RunReport:
    seeds = [int(s) for s in seeds]
    records, failures = [], []
    for seed in seeds:
        cfg = replace(run.train, seed=seed)
        source, target = seed_data(run, seed)
        for v in variants:
            t0 = time.perf_counter()
            try:
                rec = run_variant(v, cfg, source, target)
            except BagError as exc:
                log.warning("seed %d variant %s failed: %s", seed, v, exc)
                failures.append({"seed": seed, "variant": v, "error": str(exc)})
                continue
            log.info(
                "seed %d %-8s target %.3f (pre %.3f) in %.1fs",
                seed, v, rec["target_post_acc"], rec["target_pre_acc"], time.perf_counter() - t0,
            )
            records.append(rec)
    if failures:
        log.warning("%d runs failed; summary covers completed runs only", len(failures))
    return RunReport(run.to_json(), seeds, list(variants), records, summarise(records, variants), failures)


def _csv_field(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else "%.17g" % v
    return str(v)


def write_report(report: RunReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        json_path = out / "report.json"
        csv_path = out / "summary.csv"
        json_path.write_text(dump_json(report.to_json()) + "\n")
        lines = [",".join(CSV_COLUMNS)]
        for r in report.records:
            lines.append(",".join(_csv_field(r[k]) for k in CSV_COLUMNS))
        csv_path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write report to {out}: {exc}") from exc
    return json_path, csv_path


def benchmark(config_path, seeds, out_dir=None, variants=VARIANTS) -> RunReport:
    """Run every variant for every seed; write report files if ``out_dir``."""
    run = load_config(config_path) if not isinstance(config_path, RunConfig) else config_path
    t0 = time.perf_counter()
    report = run_benchmark(run, seeds, variants)
    # wall-clock goes to the log only, so report files stay reproducible
    log.info("benchmark finished in %.1fs", time.perf_counter() - t0)
    if out_dir is not None:
        write_report(report, out_dir)
    return report

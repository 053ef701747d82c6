"""Method runs, comparison grids and per-sample weight export.

A run directory holds the resolved ``config.txt``, one ``metrics_seed<s>.csv``
per seed, optional ``weights_seed<s>.csv`` files and ``summary.json`` /
``summary.txt``. Re-running ``config.txt`` reproduces the metrics exactly.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import ExperimentConfig, parse_config
from .trainer import RunResult, SeedRun, pretrain_teacher, run_distillation

log = logging.getLogger(__name__)

GRID_KINDS = ("methods", "positions", "ablation")


class MissingCheckpointError(FileNotFoundError):
    pass


def run_method(cfg: ExperimentConfig) -> RunResult:
    """Train ``cfg.method`` for every seed and write the run directory."""
    if cfg.needs_teacher and not cfg.teacher_checkpoint:
        raise MissingCheckpointError(f"method {cfg.method!r} needs teacher_checkpoint (run `pretrain` first)")
    if cfg.needs_teacher and not Path(cfg.teacher_checkpoint).exists():
        raise MissingCheckpointError(f"teacher checkpoint not found: {cfg.teacher_checkpoint}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    result = run_distillation(cfg, cfg.teacher_checkpoint or None, out)
    write_summary(result, out)
    log.info("%s: %s", cfg.method, result.formatted())
    return result


def write_summary(result: RunResult, out_dir) -> Path:
    out = Path(out_dir)
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2) + "\n")
    path = out / "summary.txt"
    path.write_text(f"{result.method}\t{result.formatted()}\n")
    return path


def load_run(run_dir) -> RunResult:
    """Rebuild a RunResult (accuracies and file paths) from ``summary.json``."""
    summary = json.loads((Path(run_dir) / "summary.json").read_text())
    weights = {Path(p).name: p for p in summary.get("weights_csv", [])}
    runs = []
    for i, seed in enumerate(summary["seeds"]):
        metrics = summary["metrics_csv"][i] if i < len(summary["metrics_csv"]) else None
        runs.append(SeedRun(seed, summary["test_acc"][i], [], metrics, weights.get(f"weights_seed{seed}.csv")))
    return RunResult(summary["method"], runs)


def ensure_teacher(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    if cfg.teacher_checkpoint:
        return cfg
    ckpt = pretrain_teacher(cfg, base / "teacher")
    return cfg.replace(teacher_checkpoint=str(ckpt))


def grid_variants(cfg: ExperimentConfig, kind: str) -> Dict[str, ExperimentConfig]:
    """Named configs for one comparison grid.

    ``methods``: student_only, kd, dsn, dskd. ``positions``: DSKD with no
    shallow head, each single shallow position, and all positions.
    ``ablation``: DSKD with the feature loss and adaptive weights toggled.
    """
    if kind == "methods":
        return {m: cfg.replace(method=m) for m in ("student_only", "kd", "dsn", "dskd")}
    if kind == "positions":
        shallow = list(range(1, len(cfg.student_stages)))
        sets: List[Sequence[int]] = [()] + [(p,) for p in shallow]
        if len(shallow) > 1:
            sets.append(tuple(shallow))
        return {
            "positions_" + ("none" if not s else "_".join(map(str, s))): cfg.replace(method="dskd", shallow_positions=tuple(s))
            for s in sets
        }
    if kind == "ablation":
        out = {}
        for fea in (False, True):
            for adaptive in (False, True):
                name = f"fea_{'on' if fea else 'off'}_adaptive_{'on' if adaptive else 'off'}"
                out[name] = cfg.replace(method="dskd", enable_fea=fea, adaptive_weights=adaptive)
        return out
    raise ValueError(f"grid kind must be one of {', '.join(GRID_KINDS)}, got {kind!r}")


def run_grid(cfg: ExperimentConfig, kind: str = "methods",
             variants: Optional[Sequence[str]] = None) -> Dict[str, RunResult]:
    """Run every variant of a grid under ``cfg.output_dir`` and write a comparison table."""
    base = Path(cfg.output_dir)
    base.mkdir(parents=True, exist_ok=True)
    grid = grid_variants(cfg, kind)
    if variants is not None:
        grid = {k: v for k, v in grid.items() if k in variants}
    if any(v.needs_teacher for v in grid.values()):
        cfg = ensure_teacher(cfg, base)
        grid = {k: v.replace(teacher_checkpoint=cfg.teacher_checkpoint) for k, v in grid.items()}
    results = {}
    for name, vcfg in grid.items():
        results[name] = run_method(vcfg.replace(output_dir=str(base / name)))
    write_comparison(results, base / f"comparison_{kind}")
    return results


def write_comparison(results: Dict[str, RunResult], stem) -> Path:
    """Write ``<stem>.csv`` (numbers) and ``<stem>.md`` (mean±std table)."""
    stem = Path(stem)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "method", "mean", "std", "formatted", "per_seed"])
    for name, r in results.items():
        w.writerow([name, r.method, repr(r.mean), repr(r.std), r.formatted(),
                    " ".join(repr(a) for a in r.accuracies)])
    stem.with_suffix(".csv").write_text(buf.getvalue())
    lines = ["| variant | top-1 test accuracy (%) |", "|---|---|"]
    lines += [f"| {name} | {r.formatted()} |" for name, r in results.items()]
    stem.with_suffix(".md").write_text("\n".join(lines) + "\n")
    return stem.with_suffix(".csv")


def read_weights(path) -> Dict[str, List[float]]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    cols = [c for c in rows[0] if c.startswith("w_layer")] if rows else []
    return {c: [float(r[c]) for r in rows] for c in cols}


def export_weight_distribution(run, layer: int, out_path=None, seed: Optional[int] = None) -> Path:
    """Write the final-epoch per-test-sample KD weights of one shallow layer.

    ``run`` is a RunResult or a run directory. The CSV has one row per test
    sample (``sample,weight``). With two shallow layers the weights of the
    other layer are exactly ``1 - weight``, the mirror image of this
    distribution.
    """
    if not isinstance(run, RunResult):
        run_dir = Path(run)
        run = load_run(run_dir)
    candidates = [r for r in run.per_seed if r.weights_csv and (seed is None or r.seed == seed)]
    if not candidates:
        raise FileNotFoundError("run has no exported weights (needs a teacher-supervised run with shallow heads)")
    src = candidates[0]
    weights = read_weights(src.weights_csv)
    key = f"w_layer{layer}"
    if key not in weights:
        have = ", ".join(k.removeprefix("w_layer") for k in weights) or "none"
        raise ValueError(f"layer {layer} out of range; shallow layers available: {have}")
    out_path = Path(out_path) if out_path else Path(src.weights_csv).with_name(f"weight_dist_layer{layer}_seed{src.seed}.csv")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "weight"])
    for i, v in enumerate(weights[key]):
        w.writerow([i, repr(v)])
    out_path.write_text(buf.getvalue())
    return out_path


def run_from_file(path, **overrides) -> RunResult:
    return run_method(parse_config(path, overrides))

"""Teacher pretraining and student distillation runs."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import ExperimentConfig
from .data import LabeledDataset, batch_indices, generate_synthetic, load_raster_dataset
from .losses import DistillConfig, adaptive_weights, kl_softened, total_loss, uniform_weights
from .models import (HeadOutput, StagedNetwork, build_network, forward_all_heads, forward_features,
                     load_checkpoint, project_feature, save_checkpoint)
from .optim import OptimSpec, RunState, sgd_step
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "lr", "ce", "kd_last", "kd_shallow", "fea_last", "fea_shallow",
                  "total", "train_acc", "test_acc"]
LOSS_KEYS = ("ce", "kd_last", "kd_shallow", "fea_last", "fea_shallow", "total")
EVAL_BATCH = 256


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class SeedRun:
    seed: int
    final_test_acc: float
    history: List[dict]
    metrics_csv: Optional[str] = None
    weights_csv: Optional[str] = None


@dataclass
class RunResult:
    method: str
    per_seed: List[SeedRun] = field(default_factory=list)

    @property
    def accuracies(self) -> List[float]:
        return [r.final_test_acc for r in self.per_seed]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        # sample std over seeds; a single seed reports 0
        return float(np.std(self.accuracies, ddof=1)) if len(self.per_seed) > 1 else 0.0

    @property
    def metrics_csvs(self) -> List[str]:
        return [r.metrics_csv for r in self.per_seed if r.metrics_csv]

    @property
    def weights_csvs(self) -> List[str]:
        return [r.weights_csv for r in self.per_seed if r.weights_csv]

    def formatted(self) -> str:
        """Percent accuracy as ``mean±std`` with two decimals."""
        return f"{100 * self.mean:.2f}±{100 * self.std:.2f}"

    def summary(self) -> dict:
        return {
            "method": self.method,
            "seeds": [r.seed for r in self.per_seed],
            "test_acc": self.accuracies,
            "mean": self.mean,
            "std": self.std,
            "formatted": self.formatted(),
            "metrics_csv": self.metrics_csvs,
            "weights_csv": self.weights_csvs,
        }


# ------------------------------------------------------------------ helpers


def load_datasets(cfg: ExperimentConfig):
    if cfg.train_path:
        train = load_raster_dataset(cfg.train_path, "train")
        test = load_raster_dataset(cfg.test_path, "test")
        if train.class_count != test.class_count:
            raise ValueError("train and test raster files disagree on the class count")
        return train, test
    return generate_synthetic(cfg.num_classes, cfg.per_class, cfg.image_size, cfg.data_seed, noise=cfg.noise,
                              colour_shift=cfg.colour_shift)


def predict(net: StagedNetwork, images: np.ndarray) -> np.ndarray:
    out = [forward_features(net, images[s:s + EVAL_BATCH]).logits.data for s in range(0, len(images), EVAL_BATCH)]
    return np.concatenate(out)


def accuracy(net: StagedNetwork, ds: LabeledDataset) -> float:
    return float(np.mean(predict(net, ds.images).argmax(axis=1) == ds.class_index))


def teacher_outputs(teacher: StagedNetwork, images: np.ndarray):
    """Final-head logits and pooled features for every image (teacher is frozen)."""
    logits, feats = [], []
    for s in range(0, len(images), EVAL_BATCH):
        out = forward_features(teacher, images[s:s + EVAL_BATCH])
        logits.append(out.logits.data)
        feats.append(out.feature.data)
    return np.concatenate(logits), np.concatenate(feats)


def freeze(net: StagedNetwork) -> StagedNetwork:
    for p in net.params.values():
        p.requires_grad = False
        p.grad = None
    return net


def _fmt(v) -> str:
    return repr(float(v))


def write_metrics_csv(history: List[dict], path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for rec in history:
        w.writerow([rec["epoch"]] + [_fmt(rec[k]) for k in METRICS_HEADER[1:]])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def _check_finite(report) -> None:
    for key in LOSS_KEYS:
        v = getattr(report, key)
        if not math.isfinite(v):
            raise NonFiniteLossError(f"non-finite loss component {key}={v}")


def student_heads_needed(d: DistillConfig) -> bool:
    return d.enable_shallow_kd or (d.enable_fea and d.enable_shallow_fea)


def build_student(cfg: ExperimentConfig, seed: int, teacher_dim: Optional[int],
                  num_classes: int, in_channels: int) -> StagedNetwork:
    """Student with auxiliary heads only when some shallow term is switched on."""
    d = cfg.distill
    aux = student_heads_needed(d)
    return build_network(
        cfg.student_stages, num_classes, with_aux_heads=aux, seed=seed, in_channels=in_channels,
        projection_dim=teacher_dim if d.enable_fea else None,
        aux_positions=cfg.shallow_positions if aux else None,
    )


def idle_parameters(net: StagedNetwork, distill: DistillConfig) -> List[str]:
    """Parameters the objective legitimately never reaches.

    Auxiliary heads exist whenever some shallow term is on, so with shallow
    KD off their linear layers sit outside the loss graph, and with the
    shallow feature term off so do their projections.
    """
    parts = []
    if not distill.enable_shallow_kd:
        parts.append(".linear.")
    if not (distill.enable_fea and distill.enable_shallow_fea):
        parts.append(".proj.")
    shallow = [h.prefix for h in net.heads[:-1]]
    return [n for n in net.params if any(n.startswith(p + part) for p in shallow for part in parts)]


# ------------------------------------------------------------------ training loop


def train_network(net: StagedNetwork, train: LabeledDataset, test: LabeledDataset, epochs: int,
                  batch_size: int, optim: OptimSpec, seed: int, distill: DistillConfig,
                  teacher: Optional[StagedNetwork] = None, fea_normalize: bool = False) -> RunState:
    """Run the optimisation loop and return the state with its metrics history.

    Each epoch shuffles with ``default_rng([seed, epoch])``, steps SGD on the
    full objective, then evaluates final-head accuracy on ``test``.
    With ``fea_normalize`` the feature terms are divided by the mean square
    of the teacher's training-set features, so the feature loss does not
    depend on the arbitrary overall scale of a BN-free teacher.
    """
    state = RunState(rng_seed=seed)
    t_logits = t_feats = None
    if teacher is not None:
        t_logits, t_feats = teacher_outputs(teacher, train.images)
    teacher_dim = None if t_feats is None else t_feats.shape[1]
    if fea_normalize and t_feats is not None and distill.enable_fea:
        distill = dataclasses.replace(distill, fea_scale=1.0 / float(np.mean(t_feats ** 2)))
    idle = idle_parameters(net, distill)

    for epoch in range(epochs):
        state.epoch = epoch
        lr = optim.lr_at(epoch)
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        correct = 0
        for idx in batch_indices(len(train), batch_size, [seed, epoch]):
            x, y = train.images[idx], train.labels[idx]
            outs = forward_all_heads(net, x)
            t_out = None if t_logits is None else HeadOutput(Tensor(t_feats[idx]), Tensor(t_logits[idx]))
            projected = None
            if t_out is not None and distill.enable_fea:
                projected = [project_feature(net, h, o.feature, teacher_dim) for h, o in zip(net.heads, outs)]
            report = total_loss(y, t_out, outs, distill, projected)
            _check_finite(report)
            net.zero_grad()
            report.objective.backward()
            for name in idle:
                p = net.params[name]
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            sgd_step(net.params, state, optim, lr)
            n = len(y)
            for k in LOSS_KEYS:
                sums[k] += getattr(report, k) * n
            correct += int(np.sum(outs[-1].logits.data.argmax(axis=1) == y.argmax(axis=1)))

        rec = {"epoch": epoch, "lr": lr}
        rec.update({k: v / len(train) for k, v in sums.items()})
        rec["train_acc"] = correct / len(train)
        rec["test_acc"] = accuracy(net, test)
        state.metrics_history.append(rec)
        log.debug("epoch %d lr %.4g total %.4f test_acc %.4f", epoch, lr, rec["total"], rec["test_acc"])
    return state


def head_accuracies(net: StagedNetwork, ds: LabeledDataset) -> Dict[int, float]:
    """Test accuracy of every head (diagnostic only)."""
    outs = forward_all_heads(net, ds.images)
    return {h.index: float(np.mean(o.logits.data.argmax(axis=1) == ds.class_index))
            for h, o in zip(net.heads, outs)}


def shallow_kd_weights(net: StagedNetwork, teacher: StagedNetwork, ds: LabeledDataset,
                       distill: DistillConfig) -> np.ndarray:
    """Per-sample KD weights of the shallow heads on ``ds`` (N × number of shallow heads)."""
    t_logits, _ = teacher_outputs(teacher, ds.images)
    outs = forward_all_heads(net, ds.images)
    shallow = outs[:-1]
    if not shallow:
        return np.zeros((len(ds), 0))
    if not distill.adaptive_weights:
        return uniform_weights(len(ds), len(shallow))
    kl = np.stack([kl_softened(t_logits, o.logits.data, distill.temperature).data for o in shallow], axis=1)
    return adaptive_weights(np.maximum(kl, 0.0))


def write_weights_csv(net: StagedNetwork, weights: np.ndarray, ds: LabeledDataset, path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    positions = [h.index for h in net.heads[:-1]]
    w.writerow(["sample", "label"] + [f"w_layer{p}" for p in positions])
    for i, row in enumerate(weights):
        w.writerow([i, int(ds.class_index[i])] + [_fmt(v) for v in row])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


# ------------------------------------------------------------------ entry points


def pretrain_teacher(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Train the teacher with cross-entropy only and save its checkpoint.

    Writes ``teacher.ckpt``, ``teacher_metrics.csv`` and ``teacher.json``
    (final test accuracy) into ``out_dir`` (default ``cfg.output_dir``).
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_datasets(cfg)
    teacher = build_network(cfg.teacher_stages, train.class_count, with_aux_heads=False,
                            seed=cfg.teacher_seed, in_channels=train.images.shape[1])
    ce_only = DistillConfig(alpha=0.0, beta=0.0, enable_shallow_kd=False, enable_fea=False,
                            enable_shallow_fea=False)
    state = train_network(teacher, train, test, cfg.teacher_epochs, cfg.batch_size, cfg.optim,
                          cfg.teacher_seed, ce_only)
    ckpt = save_checkpoint(teacher, out / "teacher.ckpt")
    write_metrics_csv(state.metrics_history, out / "teacher_metrics.csv")
    acc = state.metrics_history[-1]["test_acc"]
    (out / "teacher.json").write_text(json.dumps({"test_acc": acc, "checkpoint": str(ckpt)}, indent=2) + "\n")
    log.info("teacher test accuracy %.4f -> %s", acc, ckpt)
    return ckpt


def load_teacher(path) -> StagedNetwork:
    if not path or not Path(path).exists():
        raise FileNotFoundError(f"teacher checkpoint not found: {path or '<unset>'}")
    return freeze(load_checkpoint(path))


def run_seed(cfg: ExperimentConfig, seed: int, teacher: Optional[StagedNetwork],
             train: LabeledDataset, test: LabeledDataset, out_dir: Optional[Path]) -> SeedRun:
    d = cfg.distill
    teacher_dim = teacher.feature_dim if teacher is not None else None
    student = build_student(cfg, seed, teacher_dim, train.class_count, train.images.shape[1])
    state = train_network(student, train, test, cfg.epochs, cfg.batch_size, cfg.optim, seed, d, teacher,
                          fea_normalize=cfg.fea_normalize)
    run = SeedRun(seed, state.metrics_history[-1]["test_acc"], state.metrics_history)
    if out_dir is not None:
        run.metrics_csv = str(write_metrics_csv(state.metrics_history, out_dir / f"metrics_seed{seed}.csv"))
        if cfg.export_weights and teacher is not None and len(student.heads) > 1 and not d.shallow_labels:
            w = shallow_kd_weights(student, teacher, test, d)
            run.weights_csv = str(write_weights_csv(student, w, test, out_dir / f"weights_seed{seed}.csv"))
    return run


def run_distillation(cfg: ExperimentConfig, teacher_path=None, out_dir=None) -> RunResult:
    """Train one student per seed under ``cfg`` and aggregate final accuracies."""
    teacher = None
    if cfg.needs_teacher:
        teacher = load_teacher(teacher_path or cfg.teacher_checkpoint)
    train, test = load_datasets(cfg)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.workers > 1 and len(cfg.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(run_seed, cfg, s, teacher, train, test, out) for s in cfg.seeds]
            runs = [f.result() for f in futures]
    else:
        runs = [run_seed(cfg, s, teacher, train, test, out) for s in cfg.seeds]
    return RunResult(cfg.method, runs)

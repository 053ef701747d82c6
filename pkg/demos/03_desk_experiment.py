"""
A desk-scale distillation experiment
====================================

Pretrains a teacher on the synthetic gratings, distils it into a small
student with plain KD and with the deeply-supervised objective, and looks
at the per-sample weights the shallow heads received.

Shortened to 20 epochs and one seed so it finishes in a few minutes; the
acceptance suite runs the full 60-epoch, three-seed version.
"""

import tempfile
from pathlib import Path

import numpy as np

from dskd.config import ExperimentConfig
from dskd.experiment import export_weight_distribution, run_method
from dskd.trainer import pretrain_teacher

out = Path(tempfile.mkdtemp(prefix="dskd_demo_"))
cfg = ExperimentConfig(epochs=20, teacher_epochs=30, milestones=(12, 16, 18), seeds=(0,), output_dir=str(out))

ckpt = pretrain_teacher(cfg, out / "teacher")
print("teacher checkpoint:", ckpt)
cfg = cfg.replace(teacher_checkpoint=str(ckpt))

for method in ("student_only", "kd", "dskd"):
    result = run_method(cfg.replace(method=method, output_dir=str(out / method)))
    print(f"{method:>12}: {result.formatted()} % top-1")

# per-sample weights of shallow layer 1; layer 2 holds 1 - w
path = export_weight_distribution(out / "dskd", layer=1)
w = np.loadtxt(path, delimiter=",", skiprows=1)[:, 1]
counts, edges = np.histogram(w, bins=10, range=(0, 1))
print("\nlayer-1 KD weight histogram on the test split")
for c, lo in zip(counts, edges):
    print(f"  {lo:.1f}-{lo + 0.1:.1f} {'#' * int(c)}")
print("mean", round(float(w.mean()), 3), "std", round(float(w.std()), 3))

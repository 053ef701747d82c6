"""
Anatomy of the distillation objective
=====================================

Takes a three-head student on a tiny batch and prints every term of

    total = CE + alpha * (KD_shallow + KD_last) + beta * (Fea_shallow + Fea_last)

together with the per-sample adaptive weights of the two shallow heads.
"""

import numpy as np

from dskd.losses import DistillConfig, adaptive_weights, total_loss
from dskd.models import HeadOutput, StageSpec, build_network, forward_all_heads, project_feature
from dskd.tensor import Tensor

rng = np.random.default_rng(3)
images = rng.uniform(size=(5, 3, 16, 16))
labels = np.eye(10)[rng.integers(0, 10, 5)]

student = build_network([StageSpec(8), StageSpec(16, 1, True), StageSpec(16, 1, True)], 10,
                        with_aux_heads=True, seed=0, projection_dim=32)
print("student heads:", [h.prefix for h in student.heads], "| parameters:", student.num_parameters())

# a stand-in teacher output: confident logits and a 32-wide feature
teacher = HeadOutput(Tensor(rng.uniform(0, 2, (5, 32))), Tensor(6 * labels + rng.normal(0, 1, (5, 10))))

outs = forward_all_heads(student, images)
projected = [project_feature(student, h, o.feature, 32) for h, o in zip(student.heads, outs)]
cfg = DistillConfig(alpha=1.0, beta=30.0, temperature=4.0)
report = total_loss(labels, teacher, outs, cfg, projected)

for key, value in report.components().items():
    print(f"{key:>12}: {value:.4f}")

# each row sums to one; the head that is further from the teacher gets more weight
print("\nKD weights per sample (head1, head2):")
print(np.round(report.kd_weights, 3))

# the weighting rule on its own
print("\nweights for losses [1, 3]:", adaptive_weights([[1.0, 3.0]])[0])
print("weights for losses [0, 0]:", adaptive_weights([[0.0, 0.0]])[0])

"""
A short tour of the tensor engine
=================================

Builds a two-layer convolutional classifier by hand, runs one backward
pass and compares every gradient with central finite differences.
"""

import numpy as np

from dskd import tensor as T
from dskd.gradcheck import numerical_grad, rel_error
from dskd.tensor import Tensor

rng = np.random.default_rng(0)

# a batch of two 3-channel 8x8 images and their one-hot labels
images = Tensor(rng.uniform(size=(2, 3, 8, 8)))
labels = np.eye(4)[[1, 3]]

# parameters are leaves that ask for gradients
k1 = Tensor(rng.normal(0, 0.3, (6, 3, 3, 3)), requires_grad=True)
b1 = Tensor(np.zeros(6), requires_grad=True)
k2 = Tensor(rng.normal(0, 0.3, (8, 6, 3, 3)), requires_grad=True)
w = Tensor(rng.normal(0, 0.3, (8, 4)), requires_grad=True)


def loss():
    h = T.relu(T.conv2d(images, k1, b1, stride=1, padding=1))  # 2x6x8x8
    h = T.relu(T.conv2d(h, k2, stride=2, padding=1))           # 2x8x4x4
    logits = T.matmul(T.global_avg_pool(h), w)                 # 2x4
    return T.mul(T.sum(T.mul(T.log_softmax(logits), labels)), -0.5)


value = loss()
value.backward()
print("cross-entropy of the random net:", round(value.item(), 4))

# the analytic gradients should agree with finite differences to ~1e-7
for name, p in [("k1", k1), ("b1", b1), ("k2", k2), ("w", w)]:
    num = numerical_grad(lambda: loss().item(), p)
    print(f"{name:>3}  shape {str(p.shape):<14} rel. error {rel_error(p.grad, num):.1e}")

# softened softmax: higher temperature flattens the distribution
z = Tensor([[4.0, 1.0, 0.0]])
for tau in (1.0, 4.0, 16.0):
    print(f"tau={tau:>4}:", np.round(T.softmax(z, tau).data[0], 3))

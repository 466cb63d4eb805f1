"""A short walk through the tensor engine.

Builds a two-layer conv -> BN -> ReLU -> GAP program by hand, runs it
under a tape, and compares the tape's gradients against central
differences with the gradient checker.

    python demos/01_autodiff_tour.py
"""

import numpy as np

from siamese_gap import ops
from siamese_gap.gradcheck import grad_check
from siamese_gap.tensor import Tape, Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.random((2, 1, 8, 8)), requires_grad=True)
w1 = Tensor(rng.normal(0, 0.5, (4, 1, 3, 3)), requires_grad=True)
w2 = Tensor(rng.normal(0, 0.3, (6, 4, 3, 3)), requires_grad=True)
gamma, beta = Tensor(np.ones(6), requires_grad=True), Tensor(np.zeros(6), requires_grad=True)
labels = np.array([0, 1])


def program(x, w1, w2, gamma, beta):
    h = ops.relu(ops.conv2d(x, w1, stride=1))
    h = ops.relu(ops.batchnorm2d(ops.conv2d(h, w2, stride=2), gamma, beta))
    logits = ops.index(ops.gap(h), (slice(None), slice(0, 2)))  # first two channels as class scores
    return ops.cross_entropy(logits, labels)


with Tape() as tape:
    loss = program(x, w1, w2, gamma, beta)
print(f"loss {loss.item():.5f}, {len(tape)} ops on the tape")
tape.backward(loss)  # releases the recorded graph
for name, t in (("x", x), ("w1", w1), ("w2", w2), ("gamma", gamma)):
    print(f"  |d loss / d {name}|_max = {np.abs(t.grad).max():.4e}")

# 64-bit analytic pass vs 64-bit central differences
err64 = grad_check(program, [x, w1, w2, gamma, beta], precision=64, probes=25)
err32 = grad_check(program, [x, w1, w2, gamma, beta], precision=32, probes=25)
print(f"grad_check max relative error: 64-bit {err64:.2e}, 32-bit {err32:.2e}")

# outside a tape nothing is recorded, so inference costs no graph
y = ops.gap(ops.relu(ops.conv2d(x, w1)))
print("result of an untaped call is a leaf:", y.is_leaf)

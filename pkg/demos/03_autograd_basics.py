"""The differentiable-tensor engine in isolation.

Builds a two-layer conv network by hand in float64, checks one analytic
gradient against central finite differences, and walks the SGD +
exponential-decay schedule through a few steps.
"""

import numpy as np

from camid import autograd as ag

rng = np.random.default_rng(0)

# -- a small graph: conv -> relu -> pool -> linear -> softmax -> loss
x = ag.Tensor(rng.random((4, 3, 8, 8)))
w1 = ag.Parameter(rng.standard_normal((6, 3, 3, 3)) * 0.3, name="conv.w")
b1 = ag.Parameter(np.zeros(6), name="conv.b")
w2 = ag.Parameter(rng.standard_normal((5, 6 * 4 * 4)) * 0.1, name="fc.w")
b2 = ag.Parameter(np.zeros(5), name="fc.b")
labels = np.eye(5)[rng.integers(0, 5, size=4)]


def forward():
    h = ag.relu(ag.conv2d(x, w1, b1, stride=1, padding=1))
    h = ag.maxpool2d(h, 2, 2)
    logits = ag.linear(ag.flatten(h), w2, b2)
    return ag.bce_over_softmax(ag.softmax(logits), labels)


loss = forward()
ag.backward(loss)
print(f"loss = {float(loss.values):.6f}")
print(f"grad norms: conv.w {np.linalg.norm(w1.grad):.4f}, "
      f"fc.w {np.linalg.norm(w2.grad):.4f}")

# -- spot-check one weight against central differences
i = (0, 0, 1, 1)
h = 1e-6
saved = w1.values[i]
w1.values[i] = saved + h
up = float(forward().values)
w1.values[i] = saved - h
down = float(forward().values)
w1.values[i] = saved
fd = (up - down) / (2 * h)
print(f"conv.w{list(i)}: analytic {w1.grad[i]:+.8f}  "
      f"finite-diff {fd:+.8f}")

# -- optimizer: momentum SGD with L2 folded into the gradient
params = [w1, b1, w2, b2]
print("\nSGD with momentum 0.9, weight decay 0.005, lr decay 0.9/epoch:")
for epoch in range(5):
    lr = ag.lr_schedule(epoch, lr0=0.1, gamma=0.9)
    ag.zero_grad(params)
    loss = forward()
    ag.backward(loss)
    ag.sgd_step(params, lr, momentum=0.9, weight_decay=0.005)
    print(f"  epoch {epoch}: lr = {lr:.4f}  loss = {float(loss.values):.6f}")

"""
The autodiff engine, from scalars to conv nets
==============================================

The whole package runs on one small reverse-mode engine: numpy arrays
in Tensor wrappers, a handful of primitives, and a topological-order
backward pass.  This script builds tiny graphs by hand, checks a
gradient against finite differences, and trains a least-squares fit
with the same Adam the real trainer uses.
"""

import numpy as np

from relfeat import autograd as ag
from relfeat.autograd import Tensor
from relfeat.gradcheck import gradcheck
from relfeat.optim import adam_init, adam_step, zero_grads

# ---------------------------------------------------------------
# a scalar graph, differentiated by hand vs the engine
# ---------------------------------------------------------------

x = Tensor(np.array([1.5]), requires_grad=True)
y = Tensor(np.array([-0.5]), requires_grad=True)

# f = x^2 * sigmoid(y) + relu(x - 2)
f = (ag.square(x) * ag.sigmoid(y) + ag.relu(x - 2.0)).sum()
f.backward()

sig = 1.0 / (1.0 + np.exp(0.5))
print("f               =", round(f.item(), 6))
print("df/dx engine    =", x.grad[0], " by hand:", 2 * 1.5 * sig)
print("df/dy engine    =", y.grad[0], " by hand:", 1.5**2 * sig * (1 - sig))

# ---------------------------------------------------------------
# the same check, automated with central differences
# ---------------------------------------------------------------

rng = np.random.default_rng(0)
a0 = rng.standard_normal((3, 4))
b0 = rng.standard_normal((4, 2))

err = gradcheck(lambda a, b: ag.matmul(a, b).mean(), [a0, b0])
print("\nmatmul mean: max relative error vs central differences =", err)

# the acceptance suite runs this over every primitive; here is one more
err = gradcheck(lambda t: ag.l2norm_channels(ag.relu(t)).sum(), [rng.standard_normal((4, 4, 8)) + 1.0])
print("relu -> l2norm chain:                                   ", err)

# ---------------------------------------------------------------
# fitting y = W x + b with Adam
# ---------------------------------------------------------------

true_w = np.array([[2.0, -1.0], [0.5, 3.0]])
true_b = np.array([0.3, -0.7])
X = rng.standard_normal((64, 2))
Y = X @ true_w.T + true_b

W = Tensor(np.zeros((2, 2)), requires_grad=True)
b = Tensor(np.zeros((1, 2)), requires_grad=True)
params = [W, b]
state = adam_init(params, lr=0.05, weight_decay=0.0)

for it in range(200):
    zero_grads(params)
    pred = ag.matmul(Tensor(X), ag.transpose(W)) + b
    loss = ag.square(pred - Tensor(Y)).mean()
    loss.backward()
    adam_step(params, state)
    if it % 50 == 0:
        print(f"iter {it:3d}  mse {loss.item():.6f}")

print("recovered W:\n", np.round(W.data, 3))
print("recovered b:", np.round(b.data.ravel(), 3))

# ---------------------------------------------------------------
# the conv primitive behind the network
# ---------------------------------------------------------------

img = Tensor(rng.standard_normal((8, 8, 3)))
kern = Tensor(rng.standard_normal((5, 3, 3, 3)) * 0.1, requires_grad=True)
bias = Tensor(np.zeros(5), requires_grad=True)
out = ag.conv2d(img, kern, bias, dilation=2)
print("\nconv2d: input 8x8x3, kernel 5x3x3x3 dilation 2 -> output", out.shape)
out.sum().backward()
print("kernel gradient shape:", kern.grad.shape, " bias gradient:", bias.grad.shape)

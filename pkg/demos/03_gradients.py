"""
Checking gradients
==================

Every layer has a hand-written backward pass. Here they are compared with
central differences, first for a single convolution and then for a few
entries of a full U-Net.
"""

import numpy as np

from usvessel import autodiff as ad
from usvessel.train import dice_loss
from usvessel.unet import UNetConfig, build, channel_plan, forward

rng = np.random.default_rng(0)

x = rng.normal(size=(1, 2, 5, 5, 5))
w = rng.normal(size=(3, 2, 3, 3, 3))
b = rng.normal(size=3)
target = (rng.random((1, 3, 5, 5, 5)) > 0.5).astype(float)


def loss(xt, wt):
    # conv -> sigmoid -> soft Dice gives a scalar that depends on every output
    return dice_loss(ad.sigmoid(ad.conv3d(xt, wt, ad.Tensor(b))), target)


xt, wt = ad.Tensor(x, requires_grad=True), ad.Tensor(w, requires_grad=True)
ad.backward(loss(xt, wt))

h = 1e-5
worst = 0.0
for _ in range(10):
    i = tuple(rng.integers(0, n) for n in w.shape)
    up, down = w.copy(), w.copy()
    up[i] += h
    down[i] -= h
    num = (float(loss(ad.Tensor(x), ad.Tensor(up)).value) - float(loss(ad.Tensor(x), ad.Tensor(down)).value)) / (2 * h)
    worst = max(worst, abs(num - wt.grad[i]) / max(abs(num), 1e-6))
print("conv3d kernel gradient, max relative error %.2e" % worst)

# The U-Net with an eighth of the usual filters
params = build(UNetConfig(), seed=0, dtype=np.float64)
print("parameters:", params.count())
for name, shape in channel_plan(UNetConfig())[:4]:
    print("  ", name, shape)

patch = rng.normal(size=(1, 1, 16, 16, 16))
target = (rng.random(patch.shape) > 0.8).astype(float)
ad.backward(dice_loss(forward(params, patch), target))

worst = 0.0
for _ in range(10):
    t = list(params)[rng.integers(len(params))]
    i = int(rng.integers(t.value.size))
    flat = t.value.reshape(-1)
    old = flat[i]
    flat[i] = old + h
    up = float(dice_loss(forward(params, patch), target).value)
    flat[i] = old - h
    down = float(dice_loss(forward(params, patch), target).value)
    flat[i] = old
    num = (up - down) / (2 * h)
    worst = max(worst, abs(num - t.grad.reshape(-1)[i]) / max(abs(num), 1e-6))
print("U-Net parameter gradients, max relative error %.2e" % worst)

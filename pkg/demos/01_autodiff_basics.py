"""A tour of the tensor engine: graphs, gradients, watch-points.

Run:  python demos/01_autodiff_basics.py
"""

import numpy as np

from outfitnet import autodiff as ad

# --- scalars ---------------------------------------------------------------
# d/dx (x^2 * y + y) at x=3, y=2  ->  dx = 2xy = 12, dy = x^2 + 1 = 10
x = ad.Tensor([3.0], requires_grad=True)
y = ad.Tensor([2.0], requires_grad=True)
out = ad.tsum(ad.add(ad.mul(ad.mul(x, x), y), y))
ad.backward(out)
print("f(3, 2)      =", out.item())
print("df/dx        =", x.grad[0], "(expected 12)")
print("df/dy        =", y.grad[0], "(expected 10)")

# --- a small conv net ------------------------------------------------------
rng = np.random.default_rng(0)
image = ad.Tensor(rng.uniform(size=(3, 8, 8)))
kernel = ad.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)

h = ad.relu(ad.conv2d(image, kernel, stride=1, pad=1))
pooled = ad.global_avg_pool(ad.maxpool2(h))
score = ad.tsum(pooled)
ad.backward(score)
print("\nconv pipeline output:", round(score.item(), 4))
print("kernel grad shape:  ", kernel.grad.shape)

# --- gradients are trustworthy: compare against central differences --------
err = ad.finite_diff_check(
    lambda k: ad.tsum(ad.global_avg_pool(ad.maxpool2(ad.relu(
        ad.conv2d(image, k, stride=1, pad=1))))),
    ad.Tensor(kernel.data.copy()), eps=1e-5)
print("max relative error vs finite differences:", f"{err:.2e}")

# --- watch-points: gradients at intermediate values ------------------------
# This is how the diagnosis reads d(score)/d(similarity): mark any
# intermediate tensor and its gradient survives the backward pass.
a = ad.Tensor(rng.normal(size=(2, 5)), requires_grad=True)
mid = ad.relu(a)
mid.retain_grad()
ad.backward(ad.tsum(ad.mul(mid, mid)))
print("\nwatch-point gradient (= 2*relu(a)):")
print(np.round(mid.grad, 3))

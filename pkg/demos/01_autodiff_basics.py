"""
Reverse-mode autodiff in a few lines
====================================

The package ships its own small tensor library.  Every operation remembers
its inputs and how to push a gradient back through itself; ``backward`` then
walks the recorded ops in reverse.
"""

import numpy as np
from lim import numcore as nc

# a leaf tensor that wants a gradient
x = nc.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)

# y = sum(x^2 + 3x), so dy/dx = 2x + 3
y = (x * x + 3 * x).sum()
nc.backward(y)
print("value", y.item())
print("grad ", x.grad)          # -> [5, 7, 9]

# convolution is cross-correlation without padding: [1,2,3] * [1,1] = [3,5]
signal = nc.Tensor(np.array([[[1.0, 2.0, 3.0]]]))
kernel = nc.Tensor(np.array([[[1.0, 1.0]]]), requires_grad=True)
out = nc.conv1d(signal, kernel)
print("conv ", out.data.ravel())
nc.backward(out.sum())
print("dk   ", kernel.grad.ravel())  # -> [3, 5]

# Checking a gradient against central differences.  In 64-bit the two agree
# to about 1e-9; in the default 32-bit they agree to about 1e-4.
with nc.precision(64):
    rng = np.random.default_rng(0)
    a = nc.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    gain = nc.Tensor(np.ones(6), requires_grad=True)
    offset = nc.Tensor(np.zeros(6), requires_grad=True)
    w = rng.standard_normal((4, 6))
    err = nc.gradcheck(lambda: (nc.layer_norm(a, gain, offset) * w).sum(), [a, gain, offset])
    print("layer_norm gradcheck, worst relative error:", err)

# inference without a tape
with nc.no_grad():
    z = nc.sigmoid(nc.Tensor(np.linspace(-5, 5, 5)))
print("sigmoid", np.round(z.data, 3), "records a tape:", z.requires_grad)

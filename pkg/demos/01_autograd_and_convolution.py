# %% [markdown]
# # Tensors, convolutions and gradient checks
#
# Everything trains on a small reverse-mode autograd over numpy float64 arrays.
# This walk-through builds a conv -> relu -> pool pipeline by hand, backpropagates
# through it and compares the result with central differences.

# %%
import numpy as np

from cunet import tensor as T
from cunet.gradcheck import finite_difference_check

rng = np.random.default_rng(0)
x = T.Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
k = T.Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
b = T.Tensor(np.zeros(3), requires_grad=True)

# %% A 3x3 convolution with padding 1 keeps the 8x8 extent; pooling halves it.
y = T.max_pool2(T.relu(T.conv2d(x, k, b, stride=1, padding=1)))
print("pooled shape", y.shape)

# %% Reduce to a scalar and backpropagate. Leaves collect .grad.
probe = T.Tensor(rng.standard_normal(y.shape))
loss = (y * probe).sum()
loss.backward()
print("dL/dk shape", k.grad.shape, "dL/db", b.grad)

# %% Central differences agree with the analytic gradient.
def fn(_):
    return (T.max_pool2(T.relu(T.conv2d(x, k, b, padding=1))) * probe).sum()

err, skipped = finite_difference_check(fn, k, step=1e-5, skip_kinks=True)
print(f"kernel gradient: worst relative error {err:.2e}, {skipped} positions skipped at relu/pool kinks")

# %% Transposed convolution upsamples by exactly its stride and is the adjoint of the strided conv.
up = T.Tensor(rng.standard_normal((3, 2, 4, 4)))
small = rng.standard_normal((1, 3, 4, 4))
big = rng.standard_normal((1, 2, 8, 8))
lhs = np.sum(T.conv2d(T.Tensor(big), up, stride=2, padding=1).data * small)
rhs = np.sum(big * T.transposed_conv2d(T.Tensor(small), up, stride=2).data)
print("adjoint gap", abs(lhs - rhs))

# %% The full suite, as run by `cunet gradcheck`, on a few seeds.
from cunet.gradsuite import run_gradient_suite

for name, r in run_gradient_suite(range(3)).items():
    print(f"{name:30s} {r['max_rel_error']:.1e}")

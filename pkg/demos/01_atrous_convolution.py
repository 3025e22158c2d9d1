"""Dilated 3D convolution: what the holes do, and why padding d*(k-1)/2 keeps shape."""
import numpy as np

from vseg import tensor as T

# a 1D signal laid along the w axis; a two-tap kernel of ones at dilation 2
# adds each sample to the one two steps ahead
x = np.arange(1.0, 6.0).reshape(1, 1, 1, 1, 5)
w = np.ones((1, 1, 1, 1, 2))
print("dilation 2 on 1..5:", T.conv3d(x, w, dilation=2).ravel())  # [4. 6. 8.]

# a single bright voxel shows the footprint of a 3x3x3 kernel at each dilation
impulse = np.zeros((1, 1, 17, 17, 17))
impulse[0, 0, 8, 8, 8] = 1.0
ones = np.ones((1, 1, 3, 3, 3))
for d in (1, 2, 4, 8):
    out = T.conv3d(impulse, ones, padding=T.same_padding(3, d), dilation=d)
    hit = np.argwhere(out[0, 0, 8, 8] > 0).ravel()
    print(f"dilation {d}: shape kept {out.shape[2:] == impulse.shape[2:]}, taps along w at {hit.tolist()}")

# the transposed conv is the adjoint of the strided conv: <Ax, y> == <x, A^T y>
rng = np.random.default_rng(0)
x = rng.standard_normal((1, 2, 8, 8, 8))
k = rng.standard_normal((3, 2, 2, 2, 2))
y = rng.standard_normal((1, 3, 4, 4, 4))
lhs = np.vdot(T.conv3d(x, k, stride=2), y)
rhs = np.vdot(x, T.conv_transpose3d(y, k))
print(f"<Ax,y> = {lhs:.12f}\n<x,A'y> = {rhs:.12f}")

"""The tape, a block gradient check, and why a network check needs more than one step."""
import numpy as np

from vseg import autodiff as ad
from vseg import blocks
from vseg.losses import combined_loss
from vseg.network import NetConfig, build_network

# record a small graph: loss = <sigmoid(conv(x)), c>
rng = np.random.default_rng(0)
params = {"w": rng.standard_normal((2, 1, 3, 3, 3)) * 0.3}
x = rng.standard_normal((1, 1, 4, 4, 4))
c = rng.standard_normal((1, 2, 4, 4, 4))


def loss(g):
    return ad.inner(ad.sigmoid(ad.conv3d(g.input("x"), g.param("w"), padding=1)), c)


g, out = ad.forward(loss, params, {"x": x})
grads = g.backward(out)
print("tape length", len(g.nodes), "| dL/dw shape", grads["w"].shape)
print("max rel err vs central differences:", ad.grad_check(loss, params, {"x": x}))

# the same check on a whole PASPP block; with freshly zeroed biases, voxels whose
# whole receptive field was already cut by a ReLU give a pre-activation of
# exactly 0.0, a point with no derivative, so the check disagrees there
store = blocks.ParamStore(seed=1)
blocks.init_pyramid(store, "pyr", 8)
xb = rng.standard_normal((1, 8, 4, 4, 4))
cb = rng.standard_normal((1, 8, 4, 4, 4))
pyr_loss = lambda g: ad.inner(blocks.paspp(g, g.input("x"), "pyr"), cb)  # noqa: E731
gp, _ = ad.forward(pyr_loss, store.params, {"x": xb}, store.buffers)
exact = sum(int((n.parents[0].value == 0).sum()) for n in gp.nodes if n.op == "relu")
print("ReLU inputs exactly 0 with zero biases:", exact)
print(f"PASPP, zero biases:   {ad.grad_check(pyr_loss, store.params, {'x': xb}, store.buffers, max_entries=3):.2e}")
for k in store.params:
    if k.endswith(".b"):
        store.params[k] = rng.standard_normal(store.params[k].shape) * 0.1
# off the kink, but some inputs still lie within one 1e-4 step of it; trying
# smaller steps in turn keeps only stencils that stay on one side
for eps in (1e-4, (1e-4, 1e-5, 1e-6, 1e-7)):
    err = ad.grad_check(pyr_loss, store.params, {"x": xb}, store.buffers, eps=eps, max_entries=3)
    print(f"PASPP, random biases, eps={eps}: {err:.2e}")

# the full tiny network behaves the same way
net = build_network(NetConfig(base_channels=2))
for k in net.params:
    if k.endswith(".b") or k.endswith(".beta"):
        net.params[k] = rng.standard_normal(net.params[k].shape) * 0.1
xs = rng.random((1, 1, 8, 8, 8))
ys = (rng.random(xs.shape) > 0.7).astype(float)
net_loss = lambda g: combined_loss(net(g, g.input("x")), ys)[0]  # noqa: E731
for eps in (1e-4, (1e-4, 1e-5, 1e-6, 1e-7)):
    err = ad.grad_check(net_loss, net.params, {"x": xs}, net.buffers, eps=eps, max_entries=2)
    print(f"tiny network, eps={eps}: {err:.2e}")

# negative control: a 1.5x error in one gradient rule is caught immediately
with ad.corrupted_gradient("sigmoid"):
    print("corrupted sigmoid rule:", f"{ad.grad_check(loss, params, {'x': x}):.2f}")

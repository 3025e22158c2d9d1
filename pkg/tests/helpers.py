"""Shared fixtures-by-hand for block and network tests."""
import numpy as np

from vseg import autodiff as ad
from vseg import blocks
from vseg.losses import combined_loss
from vseg.network import build_network

BN_EPS = 1e-5


def make_store(init, channels, seed=0, randomize_bn=True, **kw):
    store = blocks.ParamStore(seed)
    init(store, "blk", channels, **kw)
    rng = np.random.default_rng(seed + 100)
    for k in store.params:
        if k.endswith(".b") or (k.endswith(".beta") and randomize_bn):
            store.params[k] = rng.standard_normal(store.params[k].shape) * 0.1
        elif k.endswith(".gamma") and randomize_bn:
            store.params[k] = rng.uniform(0.5, 1.5, store.params[k].shape)
    if randomize_bn:
        for k in store.buffers:
            n = store.buffers[k].shape
            store.buffers[k] = rng.uniform(0.5, 2.0, n) if k.endswith(".var") else rng.standard_normal(n) * 0.1
    return store


def run(block, store, x, **kw):
    g = ad.Graph(store.params, {"x": x}, {k: v.copy() for k, v in store.buffers.items()})
    return block(g, g.input("x"), "blk", **kw).value


def loss_fn(block, x, c, **kw):
    def f(g):
        return ad.inner(block(g, g.param("x"), "blk", **kw), c)
    return f


def check_grads(block, store, x, max_entries=None, eps=1e-4, **kw):
    c = np.random.default_rng(1).standard_normal(run(block, store, x, **kw).shape)
    params = dict(store.params, x=x)
    return ad.grad_check(loss_fn(block, x, c, **kw), params, buffers=store.buffers,
                         eps=eps, max_entries=max_entries)


def randx(shape, seed=2):
    return np.random.default_rng(seed).standard_normal(shape)


def network_gradcheck(cfg, max_entries=4):
    net = build_network(cfg)
    rng = np.random.default_rng(7)
    for k in net.params:
        if k.endswith(".b") or k.endswith(".beta"):
            net.params[k] = rng.standard_normal(net.params[k].shape) * 0.1
    x = rng.random((1, 1, 8, 8, 8))
    y = (rng.random((1, 1, 8, 8, 8)) > 0.7).astype(float)

    def loss(g):
        return combined_loss(net(g, g.input("x")), y)[0]

    # biases shift whole feature maps, so wide steps often straddle a ReLU kink
    return ad.grad_check(loss, net.params, {"x": x}, net.buffers, eps=(1e-4, 1e-5, 1e-6, 1e-7),
                         max_entries=max_entries, seed=1)

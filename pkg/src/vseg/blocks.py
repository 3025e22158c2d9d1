"""Composite blocks: residual block, feature-variation block and its branches,
and the atrous pyramid family (ASPP, ResASPP, PASPP).

Parameters live in flat name -> array dicts.  Each block has an ``init_*``
function that registers its parameters in a :class:`ParamStore` under a
prefix, and a forward function that reads them back from the graph by the
same prefix.
"""
import numpy as np

from . import autodiff as ad
from .tensor import ShapeError, same_padding

PASPP_DILATIONS = (1, 2, 4, 8)


class ParamStore:
    """Trainable parameters plus batch-norm buffers, filled deterministically."""

    def __init__(self, seed=0, dtype=np.float64):
        self.params = {}
        self.buffers = {}
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def conv(self, name, cin, cout, k=3, bias=True):
        # He fan-in scaling
        std = np.sqrt(2.0 / (cin * k**3))
        self.params[name + ".w"] = (self.rng.standard_normal((cout, cin, k, k, k)) * std).astype(self.dtype)
        if bias:
            self.params[name + ".b"] = np.zeros(cout, self.dtype)

    def deconv(self, name, cin, cout, k=2):
        std = np.sqrt(2.0 / (cin * k**3))
        self.params[name + ".w"] = (self.rng.standard_normal((cin, cout, k, k, k)) * std).astype(self.dtype)
        self.params[name + ".b"] = np.zeros(cout, self.dtype)

    def bn(self, name, channels):
        self.params[name + ".gamma"] = np.ones(channels, self.dtype)
        self.params[name + ".beta"] = np.zeros(channels, self.dtype)
        self.buffers[name + ".mean"] = np.zeros(channels, self.dtype)
        self.buffers[name + ".var"] = np.ones(channels, self.dtype)

    def conv_bn(self, name, cin, cout, k=3):
        self.conv(name, cin, cout, k)
        self.bn(name + ".bn", cout)

    def count(self):
        return int(sum(p.size for p in self.params.values()))


# ------------------------------------------------------------ layer helpers


def conv(g, x, name, stride=1, dilation=1):
    w = g.param(name + ".w")
    cin = w.value.shape[1]
    if x.value.shape[1] != cin:
        raise ShapeError(f"{name}: input has {x.value.shape[1]} channels, layer expects {cin}", axis="c")
    k = w.value.shape[2]
    pad = same_padding(k, dilation) if stride == 1 else (k - 1) // 2
    b = g.param(name + ".b") if name + ".b" in g.params else None
    return ad.conv3d(x, w, b, stride=stride, padding=pad, dilation=dilation)


def bn(g, x, name):
    return ad.batch_norm(
        x, g.param(name + ".gamma"), g.param(name + ".beta"),
        g.buffers[name + ".mean"], g.buffers[name + ".var"],
    )


def conv_bn_relu(g, x, name, stride=1, dilation=1):
    return ad.relu(bn(g, conv(g, x, name, stride, dilation), name + ".bn"))


# ---------------------------------------------------------------- residual


def init_residual(store, prefix, channels):
    store.conv_bn(prefix + ".conv1", channels, channels)
    store.conv_bn(prefix + ".conv2", channels, channels)


def residual_block(g, x, prefix):
    """x + f(x), f = two 3x3x3 conv/bn/relu layers."""
    h = conv_bn_relu(g, x, prefix + ".conv1")
    h = conv_bn_relu(g, h, prefix + ".conv2")
    return ad.add(x, h)


# ------------------------------------------------------ attention branches


def init_contrast_enhancement(store, prefix, channels):
    store.conv(prefix + ".conv3", channels, channels, 3)
    store.conv(prefix + ".conv1", channels, 1, 1)


def contrast_gate(g, fv1, prefix):
    """One sigmoid gate per sample, shape (n, 1, 1, 1, 1)."""
    s = ad.global_avg_pool(fv1)
    # 3x3x3 conv on a 1x1x1 map only sees its centre tap
    s = ad.relu(conv(g, s, prefix + ".conv3"))
    return ad.sigmoid(conv(g, s, prefix + ".conv1"))


def contrast_enhancement(g, fv1, prefix):
    return ad.mul(contrast_gate(g, fv1, prefix), fv1)


def init_channel_attention(store, prefix, channels):
    store.conv(prefix + ".conv3", channels, channels, 3)
    store.conv(prefix + ".conv1", channels, channels, 1)


def channel_gate(g, fv1, prefix):
    """Per-channel sigmoid gates, shape (n, C, 1, 1, 1)."""
    return contrast_gate(g, fv1, prefix)


def channel_attention(g, fv1, prefix):
    return ad.mul(channel_gate(g, fv1, prefix), fv1)


def init_position_sensitive(store, prefix, channels):
    store.conv_bn(prefix + ".conv1", channels, channels)
    store.conv(prefix + ".conv2", channels, channels)


def position_map(g, fv1, prefix):
    a = conv_bn_relu(g, fv1, prefix + ".conv1")
    return ad.sigmoid(conv(g, a, prefix + ".conv2"))


def position_sensitive(g, fv1, prefix):
    return ad.mul(position_map(g, fv1, prefix), fv1)


BRANCHES = {
    "ceb": (init_contrast_enhancement, contrast_enhancement),
    "psb": (init_position_sensitive, position_sensitive),
    "cab": (init_channel_attention, channel_attention),
}

# encoder attention setting -> FV branch set (identity branch always kept)
ATTENTION_BRANCHES = {
    "fv": ("ceb", "psb"),
    "ceb": ("ceb",),
    "psb": ("psb",),
    "cab": ("cab",),
}


def init_fv(store, prefix, channels, branches=("ceb", "psb")):
    store.conv_bn(prefix + ".pre", channels, channels, 1)
    for name in branches:
        BRANCHES[name][0](store, f"{prefix}.{name}", channels)
    store.conv_bn(prefix + ".post", channels * (len(branches) + 1), channels, 3)


def fv_block(g, x, prefix, branches=("ceb", "psb")):
    """x + conv3(concat[branch(fv1) ..., fv1]) with fv1 = conv1(x)."""
    fv1 = conv_bn_relu(g, x, prefix + ".pre")
    feats = [BRANCHES[name][1](g, fv1, f"{prefix}.{name}") for name in branches]
    cat = ad.concat_channels(feats + [fv1])
    return ad.add(x, conv_bn_relu(g, cat, prefix + ".post"))


# ---------------------------------------------------------- atrous pyramids


def _quarter(channels):
    if channels % 4:
        raise ShapeError(f"pyramid input channels must be divisible by 4, got {channels}", axis="c")
    return channels // 4


def init_pyramid(store, prefix, channels, variant="paspp"):
    q = _quarter(channels)
    for t in range(1, 5):
        store.conv_bn(f"{prefix}.reduce{t}", channels, q, 1)
        store.conv_bn(f"{prefix}.atrous{t}", q, q, 3)
    if variant == "paspp":
        store.conv_bn(prefix + ".fuse12", 2 * q, 2 * q, 1)
        store.conv_bn(prefix + ".fuse34", 2 * q, 2 * q, 1)
    elif variant not in ("aspp", "res_aspp"):
        raise ValueError(f"unknown pyramid variant {variant!r}")
    store.conv_bn(prefix + ".out", channels, channels, 1)


def atrous_branches(g, x, prefix):
    """Fd_t = atrous_{2^(t-1)}(reduce_t(x)) for t = 1..4."""
    _quarter(x.value.shape[1])
    out = []
    for t, d in enumerate(PASPP_DILATIONS, start=1):
        fp = conv_bn_relu(g, x, f"{prefix}.reduce{t}")
        out.append(conv_bn_relu(g, fp, f"{prefix}.atrous{t}", dilation=d))
    return out


def pairwise_sums(fd, literal=True):
    """Residual sums across adjacent branches.

    ``literal``: Fd'_t = Fd_t + Fd_1 + Fd_2 (t = 1, 2) and Fd_t + Fd_3 + Fd_4
    (t = 3, 4), so each branch counts its own output twice.  Otherwise both
    members of a pair get the plain pair sum.
    """
    f1, f2, f3, f4 = fd
    if literal:
        return [ad.add(f1, f1, f2), ad.add(f2, f1, f2), ad.add(f3, f3, f4), ad.add(f4, f3, f4)]
    s12, s34 = ad.add(f1, f2), ad.add(f3, f4)
    return [s12, s12, s34, s34]


def paspp(g, x, prefix, literal=True):
    fd = pairwise_sums(atrous_branches(g, x, prefix), literal)
    low = conv_bn_relu(g, ad.concat_channels(fd[:2]), prefix + ".fuse12")
    high = conv_bn_relu(g, ad.concat_channels(fd[2:]), prefix + ".fuse34")
    return conv_bn_relu(g, ad.concat_channels([low, high]), prefix + ".out")


def aspp(g, x, prefix):
    fd = atrous_branches(g, x, prefix)
    return conv_bn_relu(g, ad.concat_channels(fd), prefix + ".out")


def res_aspp(g, x, prefix, literal=True):
    fd = pairwise_sums(atrous_branches(g, x, prefix), literal)
    return conv_bn_relu(g, ad.concat_channels(fd), prefix + ".out")


def pyramid(g, x, prefix, variant="paspp", literal=True):
    if variant == "paspp":
        return paspp(g, x, prefix, literal)
    if variant == "res_aspp":
        return res_aspp(g, x, prefix, literal)
    if variant == "aspp":
        return aspp(g, x, prefix)
    raise ValueError(f"unknown pyramid variant {variant!r}")

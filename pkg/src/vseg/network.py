"""Encoder-decoder segmentation network over the ablation configuration space.

Layout for base width ``b`` (channels ``b, 2b, 4b, 8b``)::

    stem   conv3 in->b
    E1..E3 residual [+ attention]  -> skip_k, then stride-2 conv3 down
    E4     residual [+ pyramid]
    D3..D1 deconv x2, concat skip_k, conv3 fuse 2c->c, residual
    head   conv1 -> sigmoid (1 ch) or softmax (2 ch)
"""
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import blocks
from .tensor import ShapeError

ATTENTIONS = ("none", "cab", "ceb", "psb", "fv")
BOTTLENECKS = ("none", "aspp", "res_aspp", "paspp")
OUT_MODES = ("sigmoid_1ch", "softmax_2ch")
TASKS = ("lung", "lesion")
DEPTH = 4

# the nine rows of the block ablation, baseline first
ABLATION_ROWS = (
    ("none", "none"),
    ("cab", "none"),
    ("ceb", "none"),
    ("psb", "none"),
    ("fv", "none"),
    ("none", "aspp"),
    ("none", "res_aspp"),
    ("none", "paspp"),
    ("fv", "paspp"),
)


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


def _parse_bool(text):
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 8
    encoder_attention: str = "fv"
    bottleneck: str = "paspp"
    in_channels: int = 1
    out_mode: str = "sigmoid_1ch"
    task: str = "lesion"
    eq7_literal: bool = True
    fg_prior: float = 0.02  # head bias starts at logit(fg_prior)
    seed: int = 0

    def validate(self):
        if not isinstance(self.base_channels, int) or self.base_channels < 1:
            raise ConfigError("base_channels", f"must be a positive integer, got {self.base_channels!r}")
        if self.in_channels < 1:
            raise ConfigError("in_channels", "must be >= 1")
        for name, allowed in (
            ("encoder_attention", ATTENTIONS),
            ("bottleneck", BOTTLENECKS),
            ("out_mode", OUT_MODES),
            ("task", TASKS),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(name, f"must be one of {allowed}, got {getattr(self, name)!r}")
        if not 0.0 < self.fg_prior < 1.0:
            raise ConfigError("fg_prior", f"must lie strictly between 0 and 1, got {self.fg_prior!r}")
        if self.bottleneck != "none" and self.channels[-1] % 4:
            raise ConfigError("base_channels", "bottleneck width must be divisible by 4")
        return self

    @property
    def channels(self):
        return tuple(self.base_channels * 2**k for k in range(DEPTH))

    @property
    def out_channels(self):
        return 1 if self.out_mode == "sigmoid_1ch" else 2

    def to_text(self):
        """Canonical ``key=value`` lines, sorted by key."""
        items = []
        for f in fields(self):
            v = getattr(self, f.name)
            items.append((f.name, str(v).lower() if isinstance(v, bool) else str(v)))
        return "".join(f"{k}={v}\n" for k, v in sorted(items))

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise ConfigError(key or raw, "unknown or malformed config line")
            t = types[key]
            try:
                if t in (bool, "bool"):
                    kwargs[key] = _parse_bool(value)
                elif t in (int, "int"):
                    kwargs[key] = int(value)
                elif t in (float, "float"):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = value
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        return cls(**kwargs).validate()

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return NetConfig(**values).validate()


def ablation_configs(base=NetConfig()):
    return [base.replace(encoder_attention=a, bottleneck=b) for a, b in ABLATION_ROWS]


def row_label(cfg):
    parts = ["UNet4"]
    if cfg.encoder_attention != "none":
        parts.append(cfg.encoder_attention.upper())
    if cfg.bottleneck != "none":
        parts.append({"aspp": "ASPP", "res_aspp": "ResASPP", "paspp": "PASPP"}[cfg.bottleneck])
    return "+".join(parts)


class Network:
    """Parameters plus the wiring that turns them into a graph."""

    def __init__(self, cfg, params, buffers):
        self.cfg = cfg
        self.params = params
        self.buffers = buffers
        self.skip_channels = {}

    @property
    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return self

    def check_input(self, shape):
        if len(shape) != 5:
            raise ShapeError(f"volume must be (n, c, d, h, w), got {shape}")
        if shape[1] != self.cfg.in_channels:
            raise ShapeError(f"network expects {self.cfg.in_channels} input channels, got {shape[1]}", axis="c")
        factor = 2 ** (DEPTH - 1)
        for ax, n in zip("dhw", shape[2:]):
            if n % factor:
                raise ShapeError(
                    f"axis {ax} extent {n} is not divisible by {factor}; pad the volume to a multiple of {factor}",
                    axis=ax,
                )

    def __call__(self, g, x):
        """Wire the network onto graph ``g`` for input node ``x``; returns probabilities."""
        cfg = self.cfg
        self.check_input(x.value.shape)
        branches = blocks.ATTENTION_BRANCHES.get(cfg.encoder_attention)
        h = blocks.conv_bn_relu(g, x, "stem")
        skips = []
        for k in range(DEPTH - 1):
            h = blocks.residual_block(g, h, f"enc{k + 1}.res")
            if branches:
                h = blocks.fv_block(g, h, f"enc{k + 1}.att", branches)
            skips.append(h)
            h = blocks.conv_bn_relu(g, h, f"enc{k + 1}.down", stride=2)
        h = blocks.residual_block(g, h, "enc4.res")
        if cfg.bottleneck != "none":
            h = blocks.pyramid(g, h, "enc4.pyr", cfg.bottleneck, cfg.eq7_literal)
        for k in range(DEPTH - 2, -1, -1):
            name = f"dec{k + 1}"
            up = ad.conv_transpose3d(h, g.param(name + ".up.w"), g.param(name + ".up.b"), stride=2)
            up = ad.relu(blocks.bn(g, up, name + ".up.bn"))
            cat = ad.concat_channels([up, skips[k]])
            expected = self.skip_channels.get(name)
            if expected is not None and cat.value.shape[1] != expected:
                raise ShapeError(f"{name} consumes {cat.value.shape[1]} channels, expected {expected}", axis="c")
            h = blocks.conv_bn_relu(g, cat, name + ".fuse")
            h = blocks.residual_block(g, h, name + ".res")
        logits = blocks.conv(g, h, "head")
        if cfg.out_mode == "sigmoid_1ch":
            return ad.sigmoid(logits)
        return ad.softmax_channels(logits)

    def forward(self, volume, training=False):
        """Returns ``(graph, probability node)``."""
        g = ad.Graph(self.params, {"volume": volume}, self.buffers, training)
        return g, self(g, g.input("volume"))


def build_network(cfg, dtype=np.float64):
    cfg.validate()
    store = blocks.ParamStore(cfg.seed, dtype)
    ch = cfg.channels
    branches = blocks.ATTENTION_BRANCHES.get(cfg.encoder_attention)
    store.conv_bn("stem", cfg.in_channels, ch[0])
    for k in range(DEPTH - 1):
        blocks.init_residual(store, f"enc{k + 1}.res", ch[k])
        if branches:
            blocks.init_fv(store, f"enc{k + 1}.att", ch[k], branches)
        store.conv_bn(f"enc{k + 1}.down", ch[k], ch[k + 1])
    blocks.init_residual(store, "enc4.res", ch[-1])
    if cfg.bottleneck != "none":
        blocks.init_pyramid(store, "enc4.pyr", ch[-1], cfg.bottleneck)
    skip_channels = {}
    for k in range(DEPTH - 2, -1, -1):
        name = f"dec{k + 1}"
        store.deconv(name + ".up", ch[k + 1], ch[k])
        store.bn(name + ".up.bn", ch[k])
        # decoder level consumes upsampled channels + encoder skip channels
        skip_channels[name] = ch[k] + ch[k]
        store.conv_bn(name + ".fuse", skip_channels[name], ch[k])
        blocks.init_residual(store, name + ".res", ch[k])
    store.conv("head", ch[0], cfg.out_channels, 1)
    # start from the foreground rate instead of p = 0.5 everywhere: lesions are a few
    # percent of a patch, and a flat 0.5 buries the Dice gradient under false positives
    store.params["head.b"][-1] = np.log(cfg.fg_prior / (1.0 - cfg.fg_prior))
    net = Network(cfg, store.params, store.buffers)
    net.skip_channels = skip_channels
    return net


def forward_segment(net, volume):
    """Inference-mode probabilities, shape ``(n, out_channels, d, h, w)``."""
    volume = np.asarray(volume, dtype=next(iter(net.params.values())).dtype)
    _, out = net.forward(volume, training=False)
    return out.value


def predict_mask(net, volume, threshold=0.5):
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    prob = forward_segment(net, volume)
    return threshold_mask(prob, threshold)


def threshold_mask(prob, threshold=0.5):
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    fg = prob[:, -1:]
    return (fg >= threshold).astype(np.uint8)


# ------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"VSEG1"
_DTYPES = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net):
    """Write ``VSEG1`` | config text | per-array (name, shape, raw LE values)."""
    text = net.cfg.to_text().encode()
    entries = sorted(net.params.items()) + sorted(("buffer:" + k, v) for k, v in net.buffers.items())
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            dt = arr.dtype.newbyteorder("<")
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", _DTYPES[dt], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a VSEG1 checkpoint")
    (n_text,) = struct.unpack("<I", take(4))
    cfg = NetConfig.from_text(take(n_text).decode())
    (count,) = struct.unpack("<I", take(4))
    params, buffers = {}, {}
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4))
        name = take(n_name).decode()
        width, ndim = struct.unpack("<BB", take(2))
        if width not in (4, 8):
            raise CheckpointError(f"{path}: bad element width {width} for {name}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = np.dtype("<f4" if width == 4 else "<f8")
        arr = np.frombuffer(take(int(np.prod(shape)) * width), dtype=dt).reshape(shape).copy()
        if name.startswith("buffer:"):
            buffers[name[7:]] = arr
        else:
            params[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    net = build_network(cfg)
    if set(net.params) != set(params) or set(net.buffers) != set(buffers):
        raise CheckpointError(f"{path}: parameter names do not match the embedded config")
    for k, v in params.items():
        if v.shape != net.params[k].shape:
            raise CheckpointError(f"{path}: {k} has shape {v.shape}, config implies {net.params[k].shape}")
    net.params, net.buffers = params, buffers
    return net

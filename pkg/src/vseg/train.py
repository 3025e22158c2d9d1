"""Adam training loop, learning-rate schedule and evaluation driver."""
import os
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .network import NetConfig, build_network, forward_segment, save_checkpoint, threshold_mask
from .phantom import crop_patch, window_transform

LOG_HEADER = "step\tlr\tdice_loss\tce_loss\tloss"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    lr0: float = 1e-4
    decay: float = 1e-6
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    fixed_lr: bool = False
    batch_size: int = 2
    steps: int = 500
    seed: int = 0
    patch: tuple = (16, 32, 32)  # (d, h, w)
    checkpoint_every: int = 0  # 0: final checkpoint only
    window: tuple = (-400.0, 1200.0)  # (location, breadth) HU
    precision: str = "float32"
    deterministic: bool = True

    def validate(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.decay < 0:
            raise ValueError("decay must be >= 0")
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        self.net.validate()
        return self

    @property
    def dtype(self):
        return np.dtype(self.precision)


def learning_rate(cfg, t):
    """Inverse-time decay lr0 / (1 + decay * t) for optimizer step t >= 1."""
    if cfg.fixed_lr:
        return cfg.lr0
    return cfg.lr0 / (1.0 + cfg.decay * t)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, cfg):
    """Bias-corrected Adam update of ``params`` in place; returns ``(params, state)``."""
    state.t += 1
    t = state.t
    b1, b2 = cfg.betas
    lr = learning_rate(cfg, t)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(grads):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)
    return params, state


def prepare(sample, task, window, dtype=np.float32):
    """Windowed image and target mask as (1, 1, d, h, w) arrays."""
    x = window_transform(sample.image, *window).astype(dtype)[None, None]
    y = sample.mask(task).astype(dtype)[None, None]
    return x, y


def _batches(n, batch_size, rng):
    # epochs of shuffled indices, one patch per sample per epoch
    pending = []
    while True:
        while len(pending) < batch_size:
            pending.extend(int(i) for i in rng.permutation(n))
        yield pending[:batch_size]
        pending = pending[batch_size:]


def format_log_row(step, lr, ld, lc, loss):
    return f"{step}\t{lr!r}\t{ld!r}\t{lc!r}\t{loss!r}"


@dataclass
class TrainResult:
    net: object
    log: list
    checkpoints: list


def train(cfg, dataset, out_dir=None, net=None, progress=None):
    """Train on ``dataset`` (a list of VolumeSample) for ``cfg.steps`` steps.

    Writes ``train_log.tsv`` and checkpoints into ``out_dir`` when given.
    ``progress``, if set, is called with each log row.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    dtype = cfg.dtype
    if net is None:
        net = build_network(cfg.net, dtype)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    batches = _batches(len(dataset), cfg.batch_size, rng)
    log = [LOG_HEADER]
    ckpts = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for step in range(1, cfg.steps + 1):
        xs, ys = [], []
        for i in next(batches):
            patch = crop_patch(dataset[i], cfg.patch, rng)
            x, y = prepare(patch, cfg.net.task, cfg.window, dtype)
            xs.append(x)
            ys.append(y)
        x, y = np.concatenate(xs), np.concatenate(ys)
        g, prob = net.forward(x, training=True)
        total, ld, lc = losses.combined_loss(prob, y)
        values = (float(ld.value), float(lc.value), float(total.value))
        if not np.all(np.isfinite(values)):
            raise TrainingError(f"non-finite loss at step {step}: dice={values[0]} ce={values[1]}")
        grads = g.backward(total)
        adam_step(net.params, grads, state, cfg)
        row = format_log_row(step, learning_rate(cfg, step), *values)
        log.append(row)
        if progress:
            progress(row)
        if out_dir and (step == cfg.steps or (cfg.checkpoint_every and step % cfg.checkpoint_every == 0)):
            path = os.path.join(out_dir, f"ckpt_{step:06d}.vseg")
            save_checkpoint(path, net)
            ckpts.append(path)
    if out_dir:
        with open(os.path.join(out_dir, "train_log.tsv"), "w") as f:
            f.write("\n".join(log) + "\n")
    return TrainResult(net, log, ckpts)


def log_losses(log):
    """Combined-loss column of a training log (header skipped)."""
    return [float(row.split("\t")[4]) for row in log[1:]]


def predict_sample(net, sample, window=TrainConfig.window, threshold=0.5):
    """(probability map, binary mask) for one full volume."""
    dtype = next(iter(net.params.values())).dtype
    x = window_transform(sample.image, *window).astype(dtype)[None, None]
    prob = forward_segment(net, x)
    return prob[0, -1], threshold_mask(prob, threshold)[0, 0]


def evaluate(net, dataset, threshold=0.5, task=None, window=TrainConfig.window):
    """Per-case MetricsRecords and their unweighted means (dice, sens, prec)."""
    if not dataset:
        raise ValueError("dataset is empty")
    task = task or net.cfg.task
    records = []
    for i, sample in enumerate(dataset):
        _, mask = predict_sample(net, sample, window, threshold)
        records.append(losses.score(mask, sample.mask(task), sample.case_id or f"case_{i:04d}", task))
    return records, losses.mean_metrics(records)

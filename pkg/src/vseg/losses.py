"""Segmentation losses (differentiable) and overlap metrics (on binary masks)."""
from dataclasses import dataclass

import numpy as np

from .autodiff import add, scale

DICE_SMOOTH = 1e-5
PROB_CLAMP = 1e-7


def _masks(pred, ref):
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    return pred, ref


def confusion(pred, ref):
    """(TP, FP, FN) voxel counts."""
    pred, ref = _masks(pred, ref)
    tp = int(np.count_nonzero(pred & ref))
    fp = int(np.count_nonzero(pred & ~ref))
    fn = int(np.count_nonzero(~pred & ref))
    return tp, fp, fn


def _ratio(num, den, tp, fp, fn):
    if den == 0:
        # nothing predicted and nothing present counts as agreement
        return 1.0 if tp == fp == fn == 0 else 0.0
    return num / den


def dice_coefficient(pred, ref):
    """2|A∩B| / (|A|+|B|); two empty masks score 1."""
    tp, fp, fn = confusion(pred, ref)
    return _ratio(2 * tp, 2 * tp + fp + fn, tp, fp, fn)


def sensitivity(pred, ref):
    tp, fp, fn = confusion(pred, ref)
    return _ratio(tp, tp + fn, tp, fp, fn)


def precision(pred, ref):
    tp, fp, fn = confusion(pred, ref)
    return _ratio(tp, tp + fp, tp, fp, fn)


@dataclass
class MetricsRecord:
    case_id: str
    task: str
    dice: float
    sensitivity: float
    precision: float

    def line(self):
        return f"{self.case_id}\t{self.task}\t{self.dice:.6f}\t{self.sensitivity:.6f}\t{self.precision:.6f}"


def score(pred, ref, case_id="", task="lesion"):
    return MetricsRecord(case_id, task, dice_coefficient(pred, ref), sensitivity(pred, ref), precision(pred, ref))


def metrics_table(records, mean_row=True):
    """Tab-separated metrics log: header, one line per case, optional mean row."""
    lines = ["case_id\ttask\tdice\tsensitivity\tprecision"]
    lines += [r.line() for r in records]
    if mean_row and records:
        m = mean_metrics(records)
        task = records[0].task if len({r.task for r in records}) == 1 else "all"
        lines.append(MetricsRecord("mean", task, *m).line())
    return "\n".join(lines) + "\n"


def mean_metrics(records):
    if not records:
        raise ValueError("no records to average")
    return tuple(float(np.mean([getattr(r, k) for r in records])) for k in ("dice", "sensitivity", "precision"))


# --------------------------------------------------------------- losses
# Losses take the probability node and a constant reference array.


def soft_dice_loss(prob, ref, smooth=DICE_SMOOTH):
    """1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s) over the whole batch."""
    p = prob.value
    g = np.asarray(ref, dtype=p.dtype)
    inter = (p * g).sum()
    denom = p.sum() + g.sum() + smooth
    num = 2 * inter + smooth
    value = 1.0 - num / denom

    def vjp(gout):
        # d/dp of -num/denom
        return (gout.reshape(()) * (-(2 * g) / denom + num / denom**2),)

    return prob.graph.op("soft_dice", np.asarray(value, dtype=p.dtype), (prob,), vjp)


def cross_entropy_loss(prob, ref, clamp=PROB_CLAMP):
    """Voxel-mean binary cross-entropy; with two channels, categorical over channel 1 vs 0."""
    p = prob.value
    g = np.asarray(ref, dtype=p.dtype)
    inside = (p > clamp) & (p < 1 - clamp)
    q = np.clip(p, clamp, 1 - clamp)
    if p.ndim == 5 and p.shape[1] == 2:
        target = np.concatenate([1 - g, g], axis=1) if g.shape[1] == 1 else g
        count = p.size // 2
        value = -(target * np.log(q)).sum() / count

        def vjp(gout):
            return (gout.reshape(()) * (-target / q) * inside / count,)
    else:
        count = p.size
        value = -(g * np.log(q) + (1 - g) * np.log(1 - q)).sum() / count

        def vjp(gout):
            return (gout.reshape(()) * (-g / q + (1 - g) / (1 - q)) * inside / count,)

    return prob.graph.op("cross_entropy", np.asarray(value, dtype=p.dtype), (prob,), vjp)


def foreground(prob):
    """Foreground probability node: channel 1 of a 2-channel softmax, else as is."""
    if prob.value.shape[1] == 1:
        return prob
    lo = prob.value.shape[1] - 1

    def vjp(gout):
        full = np.zeros_like(prob.value)
        full[:, lo:] = gout
        return (full,)

    return prob.graph.op("select", prob.value[:, lo:], (prob,), vjp)


def combined_loss(prob, ref, dice_weight=0.5, ce_weight=0.5):
    """0.5 * soft Dice + 0.5 * cross-entropy; returns ``(total, dice, ce)`` nodes."""
    ld = soft_dice_loss(foreground(prob), _foreground_ref(ref))
    lc = cross_entropy_loss(prob, ref)
    return add(scale(ld, dice_weight), scale(lc, ce_weight)), ld, lc


def _foreground_ref(ref):
    ref = np.asarray(ref)
    return ref[:, -1:] if ref.ndim == 5 and ref.shape[1] == 2 else ref

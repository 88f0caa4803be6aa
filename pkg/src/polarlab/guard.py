"""Purified inference, the disagreement detector, and evaluation metrics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T


def _chunks(n, size):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def predictions(net, x, batch_size=500):
    """``(backbone, purified)`` class predictions for every input.

    The backbone prediction skips the polarizer. For class-conditional
    polarizers the purified pass is conditioned on that backbone prediction.
    """
    x = np.asarray(x)
    pol = net.polarizer
    base, pure = [], []
    with T.no_grad():
        for sl in _chunks(len(x), batch_size):
            feat = nn.forward_head(net, x[sl], upto=net.splice_index)
            b = nn.forward_tail(net, feat).data.argmax(axis=1)
            if pol is None:
                p = b
            else:
                h = pol.forward(feat, b if pol.conditional else None, train=False)
                p = nn.forward_tail(net, h).data.argmax(axis=1)
            base.append(b)
            pure.append(p)
    if not base:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(base), np.concatenate(pure)


def infer_purified(net, x):
    return predictions(net, x)[1]


def detect_npdt(net, x):
    """1 where backbone and purified predictions disagree."""
    base, pure = predictions(net, x)
    return (base != pure).astype(np.int64)


def eval_acc(net, images, labels):
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(infer_purified(net, images) == np.asarray(labels)))


def eval_asr(net, images, targets, original_labels=None):
    """Fraction of triggered samples classified to their attack target.

    Samples whose original label already equals the target are excluded.
    """
    targets = np.asarray(targets)
    keep = np.ones(len(targets), bool)
    if original_labels is not None:
        keep = np.asarray(original_labels) != targets
    if not keep.any():
        raise ValueError("no non-target samples to evaluate")
    pred = infer_purified(net, np.asarray(images)[keep])
    return float(np.mean(pred == targets[keep]))


def der(acc0, asr0, acc1, asr1):
    """Defense effectiveness rating from before/after ACC and ASR (fractions)."""
    for v in (acc0, asr0, acc1, asr1):
        if not 0 <= v <= 1:
            raise ValueError("rates must be fractions in [0, 1]")
    return 0.5 * (1.0 + max(0.0, asr0 - asr1) - max(0.0, acc0 - acc1))


def detection_rates(net, clean_images, triggered_images):
    tpr = float(np.mean(detect_npdt(net, triggered_images))) if len(triggered_images) else 0.0
    fpr = float(np.mean(detect_npdt(net, clean_images))) if len(clean_images) else 0.0
    return tpr, fpr


@dataclass
class MetricsReport:
    acc: float
    asr: float
    der: float | None = None
    tpr: float | None = None
    fpr: float | None = None
    n_clean: int = 0
    n_triggered: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("acc", "asr", "der", "tpr", "fpr"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self):
        return asdict(self)


def feature_stats(net, x):
    """Per-channel L2 norms of the splice feature without and with the polarizer."""
    pol = net.polarizer
    with T.no_grad():
        feat = nn.forward_head(net, np.asarray(x), upto=net.splice_index)
        if pol is None:
            out = feat
        else:
            cond = None
            if pol.conditional:
                cond = nn.forward_tail(net, feat).data.argmax(axis=1)
            out = pol.forward(feat, cond, train=False)
    without = np.sqrt((feat.data.astype(np.float64) ** 2).sum(axis=(0, 2, 3)))
    with_ = np.sqrt((out.data.astype(np.float64) ** 2).sum(axis=(0, 2, 3)))
    return without, with_


def emit_feature_stats(net, x, path):
    without, with_ = feature_stats(net, x)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["channel", "norm_without", "norm_with"])
        for i, (a, b) in enumerate(zip(without, with_)):
            w.writerow([i, repr(float(a)), repr(float(b))])
    return without, with_

"""Bi-level polarizer training: target estimation, targeted PGD, losses, trainers."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .polarizer import DEFENSE_VARIANT, make_polarizer

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class DefenseConfig:
    lambda1: float = 1.0
    lambda2: float = 0.4
    lambda3: float = 0.4
    norm: str = "2"
    rho: float = 2.0
    pgd_steps: int = 5
    pgd_step_size: float = 0.1
    epochs: int = 50
    warmup_epochs: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    d_k: int = 32
    splice_index: int | None = None
    polarizer_bn: str = "train"
    calibrate: bool = True
    refresh_stats: bool = True
    grad_clip: float = 0.0
    lr_schedule: str = "constant"
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.norm not in ("2", "inf"):
            raise ValueError(f"norm must be '2' or 'inf', got {self.norm!r}")
        if self.rho < 0 or self.pgd_step_size < 0 or self.pgd_steps < 0:
            raise ValueError("PGD budget, step size and steps must be non-negative")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.lr <= 0 or self.batch_size < 2:
            raise ValueError("invalid schedule")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.polarizer_bn not in ("train", "eval"):
            raise ValueError("polarizer_bn must be 'train' or 'eval'")

    def to_dict(self):
        return asdict(self)


# Desk-scale defaults layered over the DefenseConfig field values (which keep
# the reference hyperparameters). Targeted PGD at this scale mostly finds
# generic non-robust directions rather than the trigger, so the polarizer
# needs stronger inner steps, long cosine-annealed training with clipped
# gradients, and a heavier clean term to hold accuracy.
_DESK = {"lambda1": 3.0, "pgd_step_size": 0.2, "grad_clip": 5.0, "lr_schedule": "cosine"}
DEFENSE_DEFAULTS = {
    "npd": {**_DESK, "epochs": 200, "warmup_epochs": 5},
    "r-cnpd": {**_DESK, "epochs": 25, "lambda2": 0.5, "lambda3": 0.5},  # epochs per class
    "e-cnpd": {**_DESK, "epochs": 200},
    "a-cnpd": {**_DESK, "epochs": 200},
}


def default_config(name, **overrides):
    """DefenseConfig with ``name``'s defaults, then ``overrides`` on top."""
    if name not in DEFENSE_DEFAULTS:
        raise ValueError(f"unknown defense {name!r}; choose from {sorted(DEFENSE_DEFAULTS)}")
    return DefenseConfig(**{**DEFENSE_DEFAULTS[name], **overrides})


# target estimation & losses ----------------------------------------------

def estimate_target(logits, y):
    """Highest-scoring class other than the true one; ties go to the lowest index."""
    z = np.array(logits, dtype=np.float64, copy=True)
    if z.shape[-1] < 2:
        raise ValueError("need at least two classes")
    if z.ndim == 1:
        z[int(y)] = -np.inf
        return int(np.argmax(z))
    rows = np.arange(z.shape[0])
    z[rows, np.asarray(y)] = -np.inf
    return np.argmax(z, axis=1)


def _reduce(v, reduction):
    if reduction == "none":
        return v
    if reduction == "sum":
        return T.sum(v)
    return T.mean(v)


def _as_batch(probs, labels):
    if probs.ndim == 1:
        probs = T.reshape(probs, (1, probs.shape[0]))
        labels = np.atleast_1d(labels)
    return probs, np.asarray(labels, dtype=np.int64)


def _complement(probs, k):
    """``1 - s_k`` computed as the sum of the other probabilities.

    Summing the remaining mass keeps precision when ``s_k`` rounds to 1.
    """
    mask = np.ones(probs.shape, dtype=probs.data.dtype)
    mask[np.arange(probs.shape[0]), k] = 0
    return T.sum(T.mul(probs, T.Tensor(mask, dtype=mask.dtype)), axis=1)


def loss_asr(probs, target, reduction="mean"):
    """-log(1 - s_target): pushes probability mass off the (estimated) target."""
    probs, target = _as_batch(probs, target)
    return _reduce(T.scale(T.log(_complement(probs, target), LOG_FLOOR), -1.0), reduction)


def loss_bce(probs, y, reduction="mean"):
    """Boosted cross-entropy: -log s_y - log(1 - max_{k != y} s_k)."""
    probs, y = _as_batch(probs, y)
    runner_up = estimate_target(probs.data, y)
    s_y = T.log(T.gather(probs, y), LOG_FLOOR)
    s_k = T.log(_complement(probs, runner_up), LOG_FLOOR)
    return _reduce(T.scale(T.add(s_y, s_k), -1.0), reduction)


def loss_bn(probs, y, reduction="mean"):
    """Cross-entropy on probabilities, with the log floored."""
    probs, y = _as_batch(probs, y)
    return _reduce(T.scale(T.log(T.gather(probs, y), LOG_FLOOR), -1.0), reduction)


# targeted PGD --------------------------------------------------------------

def project(delta, norm, rho):
    """Per-sample projection onto the ``rho`` ball."""
    if norm == "inf":
        return np.clip(delta, -rho, rho)
    flat = delta.reshape(len(delta), -1)
    norms = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
    factor = np.ones_like(norms)
    over = norms > rho
    factor[over] = rho / norms[over]
    # guard against rounding pushing the scaled vector past the radius
    factor[over] *= 1.0 - 1e-7
    return (delta * factor.reshape((-1,) + (1,) * (delta.ndim - 1))).astype(delta.dtype)


def _norms(delta, norm):
    flat = delta.reshape(len(delta), -1).astype(np.float64)
    if norm == "inf":
        return np.abs(flat).max(axis=1, initial=0.0)
    return np.sqrt((flat ** 2).sum(axis=1))


def _step_into_ball(x, delta, norm, rho):
    """``clip(x + project(delta), 0, 1)`` whose realized ``adv - x`` is inside the ball.

    The float32 subtraction ``adv - x`` can land a few ulps past the radius, so the
    radius shrinks slightly until the stored difference itself satisfies the bound.
    """
    for k in range(8):
        r = rho * (1.0 - 1e-6 * 4 ** k) if k else rho
        adv = np.clip(x + project(delta, norm, r), 0.0, 1.0).astype(x.dtype)
        if np.all(_norms(adv - x, norm) <= rho):
            return adv
    return x.copy()


def _direction(g, norm):
    if norm == "inf":
        return np.sign(g)
    flat = g.reshape(len(g), -1).astype(np.float64)
    norms = np.sqrt((flat ** 2).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    out = flat / safe[:, None]
    out[norms == 0] = 0.0
    return out.reshape(g.shape).astype(g.dtype)


def pgd_targeted(logits_fn, x, y_target, cfg, on_step=None):
    """Targeted PGD toward ``y_target``; returns the perturbation ``delta``.

    ``logits_fn`` maps an input tensor to logits. Each step descends the
    target cross-entropy, projects onto the ``cfg.rho`` ball around ``x`` and
    clips to the image range ``[0, 1]``.
    """
    x = np.asarray(x)
    adv = x.copy()
    y_target = np.asarray(y_target, dtype=np.int64)
    for step in range(cfg.pgd_steps):
        if cfg.rho == 0:
            break
        xt = T.Tensor(adv, requires_grad=True, dtype=x.dtype)
        loss = T.cross_entropy(logits_fn(xt), y_target, reduction="sum")
        loss.backward()
        adv = adv - x.dtype.type(cfg.pgd_step_size) * _direction(xt.grad, cfg.norm)
        adv = _step_into_ball(x, adv - x, cfg.norm, cfg.rho)
        if on_step is not None:
            on_step(step, adv - x)
    return adv - x


# outer objective -----------------------------------------------------------

def outer_objective(net, x, y, delta, y_adv, cfg, cond_clean=None, cond_adv=None,
                    adv_mask=None, train=True):
    """Weighted polarizer objective on one batch.

    Returns ``(total, parts)`` where ``parts`` maps ``bn``/``asr``/``bce`` to the
    batch-mean scalar tensors. ``adv_mask`` restricts the two adversarial terms
    to a subset of the batch (their mean is then over that subset).
    """
    logits = nn.forward(net, x, condition=cond_clean, polarizer_train=train)
    l_bn = loss_bn(T.softmax(logits), y)
    y = np.asarray(y)
    y_adv = np.asarray(y_adv)
    if adv_mask is not None:
        sel = np.flatnonzero(adv_mask)
        x, y, delta, y_adv = x[sel], y[sel], delta[sel], y_adv[sel]
        cond_adv = None if cond_adv is None else np.asarray(cond_adv)[sel]
    parts = {"bn": l_bn}
    total = T.scale(l_bn, cfg.lambda1)
    if len(y) and (cfg.lambda2 or cfg.lambda3):
        adv_logits = nn.forward(net, x + delta, condition=cond_adv, polarizer_train=train)
        s_adv = T.softmax(adv_logits)
        parts["asr"] = loss_asr(s_adv, y_adv)
        parts["bce"] = loss_bce(s_adv, y)
        total = T.add(total, T.scale(parts["asr"], cfg.lambda2))
        total = T.add(total, T.scale(parts["bce"], cfg.lambda3))
    return total, parts


# trainers ------------------------------------------------------------------

@dataclass
class DefenseResult:
    net: object
    curves: list = field(default_factory=list)  # (epoch, objective, acc, asr)


def _prepare(victim, variant, cfg, default_index, images, labels):
    net = nn.clone(victim)
    index = cfg.splice_index if cfg.splice_index is not None else default_index
    c, h, w = net.feature_shape(index)
    pol = make_polarizer(variant, c, net.num_classes, h, w, d_k=cfg.d_k, seed=cfg.seed)
    net = nn.splice(net, index, pol)
    if cfg.calibrate:
        with T.no_grad():
            feat = nn.forward_head(net, images, upto=index)
        pol.calibrate(feat, labels if pol.conditional else None)
    return net


def refresh_polarizer_stats(net, images, labels):
    index = net.splice_index
    with T.no_grad():
        feat = nn.forward_head(net, images, upto=index)
    pol = net.polarizer
    pol.refresh_stats(feat, np.asarray(labels) if pol.conditional else None)


def _batches(rng, n, b):
    order = rng.permutation(n)
    for i in range(0, n, b):
        idx = order[i:i + b]
        if len(idx) >= 2:
            yield idx


class _Trainer:
    def __init__(self, net, cfg, probe, images, labels):
        self.net, self.cfg, self.probe = net, cfg, probe
        self.images, self.labels = images, np.asarray(labels)
        self.params = self.all_params = net.polarizer.trainable_params()
        self.opt = nn.SGD(self.params, cfg.lr, cfg.momentum, cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.train_bn = cfg.polarizer_bn == "train"
        self.curves = []

    def logits_fn(self, condition):
        def fn(xt):
            return nn.forward(self.net, xt, condition=condition, polarizer_train=False)
        return fn

    def restrict(self, params):
        """Optimize only ``params`` from now on (fresh momentum)."""
        self.params = list(params)
        self.opt = nn.SGD(self.params, self.cfg.lr, self.cfg.momentum, self.cfg.weight_decay)

    def attack(self, x, targets, condition):
        with T.frozen(self.all_params):
            return pgd_targeted(self.logits_fn(condition), x, targets, self.cfg)

    def set_epoch(self, epoch, total):
        """Learning rate for ``epoch`` of ``total`` (cosine decays to 0 at the end)."""
        lr = self.cfg.lr
        if self.cfg.lr_schedule == "cosine" and total > 0:
            lr *= 0.5 * (1.0 + np.cos(np.pi * epoch / total))
        self.opt.lr = lr

    def step(self, loss):
        self.opt.zero_grad()
        loss.backward()
        if self.cfg.grad_clip > 0:
            nn.clip_grad_norm(self.params, self.cfg.grad_clip)
        self.opt.step()
        return loss.item()

    def end_epoch(self, losses):
        if self.cfg.refresh_stats:
            refresh_polarizer_stats(self.net, self.images, self.labels)
        acc, asr = self.probe(self.net) if self.probe is not None else (float("nan"),) * 2
        row = (len(self.curves), float(np.mean(losses)) if losses else 0.0, acc, asr)
        self.curves.append(row)
        log.info("defense epoch %d objective %.4f acc %.4f asr %.4f", *row)


def defend_npd(victim, images, labels, cfg, probe=None):
    """Plain polarizer with estimated targets (warm-up, then bi-level epochs)."""
    _require_data(images, cfg)
    net = _prepare(victim, "plain", cfg, nn.CONV_BLOCK_STARTS[-2], images, labels)
    tr = _Trainer(net, cfg, probe, images, labels)
    labels = np.asarray(labels)
    n = len(images)
    for e in range(cfg.warmup_epochs):
        tr.set_epoch(e, cfg.warmup_epochs)
        losses = []
        for idx in _batches(tr.rng, n, cfg.batch_size):
            logits = nn.forward(net, images[idx], polarizer_train=tr.train_bn)
            losses.append(tr.step(T.scale(loss_bn(T.softmax(logits), labels[idx]), cfg.lambda1)))
        tr.end_epoch(losses)
    for e in range(cfg.epochs):
        tr.set_epoch(e, cfg.epochs)
        losses = []
        for idx in _batches(tr.rng, n, cfg.batch_size):
            x, y = images[idx], labels[idx]
            with T.no_grad():
                y_t = estimate_target(nn.forward(net, x).data, y)
            delta = tr.attack(x, y_t, None)
            total, _ = outer_objective(net, x, y, delta, y_t, cfg, train=tr.train_bn)
            losses.append(tr.step(total))
        tr.end_epoch(losses)
    return DefenseResult(net, tr.curves)


def defend_rcnpd(victim, images, labels, cfg, probe=None):
    """One polarizer per class, trained class by class toward that class."""
    _require_data(images, cfg)
    net = _prepare(victim, "replicated", cfg, nn.CONV_BLOCK_STARTS[-1], images, labels)
    tr = _Trainer(net, cfg, probe, images, labels)
    labels = np.asarray(labels)
    n = len(images)
    pol = net.polarizer
    for c in range(net.num_classes):
        # only theta_c moves in phase c; clean samples of other classes still route
        # through their own (frozen) block
        tr.restrict(pol.block_params(c))
        others = [p for k in range(net.num_classes) if k != c for p in pol.block_params(k)]
        for e in range(cfg.epochs):
            tr.set_epoch(e, cfg.epochs)
            losses = []
            for idx in _batches(tr.rng, n, cfg.batch_size):
                x, y = images[idx], labels[idx]
                mask = y != c
                target = np.full_like(y, c)
                delta = np.zeros_like(x)
                if mask.any():
                    delta[mask] = tr.attack(x[mask], target[mask], target[mask])
                with T.frozen(others):
                    total, _ = outer_objective(net, x, y, delta, target, cfg, cond_clean=y,
                                               cond_adv=target, adv_mask=mask,
                                               train=tr.train_bn)
                    losses.append(tr.step(total))
            tr.end_epoch(losses)
    return DefenseResult(net, tr.curves)


def sample_other_labels(rng, y, num_classes):
    """Uniform draw from ``{0..C-1} \\ {y}`` for each entry of ``y``."""
    y = np.asarray(y)
    return (y + rng.integers(1, num_classes, size=y.shape)) % num_classes


def _defend_random_targets(victim, images, labels, cfg, variant, probe):
    _require_data(images, cfg)
    net = _prepare(victim, variant, cfg, nn.CONV_BLOCK_STARTS[-1], images, labels)
    tr = _Trainer(net, cfg, probe, images, labels)
    labels = np.asarray(labels)
    n = len(images)
    for e in range(cfg.epochs):
        tr.set_epoch(e, cfg.epochs)
        losses = []
        for idx in _batches(tr.rng, n, cfg.batch_size):
            x, y = images[idx], labels[idx]
            y_t = sample_other_labels(tr.rng, y, net.num_classes)
            delta = tr.attack(x, y_t, y_t)
            total, _ = outer_objective(net, x, y, delta, y_t, cfg, cond_clean=y, cond_adv=y_t,
                                       train=tr.train_bn)
            losses.append(tr.step(total))
        tr.end_epoch(losses)
    return DefenseResult(net, tr.curves)


def defend_ecnpd(victim, images, labels, cfg, probe=None):
    return _defend_random_targets(victim, images, labels, cfg, "embedding", probe)


def defend_acnpd(victim, images, labels, cfg, probe=None):
    return _defend_random_targets(victim, images, labels, cfg, "attention", probe)


DEFENDERS = {"npd": defend_npd, "r-cnpd": defend_rcnpd, "e-cnpd": defend_ecnpd,
             "a-cnpd": defend_acnpd}


def defend(name, victim, images, labels, cfg, probe=None):
    if name not in DEFENDERS:
        raise ValueError(f"unknown defense {name!r}; choose from {sorted(DEFENDERS)}")
    return DEFENDERS[name](victim, images, labels, cfg, probe)


def _require_data(images, cfg):
    if len(images) == 0:
        raise ValueError("defense needs a non-empty clean dataset")
    if len(images) < cfg.batch_size:
        raise ValueError(f"clean dataset ({len(images)}) smaller than batch size {cfg.batch_size}")


__all__ = ["DefenseConfig", "estimate_target", "loss_asr", "loss_bce", "loss_bn",
           "pgd_targeted", "project", "outer_objective", "defend_npd", "defend_rcnpd",
           "defend_ecnpd", "defend_acnpd", "defend", "DEFENDERS", "DEFENSE_VARIANT",
           "sample_other_labels", "DefenseResult", "DEFENSE_DEFAULTS",
           "default_config", "refresh_polarizer_stats"]

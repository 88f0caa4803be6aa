"""Layered victim networks, polarizer splicing and supervised training."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)

LAYER_KINDS = ("conv3x3", "conv1x1", "batchnorm", "relu", "globalavgpool", "dense")


@dataclass
class Layer:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    stride: int = 1
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    frozen: bool = False

    def forward(self, x, train):
        k = self.kind
        if k in ("conv3x3", "conv1x1"):
            pad = 1 if k == "conv3x3" else 0
            out = T.conv2d(x, self.params["weight"], stride=self.stride, padding=pad)
            if "bias" in self.params:
                out = T.add_bias(out, self.params["bias"])
            return out
        if k == "batchnorm":
            return T.batchnorm2d(x, self.params["gamma"], self.params["beta"],
                                 self.buffers["running_mean"], self.buffers["running_var"],
                                 train=train and not self.frozen)
        if k == "relu":
            return T.relu(x)
        if k == "globalavgpool":
            return T.global_avg_pool(x)
        if k == "dense":
            return T.add_bias(T.matmul(x, self.params["weight"]), self.params["bias"])
        raise ValueError(f"unknown layer kind {k!r}")

    def out_shape(self, shape):
        c, h, w = shape if len(shape) == 3 else (shape[0], 0, 0)
        if self.kind in ("conv3x3", "conv1x1"):
            if c != self.in_ch:
                raise ValueError(f"{self.kind}: expects {self.in_ch} channels, got {c}")
            return (self.out_ch, (h - 1) // self.stride + 1, (w - 1) // self.stride + 1)
        if self.kind == "batchnorm":
            if c != self.in_ch:
                raise ValueError(f"batchnorm: expects {self.in_ch} channels, got {c}")
            return shape
        if self.kind == "relu":
            return shape
        if self.kind == "globalavgpool":
            return (c,)
        if self.kind == "dense":
            if c != self.in_ch or len(shape) != 1:
                raise ValueError(f"dense: expects {self.in_ch} features, got {shape}")
            return (self.out_ch,)
        raise ValueError(f"unknown layer kind {self.kind!r}")

    def tensors(self):
        """(name, kind, array-holder) in canonical order; kind 0=param, 1=buffer."""
        for name in sorted(self.params):
            yield name, 0, self.params[name]
        for name in sorted(self.buffers):
            yield name, 1, self.buffers[name]


@dataclass
class Network:
    layers: list
    num_classes: int
    image_shape: tuple
    splice_index: int | None = None
    polarizer: object = None

    def feature_shape(self, index):
        """Per-sample shape flowing into ``layers[index]``."""
        shape = tuple(self.image_shape)
        for layer in self.layers[:index]:
            shape = layer.out_shape(shape)
        return shape

    def parameters(self):
        return [p for layer in self.layers for _, p in sorted(layer.params.items())]

    def trainable_parameters(self):
        out = [p for layer in self.layers if not layer.frozen
               for _, p in sorted(layer.params.items())]
        if self.polarizer is not None:
            out += self.polarizer.trainable_params()
        return out

    def freeze_backbone(self):
        for layer in self.layers:
            layer.frozen = True
            for p in layer.params.values():
                p.requires_grad = False
                p.grad = None

    @property
    def conditional(self):
        return self.polarizer is not None and self.polarizer.conditional


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


def conv_layer(rng, cin, cout, k=3, stride=1):
    return Layer("conv3x3" if k == 3 else "conv1x1", cin, cout, stride,
                 params={"weight": T.parameter(_he(rng, (cout, cin, k, k), cin * k * k))})


def bn_layer(c):
    return Layer("batchnorm", c, c,
                 params={"gamma": T.parameter(np.ones(c, np.float32)),
                         "beta": T.parameter(np.zeros(c, np.float32))},
                 buffers={"running_mean": np.zeros(c, np.float32),
                          "running_var": np.ones(c, np.float32)})


# Layer indices of the three conv blocks in the desk topology.
CONV_BLOCK_STARTS = (0, 3, 6)


def build_cnn(num_classes, image_shape=(3, 16, 16), seed=0, splice_index=None):
    """Desk victim: three conv-BN-ReLU blocks, global average pool, dense head."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    rng = np.random.default_rng(seed)
    cin = image_shape[0]
    layers = [
        conv_layer(rng, cin, 16), bn_layer(16), Layer("relu"),
        conv_layer(rng, 16, 32, stride=2), bn_layer(32), Layer("relu"),
        conv_layer(rng, 32, 32), bn_layer(32), Layer("relu"),
        Layer("globalavgpool"),
        Layer("dense", 32, num_classes,
              params={"weight": T.parameter(_he(rng, (32, num_classes), 32)),
                      "bias": T.parameter(np.zeros(num_classes, np.float32))}),
    ]
    _fill_passthrough_channels(layers, cin)
    net = Network(layers, num_classes, tuple(image_shape),
                  splice_index=CONV_BLOCK_STARTS[-1] if splice_index is None else splice_index)
    check_topology(layers, image_shape)
    return net


def _fill_passthrough_channels(layers, cin):
    c = cin
    for layer in layers:
        if layer.kind in ("relu", "globalavgpool"):
            layer.in_ch = layer.out_ch = c
        else:
            c = layer.out_ch


def check_topology(layers, image_shape):
    shape = tuple(image_shape)
    for layer in layers:
        shape = layer.out_shape(shape)
    return shape


# forward -------------------------------------------------------------------

def _as_input(x):
    return x if isinstance(x, T.Tensor) else T.Tensor(x)


def forward_head(net, x, train=False, upto=None):
    """Run ``layers[:upto]`` (default: up to the splice index)."""
    upto = net.splice_index if upto is None else upto
    h = _as_input(x)
    for layer in net.layers[:upto]:
        h = layer.forward(h, train)
    return h


def forward_tail(net, h, train=False, start=None):
    start = net.splice_index if start is None else start
    for layer in net.layers[start:]:
        h = layer.forward(h, train)
    return h


def forward(net, x, train=False, condition=None, polarizer_train=None):
    """Logits of ``net`` on a batch.

    ``train`` selects batch-statistics BN for unfrozen backbone layers;
    ``polarizer_train`` (defaults to ``train``) does the same for the spliced
    block. ``condition`` holds per-sample class labels and is required exactly
    when the attached polarizer is class-conditional.
    """
    pol = net.polarizer
    if pol is None:
        if condition is not None:
            raise ValueError("condition given but no class-conditional polarizer attached")
        return forward_tail(net, _as_input(x), train, start=0)
    if pol.conditional and condition is None:
        raise ValueError(f"{pol.variant} polarizer needs per-sample class condition")
    if not pol.conditional and condition is not None:
        raise ValueError("plain polarizer takes no class condition")
    h = forward_head(net, x, train)
    h = pol.forward(h, condition, train if polarizer_train is None else polarizer_train)
    return forward_tail(net, h, train)


def predict(net, x, condition=None, batch_size=500):
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            cond = None if condition is None else condition[i:i + batch_size]
            out.append(forward(net, x[i:i + batch_size], condition=cond).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


# splicing ------------------------------------------------------------------

def splice(net, index, polarizer):
    """Return a network sharing ``net``'s (now frozen) backbone with ``polarizer`` at ``index``."""
    if not 0 < index < len(net.layers):
        raise ValueError(f"splice index {index} out of range (0, {len(net.layers)})")
    shape = net.feature_shape(index)
    if len(shape) != 3 or tuple(shape) != polarizer.feature_shape:
        raise ValueError(f"polarizer expects {polarizer.feature_shape}, feature at {index} is {shape}")
    net.freeze_backbone()
    return Network(net.layers, net.num_classes, net.image_shape, index, polarizer)


def detach(net):
    """Drop the polarizer, keeping the shared backbone."""
    return Network(net.layers, net.num_classes, net.image_shape, net.splice_index, None)


def clone(net):
    return copy.deepcopy(net)


# training ------------------------------------------------------------------

@dataclass
class TrainHP:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0 \
                or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError(f"invalid training hyper-parameters {self}")


class SGD:
    """Heavy-ball SGD with coupled weight decay, as in torch.optim.SGD."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.data.dtype)


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if total > max_norm:
        for g in grads:
            g *= g.dtype.type(max_norm / total)
    return total


def train_supervised(net, images, labels, hp, on_epoch=None):
    """Cross-entropy SGD on the unfrozen layers; returns ``net`` (updated in place)."""
    n = len(images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if hp.epochs == 0:
        return net
    rng = np.random.default_rng(hp.seed)
    params = [p for p in net.trainable_parameters()]
    opt = SGD(params, hp.lr, hp.momentum, hp.weight_decay)
    labels = np.asarray(labels)
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for i in range(0, n, hp.batch_size):
            idx = order[i:i + hp.batch_size]
            if len(idx) < 2:
                continue
            logits = forward(net, images[idx], train=True)
            loss = T.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        log.info("epoch %d loss %.4f train-acc %.4f", epoch, total / n, correct / n)
        if on_epoch is not None:
            on_epoch(epoch, total / n, correct / n)
    return net

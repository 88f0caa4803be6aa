"""Neural polarizer blocks: plain, replicated, embedding and attention variants.

Every variant maps an ``(N, C_l, H_l, W_l)`` feature to the same shape. The
class-conditional variants take one class id per sample.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

VARIANTS = ("plain", "replicated", "embedding", "attention")
VARIANT_TAGS = {None: 0, "plain": 1, "replicated": 2, "embedding": 3, "attention": 4}
DEFENSE_VARIANT = {"npd": "plain", "r-cnpd": "replicated", "e-cnpd": "embedding",
                   "a-cnpd": "attention"}


class ConvBN:
    """1x1 conv with bias followed by batch norm; identity-initialized when square."""

    def __init__(self, cin, cout, rng=None, noise=0.0, identity=True):
        w = np.zeros((cout, cin, 1, 1), np.float32)
        if identity:
            k = min(cin, cout)
            w[np.arange(k), np.arange(k), 0, 0] = 1.0
        if rng is not None and noise:
            w += rng.normal(0.0, noise, size=w.shape).astype(np.float32)
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(cout, np.float32))
        # eval-mode pass-through: (x - 0) / sqrt(1 + eps) * sqrt(1 + eps) + 0
        self.gamma = T.parameter(np.full(cout, np.sqrt(1.0 + T.BN_EPS), np.float32))
        self.beta = T.parameter(np.zeros(cout, np.float32))
        self.running_mean = np.zeros(cout, np.float32)
        self.running_var = np.ones(cout, np.float32)
        self.hook = None  # "calibrate" or "stats" while a statistics pass runs

    def __call__(self, x, train):
        h = T.add_bias(T.conv2d(x, self.weight), self.bias)
        if self.hook == "calibrate":
            self.match_stats(h.data)
        elif self.hook == "stats":
            self.set_running_stats(h.data)
        return T.batchnorm2d(h, self.gamma, self.beta, self.running_mean, self.running_var,
                             train=train)

    def set_running_stats(self, h):
        h = h.astype(np.float64)
        m = h.shape[0] * h.shape[2] * h.shape[3]
        self.running_mean[:] = h.mean(axis=(0, 2, 3))
        self.running_var[:] = h.var(axis=(0, 2, 3)) * (m / max(m - 1, 1))

    def match_stats(self, h):
        """Set BN statistics and affine terms so the block passes ``h`` through unchanged."""
        self.set_running_stats(h)
        self.gamma.data[:] = np.sqrt(self.running_var.astype(np.float64) + T.BN_EPS)
        self.beta.data[:] = self.running_mean

    def params(self):
        return [self.weight, self.bias, self.gamma, self.beta]

    def named_tensors(self, prefix):
        return [(f"{prefix}.weight", 0, self.weight), (f"{prefix}.bias", 0, self.bias),
                (f"{prefix}.gamma", 0, self.gamma), (f"{prefix}.beta", 0, self.beta),
                (f"{prefix}.running_mean", 1, self.running_mean),
                (f"{prefix}.running_var", 1, self.running_var)]


class Polarizer:
    def __init__(self, variant, channels, num_classes, height, width, d_k=32, seed=0,
                 attn_scale=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown polarizer variant {variant!r}")
        if min(channels, num_classes, height, width, d_k) <= 0:
            raise ValueError("polarizer extents must be positive")
        self.variant = variant
        self.channels, self.num_classes = channels, num_classes
        self.height, self.width, self.d_k = height, width, d_k
        rng = np.random.default_rng(seed)
        if variant == "plain":
            self.blocks = [ConvBN(channels, channels)]
        elif variant == "replicated":
            self.blocks = [ConvBN(channels, channels) for _ in range(num_classes)]
        elif variant == "embedding":
            # fixed class maps, an extra input channel the first conv starts out ignoring
            self.embedding = T.Tensor(rng.normal(0.0, 1.0, (num_classes, 1, height, width)))
            self.blocks = [ConvBN(channels + 1, channels, rng, noise=0.0),
                           ConvBN(channels, channels)]
            self.blocks[0].weight.data[:, channels] = rng.normal(
                0.0, 0.01, size=(channels, 1, 1)).astype(np.float32)
        else:
            self.embedding = T.parameter(self._attention_embedding(rng, attn_scale))
            self.theta_q = T.parameter(np.eye(d_k, dtype=np.float32))
            self.theta_k = T.parameter(np.eye(d_k, dtype=np.float32))
            self.blocks = [ConvBN(channels, channels)]  # output stage theta_o
            self.theta_v = T.parameter(np.eye(channels, dtype=np.float32)[:, :, None, None])
            self.theta_v_bias = T.parameter(np.zeros(channels, np.float32))

    def _attention_embedding(self, rng, scale):
        # Rows of e(c) start near scaled one-hot directions so that the channel
        # attention begins close to the identity; a small seeded jitter separates classes.
        c, d = self.channels, self.d_k
        if scale is None:
            scale = np.sqrt(8.0 * np.sqrt(d))  # diagonal logit 8 before the softmax
        base = np.zeros((c, d), np.float32)
        base[np.arange(c), np.arange(c) % d] = scale
        jitter = rng.normal(0.0, 0.05 * scale, size=(self.num_classes, c, d))
        return (base[None] + jitter).astype(np.float32)

    @property
    def conditional(self):
        return self.variant != "plain"

    @property
    def feature_shape(self):
        return (self.channels, self.height, self.width)

    def _check_cls(self, cls, n):
        if cls is None:
            raise ValueError(f"{self.variant} polarizer needs class labels")
        cls = np.asarray(cls, dtype=np.int64)
        if cls.shape != (n,):
            raise ValueError("need exactly one class label per sample")
        if cls.size and (cls.min() < 0 or cls.max() >= self.num_classes):
            raise ValueError("class label out of range")
        return cls

    def forward(self, feature, cls=None, train=False):
        if feature.shape[1:] != self.feature_shape:
            raise ValueError(f"polarizer expects {self.feature_shape}, got {feature.shape[1:]}")
        n = feature.shape[0]
        if self.variant == "plain":
            return self.blocks[0](feature, train)
        cls = self._check_cls(cls, n)
        if self.variant == "replicated":
            out = None
            for c in np.unique(cls):
                idx = np.flatnonzero(cls == c)
                part = T.scatter_rows(self.blocks[c](T.take_rows(feature, idx), train), idx, n)
                out = part if out is None else T.add(out, part)
            return out
        if self.variant == "embedding":
            e = T.take_rows(self.embedding, cls)
            h = self.blocks[0](T.concat_channels([feature, e]), train)
            return self.blocks[1](T.relu(h), train)
        return self._attention(feature, cls, train)

    def attention_matrix(self, cls):
        """Row-stochastic ``(N, C_l, C_l)`` channel attention for each class id."""
        n, c, d = len(cls), self.channels, self.d_k
        e = T.reshape(T.take_rows(self.embedding, cls), (n * c, d))
        q = T.reshape(T.matmul(e, self.theta_q), (n, c, d))
        k = T.reshape(T.matmul(e, self.theta_k), (n, c, d))
        scores = T.scale(T.matmul(q, T.transpose_last(k)), 1.0 / np.sqrt(d))
        return T.softmax(scores)

    def _attention(self, feature, cls, train):
        n, c, h, w = feature.shape
        attn = self.attention_matrix(cls)
        v = T.add_bias(T.conv2d(feature, self.theta_v), self.theta_v_bias)
        mixed = T.matmul(attn, T.reshape(v, (n, c, h * w)))
        return self.blocks[0](T.reshape(mixed, (n, c, h, w)), train)

    def __call__(self, feature, cls=None, train=False):
        return self.forward(feature, cls, train)

    def _stats_pass(self, hook, feature, cls):
        for b in self.blocks:
            b.hook = hook
        try:
            with T.no_grad():
                if self.variant == "replicated":
                    # each class copy sees the clean features of its own class when
                    # labels are given, otherwise all of them
                    feature = T.as_tensor(feature)
                    every = np.arange(feature.shape[0])
                    for c, b in enumerate(self.blocks):
                        idx = every if cls is None else np.flatnonzero(cls == c)
                        b(T.take_rows(feature, idx if len(idx) > 1 else every), False)
                else:
                    self.forward(feature, cls, train=False)
        finally:
            for b in self.blocks:
                b.hook = None

    def calibrate(self, feature, cls=None):
        """Match every BN stage to the statistics of ``feature`` (clean splice features).

        Afterwards the block is still the identity in eval mode, and close to it
        under batch statistics, instead of whitening the incoming feature.
        """
        self._stats_pass("calibrate", feature, cls)

    def refresh_stats(self, feature, cls=None):
        """Recompute BN running statistics in one exact pass over ``feature``.

        Training-time running averages are noisy at small batch sizes and also
        absorb adversarial batches; this replaces them with clean-data statistics.
        """
        self._stats_pass("stats", feature, cls)

    def trainable_params(self):
        out = [p for b in self.blocks for p in b.params()]
        if self.variant == "attention":
            out = [self.embedding, self.theta_q, self.theta_k, self.theta_v,
                   self.theta_v_bias] + out
        return out

    def block_params(self, c):
        """Parameters that only class ``c`` routes through (replicated variant)."""
        if self.variant != "replicated":
            raise ValueError("per-class parameters exist only for the replicated variant")
        return self.blocks[c].params()

    def named_tensors(self):
        """Canonical ``(name, kind, holder)`` list; kind 0=param, 1=buffer, 2=fixed."""
        out = []
        if self.variant == "embedding":
            out.append(("embedding", 2, self.embedding))
        if self.variant == "attention":
            out += [("embedding", 0, self.embedding), ("theta_q", 0, self.theta_q),
                    ("theta_k", 0, self.theta_k), ("theta_v", 0, self.theta_v),
                    ("theta_v_bias", 0, self.theta_v_bias)]
        for i, b in enumerate(self.blocks):
            out += b.named_tensors(f"block{i}")
        return out


def make_polarizer(variant, channels, num_classes, height, width, d_k=32, seed=0):
    return Polarizer(variant, channels, num_classes, height, width, d_k=d_k, seed=seed)

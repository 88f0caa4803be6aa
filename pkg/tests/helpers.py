"""Shared oracles for the test suite."""

import numpy as np

from polarlab import nn
from polarlab import tensor as T

FD_EPS = 1e-5
REL_TOL = 1e-4
# entries smaller than this are compared absolutely (scaled by the floor)
REL_FLOOR = 1e-4


def numeric_grad(loss_fn, param, eps=FD_EPS):
    """Central differences of ``loss_fn()`` w.r.t. ``param.data``, perturbed in place."""
    x = param.data
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        with T.no_grad():
            fp = loss_fn().item()
        x[idx] = old - eps
        with T.no_grad():
            fm = loss_fn().item()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b, floor=REL_FLOOR):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def gradcheck(loss_fn, params):
    """Max relative error between backprop and central differences over ``params``."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        worst = max(worst, rel_error(analytic, numeric_grad(loss_fn, p)))
    return worst


def leaf(rng, *shape, low=-1.0, high=1.0):
    return T.Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def away_from_zero(rng, *shape, margin=0.05):
    """Uniform values with ``|x| >= margin`` so finite differences never straddle a kink."""
    mag = rng.uniform(margin, 1.0, size=shape)
    return T.Tensor(mag * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)


def tiny_net(rng, num_classes=3, channels=3, image=(2, 4, 4)):
    """conv-BN-ReLU x2, pool, dense: small enough for full finite differences."""
    cin = image[0]
    layers = [
        nn.conv_layer(rng, cin, channels), nn.bn_layer(channels), nn.Layer("relu"),
        nn.conv_layer(rng, channels, channels), nn.bn_layer(channels), nn.Layer("relu"),
        nn.Layer("globalavgpool"),
        nn.Layer("dense", channels, num_classes,
                 params={"weight": T.parameter(rng.normal(0, 0.5, (channels, num_classes))),
                         "bias": T.parameter(rng.normal(0, 0.1, num_classes))}),
    ]
    nn._fill_passthrough_channels(layers, cin)
    for layer in layers:
        if layer.kind == "batchnorm":
            c = layer.in_ch
            layer.params["gamma"].data[:] = rng.uniform(0.5, 1.5, c)
            layer.params["beta"].data[:] = rng.normal(0, 0.1, c)
            layer.buffers["running_mean"][:] = rng.normal(0, 0.2, c)
            layer.buffers["running_var"][:] = rng.uniform(0.5, 2.0, c)
    return nn.Network(layers, num_classes, image, splice_index=3)

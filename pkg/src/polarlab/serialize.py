"""Little-endian binary model files (magic ``NPLR``).

Layout::

    "NPLR" u16 version
    u16 n_layers, then per layer: u8 kind, u16 in_ch, u16 out_ch, u8 stride, u8 flags
    u16 num_classes, u16 x3 image shape, i16 splice index (-1 = none)
    u8 polarizer tag; if non-zero: u16 channels, classes, height, width, d_k
    u32 record count, then records: u8 kind, u8 rank, u32 x rank extents, fp32 payload

Layer flags: bit 0 frozen, bit 1 conv bias present. Records follow the canonical
tensor order of the backbone layers and then the polarizer, so the header alone
determines what each record must be.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from . import nn
from . import tensor as T
from .data import FormatError
from .polarizer import VARIANT_TAGS, make_polarizer

MAGIC = b"NPLR"
VERSION = 1
_TAG_VARIANT = {v: k for k, v in VARIANT_TAGS.items()}


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, fmt):
        s = struct.Struct("<" + fmt)
        if self.pos + s.size > len(self.buf):
            raise FormatError("model file truncated")
        out = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return out if len(out) > 1 else out[0]

    def array(self, count):
        n = 4 * count
        if self.pos + n > len(self.buf):
            raise FormatError("model file truncated")
        arr = np.frombuffer(self.buf, dtype="<f4", count=count, offset=self.pos)
        self.pos += n
        return arr.astype(np.float32)


def _holders(net):
    out = []
    for layer in net.layers:
        out += [(k, h) for _, k, h in layer.tensors()]
    if net.polarizer is not None:
        out += [(k, h) for _, k, h in net.polarizer.named_tensors()]
    return out


def _array(holder):
    return holder.data if isinstance(holder, T.Tensor) else holder


def model_bytes(net):
    f = io.BytesIO()
    f.write(struct.pack("<4sH", MAGIC, VERSION))
    f.write(struct.pack("<H", len(net.layers)))
    for layer in net.layers:
        flags = int(layer.frozen) | (2 if "bias" in layer.params and layer.kind != "dense" else 0)
        f.write(struct.pack("<BHHBB", nn.LAYER_KINDS.index(layer.kind), layer.in_ch,
                            layer.out_ch, layer.stride, flags))
    splice = -1 if net.splice_index is None else net.splice_index
    f.write(struct.pack("<HHHHh", net.num_classes, *net.image_shape, splice))
    pol = net.polarizer
    tag = VARIANT_TAGS[None if pol is None else pol.variant]
    f.write(struct.pack("<B", tag))
    if pol is not None:
        f.write(struct.pack("<HHHHH", pol.channels, pol.num_classes, pol.height, pol.width,
                            pol.d_k))
    holders = _holders(net)
    f.write(struct.pack("<I", len(holders)))
    for kind, h in holders:
        a = np.ascontiguousarray(_array(h), dtype="<f4")
        f.write(struct.pack(f"<BB{a.ndim}I", kind, a.ndim, *a.shape))
        f.write(a.tobytes())
    return f.getvalue()


def save_model(net, path):
    with open(path, "wb") as f:
        f.write(model_bytes(net))


def _layer(kind, cin, cout, stride, flags):
    name = nn.LAYER_KINDS[kind]
    params, buffers = {}, {}
    if name in ("conv3x3", "conv1x1"):
        k = 3 if name == "conv3x3" else 1
        params["weight"] = T.parameter(np.zeros((cout, cin, k, k), np.float32))
        if flags & 2:
            params["bias"] = T.parameter(np.zeros(cout, np.float32))
    elif name == "batchnorm":
        params = {"gamma": T.parameter(np.zeros(cout, np.float32)),
                  "beta": T.parameter(np.zeros(cout, np.float32))}
        buffers = {"running_mean": np.zeros(cout, np.float32),
                   "running_var": np.zeros(cout, np.float32)}
    elif name == "dense":
        params = {"weight": T.parameter(np.zeros((cin, cout), np.float32)),
                  "bias": T.parameter(np.zeros(cout, np.float32))}
    return nn.Layer(name, cin, cout, stride, params, buffers)


def model_from_bytes(buf):
    r = _Reader(memoryview(buf).tobytes() if not isinstance(buf, bytes) else buf)
    if len(buf) < 4:
        raise FormatError("model file truncated")
    magic, version = r.take("4sH")
    if magic != MAGIC:
        raise FormatError(f"bad model magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported model version {version}")
    layers, frozen = [], []
    for _ in range(r.take("H")):
        kind, cin, cout, stride, flags = r.take("BHHBB")
        if kind >= len(nn.LAYER_KINDS):
            raise FormatError(f"unknown layer kind code {kind}")
        layers.append(_layer(kind, cin, cout, stride, flags))
        frozen.append(bool(flags & 1))
    num_classes, c, h, w, splice = r.take("HHHHh")
    try:
        nn.check_topology(layers, (c, h, w))
    except ValueError as e:
        raise FormatError(f"inconsistent topology: {e}") from None
    net = nn.Network(layers, num_classes, (c, h, w), None if splice < 0 else splice)
    tag = r.take("B")
    if tag not in _TAG_VARIANT:
        raise FormatError(f"unknown polarizer tag {tag}")
    if tag:
        pc, pk, ph, pw, dk = r.take("HHHHH")
        net.polarizer = make_polarizer(_TAG_VARIANT[tag], pc, pk, ph, pw, d_k=dk)
    holders = _holders(net)
    if r.take("I") != len(holders):
        raise FormatError("record count does not match the header")
    for kind, holder in holders:
        k, rank = r.take("BB")
        shape = tuple(r.take(f"{rank}I")) if rank > 1 else ((r.take("I"),) if rank else ())
        want = _array(holder)
        if k != kind or shape != want.shape:
            raise FormatError(f"record {k}/{shape} does not match expected {kind}/{want.shape}")
        want[...] = r.array(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after the last record")
    for layer, fz in zip(layers, frozen):
        if fz:
            layer.frozen = True
            for p in layer.params.values():
                p.requires_grad = False
    return net


def load_model(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())

import numpy as np
import pytest

from polarlab import nn
from polarlab.data import FormatError
from polarlab.polarizer import VARIANTS, make_polarizer
from polarlab.serialize import load_model, model_bytes, model_from_bytes, save_model


def _defended(variant, seed=0):
    rng = np.random.default_rng(seed)
    net = nn.build_cnn(4, (3, 8, 8), seed=seed)
    for layer in net.layers:
        for buf in layer.buffers.values():
            buf += rng.normal(0, 0.1, size=buf.shape).astype(np.float32)
    pol = make_polarizer(variant, 32, 4, 4, 4, d_k=8, seed=seed)
    for p in pol.trainable_params():
        p.data += rng.normal(0, 0.1, size=p.shape).astype(np.float32)
    return nn.splice(net, 6, pol)


@pytest.mark.parametrize("variant", (None,) + VARIANTS)
def test_round_trip_bit_exact(tmp_path, variant):
    net = nn.build_cnn(4, (3, 8, 8)) if variant is None else _defended(variant)
    path = tmp_path / "m.nplr"
    save_model(net, path)
    back = load_model(path)
    assert model_bytes(back) == path.read_bytes()
    assert back.splice_index == net.splice_index
    x = np.random.default_rng(1).random((3, 3, 8, 8)).astype(np.float32)
    cond = None if variant in (None, "plain") else np.array([0, 1, 3])
    np.testing.assert_array_equal(nn.forward(back, x, condition=cond).data,
                                  nn.forward(net, x, condition=cond).data)


def test_frozen_flags_survive():
    back = model_from_bytes(model_bytes(_defended("plain")))
    assert all(layer.frozen for layer in back.layers)
    assert all(not p.requires_grad for p in back.parameters())
    assert all(p.requires_grad for p in back.polarizer.trainable_params())


def test_corrupt_files():
    buf = model_bytes(_defended("attention"))
    with pytest.raises(FormatError):
        model_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        model_from_bytes(buf[:4] + b"\x07\x00" + buf[6:])
    with pytest.raises(FormatError):
        model_from_bytes(buf[:-3])
    with pytest.raises(FormatError):
        model_from_bytes(buf + b"\x00")
    with pytest.raises(FormatError):
        model_from_bytes(buf[:3])

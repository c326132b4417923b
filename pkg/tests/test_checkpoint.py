import struct

import numpy as np
import pytest

from kamkit.checkpoint import (MAGIC, BadMagic, CheckpointError, SpecMismatch,
                               Truncated, load_network, read_container, save_network,
                               write_container)
from kamkit.nets import attach_identity_fam, build_network, conv_stack_spec
from kamkit.rng import Rng


def small_net(fam=False):
    spec = conv_stack_spec((3, 8, 8), (4, 6), 3, (10,), 4)
    net = build_network(spec, Rng(11))
    if fam:
        attach_identity_fam(net, [2, 3])
        net.fam[2].value[...] = Rng(12).uniform(-1, 1, net.fam[2].value.shape)
    return net


@pytest.mark.parametrize("fam", [False, True])
def test_roundtrip_bitwise(tmp_path, fam):
    net = small_net(fam)
    path = tmp_path / "net.kacp"
    save_network(net, path)
    loaded = load_network(path)
    assert loaded.spec == net.spec
    for (w0, b0), (w1, b1) in zip(net.params, loaded.params):
        assert w0.value.tobytes() == w1.value.tobytes()
        assert b0.value.tobytes() == b1.value.tobytes()
    assert sorted(loaded.fam) == sorted(net.fam)
    for stage in net.fam:
        assert net.fam[stage].value.tobytes() == loaded.fam[stage].value.tobytes()


def test_save_is_deterministic(tmp_path):
    net = small_net(True)
    p1, p2 = tmp_path / "a.kacp", tmp_path / "b.kacp"
    save_network(net, p1)
    save_network(net, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_container_layout_exact(tmp_path):
    path = tmp_path / "t.kacp"
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_container(path, "hello", [("w", arr)])
    raw = path.read_bytes()
    assert raw[:4] == b"KACP"
    assert struct.unpack("<I", raw[4:8])[0] == 1          # version
    assert struct.unpack("<I", raw[8:12])[0] == 5         # spec blob length
    assert raw[12:17] == b"hello"
    assert struct.unpack("<I", raw[17:21])[0] == 1        # tensor count
    assert struct.unpack("<I", raw[21:25])[0] == 1        # name length
    assert raw[25:26] == b"w"
    assert raw[26] == 0 and raw[27] == 2                  # dtype, rank
    assert struct.unpack("<QQ", raw[28:44]) == (2, 3)
    assert raw[44:] == arr.astype("<f4").tobytes()


def test_bad_magic(tmp_path):
    net = small_net()
    path = tmp_path / "net.kacp"
    save_network(net, path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagic, match="magic"):
        load_network(path)


def test_truncated_mid_tensor(tmp_path):
    net = small_net()
    path = tmp_path / "net.kacp"
    save_network(net, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 7])
    with pytest.raises(Truncated, match="truncated"):
        load_network(path)


def test_trailing_garbage_rejected(tmp_path):
    net = small_net()
    path = tmp_path / "net.kacp"
    save_network(net, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_network(path)


def test_shape_mismatch_against_spec(tmp_path):
    net = small_net()
    spec_text = net.spec.canonical_text()
    tensors = []
    for i, (w, b) in enumerate(net.params, start=1):
        tensors.append((f"layer{i}.w", w.value))
        tensors.append((f"layer{i}.b", b.value))
    tensors[0] = ("layer1.w", np.zeros((2, 2), dtype=np.float32))  # wrong shape
    path = tmp_path / "bad.kacp"
    write_container(path, spec_text, tensors)
    with pytest.raises(SpecMismatch, match="shape"):
        load_network(path)


def test_missing_tensor_rejected(tmp_path):
    net = small_net()
    tensors = [("layer1.w", net.params[0][0].value)]
    path = tmp_path / "bad.kacp"
    write_container(path, net.spec.canonical_text(), tensors)
    with pytest.raises(SpecMismatch, match="missing"):
        load_network(path)


def test_unsupported_version(tmp_path):
    net = small_net()
    path = tmp_path / "net.kacp"
    save_network(net, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_network(path)


def test_scores_survive_roundtrip(tmp_path):
    net = small_net(True)
    x = Rng(13).uniform(0, 1, (5, 3, 8, 8)).astype(np.float32)
    before = net.scores(x)
    path = tmp_path / "net.kacp"
    save_network(net, path)
    after = load_network(path).scores(x)
    assert np.array_equal(before, after)


def test_generic_container_roundtrip(tmp_path):
    tensors = [("ae.layer1.enc", Rng(14).uniform(-1, 1, (3, 5)).astype(np.float32)),
               ("ae.layer1.dec", Rng(15).uniform(-1, 1, (5, 3)).astype(np.float32))]
    path = tmp_path / "bank.kacp"
    write_container(path, "ae-bank 1\n", tensors)
    text, loaded = read_container(path)
    assert text == "ae-bank 1\n"
    for (n0, a0), (n1, a1) in zip(tensors, loaded):
        assert n0 == n1 and a0.tobytes() == a1.tobytes()

"""Bit-exact checkpoint container and network save/load.

Layout: magic "KACP", version u32 LE (=1), spec blob (u32 length + UTF-8
text), tensor count u32, then per tensor: name (u32 length + UTF-8),
dtype u8 (0 = float32), rank u8, extents as u64 LE, raw little-endian
float32 payload. No padding or alignment.
"""

from __future__ import annotations

import struct

import numpy as np

from .engine import Param
from .nets import Network, NetworkSpec, SpecError, attach_identity_fam, build_network
from .rng import Rng

MAGIC = b"KACP"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


class BadMagic(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


class SpecMismatch(CheckpointError):
    pass


def write_container(path, spec_text: str, tensors):
    """Write named float32 tensors with a spec blob; deterministic bytes."""
    blob = spec_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", 0, arr.ndim))
            for e in arr.shape:
                f.write(struct.pack("<Q", e))
            f.write(np.ascontiguousarray(arr).tobytes())


def read_container(path):
    """Read (spec_text, [(name, float32 array), ...]) back, validating the frame."""
    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(view):
            raise Truncated(f"truncated checkpoint: needed {n} bytes for {what}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise BadMagic(f"bad magic {bytes(data[:4])!r} (expected {MAGIC!r})")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", take(4, "spec length"))
    spec_text = bytes(take(blob_len, "spec text")).decode("utf-8")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "tensor name length"))
        name = bytes(take(name_len, "tensor name")).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", take(2, "tensor dtype/rank"))
        if dtype_code != 0:
            raise CheckpointError(f"unsupported dtype code {dtype_code} for tensor {name!r}")
        extents = struct.unpack(f"<{rank}Q", take(8 * rank, f"extents of {name!r}"))
        n_items = 1
        for e in extents:
            n_items *= e
        payload = take(4 * n_items, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(extents).copy()
        tensors.append((name, arr))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    return spec_text, tensors


def _network_tensors(net: Network):
    out = []
    for i, (w, b) in enumerate(net.params, start=1):
        out.append((f"layer{i}.w", w.value))
        out.append((f"layer{i}.b", b.value))
    for stage in sorted(net.fam):
        out.append((f"fam{stage}.w", net.fam[stage].value))
    return out


def save_network(net: Network, path):
    text = net.spec.canonical_text()
    if net.fam:
        text += "fam " + " ".join(str(s) for s in sorted(net.fam)) + "\n"
    write_container(path, text, _network_tensors(net))


def load_network(path) -> Network:
    """Rebuild a Network, validating tensor shapes against the embedded spec."""
    spec_text, tensors = read_container(path)
    lines = spec_text.splitlines()
    fam_stages = []
    spec_lines = []
    for ln in lines:
        if ln.startswith("fam "):
            fam_stages = [int(t) for t in ln.split()[1:]]
        else:
            spec_lines.append(ln)
    try:
        spec = NetworkSpec.from_text("\n".join(spec_lines) + "\n")
    except SpecError as e:
        raise SpecMismatch(f"invalid embedded spec: {e}") from e

    net = build_network(spec, Rng(0))
    if fam_stages:
        attach_identity_fam(net, fam_stages)
    expected = {name: arr.shape for name, arr in _network_tensors(net)}
    got = dict(tensors)
    if set(expected) != set(got):
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise SpecMismatch(f"tensor names disagree with spec (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if got[name].shape != shape:
            raise SpecMismatch(f"tensor {name!r} has shape {got[name].shape}, spec implies {shape}")

    for i in range(len(net.params)):
        w, b = net.params[i]
        net.params[i] = (Param(got[f"layer{i + 1}.w"], w.name), Param(got[f"layer{i + 1}.b"], b.name))
    for stage in fam_stages:
        net.fam[stage] = Param(got[f"fam{stage}.w"], f"fam{stage}.w")
    return net

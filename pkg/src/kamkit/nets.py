"""Declarative network specs, initialization, forward execution with feature taps.

A network is an ordered list of conv/fc layers, each followed by its own
activation and pooling. "Raw" layer outputs (pre-activation, pre-pool) are
what feature taps return and what the per-layer student supervision targets
are built from. A student may carry feature-adaption (FAM) weights: the FAM
for stage `l` is a square channel map applied to the raw output of layer
`l-1`, before that layer's activation and pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import engine
from .engine import Param, ShapeMismatch, Tape
from .records import TrainHyper, TrainLog
from .rng import Rng


class SpecError(ValueError):
    """A network spec violates its structural invariants."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str                      # "conv" | "fc"
    in_ch: int
    out_ch: int
    kernel: int = 0                # conv only
    stride: int = 1
    pad: int = 0
    activation: str = "none"       # "none" | "relu"
    pool: tuple | None = None      # (k, s) max pooling, conv only
    flatten_before: bool = False   # fc only

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.in_ch < 1 or self.out_ch < 1:
            raise SpecError(f"layer extents must be positive, got in={self.in_ch}, out={self.out_ch}")
        if self.activation not in ("none", "relu"):
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.kind == "conv" and self.kernel < 1:
            raise SpecError(f"conv layer needs kernel >= 1, got {self.kernel}")
        if self.kind == "fc" and self.pool is not None:
            raise SpecError("fc layers cannot pool")


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple             # (C, H, W)
    layers: tuple                  # ordered LayerSpecs
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def validate(self):
        """Check chain consistency; names the first inconsistent layer."""
        if len(self.input_shape) != 3 or any(v < 1 for v in self.input_shape):
            raise SpecError(f"input shape must be (C,H,W) positive, got {self.input_shape}")
        if not self.layers:
            raise SpecError("network needs at least one layer")
        c, h, w = self.input_shape
        flat = None  # feature count once the representation is flat
        for idx, layer in enumerate(self.layers, start=1):
            if layer.kind == "conv":
                if flat is not None:
                    raise SpecError(f"layer {idx}: conv after fully connected layers")
                if layer.in_ch != c:
                    raise SpecError(f"layer {idx}: in_ch {layer.in_ch} != previous channels {c}")
                ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise SpecError(f"layer {idx}: non-positive conv output {ho}x{wo}")
                c, h, w = layer.out_ch, ho, wo
                if layer.pool is not None:
                    pk, ps = layer.pool
                    if pk > h or pk > w:
                        raise SpecError(f"layer {idx}: pool window {pk} larger than {h}x{w}")
                    h = (h - pk) // ps + 1
                    w = (w - pk) // ps + 1
            else:
                expected = (c * h * w) if flat is None and layer.flatten_before else \
                    (flat if flat is not None else c)
                if flat is None and not layer.flatten_before:
                    raise SpecError(f"layer {idx}: first fc layer must set flatten_before")
                if layer.in_ch != expected:
                    raise SpecError(f"layer {idx}: in_ch {layer.in_ch} != incoming features {expected}")
                flat = layer.out_ch
        last = self.layers[-1]
        if last.kind != "fc" or last.out_ch != self.num_classes:
            raise SpecError(f"final layer must be fc with out_ch == num_classes ({self.num_classes})")
        if last.activation != "none" or last.pool is not None:
            raise SpecError("final layer must emit raw scores (no activation/pool)")
        return self

    def raw_output_shapes(self):
        """Per-layer raw (pre-activation/pool) output shapes, 1-based list.

        Conv layers give (out_ch, Ho, Wo); fc layers give (out_ch,).
        """
        self.validate()
        shapes = []
        c, h, w = self.input_shape
        for layer in self.layers:
            if layer.kind == "conv":
                ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                shapes.append((layer.out_ch, ho, wo))
                c, h, w = layer.out_ch, ho, wo
                if layer.pool is not None:
                    pk, ps = layer.pool
                    h = (h - pk) // ps + 1
                    w = (w - pk) // ps + 1
            else:
                shapes.append((layer.out_ch,))
        return shapes

    def canonical_text(self) -> str:
        """Deterministic line-based encoding; the checkpoint spec blob."""
        lines = [f"net 1", f"input {self.input_shape[0]} {self.input_shape[1]} {self.input_shape[2]}",
                 f"classes {self.num_classes}"]
        for i, l in enumerate(self.layers, start=1):
            if l.kind == "conv":
                pool = f"pool {l.pool[0]} {l.pool[1]}" if l.pool else "pool none"
                lines.append(f"layer {i} conv in {l.in_ch} out {l.out_ch} k {l.kernel} "
                             f"s {l.stride} p {l.pad} act {l.activation} {pool}")
            else:
                lines.append(f"layer {i} fc in {l.in_ch} out {l.out_ch} act {l.activation} "
                             f"flatten {int(l.flatten_before)}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "NetworkSpec":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "net 1":
            raise SpecError(f"unrecognized network spec header: {lines[:1]}")
        input_shape = None
        num_classes = None
        layers = []
        for ln in lines[1:]:
            tok = ln.split()
            if tok[0] == "input":
                input_shape = tuple(int(t) for t in tok[1:4])
            elif tok[0] == "classes":
                num_classes = int(tok[1])
            elif tok[0] == "layer":
                kind = tok[2]
                kv = tok[3:]
                if kind == "conv":
                    pool = None if kv[kv.index("pool") + 1] == "none" else (
                        int(kv[kv.index("pool") + 1]), int(kv[kv.index("pool") + 2]))
                    layers.append(LayerSpec(
                        "conv", in_ch=int(kv[kv.index("in") + 1]), out_ch=int(kv[kv.index("out") + 1]),
                        kernel=int(kv[kv.index("k") + 1]), stride=int(kv[kv.index("s") + 1]),
                        pad=int(kv[kv.index("p") + 1]), activation=kv[kv.index("act") + 1], pool=pool))
                elif kind == "fc":
                    layers.append(LayerSpec(
                        "fc", in_ch=int(kv[kv.index("in") + 1]), out_ch=int(kv[kv.index("out") + 1]),
                        activation=kv[kv.index("act") + 1],
                        flatten_before=bool(int(kv[kv.index("flatten") + 1]))))
                else:
                    raise SpecError(f"unknown layer kind in spec text: {kind!r}")
            else:
                raise SpecError(f"unrecognized spec line: {ln!r}")
        if input_shape is None or num_classes is None:
            raise SpecError("spec text missing input/classes lines")
        return NetworkSpec(input_shape, tuple(layers), num_classes).validate()


@dataclass(frozen=True)
class FeatureTap:
    """Request for one layer's raw (post-conv, pre-activation) output."""

    layer_index: int               # 1-based
    stage: str = "post_conv"


class Network:
    """A spec plus its instantiated parameters (and optional FAM weights)."""

    def __init__(self, spec: NetworkSpec, params, fam=None):
        self.spec = spec
        self.params = list(params)        # [(w Param, b Param)] per layer
        self.fam = dict(fam) if fam else {}  # stage index -> square Param

    def parameters(self):
        out = []
        for w, b in self.params:
            out.extend((w, b))
        for stage in sorted(self.fam):
            out.append(self.fam[stage])
        return out

    def copy(self) -> "Network":
        def clone(p: Param) -> Param:
            q = Param(p.value.copy(), p.name)
            q.grad = p.grad.copy()
            q.velocity = p.velocity.copy()
            return q
        return Network(self.spec,
                       [(clone(w), clone(b)) for w, b in self.params],
                       {s: clone(p) for s, p in self.fam.items()})

    def scores(self, x, batch_size=None) -> np.ndarray:
        if batch_size is None or x.shape[0] <= batch_size:
            return forward_collect(self, x)[1]
        chunks = [forward_collect(self, x[i:i + batch_size])[1]
                  for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(chunks, axis=0)


def build_network(spec: NetworkSpec, rng: Rng, dtype=np.float32) -> Network:
    """Instantiate parameters: weights uniform in +-sqrt(6/fan_in), biases zero."""
    spec.validate()
    params = []
    for i, layer in enumerate(spec.layers, start=1):
        st = rng.stream("layer", i)
        if layer.kind == "conv":
            fan_in = layer.in_ch * layer.kernel * layer.kernel
            shape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
        else:
            fan_in = layer.in_ch
            shape = (layer.out_ch, layer.in_ch)
        bound = math.sqrt(6.0 / fan_in)
        w = Param(st.uniform(-bound, bound, shape).astype(dtype), f"layer{i}.w")
        b = Param(np.zeros(layer.out_ch, dtype=dtype), f"layer{i}.b")
        params.append((w, b))
    return Network(spec, params)


def attach_identity_fam(net: Network, stages, dtype=np.float32):
    """Add identity-initialized FAM weights for the given stage indices.

    Stage `l` adapts the raw output of layer `l-1`, so its square extent is
    layer l-1's out_ch.
    """
    n_layers = len(net.spec.layers)
    for stage in stages:
        if not 2 <= stage <= n_layers - 1:
            raise SpecError(f"FAM stage {stage} outside layers 2..{n_layers - 1}")
        dim = net.spec.layers[stage - 2].out_ch
        net.fam[stage] = Param(np.eye(dim, dtype=dtype), f"fam{stage}.w")
    return net


def forward_collect(net: Network, x, taps=(), tape: Tape | None = None):
    """Run the network; return ({layer_index: raw output}, scores).

    Raw outputs are the conv/fc results before FAM, activation, and pooling.
    Scores are the final fc output with no softmax. Never mutates params.
    """
    x = np.asarray(x)
    spec = net.spec
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeMismatch(
            f"input {x.shape} does not match spec input {spec.input_shape}")
    tap_idx = set()
    for t in taps:
        idx = t.layer_index if isinstance(t, FeatureTap) else int(t)
        if not 1 <= idx <= len(spec.layers):
            raise ShapeMismatch(f"tap layer {idx} outside 1..{len(spec.layers)}")
        tap_idx.add(idx)

    features = {}
    cur = x
    for i, layer in enumerate(spec.layers, start=1):
        w, b = net.params[i - 1]
        if layer.kind == "fc" and layer.flatten_before:
            cur = engine.flatten2d(cur, tape=tape)
        if layer.kind == "conv":
            raw = engine.conv2d(cur, w.value, b.value, layer.stride, layer.pad, tape=tape)
        else:
            raw = engine.linear(cur, w.value, b.value, tape=tape)
        if i in tap_idx:
            features[i] = raw
        if (i + 1) in net.fam:
            raw = engine.conv1x1(raw, net.fam[i + 1].value, tape=tape)
        if layer.activation != "none" or layer.pool is not None:
            cur = engine.nonparam(raw, layer.activation, layer.pool, tape=tape)
        else:
            cur = raw
    return features, cur


def count_params(net: Network) -> int:
    """Total scalar count over weights, biases, and FAM weights."""
    total = sum(w.numel() + b.numel() for w, b in net.params)
    total += sum(p.numel() for p in net.fam.values())
    return total


def conv_stack_spec(input_shape, conv_channels, kernel, hidden, num_classes,
                    pool=(2, 2)) -> NetworkSpec:
    """Conv blocks (relu + maxpool) followed by relu fc hiddens and a classifier."""
    c, h, w = input_shape
    pad = kernel // 2
    layers = []
    prev_c, ph, pw = c, h, w
    for ch in conv_channels:
        layers.append(LayerSpec("conv", prev_c, ch, kernel=kernel, stride=1, pad=pad,
                                activation="relu", pool=tuple(pool)))
        ph = (ph + 2 * pad - kernel) + 1
        pw = (pw + 2 * pad - kernel) + 1
        ph = (ph - pool[0]) // pool[1] + 1
        pw = (pw - pool[0]) // pool[1] + 1
        prev_c = ch
    feat = prev_c * ph * pw
    first_fc = True
    for width in hidden:
        layers.append(LayerSpec("fc", feat if first_fc else prev_f, width,
                                activation="relu", flatten_before=first_fc))
        prev_f = width
        first_fc = False
    last_in = hidden[-1] if hidden else feat
    layers.append(LayerSpec("fc", last_in, num_classes, activation="none",
                            flatten_before=not hidden))
    return NetworkSpec(tuple(input_shape), tuple(layers), num_classes).validate()


def make_student_spec(teacher_spec: NetworkSpec, n_teachers: int, width_ratio: float,
                      total_classes: int) -> NetworkSpec:
    """Widen every hidden layer of the teacher architecture for the student.

    Each hidden width becomes round(width_ratio * n_teachers * teacher_width),
    clamped inside the open interval (teacher_width, n_teachers*teacher_width).
    The classifier output becomes `total_classes` (the concatenated score-entry
    count when teachers overlap). Input shape is unchanged.
    """
    teacher_spec.validate()
    if n_teachers < 2:
        raise ValueError(f"need at least 2 teachers, got {n_teachers}")
    if not (1.0 / n_teachers < width_ratio < 1.0):
        raise ValueError(
            f"width_ratio must lie in (1/{n_teachers}, 1), got {width_ratio}")

    c, h, w = teacher_spec.input_shape
    layers = []
    prev_c, ph, pw = c, h, w
    prev_f = None
    for i, layer in enumerate(teacher_spec.layers):
        last = i == len(teacher_spec.layers) - 1
        if last:
            out = total_classes
        else:
            out = int(round(width_ratio * n_teachers * layer.out_ch))
            out = min(max(out, layer.out_ch + 1), n_teachers * layer.out_ch - 1)
        if layer.kind == "conv":
            layers.append(replace(layer, in_ch=prev_c, out_ch=out))
            ph = (ph + 2 * layer.pad - layer.kernel) // layer.stride + 1
            pw = (pw + 2 * layer.pad - layer.kernel) // layer.stride + 1
            if layer.pool is not None:
                ph = (ph - layer.pool[0]) // layer.pool[1] + 1
                pw = (pw - layer.pool[0]) // layer.pool[1] + 1
            prev_c = out
        else:
            in_f = prev_c * ph * pw if layer.flatten_before else prev_f
            layers.append(replace(layer, in_ch=in_f, out_ch=out))
            prev_f = out
    return NetworkSpec(teacher_spec.input_shape, tuple(layers), total_classes).validate()


def train_classifier(net: Network, train, val, hyper: TrainHyper, rng: Rng):
    """Minimize softmax cross entropy (T=1) over a LabeledSet; returns a new net.

    Labels are mapped to local indices through the set's class_ids order.
    The log records per-epoch train loss/accuracy and, when `val` is given,
    validation loss/accuracy.
    """
    from .data import batch_indices  # local import to keep data free of nets

    net = net.copy()
    log = TrainLog()
    n_classes = net.spec.num_classes
    y_train = train.local_labels()
    if y_train.min() < 0 or y_train.max() >= n_classes:
        raise ValueError("training labels outside [0, num_classes)")
    params = net.parameters()

    for epoch in range(1, hyper.epochs + 1):
        order = batch_indices(len(y_train), hyper.batch_size,
                              rng.stream("epoch", epoch), shuffle=True)
        total_loss, correct, seen = 0.0, 0, 0
        for idx in order:
            xb = train.images[idx]
            yb = y_train[idx]
            tape = Tape()
            tape.watch(*params)
            _, scores = forward_collect(net, xb, (), tape)
            loss = engine.softmax_xent(scores, engine.one_hot(yb, n_classes), 1.0, tape)
            tape.backprop(1.0)
            engine.sgd_step(params, hyper.lr, hyper.momentum, hyper.weight_decay)
            total_loss += loss * len(idx)
            correct += int((scores.argmax(axis=1) == yb).sum())
            seen += len(idx)
        log.add(epoch, "train", total_loss / seen, correct / seen)
        if val is not None:
            vloss, vacc = _eval_xent(net, val, hyper.batch_size)
            log.add(epoch, "val", vloss, vacc)
    return net, log


def _eval_xent(net: Network, dataset, batch_size: int):
    y = dataset.local_labels()
    n = len(y)
    total, correct = 0.0, 0
    for lo in range(0, n, batch_size):
        xb = dataset.images[lo:lo + batch_size]
        yb = y[lo:lo + batch_size]
        _, scores = forward_collect(net, xb)
        total += engine.softmax_xent(scores, engine.one_hot(yb, net.spec.num_classes)) * len(yb)
        correct += int((scores.argmax(axis=1) == yb).sum())
    return total / n, correct / n

"""Feature amalgamation: channel autoencoders over concatenated teacher features.

Teacher feature maps from the same layer are concatenated channel-wise in
teacher order and compressed by a linear 1x1-conv autoencoder trained to
reconstruct its input; the encoded maps become the student's per-layer
supervision targets. Score vectors are amalgamated by plain concatenation,
with overlapping classes kept as separate entries during training and
merged (max) at test time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .data import TransferSet, batch_indices
from .engine import Param, ShapeMismatch, Tape
from .nets import Network, forward_collect
from .records import TrainHyper
from .rng import Rng


@dataclass
class ChannelAutoencoder:
    """Linear encode/decode pair of 1x1 channel maps with cout < cin."""

    enc: Param                     # [cout, cin]
    dec: Param                     # [cin, cout]
    cin: int
    cout: int

    def __post_init__(self):
        if not self.cout < self.cin:
            raise ValueError(f"autoencoder must compress: cout {self.cout} >= cin {self.cin}")
        if self.enc.shape != (self.cout, self.cin) or self.dec.shape != (self.cin, self.cout):
            raise ShapeMismatch(
                f"enc {self.enc.shape} / dec {self.dec.shape} inconsistent with "
                f"cin={self.cin}, cout={self.cout}")


@dataclass(frozen=True)
class AmalgamPlan:
    """Target widths for feature amalgamation at each tapped layer.

    per_layer_out[i] is the final amalgamated width of tapped layer i (these
    must equal the student's hidden widths). For IFA, merge_widths[i] lists
    the width after each pairwise merge at that layer (N-1 entries, the last
    equal to per_layer_out[i]).
    """

    mode: str                      # "pairwise" | "ifa" | "dfa"
    per_layer_out: tuple
    merge_widths: tuple | None = None

    def __post_init__(self):
        if self.mode not in ("pairwise", "ifa", "dfa"):
            raise ValueError(f"unknown amalgamation mode {self.mode!r}")
        object.__setattr__(self, "per_layer_out", tuple(int(v) for v in self.per_layer_out))
        if self.merge_widths is not None:
            object.__setattr__(self, "merge_widths",
                               tuple(tuple(int(v) for v in mw) for mw in self.merge_widths))
        if self.mode == "ifa":
            if self.merge_widths is None or len(self.merge_widths) != len(self.per_layer_out):
                raise ValueError("ifa plan needs merge_widths per tapped layer")
            for mw, out in zip(self.merge_widths, self.per_layer_out):
                if mw[-1] != out:
                    raise ValueError(f"last merge width {mw[-1]} != final width {out}")


@dataclass
class FeatureBank:
    """Per-layer, per-teacher raw features over the transfer set (plus scores)."""

    features: dict                 # layer index -> [teacher arrays [K, C, h, w]]
    scores: list | None = None     # per-teacher [K, M_i]


def collect_features(teachers, images: np.ndarray, layers, batch_size: int = 64,
                     with_scores: bool = False) -> FeatureBank:
    """Run every teacher over the transfer images, banking raw tapped outputs."""
    layers = list(layers)
    feats = {l: [] for l in layers}
    scores = [] if with_scores else None
    for net in teachers:
        shapes = net.spec.raw_output_shapes()
        k = images.shape[0]
        banks = {l: np.empty((k,) + shapes[l - 1], dtype=np.float32) for l in layers}
        sc = np.empty((k, net.spec.num_classes), dtype=np.float32) if with_scores else None
        for lo in range(0, k, batch_size):
            xb = images[lo:lo + batch_size]
            tapped, out = forward_collect(net, xb, taps=layers)
            for l in layers:
                banks[l][lo:lo + xb.shape[0]] = tapped[l]
            if with_scores:
                sc[lo:lo + xb.shape[0]] = out
        for l in layers:
            feats[l].append(banks[l])
        if with_scores:
            scores.append(sc)
    return FeatureBank(feats, scores)


def _concat_channels(parts, idx=None):
    arrs = [p if idx is None else p[idx] for p in parts]
    return arrs[0] if len(arrs) == 1 else np.concatenate(arrs, axis=1)


def train_autoencoder(parts, cout: int, hyper: TrainHyper, rng: Rng):
    """Fit a channel autoencoder to reconstruct the concatenated feature stream.

    `parts` is one array or a list of arrays [K, C_i, h, w] (or [K, C_i])
    concatenated channel-wise per batch. Returns (autoencoder, loss_curve)
    where loss_curve[0] is the pre-training full-stream loss and each later
    entry is that epoch's mean batch loss.
    """
    if isinstance(parts, np.ndarray):
        parts = [parts]
    cin = sum(p.shape[1] for p in parts)
    if not 1 <= cout < cin:
        raise ValueError(f"autoencoder must compress: need 1 <= cout < {cin}, got {cout}")
    k = parts[0].shape[0]
    if any(p.shape[0] != k for p in parts):
        raise ShapeMismatch("feature parts disagree on sample count")

    # Balanced orthonormal init: encode/decode start as a random projector
    # (dec = enc^T with orthonormal rows), so the spectral norm of either map
    # is 1 and gradient-flow balance keeps the pair well conditioned.
    g = rng.stream("init").normal(0.0, 1.0, (cin, cout))
    q, _ = np.linalg.qr(g)
    enc = Param(q.T.astype(np.float32), "ae.enc")
    dec = Param(q.astype(np.float32), "ae.dec")
    ae = ChannelAutoencoder(enc, dec, cin, cout)

    # The reconstruction loss sums over every feature element per sample, so
    # its curvature grows with the per-sample feature energy; dividing the
    # step by that energy makes one configured lr usable at every layer.
    lr = hyper.lr / max(1.0, 2.0 * feature_energy(parts))

    curve = [reconstruction_loss(ae, parts, hyper.batch_size)]
    for epoch in range(1, hyper.epochs + 1):
        total, seen = 0.0, 0
        for idx in batch_indices(k, hyper.batch_size, rng.stream("batches", epoch), shuffle=True):
            x = _concat_channels(parts, idx)
            tape = Tape()
            tape.watch(enc, dec)
            h = engine.conv1x1(x, enc.value, tape)
            xh = engine.conv1x1(h, dec.value, tape)
            loss = engine.l2_loss(xh, x, tape)
            tape.backprop(1.0)
            engine.sgd_step([enc, dec], lr, hyper.momentum, hyper.weight_decay)
            total += loss * len(idx)
            seen += len(idx)
        curve.append(total / seen)
    return ae, curve


def reconstruction_loss(ae: ChannelAutoencoder, parts, batch_size: int = 256) -> float:
    if isinstance(parts, np.ndarray):
        parts = [parts]
    k = parts[0].shape[0]
    total = 0.0
    for lo in range(0, k, batch_size):
        idx = np.arange(lo, min(lo + batch_size, k))
        x = _concat_channels(parts, idx)
        xh = engine.conv1x1(engine.conv1x1(x, ae.enc.value), ae.dec.value)
        total += engine.l2_loss(xh, x) * len(idx)
    return total / k


def feature_energy(parts, batch_size: int = 256) -> float:
    """Per-sample mean of 1/2 ||F||^2 over the concatenated stream."""
    if isinstance(parts, np.ndarray):
        parts = [parts]
    k = parts[0].shape[0]
    total = 0.0
    for p in parts:
        for lo in range(0, k, batch_size):
            chunk = p[lo:lo + batch_size].astype(np.float64)
            total += 0.5 * float(np.sum(chunk * chunk))
    return total / k


def encode(ae: ChannelAutoencoder, features: np.ndarray) -> np.ndarray:
    """Apply the encoder 1x1 map; preserves batch and spatial extents."""
    return engine.conv1x1(features, ae.enc.value)


def encode_stream(ae: ChannelAutoencoder, parts, batch_size: int = 256) -> np.ndarray:
    if isinstance(parts, np.ndarray):
        parts = [parts]
    k = parts[0].shape[0]
    first = encode(ae, _concat_channels(parts, np.arange(0, min(batch_size, k))))
    out = np.empty((k,) + first.shape[1:], dtype=np.float32)
    out[:first.shape[0]] = first
    for lo in range(batch_size, k, batch_size):
        idx = np.arange(lo, min(lo + batch_size, k))
        out[lo:lo + len(idx)] = encode(ae, _concat_channels(parts, idx))
    return out


def amalgamate_pair(f1: np.ndarray, f2: np.ndarray, cout: int, hyper: TrainHyper, rng: Rng):
    """Concatenate two equal-width feature streams and compress to cout channels.

    Requires C1 < cout < 2*C1 (open interval). Returns (autoencoder, encoded
    stream).
    """
    if f1.shape[1] != f2.shape[1]:
        raise ShapeMismatch(f"teacher widths differ: {f1.shape[1]} vs {f2.shape[1]}")
    c1 = f1.shape[1]
    if not c1 < cout < 2 * c1:
        raise ValueError(f"pair width must satisfy {c1} < cout < {2 * c1}, got {cout}")
    ae, _ = train_autoencoder([f1, f2], cout, hyper, rng.stream("ae", 0))
    return ae, encode_stream(ae, [f1, f2])


def amalgamate_ifa(features, merge_widths, hyper: TrainHyper, rng: Rng):
    """Progressive (incremental) amalgamation, merging one teacher at a time.

    Left fold: the running amalgamated stream is concatenated with the next
    teacher's stream and compressed to merge_widths[step]. Adding a teacher
    later only requires training one more autoencoder. Returns
    (autoencoders, encoded stream).
    """
    if len(features) < 2:
        raise ValueError("ifa needs at least two teachers")
    if len(merge_widths) != len(features) - 1:
        raise ValueError(f"ifa with {len(features)} teachers needs {len(features) - 1} "
                         f"merge widths, got {len(merge_widths)}")
    max_single = max(f.shape[1] for f in features)
    aes = []
    acc = features[0]
    for step, nxt in enumerate(features[1:]):
        width = merge_widths[step]
        total = acc.shape[1] + nxt.shape[1]
        if not max_single < width < total:
            raise ValueError(
                f"ifa step {step}: width {width} outside open interval "
                f"({max_single}, {total})")
        ae, _ = train_autoencoder([acc, nxt], width, hyper, rng.stream("ae", step))
        acc = encode_stream(ae, [acc, nxt])
        aes.append(ae)
    return aes, acc


def amalgamate_dfa(features, cout: int, hyper: TrainHyper, rng: Rng):
    """One-shot amalgamation: concatenate all teachers, train one autoencoder."""
    if len(features) < 2:
        raise ValueError("dfa needs at least two teachers")
    max_single = max(f.shape[1] for f in features)
    total = sum(f.shape[1] for f in features)
    if not max_single < cout < total:
        raise ValueError(f"dfa width must satisfy {max_single} < cout < {total}, got {cout}")
    ae, _ = train_autoencoder(list(features), cout, hyper, rng.stream("ae", 0))
    return [ae], encode_stream(ae, list(features))


@dataclass(frozen=True)
class LabelMap:
    """Provenance of every concatenated score entry and the global class order.

    entries are (teacher_index, local_class_index, global_class_id) in score
    concatenation order; global_classes keeps first-appearance order.
    Overlapping classes contribute one entry per teacher.
    """

    entries: tuple
    global_classes: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries",
                           tuple((int(t), int(l), int(g)) for t, l, g in self.entries))
        object.__setattr__(self, "global_classes", tuple(int(g) for g in self.global_classes))
        covered = {g for _, _, g in self.entries}
        if covered != set(self.global_classes):
            raise ValueError("global_classes must equal the set of entry classes")

    @staticmethod
    def from_teacher_classes(class_lists) -> "LabelMap":
        entries = []
        global_classes = []
        seen = set()
        for t, classes in enumerate(class_lists):
            for local, g in enumerate(classes):
                entries.append((t, local, int(g)))
                if g not in seen:
                    seen.add(g)
                    global_classes.append(int(g))
        return LabelMap(tuple(entries), tuple(global_classes))

    def n_entries(self) -> int:
        return len(self.entries)

    def teacher_blocks(self):
        """(start, stop) slice of the concatenated score vector per teacher."""
        blocks = []
        start = 0
        t_prev = None
        for i, (t, _, _) in enumerate(self.entries):
            if t != t_prev:
                if t_prev is not None:
                    blocks.append((start, i))
                start, t_prev = i, t
        blocks.append((start, len(self.entries)))
        return blocks

    def entry_columns(self, global_id: int):
        return [i for i, (_, _, g) in enumerate(self.entries) if g == global_id]


def amalgamate_scores(score_vectors, class_lists):
    """Concatenate raw per-teacher score vectors; build the label map.

    Scores stay logits (no softmax). Returns ([B, sum M_i] scores, LabelMap).
    """
    if len(score_vectors) != len(class_lists):
        raise ValueError("need one class list per score vector")
    b = score_vectors[0].shape[0]
    for s in score_vectors:
        if s.shape[0] != b:
            raise ShapeMismatch("score vectors disagree on batch extent")
    for s, cl in zip(score_vectors, class_lists):
        if s.shape[1] != len(cl):
            raise ShapeMismatch(f"score width {s.shape[1]} != class count {len(cl)}")
    return np.concatenate(score_vectors, axis=1), LabelMap.from_teacher_classes(class_lists)


def merge_overlapping_at_test(scores: np.ndarray, label_map: LabelMap) -> np.ndarray:
    """Collapse duplicate entries per global class by taking their max.

    Output columns follow label_map.global_classes order.
    """
    scores = np.asarray(scores)
    if scores.shape[1] != label_map.n_entries():
        raise ShapeMismatch(
            f"scores have {scores.shape[1]} entries, label map expects {label_map.n_entries()}")
    cols = [label_map.entry_columns(g) for g in label_map.global_classes]
    out = np.empty((scores.shape[0], len(cols)), dtype=scores.dtype)
    for j, cc in enumerate(cols):
        out[:, j] = scores[:, cc].max(axis=1)
    return out


def default_merge_widths(c1: int, n_teachers: int, final_width: int, ratio: float = 0.75):
    """IFA intermediate widths: round(ratio * j * C1) clamped inside (C1, j*C1)."""
    widths = []
    for j in range(2, n_teachers + 1):
        if j == n_teachers:
            widths.append(final_width)
        else:
            w = int(round(ratio * j * c1))
            widths.append(min(max(w, c1 + 1), j * c1 - 1))
    return tuple(widths)


def default_plan(teacher_spec, n_teachers: int, student_widths, mode: str,
                 ratio: float = 0.75) -> AmalgamPlan:
    """Plan whose final widths equal the student's hidden widths."""
    teacher_widths = [l.out_ch for l in teacher_spec.layers[:-1]]
    if len(student_widths) != len(teacher_widths):
        raise ValueError("student widths must cover every hidden layer")
    if mode == "ifa":
        merges = tuple(default_merge_widths(c1, n_teachers, out, ratio)
                       for c1, out in zip(teacher_widths, student_widths))
        return AmalgamPlan("ifa", tuple(student_widths), merges)
    return AmalgamPlan(mode, tuple(student_widths))

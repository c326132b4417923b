"""Parameter learning: layer-wise stages, joint fine-tuning, and comparators.

Each layer-wise stage regresses one student layer onto its amalgamated
feature target: the previous layer's amalgamated features pass through the
(optional) feature-adaption map, the previous layer's activation and
pooling, and the layer's conv/fc map, trained under the half-squared-error
loss. Joint fine-tuning then trains the assembled student end to end
against the concatenated teacher score vectors. The Hinton-style
distillation baseline and the score-concatenation ensemble provide the
reference points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .amalgam import (AmalgamPlan, LabelMap, amalgamate_dfa, amalgamate_ifa,
                      amalgamate_pair, collect_features, merge_overlapping_at_test)
from .data import LabeledSet, TransferSet, batch_indices
from .engine import Param, ShapeMismatch, Tape
from .nets import (LayerSpec, Network, NetworkSpec, build_network, count_params,
                   forward_collect)
from .records import EvalReport, TrainHyper, TrainLog
from .rng import Rng


@dataclass
class StageResult:
    """Learned parameters and loss curve of one layer-wise stage."""

    layer_index: int
    weight: Param
    bias: Param
    fam: Param | None
    loss_curve: list


@dataclass
class LayerwiseResult:
    student: Network
    stages: list
    autoencoders: dict             # layer index -> [ChannelAutoencoder, ...]


def _stage_forward(x, layer_spec: LayerSpec, w, b, fam, prev_activation, prev_pool, tape=None):
    z = x
    if fam is not None:
        z = engine.conv1x1(z, fam.value, tape)
    if prev_activation != "none" or prev_pool is not None:
        z = engine.nonparam(z, prev_activation, prev_pool, tape)
    if layer_spec.kind == "conv":
        return engine.conv2d(z, w.value, b.value, layer_spec.stride, layer_spec.pad, tape)
    if layer_spec.flatten_before:
        z = engine.flatten2d(z, tape)
    return engine.linear(z, w.value, b.value, tape)


def layerwise_stage(l: int, inputs: np.ndarray, targets: np.ndarray,
                    layer_spec: LayerSpec, prev_activation: str, prev_pool,
                    fam_on: bool, hyper: TrainHyper, rng: Rng) -> StageResult:
    """Regress one student layer onto its amalgamated feature targets.

    `inputs` is the previous layer's amalgamated feature stream (raw images
    for l=1, where adaption is disabled because there is nothing to adapt);
    `targets` is this layer's amalgamated stream. Only this stage's conv/fc
    parameters (and its adaption map, identity-initialized) are trained.
    loss_curve[0] is the loss before any update.
    """
    if l == 1 and fam_on:
        raise ValueError("stage 1 consumes raw images; feature adaption is disabled there")
    if inputs.shape[0] != targets.shape[0]:
        raise ShapeMismatch(f"input stream ({inputs.shape[0]}) and target stream "
                            f"({targets.shape[0]}) are not index-aligned")

    if layer_spec.kind == "conv":
        fan_in = layer_spec.in_ch * layer_spec.kernel ** 2
        w_shape = (layer_spec.out_ch, layer_spec.in_ch, layer_spec.kernel, layer_spec.kernel)
    else:
        fan_in = layer_spec.in_ch
        w_shape = (layer_spec.out_ch, layer_spec.in_ch)
    bound = np.sqrt(6.0 / fan_in)
    w = Param(rng.stream("w").uniform(-bound, bound, w_shape).astype(np.float32), f"layer{l}.w")
    b = Param(np.zeros(layer_spec.out_ch, dtype=np.float32), f"layer{l}.b")
    fam = None
    if fam_on:
        fam = Param(np.eye(inputs.shape[1], dtype=np.float32), f"fam{l}.w")
    params = [w, b] + ([fam] if fam is not None else [])

    probe = _stage_forward(inputs[:1], layer_spec, w, b, fam, prev_activation, prev_pool)
    if probe.shape[1:] != targets.shape[1:]:
        raise ShapeMismatch(f"stage {l} predicts {probe.shape[1:]} but targets are "
                            f"{targets.shape[1:]}")

    # The per-sample loss sums over every output element, so the regression
    # curvature scales with the design energy (inputs after activation/pool,
    # counted once per kernel tap, plus the bias column per output position).
    # With adaption on, the map can re-expose activation-suppressed energy,
    # so bound with |inputs| instead of the activated inputs.
    kernel = layer_spec.kernel if layer_spec.kind == "conv" else 1
    positions_out = int(np.prod(probe.shape[2:])) if probe.ndim == 4 else 1
    design_energy = 0.0
    for lo in range(0, inputs.shape[0], hyper.batch_size):
        z = inputs[lo:lo + hyper.batch_size]
        if fam_on:
            z = np.abs(z)
            z = engine.nonparam(z, "none", prev_pool) if prev_pool is not None else z
        elif prev_activation != "none" or prev_pool is not None:
            z = engine.nonparam(z, prev_activation, prev_pool)
        design_energy += float(np.sum(z.astype(np.float64) ** 2))
    design_energy = design_energy * kernel ** 2 / inputs.shape[0] + positions_out
    lr = hyper.lr / max(1.0, design_energy)

    def full_loss():
        total = 0.0
        k = inputs.shape[0]
        for lo in range(0, k, hyper.batch_size):
            xb, tb = inputs[lo:lo + hyper.batch_size], targets[lo:lo + hyper.batch_size]
            pred = _stage_forward(xb, layer_spec, w, b, fam, prev_activation, prev_pool)
            total += engine.l2_loss(pred, tb) * xb.shape[0]
        return total / k

    curve = [full_loss()]
    k = inputs.shape[0]
    for epoch in range(1, hyper.epochs + 1):
        total, seen = 0.0, 0
        for idx in batch_indices(k, hyper.batch_size, rng.stream("batches", epoch), shuffle=True):
            tape = Tape()
            tape.watch(*params)
            pred = _stage_forward(inputs[idx], layer_spec, w, b, fam,
                                  prev_activation, prev_pool, tape)
            loss = engine.l2_loss(pred, targets[idx], tape)
            tape.backprop(1.0)
            engine.sgd_step(params, lr, hyper.momentum, hyper.weight_decay)
            total += loss * len(idx)
            seen += len(idx)
        curve.append(total / seen)
    return StageResult(l, w, b, fam, curve)


def _check_same_architecture(teachers):
    texts = {t.spec.canonical_text() for t in teachers}
    if len(texts) != 1:
        raise ValueError("teachers must share one architecture")


def run_layerwise(teachers, transfer: TransferSet, plan: AmalgamPlan,
                  student_spec: NetworkSpec, fam_on: bool, hyper: TrainHyper,
                  rng: Rng, ae_hyper: TrainHyper | None = None,
                  collect_batch: int = 128) -> LayerwiseResult:
    """Amalgamate features and learn the student layer by layer.

    For each hidden layer: bank the teachers' raw features over the transfer
    set, compress them per the plan, and train the student layer against the
    compressed stream. The classifier layer is left at its random
    initialization (joint fine-tuning trains it). Teachers are never
    modified.
    """
    student_spec.validate()
    _check_same_architecture(teachers)
    if ae_hyper is None:
        ae_hyper = hyper
    n_layers = len(student_spec.layers)
    hidden = tuple(l.out_ch for l in student_spec.layers[:-1])
    if tuple(plan.per_layer_out) != hidden:
        raise ValueError(f"plan widths {plan.per_layer_out} do not match student hidden "
                         f"widths {hidden}")
    if plan.mode == "pairwise" and len(teachers) != 2:
        raise ValueError("pairwise amalgamation needs exactly two teachers")

    stages = []
    autoencoders = {}
    prev_fa = None
    for l in range(1, n_layers):
        bank = collect_features(teachers, transfer.images, [l], collect_batch)
        feats = bank.features[l]
        rng_l = rng.stream("amalgamate", l)
        width = plan.per_layer_out[l - 1]
        if plan.mode == "ifa":
            aes, fa = amalgamate_ifa(feats, plan.merge_widths[l - 1], ae_hyper, rng_l)
        elif plan.mode == "dfa":
            aes, fa = amalgamate_dfa(feats, width, ae_hyper, rng_l)
        else:
            ae, fa = amalgamate_pair(feats[0], feats[1], width, ae_hyper, rng_l)
            aes = [ae]
        autoencoders[l] = aes
        del bank, feats

        layer_spec = student_spec.layers[l - 1]
        if l == 1:
            stage_in, prev_act, prev_pool = transfer.images, "none", None
        else:
            prev_spec = student_spec.layers[l - 2]
            stage_in, prev_act, prev_pool = prev_fa, prev_spec.activation, prev_spec.pool
        stage = layerwise_stage(l, stage_in, fa, layer_spec, prev_act, prev_pool,
                                fam_on and l >= 2, hyper, rng.stream("stage", l))
        stages.append(stage)
        prev_fa = fa

    student = build_network(student_spec, rng.stream("init"))
    for stage in stages:
        student.params[stage.layer_index - 1] = (stage.weight, stage.bias)
        if stage.fam is not None:
            student.fam[stage.layer_index] = stage.fam
    return LayerwiseResult(student, stages, autoencoders)


def concat_teacher_scores(teachers, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Raw concatenated teacher logits [K, sum M_i] in teacher order."""
    bank = collect_features(teachers, images, [], batch_size, with_scores=True)
    return np.concatenate(bank.scores, axis=1)


def _penultimate_energy(net: Network, images: np.ndarray) -> float:
    """Per-sample energy of the classifier's input activations (probe batch)."""
    n_layers = len(net.spec.layers)
    tapped, _ = forward_collect(net, images, taps=[n_layers - 1])
    raw = tapped[n_layers - 1]
    prev = net.spec.layers[n_layers - 2]
    if prev.activation != "none" or prev.pool is not None:
        raw = engine.nonparam(raw, prev.activation, prev.pool)
    flat = raw.reshape(raw.shape[0], -1).astype(np.float64)
    return float(np.mean(np.sum(flat * flat, axis=1)))


def _agreement(student_scores, target_scores, label_map):
    sm = merge_overlapping_at_test(student_scores, label_map).argmax(axis=1)
    tm = merge_overlapping_at_test(target_scores, label_map).argmax(axis=1)
    return float((sm == tm).mean())


def joint_finetune(student: Network, teachers, transfer: TransferSet,
                   label_map: LabelMap, hyper: TrainHyper, rng: Rng,
                   eval_set: LabeledSet | None = None, eval_parts=None):
    """End-to-end training of the assembled student against teacher score vectors.

    All student parameters are updated, including feature-adaption maps,
    which stay in the forward chain. Train rows log the half-squared-error
    loss and the argmax agreement with the merged teacher prediction; test
    rows (when an eval set is given) log whole/part accuracies.
    """
    if student.spec.num_classes != label_map.n_entries():
        raise ValueError(f"label map has {label_map.n_entries()} entries but student "
                         f"outputs {student.spec.num_classes}")
    _check_same_architecture(teachers)
    targets = concat_teacher_scores(teachers, transfer.images, hyper.batch_size)
    net = student.copy()
    log = TrainLog()
    params = net.parameters()
    k = transfer.images.shape[0]
    # Score regression has curvature set by the classifier's input energy;
    # normalize the step so the configured lr is scale-free (probe at init).
    lr = hyper.lr / max(1.0, _penultimate_energy(net, transfer.images[:min(256, k)]))
    for epoch in range(1, hyper.epochs + 1):
        total, agree, seen = 0.0, 0.0, 0
        for idx in batch_indices(k, hyper.batch_size, rng.stream("epoch", epoch), shuffle=True):
            xb, tb = transfer.images[idx], targets[idx]
            tape = Tape()
            tape.watch(*params)
            _, scores = forward_collect(net, xb, (), tape)
            loss = engine.l2_loss(scores, tb, tape)
            tape.backprop(1.0)
            engine.sgd_step(params, lr, hyper.momentum, hyper.weight_decay)
            total += loss * len(idx)
            agree += _agreement(scores, tb, label_map) * len(idx)
            seen += len(idx)
        log.add(epoch, "train", total / seen, agree / seen)
        if eval_set is not None:
            rep = evaluate(net, eval_set, label_map, eval_parts, hyper.batch_size)
            log.add(epoch, "test", 0.0, rep.accuracy_whole, rep.accuracy_per_part)
    return net, log


def fit_classifier_head(student: Network, teachers, transfer: TransferSet,
                        label_map: LabelMap, hyper: TrainHyper, rng: Rng):
    """Greedy final stage: regress only the classifier layer onto score vectors.

    Feature layers (and adaption maps) stay frozen at their layer-wise
    values, making this the "layer-wise only" model: every layer including
    the last was estimated greedily, with no end-to-end pass.
    """
    if student.spec.num_classes != label_map.n_entries():
        raise ValueError(f"label map has {label_map.n_entries()} entries but student "
                         f"outputs {student.spec.num_classes}")
    targets = concat_teacher_scores(teachers, transfer.images, hyper.batch_size)
    net = student.copy()
    log = TrainLog()
    head = list(net.params[-1])
    k = transfer.images.shape[0]
    lr = hyper.lr / max(1.0, _penultimate_energy(net, transfer.images[:min(256, k)]))
    for epoch in range(1, hyper.epochs + 1):
        total, seen = 0.0, 0
        for idx in batch_indices(k, hyper.batch_size, rng.stream("epoch", epoch), shuffle=True):
            tape = Tape()
            tape.watch(*head)
            _, scores = forward_collect(net, transfer.images[idx], (), tape)
            loss = engine.l2_loss(scores, targets[idx], tape)
            tape.backprop(1.0)
            engine.sgd_step(head, lr, hyper.momentum, hyper.weight_decay)
            total += loss * len(idx)
            seen += len(idx)
        log.add(epoch, "train", total / seen)
    return net, log


def kd_targets(raw_scores: np.ndarray, blocks, temperature: float) -> np.ndarray:
    """Per-teacher-block softened softmax of the concatenated raw logits."""
    out = np.empty_like(raw_scores)
    for lo, hi in blocks:
        out[:, lo:hi] = engine.softmax(raw_scores[:, lo:hi], temperature)
    return out


def blockwise_soft_xent(scores, targets, blocks, temperature: float,
                        tape: Tape | None = None) -> float:
    """Sum of per-block softened cross entropies (each T^2-scaled, batch-mean).

    Each teacher's block of the concatenated score vector is softened
    independently, so every block row is a proper distribution.
    """
    scores, targets = np.asarray(scores), np.asarray(targets)
    if scores.shape != targets.shape:
        raise ShapeMismatch(f"scores {scores.shape} vs targets {targets.shape}")
    t = scores.dtype.type(temperature)
    bsz = scores.shape[0]
    probs = np.empty_like(scores)
    loss = 0.0
    for lo, hi in blocks:
        z = scores[:, lo:hi] / t
        m = z.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
        logp = z - lse
        loss += float(-(temperature ** 2) * np.sum(targets[:, lo:hi] * logp) / bsz)
        probs[:, lo:hi] = np.exp(logp)
    if tape is not None:
        def backward(d_loss):
            return ((probs - targets) * (d_loss * temperature / bsz), None)
        tape.record(loss, (scores, targets), backward)
    return loss


def kd_loss(net: Network, images: np.ndarray, soft_targets: np.ndarray, blocks,
            temperature: float, batch_size: int = 128) -> float:
    """Mean blockwise distillation loss of a network over a stream (no training)."""
    k = images.shape[0]
    total = 0.0
    for lo in range(0, k, batch_size):
        xb = images[lo:lo + batch_size]
        _, scores = forward_collect(net, xb)
        total += blockwise_soft_xent(scores, soft_targets[lo:lo + batch_size],
                                     blocks, temperature) * xb.shape[0]
    return total / k


def kd_baseline(student_spec: NetworkSpec, teachers, transfer: TransferSet,
                label_map: LabelMap, temperature: float, hyper: TrainHyper,
                rng: Rng, eval_set: LabeledSet | None = None, eval_parts=None,
                raw_logit_l2: bool = False, init: Network | None = None):
    """Hinton-style distillation from scratch against concatenated teacher targets.

    The student is randomly initialized (no layer-wise phase, no feature
    adaption) and trained end to end on blockwise-softened teacher outputs;
    `raw_logit_l2` switches to a plain half-squared-error on raw logits.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if student_spec.num_classes != label_map.n_entries():
        raise ValueError(f"label map has {label_map.n_entries()} entries but student "
                         f"spec outputs {student_spec.num_classes}")
    _check_same_architecture(teachers)
    raw = concat_teacher_scores(teachers, transfer.images, hyper.batch_size)
    blocks = label_map.teacher_blocks()
    targets = raw if raw_logit_l2 else kd_targets(raw, blocks, temperature)

    net = init.copy() if init is not None else build_network(student_spec, rng.stream("kd-init"))
    log = TrainLog()
    params = net.parameters()
    k = transfer.images.shape[0]
    lr = hyper.lr
    if raw_logit_l2:
        lr /= max(1.0, _penultimate_energy(net, transfer.images[:min(256, k)]))
    for epoch in range(1, hyper.epochs + 1):
        total, agree, seen = 0.0, 0.0, 0
        for idx in batch_indices(k, hyper.batch_size, rng.stream("epoch", epoch), shuffle=True):
            xb = transfer.images[idx]
            tape = Tape()
            tape.watch(*params)
            _, scores = forward_collect(net, xb, (), tape)
            if raw_logit_l2:
                loss = engine.l2_loss(scores, targets[idx], tape)
            else:
                loss = blockwise_soft_xent(scores, targets[idx], blocks, temperature, tape)
            tape.backprop(1.0)
            engine.sgd_step(params, lr, hyper.momentum, hyper.weight_decay)
            total += loss * len(idx)
            agree += _agreement(scores, raw[idx], label_map) * len(idx)
            seen += len(idx)
        log.add(epoch, "train", total / seen, agree / seen)
        if eval_set is not None:
            rep = evaluate(net, eval_set, label_map, eval_parts, hyper.batch_size)
            log.add(epoch, "test", 0.0, rep.accuracy_whole, rep.accuracy_per_part)
    return net, log


def entry_scores(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Concatenated-entry scores of a student, teacher ensemble, or callable."""
    if isinstance(model, Network):
        return model.scores(images, batch_size)
    if callable(model) and not isinstance(model, (list, tuple)):
        return np.asarray(model(images))
    scores = [net.scores(images, batch_size) for net in model]
    return np.concatenate(scores, axis=1)


def ensemble_predict(teachers, images: np.ndarray, label_map: LabelMap,
                     batch_size: int = 256) -> np.ndarray:
    """Global class of the highest merged score; first index wins ties."""
    scores = entry_scores(list(teachers), images, batch_size)
    merged = merge_overlapping_at_test(scores, label_map)
    globals_ = np.asarray(label_map.global_classes)
    return globals_[merged.argmax(axis=1)]


def evaluate(model, test: LabeledSet, label_map: LabelMap, parts,
             batch_size: int = 256) -> EvalReport:
    """Whole-task accuracy plus per-part accuracies with part-restricted argmax.

    Whole accuracy merges overlapping entries and takes the global argmax.
    Part accuracy restricts both the samples (true class in the part) and
    the prediction (argmax over that part's entries only), matching how the
    individual teachers are evaluated on their own sub-tasks.
    """
    part_lists = list(getattr(parts, "parts", parts or ()))
    known = set(label_map.global_classes)
    bad = sorted(set(int(l) for l in test.labels) - known)
    if bad:
        raise ValueError(f"test labels {bad} unknown to the label map")

    scores = entry_scores(model, test.images, batch_size)
    merged = merge_overlapping_at_test(scores, label_map)
    globals_ = np.asarray(label_map.global_classes)
    pred = globals_[merged.argmax(axis=1)]
    whole = float((pred == test.labels).mean())

    per_part = []
    for part in part_lists:
        cols = [i for i, (_, _, g) in enumerate(label_map.entries) if g in set(part)]
        col_globals = np.asarray([label_map.entries[i][2] for i in cols])
        mask = np.isin(test.labels, list(part))
        if not mask.any():
            per_part.append(0.0)
            continue
        sub_pred = col_globals[scores[np.ix_(mask.nonzero()[0], cols)].argmax(axis=1)]
        per_part.append(float((sub_pred == test.labels[mask]).mean()))

    if isinstance(model, Network):
        pc = count_params(model)
    elif callable(model) and not isinstance(model, (list, tuple)):
        pc = 0
    else:
        pc = sum(count_params(net) for net in model)
    return EvalReport(whole, tuple(per_part), pc)

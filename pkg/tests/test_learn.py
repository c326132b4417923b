import numpy as np
import pytest

from kamkit.amalgam import LabelMap, default_plan
from kamkit.data import TransferSet, gen_synthetic, split_classes, ClassSplit, \
    make_transfer_set
from kamkit.engine import ShapeMismatch
from kamkit.learn import (blockwise_soft_xent, concat_teacher_scores, ensemble_predict,
                          evaluate, fit_classifier_head, joint_finetune, kd_baseline,
                          kd_loss, kd_targets, layerwise_stage, run_layerwise)
from kamkit.nets import (LayerSpec, build_network, conv_stack_spec, count_params,
                         make_student_spec, train_classifier)
from kamkit.records import TrainHyper
from kamkit.rng import Rng

STAGE_HYPER = TrainHyper(lr=0.5, epochs=60, batch_size=25)


def conv_layer(cin, cout, k=3, pad=1):
    return LayerSpec("conv", cin, cout, kernel=k, pad=pad, activation="relu", pool=(2, 2))


# ---------------------------------------------------------------------------
# layerwise_stage


def test_stage_zero_targets_realizable():
    rng = Rng(0)
    inputs = rng.stream("x").uniform(-1, 1, (50, 3, 8, 8)).astype(np.float32)
    targets = np.zeros((50, 4, 4, 4), dtype=np.float32)
    stage = layerwise_stage(2, inputs, targets, conv_layer(3, 4), "relu", (2, 2),
                            fam_on=False, hyper=TrainHyper(lr=0.8, epochs=300, batch_size=25),
                            rng=rng.stream("s"))
    assert stage.loss_curve[-1] < 1e-6


def test_stage_reaches_least_squares_optimum_for_realizable_targets():
    rng = Rng(1)
    inputs = rng.stream("x").uniform(-1, 1, (60, 3, 8, 8)).astype(np.float32)
    known_w = rng.stream("w").uniform(-0.5, 0.5, (4, 3, 3, 3)).astype(np.float32)
    known_b = rng.stream("b").uniform(-0.5, 0.5, (4,)).astype(np.float32)
    from kamkit import engine
    design = engine.nonparam(inputs, "relu", (2, 2))
    targets = engine.conv2d(design, known_w, known_b, pad=1)

    stage = layerwise_stage(2, inputs, targets, conv_layer(3, 4), "relu", (2, 2),
                            fam_on=False, hyper=TrainHyper(lr=0.5, epochs=200, batch_size=30),
                            rng=rng.stream("s"))

    # independent least-squares oracle over im2col patches (float64)
    pad = np.pad(design.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.stack([pad[:, :, i:i + 3, j:j + 3] for i in range(4) for j in range(4)], axis=1)
    a = cols.reshape(60 * 16, 27)
    a = np.concatenate([a, np.ones((a.shape[0], 1))], axis=1)
    y = targets.astype(np.float64).transpose(0, 2, 3, 1).reshape(-1, 4)
    _, residual, _, _ = np.linalg.lstsq(a, y, rcond=None)
    optimum = 0.5 * float(residual.sum() if residual.size else 0.0) / 60
    assert stage.loss_curve[-1] - optimum < 1e-3


def test_stage_relu_erasure_fam_recovers():
    rng = Rng(2)
    inputs = -rng.stream("x").uniform(0.2, 1.0, (40, 3, 8, 8)).astype(np.float32)
    known_w = rng.stream("w").uniform(-0.5, 0.5, (4, 3, 3, 3)).astype(np.float32)
    from kamkit import engine
    targets = engine.conv2d(engine.nonparam(-inputs, "none", (2, 2)), known_w,
                            np.zeros(4, dtype=np.float32), pad=1)

    off = layerwise_stage(2, inputs, targets, conv_layer(3, 4), "relu", (2, 2),
                          fam_on=False, hyper=STAGE_HYPER, rng=rng.stream("s"))
    on = layerwise_stage(2, inputs, targets, conv_layer(3, 4), "relu", (2, 2),
                         fam_on=True, hyper=STAGE_HYPER, rng=rng.stream("s"))

    # with relu killing every (negative) input, prediction is a constant map;
    # its loss floor is the variance of targets around the per-channel mean
    mean = targets.mean(axis=(0, 2, 3), keepdims=True)
    floor = 0.5 * float(((targets - mean) ** 2).sum()) / targets.shape[0]
    assert off.loss_curve[-1] > 0.99 * floor
    assert on.loss_curve[-1] < 0.5 * floor


def test_stage_fam_identity_epoch0_loss_bitwise_equal():
    rng = Rng(3)
    inputs = rng.stream("x").uniform(-1, 1, (30, 3, 8, 8)).astype(np.float32)
    targets = rng.stream("t").uniform(-1, 1, (30, 4, 4, 4)).astype(np.float32)
    kw = dict(layer_spec=conv_layer(3, 4), prev_activation="relu", prev_pool=(2, 2),
              hyper=TrainHyper(epochs=0), rng=rng.stream("s"))
    off = layerwise_stage(2, inputs, targets, fam_on=False, **kw)
    on = layerwise_stage(2, inputs, targets, fam_on=True, **kw)
    assert on.loss_curve[0] == off.loss_curve[0]
    assert on.fam is not None and np.array_equal(on.fam.value, np.eye(3, dtype=np.float32))


def test_stage_rejects_fam_on_first_layer():
    with pytest.raises(ValueError, match="stage 1"):
        layerwise_stage(1, np.zeros((4, 3, 8, 8), dtype=np.float32),
                        np.zeros((4, 4, 8, 8), dtype=np.float32),
                        conv_layer(3, 4), "none", None, fam_on=True,
                        hyper=TrainHyper(epochs=1), rng=Rng(0))


def test_stage_rejects_spatial_mismatch_with_both_shapes():
    with pytest.raises(ShapeMismatch, match=r"\(4, 4, 4\).*\(4, 6, 6\)"):
        layerwise_stage(2, np.zeros((4, 3, 8, 8), dtype=np.float32),
                        np.zeros((4, 4, 6, 6), dtype=np.float32),
                        conv_layer(3, 4), "relu", (2, 2), fam_on=False,
                        hyper=TrainHyper(epochs=1), rng=Rng(0))


def test_stage_fc_layer_with_flatten():
    rng = Rng(4)
    inputs = rng.stream("x").uniform(-1, 1, (30, 4, 4, 4)).astype(np.float32)
    targets = rng.stream("t").uniform(-1, 1, (30, 6)).astype(np.float32)
    spec = LayerSpec("fc", 4 * 2 * 2, 6, activation="relu", flatten_before=True)
    stage = layerwise_stage(3, inputs, targets, spec, "relu", (2, 2), fam_on=True,
                            hyper=TrainHyper(lr=0.5, epochs=30, batch_size=15),
                            rng=rng.stream("s"))
    assert stage.fam.value.shape == (4, 4)      # channel-square, pre-flatten
    assert stage.loss_curve[-1] < stage.loss_curve[0]


# ---------------------------------------------------------------------------
# pipeline fixtures (tiny but real)


@pytest.fixture(scope="module")
def tiny_pipeline():
    seed = 0
    train = gen_synthetic(4, 40, (3, 16, 16), 0.08, seed)
    test = gen_synthetic(4, 15, (3, 16, 16), 0.08, seed, first_sample_index=40)
    split = ClassSplit(((2, 0), (1, 3)))
    parts_train = split_classes(train, split)
    tspec = conv_stack_spec((3, 16, 16), (6, 8), 3, (16,), 2)
    rng = Rng(seed)
    teachers = []
    for i, part in enumerate(parts_train):
        net = build_network(tspec, rng.stream("teacher", i))
        net, _ = train_classifier(net, part, None, TrainHyper(epochs=8, batch_size=20),
                                  rng.stream("tt", i))
        teachers.append(net)
    transfer = make_transfer_set(parts_train, seed)
    label_map = LabelMap.from_teacher_classes(split.parts)
    student_spec = make_student_spec(tspec, 2, 0.65, label_map.n_entries())
    return dict(train=train, test=test, split=split, teachers=teachers,
                transfer=transfer, label_map=label_map, student_spec=student_spec,
                teacher_spec=tspec)


def _teacher_bytes(teachers):
    out = b""
    for t in teachers:
        for w, b in t.params:
            out += w.value.tobytes() + b.value.tobytes()
    return out


def test_run_layerwise_structure_and_determinism(tiny_pipeline):
    p = tiny_pipeline
    plan = default_plan(p["teacher_spec"], 2,
                        [l.out_ch for l in p["student_spec"].layers[:-1]], "dfa")
    hyper = TrainHyper(lr=0.5, epochs=3, batch_size=20)
    before = _teacher_bytes(p["teachers"])
    r1 = run_layerwise(p["teachers"], p["transfer"], plan, p["student_spec"], True,
                       hyper, Rng(7).stream("lw"), ae_hyper=hyper)
    r2 = run_layerwise(p["teachers"], p["transfer"], plan, p["student_spec"], True,
                       hyper, Rng(7).stream("lw"), ae_hyper=hyper)
    assert _teacher_bytes(p["teachers"]) == before          # teachers untouched
    n_hidden = len(p["student_spec"].layers) - 1
    assert len(r1.stages) == n_hidden
    assert sorted(r1.autoencoders) == list(range(1, n_hidden + 1))
    for (w1, b1), (w2, b2) in zip(r1.student.params, r2.student.params):
        assert w1.value.tobytes() == w2.value.tobytes()
        assert b1.value.tobytes() == b2.value.tobytes()
    for s in r1.stages:
        assert s.loss_curve[-1] < s.loss_curve[0]
    # FAM present for stages 2..L-1, absent for stage 1 and the classifier
    assert sorted(r1.student.fam) == list(range(2, n_hidden + 1))


def test_run_layerwise_plan_width_mismatch_rejected(tiny_pipeline):
    p = tiny_pipeline
    from kamkit.amalgam import AmalgamPlan
    bad = AmalgamPlan("dfa", tuple(l.out_ch + 1 for l in p["student_spec"].layers[:-1]))
    with pytest.raises(ValueError, match="plan widths"):
        run_layerwise(p["teachers"], p["transfer"], bad, p["student_spec"], True,
                      TrainHyper(epochs=1), Rng(0))


def test_joint_zero_epochs_bitwise_identity(tiny_pipeline):
    p = tiny_pipeline
    student = build_network(p["student_spec"], Rng(9))
    out, log = joint_finetune(student, p["teachers"], p["transfer"], p["label_map"],
                              TrainHyper(epochs=0), Rng(10))
    for (w0, b0), (w1, b1) in zip(student.params, out.params):
        assert w0.value.tobytes() == w1.value.tobytes()
        assert b0.value.tobytes() == b1.value.tobytes()
    assert log.records == []


def test_joint_rejects_entry_count_mismatch(tiny_pipeline):
    p = tiny_pipeline
    wrong = make_student_spec(p["teacher_spec"], 2, 0.65, 7)
    student = build_network(wrong, Rng(11))
    with pytest.raises(ValueError, match="entries"):
        joint_finetune(student, p["teachers"], p["transfer"], p["label_map"],
                       TrainHyper(epochs=1), Rng(12))


def test_joint_constant_teachers_convergence(tiny_pipeline):
    p = tiny_pipeline
    # teachers emitting constant scores: zero weights, fixed final bias
    constant = []
    for i, bias in enumerate(([1.5, -0.5], [0.25, 0.75])):
        net = build_network(p["teacher_spec"], Rng(20 + i))
        for w, b in net.params:
            w.value[...] = 0
            b.value[...] = 0
        net.params[-1][1].value[...] = np.asarray(bias, dtype=np.float32)
        constant.append(net)
    student = build_network(p["student_spec"], Rng(22))
    out, log = joint_finetune(student, constant, p["transfer"], p["label_map"],
                              TrainHyper(lr=0.3, epochs=40, batch_size=20), Rng(23))
    losses = [r.loss for r in log.rows("train")]
    assert losses[-1] < 0.01 * losses[0]


def test_joint_starts_bitwise_from_layerwise_output(tiny_pipeline):
    p = tiny_pipeline
    plan = default_plan(p["teacher_spec"], 2,
                        [l.out_ch for l in p["student_spec"].layers[:-1]], "dfa")
    hyper = TrainHyper(lr=0.5, epochs=2, batch_size=20)
    res = run_layerwise(p["teachers"], p["transfer"], plan, p["student_spec"], True,
                        hyper, Rng(13).stream("lw"), ae_hyper=hyper)
    out, _ = joint_finetune(res.student, p["teachers"], p["transfer"], p["label_map"],
                            TrainHyper(epochs=0), Rng(14))
    for (w0, b0), (w1, b1) in zip(res.student.params, out.params):
        assert w0.value.tobytes() == w1.value.tobytes()
    for stage in res.student.fam:
        assert res.student.fam[stage].value.tobytes() == out.fam[stage].value.tobytes()


def test_fit_classifier_head_trains_only_last_layer(tiny_pipeline):
    p = tiny_pipeline
    student = build_network(p["student_spec"], Rng(15))
    out, log = fit_classifier_head(student, p["teachers"], p["transfer"], p["label_map"],
                                   TrainHyper(lr=0.3, epochs=5, batch_size=20), Rng(16))
    for (w0, b0), (w1, b1) in zip(student.params[:-1], out.params[:-1]):
        assert w0.value.tobytes() == w1.value.tobytes()
    assert out.params[-1][0].value.tobytes() != student.params[-1][0].value.tobytes()
    assert log.rows("train")[-1].loss < log.rows("train")[0].loss


# ---------------------------------------------------------------------------
# distillation baseline


def test_kd_targets_blockwise_rows_sum_to_one(tiny_pipeline):
    p = tiny_pipeline
    raw = concat_teacher_scores(p["teachers"], p["transfer"].images[:40])
    blocks = p["label_map"].teacher_blocks()
    targets = kd_targets(raw, blocks, 4.0)
    for lo, hi in blocks:
        assert np.abs(targets[:, lo:hi].sum(axis=1) - 1).max() < 1e-6


def test_kd_self_distillation_floor(tiny_pipeline):
    # student == teacher copy: epoch-0 loss is the target entropy floor,
    # strictly below a random-init student of the same architecture
    p = tiny_pipeline
    teacher = p["teachers"][0]
    images = p["transfer"].images[:60]
    raw = teacher.scores(images)
    blocks = [(0, raw.shape[1])]
    targets = kd_targets(raw, blocks, 1.0)
    self_loss = kd_loss(teacher, images, targets, blocks, 1.0)
    rand_loss = kd_loss(build_network(teacher.spec, Rng(17)), images, targets, blocks, 1.0)
    entropy = float(-(targets * np.log(targets + 1e-12)).sum(axis=1).mean())
    assert abs(self_loss - entropy) < 1e-3
    assert self_loss < rand_loss


def test_kd_baseline_runs_and_logs(tiny_pipeline):
    p = tiny_pipeline
    net, log = kd_baseline(p["student_spec"], p["teachers"], p["transfer"],
                           p["label_map"], 4.0, TrainHyper(epochs=3, batch_size=20),
                           Rng(18), eval_set=p["test"], eval_parts=p["split"])
    assert len(log.rows("train")) == 3
    assert len(log.rows("test")) == 3
    assert count_params(net) == count_params(build_network(p["student_spec"], Rng(0)))


def test_kd_baseline_raw_logit_flag(tiny_pipeline):
    p = tiny_pipeline
    net, log = kd_baseline(p["student_spec"], p["teachers"], p["transfer"],
                           p["label_map"], 4.0,
                           TrainHyper(lr=0.3, epochs=3, batch_size=20),
                           Rng(19), raw_logit_l2=True)
    assert log.rows("train")[-1].loss < log.rows("train")[0].loss


def test_blockwise_xent_gradient():
    from conftest import max_rel_err, numerical_gradient
    from kamkit.engine import Tape
    rng = Rng(30)
    scores = rng.stream("s").uniform(-2, 2, (4, 6))
    from kamkit.engine import softmax
    targets = np.concatenate([softmax(rng.stream("t1").uniform(-1, 1, (4, 3))),
                              softmax(rng.stream("t2").uniform(-1, 1, (4, 3)))], axis=1)
    blocks = [(0, 3), (3, 6)]

    def loss(tape=None):
        return blockwise_soft_xent(scores, targets, blocks, 4.0, tape)

    tape = Tape()
    tape.watch_input(scores)
    loss(tape)
    tape.backprop()
    assert max_rel_err(tape.grad_wrt(scores), numerical_gradient(loss, [scores])[0]) < 1e-3


# ---------------------------------------------------------------------------
# ensemble + evaluation


def test_ensemble_predict_argmax_example():
    lm = LabelMap.from_teacher_classes([[0, 1], [2, 3]])

    class Stub:
        def __init__(self, rows):
            self.rows = np.asarray(rows, dtype=np.float32)

        def scores(self, x, batch_size=None):
            return np.tile(self.rows, (x.shape[0], 1))

    t1, t2 = Stub([[0.2, 0.8]]), Stub([[0.6, 0.4]])
    pred = ensemble_predict([t1, t2], np.zeros((3, 1, 2, 2), dtype=np.float32), lm)
    assert np.array_equal(pred, [1, 1, 1])


def test_ensemble_predict_tie_breaks_to_first():
    lm = LabelMap.from_teacher_classes([[5, 6], [7, 8]])

    class Stub:
        def scores(self, x, batch_size=None):
            return np.zeros((x.shape[0], 2), dtype=np.float32)

    pred = ensemble_predict([Stub(), Stub()], np.zeros((2, 1, 2, 2), dtype=np.float32), lm)
    assert np.array_equal(pred, [5, 5])


def test_evaluate_perfect_predictor(tiny_pipeline):
    p = tiny_pipeline
    lm = p["label_map"]
    globals_ = np.asarray(lm.global_classes)
    truth = p["test"].labels

    def oracle(images):
        # emit +10 on the first entry of the true class, zeros elsewhere
        n = images.shape[0]
        scores = np.zeros((n, lm.n_entries()), dtype=np.float32)
        for i, label in enumerate(truth[:n]):
            scores[i, lm.entry_columns(int(label))[0]] = 10.0
        return scores

    rep = evaluate(oracle, p["test"], lm, p["split"])
    assert rep.accuracy_whole == 1.0
    assert all(a == 1.0 for a in rep.accuracy_per_part)
    assert rep.param_count == 0


def test_evaluate_uniform_random_near_chance(tiny_pipeline):
    p = tiny_pipeline
    lm = p["label_map"]
    rng = Rng(31)

    def random_scores(images):
        return rng.stream("r", images.shape[0]).uniform(0, 1, (images.shape[0], lm.n_entries())).astype(np.float32)

    rep = evaluate(random_scores, p["test"], lm, p["split"])
    g = len(lm.global_classes)
    n = len(p["test"])
    sigma = np.sqrt((1 / g) * (1 - 1 / g) / n)
    assert abs(rep.accuracy_whole - 1 / g) < 5 * sigma


def test_evaluate_rejects_unknown_labels(tiny_pipeline):
    p = tiny_pipeline
    from kamkit.data import LabeledSet
    bad_labels = p["test"].labels.copy()
    bad_labels[0] = 99
    bad = LabeledSet(p["test"].images, bad_labels, tuple(p["test"].class_ids) + (99,))
    with pytest.raises(ValueError, match="unknown"):
        evaluate(p["teachers"], bad, p["label_map"], p["split"])


def test_evaluate_ensemble_param_count_is_sum(tiny_pipeline):
    p = tiny_pipeline
    rep = evaluate(p["teachers"], p["test"], p["label_map"], p["split"])
    assert rep.param_count == sum(count_params(t) for t in p["teachers"])


def test_evaluate_part_restriction(tiny_pipeline):
    # a predictor that always says global class 2 (first entry of part 1):
    # part-1 accuracy is the share of class-2 samples inside part 1
    p = tiny_pipeline
    lm = p["label_map"]

    def fixed(images):
        scores = np.zeros((images.shape[0], lm.n_entries()), dtype=np.float32)
        scores[:, lm.entry_columns(2)[0]] = 1.0
        return scores

    rep = evaluate(fixed, p["test"], lm, p["split"])
    part1 = p["split"].parts[0]
    mask = np.isin(p["test"].labels, part1)
    expected = float((p["test"].labels[mask] == 2).mean())
    assert abs(rep.accuracy_per_part[0] - expected) < 1e-9

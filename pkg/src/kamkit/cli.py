"""Command-line pipeline: train-teachers, amalgamate, learn, eval, ablate.

Stages communicate through checkpoints and CSV metrics under the output
directory, so ablations can reuse trained artifacts. Exit codes: 0 success,
2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, learn
from .amalgam import LabelMap, default_plan
from .checkpoint import CheckpointError, load_network, read_container, save_network, \
    write_container
from .config import Config, ConfigError, load_config
from .data import ClassSplit, IdxFormatError, LabeledSet, equal_split, gen_synthetic, \
    load_idx, make_transfer_set, split_classes
from .engine import NumericError
from .nets import SpecError, build_network, conv_stack_spec, count_params, \
    make_student_spec, train_classifier
from .records import TrainHyper
from .rng import Rng


def _hyper(cfg: Config, lr_key: str, epochs_key: str) -> TrainHyper:
    return TrainHyper(cfg[lr_key], cfg["train.momentum"], cfg["train.weight_decay"],
                      cfg[epochs_key], cfg["train.batch_size"])


def build_dataset(cfg: Config):
    """(train, test) LabeledSets per the dataset.* keys."""
    kind = cfg["dataset.kind"]
    if kind == "synthetic":
        n, per, test_per = cfg["dataset.classes"], cfg["dataset.per_class"], cfg["dataset.test_per_class"]
        shape, sigma, seed = cfg["dataset.image"], cfg["dataset.noise_sigma"], cfg["seed"]
        train = gen_synthetic(n, per, shape, sigma, seed)
        test = gen_synthetic(n, test_per, shape, sigma, seed, first_sample_index=per)
        return train, test
    if kind == "idx":
        train = load_idx(cfg["dataset.idx_images"], cfg["dataset.idx_labels"])
        test = load_idx(cfg["dataset.idx_test_images"], cfg["dataset.idx_test_labels"])
        return train, test
    raise ConfigError(f"unknown dataset.kind {kind!r}")


def build_split(cfg: Config, class_ids) -> ClassSplit:
    n = cfg["teachers.count"]
    overlap = cfg["teachers.overlap"]
    if overlap:
        missing = [c for c in overlap if c not in class_ids]
        if missing:
            raise ConfigError(f"teachers.overlap classes {missing} not in the dataset")
        rest = [c for c in class_ids if c not in overlap]
        base = equal_split(rest, n, cfg["seed"])
        return ClassSplit(tuple(tuple(p) + tuple(overlap) for p in base.parts),
                          overlap_allowed=True)
    return equal_split(class_ids, n, cfg["seed"])


def teacher_spec(cfg: Config, input_shape, num_classes: int):
    return conv_stack_spec(input_shape, cfg["net.conv_channels"], cfg["net.kernel"],
                           cfg["net.hidden"], num_classes)


def experiment_id(cfg: Config) -> str:
    return (f"{cfg['dataset.kind']}-c{cfg['dataset.classes']}-n{cfg['teachers.count']}"
            f"-{cfg['amalgam.mode']}-fam{int(cfg['fam.enabled'])}")


# ---------------------------------------------------------------------------
# metrics CSV (schema: one row per experiment/method/seed/epoch/split)


def metrics_header(n_parts: int, status: bool = False):
    cols = ["experiment", "method", "seed", "epoch", "split", "loss", "accuracy_whole"]
    cols += [f"accuracy_part{i + 1}" for i in range(n_parts)]
    cols += ["param_count", "wall_seconds"]
    if status:
        cols.append("status")
    return cols


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_metrics(path, rows, n_parts: int, status: bool = False):
    cols = metrics_header(n_parts, status)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row.get(c)) for c in cols) + "\n")


def _row(cfg, method, seed, epoch, split, loss=None, whole=None, parts=(),
         param_count=None, wall=None, status=None, experiment=None):
    row = {"experiment": experiment or experiment_id(cfg), "method": method,
           "seed": seed, "epoch": epoch, "split": split, "loss": loss,
           "accuracy_whole": whole, "param_count": param_count,
           "wall_seconds": wall, "status": status}
    for i, acc in enumerate(parts):
        row[f"accuracy_part{i + 1}"] = acc
    return row


# ---------------------------------------------------------------------------
# commands


def cmd_train_teachers(cfg: Config, args) -> int:
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    train, test = build_dataset(cfg)
    split = build_split(cfg, train.class_ids)
    parts_train = split_classes(train, split)
    parts_test = split_classes(test, split)
    seed = cfg["seed"]
    rng = Rng(seed)
    rows = []
    for i, part in enumerate(parts_train):
        spec = teacher_spec(cfg, train.images.shape[1:], len(part.class_ids))
        net = build_network(spec, rng.stream("teacher", i))
        net, log = train_classifier(net, part, parts_test[i],
                                    _hyper(cfg, "train.lr", "train.epochs_teacher"),
                                    rng.stream("teacher-train", i))
        save_network(net, out / f"teacher{i}.kacp")
        for r in log.records:
            rows.append(_row(cfg, f"teacher{i}", seed, r.epoch, r.split, r.loss,
                             r.accuracy_whole, param_count=count_params(net)))
        print(f"teacher{i}: classes {part.class_ids} -> {out / f'teacher{i}.kacp'}")
    write_metrics(out / "teachers.csv", rows, cfg["teachers.count"])
    return 0


def _teacher_paths(cfg: Config, args):
    if getattr(args, "teachers", None):
        return [Path(p) for p in args.teachers]
    out = Path(cfg["out.dir"])
    return [out / f"teacher{i}.kacp" for i in range(cfg["teachers.count"])]


def _load_teachers(cfg: Config, args):
    nets = [load_network(p) for p in _teacher_paths(cfg, args)]
    texts = {n.spec.canonical_text() for n in nets}
    if len(texts) != 1:
        raise SpecError("teacher checkpoints do not share one architecture")
    return nets


def _pipeline_context(cfg: Config, args):
    """Everything the amalgamation stages need, rebuilt deterministically."""
    train, test = build_dataset(cfg)
    split = build_split(cfg, train.class_ids)
    parts_train = split_classes(train, split)
    teachers = _load_teachers(cfg, args)
    transfer = make_transfer_set(parts_train, cfg["seed"])
    label_map = LabelMap.from_teacher_classes(split.parts)
    student = make_student_spec(teachers[0].spec, len(teachers),
                                cfg["net.width_ratio"], label_map.n_entries())
    plan = default_plan(teachers[0].spec, len(teachers),
                        [l.out_ch for l in student.layers[:-1]],
                        cfg["amalgam.mode"], cfg["amalgam.ratio"])
    return train, test, split, teachers, transfer, label_map, student, plan


def _save_autoencoders(path, autoencoders, mode: str):
    lines = [f"ae-bank 1 mode {mode}"]
    tensors = []
    for layer in sorted(autoencoders):
        aes = autoencoders[layer]
        for step, ae in enumerate(aes):
            lines.append(f"layer {layer} step {step} cin {ae.cin} cout {ae.cout}")
            prefix = f"ae.layer{layer}" if len(aes) == 1 else f"ae.layer{layer}.step{step}"
            tensors.append((f"{prefix}.enc", ae.enc.value))
            tensors.append((f"{prefix}.dec", ae.dec.value))
    write_container(path, "\n".join(lines) + "\n", tensors)


def cmd_amalgamate(cfg: Config, args) -> int:
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    _, _, _, teachers, transfer, label_map, student_spec, plan = _pipeline_context(cfg, args)
    result = learn.run_layerwise(
        teachers, transfer, plan, student_spec, cfg["fam.enabled"],
        _hyper(cfg, "train.lr_layerwise", "train.epochs_layerwise"),
        Rng(cfg["seed"]).stream("layerwise"),
        ae_hyper=_hyper(cfg, "train.lr_ae", "train.epochs_ae"))
    save_network(result.student, out / "student_layerwise.kacp")
    _save_autoencoders(out / "autoencoders.kacp", result.autoencoders, plan.mode)
    rows = []
    for stage in result.stages:
        for epoch, loss in enumerate(stage.loss_curve):
            rows.append(_row(cfg, "layerwise", cfg["seed"], epoch,
                             f"stage{stage.layer_index}", loss))
    write_metrics(out / "layerwise.csv", rows, cfg["teachers.count"])
    print(f"layer-wise student -> {out / 'student_layerwise.kacp'}")
    return 0


def cmd_learn(cfg: Config, args) -> int:
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    _, test, split, teachers, transfer, label_map, student_spec, _ = _pipeline_context(cfg, args)
    student_path = args.student or (out / "student_layerwise.kacp")
    student = load_network(student_path)
    seed = cfg["seed"]
    rng = Rng(seed)
    hyper = _hyper(cfg, "train.lr_joint", "train.epochs_joint")

    joint, jlog = learn.joint_finetune(student, teachers, transfer, label_map, hyper,
                                       rng.stream("joint"), eval_set=test, eval_parts=split)
    save_network(joint, out / "student_joint.kacp")
    rows = [_row(cfg, "joint", seed, r.epoch, r.split, r.loss, r.accuracy_whole,
                 r.accuracy_parts, count_params(joint)) for r in jlog.records]
    write_metrics(out / "learn.csv", rows, cfg["teachers.count"])

    head, hlog = learn.fit_classifier_head(student, teachers, transfer, label_map,
                                           hyper, rng.stream("head"))
    save_network(head, out / "student_layerwise_fitted.kacp")
    rows = [_row(cfg, "layerwise", seed, r.epoch, r.split, r.loss, r.accuracy_whole,
                 r.accuracy_parts, count_params(head)) for r in hlog.records]
    write_metrics(out / "head.csv", rows, cfg["teachers.count"])

    base, blog = learn.kd_baseline(student_spec, teachers, transfer, label_map,
                                   cfg["kd.temperature"],
                                   _hyper(cfg, "train.lr", "train.epochs_joint"),
                                   rng.stream("kd"), eval_set=test, eval_parts=split)
    save_network(base, out / "student_baseline.kacp")
    rows = [_row(cfg, "baseline", seed, r.epoch, r.split, r.loss, r.accuracy_whole,
                 r.accuracy_parts, count_params(base)) for r in blog.records]
    write_metrics(out / "baseline.csv", rows, cfg["teachers.count"])
    print(f"joint student -> {out / 'student_joint.kacp'}")
    return 0


def cmd_eval(cfg: Config, args) -> int:
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    _, test, split, teachers, _, label_map, _, _ = _pipeline_context(cfg, args)
    seed = cfg["seed"]

    def pick(flag, default_name, fallback=None):
        if flag:
            return Path(flag)
        p = out / default_name
        if not p.exists() and fallback is not None and (out / fallback).exists():
            return out / fallback
        return p

    models = [("ensemble", teachers)]
    for method, path in (("baseline", pick(args.baseline, "student_baseline.kacp")),
                         ("layerwise", pick(args.layerwise, "student_layerwise_fitted.kacp",
                                            "student_layerwise.kacp")),
                         ("joint", pick(args.joint, "student_joint.kacp"))):
        models.append((method, load_network(path)))

    rows = []
    for method, model in models:
        rep = learn.evaluate(model, test, label_map, split,
                             batch_size=cfg["train.batch_size"])
        rows.append(_row(cfg, method, seed, cfg["train.epochs_joint"], "test",
                         None, rep.accuracy_whole, rep.accuracy_per_part,
                         rep.param_count))
        parts = " ".join(f"part{i + 1}={a:.4f}" for i, a in enumerate(rep.accuracy_per_part))
        print(f"{method:10s} whole={rep.accuracy_whole:.4f} {parts} params={rep.param_count}")
    write_metrics(out / "eval.csv", rows, cfg["teachers.count"])
    return 0


def _ablate_cell(cfg: Config, cell_cfg: Config, out: Path, seed: int, count: int,
                 mode: str, fam: bool, cache: dict):
    """One factorial cell; returns eval rows for ensemble/baseline/layerwise/joint."""
    key = (seed, count)
    if key not in cache:
        train, test = build_dataset(cell_cfg)
        split = build_split(cell_cfg, train.class_ids)
        parts_train = split_classes(train, split)
        parts_test = split_classes(test, split)
        rng = Rng(seed)
        teachers = []
        for i, part in enumerate(parts_train):
            spec = teacher_spec(cell_cfg, train.images.shape[1:], len(part.class_ids))
            net = build_network(spec, rng.stream("teacher", i))
            net, _ = train_classifier(net, part, parts_test[i],
                                      _hyper(cell_cfg, "train.lr", "train.epochs_teacher"),
                                      rng.stream("teacher-train", i))
            teachers.append(net)
        transfer = make_transfer_set(parts_train, seed)
        label_map = LabelMap.from_teacher_classes(split.parts)
        student_spec = make_student_spec(teachers[0].spec, count,
                                         cell_cfg["net.width_ratio"], label_map.n_entries())
        base, _ = learn.kd_baseline(student_spec, teachers, transfer, label_map,
                                    cell_cfg["kd.temperature"],
                                    _hyper(cell_cfg, "train.lr", "train.epochs_joint"),
                                    rng.stream("kd"))
        cache[key] = (test, split, teachers, transfer, label_map, student_spec, base)
    test, split, teachers, transfer, label_map, student_spec, base = cache[key]

    plan = default_plan(teachers[0].spec, count,
                        [l.out_ch for l in student_spec.layers[:-1]],
                        mode, cell_cfg["amalgam.ratio"])
    rng = Rng(seed)
    result = learn.run_layerwise(
        teachers, transfer, plan, student_spec, fam,
        _hyper(cell_cfg, "train.lr_layerwise", "train.epochs_layerwise"),
        rng.stream("layerwise", mode, int(fam)),
        ae_hyper=_hyper(cell_cfg, "train.lr_ae", "train.epochs_ae"))
    joint_hyper = _hyper(cell_cfg, "train.lr_joint", "train.epochs_joint")
    head, _ = learn.fit_classifier_head(result.student, teachers, transfer, label_map,
                                        joint_hyper, rng.stream("head", mode, int(fam)))
    joint, _ = learn.joint_finetune(result.student, teachers, transfer, label_map,
                                    joint_hyper, rng.stream("joint", mode, int(fam)))
    out_rows = []
    for method, model in (("ensemble", teachers), ("baseline", base),
                          ("layerwise", head), ("joint", joint)):
        rep = learn.evaluate(model, test, label_map, split)
        out_rows.append((method, rep))
    return out_rows


def cmd_ablate(cfg: Config, args) -> int:
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg["ablate.seeds"]
    counts = cfg["ablate.teacher_counts"]
    per_teacher = cfg["ablate.classes_per_teacher"]
    rows = []
    max_parts = max(counts)
    for seed in seeds:
        for count in counts:
            # keep the student/ensemble size ratio constant across teacher counts
            ratio = cfg["net.width_ratio"] * math.sqrt(2.0 / count)
            cell_cfg = cfg.with_overrides(**{
                "seed": seed, "teachers.count": count,
                "dataset.classes": per_teacher * count,
                "net.width_ratio": ratio})
            cache = {}
            for mode in ("dfa", "ifa"):
                for fam in (True, False):
                    exp = (f"ablate-c{per_teacher * count}-n{count}-{mode}-fam{int(fam)}")
                    t0 = time.time()
                    try:
                        cell_rows = _ablate_cell(cfg, cell_cfg, out, seed, count, mode,
                                                 fam, cache)
                        wall = time.time() - t0
                        for method, rep in cell_rows:
                            rows.append(_row(cell_cfg, method, seed,
                                             cell_cfg["train.epochs_joint"], "test",
                                             None, rep.accuracy_whole,
                                             rep.accuracy_per_part, rep.param_count,
                                             wall=wall, status="ok", experiment=exp))
                        print(f"{exp} seed={seed}: ok ({wall:.0f}s)")
                    except Exception as e:  # record the failing cell, keep going
                        rows.append(_row(cell_cfg, "joint", seed,
                                         cell_cfg["train.epochs_joint"], "test",
                                         status="failed", experiment=exp))
                        print(f"{exp} seed={seed}: failed ({e})", file=sys.stderr)
    write_metrics(out / "ablate.csv", rows, max_parts, status=True)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (key = value lines)")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", help="override output directory")

    parser = argparse.ArgumentParser(
        prog="kamkit",
        description="Multi-teacher knowledge amalgamation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-teachers", parents=[common],
                   help="train one teacher per class subset")
    p = sub.add_parser("amalgamate", parents=[common],
                       help="feature amalgamation + layer-wise student")
    p.add_argument("--teachers", nargs="*", help="teacher checkpoint paths")
    p = sub.add_parser("learn", parents=[common],
                       help="joint fine-tuning (plus baseline and head fit)")
    p.add_argument("--teachers", nargs="*")
    p.add_argument("--student", help="layer-wise student checkpoint")
    p = sub.add_parser("eval", parents=[common],
                       help="evaluate ensemble/baseline/layerwise/joint")
    p.add_argument("--teachers", nargs="*")
    p.add_argument("--layerwise")
    p.add_argument("--joint")
    p.add_argument("--baseline")
    sub.add_parser("ablate", parents=[common], help="factorial ablation suite")
    return parser


COMMANDS = {
    "train-teachers": cmd_train_teachers,
    "amalgamate": cmd_amalgamate,
    "learn": cmd_learn,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else Config()
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out.dir"] = args.out
        cfg = cfg.with_overrides(**overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (SpecError, ValueError) as e:
        if isinstance(e, (NumericError,)):
            print(f"numeric failure: {e}", file=sys.stderr)
            return 4
        if isinstance(e, (CheckpointError, IdxFormatError)):
            print(f"file error: {e}", file=sys.stderr)
            return 3
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

import time, numpy as np
from kamkit.rng import Rng
from kamkit.data import gen_synthetic, equal_split, split_classes, make_transfer_set
from kamkit.nets import conv_stack_spec, make_student_spec, build_network, train_classifier, count_params
from kamkit.records import TrainHyper
from kamkit.amalgam import default_plan, LabelMap
from kamkit.learn import run_layerwise, joint_finetune, kd_baseline, evaluate, fit_classifier_head

def phase(label, t0):
    print(f"[{label}] t={time.time()-t0:.0f}s", flush=True)

t0 = time.time()
seed = 0
train = gen_synthetic(8, 300, (3, 32, 32), 0.08, seed)
test = gen_synthetic(8, 100, (3, 32, 32), 0.08, seed, first_sample_index=300)
split = equal_split(range(8), 2, seed)
parts_train = split_classes(train, split)
parts_test = split_classes(test, split)
phase("data", t0)

tspec = conv_stack_spec((3, 32, 32), (16, 32, 48), 3, (128,), 4)
rng = Rng(seed)
teachers = []
for i, part in enumerate(parts_train):
    net = build_network(tspec, rng.stream("teacher", i))
    net, log = train_classifier(net, part, parts_test[i], TrainHyper(epochs=15, batch_size=64), rng.stream("teacher-train", i))
    print(f"  teacher{i} val acc {log.rows('val')[-1].accuracy_whole:.3f}")
    teachers.append(net)
phase("teachers(15ep)", t0)

transfer = make_transfer_set(parts_train, seed)
label_map = LabelMap.from_teacher_classes(split.parts)
rep = evaluate(teachers, test, label_map, split)
print(f"  ensemble whole {rep.accuracy_whole:.3f} parts {rep.accuracy_per_part} params {rep.param_count}")

sspec = make_student_spec(tspec, 2, 0.65, label_map.n_entries())
plan = default_plan(tspec, 2, [l.out_ch for l in sspec.layers[:-1]], "dfa")
res = run_layerwise(teachers, transfer, plan, sspec, True,
                    TrainHyper(lr=0.5, epochs=10, batch_size=64), rng.stream("lw"),
                    ae_hyper=TrainHyper(lr=0.5, epochs=10, batch_size=64))
print("  stages:", [f"{s.loss_curve[0]:.4g}->{s.loss_curve[-1]:.4g}" for s in res.stages])
phase("layerwise(10ep)", t0)

head, _ = fit_classifier_head(res.student, teachers, transfer, label_map,
                              TrainHyper(lr=0.3, epochs=10, batch_size=64), rng.stream("head"))
rep = evaluate(head, test, label_map, split)
print(f"  layerwise+head whole {rep.accuracy_whole:.3f} parts {rep.accuracy_per_part}")
phase("head(10ep)", t0)

joint, jlog = joint_finetune(res.student, teachers, transfer, label_map,
                             TrainHyper(lr=0.3, epochs=20, batch_size=64), rng.stream("joint"),
                             eval_set=test, eval_parts=split)
te = [r.accuracy_whole for r in jlog.rows("test")]
print(f"  joint accs: {[f'{a:.3f}' for a in te]}")
rep = evaluate(joint, test, label_map, split)
print(f"  joint whole {rep.accuracy_whole:.3f} parts {rep.accuracy_per_part} params {rep.param_count}")
phase("joint(20ep)", t0)

base, blog = kd_baseline(sspec, teachers, transfer, label_map, 4.0,
                         TrainHyper(lr=0.01, epochs=20, batch_size=64), rng.stream("kd"),
                         eval_set=test, eval_parts=split)
rep = evaluate(base, test, label_map, split)
print(f"  baseline whole {rep.accuracy_whole:.3f} parts {rep.accuracy_per_part}")
phase("baseline(20ep)", t0)

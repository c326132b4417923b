import time, numpy as np
from kamkit.rng import Rng
from kamkit.data import gen_synthetic, equal_split, split_classes, make_transfer_set
from kamkit.nets import conv_stack_spec, make_student_spec, build_network, train_classifier
from kamkit.records import TrainHyper
from kamkit.amalgam import LabelMap
from kamkit.learn import kd_baseline, evaluate

t0 = time.time()
seed = 0
train = gen_synthetic(8, 300, (3, 32, 32), 0.08, seed)
test = gen_synthetic(8, 50, (3, 32, 32), 0.08, seed, first_sample_index=300)
split = equal_split(range(8), 2, seed)
parts_train = split_classes(train, split)

tspec = conv_stack_spec((3, 32, 32), (16, 32, 48), 3, (128,), 4)
rng = Rng(seed)
teachers = []
for i, part in enumerate(parts_train):
    net = build_network(tspec, rng.stream("teacher", i))
    net, _ = train_classifier(net, part, None, TrainHyper(epochs=10, batch_size=64), rng.stream("teacher-train", i))
    teachers.append(net)
print(f"teachers t={time.time()-t0:.0f}s", flush=True)

transfer = make_transfer_set(parts_train, seed)
label_map = LabelMap.from_teacher_classes(split.parts)
sspec = make_student_spec(tspec, 2, 0.65, label_map.n_entries())

for T, lr in [(4.0, 0.01), (4.0, 0.05), (4.0, 0.002), (1.0, 0.01)]:
    base, blog = kd_baseline(sspec, teachers, transfer, label_map, T,
                             TrainHyper(lr=lr, epochs=30, batch_size=64), rng.stream("kd", int(T), int(lr*1000)),
                             eval_set=test, eval_parts=split)
    te = [r.accuracy_whole for r in blog.rows("test")]
    ag = [r.accuracy_whole for r in blog.rows("train")]
    print(f"T={T} lr={lr}: agree {ag[0]:.2f}->{ag[-1]:.2f} test {[f'{a:.2f}' for a in te[::5]]} final {te[-1]:.3f} t={time.time()-t0:.0f}s", flush=True)

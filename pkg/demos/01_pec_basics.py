"""PEC on a small Gaussian stream: one class at a time, scores are imitation errors.

Run: python demos/01_pec_basics.py
"""

import numpy as np

from pec_cil import data, pec

# Ten Gaussian classes in 20 dimensions, shown as a stream of ten one-class tasks.
train, test = data.synthetic_gaussians(10, 20, mean_scale=3.0, n_per_class=1000, seed=0,
                                       n_test_per_class=500)
stream = data.split_tasks(train, 10, 1, seed=2)

# A frozen random teacher and one small student per class.
arch = pec.PECArch("mlp", (20,), student_width=10, teacher_width=500, output_dim=32)
clf = pec.build_pec(arch, num_classes=10, teacher_seed=0, student_seed=1)
print(f"{clf.param_count():,} trainable parameters, {clf.mac_count():,} MACs per prediction")

# Each student only ever sees its own class, in a single pass.
for task in stream:
    for c in task.classes:
        clf.train_class(c, task.class_data(c), budget=pec.TrainBudget(lr=0.001))

# The score of class c is the student's squared error against the teacher; lowest wins.
scores = clf.scores(test.x[:5])
print("scores of five test samples:\n", np.round(scores, 4))
print("predicted", scores.argmin(axis=1), "true", test.y[:5])

acc = np.mean(clf.predict(test.x) == test.y)
print(f"final average accuracy: {100 * acc:.2f}%")

# Training class c touches student c only, so the task split does not matter.
clf2 = pec.build_pec(arch, 10, 0, 1)
for task in data.split_tasks(train, 5, 2, seed=2):
    for c in task.classes:
        clf2.train_class(c, task.class_data(c), budget=pec.TrainBudget(lr=0.001))
print("same predictions with 5 tasks of 2 classes:",
      bool(np.array_equal(clf.predict(test.x), clf2.predict(test.x))))

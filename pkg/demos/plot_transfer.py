"""
Reusing a crack detector for a three-class task
===============================================

Pretrain on crack/negative images, replace the classifier head with a
three-way crack/joint/negative layer and fine-tune. The same budget is
then spent training from scratch for comparison.
"""

from crackcnn import TrainConfig, build_network, make_rng, train
from crackcnn.data import synthetic_dataset
from crackcnn.training import steps_to_accuracy, transfer_train

SIZE = 64

###############################################################################
# Pretraining on plenty of two-class data.

source_train = synthetic_dataset("crack2", 100, seed=1, size=SIZE)
source_test = synthetic_dataset("crack2", 10, seed=2, size=SIZE)
base, _ = train(
    build_network(2, rng=make_rng(3), input_shape=(3, SIZE, SIZE)),
    source_train,
    source_test,
    TrainConfig(steps=300, eval_interval=100, seed=3),
)
print("pretrained for", base.step, "steps")

###############################################################################
# The target task has only 30 images per class. ``transfer_train`` keeps the
# convolution and FC1 weights and starts a fresh 3-way head.

target_train = synthetic_dataset("crackjoint3", 30, seed=4, size=SIZE)
target_test = synthetic_dataset("crackjoint3", 10, seed=5, size=SIZE)
cfg = TrainConfig(steps=200, eval_interval=10, seed=0)

tuned, tf_metrics = transfer_train(base, 3, target_train, target_test, cfg)
_, scratch_metrics = train(
    build_network(3, rng=make_rng(0), input_shape=(3, SIZE, SIZE)), target_train, target_test, cfg
)

###############################################################################
# Steps until the training accuracy first reaches 0.97, and the accuracy
# curves side by side.

print("transfer:", steps_to_accuracy(tf_metrics, 0.97), "steps")
print("scratch: ", steps_to_accuracy(scratch_metrics, 0.97), "steps")
for tf_row, sc_row in zip(tf_metrics, scratch_metrics):
    print(f"step {tf_row.step:>4}  transfer {tf_row.train_accuracy:.3f}  scratch {sc_row.train_accuracy:.3f}")

###############################################################################
# The new checkpoint remembers where it came from.

print(tuned.class_labels, tuned.info)

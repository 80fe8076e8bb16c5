"""
Training on synthetic cracks
============================

Generate a small crack/negative dataset in memory, train for a few hundred
Adam steps and watch the held-out accuracy climb.

Full-size images cost about a second and a half per batch of 16 on one
core. Set ``SIZE = 228`` and ``STEPS = 500`` for the full experiment; the
defaults below finish in well under a minute.
"""

from crackcnn import TrainConfig, build_network, make_rng, train
from crackcnn.data import split_dataset, synthetic_dataset

SIZE = 64
STEPS = 150

###############################################################################
# 60 images per class, a fifth of each class held out for testing.

dataset = synthetic_dataset("crack2", 60, seed=0, size=SIZE)
train_set, test_set = split_dataset(dataset, 0.2, seed=0)
print(len(train_set), "train images,", len(test_set), "test images")
print("classes:", train_set.class_labels)

###############################################################################
# A smaller input only shrinks FC1; every other layer is unchanged.

net = build_network(2, rng=make_rng(0), input_shape=(3, SIZE, SIZE))
cfg = TrainConfig(steps=STEPS, batch_size=16, eval_interval=25, seed=0)
checkpoint, metrics = train(net, train_set, test_set, cfg)

for row in metrics:
    print(f"step {row.step:>4}  train loss {row.train_loss:.4f}  "
          f"train acc {row.train_accuracy:.3f}  test acc {row.test_accuracy:.3f}")

###############################################################################
# The loss of a single prediction is minus the log of the probability given
# to the true class, so exp(-loss) reads directly as a confidence.

import math

from crackcnn.training import cross_entropy_loss

probs = checkpoint.network.predict_proba(test_set.images[:1])
loss, _ = cross_entropy_loss(probs, test_set.labels[:1])
print("confidence in the true class:", round(float(probs[0, test_set.labels[0]]), 6))
print("exp(-loss):                  ", round(math.exp(-loss), 6))

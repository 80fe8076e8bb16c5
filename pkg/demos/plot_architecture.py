"""
The network, layer by layer
===========================

Build the default two-class model and look at what every stage does to
the shape of a single 228x228 RGB image.
"""

import numpy as np

from crackcnn import build_network, make_rng
from crackcnn.network import format_param_table

net = build_network(num_classes=2, rng=make_rng(0))

###############################################################################
# The parameter table. Almost all weights live in FC1, which connects the
# 57x57x32 pooled volume to 128 hidden units.

print(format_param_table(net))

###############################################################################
# Follow one image through the forward pass. ``trace`` collects the shape
# after every named stage.

image = make_rng(1).random((1, 3, 228, 228), dtype=np.float32)
trace = []
logits, probs = net.forward(image, trace=trace)
for name, shape in trace:
    print(f"{name:<8} {shape}")

###############################################################################
# An untrained network has no opinion yet, so both probabilities sit close
# to one half.

print("probabilities:", np.round(probs[0], 4))

###############################################################################
# Swapping the classifier for a three-way crack/joint/none task only changes
# the last layer.

net3 = build_network(num_classes=3, rng=make_rng(0))
print(format_param_table(net3).splitlines()[-2:])

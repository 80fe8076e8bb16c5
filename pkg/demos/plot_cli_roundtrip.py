"""
From images on disk to a prediction
===================================

The command-line tool end to end: write a synthetic dataset as PNG files,
train briefly, evaluate, and classify one image. Each step is the same
call a shell user would make, for example ``crackcnn predict --model
model.ckpt --image photo.jpg``.
"""

import tempfile
from pathlib import Path

from crackcnn.cli import main

work = Path(tempfile.mkdtemp())

###############################################################################
# 20 images per class in ``<root>/<class>/`` folders.

main(["synth", "--task", "crack2", "--n", "20", "--seed", "0", "--out", str(work / "data")])

###############################################################################
# A short full-resolution run. The metrics CSV is byte-identical between
# runs with the same flags. Thirty steps only show the plumbing; the model
# stays near chance until roughly step 100, so raise ``--steps`` for a
# usable classifier.

main([
    "train", "--data", str(work / "data"), "--classes", "2",
    "--steps", "30", "--batch", "8", "--eval-interval", "10",
    "--out", str(work / "model.ckpt"), "--metrics", str(work / "metrics.csv"),
])
print((work / "metrics.csv").read_text())

###############################################################################
# Loss and accuracy over the whole folder, then one prediction.

main(["eval", "--model", str(work / "model.ckpt"), "--data", str(work / "data")])
image = sorted((work / "data" / "crack").glob("*.png"))[0]
main(["predict", "--model", str(work / "model.ckpt"), "--image", str(image)])

"""
Detection as set prediction
===========================

Object detection is naturally a set problem: an image in, an unordered
collection of boxes out, with no privileged box order. Here the scenes
are synthetic (coloured rectangles on noise) so a small CNN encoder and
a couple of minutes of CPU are enough to see the pipeline end to end.
"""

from pathlib import Path

import numpy as np

from setforge import ExperimentConfig, harness
from setforge.data import load_detection, make_batches
from setforge.diffcore import make_rng
from setforge.svg import ImagePanel, PlotSpec, emit_svg

RUN = Path("runs/demo_detect")

config = ExperimentConfig(
    task="detection", model="tspn",
    embed=32, hidden=32, width=32, heads=4,
    channels="8,16,32", epochs=3, batch_size=32,
    lr=1e-4, card_lr=1e-2,
    train_scenes=2000, test_scenes=200, eval_limit=100,
    out_dir=str(RUN),
)

if not (RUN / "model.ckpt").is_file():
    print("training a miniature detector (a few minutes on one core)")
    summary = harness.train(config)
    print("test metrics:", summary["test"])

bundle, config = harness.load_run(RUN)

# boxes are (cx, cy, w, h) in [0, 1]; the model also predicts how many
test = load_detection("test", n_scenes=6, data_seed=123)
batch = next(make_batches(test, 6))
pred = bundle.predict(batch, make_rng(0, 77))

row = []
for i in range(6):
    image = (batch.images[i] * 255).astype(np.uint8)
    true_boxes = [b for b in batch.points[i, :batch.sizes[i]]]
    n_pred = int(pred.sizes[i])
    pred_boxes = [b for b in pred.points.values[i][:n_pred]]
    row.append(ImagePanel(
        image,
        boxes=true_boxes + pred_boxes,
        box_colours=["#2e9e4f"] * len(true_boxes)
        + ["#d4483b"] * len(pred_boxes),
        caption=f"{n_pred} pred / {int(batch.sizes[i])} true"))
    print(f"scene {i}: {int(batch.sizes[i])} objects, model says {n_pred}")

out = RUN / "detections.svg"
emit_svg(PlotSpec(rows=[row], panel_size=140,
                  title="green = truth, red = prediction"), out)
print("wrote", out)

# the eval metrics include average precision at several closeness levels
metrics = harness.evaluate(bundle, load_detection("test", n_scenes=200, data_seed=1), limit=200)
print({k: round(v, 3) for k, v in metrics.items()})

"""
Set-MNIST autoencoding in miniature
===================================

Digits become point sets (one point per bright pixel), an invariant
encoder squeezes each set into a vector, and a transformer decoder
rebuilds the set from that vector plus noise. This script trains a
deliberately tiny model for a couple of minutes, then renders
reconstructions next to the ground truth.

If a full desk-scale run exists under runs/mnist_tspn_s0, point --run at
it (or edit RUN below) to render that instead of training.
"""

from pathlib import Path

import numpy as np

from setforge import ExperimentConfig, harness
from setforge.data import load_set_mnist, make_batches
from setforge.diffcore import make_rng
from setforge.svg import PlotSpec, PointPanel, emit_svg

RUN = Path("runs/demo_mnist")

config = ExperimentConfig(
    task="set-mnist", model="tspn",
    embed=32, hidden=32, width=32, heads=4, knots=12,
    epochs=3, batch_size=12, lr=1e-3, card_lr=1e-2,
    train_limit=1500, test_limit=200, eval_limit=100,
    out_dir=str(RUN),
)

if not (RUN / "model.ckpt").is_file():
    print("training a miniature model (roughly five minutes on one core)")
    summary = harness.train(config)
    print("test metrics:", summary["test"])

bundle, config = harness.load_run(RUN)

# reconstruct a handful of test digits; the model chooses its own set sizes
test = load_set_mnist(split="test", limit=8)
batch = next(make_batches(test, 8))
pred = bundle.predict(batch, make_rng(0, 999))

top, bottom = [], []
for i in range(8):
    n_pred = int(pred.sizes[i])
    pts = np.clip(pred.points.values[i][:n_pred], 0.0, 1.0)
    top.append(PointPanel(pts, caption=str(n_pred)))
    truth = batch.points[i, :batch.sizes[i]]
    bottom.append(PointPanel(truth, caption=str(int(batch.sizes[i])),
                             colour="#444444"))
    print(f"digit {test.labels[i]}: true size {batch.sizes[i]}, "
          f"predicted {n_pred}")

out = RUN / "reconstructions.svg"
emit_svg(PlotSpec(rows=[top, bottom], title="predictions (top) vs truth"), out)
print("wrote", out)

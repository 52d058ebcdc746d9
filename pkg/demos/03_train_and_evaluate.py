# %% [markdown]
# # Training a small cascade and scoring it
#
# The whole-tumor U-Net feeds its last decoder features to the substructure U-Net.
# Both are trained jointly with deep supervision. This run is sized for a laptop:
# 32x32 phantoms, two pooling levels, a few epochs.

# %%
import numpy as np

from cunet.data import split_dataset, synthesize
from cunet.model import CUNet, CUNetConfig
from cunet.render import render_overlay
from cunet.train import TrainConfig, evaluate, predict, train

cases = synthesize(40, 32, seed=11)
split = split_dataset([c.id for c in cases], np.random.default_rng(0))
by_id = {c.id: c for c in cases}
dataset = {name: [by_id[i] for i in getattr(split, name)] for name in ("train", "val", "test")}
print({k: len(v) for k, v in dataset.items()})

# %%
model = CUNet(CUNetConfig(depth=2, base_channels=8, seed=0))
print("parameters:", model.params.count())
config = TrainConfig(lr0=1e-2, max_epochs=8, contour_width=2, batch_size=4)
state, _ = train(model, dataset, config, out_dir="demo_run", log=print)
print("best epoch", state.best_epoch, "steps", state.steps)

# %% Nine-column report: Dice, sensitivity and specificity for whole tumor, core and enhancing tumor.
report = evaluate(model, dataset["test"], "demo_report.csv", "demo_report.json")
for key, value in report.means.items():
    print(f"{key:9s} {value:.3f}")

# %% Prediction fuses the two branches and zeroes everything outside the brain.
case = dataset["test"][0]
labels = predict(model, case)
render_overlay(case, labels, "demo_prediction.ppm")
print("predicted labels", {int(v): int((labels == v).sum()) for v in np.unique(labels)})

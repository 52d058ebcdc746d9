# %% [markdown]
# # Phantoms, regions and loss weighted sampling
#
# A phantom is one 4-channel slice (flair, t1, t1ce, t2) with labels 0 (background),
# 1 (necrotic core), 2 (edema) and 4 (enhancing rim), plus a brain mask.

# %%
import numpy as np

from cunet import lws
from cunet.data import generate_phantom, normalize_intensity
from cunet.render import render_overlay

rng = np.random.default_rng(3)
case = generate_phantom(rng, size=64, q_tumor=1.0, case_id="demo")
for lab in (0, 1, 2, 4):
    print(f"label {lab}: {np.count_nonzero(case.labels == lab):5d} pixels")
print(f"tumor share of brain {np.count_nonzero(case.labels) / case.brain_mask.sum():.3f}")

# %% Ground truth overlay on the flair channel (PPM, viewable with most image tools).
render_overlay(case, case.labels, "phantom_truth.ppm")

# %% Four regions: outside brain, normal brain, tumor interior, and a band around the tumor edge.
part = lws.partition_regions(case.labels, case.brain_mask, contour_width=4)
print("region sizes S1..S4", part.counts())

# %% The first stage keeps every tumor pixel, doubles the weight of the edge band and
# samples just enough normal brain to keep 1.5 negatives per positive.
first, second = lws.stage_sampling_configs()
first = first.resolve(part)
print("derived p2", round(first.p2, 4))
w1 = lws.sample_matrix(part, first, rng)
w2 = lws.sample_matrix(part, second, rng)
print("stage 1 weights:", {float(v): int((w1 == v).sum()) for v in np.unique(w1)})
print("stage 2 weights:", {float(v): int((w2 == v).sum()) for v in np.unique(w2)})

# %% Each normal-brain pixel should be drawn at least once over training.
lws.coverage_check(first.beta, first.p2, epochs=50)

# %% Intensities are standardized per modality inside the brain before training.
norm = normalize_intensity(case)
for name, plane in zip(("flair", "t1", "t1ce", "t2"), norm.image):
    print(f"{name:5s} mean {plane[case.brain_mask].mean():+.1e} std {plane[case.brain_mask].std():.6f}")

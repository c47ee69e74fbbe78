"""
Synthetic weather and sequence selection
========================================

Generates a month of advected rain cells, writes it as a store and shows
how the EU20/EU50 rain-fraction filters thin out the candidate sequences.
Saves a picture of one conditioning stack next to its three targets.
"""

import sys
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from ged.data import SequenceDataset, fit_normalization
from ged.synth import SynthConfig, synth_generate

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
store = synth_generate(out / "store", SynthConfig(n_hours=24 * 31, seed=4, start="2020-07-01T00"))
print(f"store: {store.hours.size} hours, variables {sorted(store.manifest['variables'])}")

stats = fit_normalization(store, (2020, 2020))
print(f"precipitation scale (max over training hours): {stats.train_max * 1000:.2f} mm/h")

for level in ("none", "eu20", "eu50"):
    ds = SequenceDataset(store, stats, (2020, 2020), level)
    print(f"{level:>4}: {len(ds):4d} of {ds.report.candidates} candidate sequences kept")

# one sample: the last rain frame of the history and the three hours to predict
ds = SequenceDataset(store, stats, (2020, 2020), "eu20")
sample = ds.sample(len(ds) // 2)
history = sample.conditioning.last_rain
fig, axes = plt.subplots(1, 4, figsize=(13, 3.4))
panels = [("now", history)] + [(f"+{h + 1} h", sample.targets[..., h]) for h in range(3)]
vmax = max(float(p.max()) for _, p in panels)
for ax, (title, img) in zip(axes, panels):
    ax.imshow(img, vmin=0, vmax=vmax, cmap="Blues")
    ax.set_title(title)
    ax.axis("off")
fig.suptitle(f"issued {sample.timestamp}")
fig.savefig(out / "sample.png", dpi=80)
print("conditioning channels", sample.conditioning.to_array().shape[-1], "->", out / "sample.png")

"""Compare the oracle and heuristic feature detectors on one pullback.

The pullback carries speckle and a drifting guidewire wedge; the heuristic
reduces each radial profile to guidewire / bifurcation / calcification
probabilities, which are compared against the exact labels side by side.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from curvreg.cases import build_case
from curvreg.config import RunConfig
from curvreg.features import DetectorConfig, detect_heuristic, detect_oracle

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)

cfg = RunConfig(case_kind="recovery")
bundle = build_case(1, cfg)
det = DetectorConfig()

oracle = detect_oracle(bundle.gt.labels, bundle.gt.classes, det)
heuristic = detect_heuristic(bundle.fixed_polar, "ivus", det)

fig, axes = plt.subplots(3, 2, figsize=(11, 8), sharex=True, sharey=True)
for row, name in enumerate(("G", "B", "C")):
    axes[row, 0].imshow(oracle.probs[oracle.class_index(name)], vmin=0, vmax=1,
                        cmap="magma", origin="lower", aspect="auto")
    axes[row, 0].set_ylabel(f"{name}\ntheta bin")
    axes[row, 1].imshow(heuristic.probs[heuristic.class_index(name)], vmin=0,
                        vmax=1, cmap="magma", origin="lower", aspect="auto")
axes[0, 0].set_title("oracle (labels, blurred)")
axes[0, 1].set_title("heuristic (from intensities)")
axes[2, 0].set_xlabel("frame")
axes[2, 1].set_xlabel("frame")
fig.tight_layout()
fig.savefig(OUT / "02_detectors.png", dpi=110)

for name in ("G", "B", "C"):
    o = oracle.probs[oracle.class_index(name)] > 0.5
    h = heuristic.probs[heuristic.class_index(name)] > 0.5
    agree = float(np.mean(o == h))
    print(f"class {name}: binarized agreement {agree:.3f}")
print(f"wrote {OUT / '02_detectors.png'}")

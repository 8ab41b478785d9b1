"""Walk through a synthetic vessel phantom.

Builds one seeded phantom, shows a cross-section and a longitudinal cut of
the volume, the polar view along the centerline, and the (theta, z) label
grid that every later experiment scores against. Saves PNGs next to this
script.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from curvreg import polar_transform
from curvreg.cases import build_case
from curvreg.config import RunConfig

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)

cfg = RunConfig(case_kind="recovery")
bundle = build_case(0, cfg)
vol, c = bundle.volume, bundle.centerline

print(f"phantom seed 0: volume {vol.dims} at {vol.spacing[0]:.2f} mm voxels, "
      f"centerline {c.length:.1f} mm / {c.n_points} points")
print(f"  branches at {[round(b.position_mm, 1) for b in bundle.spec.branches]} mm, "
      f"calcifications at {[round(k.position_mm, 1) for k in bundle.spec.calcs]} mm")

# a cross-section through the first calcification
calc = bundle.spec.calcs[0]
zi = int(round((calc.position_mm - vol.origin[2]) / vol.spacing[2]))
mid = int(round((c.points[0, 2] - vol.origin[2]) / vol.spacing[2]))

fig, axes = plt.subplots(1, 3, figsize=(13, 4.2))
axes[0].imshow(vol.data[:, :, zi].T, cmap="gray", origin="lower")
axes[0].set_title(f"cross-section near {calc.position_mm:.0f} mm (calcified)")
axes[1].imshow(vol.data[:, vol.dims[1] // 2, :].T, cmap="gray", origin="lower",
               aspect="auto")
axes[1].set_title("longitudinal cut")

polar = polar_transform(vol, c, cfg.polar)
axes[2].imshow(polar.data.max(axis=0), cmap="gray", origin="lower", aspect="auto")
axes[2].set_title("polar view, max over r (theta vs z)")
axes[2].set_xlabel("z bin")
axes[2].set_ylabel("theta bin")
fig.tight_layout()
fig.savefig(OUT / "01_phantom.png", dpi=110)

fig, ax = plt.subplots(figsize=(7, 3))
grid = np.zeros_like(bundle.mpr_labels[0])
grid += bundle.mpr_labels[0]          # bifurcations
grid += 2 * bundle.mpr_labels[1]      # calcifications
ax.imshow(grid, cmap="viridis", origin="lower", aspect="auto")
ax.set_title("label grid: 1 = bifurcation, 2 = calcification")
ax.set_xlabel("z bin")
ax.set_ylabel("theta bin")
fig.tight_layout()
fig.savefig(OUT / "01_labels.png", dpi=110)
print(f"wrote {OUT / '01_phantom.png'} and {OUT / '01_labels.png'}")

"""A small seeded sweep through the file-coupled pipeline.

Runs phantom -> features -> register -> eval for a handful of seeds in
parallel, then aggregates the per-case reports the same way the `curvreg
sweep` and `curvreg report` commands do.
"""

import json
import os
from pathlib import Path

from curvreg.config import RunConfig
from curvreg.pipeline import run_pipeline

OUT = Path(__file__).resolve().parent / "out" / "sweep"

cfg = RunConfig(out_dir=str(OUT), case_kind="recovery",
                seeds=[0, 1, 2, 3], jobs=min(4, os.cpu_count() or 1))
cfg.optimizer.max_iters = 400

summary = run_pipeline(cfg)
print(json.dumps({k: v for k, v in summary.items() if k != "seeds"},
                 indent=2, sort_keys=True))
print(f"per-case artifacts and summary.csv under {OUT}")

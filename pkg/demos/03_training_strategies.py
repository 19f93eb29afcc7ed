"""Staged training, protective freezing and the training-strategy variants.

Run with ``python3 demos/03_training_strategies.py``.  This uses a short
budget (40 steps per stage) and one seed, so it finishes in about two
minutes; the full comparison is ``stbev ablate-training --seeds 5``.
"""

# %% Shared data and single-frame pretraining for one seed
import time

import numpy as np

from stbev.training import VARIANTS, Experiment, ExperimentConfig, variant_schedule

exp = ExperimentConfig(steps=40, train_sequences=32, eval_sequences=16)
for s in variant_schedule(VARIANTS["g"], exp).stages:
    print(f"{s.name:8s} trains {', '.join(s.trainable)}")

t0 = time.perf_counter()
ex = Experiment(exp, seed=0, frames=3)

# %% The temporal stage under three regimes
for key in ("g", "e", "f"):
    model, res, m = ex.run(key)
    losses = [r.total for r in res.reports]
    frozen = [g for g in ("lidar_encoder", "image_encoder")
              if res.checksums[-1][g] == res.initial_checksums[g]]
    print(f"{key}: {VARIANTS[key].description}")
    print(f"   loss (10-step means) {np.mean(losses[:10]):.3f} -> {np.mean(losses[-10:]):.3f}; encoders untouched: {frozen}; "
          f"toy_ap {m.toy_ap:.3f}, hit rate {m.hit_rate:.3f}")
print(f"done in {time.perf_counter() - t0:.0f} s")

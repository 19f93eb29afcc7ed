"""Why history must be aligned before it is fused.

Run with ``python3 demos/01_alignment.py``.  Takes a few seconds.
"""

# %% A static scene seen from a moving, turning ego vehicle
from dataclasses import replace

import numpy as np

from stbev.bev import FeatureMap, align_bev
from stbev.geometry import Pose, relative_pose, transform_points
from stbev.harness.experiments import align_bench, align_residuals, mean_by
from stbev.harness.scenes import SceneConfig, current_first, generate_sequence

cfg = SceneConfig.static_only(seed=4)
seq = generate_sequence(cfg)
cur, hist = current_first(seq)[0], current_first(seq)[-1]
rel = relative_pose(hist.pose, cur.pose)
print(f"{len(seq)} frames; oldest-to-current ego motion: "
      f"{np.linalg.norm(rel.translation[:2]):.2f} m, yaw {np.degrees(rel.yaw):.1f} deg")

# %% Point-level alignment is exact for world-static geometry
clean = replace(cfg, noise_sigma=0.0, occlusion=(0.0, 0.0), clutter_clusters=0, range_falloff=1e6)
s = current_first(generate_sequence(clean))
moved = transform_points(relative_pose(s[-1].pose, s[0].pose), s[-1].points)
print("noise-free landmark residual after point alignment:",
      f"{np.abs(moved.points - s[0].points.points).max():.1e} m")

# %% Feature-level alignment resamples a BEV map into the current grid
g = cfg.grid
fm = FeatureMap(np.random.default_rng(0).normal(size=(1, g.rows, g.cols)), g)
one_cell = align_bev(fm, Pose.from_ypr(translation=(-g.cell, 0, 0)), g).data
half_cell = align_bev(fm, Pose.from_ypr(translation=(-0.5 * g.cell, 0, 0)), g).data
print("one-cell shift equals a column shift:", np.array_equal(one_cell[:, :, :-1], fm.data[:, :, 1:]))
print("half-cell shift averages neighbours:",
      np.allclose(half_cell[:, :, :-1], 0.5 * (fm.data[:, :, :-1] + fm.data[:, :, 1:])))

# %% Residual of the aligned history against the current frame
for name, (lidar, sem) in align_residuals(seq, g).items():
    print(f"  {name:8s} lidar {lidar:.4f}  semantic {sem:.4f}")

# %% Over seeds and resolutions
rows = align_bench(SceneConfig.static_only(), resolutions=(1.2, 0.6, 0.3), seeds=range(3))
for cell in (1.2, 0.6, 0.3):
    m = mean_by([r for r in rows if r["cell"] == cell], "config", "residual")
    print(f"cell {cell} m: " + ", ".join(f"{k} {v:.4f}" for k, v in m.items()))

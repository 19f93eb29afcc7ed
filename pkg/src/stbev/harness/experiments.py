"""Benchmarks: alignment residuals, frame-count sweeps, fusion-operator and training-strategy tables.

Every function returns a list of flat row dicts whose keys match the module's
fixed CSV headers, so tables can be written with :func:`write_csv`.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..bev import GridConfig, apply_warp, voxelize, warp_weights
from ..geometry import relative_pose, transform_points
from ..pipeline.fusion import FUSION_OPS
from ..pipeline.timestep import _lidar_grid
from ..training import VARIANTS, Experiment, ExperimentConfig, Variant
from .metrics import ToyMetrics
from .scenes import SceneConfig, current_first, derive_seed, generate_sequence

ALIGN_CONFIGS = ("none", "ptc", "atc", "ptc_atc")
ALIGN_HEADER = ("seed", "cell", "config", "residual_lidar", "residual_semantic", "residual")
METRIC_COLUMNS = ("toy_ap", "hit_rate", "center_mae", "ap_landmark", "ap_mover", "ap_near", "ap_far")
FRAME_HEADER = ("frames", "seed") + METRIC_COLUMNS
FUSION_HEADER = ("operator", "seed") + METRIC_COLUMNS
ABLATION_HEADER = ("variant", "seed") + METRIC_COLUMNS


def write_csv(path, rows: Iterable[dict], header: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def metric_row(m: ToyMetrics) -> dict:
    pc, pr = m.per_class, m.per_range
    return {"toy_ap": m.toy_ap, "hit_rate": m.hit_rate, "center_mae": m.center_mae,
            "ap_landmark": pc.get(0, {}).get("toy_ap", 0.0), "ap_mover": pc.get(1, {}).get("toy_ap", 0.0),
            "ap_near": pr.get("0-15m", {}).get("toy_ap", 0.0), "ap_far": pr.get("15m+", {}).get("toy_ap", 0.0)}


def mean_by(rows: Sequence[dict], key: str, column: str = "toy_ap") -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(float(r[column]))
    return {k: float(np.mean(v)) for k, v in groups.items()}


# -- alignment ------------------------------------------------------------------

def _maps(frame, rel, grid: GridConfig, ptc: bool, atc: bool, lidar_in: int = 3):
    """Lidar voxel and semantic maps of one historical frame under one configuration."""
    pts = transform_points(rel, frame.points) if ptc else frame.points
    vox = voxelize(pts, _lidar_grid(grid, lidar_in)).data[:lidar_in].astype(np.float64)
    sem = frame.semantic.data.astype(np.float64)
    if atc:
        idx, w = warp_weights(rel, grid)
        sem = apply_warp(sem, idx, w)
        if not ptc:
            vox = apply_warp(vox, idx, w)
    return vox, sem


def _interior(rels, grid: GridConfig) -> np.ndarray:
    """Cells whose bilinear support lies fully inside the grid for every historical pose."""
    mask = np.ones((grid.rows, grid.cols), bool)
    ones = np.ones((1, grid.rows, grid.cols))
    for rel in rels:
        idx, w = warp_weights(rel, grid)
        mask &= apply_warp(ones, idx, w)[0] >= 1 - 1e-9
    return mask


def align_residuals(seq, grid: GridConfig, configs: Sequence[str] = ALIGN_CONFIGS,
                    lidar_in: int = 3) -> dict[str, tuple[float, float]]:
    """Mean absolute lidar / semantic residual of aligned history against the current frame."""
    frames = current_first(seq)
    cur, hist = frames[0], frames[1:]
    if not hist:
        return {c: (0.0, 0.0) for c in configs}
    rels = [relative_pose(f.pose, cur.pose) for f in hist]
    mask = _interior(rels, grid)
    cv, cs = _maps(cur, rels[0], grid, False, False, lidar_in)
    out = {}
    for c in configs:
        if c not in ALIGN_CONFIGS:
            raise ValueError(f"unknown alignment configuration {c!r}")
        rl, rs = [], []
        for f, rel in zip(hist, rels):
            v, s = _maps(f, rel, grid, "ptc" in c, c.endswith("atc"), lidar_in)
            rl.append(np.abs(v - cv)[:, mask].mean())
            rs.append(np.abs(s - cs)[:, mask].mean())
        out[c] = (float(np.mean(rl)), float(np.mean(rs)))
    return out


def align_bench(cfg: SceneConfig | None = None, resolutions: Sequence[float] = (0.6,),
                seeds: Sequence[int] = range(5), configs: Sequence[str] = ALIGN_CONFIGS) -> list[dict]:
    """Residual table over seeds and cell sizes on static scenes (movers are removed)."""
    cfg = replace(cfg or SceneConfig.static_only(), num_movers=0)
    rows = []
    for seed in seeds:
        for cell in resolutions:
            grid = replace(cfg.grid, cell=float(cell))
            seq = generate_sequence(replace(cfg, grid=grid, seed=derive_seed(seed, 17)))
            for c, (rl, rs) in align_residuals(seq, grid, configs).items():
                rows.append({"seed": int(seed), "cell": float(cell), "config": c, "residual_lidar": rl,
                             "residual_semantic": rs, "residual": 0.5 * (rl + rs)})
    return rows


# -- trained comparisons ----------------------------------------------------------

def operator_variant(op: str) -> Variant:
    """The current-centric, frozen-encoder temporal stage with a given fusion operator."""
    if op not in FUSION_OPS:
        raise ValueError(f"unknown fusion operator {op!r}")
    return Variant(op, f"stage 4, frozen encoders, current-centric {op}", op, False, 3)


def frame_sweep(frames_list: Sequence[int] = (1, 3, 5, 7), seeds: Sequence[int] = range(5),
                exp: ExperimentConfig | None = None, variant: str = "g",
                experiments: dict | None = None) -> list[dict]:
    """Held-out toy metrics per window length; all lengths share data and pretraining per seed."""
    exp = exp or ExperimentConfig(scene=SceneConfig.mover_heavy())
    nmax = max(frames_list)
    exp = replace(exp, scene=replace(exp.scene, num_frames=max(nmax, exp.scene.num_frames)))
    rows = []
    for seed in seeds:
        ex = (experiments or {}).get(seed) or Experiment(exp, seed, frames=nmax)
        for n in frames_list:
            _, _, m = ex.run(variant, history=n - 1)
            rows.append({"frames": int(n), "seed": int(seed), **metric_row(m)})
    return rows


def fusion_bench(ops: Sequence[str] = ("add", "cat", "daf"), seeds: Sequence[int] = range(5),
                 exp: ExperimentConfig | None = None, experiments: dict | None = None) -> list[dict]:
    exp = exp or ExperimentConfig()
    rows = []
    for seed in seeds:
        ex = (experiments or {}).get(seed) or Experiment(exp, seed, frames=exp.model.history + 1)
        for op in ops:
            _, _, m = ex.run(operator_variant(op))
            rows.append({"operator": op, "seed": int(seed), **metric_row(m)})
    return rows


def ablate_training(variants: Sequence[str] = ("e", "f", "g"), seeds: Sequence[int] = range(5),
                    exp: ExperimentConfig | None = None, experiments: dict | None = None) -> list[dict]:
    exp = exp or ExperimentConfig()
    rows = []
    for seed in seeds:
        ex = (experiments or {}).get(seed) or Experiment(exp, seed, frames=exp.model.history + 1)
        for v in variants:
            _, _, m = ex.run(VARIANTS[v])
            rows.append({"variant": v, "seed": int(seed), **metric_row(m)})
    return rows

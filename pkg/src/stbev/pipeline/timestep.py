"""Query decoding, detections, and the per-timestep inference flow."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .. import tensor as T
from ..bev import FeatureMap, GridConfig, align_bev, apply_warp, grid_to_world, voxelize, warp_weights
from ..geometry import PointCloud, Pose, relative_pose, transform_points
from ..tensor import Tensor
from .fusion import temporal_fuse
from .model import (Model, ModelInputs, StageOutput, adapt, box_raw, encode, enhance_stage,
                    fuse_modalities, head_logits, heatmap)
from .selection import Query, StageMask, box_pool_mask, topk_select


@dataclass
class Detection:
    class_scores: np.ndarray
    box: tuple[float, float, float, float, float]  # x, y, w, l, yaw
    confidence: float
    frame: int = 0

    def __post_init__(self):
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        if abs(self.class_scores.sum() - 1.0) > 1e-6 or np.any(self.class_scores < 0):
            raise ValueError("class scores must be a probability vector")
        x, y, w, l, yaw = (float(v) for v in self.box)
        if not (w > 0 and l > 0):
            raise ValueError("box extents must be positive")
        if not -math.pi < yaw <= math.pi:
            raise ValueError(f"yaw {yaw} outside (-pi, pi]")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        self.box = (x, y, w, l, yaw)
        self.confidence = float(self.confidence)

    @property
    def cls(self) -> int:
        return int(np.argmax(self.class_scores))

    def to_json(self) -> dict:
        return {"frame": self.frame, "class": self.cls, "conf": self.confidence, "box": list(self.box)}


def write_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w") as f:
        for d in dets:
            f.write(json.dumps(d.to_json()) + "\n")


def read_detections(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict(queries: Sequence[Query], params: dict[str, Tensor], grid: GridConfig,
            base_size: tuple[float, float] = (1.0, 1.0), frame: int = 0) -> list[Detection]:
    """Decode each query's feature into class probabilities and an oriented box.

    The center is the query cell center plus a tanh-bounded offset of at most
    one cell per axis; extents are ``base * exp(.)``; yaw is ``atan2`` of two
    regressed components.
    """
    if not queries:
        return []
    feats = np.stack([q.feature for q in queries])
    with T.no_grad():
        f = Tensor(feats)
        logits = T.fully_connected(f, params["head.heat_weight"], params["head.heat_bias"]).data
        raw = box_raw(f, params).data
    probs = _softmax(logits)
    centers = grid_to_world(grid, np.array([q.cell for q in queries], dtype=np.float64))
    out = []
    for i, q in enumerate(queries):
        x = centers[i, 0] + raw[i, 0] * grid.cell
        y = centers[i, 1] + raw[i, 1] * grid.cell
        w = base_size[0] * math.exp(raw[i, 2])
        l = base_size[1] * math.exp(raw[i, 3])
        yaw = math.atan2(raw[i, 4], raw[i, 5])
        if yaw <= -math.pi:
            yaw += 2 * math.pi
        out.append(Detection(probs[i], (x, y, w, l, yaw), min(max(q.score, 0.0), 1.0), frame))
    return out


def select_queries(stage_scores: Sequence[np.ndarray], stage_features: Sequence[np.ndarray],
                   stages) -> list[Query]:
    """Run masked Top-k over the stages; pooling widens the mask between stages."""
    K, R, C = stage_scores[0].shape
    stages.check_grid(R, C)
    mask = StageMask.ones(R, C)
    queries: list[Query] = []
    for s, (scores, feats) in enumerate(zip(stage_scores, stage_features)):
        picked, mask = topk_select(scores, mask, stages.k_per_stage, s, feats)
        queries.extend(picked)
        if s + 1 < len(stage_scores):
            mask = box_pool_mask(mask, picked, stages.pool_radius)
    if len(queries) != stages.total_queries:
        raise T.ShapeError(f"expected {stages.total_queries} queries, got {len(queries)}")
    return queries


def decode_batch(outs: Sequence[StageOutput], model: Model, frame_ids: Sequence[int] | None = None
                 ) -> list[list[Detection]]:
    """Detections for every sample of a batched forward pass."""
    with T.no_grad():
        scores = [T.sigmoid(o.logits).data for o in outs]
    B = scores[0].shape[0]
    frame_ids = list(range(B)) if frame_ids is None else list(frame_ids)
    res = []
    for b in range(B):
        qs = select_queries([s[b] for s in scores], [o.features.data[b] for o in outs], model.cfg.stages)
        res.append(predict(qs, model.params, model.grid, model.cfg.base_size, frame_ids[b]))
    return res


# -- inputs --------------------------------------------------------------------

class FrameLike(Protocol):
    points: PointCloud
    semantic: FeatureMap
    pose: Pose


def warp_matrix(t_hist_to_cur: Pose, grid: GridConfig) -> sp.csr_matrix:
    """Sparse ``(HW, HW)`` form of the bilinear inverse warp."""
    idx, w = warp_weights(t_hist_to_cur, grid)
    n = grid.rows * grid.cols
    rows = np.repeat(np.arange(n), idx.shape[1])
    return sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, n))


@dataclass
class SampleInputs:
    vox: np.ndarray                 # (F, lidar_in, H, W)
    sem: np.ndarray                 # (F, image_in, H, W)
    warps: list = field(default_factory=list)


def _lidar_grid(grid: GridConfig, channels: int) -> GridConfig:
    return replace(grid, channels=max(channels, 3))


def prepare_sample(frames: Sequence[FrameLike], grid: GridConfig, alignment: str = "bev",
                   lidar_in: int = 3) -> SampleInputs:
    """Voxelize and align a current-first window once, for reuse across steps."""
    cur = frames[0].pose
    vg = _lidar_grid(grid, lidar_in)
    vox, sem, warps = [], [], []
    for k, f in enumerate(frames):
        rel = relative_pose(f.pose, cur)
        pts = f.points
        s = f.semantic.data.astype(np.float64)
        if k > 0 and alignment == "ptc_atc":
            pts = transform_points(rel, pts)
            idx, w = warp_weights(rel, grid)
            s = apply_warp(s, idx, w)
        vox.append(voxelize(pts, vg).data[:lidar_in])
        sem.append(s)
        if k > 0:
            warps.append(warp_matrix(rel, grid) if alignment == "bev" else None)
    return SampleInputs(np.stack(vox), np.stack(sem), warps)


def collate(samples: Sequence[SampleInputs], frames: int | None = None) -> ModelInputs:
    F = min(len(s.vox) for s in samples) if frames is None else frames
    vox = np.stack([s.vox[:F] for s in samples])
    sem = np.stack([s.sem[:F] for s in samples])
    warps = []
    for k in range(F - 1):
        ms = [s.warps[k] for s in samples]
        if all(m is None for m in ms):
            warps.append(None)
        else:
            n = vox.shape[-1] * vox.shape[-2]
            ms = [sp.identity(n, format="csr") if m is None else m for m in ms]
            warps.append(sp.block_diag(ms, format="csr"))
    return ModelInputs(vox, sem, warps)


# -- single timestep -----------------------------------------------------------

def run_timestep(frames_raw: Sequence[FrameLike], model: Model, temporal: bool = True,
                 frame_id: int = 0) -> list[Detection]:
    """Full inference for one current-first window of raw frames.

    voxelize and fuse modalities per frame, align history into the current
    grid, then per stage enhance, fuse temporally, score, select and pool;
    finally decode every collected query.
    """
    if not frames_raw:
        raise ValueError("run_timestep needs at least the current frame")
    cfg, grid, params = model.cfg, model.grid, model.params
    frames_raw = frames_raw[:cfg.frames if temporal else 1]
    cur = frames_raw[0].pose
    vg = _lidar_grid(grid, cfg.lidar_in)
    fused: list[FeatureMap] = []
    with T.no_grad():
        for k, f in enumerate(frames_raw):
            rel = relative_pose(f.pose, cur)
            pts, sem = f.points, f.semantic
            if k > 0 and cfg.alignment == "ptc_atc":
                pts = transform_points(rel, pts)
                sem = align_bev(sem, rel, sem.grid)
            vox = voxelize(pts, vg).data[:cfg.lidar_in]
            b_l = FeatureMap(encode(Tensor(vox), params, "lidar").data, grid, k)
            b_i = FeatureMap(encode(Tensor(sem.data), params, "image").data, grid, k)
            b = fuse_modalities(b_l, b_i, params)
            if k > 0:
                if cfg.alignment == "bev":
                    b = align_bev(b, rel, grid)
                b = FeatureMap(adapt(Tensor(b.data), params).data, grid, k)
            fused.append(b)
    if temporal:
        # a window shorter than the model's history repeats its oldest frame
        fused += [fused[-1]] * (cfg.frames - len(fused))
    scores, feats = [], []
    xs = fused
    for s in range(cfg.stages.num_stages):
        xs = enhance_stage(xs, s, params)
        if temporal:
            with T.no_grad():
                t = temporal_fuse(cfg.fusion_op, [Tensor(x.data) for x in xs], params)
                data = t.data if cfg.symmetric else t.data + xs[0].data.astype(np.float64)
            b = FeatureMap(data, grid, 0)
        else:
            b = xs[0]
        scores.append(heatmap(b, params))
        feats.append(b.data.astype(np.float64))
    queries = select_queries(scores, feats, cfg.stages)
    return predict(queries, params, grid, cfg.base_size, frame_id)

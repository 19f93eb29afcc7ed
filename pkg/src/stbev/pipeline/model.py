"""Detector parameters and the differentiable forward pass.

Per frame: a lidar encoder over pillar features and an image encoder over the
semantic BEV are fused by a 1x1 convolution.  Historical frames are warped
into the current grid, then every stage applies its residual enhancement
block to all frames (shared weights), fuses the window temporally and scores
the result with the heatmap head.

Parameters live in one flat ``name -> Tensor`` dict; the name prefix decides
the training group.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..bev import FeatureMap, GridConfig, GridError
from ..tensor import Tensor
from .fusion import FUSION_OPS, init_temporal, temporal_fuse
from .selection import StageConfig

GROUPS = ("lidar_encoder", "image_encoder", "fusion", "enhance", "temporal", "adapter", "head")
_PREFIX = {"lidar": "lidar_encoder", "image": "image_encoder", "fusion": "fusion",
           "enhance": "enhance", "temporal": "temporal", "daf": "temporal",
           "adapter": "adapter", "head": "head"}
ALIGNMENTS = ("bev", "ptc_atc", "none")
BOX_DIM = 6  # dx, dy, log w, log l, sin yaw, cos yaw
HEAT_PRIOR = 0.1


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    lidar_in: int = 3
    image_in: int = 2
    num_classes: int = 2
    history: int = 2
    fusion_op: str = "daf"
    symmetric: bool = False
    adapter: bool = False
    alignment: str = "bev"
    base_size: tuple[float, float] = (1.0, 1.0)
    stages: StageConfig = field(default_factory=StageConfig)

    def __post_init__(self):
        if self.fusion_op not in FUSION_OPS:
            raise T.ConfigError(f"unknown fusion operator {self.fusion_op!r}")
        if self.alignment not in ALIGNMENTS:
            raise T.ConfigError(f"unknown alignment mode {self.alignment!r}")
        if self.history < 0 or self.channels < 1:
            raise T.ConfigError("history must be >= 0 and channels >= 1")

    @property
    def frames(self) -> int:
        return self.history + 1

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "stages"}
        d["base_size"] = list(self.base_size)
        d["stages"] = {"num_stages": self.stages.num_stages, "k_per_stage": self.stages.k_per_stage,
                       "pool_radius": self.stages.pool_radius}
        return d

    @classmethod
    def from_json(cls, obj: dict) -> ModelConfig:
        obj = dict(obj)
        if "stages" in obj:
            obj["stages"] = StageConfig(**obj["stages"])
        if "base_size" in obj:
            obj["base_size"] = tuple(obj["base_size"])
        return cls(**obj)


def group_of(name: str) -> str:
    try:
        return _PREFIX[name.split(".", 1)[0]]
    except KeyError:
        raise T.ConfigError(f"parameter {name!r} has no group prefix") from None


def _p(a) -> Tensor:
    return Tensor(np.asarray(a, np.float32), requires_grad=True)


def _fan_in(rng, co, ci):
    b = 1.0 / np.sqrt(ci)
    return rng.uniform(-b, b, (co, ci))


def _delta(rng, c, k=3, noise=0.1):
    kern = rng.uniform(-noise, noise, (c, k, k))
    kern[:, k // 2, k // 2] += 1.0
    return kern


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Initial parameters; each group draws from its own stream, so swapping the
    temporal operator leaves every other group's initial values unchanged."""
    C, K = cfg.channels, cfg.num_classes

    def rng(group):
        return np.random.default_rng([int(seed), GROUPS.index(group)])

    p: dict[str, Tensor] = {}
    for name, cin in (("lidar", cfg.lidar_in), ("image", cfg.image_in)):
        r = rng(_PREFIX[name])
        p[f"{name}.w1"] = _p(_fan_in(r, C, cin))
        p[f"{name}.b1"] = _p(np.zeros(C))
        p[f"{name}.dw"] = _p(_delta(r, C))
        p[f"{name}.w2"] = _p(_fan_in(r, C, C))
        p[f"{name}.b2"] = _p(np.zeros(C))
    p["fusion.weight"] = _p(_fan_in(rng("fusion"), C, 2 * C))
    p["fusion.bias"] = _p(np.zeros(C))
    r = rng("enhance")
    for s in range(cfg.stages.num_stages):
        # zero output projection: every stage block starts as the identity
        p[f"enhance.{s}.dw"] = _p(_delta(r, C))
        p[f"enhance.{s}.weight"] = _p(np.zeros((C, C)))
        p[f"enhance.{s}.bias"] = _p(np.zeros(C))
    p.update(init_temporal(cfg.fusion_op, C, cfg.history, rng("temporal"), zero_out=not cfg.symmetric))
    if cfg.adapter:
        p["adapter.weight"] = _p(np.eye(C))
        p["adapter.bias"] = _p(np.zeros(C))
    r = rng("head")
    p["head.heat_weight"] = _p(_fan_in(r, K, C))
    p["head.heat_bias"] = _p(np.full(K, np.log(HEAT_PRIOR / (1 - HEAT_PRIOR))))
    p["head.box_weight"] = _p(0.1 * _fan_in(r, BOX_DIM, C))
    p["head.box_bias"] = _p(np.zeros(BOX_DIM))
    for k, v in p.items():
        v.name = k
    return p


# -- building blocks (tensor level, any leading batch dims) --------------------

def encode(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.relu(T.conv1x1(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    h = T.dw_conv2d(h, params[f"{prefix}.dw"], 1)
    return T.relu(T.conv1x1(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"]))


def fuse(b_lidar: Tensor, b_img: Tensor, params: dict[str, Tensor]) -> Tensor:
    return T.conv1x1(T.concat_channels([b_lidar, b_img]), params["fusion.weight"], params["fusion.bias"])


def enhance(x: Tensor, stage: int, params: dict[str, Tensor]) -> Tensor:
    """Residual block ``x + W relu(dw3x3(x)) + b``."""
    h = T.relu(T.dw_conv2d(x, params[f"enhance.{stage}.dw"], 1))
    return T.add(x, T.conv1x1(h, params[f"enhance.{stage}.weight"], params[f"enhance.{stage}.bias"]))


def adapt(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    if "adapter.weight" not in params:
        return x
    return T.conv1x1(x, params["adapter.weight"], params["adapter.bias"])


def head_logits(b: Tensor, params: dict[str, Tensor]) -> Tensor:
    return T.conv1x1(b, params["head.heat_weight"], params["head.heat_bias"])


def box_raw(feat: Tensor, params: dict[str, Tensor]) -> Tensor:
    """``(..., C)`` features to ``(..., 6)`` box parameters (offsets squashed by tanh)."""
    raw = T.fully_connected(feat, params["head.box_weight"], params["head.box_bias"])
    off = T.tanh(T.index(raw, (..., slice(0, 2))))
    return T.concat([off, T.index(raw, (..., slice(2, BOX_DIM)))], axis=-1)


# -- FeatureMap-level API -----------------------------------------------------

def _check_same_grid(maps: Sequence[FeatureMap]) -> GridConfig:
    g = maps[0].grid
    if any(m.grid != g for m in maps):
        raise GridError("feature maps live on different grids")
    return g


def fuse_modalities(b_lidar: FeatureMap, b_img: FeatureMap, params: dict[str, Tensor]) -> FeatureMap:
    """Concatenate the two single-frame BEVs and project back to ``C`` channels."""
    g = _check_same_grid([b_lidar, b_img])
    with T.no_grad():
        out = fuse(Tensor(b_lidar.data), Tensor(b_img.data), params)
    return FeatureMap(out.data, g, b_lidar.frame_offset)


def enhance_stage(frames: Sequence[FeatureMap], stage: int, params: dict[str, Tensor]) -> list[FeatureMap]:
    """Apply stage ``stage``'s block to every frame with the same weights."""
    if f"enhance.{stage}.dw" not in params:
        raise T.ConfigError(f"no enhancement block for stage {stage}")
    out = []
    with T.no_grad():
        for f in frames:
            out.append(FeatureMap(enhance(Tensor(f.data), stage, params).data, f.grid, f.frame_offset))
    return out


def heatmap(b: FeatureMap, params: dict[str, Tensor]) -> np.ndarray:
    """Per-class ``(K, rows, cols)`` scores in (0, 1)."""
    with T.no_grad():
        return T.sigmoid(head_logits(Tensor(b.data), params)).data


# -- batched forward ------------------------------------------------------------

@dataclass
class ModelInputs:
    """Current-first inputs for a batch.

    ``vox`` is ``(B, F, lidar_in, H, W)``, ``sem`` is ``(B, F, image_in, H, W)``;
    ``warps[k - 1]`` is the block-diagonal sparse resampling matrix taking frame
    ``k`` into the current grid, or ``None`` when frame ``k`` is used as is.
    """

    vox: np.ndarray
    sem: np.ndarray
    warps: list = field(default_factory=list)

    @property
    def batch(self) -> int:
        return self.vox.shape[0]

    @property
    def frames(self) -> int:
        return self.vox.shape[1]


@dataclass
class StageOutput:
    features: Tensor   # (B, C, H, W)
    logits: Tensor     # (B, K, H, W)


class Model:
    def __init__(self, cfg: ModelConfig, grid: GridConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.grid = grid
        self.params = params if params is not None else init_params(cfg, seed)
        for name in self.params:
            group_of(name)

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {g: [] for g in GROUPS}
        for name in sorted(self.params):
            out[group_of(name)].append(name)
        return out

    def encode_frames(self, inp: ModelInputs, frames: int, use_image: bool = True) -> list[Tensor]:
        """Fused single-frame BEVs, current first, historical frames already aligned."""
        vox = Tensor(inp.vox[:, :frames])
        sem = inp.sem[:, :frames]
        if not use_image:
            sem = np.zeros_like(sem)
        x = fuse(encode(vox, self.params, "lidar"), encode(Tensor(sem), self.params, "image"), self.params)
        out = [T.index(x, (slice(None), 0))]
        for k in range(1, frames):
            h = T.index(x, (slice(None), k))
            w = inp.warps[k - 1] if k - 1 < len(inp.warps) else None
            if w is not None:
                h = T.sparse_warp(h, w)
            out.append(adapt(h, self.params))
        return out

    def forward(self, inp: ModelInputs, frames: int | None = None, temporal: bool = True,
                use_image: bool = True) -> list[StageOutput]:
        """Per-stage fused features and heatmap logits.

        With ``temporal=False`` the current frame alone feeds every stage and
        the temporal operator is skipped (single-frame pretraining).
        """
        frames = self.cfg.frames if frames is None else frames
        if frames > inp.frames:
            raise T.ShapeError(f"need {frames} frames, inputs carry {inp.frames}")
        xs = self.encode_frames(inp, frames if temporal else 1, use_image)
        outs = []
        for s in range(self.cfg.stages.num_stages):
            xs = [enhance(x, s, self.params) for x in xs]
            if temporal:
                fused = temporal_fuse(self.cfg.fusion_op, xs, self.params)
                b = fused if self.cfg.symmetric else T.add(xs[0], fused)
            else:
                b = xs[0]
            outs.append(StageOutput(b, head_logits(b, self.params)))
        return outs

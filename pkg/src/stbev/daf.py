"""Dual attention fusion of a current-first window of BEV maps.

    B_C  = concat(frames)                         (C_cat = (N + 1) * C channels)
    SA   = conv1x1(dwconv_dil(dwconv(B_C)))       static, spatially varying
    DA   = sigmoid(fc(avgpool(B_C)))              dynamic, one gate per channel
    B_C' = (SA * DA[:, None, None]) * B_C
    out  = conv1x1(B_C')                          back to C channels
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .bev import FeatureMap, GridError
from .tensor import Tensor

DW_SIZE = 5
DWD_SIZE = 7
DWD_DILATION = 3


@dataclass
class DafParams:
    dw_kernel: Tensor
    dwd_kernel: Tensor
    proj_weight: Tensor
    proj_bias: Tensor
    se_weight: Tensor
    se_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor
    dilation: int = DWD_DILATION

    def __post_init__(self):
        c_cat = self.dw_kernel.shape[0]
        k1, k2 = self.dw_kernel.shape[-1], self.dwd_kernel.shape[-1]
        if k1 % 2 == 0 or k2 % 2 == 0:
            raise T.ConfigError("depthwise kernel sizes must be odd")
        if (self.dwd_kernel.shape[0] != c_cat or self.proj_weight.shape != (c_cat, c_cat)
                or self.se_weight.shape != (c_cat, c_cat) or self.out_weight.shape[1] != c_cat):
            raise T.ShapeError("inconsistent DAF parameter shapes")

    @property
    def c_cat(self) -> int:
        return self.dw_kernel.shape[0]

    @property
    def channels(self) -> int:
        return self.out_weight.shape[0]

    @property
    def history(self) -> int:
        return self.c_cat // self.channels - 1

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "dilation"}

    @classmethod
    def init(cls, channels: int, history: int, rng: np.random.Generator,
             k1: int = DW_SIZE, k2: int = DWD_SIZE, dilation: int = DWD_DILATION) -> DafParams:
        """Center-delta depthwise kernels with +-0.01 noise, fan-in uniform 1x1/FC weights, zero biases."""
        c_cat = (history + 1) * channels

        def delta(k):
            kern = rng.uniform(-0.01, 0.01, (c_cat, k, k))
            kern[:, k // 2, k // 2] += 1.0
            return kern

        def fan_in(co, ci):
            b = 1.0 / np.sqrt(ci)
            return rng.uniform(-b, b, (co, ci))

        def p(a):
            return Tensor(np.asarray(a, np.float32), requires_grad=True)

        return cls(p(delta(k1)), p(delta(k2)),
                   p(fan_in(c_cat, c_cat)), p(np.zeros(c_cat)),
                   p(fan_in(c_cat, c_cat)), p(np.zeros(c_cat)),
                   p(fan_in(channels, c_cat)), p(np.zeros(channels)), dilation)


def static_attention(b_c: Tensor, p: DafParams) -> Tensor:
    """Spatial attention from stacked depthwise, dilated depthwise and 1x1 convolutions."""
    x = T.dw_conv2d(b_c, p.dw_kernel, 1)
    x = T.dw_conv2d(x, p.dwd_kernel, p.dilation)
    return T.conv1x1(x, p.proj_weight, p.proj_bias)


def dynamic_attention(b_c: Tensor, p: DafParams) -> Tensor:
    """Per-channel gate in (0, 1): squeeze by spatial mean, excite through FC + sigmoid."""
    return T.sigmoid(T.fully_connected(T.global_avg_pool(b_c), p.se_weight, p.se_bias))


def attention_weighted(b_c: Tensor, p: DafParams, use_static: bool = True,
                       use_dynamic: bool = True) -> Tensor:
    """``B_C'`` before the output projection.

    Disabling a branch replaces it by ones, which gives the single-branch
    ablations (static only, dynamic only, neither = plain concatenation).
    """
    if use_static and use_dynamic:
        a = T.broadcast_mul(static_attention(b_c, p), dynamic_attention(b_c, p))
    elif use_static:
        a = static_attention(b_c, p)
    elif use_dynamic:
        return T.broadcast_mul(b_c, dynamic_attention(b_c, p))
    else:
        return b_c
    return T.hadamard(a, b_c)


def daf_forward(frames: Sequence[Tensor], p: DafParams, use_static: bool = True,
                use_dynamic: bool = True) -> Tensor:
    """Tensor-level fusion of ``(..., C, H, W)`` frames ordered current-first."""
    if not frames:
        raise ValueError("daf needs at least the current frame")
    b_c = T.concat_channels(list(frames))
    if b_c.shape[-3] != p.c_cat:
        raise T.ShapeError(f"{len(frames)} frames give {b_c.shape[-3]} channels, params expect {p.c_cat}")
    fused = attention_weighted(b_c, p, use_static, use_dynamic)
    return T.conv1x1(fused, p.out_weight, p.out_bias)


def daf_fuse(frames: Sequence[FeatureMap], p: DafParams) -> FeatureMap:
    """Fuse current-first feature maps into one ``C``-channel map at offset 0."""
    if not frames:
        raise ValueError("daf needs at least the current frame")
    grid = frames[0].grid
    if any(f.grid != grid or f.channels != frames[0].channels for f in frames):
        raise GridError("all frames must share grid and channel count")
    if frames[0].frame_offset != 0:
        raise ValueError("first frame must be the current frame (offset 0)")
    with T.no_grad():
        out = daf_forward([Tensor(f.data) for f in frames], p)
    return FeatureMap(out.data, grid, 0)

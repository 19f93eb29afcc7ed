"""Temporal fusion operators behind one interface.

Every operator maps a current-first list of ``(..., C, H, W)`` frames to one
``(..., C, H, W)`` map and ends in a learned 1x1 projection, so the
operators differ only in what they feed that projection.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..daf import DafParams, daf_forward
from ..tensor import Tensor

FUSION_OPS = ("add", "cat", "cat_se", "cat_eca", "cross_attn", "daf", "daf_intra", "daf_inter")
ECA_KERNEL = 3


def _param(a) -> Tensor:
    return Tensor(np.asarray(a, np.float32), requires_grad=True)


def _fan_in(rng, co, ci):
    b = 1.0 / np.sqrt(ci)
    return rng.uniform(-b, b, (co, ci))


def init_temporal(op: str, channels: int, history: int, rng: np.random.Generator,
                  zero_out: bool = False) -> dict[str, Tensor]:
    """Parameters for ``op``; ``zero_out`` zeroes the final projection so the op starts silent."""
    if op not in FUSION_OPS:
        raise T.ConfigError(f"unknown fusion operator {op!r}; choose from {FUSION_OPS}")
    C, F = channels, history + 1
    c_cat = C * F
    if op.startswith("daf"):
        p = DafParams.init(C, history, rng)
        out = {f"daf.{k}": v for k, v in p.tensors().items()}
    else:
        ci = C if op in ("add", "cross_attn") else c_cat
        out = {"temporal.out_weight": _param(_fan_in(rng, C, ci)),
               "temporal.out_bias": _param(np.zeros(C))}
        if op == "cat_se":
            hidden = max(1, c_cat // 4)
            out["temporal.se1_weight"] = _param(_fan_in(rng, hidden, c_cat))
            out["temporal.se1_bias"] = _param(np.zeros(hidden))
            out["temporal.se2_weight"] = _param(_fan_in(rng, c_cat, hidden))
            out["temporal.se2_bias"] = _param(np.zeros(c_cat))
        elif op == "cat_eca":
            out["temporal.eca_kernel"] = _param(rng.uniform(-1, 1, ECA_KERNEL) / np.sqrt(ECA_KERNEL))
        elif op == "cross_attn":
            for n in ("q", "k", "v"):
                out[f"temporal.{n}_weight"] = _param(_fan_in(rng, C, C))
    w = "daf.out_weight" if op.startswith("daf") else "temporal.out_weight"
    if zero_out:
        out[w] = _param(np.zeros(out[w].shape))
    return out


def _daf_params(params: dict[str, Tensor]) -> DafParams:
    return DafParams(**{f: params[f"daf.{f}"] for f in (
        "dw_kernel", "dwd_kernel", "proj_weight", "proj_bias",
        "se_weight", "se_bias", "out_weight", "out_bias")})


def temporal_fuse(op: str, frames: list[Tensor], params: dict[str, Tensor]) -> Tensor:
    if not frames:
        raise ValueError("temporal fusion needs at least the current frame")
    if op == "daf":
        return daf_forward(frames, _daf_params(params))
    if op == "daf_intra":
        return daf_forward(frames, _daf_params(params), use_dynamic=False)
    if op == "daf_inter":
        return daf_forward(frames, _daf_params(params), use_static=False)
    w, b = params["temporal.out_weight"], params["temporal.out_bias"]
    if op == "add":
        acc = frames[0]
        for f in frames[1:]:
            acc = T.add(acc, f)
        return T.conv1x1(acc, w, b)
    if op == "cross_attn":
        return T.conv1x1(_cross_attention(frames, params), w, b)
    b_c = T.concat_channels(frames)
    if w.shape[1] != b_c.shape[-3]:
        raise T.ShapeError(f"{len(frames)} frames do not match a {w.shape[1]}-channel projection")
    pooled = T.global_avg_pool(b_c)
    if op == "cat_se":
        h = T.relu(T.fully_connected(pooled, params["temporal.se1_weight"], params["temporal.se1_bias"]))
        gate = T.sigmoid(T.fully_connected(h, params["temporal.se2_weight"], params["temporal.se2_bias"]))
        b_c = T.broadcast_mul(b_c, gate)
    elif op == "cat_eca":
        b_c = T.broadcast_mul(b_c, T.sigmoid(T.channel_conv1d(pooled, params["temporal.eca_kernel"])))
    elif op != "cat":
        raise T.ConfigError(f"unknown fusion operator {op!r}")
    return T.conv1x1(b_c, w, b)


def _cross_attention(frames: list[Tensor], params: dict[str, Tensor]) -> Tensor:
    """Current frame as the query, every frame (itself included) as key and value, per cell."""
    C = frames[0].shape[-3]
    zero = Tensor(np.zeros(C))
    stacked = T.stack(frames, axis=-4)                                 # (..., F, C, H, W)
    q = T.conv1x1(frames[0], params["temporal.q_weight"], zero)
    k = T.conv1x1(stacked, params["temporal.k_weight"], zero)
    v = T.conv1x1(stacked, params["temporal.v_weight"], zero)
    q = T.reshape(q, q.shape[:-3] + (1,) + q.shape[-3:])
    logits = T.mul(T.sum(T.mul(q, k), axis=-3), 1.0 / np.sqrt(C))     # (..., F, H, W)
    attn = T.softmax(logits, axis=-3)
    attn = T.reshape(attn, attn.shape[:-2] + (1,) + attn.shape[-2:])
    return T.sum(T.mul(attn, v), axis=-4)

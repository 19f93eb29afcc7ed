"""Finite-difference gradient suite over every differentiable op and the temporal fusion blocks."""

from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.sparse as sp

from .. import tensor as T
from ..bev import GridConfig
from ..daf import DafParams, daf_forward
from ..pipeline.fusion import FUSION_OPS, init_temporal, temporal_fuse
from ..pipeline.timestep import warp_matrix
from ..geometry import Pose
from ..tensor import Tensor, finite_diff_check

GRAD_HEADER = ("case", "tensor", "n_checked", "max_rel_error", "tol", "passed")
EPS, TOL, N_COORDS = 1e-3, 1e-4, 50

_GRID = GridConfig(-2.4, 2.4, -1.8, 1.8, channels=3)   # 6 x 8 cells


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _away_from_kinks(rng, *shape):
    return Tensor(rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1, 1], size=shape), requires_grad=True)


def _op_cases(rng) -> dict[str, tuple[Callable, dict[str, Tensor]]]:
    """Each case maps to ``(fn(**tensors) -> Tensor, tensors)``."""
    x, y = _t(rng, 3, 4, 6), _t(rng, 3, 4, 6)
    v = _t(rng, 2, 3)
    k = _away_from_kinks(rng, 4, 5)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(4, 5)), requires_grad=True)
    warp = warp_matrix(Pose.from_ypr(0.1, 0, 0, (0.35, -0.2, 0.0)), _GRID)
    warp2 = sp.block_diag([warp, warp], format="csr")
    return {
        "add": (lambda a, b: T.add(a, b), {"a": x, "b": _t(rng, 4, 6)}),
        "sub": (lambda a, b: T.sub(a, b), {"a": x, "b": y}),
        "mul": (lambda a, b: T.mul(a, b), {"a": x, "b": _t(rng, 1, 6)}),
        "hadamard": (lambda a, b: T.hadamard(a, b), {"a": x, "b": y}),
        "broadcast_mul": (lambda a, g: T.broadcast_mul(a, g), {"a": x, "g": _t(rng, 3)}),
        "sigmoid": (lambda a: T.sigmoid(a), {"a": x}),
        "tanh": (lambda a: T.tanh(a), {"a": x}),
        "relu": (lambda a: T.relu(a), {"a": k}),
        "exp": (lambda a: T.exp(a), {"a": x}),
        "log": (lambda a: T.log(a), {"a": pos}),
        "abs": (lambda a: T.abs(a), {"a": k}),
        "clamp": (lambda a: T.clamp(a, -0.9, 0.9), {"a": k}),
        "sum": (lambda a: T.sum(a, axis=1, keepdims=True), {"a": x}),
        "mean": (lambda a: T.mean(a, axis=(1, 2)), {"a": x}),
        "reshape": (lambda a: T.reshape(a, (12, 6)), {"a": x}),
        "index": (lambda a: T.index(a, (np.array([0, 2, 2]), slice(None), np.array([1, 3, 3]))), {"a": x}),
        "concat": (lambda a, b: T.concat([a, b], axis=-1), {"a": x, "b": y}),
        "stack": (lambda a, b: T.stack([a, b], axis=1), {"a": x, "b": y}),
        "concat_channels": (lambda a, b: T.concat_channels([a, b]), {"a": x, "b": y}),
        "softmax": (lambda a: T.softmax(a, axis=0), {"a": x}),
        "dw_conv2d": (lambda a, w: T.dw_conv2d(a, w, 2), {"a": x, "w": _t(rng, 3, 5, 5, scale=0.3)}),
        "conv1x1": (lambda a, w, b: T.conv1x1(a, w, b), {"a": x, "w": _t(rng, 2, 3), "b": _t(rng, 2)}),
        "global_avg_pool": (lambda a: T.global_avg_pool(a), {"a": x}),
        "fully_connected": (lambda a, w, b: T.fully_connected(a, w, b),
                            {"a": v, "w": _t(rng, 4, 3), "b": _t(rng, 4)}),
        "channel_conv1d": (lambda a, w: T.channel_conv1d(a, w), {"a": _t(rng, 2, 7), "w": _t(rng, 3)}),
        "sparse_warp": (lambda a: T.sparse_warp(a, warp2), {"a": _t(rng, 2, 3, *_GRID.shape[1:])}),
    }


def _fusion_cases(rng) -> dict[str, tuple[Callable, dict[str, Tensor]]]:
    C, H, W = 3, 5, 6
    out = {}
    for op in FUSION_OPS:
        params = init_temporal(op, C, 1, rng)
        for t in params.values():
            if t.data.ndim == 1 and not t.data.any():
                t.data = rng.normal(scale=0.5, size=t.shape)   # nonzero biases exercise every path
        frames = {"f0": _t(rng, C, H, W), "f1": _t(rng, C, H, W)}

        def fn(_op=op, _p=params, **kw):
            return temporal_fuse(_op, [kw["f0"], kw["f1"]], {**_p, **{k: kw[k] for k in _p}})
        out[f"fusion.{op}"] = (fn, {**frames, **params})
    p = DafParams.init(3, 2, rng)
    p.se_bias.data = rng.normal(scale=0.5, size=p.se_bias.shape)
    p.proj_bias.data = rng.normal(scale=0.5, size=p.proj_bias.shape)
    fr = [_t(rng, 3, H, W) for _ in range(3)]

    def daf(**kw):
        return daf_forward([kw["b0"], kw["b1"], kw["b2"]], p)
    out["daf_forward"] = (daf, {"b0": fr[0], "b1": fr[1], "b2": fr[2], **p.tensors()})
    return out


def _loss_case(rng):
    from ..training import Targets, detection_loss
    heat = np.zeros((1, 2, 4, 5))
    heat[0, 1, 2, 3] = heat[0, 0, 0, 1] = 1
    tg = Targets(heat, (np.array([0, 0]), np.array([2, 0]), np.array([3, 1])), rng.normal(size=(2, 6)))

    def fn(z, box):
        return detection_loss(T.sigmoid(z), box, tg)[0]
    return {"detection_loss": (fn, {"z": _t(rng, 1, 2, 4, 5), "box": _t(rng, 2, 6)})}


def gradient_suite(seed: int = 0, eps: float = EPS, tol: float = TOL, n_coords: int = N_COORDS,
                   cases: list[str] | None = None) -> list[dict]:
    """Check every tensor of every case against central differences, one row per tensor."""
    rng = np.random.default_rng(seed)
    all_cases = {**_op_cases(rng), **_fusion_cases(rng), **_loss_case(rng)}
    rows = []
    for name, (fn, tensors) in all_cases.items():
        if cases is not None and name not in cases:
            continue
        out_shape = fn(**tensors).shape
        w = Tensor(np.random.default_rng([seed, len(name)]).normal(size=out_shape))

        def f(_fn=fn, _t=tensors, _w=w):
            return T.sum(T.mul(_fn(**_t), _w))
        for tname, t in tensors.items():
            rep = finite_diff_check(f, t, eps=eps, tol=tol, n_coords=n_coords, seed=seed)
            rows.append({"case": name, "tensor": tname, "n_checked": rep.n_checked,
                         "max_rel_error": rep.max_rel_error, "tol": tol, "passed": rep.passed})
    return rows


def case_names() -> list[str]:
    rng = np.random.default_rng(0)
    return [*_op_cases(rng), *_fusion_cases(rng), *_loss_case(rng)]

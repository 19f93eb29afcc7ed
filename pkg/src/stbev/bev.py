"""BEV grids, pillar voxelization, and continuous-coordinate feature alignment.

Grid coordinates are ``(row, col)`` with cell centers at integers, so the
world corner ``(x_min, y_min)`` sits at ``(-0.5, -0.5)``.  Rows follow ``y``
and columns follow ``x``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import PointCloud, Pose, pose_inverse

# Sample positions closer than this to a lattice point are snapped onto it, so
# identity and integer-cell warps are exact rather than carrying round-off weights.
_SNAP = 1e-9


class GridError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    x_min: float = -19.2
    x_max: float = 19.2
    y_min: float = -19.2
    y_max: float = 19.2
    z_min: float = -5.0
    z_max: float = 3.0
    cell: float = 0.6
    channels: int = 16
    count_cap: int = 32

    def __post_init__(self):
        if not self.cell > 0:
            raise GridError("cell size must be positive")
        if self.channels < 1:
            raise GridError("grid needs at least one channel")
        if not self.z_max > self.z_min:
            raise GridError("z range is empty")
        for lo, hi in ((self.x_min, self.x_max), (self.y_min, self.y_max)):
            n = (hi - lo) / self.cell
            if n < 0.5 or abs(n - round(n)) > 1e-6:
                raise GridError(f"extent {hi - lo} is not a positive multiple of cell {self.cell}")

    @property
    def cols(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell))

    @property
    def rows(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.rows, self.cols)

    @classmethod
    def desk(cls, **kw) -> GridConfig:
        """64 x 64 cells of 0.6 m, 16 channels."""
        return cls(**kw)

    @classmethod
    def full_scale(cls) -> GridConfig:
        """180 x 180 cells of 0.6 m over [-54, 54] m, z in [-5, 3] m, 128 channels."""
        return cls(-54.0, 54.0, -54.0, 54.0, -5.0, 3.0, 0.6, 128)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> GridConfig:
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense ``channels x rows x cols`` features over ``grid``."""

    data: np.ndarray
    grid: GridConfig
    frame_offset: int = 0

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64, copy=True)
        if d.ndim != 3 or d.shape[1:] != (self.grid.rows, self.grid.cols):
            raise GridError(f"feature map shape {d.shape} does not match grid {self.grid.rows}x{self.grid.cols}")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature map entries must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "frame_offset", int(self.frame_offset))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @classmethod
    def zeros(cls, grid: GridConfig, channels: int | None = None, frame_offset: int = 0) -> FeatureMap:
        c = grid.channels if channels is None else channels
        return cls(np.zeros((c, grid.rows, grid.cols)), grid, frame_offset)


def voxelize(pts: PointCloud, grid: GridConfig) -> FeatureMap:
    """Pillar features: normalized count, mean intensity, normalized mean z.

    Channels past the third are zero.  Points outside
    ``[x_min, x_max) x [y_min, y_max) x [z_min, z_max]`` are dropped.
    """
    if grid.channels < 1:
        raise GridError("grid needs at least one channel")
    R, C = grid.rows, grid.cols
    p = pts.points
    col = np.floor((p[:, 0] - grid.x_min) / grid.cell).astype(np.int64)
    row = np.floor((p[:, 1] - grid.y_min) / grid.cell).astype(np.int64)
    keep = ((p[:, 0] >= grid.x_min) & (p[:, 0] < grid.x_max)
            & (p[:, 1] >= grid.y_min) & (p[:, 1] < grid.y_max)
            & (p[:, 2] >= grid.z_min) & (p[:, 2] <= grid.z_max)
            & (row >= 0) & (row < R) & (col >= 0) & (col < C))
    flat = row[keep] * C + col[keep]
    count = np.bincount(flat, minlength=R * C).astype(np.float64)
    occ = count > 0
    feats = np.zeros((max(grid.channels, 3), R * C))
    feats[0] = count / grid.count_cap
    inten = np.bincount(flat, weights=pts.intensity[keep], minlength=R * C)
    zn = (p[keep, 2] - grid.z_min) / (grid.z_max - grid.z_min)
    zsum = np.bincount(flat, weights=zn, minlength=R * C)
    feats[1, occ] = inten[occ] / count[occ]
    feats[2, occ] = zsum[occ] / count[occ]
    return FeatureMap(feats[: grid.channels].reshape(grid.channels, R, C), grid, pts.timestamp_index)


def world_to_grid(grid: GridConfig, xy) -> np.ndarray:
    """World ``(..., 2)`` meters ``(x, y)`` to continuous ``(row, col)``."""
    xy = np.asarray(xy, dtype=np.float64)
    row = (xy[..., 1] - grid.y_min) / grid.cell - 0.5
    col = (xy[..., 0] - grid.x_min) / grid.cell - 0.5
    return np.stack([row, col], axis=-1)


def grid_to_world(grid: GridConfig, rc) -> np.ndarray:
    """Continuous ``(..., 2)`` ``(row, col)`` to world ``(x, y)`` meters."""
    rc = np.asarray(rc, dtype=np.float64)
    x = grid.x_min + (rc[..., 1] + 0.5) * grid.cell
    y = grid.y_min + (rc[..., 0] + 0.5) * grid.cell
    return np.stack([x, y], axis=-1)


def cell_centers(grid: GridConfig) -> np.ndarray:
    """World ``(rows*cols, 2)`` centers in row-major order."""
    r, c = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    return grid_to_world(grid, np.stack([r.ravel(), c.ravel()], axis=-1))


def _snap(v: np.ndarray) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) < _SNAP, r, v)


def bilinear_weights(rc: np.ndarray, rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat neighbor indices and weights, both ``(..., 4)``, for positions ``rc``.

    Neighbors outside the grid get weight 0 (and a dummy index 0), which is the
    zero fill for out-of-hull contributions.
    """
    rc = _snap(np.asarray(rc, dtype=np.float64))
    r, c = rc[..., 0], rc[..., 1]
    r0, c0 = np.floor(r), np.floor(c)
    fr, fc = r - r0, c - c0
    r0, c0 = r0.astype(np.int64), c0.astype(np.int64)
    nr = np.stack([r0, r0, r0 + 1, r0 + 1], axis=-1)
    nc = np.stack([c0, c0 + 1, c0, c0 + 1], axis=-1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=-1)
    valid = (nr >= 0) & (nr < rows) & (nc >= 0) & (nc < cols)
    w = np.where(valid, w, 0.0)
    idx = np.where(valid, nr * cols + nc, 0)
    return idx, w


def bilinear_sample(fm: FeatureMap, pos) -> np.ndarray:
    """Channel vector at continuous ``(row, col)``."""
    idx, w = bilinear_weights(np.asarray(pos, dtype=np.float64), fm.grid.rows, fm.grid.cols)
    flat = fm.data.reshape(fm.channels, -1).astype(np.float64)
    return flat[:, idx] @ w


def warp_weights(t_hist_to_cur: Pose, grid: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-warp sampling table for moving a historical map into the current grid.

    Returns ``(idx, w)`` of shape ``(rows*cols, 4)``: output cell ``p`` is
    ``sum_k w[p, k] * hist[:, idx[p, k]]``.  Current cell centers are lifted to
    3D at z = 0, mapped by the inverse pose, and projected back onto the ground
    plane.
    """
    xy = cell_centers(grid)
    pts = np.concatenate([xy, np.zeros((len(xy), 1))], axis=1)
    src = pose_inverse(t_hist_to_cur).apply(pts)[:, :2]
    return bilinear_weights(world_to_grid(grid, src), grid.rows, grid.cols)


def apply_warp(data: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply a ``warp_weights`` table to a ``(C, rows, cols)`` array."""
    C, R, W = data.shape
    flat = data.reshape(C, R * W).astype(np.float64)
    out = np.einsum("cpk,pk->cp", flat[:, idx], w)
    return out.reshape(C, R, W)


def align_bev(hist: FeatureMap, t_hist_to_cur: Pose, grid: GridConfig) -> FeatureMap:
    """Resample a historical BEV map into the current frame's grid (bilinear)."""
    if hist.grid != grid:
        raise AlignmentError("historical map grid differs from the target grid")
    idx, w = warp_weights(t_hist_to_cur, grid)
    return FeatureMap(apply_warp(hist.data, idx, w), grid, hist.frame_offset)


def save_bevf(path, fm: FeatureMap) -> None:
    """Write the ``.bevf`` format: JSON header line, then little-endian f32 data."""
    header = {"channels": fm.channels, "rows": fm.grid.rows, "cols": fm.grid.cols,
              "grid": fm.grid.to_json(), "frame_offset": fm.frame_offset, "dtype": "f32"}
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        f.write(np.ascontiguousarray(fm.data, dtype="<f4").tobytes())


def load_bevf(path) -> FeatureMap:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    if header.get("dtype") != "f32":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    shape = (header["channels"], header["rows"], header["cols"])
    data = np.frombuffer(raw[nl + 1:], dtype="<f4").reshape(shape)
    return FeatureMap(data, GridConfig.from_json(header["grid"]), header["frame_offset"])

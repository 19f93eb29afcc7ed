"""Deterministic synthetic driving sequences.

The ego vehicle follows a constant-turn-rate arc.  Landmarks are static in
the world and movers travel at constant velocity.  Every object carries a
fixed set of surface points which each frame observes with Gaussian noise,
fewer of them at longer range, and not at all while the object is occluded.
A blurred, noisy rendering of the visible boxes stands in for the camera
branch.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..bev import FeatureMap, GridConfig, load_bevf, save_bevf
from ..geometry import PointCloud, Pose, pose_inverse

LANDMARK, MOVER = 0, 1
CLASS_NAMES = ("landmark", "mover")
# per class: (w range, l range, height, mean intensity)
_SHAPES = {LANDMARK: ((0.6, 0.9), (0.6, 0.9), 1.0, 0.8),
           MOVER: ((0.8, 1.0), (1.4, 2.0), 1.6, 0.35)}
_SUPERSAMPLE = 4
_BLUR = np.outer([1, 2, 1], [1, 2, 1]) / 16.0


def toy_grid() -> GridConfig:
    """24 m square at 0.6 m cells (40 x 40), 8 feature channels."""
    return GridConfig(-12.0, 12.0, -12.0, 12.0, -5.0, 3.0, 0.6, 8)


@dataclass(frozen=True)
class SceneConfig:
    num_static_landmarks: int = 6
    num_movers: int = 6
    mover_speed_range: tuple[float, float] = (0.5, 2.0)
    ego_speed: float = 4.0
    ego_yaw_rate: float = 0.1
    frame_dt: float = 0.25
    num_frames: int = 5
    lidar_points_per_object: int = 24
    noise_sigma: float = 0.05
    seed: int = 0
    grid: GridConfig = field(default_factory=toy_grid)
    occlusion: tuple[float, float] = (0.15, 0.3)   # per-frame probability, landmark / mover
    clutter_clusters: int = 4
    semantic_noise: float = 0.05
    min_separation: float = 2.0
    range_falloff: float = 8.0                     # full point density inside this range (m)

    def __post_init__(self):
        if not self.frame_dt > 0:
            raise ValueError("frame_dt must be positive")
        if self.num_frames < 1:
            raise ValueError("a sequence needs at least one frame")
        if min(self.num_static_landmarks, self.num_movers, self.lidar_points_per_object,
               self.clutter_clusters) < 0 or self.noise_sigma < 0:
            raise ValueError("counts and noise must be non-negative")
        lo, hi = self.mover_speed_range
        if not 0 <= lo <= hi:
            raise ValueError("mover speed range must satisfy 0 <= lo <= hi")
        if not all(0 <= p < 1 for p in self.occlusion):
            raise ValueError("occlusion probabilities must lie in [0, 1)")

    @classmethod
    def mover_heavy(cls, **kw) -> SceneConfig:
        return cls(**{"num_static_landmarks": 2, "num_movers": 10, **kw})

    @classmethod
    def static_only(cls, **kw) -> SceneConfig:
        return cls(**{"num_movers": 0, "num_static_landmarks": 10, **kw})

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> SceneConfig:
        obj = dict(obj)
        if "grid" in obj:
            obj["grid"] = GridConfig.from_json(obj["grid"])
        for k in ("mover_speed_range", "occlusion"):
            if k in obj:
                obj[k] = tuple(obj[k])
        return cls(**obj)


@dataclass(frozen=True)
class GroundTruth:
    obj_id: int
    cls: int
    box: tuple[float, float, float, float, float]   # ego-frame x, y, w, l, yaw
    velocity: tuple[float, float]                   # world frame, m/s
    occluded: bool = False

    def to_json(self, frame: int) -> dict:
        return {"frame": frame, "id": self.obj_id, "class": self.cls, "box": list(self.box),
                "velocity": list(self.velocity), "occluded": self.occluded}


@dataclass
class FrameSample:
    points: PointCloud
    semantic: FeatureMap
    pose: Pose
    gt: list[GroundTruth]
    index: int = 0


@dataclass
class _Object:
    cls: int
    w: float
    l: float
    h: float
    p0: np.ndarray          # world xy at t = 0
    vel: np.ndarray         # world xy velocity
    yaw: float              # world heading
    surface: np.ndarray     # (P, 3) points in the body frame
    intensity: np.ndarray

    def center(self, t: float) -> np.ndarray:
        return self.p0 + self.vel * t


def ego_pose(cfg: SceneConfig, t: float) -> Pose:
    v, w = cfg.ego_speed, cfg.ego_yaw_rate
    if abs(w) < 1e-12:
        x, y = v * t, 0.0
    else:
        x, y = v / w * math.sin(w * t), v / w * (1 - math.cos(w * t))
    return Pose.from_ypr(w * t, 0.0, 0.0, [x, y, 0.0])


def wrap_angle(a: float) -> float:
    a = math.atan2(math.sin(a), math.cos(a))
    return math.pi if a <= -math.pi else a


def _surface(rng, w, l, h, n) -> np.ndarray:
    """``n`` points on the vertical faces of a ``w x l x h`` box, body frame (x along l)."""
    u = rng.uniform(0, 2 * (w + l), n)
    x = np.where(u < l, u - l / 2, np.where(u < l + w, l / 2, np.where(u < 2 * l + w, l / 2 - (u - l - w), -l / 2)))
    y = np.where(u < l, -w / 2, np.where(u < l + w, -w / 2 + (u - l), np.where(u < 2 * l + w, w / 2, w / 2 - (u - 2 * l - w))))
    z = rng.uniform(0.1, h, n)
    return np.stack([x, y, z], axis=1)


def _place(cfg: SceneConfig, rng, n: int) -> np.ndarray:
    g, margin = cfg.grid, 1.0
    out: list[np.ndarray] = []
    for _ in range(200 * max(n, 1)):
        if len(out) == n:
            break
        p = rng.uniform([g.x_min + margin, g.y_min + margin], [g.x_max - margin, g.y_max - margin])
        if all(np.linalg.norm(p - q) >= cfg.min_separation for q in out):
            out.append(p)
    if len(out) < n:
        raise ValueError(f"could not place {n} objects {cfg.min_separation} m apart")
    return np.array(out).reshape(n, 2)


def _objects(cfg: SceneConfig, rng) -> list[_Object]:
    t_cur = (cfg.num_frames - 1) * cfg.frame_dt
    cur = ego_pose(cfg, t_cur)
    classes = [LANDMARK] * cfg.num_static_landmarks + [MOVER] * cfg.num_movers
    ego_xy = _place(cfg, rng, len(classes))
    objs = []
    for cls, xy in zip(classes, ego_xy):
        (w0, w1), (l0, l1), h, inten = _SHAPES[cls]
        w, l = rng.uniform(w0, w1), rng.uniform(l0, l1)
        yaw = rng.uniform(-math.pi, math.pi)
        world = cur.apply(np.array([xy[0], xy[1], 0.0]))[:2]
        if cls == MOVER:
            speed = rng.uniform(*cfg.mover_speed_range)
            vel = speed * np.array([math.cos(yaw), math.sin(yaw)])
        else:
            vel = np.zeros(2)
        surf = _surface(rng, w, l, h, cfg.lidar_points_per_object)
        it = np.clip(rng.normal(inten, 0.08, cfg.lidar_points_per_object), 0, 1)
        objs.append(_Object(cls, w, l, h, world - vel * t_cur, vel, yaw, surf, it))
    return objs


def _box_coverage(grid: GridConfig, box) -> np.ndarray:
    """Fraction of each cell covered by an oriented ``(x, y, w, l, yaw)`` box."""
    x, y, w, l, yaw = box
    cov = np.zeros((grid.rows, grid.cols))
    reach = 0.5 * math.hypot(w, l)
    c0 = max(int((x - reach - grid.x_min) / grid.cell), 0)
    c1 = min(int((x + reach - grid.x_min) / grid.cell) + 1, grid.cols)
    r0 = max(int((y - reach - grid.y_min) / grid.cell), 0)
    r1 = min(int((y + reach - grid.y_min) / grid.cell) + 1, grid.rows)
    if c0 >= c1 or r0 >= r1:
        return cov
    s = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    xs = grid.x_min + (np.arange(c0, c1)[:, None] + s).ravel() * grid.cell
    ys = grid.y_min + (np.arange(r0, r1)[:, None] + s).ravel() * grid.cell
    X, Y = np.meshgrid(xs, ys)
    dx, dy = X - x, Y - y
    ca, sa = math.cos(yaw), math.sin(yaw)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    inside = (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2)
    blocks = inside.reshape(r1 - r0, _SUPERSAMPLE, c1 - c0, _SUPERSAMPLE).mean(axis=(1, 3))
    cov[r0:r1, c0:c1] = blocks
    return cov


def render_semantic(grid: GridConfig, boxes, classes, rng=None, noise: float = 0.0,
                    num_classes: int = 2) -> FeatureMap:
    """Per-class box occupancy, blurred with a 3x3 binomial kernel, plus optional noise."""
    sem = np.zeros((num_classes, grid.rows, grid.cols))
    for box, c in zip(boxes, classes):
        sem[c] += _box_coverage(grid, box)
    sem = np.stack([ndimage.convolve(np.minimum(ch, 1.0), _BLUR, mode="constant") for ch in sem])
    if noise > 0 and rng is not None:
        sem = sem + rng.normal(0, noise, sem.shape)
    return FeatureMap(sem, grid)


def generate_sequence(cfg: SceneConfig) -> list[FrameSample]:
    """Chronological frames; the last one is the current frame."""
    rng = np.random.default_rng(cfg.seed)
    objs = _objects(cfg, rng)
    g = cfg.grid
    frames = []
    for i in range(cfg.num_frames):
        t = i * cfg.frame_dt
        ego = ego_pose(cfg, t)
        to_ego = pose_inverse(ego)
        pts, inten, gt, boxes, classes = [], [], [], [], []
        for oid, o in enumerate(objs):
            c = o.center(t)
            center = to_ego.apply(np.array([c[0], c[1], 0.0]))
            yaw = wrap_angle(o.yaw - ego.yaw)
            box = (float(center[0]), float(center[1]), o.w, o.l, yaw)
            occluded = bool(rng.random() < cfg.occlusion[o.cls])
            rng_pts = math.hypot(center[0], center[1])
            n = len(o.surface)
            if rng_pts > cfg.range_falloff:
                n = max(4, int(round(n * cfg.range_falloff / rng_pts))) if n else 0
            noise = rng.normal(0, cfg.noise_sigma, (n, 3)) if cfg.noise_sigma > 0 else np.zeros((n, 3))
            if not occluded and n:
                body = o.surface[:n]
                ca, sa = math.cos(o.yaw), math.sin(o.yaw)
                world = np.stack([c[0] + ca * body[:, 0] - sa * body[:, 1],
                                  c[1] + sa * body[:, 0] + ca * body[:, 1], body[:, 2]], axis=1)
                pts.append(to_ego.apply(world) + noise)
                inten.append(o.intensity[:n])
                boxes.append(box)
                classes.append(o.cls)
            if g.x_min <= center[0] < g.x_max and g.y_min <= center[1] < g.y_max:
                gt.append(GroundTruth(oid, o.cls, box, (float(o.vel[0]), float(o.vel[1])), occluded))
        for _ in range(cfg.clutter_clusters):
            ctr = rng.uniform([g.x_min, g.y_min], [g.x_max, g.y_max])
            m = int(rng.integers(4, 12))
            xy = ctr + rng.normal(0, 0.25, (m, 2))
            pts.append(np.column_stack([xy, rng.uniform(0.0, 1.5, m)]))
            inten.append(rng.uniform(0, 1, m))
        P = np.concatenate(pts) if pts else np.zeros((0, 3))
        I = np.concatenate(inten) if inten else np.zeros(0)
        sem = render_semantic(g, boxes, classes, rng, cfg.semantic_noise)
        frames.append(FrameSample(PointCloud(P, I, i), sem, ego, gt, i))
    return frames


def current_first(seq: list[FrameSample], n: int | None = None) -> list[FrameSample]:
    """The last ``n`` frames of a chronological sequence, newest first."""
    out = seq[::-1]
    return out if n is None else out[:n]


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, np.uint64)[0])


def make_sequences(cfg: SceneConfig, count: int, split: int = 0) -> list[list[FrameSample]]:
    return [generate_sequence(replace(cfg, seed=derive_seed(cfg.seed, split, i))) for i in range(count)]


# -- persistence -----------------------------------------------------------------

def save_sequence(path, frames: list[FrameSample], cfg: SceneConfig | None = None) -> None:
    """Write ``poses.json``, ``gt.jsonl`` and per-frame ``.bevf`` / ``.bin`` + ``.json`` files."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    poses = {"frames": [{"index": f.index, **f.pose.to_json()} for f in frames]}
    if cfg is not None:
        poses["scene"] = cfg.to_json()
    (d / "poses.json").write_text(json.dumps(poses, indent=1))
    with open(d / "gt.jsonl", "w") as fh:
        for f in frames:
            for g in f.gt:
                fh.write(json.dumps(g.to_json(f.index)) + "\n")
    for f in frames:
        stem = f"frame_{f.index:03d}"
        save_bevf(d / f"{stem}.bevf", f.semantic)
        quad = np.column_stack([f.points.points, f.points.intensity]).astype("<f4")
        (d / f"{stem}.bin").write_bytes(quad.tobytes())
        side = {"num_points": len(f.points), "fields": ["x", "y", "z", "intensity"],
                "dtype": "f32", "endian": "little", "timestamp_index": f.points.timestamp_index}
        (d / f"{stem}.json").write_text(json.dumps(side))


def load_sequence(path) -> list[FrameSample]:
    d = Path(path)
    poses = json.loads((d / "poses.json").read_text())["frames"]
    gts: dict[int, list[GroundTruth]] = {}
    for line in (d / "gt.jsonl").read_text().splitlines():
        if line.strip():
            o = json.loads(line)
            gts.setdefault(o["frame"], []).append(GroundTruth(
                o["id"], o["class"], tuple(o["box"]), tuple(o["velocity"]), o.get("occluded", False)))
    frames = []
    for p in poses:
        i = p["index"]
        stem = f"frame_{i:03d}"
        side = json.loads((d / f"{stem}.json").read_text())
        quad = np.frombuffer((d / f"{stem}.bin").read_bytes(), dtype="<f4").reshape(side["num_points"], 4)
        pc = PointCloud(quad[:, :3].astype(np.float64), quad[:, 3].astype(np.float64), side["timestamp_index"])
        frames.append(FrameSample(pc, load_bevf(d / f"{stem}.bevf"), Pose.from_json(p), gts.get(i, []), i))
    return frames

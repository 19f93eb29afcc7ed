"""Staged training with group freezing.

Stages 1-3 train on the current frame only: lidar branch first (image input
zeroed), then the image branch with the lidar branch frozen, then the
cross-modal fusion.  Stage 4 brings in the history window and, under
protective freezing, updates only the temporal fusion, the optional
post-alignment adapter and the head.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .bev import GridConfig, world_to_grid
from .harness.metrics import ToyMetrics, evaluate
from .harness.scenes import SceneConfig, current_first, derive_seed, make_sequences, wrap_angle
from .pipeline.model import group_of
from .pipeline import (GROUPS, Detection, Model, ModelConfig, SampleInputs, box_raw, collate, decode_batch,
                       prepare_sample)
from .tensor import Tensor

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
CLAMP_EPS = 1e-4
ENCODERS = ("lidar_encoder", "image_encoder")
CSV_HEADER = ("step", "stage", "heatmap_loss", "box_loss", "total")


@dataclass
class ParamGroup:
    name: str
    tensors: list[Tensor]
    frozen: bool = False


def param_groups(model: Model, trainable: Sequence[str] = GROUPS) -> dict[str, ParamGroup]:
    return {g: ParamGroup(g, [model.params[n] for n in names], g not in trainable)
            for g, names in model.groups().items()}


@dataclass(frozen=True)
class LossWeights:
    heatmap: float = 1.0
    box: float = 1.0


@dataclass(frozen=True)
class StageSpec:
    name: str
    trainable: tuple[str, ...]
    frozen: tuple[str, ...]
    steps: int = 200
    lr: float = 1e-3
    weights: LossWeights = LossWeights()
    multi_frame: bool = False
    use_image: bool = True

    def to_json(self) -> dict:
        d = asdict(self)
        d["trainable"], d["frozen"] = list(self.trainable), list(self.frozen)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> StageSpec:
        obj = dict(obj)
        obj["trainable"] = tuple(obj["trainable"])
        obj["frozen"] = tuple(obj.get("frozen", [g for g in GROUPS if g not in obj["trainable"]]))
        obj["weights"] = LossWeights(**obj.get("weights", {}))
        return cls(**obj)


def _stage(name, trainable, **kw) -> StageSpec:
    return StageSpec(name, tuple(trainable), tuple(g for g in GROUPS if g not in trainable), **kw)


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[StageSpec, ...]

    def validate(self, protective: bool = False) -> None:
        for s in self.stages:
            unknown = set(s.trainable) | set(s.frozen)
            unknown -= set(GROUPS)
            if unknown:
                raise T.ConfigError(f"stage {s.name!r} names unknown groups {sorted(unknown)}")
            if set(s.trainable) & set(s.frozen):
                raise T.ConfigError(f"stage {s.name!r} both trains and freezes {set(s.trainable) & set(s.frozen)}")
            if s.steps < 0 or not s.lr >= 0:
                raise T.ConfigError(f"stage {s.name!r} needs steps >= 0 and lr >= 0")
        if protective:
            last = self.stages[-1]
            if not set(ENCODERS) <= set(last.frozen) or not set(last.trainable) <= {"temporal", "adapter", "head"}:
                raise T.ConfigError("the temporal stage must freeze both encoders and train only temporal/adapter/head")

    @classmethod
    def default(cls, steps: int = 200, batch_lr: tuple[float, float] = (1e-3, 5e-4)) -> StageSchedule:
        lr, lr4 = batch_lr
        return cls((
            _stage("lidar", ("lidar_encoder", "fusion", "enhance", "head"), steps=steps, lr=lr, use_image=False),
            _stage("image", ("image_encoder", "fusion", "head"), steps=steps, lr=lr),
            _stage("fusion", ("fusion", "enhance", "head"), steps=steps, lr=lr),
            _stage("temporal", ("temporal", "adapter", "head"), steps=steps, lr=lr4, multi_frame=True),
        ))

    def to_json(self) -> dict:
        return {"stages": [s.to_json() for s in self.stages]}

    @classmethod
    def from_json(cls, obj: dict | str) -> StageSchedule:
        if isinstance(obj, str):
            obj = json.loads(obj)
        sched = cls(tuple(StageSpec.from_json(s) for s in obj["stages"]))
        sched.validate()
        return sched


@dataclass(frozen=True)
class LossReport:
    step: int
    stage: str
    heatmap_loss: float
    box_loss: float
    total: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.heatmap_loss, self.box_loss, self.total)):
            raise FloatingPointError(f"non-finite loss at step {self.step}")


# -- targets and losses -----------------------------------------------------------

@dataclass
class Targets:
    """Rendered ground truth for a batch: center heatmap plus box targets at center cells."""

    heat: np.ndarray          # (B, K, H, W) in {0, 1}
    index: tuple              # (b, r, c) integer arrays of the positive cells
    boxes: np.ndarray         # (npos, 6)

    @property
    def npos(self) -> int:
        return len(self.boxes)


def box_target(box, cell_rc, grid: GridConfig, base_size=(1.0, 1.0)) -> np.ndarray:
    """``[dx, dy, log w/bw, log l/bl, sin yaw, cos yaw]`` with offsets in cells and yaw folded to cos >= 0."""
    x, y, w, l, yaw = box
    rc = world_to_grid(grid, [x, y])
    yaw = wrap_angle(yaw)
    if math.cos(yaw) < 0:
        yaw = wrap_angle(yaw + math.pi)
    return np.array([rc[1] - cell_rc[1], rc[0] - cell_rc[0], math.log(w / base_size[0]),
                     math.log(l / base_size[1]), math.sin(yaw), math.cos(yaw)])


def render_targets(gts: Sequence[Sequence], grid: GridConfig, num_classes: int = 2,
                   base_size=(1.0, 1.0)) -> Targets:
    B = len(gts)
    heat = np.zeros((B, num_classes, grid.rows, grid.cols))
    bi, ri, ci, boxes = [], [], [], []
    for b, objs in enumerate(gts):
        for g in objs:
            rc = world_to_grid(grid, g.box[:2])
            r, c = int(np.floor(rc[0] + 0.5)), int(np.floor(rc[1] + 0.5))
            if not (0 <= r < grid.rows and 0 <= c < grid.cols) or heat[b, :, r, c].any():
                continue
            heat[b, g.cls, r, c] = 1.0
            bi.append(b), ri.append(r), ci.append(c)
            boxes.append(box_target(g.box, (r, c), grid, base_size))
    idx = tuple(np.array(v, dtype=np.int64) for v in (bi, ri, ci))
    return Targets(heat, idx, np.array(boxes).reshape(-1, 6))


def _pow(x: Tensor, gamma: float) -> Tensor:
    if gamma == 2.0:
        return T.mul(x, x)
    return T.exp(T.mul(T.log(x), gamma))


def focal_loss(prob: Tensor, target: np.ndarray, gamma: float = FOCAL_GAMMA,
               alpha: float = FOCAL_ALPHA, eps: float = CLAMP_EPS) -> Tensor:
    """Sum of the focal penalty over all cells, divided by ``max(1, #positives)``."""
    p = T.clamp(prob, eps, 1 - eps)
    pos = Tensor(target)
    neg = Tensor(1.0 - target)
    one_minus = T.sub(1.0, p)
    lp = T.mul(T.mul(_pow(one_minus, gamma), T.log(p)), -alpha)
    ln = T.mul(T.mul(_pow(p, gamma), T.log(one_minus)), -(1 - alpha))
    total = T.add(T.sum(T.mul(lp, pos)), T.sum(T.mul(ln, neg)))
    return T.mul(total, 1.0 / max(1.0, float(target.sum())))


def detection_loss(pred_heatmap: Tensor, pred_boxes: Tensor | None, gt: Targets,
                   weights: LossWeights = LossWeights()) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, heatmap_term, box_term)``; ``pred_boxes`` holds one row per positive cell."""
    heat = focal_loss(pred_heatmap, gt.heat)
    if gt.npos and pred_boxes is not None:
        diff = T.abs(T.sub(pred_boxes, gt.boxes))
        box = T.mul(T.sum(diff), 1.0 / gt.npos)
    else:
        box = Tensor(np.zeros(()))
    total = T.add(T.mul(heat, weights.heatmap), T.mul(box, weights.box))
    return total, heat, box


def model_loss(model: Model, outs, gt: Targets, weights: LossWeights) -> tuple[Tensor, Tensor, Tensor]:
    """Detection loss averaged over the stages."""
    tot = heat = box = None
    b, r, c = gt.index
    for o in outs:
        pb = None
        if gt.npos:
            feats = T.index(o.features, (b, slice(None), r, c))     # (npos, C)
            pb = box_raw(feats, model.params)
        t, h, x = detection_loss(T.sigmoid(o.logits), pb, gt, weights)
        tot = t if tot is None else T.add(tot, t)
        heat = h if heat is None else T.add(heat, h)
        box = x if box is None else T.add(box, x)
    n = 1.0 / len(outs)
    return T.mul(tot, n), T.mul(heat, n), T.mul(box, n)


# -- optimizer --------------------------------------------------------------------

@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    moments: dict = field(default_factory=dict)   # name -> (m, v, t)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState,
                   lr: float, frozen: Sequence[str] = ()) -> None:
    """One adaptive-moment update with decoupled weight decay, in place.

    Frozen names and names without a gradient are left untouched.
    """
    skip = set(frozen)
    for name in sorted(grads):
        if name in skip:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        p = params[name]
        m, v, t = state.moments.get(name, (np.zeros(g.shape), np.zeros(g.shape), 0))
        t += 1
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        w = p.data.astype(np.float64)
        w = w - lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * w)
        p.data = w.astype(p.data.dtype)
        state.moments[name] = (m, v, t)


# -- data ------------------------------------------------------------------------

@dataclass
class TrainData:
    """Pre-voxelized, pre-aligned current-first windows with their ground truth."""

    samples: list[SampleInputs]
    gts: list[list]
    grid: GridConfig

    def __len__(self):
        return len(self.samples)

    @classmethod
    def build(cls, scene: SceneConfig, count: int, split: int, alignment: str = "bev",
              frames: int | None = None) -> TrainData:
        seqs = make_sequences(scene, count, split)
        samples, gts = [], []
        for seq in seqs:
            win = current_first(seq, frames)
            samples.append(prepare_sample(win, scene.grid, alignment))
            gts.append(win[0].gt)
        return cls(samples, gts, scene.grid)

    def batch(self, idx: Sequence[int], frames: int, model_cfg: ModelConfig):
        inp = collate([self.samples[i] for i in idx], frames)
        tg = render_targets([self.gts[i] for i in idx], self.grid, model_cfg.num_classes, model_cfg.base_size)
        return inp, tg


# -- schedule runner --------------------------------------------------------------

@dataclass
class ScheduleResult:
    reports: list[LossReport]
    checksums: list[dict[str, str]]          # per stage, after it ran: group -> sha256
    initial_checksums: dict[str, str]
    checkpoints: list[Path] = field(default_factory=list)

    def stage_reports(self, name: str) -> list[LossReport]:
        return [r for r in self.reports if r.stage == name]


def group_checksums(model: Model) -> dict[str, str]:
    return {g: T.checksum([model.params[n] for n in names]) for g, names in model.groups().items()}


def set_trainable(model: Model, trainable: Sequence[str]) -> list[str]:
    names = []
    for g, ns in model.groups().items():
        for n in ns:
            on = g in trainable
            model.params[n].requires_grad = on
            model.params[n].grad = None
            if on:
                names.append(n)
    return names


def train_step(model: Model, data: TrainData, idx: Sequence[int], spec: StageSpec, state: AdamWState,
               frames: int, trainable: list[str], grad_log: list | None = None) -> LossReport:
    inp, tg = data.batch(idx, frames if spec.multi_frame else 1, model.cfg)
    for n in trainable:
        model.params[n].grad = None
    outs = model.forward(inp, frames if spec.multi_frame else 1, temporal=spec.multi_frame,
                         use_image=spec.use_image)
    total, heat, box = model_loss(model, outs, tg, spec.weights)
    if grad_log is not None:
        with T.record_grad_targets() as log:
            T.backward(total)
        grad_log.extend(log)
    else:
        T.backward(total)
    grads = {n: model.params[n].grad for n in trainable if model.params[n].grad is not None}
    optimizer_step(model.params, grads, state, spec.lr)
    return LossReport(0, spec.name, float(heat.data), float(box.data), float(total.data))


def run_schedule(schedule: StageSchedule, data: TrainData, model: Model, seed: int = 0,
                 batch_size: int = 4, out_dir=None, frames: int | None = None,
                 stages: Sequence[int] | None = None, grad_log: list | None = None,
                 progress: Callable[[LossReport], None] | None = None) -> ScheduleResult:
    """Execute the schedule in order; one AdamW state per stage.

    Writes ``metrics.csv`` and ``stage{i}_{name}.ckpt`` under ``out_dir`` when
    given.  ``stages`` restricts the run to a subset of stage indices.
    """
    schedule.validate()
    frames = model.cfg.frames if frames is None else frames
    initial = group_checksums(model)
    reports, sums, ckpts = [], [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    step = 0
    for si, spec in enumerate(schedule.stages):
        if stages is not None and si not in stages:
            continue
        trainable = set_trainable(model, spec.trainable)
        rng = np.random.default_rng(derive_seed(seed, 7, si))
        state = AdamWState()
        for _ in range(spec.steps):
            idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
            rep = train_step(model, data, idx, spec, state, frames, trainable, grad_log)
            rep = replace(rep, step=step)
            reports.append(rep)
            if progress is not None:
                progress(rep)
            step += 1
        sums.append(group_checksums(model))
        if out is not None:
            path = out / f"stage{si + 1}_{spec.name}.ckpt"
            T.save_checkpoint(path, model.params)
            ckpts.append(path)
    set_trainable(model, GROUPS)
    if out is not None:
        write_reports(out / "metrics.csv", reports)
    return ScheduleResult(reports, sums, initial, ckpts)


def write_reports(path, reports: Sequence[LossReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow([r.step, r.stage, repr(r.heatmap_loss), repr(r.box_loss), repr(r.total)])


# -- evaluation ----------------------------------------------------------------------

def predict_dataset(model: Model, data: TrainData, frames: int | None = None, temporal: bool = True,
                    batch_size: int = 8) -> tuple[list[Detection], dict[int, list]]:
    """Detections for every sample (sample index as frame id) and the matching ground truth."""
    frames = model.cfg.frames if frames is None else frames
    dets, gt = [], {}
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            idx = list(range(s, min(s + batch_size, len(data))))
            inp = collate([data.samples[i] for i in idx], frames if temporal else 1)
            outs = model.forward(inp, frames if temporal else 1, temporal=temporal)
            for i, ds in zip(idx, decode_batch(outs, model, idx)):
                dets.extend(ds)
                gt[i] = data.gts[i]
    return dets, gt


def evaluate_model(model: Model, data: TrainData, frames: int | None = None, temporal: bool = True,
                   batch_size: int = 8) -> ToyMetrics:
    dets, gt = predict_dataset(model, data, frames, temporal, batch_size)
    return evaluate(dets, gt, radius=data.grid.cell, num_classes=model.cfg.num_classes)


# -- experiments: shared pretraining, stage-4 variants --------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a toy training experiment needs besides the seed."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_sequences: int = 64
    eval_sequences: int = 32
    steps: int = 200
    lr: float = 1e-3
    lr_temporal: float = 5e-4
    batch_size: int = 4

    def schedule(self) -> StageSchedule:
        return StageSchedule.default(self.steps, (self.lr, self.lr_temporal))

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in ("train_sequences", "eval_sequences", "steps", "lr",
                                           "lr_temporal", "batch_size")}
        d["scene"] = self.scene.to_json()
        d["model"] = self.model.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> ExperimentConfig:
        obj = dict(obj)
        if "scene" in obj:
            obj["scene"] = SceneConfig.from_json(obj["scene"])
        if "model" in obj:
            obj["model"] = ModelConfig.from_json(obj["model"])
        return cls(**obj)


@dataclass(frozen=True)
class Variant:
    """A training-strategy row: where history enters, how it is fused, what is frozen."""

    key: str
    description: str
    fusion_op: str
    symmetric: bool
    multi_frame_from: int          # first stage index (0-based) that sees the history window
    skip_image_stage: bool = False
    freeze_encoders: bool = True   # in the temporal stage


VARIANTS = {
    "a": Variant("a", "history from stage 1, symmetric Cat", "cat", True, 0, freeze_encoders=False),
    "b": Variant("b", "history from stage 2, symmetric Cat", "cat", True, 1, freeze_encoders=False),
    "c": Variant("c", "history from stage 3, symmetric Cat", "cat", True, 2, freeze_encoders=False),
    "d": Variant("d", "no image stage, history after stage 3, symmetric Cat", "cat", True, 3,
                 skip_image_stage=True, freeze_encoders=False),
    "e": Variant("e", "stage 4, frozen encoders, current-centric Cat", "cat", False, 3),
    "f": Variant("f", "stage 4, symmetric DAF, nothing frozen", "daf", True, 3, freeze_encoders=False),
    "g": Variant("g", "stage 4, frozen encoders, current-centric DAF", "daf", False, 3),
}


def variant_schedule(v: Variant, exp: ExperimentConfig) -> StageSchedule:
    base = exp.schedule().stages
    out = []
    for i, s in enumerate(base[:3]):
        trainable = tuple(s.trainable) + (("temporal",) if i >= v.multi_frame_from else ())
        steps = 0 if (i == 1 and v.skip_image_stage) else s.steps
        out.append(_stage(s.name, trainable, steps=steps, lr=s.lr, use_image=s.use_image,
                          multi_frame=i >= v.multi_frame_from))
    last = base[3]
    trainable = last.trainable if v.freeze_encoders else GROUPS
    out.append(_stage(last.name, trainable, steps=last.steps, lr=last.lr, multi_frame=True))
    return StageSchedule(tuple(out))


def variant_model_config(v: Variant, base: ModelConfig, history: int | None = None) -> ModelConfig:
    h = base.history if history is None else history
    return replace(base, fusion_op=v.fusion_op, symmetric=v.symmetric, history=h)


class Experiment:
    """Data and pretrained single-frame weights for one seed, reused across stage-4 variants.

    Sharing the stage 1-3 weights and the scenes gives every variant the same
    start, so seed-level comparisons between variants isolate the temporal stage.
    """

    def __init__(self, exp: ExperimentConfig, seed: int, frames: int | None = None):
        self.exp = exp
        self.seed = int(seed)
        scene = replace(exp.scene, seed=derive_seed(seed, 11))
        self.frames = frames or exp.scene.num_frames
        align = exp.model.alignment
        self.train = TrainData.build(scene, exp.train_sequences, 0, align, self.frames)
        self.eval = TrainData.build(scene, exp.eval_sequences, 1, align, self.frames)
        self._pretrained: dict[tuple, dict[str, np.ndarray]] = {}

    def model_config(self, v: Variant, history: int | None = None) -> ModelConfig:
        return variant_model_config(v, self.exp.model, history)

    def _pretrain(self, v: Variant, history: int) -> dict[str, np.ndarray]:
        key = (v.multi_frame_from, v.skip_image_stage, v.fusion_op if v.multi_frame_from < 3 else None,
               history if v.multi_frame_from < 3 else None)
        if key not in self._pretrained:
            model = Model(self.model_config(v, history), self.train.grid, seed=derive_seed(self.seed, 13))
            run_schedule(variant_schedule(v, self.exp), self.train, model, seed=self.seed,
                         batch_size=self.exp.batch_size, frames=history + 1, stages=[0, 1, 2])
            self._pretrained[key] = {k: t.data.copy() for k, t in model.params.items()}
        return self._pretrained[key]

    def run(self, v: Variant | str, history: int | None = None, out_dir=None
            ) -> tuple[Model, ScheduleResult, ToyMetrics]:
        """Pretrain (cached), run the temporal stage, evaluate on the held-out split."""
        v = VARIANTS[v] if isinstance(v, str) else v
        h = self.exp.model.history if history is None else history
        if h + 1 > self.frames:
            raise T.ConfigError(f"history {h} needs {h + 1} frames, data has {self.frames}")
        base = self._pretrain(v, h)
        model = Model(self.model_config(v, h), self.train.grid, seed=derive_seed(self.seed, 13))
        for k, a in base.items():
            if k in model.params and (v.multi_frame_from < 3 or group_of(k) != "temporal"):
                model.params[k].data = a.copy()
        res = run_schedule(variant_schedule(v, self.exp), self.train, model, seed=self.seed,
                           batch_size=self.exp.batch_size, frames=h + 1, stages=[3], out_dir=out_dir)
        return model, res, evaluate_model(model, self.eval, h + 1)


def ablation_run(variant: str, seed: int, exp: ExperimentConfig | None = None,
                 experiment: Experiment | None = None) -> ToyMetrics:
    """Train under one training-strategy variant and report held-out toy metrics."""
    experiment = experiment or Experiment(exp or ExperimentConfig(), seed)
    return experiment.run(variant)[2]

"""Command-line entry point: scene generation, training, evaluation and the benchmark tables."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import tensor as T
from .harness import experiments as X
from .harness.gradsuite import GRAD_HEADER, gradient_suite
from .harness.scenes import SceneConfig, derive_seed, make_sequences, save_sequence
from .pipeline import Model, write_detections
from .harness.metrics import evaluate
from .training import (VARIANTS, ExperimentConfig, TrainData, predict_dataset, run_schedule,
                       variant_model_config, variant_schedule)

U64 = 2**64


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < U64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


def _words(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def load_experiment(path, steps: int | None = None) -> ExperimentConfig:
    exp = ExperimentConfig() if path is None else ExperimentConfig.from_json(json.loads(Path(path).read_text()))
    return exp if steps is None else replace(exp, steps=steps)


def load_scene(path) -> SceneConfig:
    if path is None:
        return SceneConfig()
    obj = json.loads(Path(path).read_text())
    return SceneConfig.from_json(obj.get("scene", obj))


def _seeds(args) -> list[int]:
    return [(args.seed + i) % U64 for i in range(args.seeds)]


def _print_means(rows, key):
    for k, v in X.mean_by(rows, key).items():
        print(f"{key}={k}\tmean toy_ap={v:.4f}")


# -- verbs --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    scene = load_scene(args.config)
    if args.frames:
        scene = replace(scene, num_frames=args.frames[0])
    out = Path(args.out)
    for i, seq in enumerate(make_sequences(replace(scene, seed=args.seed), args.count)):
        save_sequence(out / f"seq_{i:03d}", seq, replace(scene, seed=derive_seed(args.seed, 0, i)))
    print(f"wrote {args.count} sequences to {out}")
    return 0


def _train_setup(args):
    exp = load_experiment(args.config, args.steps)
    v = VARIANTS[args.variant[0]]
    frames = args.frames[0] if args.frames else exp.model.history + 1
    mcfg = variant_model_config(v, exp.model, frames - 1)
    scene = replace(exp.scene, seed=derive_seed(args.seed, 11))
    return exp, v, frames, mcfg, scene


def cmd_train(args) -> int:
    exp, v, frames, mcfg, scene = _train_setup(args)
    data = TrainData.build(scene, exp.train_sequences, 0, mcfg.alignment, frames)
    model = Model(mcfg, data.grid, seed=derive_seed(args.seed, 13))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps({"experiment": exp.to_json(), "variant": v.key,
                                              "seed": args.seed, "frames": frames}, indent=1))
    res = run_schedule(variant_schedule(v, exp), data, model, seed=args.seed, batch_size=exp.batch_size,
                       out_dir=out, frames=frames)
    last = res.reports[-1] if res.reports else None
    print(f"trained variant {v.key}; final loss {last.total:.4f}" if last else "no steps run")
    return 0


def cmd_eval(args) -> int:
    exp, v, frames, mcfg, scene = _train_setup(args)
    out = Path(args.out)
    ckpt = Path(args.ckpt) if args.ckpt else out / "stage4_temporal.ckpt"
    data = TrainData.build(scene, exp.eval_sequences, 1, mcfg.alignment, frames)
    model = Model(mcfg, data.grid, params=T.load_checkpoint(ckpt))
    dets, gt = predict_dataset(model, data, frames)
    m = evaluate(dets, gt, radius=data.grid.cell, num_classes=mcfg.num_classes)
    write_detections(out / "detections.jsonl", dets)
    X.write_csv(out / "eval.csv", [X.metric_row(m)], X.METRIC_COLUMNS)
    print(f"toy_ap={m.toy_ap:.4f} hit_rate={m.hit_rate:.4f} center_mae={m.center_mae:.4f}")
    return 0


def cmd_sweep_frames(args) -> int:
    exp = load_experiment(args.config, args.steps)
    if args.config is None:
        exp = replace(exp, scene=SceneConfig.mover_heavy())
    rows = X.frame_sweep(args.frames or [1, 3, 5, 7], _seeds(args), exp, args.variant[0])
    X.write_csv(Path(args.out) / "frames.csv", rows, X.FRAME_HEADER)
    _print_means(rows, "frames")
    return 0


def cmd_align_bench(args) -> int:
    scene = load_scene(args.config) if args.config else SceneConfig.static_only()
    if args.frames:
        scene = replace(scene, num_frames=args.frames[0])
    rows = X.align_bench(scene, args.resolutions, _seeds(args))
    X.write_csv(Path(args.out) / "align.csv", rows, X.ALIGN_HEADER)
    for c, v in X.mean_by(rows, "config", "residual").items():
        print(f"config={c}\tmean residual={v:.5f}")
    return 0


def cmd_fusion_bench(args) -> int:
    exp = load_experiment(args.config, args.steps)
    if args.frames:
        exp = replace(exp, model=replace(exp.model, history=args.frames[0] - 1))
    rows = X.fusion_bench(args.ops, _seeds(args), exp)
    X.write_csv(Path(args.out) / "fusion.csv", rows, X.FUSION_HEADER)
    _print_means(rows, "operator")
    return 0


def cmd_ablate(args) -> int:
    exp = load_experiment(args.config, args.steps)
    if args.frames:
        exp = replace(exp, model=replace(exp.model, history=args.frames[0] - 1))
    rows = X.ablate_training(args.variant, _seeds(args), exp)
    X.write_csv(Path(args.out) / "ablation.csv", rows, X.ABLATION_HEADER)
    _print_means(rows, "variant")
    return 0


def cmd_grad_check(args) -> int:
    rows = gradient_suite(args.seed % 2**32)
    X.write_csv(Path(args.out) / "gradcheck.csv", rows, GRAD_HEADER)
    bad = [r for r in rows if not r["passed"]]
    print(f"{len(rows) - len(bad)}/{len(rows)} tensors pass; worst relative error "
          f"{max(r['max_rel_error'] for r in rows):.2e}")
    for r in bad:
        print(f"FAIL {r['case']}.{r['tensor']}: {r['max_rel_error']:.2e}")
    return 1 if bad else 0


VERBS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep-frames": cmd_sweep_frames,
         "align-bench": cmd_align_bench, "fusion-bench": cmd_fusion_bench,
         "ablate-training": cmd_ablate, "grad-check": cmd_grad_check}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stbev", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    defaults = {"gen": ["g"], "ablate-training": ["e", "f", "g"]}
    for verb in VERBS:
        s = sub.add_parser(verb)
        s.add_argument("--config", help="JSON experiment (or scene) config")
        s.add_argument("--seed", type=_seed, default=0)
        s.add_argument("--out", default=f"runs/{verb}")
        s.add_argument("--frames", type=_ints, default=None,
                       help="window length; a comma list for sweep-frames")
        s.add_argument("--variant", type=_words, default=defaults.get(verb, ["g"]),
                       help="training-strategy variant(s), a..g")
        s.add_argument("--seeds", type=int, default=5 if verb in ("sweep-frames", "align-bench",
                                                                   "fusion-bench", "ablate-training") else 1,
                       help="number of consecutive seeds for table verbs")
        s.add_argument("--steps", type=int, default=None, help="override optimizer steps per stage")
        if verb == "gen":
            s.add_argument("--count", type=int, default=1)
        if verb == "eval":
            s.add_argument("--ckpt", help="checkpoint to evaluate (default: <out>/stage4_temporal.ckpt)")
        if verb == "align-bench":
            s.add_argument("--resolutions", type=_floats, default=[1.2, 0.6, 0.3])
        if verb == "fusion-bench":
            s.add_argument("--ops", type=_words, default=["add", "cat", "daf"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for v in args.variant:
        if v not in VARIANTS:
            print(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}", file=sys.stderr)
            return 2
    if args.seeds < 1:
        print("--seeds must be positive", file=sys.stderr)
        return 2
    return VERBS[args.verb](args)


if __name__ == "__main__":
    sys.exit(main())

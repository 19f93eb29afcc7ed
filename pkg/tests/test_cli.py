import json
from dataclasses import replace

import pytest

from stbev.cli import build_parser, main
from stbev.harness.experiments import read_csv
from stbev.training import ExperimentConfig

from tests.test_training import TINY_MODEL, TINY_SCENE


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    exp = ExperimentConfig(scene=replace(TINY_SCENE, num_frames=4), model=TINY_MODEL, train_sequences=4,
                           eval_sequences=3, steps=2, batch_size=2)
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(exp.to_json()))
    return str(path)


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def run_twice(tmp_path, argv):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main([*argv, "--out", str(out)]) == 0
        outs.append(files(out))
    assert outs[0] and outs[0] == outs[1]
    return tmp_path / "a"


class TestParser:
    def test_verbs(self):
        p = build_parser()
        for verb in ("gen", "train", "eval", "sweep-frames", "align-bench", "fusion-bench",
                     "ablate-training", "grad-check"):
            args = p.parse_args([verb, "--seed", "18446744073709551615"])
            assert args.seed == 2**64 - 1

    def test_bad_seed(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["gen", "--seed", str(2**64)])

    def test_bad_variant(self):
        assert main(["train", "--variant", "z"]) == 2


class TestDeterminism:
    def test_gen(self, tmp_path, tiny_config):
        out = run_twice(tmp_path, ["gen", "--config", tiny_config, "--seed", "7", "--count", "2"])
        assert (out / "seq_001" / "gt.jsonl").exists()

    def test_align_bench(self, tmp_path):
        out = run_twice(tmp_path, ["align-bench", "--seeds", "2", "--resolutions", "0.6"])
        rows = read_csv(out / "align.csv")
        assert len(rows) == 8 and list(rows[0]) == ["seed", "cell", "config", "residual_lidar",
                                                    "residual_semantic", "residual"]

    def test_train_and_eval(self, tmp_path, tiny_config):
        out = run_twice(tmp_path, ["train", "--config", tiny_config, "--seed", "3", "--frames", "2"])
        assert {"metrics.csv", "stage1_lidar.ckpt", "stage4_temporal.ckpt", "run.json"} <= set(files(out))
        for _ in range(2):
            assert main(["eval", "--config", tiny_config, "--seed", "3", "--frames", "2", "--out", str(out)]) == 0
        rows = read_csv(out / "eval.csv")
        assert 0 <= float(rows[0]["toy_ap"]) <= 1
        assert (out / "detections.jsonl").read_text().count("\n") == 3 * 2 * 4

    def test_tables(self, tmp_path, tiny_config):
        out = run_twice(tmp_path, ["ablate-training", "--config", tiny_config, "--seeds", "1",
                                   "--variant", "e,g", "--frames", "2"])
        assert [r["variant"] for r in read_csv(out / "ablation.csv")] == ["e", "g"]
        out = run_twice(tmp_path / "f", ["fusion-bench", "--config", tiny_config, "--seeds", "1",
                                         "--ops", "add,daf", "--frames", "2"])
        assert [r["operator"] for r in read_csv(out / "fusion.csv")] == ["add", "daf"]
        out = run_twice(tmp_path / "s", ["sweep-frames", "--config", tiny_config, "--seeds", "1",
                                         "--frames", "1,2"])
        assert [r["frames"] for r in read_csv(out / "frames.csv")] == ["1", "2"]

    def test_grad_check(self, tmp_path):
        out = run_twice(tmp_path, ["grad-check"])
        rows = read_csv(out / "gradcheck.csv")
        assert all(r["passed"] == "True" for r in rows)

import json
import subprocess
import sys

import pytest
import yaml

from gendds.cli import main
from gendds.media import gif_delays
from gendds.unet import UNetConfig

TINY = {
    "dataset": {"count": 6, "frames": 2, "resolution": 16, "split": 0.67},
    "codec": {"epochs": 1, "batch_size": 8},
    "model": {"unet": UNetConfig.tiny().to_dict(), "text": {"dim": 8, "layers": 1, "heads": 2, "max_len": 16}},
    "train": {"base": {"epochs": 1, "batch_size": 4, "lr_unet": 1e-3},
              "lora": {"epochs": 1, "batch_size": 4, "rank": 2},
              "control": {"epochs": 1, "batch_size": 4},
              "temporal": {"epochs": 1, "batch_size": 2, "heads": 2}},
    "sampler": {"steps": 3},
    "sample": {"frames": 2, "grid_count": 2, "chunk": 2},
    "probe": {"epochs": 1, "width": 4},
}

PIPELINE = [
    ["dataset", "gen"],
    ["train", "codec"],
    ["train", "base"],
    ["train", "lora"],
    ["train", "control"],
    ["train", "temporal"],
    ["sample", "image", "--count", "2", "--lora", "--control"],
    ["sample", "video", "--grid", "--name", "vid"],
    ["sample", "video", "--grid", "--no-temporal", "--name", "flat"],
    ["eval", "probe", "--clips", "{run}/samples/vid"],
    ["eval", "consistency", "--clips", "{run}/samples/vid", "--baseline", "{run}/samples/flat"],
    ["eval", "report"],
]


def run_pipeline(run, config):
    for argv in PIPELINE:
        args = [a.format(run=run) for a in argv] + ["--out", str(run), "--config", str(config), "--seed", "5"]
        assert main(args) == 0, argv


def snapshot(run):
    out = {}
    for p in sorted(run.rglob("*")):
        if p.is_file() and p.name != "metrics.csv":
            out[str(p.relative_to(run))] = p.read_bytes()
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.yaml"
    config.write_text(yaml.safe_dump(TINY))
    run_pipeline(root / "a", config)
    return root, config


class TestEndToEnd:
    def test_layout(self, pipeline):
        run = pipeline[0] / "a"
        for stage in ("codec", "base", "lora", "control", "temporal"):
            assert (run / stage / f"{stage}.gdds").exists()
            assert (run / stage / "config.json").exists()
        assert len(list((run / "samples" / "vid").glob("clip_*"))) == 2
        report = json.loads((run / "report.json").read_text())
        assert "base" in report and "eval/consistency_vid" in report

    def test_gif_delay(self, pipeline):
        gif = pipeline[0] / "a" / "samples" / "vid" / "clip_000" / "clip.gif"
        assert gif_delays(gif.read_bytes()) == [12, 12]

    def test_byte_identical_rerun(self, pipeline):
        root, config = pipeline
        run_pipeline(root / "b", config)
        a, b = snapshot(root / "a"), snapshot(root / "b")
        assert a.keys() == b.keys()
        different = [k for k in a if a[k] != b[k]]
        assert different == []

    def test_echoed_config_reproduces(self, pipeline, tmp_path):
        root, _ = pipeline
        echoed = root / "a" / "samples" / "vid" / "config.json"
        run = root / "a"
        argv = ["sample", "video", "--out", str(run), "--config", str(echoed), "--name", "again"]
        assert main(argv) == 0
        for clip in ("clip_000", "clip_001"):
            assert ((run / "samples" / "again" / clip / "clip.gif").read_bytes()
                    == (run / "samples" / "vid" / clip / "clip.gif").read_bytes())


class TestExitCodes:
    def test_empty_corpus(self, tmp_path, capsys):
        assert main(["dataset", "gen", "--count", "0", "--out", str(tmp_path)]) == 2
        assert "empty corpus" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_bad_option_value(self):
        assert main(["sample", "image", "--steps", "many"]) == 1

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.yaml").write_text("sampler:\n  speed: 1\n")
        assert main(["dataset", "gen", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path)]) == 1

    def test_missing_manifest(self, tmp_path):
        assert main(["train", "base", "--out", str(tmp_path)]) == 2

    def test_stage_before_dependency(self, pipeline, tmp_path):
        root, config = pipeline
        run = tmp_path / "r"
        assert main(["dataset", "gen", "--out", str(run), "--config", str(config)]) == 0
        assert main(["train", "base", "--out", str(run), "--config", str(config)]) == 1

    def test_help(self):
        assert main(["--help"]) == 0

    def test_module_entry(self):
        out = subprocess.run([sys.executable, "-m", "gendds.cli", "nope"], capture_output=True, text=True)
        assert out.returncode == 1

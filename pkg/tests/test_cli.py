import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from scenewalk import imgio
from scenewalk import masks as mk
from scenewalk.cli import main

from conftest import checker_image, half_mask

H = W = 16


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workdir(tmp_path):
    imgio.save_png(tmp_path / "scene.png", checker_image(H, W))
    spec = {
        "concepts": [
            {"name": "env", "level": 1},
            {"name": "forest", "level": 2, "mask": {"size": [H, W], "rle": mk.rle_encode(half_mask(H, W))}},
        ]
    }
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    config = {
        "seed": 7,
        "outpaint_steps": 4,
        "train": {"phase1_steps": 2, "phase2_steps": 2, "refine_steps": 2, "seed": 7, "prior_count": 1, "prior_steps": 2},
        "trajectory": {"kind": "recede", "step_size": 0.05, "max_steps": 10},
    }
    (tmp_path / "config.json").write_text(json.dumps(config))
    return tmp_path


def construct(runner, workdir, out="sess"):
    result = runner.invoke(
        main,
        [
            "construct",
            "--image", str(workdir / "scene.png"),
            "--spec", str(workdir / "spec.json"),
            "--out", str(workdir / out),
            "--config", str(workdir / "config.json"),
            "--json",
        ],
    )
    assert result.exit_code == 0, result.output
    return workdir / out


class TestConstruct:
    def test_creates_valid_session(self, runner, workdir):
        out = construct(runner, workdir)
        result = runner.invoke(main, ["validate", "--session", str(out), "--json"])
        assert result.exit_code == 0
        assert json.loads(result.output)["valid"] is True

    def test_missing_spec_is_usage_error(self, runner, workdir):
        result = runner.invoke(
            main,
            [
                "construct",
                "--image", str(workdir / "scene.png"),
                "--spec", str(workdir / "nope.json"),
                "--out", str(workdir / "x"),
            ],
        )
        assert result.exit_code == 2

    def test_malformed_spec_is_domain_error(self, runner, workdir):
        spec = json.loads((workdir / "spec.json").read_text())
        spec["concepts"].append(dict(spec["concepts"][1]))
        (workdir / "bad.json").write_text(json.dumps(spec))
        result = runner.invoke(
            main,
            [
                "construct",
                "--image", str(workdir / "scene.png"),
                "--spec", str(workdir / "bad.json"),
                "--out", str(workdir / "x"),
            ],
        )
        assert result.exit_code == 1
        assert "DuplicateHandle" in result.output


class TestGenerate:
    def test_zero_frames_noop(self, runner, workdir):
        out = construct(runner, workdir)
        result = runner.invoke(main, ["generate", "--session", str(out), "--frames", "0", "--json"])
        assert result.exit_code == 0
        assert json.loads(result.output)["generated"] == 0

    def test_split_run_matches_single_run(self, runner, workdir):
        a = construct(runner, workdir, "a")
        b = construct(runner, workdir, "b")
        assert runner.invoke(main, ["generate", "--session", str(a), "--frames", "3"]).exit_code == 0
        assert runner.invoke(main, ["generate", "--session", str(a), "--frames", "3"]).exit_code == 0
        assert runner.invoke(main, ["generate", "--session", str(b), "--frames", "6"]).exit_code == 0
        for i in range(7):
            fa = (a / "frames" / f"{i:03d}.png").read_bytes()
            fb = (b / "frames" / f"{i:03d}.png").read_bytes()
            assert fa == fb, f"frame {i}"

    def test_exhausted_trajectory_domain_error(self, runner, workdir):
        out = construct(runner, workdir)
        result = runner.invoke(main, ["generate", "--session", str(out), "--frames", "11"])
        assert result.exit_code == 1
        assert "TrajectoryExhausted" in result.output


class TestRefine:
    def test_mute_unknown_handle(self, runner, workdir):
        out = construct(runner, workdir)
        result = runner.invoke(main, ["refine", "--session", str(out), "--mute", "<nope>", "--now"])
        assert result.exit_code == 1
        assert "UnknownHandle" in result.output

    def test_add_now_grows_graph(self, runner, workdir):
        out = construct(runner, workdir)
        before = json.loads((out / "graph" / "000.json").read_text())
        result = runner.invoke(main, ["refine", "--session", str(out), "--add", "waterfall", "--now", "--json"])
        assert result.exit_code == 0, result.output
        after = json.loads((out / "graph" / "001.json").read_text())
        assert len(after["nodes"]) == len(before["nodes"]) + 1
        assert len(after["edges"]) == len(before["edges"]) + 1

    def test_refine_appends_training_log(self, runner, workdir):
        out = construct(runner, workdir)
        lines_before = (out / "train.log").read_text().count("\n")
        result = runner.invoke(main, ["refine", "--session", str(out), "--add", "waterfall", "--now"])
        assert result.exit_code == 0
        lines_after = (out / "train.log").read_text().count("\n")
        assert lines_after > lines_before
        last = json.loads((out / "train.log").read_text().splitlines()[-1])
        assert last["phase"] == "refine"

    def test_queued_instruction_applies_on_next_step(self, runner, workdir):
        out = construct(runner, workdir)
        result = runner.invoke(main, ["refine", "--session", str(out), "--mute", "<forest>"])
        assert result.exit_code == 0
        assert json.loads((out / "session.json").read_text())["pending_instruction"] is not None
        assert runner.invoke(main, ["generate", "--session", str(out), "--frames", "1"]).exit_code == 0
        doc = json.loads((out / "session.json").read_text())
        assert doc["pending_instruction"] is None
        assert doc["graph_version"] == 1

    def test_requires_exactly_one_mode(self, runner, workdir):
        out = construct(runner, workdir)
        result = runner.invoke(main, ["refine", "--session", str(out)])
        assert result.exit_code == 2


class TestEval:
    def test_initial_only_scores_one(self, runner, workdir):
        out = construct(runner, workdir)
        result = runner.invoke(main, ["eval", "--session", str(out), "--json"])
        assert result.exit_code == 0
        report = json.loads(result.output)
        assert report["metric"] == pytest.approx(1.0, abs=1e-6)

    def test_unknown_backend_usage_error(self, runner, workdir):
        out = construct(runner, workdir)
        result = runner.invoke(main, ["eval", "--session", str(out), "--backend", "nope"])
        assert result.exit_code == 2


class TestServe:
    def test_bad_port_usage_error(self, runner, tmp_path):
        result = runner.invoke(main, ["serve", "--port", "0", "--root", str(tmp_path)])
        assert result.exit_code == 2

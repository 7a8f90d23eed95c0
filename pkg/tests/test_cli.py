import json

import numpy as np
import pytest

from sparselgs.cli import main
from sparselgs.pipeline_io import SceneManifest


@pytest.fixture(scope="module")
def tiny_scene(tmp_path_factory):
    """A small scene driven through every stage via the CLI entry point."""
    root = tmp_path_factory.mktemp("scene")
    rc = main(
        [
            "synth", "--out", str(root), "--seed", "5", "--views", "3",
            "--objects", "3", "--size", "40", "--embed-dim", "32",
            "--config-override", "stage_a_iterations=250",
            "--config-override", "stage_b_iterations=120",
            "--config-override", "densify_start=1000000000",
            "--config-override", "pose_optimization=false",
        ]
    )
    assert rc == 0
    return root / "manifest.json"


def run(args):
    return main([str(a) for a in args])


class TestPipelineViaCli:
    def test_validate_passes(self, tiny_scene):
        assert run(["validate", "--manifest", tiny_scene]) == 0

    def test_full_chain(self, tiny_scene, capsys):
        assert run(["align", "--manifest", tiny_scene]) == 0
        assert run(["fit-codec", "--manifest", tiny_scene]) == 0
        assert run(["train-rgb", "--manifest", tiny_scene]) == 0
        assert run(["train-sem", "--manifest", tiny_scene]) == 0
        assert run(["render", "--manifest", tiny_scene]) == 0
        assert run(["eval", "--manifest", tiny_scene]) == 0
        out = capsys.readouterr().out
        assert "mIoU" in out

        manifest = SceneManifest.load(tiny_scene)
        for key in ("aligned", "codecs", "stage_a", "stage_b"):
            assert key in manifest.outputs
        report = json.loads((manifest.root / "outputs/report/report.json").read_text())
        assert "miou" in report and 0.0 <= report["miou"] <= 1.0
        renders = sorted((manifest.root / "outputs/renders").glob("view*.png"))
        assert len(renders) == 3

    def test_run_alias_dispatches(self, tiny_scene):
        assert run(["run", "--stage", "validate", "--manifest", tiny_scene]) == 0

    def test_validation_failure_exits_2(self, tiny_scene, tmp_path):
        manifest = SceneManifest.load(tiny_scene)
        broken_root = tmp_path / "broken"
        import shutil

        shutil.copytree(manifest.root, broken_root)
        (broken_root / manifest.views[0].image).unlink()
        assert run(["validate", "--manifest", broken_root / "manifest.json"]) == 2

    def test_unknown_override_exits_1(self, tiny_scene):
        rc = run(["validate", "--manifest", tiny_scene, "--config-override", "bogus=1"])
        assert rc == 1

    def test_query_without_checkpoint_exits_1(self, tmp_path):
        rc = main(
            [
                "synth", "--out", str(tmp_path / "s2"), "--seed", "9", "--views", "2",
                "--objects", "1", "--size", "32", "--embed-dim", "16",
            ]
        )
        assert rc == 0
        rc = run(["query", "--manifest", tmp_path / "s2" / "manifest.json"])
        assert rc == 1

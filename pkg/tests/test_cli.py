import json
import subprocess
import sys
from pathlib import Path

import pytest
from click.testing import CliRunner

from hoshape.checkpoint import validate_manifest
from hoshape.cli import main
from hoshape.mesh import read_obj

COMMANDS = ["toy-generate", "ae-train", "latents-extract", "pred-train", "reconstruct", "evaluate", "plot"]


def invoke(*args):
    res = CliRunner().invoke(main, list(args), catch_exceptions=False)
    return res


def last_json(res):
    return json.loads(res.output.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A tiny end-to-end run shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "dataset": str(root / "data"), "output_dir": str(root / "run"),
        "toy_train": 3, "toy_test": 2,
        "toy": {"num_cameras": 4},
        "ae_hand": {"steps": 20}, "ae_object": {"steps": 20},
        "predictor": {"epochs": 1, "batch_size": 4},
        "metrics": {"n_samples": 2000},
        "evaluation": {"view_counts": [1, 2], "repetitions": 2},
    }
    path = root / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = {}
    for cmd in ["toy-generate", "ae-train", "latents-extract", "pred-train", "evaluate"]:
        res = invoke(cmd, "--config", str(path))
        assert res.exit_code == 0, res.output
        out[cmd] = last_json(res)
    return root, path, out


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help(cmd):
    res = invoke(cmd, "--help")
    assert res.exit_code == 0
    for flag in ("--config", "--dataset", "--output-dir", "--set"):
        assert flag in res.output


def test_console_script():
    res = subprocess.run([sys.executable, "-m", "hoshape.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert all(c in res.stdout for c in COMMANDS)


def test_config_errors(tmp_path):
    assert invoke("toy-generate", "--config", str(tmp_path / "missing.json")).exit_code == 2
    assert invoke("toy-generate", "--set", "nokey").exit_code == 2
    assert invoke("toy-generate", "--set", "bogus=1", "--dataset", str(tmp_path)).exit_code == 2
    assert invoke("evaluate", "--view-counts", "1,x").exit_code == 2


def test_missing_dependency(tmp_path):
    res = invoke("pred-train", "--dataset", str(tmp_path / "d"), "--output-dir", str(tmp_path / "o"))
    assert res.exit_code == 3
    assert "hoshape" in res.output


def test_stage_outputs(run):
    root, _, out = run
    for payload in out.values():
        for p in payload["artifacts"].values():
            assert Path(p).exists()
    arts = out["ae-train"]["artifacts"]
    for key in ("ae_hand", "ae_object"):
        validate_manifest(json.loads((root / "run" / key / "manifest.json").read_text()))
        steps = [json.loads(x)["step"] for x in open(arts[f"{key}_log"])]
        assert steps == list(range(len(steps))) and len(steps) == 20
    validate_manifest(json.loads((root / "run" / "predictor" / "manifest.json").read_text()))
    # one latent record per training frame and view
    index = (root / "run" / "latents" / "index.jsonl").read_text().splitlines()
    assert len(index) == 3 * 4


def test_report_rows(run):
    root, _, out = run
    report = json.loads(open(out["evaluate"]["artifacts"]["report"]).read())
    assert [(r["view_count"], r["repetition"]) for r in report["runs"]] == [(1, 0), (1, 1), (2, 0), (2, 1)]
    assert set(out["evaluate"]["artifacts"]) >= {"fscore_vs_views_png", "per_object_png", "loss_curves_png",
                                                 "summary_csv", "runs_csv"}
    assert "acceptance" in out["evaluate"]


def test_single_repetition_zero_std(run):
    root, path, _ = run
    res = invoke("evaluate", "--config", str(path), "--repetitions", "1", "--max-frames", "1",
                 "--output-dir", str(root / "run"))
    assert res.exit_code == 0, res.output
    report = json.loads(open(last_json(res)["artifacts"]["report"]).read())
    assert len(report["runs"]) == 2
    for row in report["summary"]:
        for k, v in row.items():
            if k.endswith("_std") and v is not None:
                assert v == 0.0


def test_acceptance_exit_code(run):
    root, path, _ = run
    # an unreachable accuracy bar must fail the run with status 4
    res = invoke("evaluate", "--config", str(path), "--acceptance", "--max-frames", "1",
                 "--set", "evaluation.min_cell_accuracy=1.0")
    assert res.exit_code == 4


def test_reconstruct(run):
    root, path, _ = run
    frame = json.loads((root / "data" / "manifest.jsonl").read_text().splitlines()[-1])["frame_id"]
    res = invoke("reconstruct", "--config", str(path), "--frame", frame, "--views", "3")
    assert res.exit_code == 0, res.output
    payload = last_json(res)
    assert len(payload["view_ids"]) == 3
    sidecar = json.loads(open(payload["artifacts"]["sidecar"]).read())
    assert sidecar["view_ids"] == payload["view_ids"]
    read_obj(payload["artifacts"]["hand_mesh"])
    read_obj(payload["artifacts"]["object_mesh"])
    again = last_json(invoke("reconstruct", "--config", str(path), "--frame", frame, "--views", "3"))
    assert again["view_ids"] == payload["view_ids"]

    assert invoke("reconstruct", "--config", str(path), "--frame", frame, "--view-ids", "0,42").exit_code == 2
    assert invoke("reconstruct", "--config", str(path), "--frame", "nope").exit_code == 2
    res = invoke("reconstruct", "--config", str(path), "--frame", frame, "--view-ids", "2,0")
    assert last_json(res)["view_ids"] == ["0", "2"]


def test_plot_rerun_is_byte_stable(run):
    root, path, _ = run
    a = last_json(invoke("plot", "--config", str(path)))["artifacts"]
    first = {k: open(p, "rb").read() for k, p in a.items()}
    b = last_json(invoke("plot", "--config", str(path)))["artifacts"]
    assert {k: open(p, "rb").read() for k, p in b.items()} == first

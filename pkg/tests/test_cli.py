import csv
import hashlib
import json
import os
import subprocess
import sys

import pytest

from cldfd import config as C
from cldfd.cli import main
from cldfd.errors import ConfigError

TINY = {
    "data": {"base_classes": 3, "base_per_class": 6, "target_classes": 5, "target_per_class": 10, "image_size": 16},
    "model": {"channels": [4, 8, 8, 16]},
    "pretrain": {"epochs": 1, "batch_size": 8},
    "distill": {"epochs": 2, "batch_size": 4},
    "selfsup": {"head_hidden": 8, "head_dim": 4},
    "eval": {"episodes": 4, "query": 3, "kmeans_restarts": 2},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _run(*args):
    return main([str(a) for a in args])


def _digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# --- config layer ------------------------------------------------------------------------


def test_resolve_defaults_and_overrides(monkeypatch):
    monkeypatch.setenv(C.OUTPUT_ROOT_ENV, "/tmp/somewhere")
    cfg = C.resolve(None, [("distill.tau", 10), ("fd.h", 8)])
    assert cfg["output_dir"] == "/tmp/somewhere"
    assert cfg["distill"]["tau"] == 10
    assert cfg["fd"] == {"h": 8, "beta": 0.4}
    assert C.distill_config(cfg).tau == 10


def test_parse_overrides_forms():
    assert C.parse_overrides(["--fd.h", "64", "--distill.topology=same_level", "--distill.tau", "null"]) == [
        ("fd.h", 64),
        ("distill.topology", "same_level"),
        ("distill.tau", None),
    ]
    with pytest.raises(ConfigError):
        C.parse_overrides(["--fd.h"])


def test_unknown_keys_and_invalid_values():
    with pytest.raises(ConfigError):
        C.resolve(None, [("distill.nope", 1)])
    with pytest.raises(ConfigError):
        C.resolve(None, [("distill.lam", -1)])
    with pytest.raises(ConfigError):
        C.resolve(None, [("fd.h", 1000)])
    with pytest.raises(ConfigError):
        C.resolve(None, [("data.fraction", 1.5)])


def test_config_diff():
    a = C.resolve(None, [("output_dir", "x")])
    b = C.resolve(None, [("output_dir", "x"), ("distill.tau", 10)])
    assert C.diff(a, b) == {"distill.tau": (1, 10)}


# --- commands ------------------------------------------------------------------------------


def test_gen_data_files_and_rerun_identical(tmp_path, tiny_config):
    out = tmp_path / "nested" / "root"
    assert _run("gen-data", "--config", tiny_config, "--output-dir", out) == 0
    files = sorted(os.listdir(out / "data"))
    assert files == ["base.cldc", "base.cldc.json", "config.json", "split.json", "target.cldc", "target.cldc.json"]
    first = {f: _digest(out / "data" / f) for f in files}
    assert _run("gen-data", "--config", tiny_config, "--output-dir", out) == 0
    assert first == {f: _digest(out / "data" / f) for f in files}


def test_exit_codes(tmp_path, tiny_config):
    assert _run("pretrain", "--config", tiny_config, "--output-dir", tmp_path) == 4
    assert _run("eval", "--config", tiny_config, "--output-dir", tmp_path) == 4
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert _run("gen-data", "--config", bad, "--output-dir", tmp_path) == 2
    assert _run("gen-data", "--output-dir", tmp_path, "--distill.bogus", "1") == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert _run("gen-data", "--config", tiny_config, "--output-dir", blocker / "sub") == 3
    assert _run("ablate", "nonsense", "--config", tiny_config, "--output-dir", tmp_path) == 2


@pytest.fixture
def pipeline(tmp_path, tiny_config):
    root = tmp_path / "run"
    assert _run("gen-data", "--config", tiny_config, "--output-dir", root) == 0
    assert _run("pretrain", "--config", tiny_config, "--output-dir", root) == 0
    return root


def test_three_phase_pipeline(pipeline, tiny_config):
    root = pipeline
    assert _run("distill", "--config", tiny_config, "--output-dir", root, "--topology", "same_level") == 0
    rows = list(csv.DictReader(open(root / "distill" / "history.csv")))
    assert rows and all(r["topology"] == "same_level" for r in rows)
    assert set(os.listdir(root / "distill")) >= {"config.json", "history.csv", "student.ckpt", "teacher.ckpt"}
    assert json.load(open(root / "distill" / "config.json"))["distill"]["topology"] == "same_level"

    assert _run("eval", "--config", tiny_config, "--output-dir", root, "--fd.h", "8", "--fd.beta", "0.4") == 0
    metrics = json.load(open(root / "eval" / "metrics.json"))
    assert metrics["fd"] == {"h": 8, "beta": 0.4}
    assert metrics["episodes"] == 4 and len(metrics["per_block_rand_index"]) == 4


def test_rerun_from_echoed_config_is_bitwise(pipeline, tiny_config, tmp_path):
    root = pipeline
    assert _run("distill", "--config", tiny_config, "--output-dir", root) == 0
    assert _run("eval", "--config", tiny_config, "--output-dir", root) == 0
    again = tmp_path / "again"
    for phase, cmd in (("data", "gen-data"), ("teacher", "pretrain"), ("distill", "distill"), ("eval", "eval")):
        assert _run(cmd, "--config", root / phase / "config.json", "--output-dir", again) == 0
    for rel in ("teacher/teacher.ckpt", "distill/student.ckpt", "distill/history.csv", "eval/metrics.json", "teacher/trace.csv"):
        assert _digest(root / rel) == _digest(again / rel), rel


def test_ablate_topology_and_sweep(pipeline, tiny_config):
    root = pipeline
    assert _run("ablate", "topology", "--config", tiny_config, "--output-dir", root, "--eval.rand_index", "false") == 0
    rows = list(csv.DictReader(open(root / "ablate-topology.csv")))
    assert [r["variant"] for r in rows] == [
        "cross_level", "same_level", "one_to_all", "single_block(1)", "single_block(2)", "single_block(3)", "no_kd",
    ]
    assert rows[0]["config_diff"] == 'distill.topology="cross_level"' or rows[0]["config_diff"] == ""
    assert rows[1]["config_diff"] == 'distill.topology="same_level"'
    assert len({r["seed"] for r in rows}) == 1

    assert _run("sweep", "h", "--grid", "4,D_L", "--config", tiny_config, "--output-dir", root, "--eval.rand_index", "false") == 0
    rows = list(csv.DictReader(open(root / "sweep-h.csv")))
    assert [r["value"] for r in rows] == ["4", "16"]
    assert _run("sweep", "h", "--grid", "4,abc", "--config", tiny_config, "--output-dir", root) == 2
    assert _run("sweep", "gamma", "--grid", "1", "--config", tiny_config, "--output-dir", root) == 2

    assert _run("ablate", "fd_position", "--config", tiny_config, "--output-dir", root, "--eval.rand_index", "false") == 0
    rows = list(csv.DictReader(open(root / "ablate-fd_position.csv")))
    assert [r["variant"] for r in rows] == ["cross_level/no_fd", "cross_level/fd", "final_level/no_fd", "final_level/fd"]


def test_console_entry_point(tmp_path, tiny_config):
    env = dict(os.environ, CLDFD_OUTPUT_ROOT=str(tmp_path / "envroot"))
    out = subprocess.run(
        [sys.executable, "-m", "cldfd.cli", "gen-data", "--config", tiny_config], env=env, capture_output=True, text=True
    )
    assert out.returncode == 0, out.stderr
    assert json.loads(out.stdout.splitlines()[0])["output_dir"] == str(tmp_path / "envroot")
    assert (tmp_path / "envroot" / "data" / "target.cldc").exists()

import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from profuse import cli, pipeline, synth
from profuse import container_io as cio
from profuse.config import ConfigError, PipelineConfig, dump_config, load_config

SMALL = {"synth": {"object_count": 3, "view_count": 4, "seed": 2}, "pq": {"m": 4}}


def _write_config(path: Path, doc: dict) -> Path:
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture
def small_config(tmp_path):
    doc = {**SMALL, "paths": {"work_dir": str(tmp_path / "work")}}
    return load_config(_write_config(tmp_path / "cfg.yaml", doc))


# -- configuration -------------------------------------------------------------

def test_unknown_section_and_key_rejected():
    with pytest.raises(ConfigError, match="unknown section"):
        PipelineConfig.from_dict({"rendering": {}})
    with pytest.raises(ConfigError, match="tau_iuo"):
        PipelineConfig.from_dict({"cluster": {"tau_iuo": 0.5}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"cluster": {"s_min": 0}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(["not", "a", "mapping"])


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig.from_dict(SMALL)
    assert cfg.synth.object_count == 3 and cfg.pq.m == 4
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    assert load_config(p) == PipelineConfig()


# -- pipeline ------------------------------------------------------------------

ARTIFACTS = ["data/manifest.json", "scene.pf", "hits.pf", "proposals.pf", "scene_sem.pf", "index.pf",
             "metrics.json", "report.txt", "timing.txt"]


def test_run_produces_every_artifact(small_config):
    report = pipeline.run_pipeline(small_config)
    work = Path(small_config.paths.work_dir)
    for name in ARTIFACTS:
        assert (work / name).is_file(), name
    lines = (work / "timing.txt").read_text().splitlines()
    assert [line.split(":")[0] for line in lines] == ["geometry", "semantics", "indexing"]
    assert all(s.ran for s in report.stages)
    metrics = json.loads((work / "metrics.json").read_text())
    assert metrics["points"]["accuracy"] >= 0.9


def test_rerun_skips_every_stage(small_config):
    pipeline.run_pipeline(small_config)
    again = pipeline.run_pipeline(small_config)
    assert [s.ran for s in again.stages] == [False] * len(again.stages)
    forced = pipeline.run_pipeline(small_config, force=True)
    assert all(s.ran for s in forced.stages)


def test_changed_parameter_reruns_downstream_only(small_config):
    pipeline.run_pipeline(small_config)
    report = pipeline.run_pipeline(small_config.replace("query", gamma=0.4))
    assert {s.name for s in report.stages if s.ran} == {"evaluate"}


def test_corrupt_intermediate_aborts_naming_stage(small_config, capsys):
    pipeline.run_pipeline(small_config)
    hits = Path(small_config.paths.work_dir) / "hits.pf"
    hits.write_bytes(hits.read_bytes()[:100])
    with pytest.raises(pipeline.StageError) as info:
        pipeline.run_pipeline(small_config)
    assert info.value.stage == "cluster"


def test_runs_are_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = PipelineConfig.from_dict({**SMALL, "paths": {"work_dir": str(tmp_path / name)}})
        pipeline.run_pipeline(cfg)
        outs.append(tmp_path / name)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file() and p.name != "timing.txt")
    assert len(files) >= len(ARTIFACTS)
    for rel in files:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel


def test_external_manifest_without_truth_skips_evaluation(tmp_path):
    manifest, _ = synth.generate(synth.SynthSpec(object_count=2, view_count=3, seed=1), tmp_path / "data")
    doc = json.loads(manifest.read_text())
    for key in ("ground_truth", "points", "classes"):
        doc.pop(key, None)
    manifest.write_text(json.dumps(doc))
    cfg = PipelineConfig.from_dict({"paths": {"work_dir": str(tmp_path / "w"), "manifest": str(manifest)}})
    report = pipeline.run_pipeline(cfg)
    assert [s.name for s in report.stages] == ["init", "hits", "cluster", "register", "index"]


# -- command line --------------------------------------------------------------

def test_cli_run_and_exit_codes(tmp_path, capsys):
    cfg = _write_config(tmp_path / "cfg.yaml", SMALL)
    work = tmp_path / "work"
    assert cli.main(["run", "--config", str(cfg), "--work", str(work)]) == 0
    out = capsys.readouterr().out
    assert "geometry:" in out and "indexing:" in out
    assert cli.main(["--config", str(cfg), "run", "--work", str(work)]) == 0
    assert "cluster: skipped" in capsys.readouterr().out
    (work / "proposals.pf").write_bytes(b"garbage")
    assert cli.main(["run", "--config", str(cfg), "--work", str(work)]) == 3
    assert "register" in capsys.readouterr().err


def test_cli_config_errors(tmp_path, capsys):
    bad = _write_config(tmp_path / "bad.yaml", {"nonsense": {}})
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "unknown section" in capsys.readouterr().err
    assert cli.main(["run", "--bogus-flag"]) == 2
    assert cli.main(["init", "--manifest", "x.json"]) == 2  # --out missing
    missing = _write_config(tmp_path / "m.yaml", {"paths": {"manifest": str(tmp_path / "nope.json"),
                                                            "work_dir": str(tmp_path / "w")}})
    assert cli.main(["run", "--config", str(missing)]) == 3


def test_cli_stage_by_stage(tmp_path, capsys):
    d = tmp_path
    m = str(d / "data" / "manifest.json")
    steps = [
        ["synth", "--out", str(d / "data"), "--objects", "2", "--views", "3", "--seed", "4"],
        ["init", "--manifest", m, "--out", str(d / "scene.pf")],
        ["hits", "--scene", str(d / "scene.pf"), "--manifest", m, "--out", str(d / "hits.pf")],
        ["cluster", "--scene", str(d / "scene.pf"), "--manifest", m, "--hits", str(d / "hits.pf"),
         "--out", str(d / "props.pf")],
        ["register", "--scene", str(d / "scene.pf"), "--manifest", m, "--hits", str(d / "hits.pf"),
         "--proposals", str(d / "props.pf"), "--out", str(d / "sem.pf")],
        ["index", "--scene", str(d / "sem.pf"), "--m", "4", "--out", str(d / "index.pf")],
        ["query", "--scene", str(d / "sem.pf"), "--index", str(d / "index.pf"), "--embedding",
         str(d / "data" / "classes.pf"), "--row", "0", "--view", "0", "--manifest", m, "--out", str(d / "q.pf")],
        ["eval-select", "--scene", str(d / "sem.pf"), "--index", str(d / "index.pf"), "--manifest", m,
         "--hits", str(d / "hits.pf"), "--out", str(d / "select.txt")],
        ["eval-points", "--scene", str(d / "sem.pf"), "--points", str(d / "data" / "points.pf"), "--classes",
         str(d / "data" / "classes.pf"), "--labels-out", str(d / "labels.pf")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    mask = cio.load_array(d / "q.pf")
    assert mask.dtype == np.uint8 and mask.any()
    assert "miou" in (d / "select.txt").read_text().lower()
    assert "accuracy" in capsys.readouterr().out.lower()
    # existing outputs are protected unless --force
    assert cli.main(steps[1]) == 2
    assert cli.main(steps[1] + ["--force"]) == 0


def test_console_script_reports_version():
    import shutil
    import subprocess

    exe = shutil.which("profuse")
    if exe is None:
        pytest.skip("package not installed")
    done = subprocess.run([exe, "--version"], capture_output=True, text=True)
    assert done.returncode == 0 and "profuse" in done.stdout

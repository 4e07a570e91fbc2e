import json
import subprocess
import sys
from pathlib import Path

import pytest

from ragdp import pipeline
from ragdp.cli import main
from ragdp.config import load_config

SMALL = [
    "pretrain.steps=50", "extractor.epochs=1", "dp.iterations=5", "sample.n_samples=50",
    "data.n_pub_pre=200", "data.n_pub_ref=200", "data.n_prv=200", "eval.n_retrieval_queries=50",
]


def _flags(out, extra=()):
    args = ["--out", str(out), "--seed", "3"]
    for o in [*SMALL, *extra]:
        args += ["--override", o]
    return args


def _read_all(out: Path) -> dict:
    skip = {"timings.json", "efficiency.json"}
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", *_flags(out)]) == 0
    return out


def test_run_writes_every_artifact_and_stage(small_run):
    doc = json.loads((small_run / "manifest.json").read_text())
    assert set(doc["stages"]) == set(pipeline.STAGES)
    assert set(doc["artifacts"]) == set(pipeline.ARTIFACTS)
    for name, entry in doc["artifacts"].items():
        assert pipeline.sha256_file(small_run / entry["path"]) == entry["sha256"]
    assert doc["config"]["seed"] == 3


def test_sample_and_eval_records(small_run):
    doc = json.loads((small_run / "manifest.json").read_text())
    calls = doc["stages"]["sample"]["metrics"]
    assert calls["rag"]["denoiser_calls"] == 41
    assert calls["full"]["denoiser_calls"] == 100
    ev = json.loads((small_run / "eval.json").read_text())
    assert set(ev["quality"]) == {"dp_rag", "dp_full", "pretrained_full", "gaussian_noise"}
    assert set(ev["retrieval"]) == {"top1", "top5"}
    dp = doc["stages"]["dp-finetune"]["metrics"]
    assert dp["epsilon"] == pytest.approx(10.0, abs=1e-3)
    assert dp["delta"] == 1e-5
    eff = json.loads((small_run / "efficiency.json").read_text())
    assert {r["mode"] for r in eff} == {"rag", "full"}


def test_rerun_is_byte_identical(small_run, tmp_path):
    assert main(["run", *_flags(tmp_path)]) == 0
    assert _read_all(tmp_path) == _read_all(small_run)


def test_single_stage_rerun_is_byte_identical(small_run):
    before = _read_all(small_run)
    assert main(["dp-finetune", *_flags(small_run)]) == 0
    assert _read_all(small_run) == before


def test_missing_artifact_error_record(tmp_path, capsys):
    assert main(["build-kb", *_flags(tmp_path)]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["command"] == "build-kb"
    assert err["error"] == "PipelineError"
    assert "pretrain" in err["message"]


def test_config_mismatch_refused(small_run, capsys):
    assert main(["sample", *_flags(small_run, ["dp.iterations=6"])]) == 1
    assert "config differs" in json.loads(capsys.readouterr().err)["message"]


def test_tampered_artifact_refused(tmp_path, capsys):
    flags = _flags(tmp_path)
    assert main(["generate-data", *flags]) == 0
    path = tmp_path / "data" / "pub_pre.rpds"
    buf = bytearray(path.read_bytes())
    buf[-1] ^= 1
    path.write_bytes(bytes(buf))
    assert main(["pretrain", *flags]) == 1
    assert "checksum" in json.loads(capsys.readouterr().err)["message"]


def test_flags_after_command_and_config_file(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"seed": 9}))
    out = tmp_path / "o"
    assert main(["--config", str(cfg_path), "generate-data", "--out", str(out)]) == 0
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["config_sha256"] == load_config(cfg_path).digest()


def test_bad_override_reports_error(tmp_path, capsys):
    assert main(["generate-data", "--out", str(tmp_path), "--override", "nope=1"]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "KeyError"


def test_module_entry_and_sweep(tmp_path):
    cmd = [sys.executable, "-m", "ragdp", "sweep", *_flags(tmp_path), "--param", "kb.size=50,100"]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["ok"] is True
    cells = json.loads((tmp_path / "sweep.json").read_text())
    assert [c["overrides"] for c in cells] == [["kb.size=50"], ["kb.size=100"]]
    for c in cells:
        doc = json.loads((Path(c["out"]) / "manifest.json").read_text())
        assert doc["stages"]["build-kb"]["metrics"]["entries"] == int(c["overrides"][0].split("=")[1])
        assert "quality" in c["eval"]

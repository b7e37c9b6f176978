from __future__ import annotations

import json
import os
import stat

import pytest

from pipeline_attest.cli import PipelineConfig, main
from pipeline_attest.errors import ConfigInvalid
from pipeline_attest.synthetic import make_workspace


def small(tmp_path, **kw):
    opts = dict(n=64, d=4, iterations=10, batch_size=8, challenges={"transform": 4, "train": 4, "infer": 2})
    opts.update(kw)
    return make_workspace(tmp_path, **opts)


def run(ws, *argv):
    return main([argv[0], "--config", str(ws.config), *argv[1:]])


def run_all(ws):
    for cmd in (["ingest"], ["transform"], ["train"], ["evaluate"], ["infer", "--input", str(ws.root / "query.json")]):
        assert run(ws, *cmd) == 0, cmd


def test_full_run_and_verify(tmp_path, capsys):
    ws = small(tmp_path)
    run_all(ws)
    capsys.readouterr()
    assert run(ws, "verify", "--all") == 0
    out = capsys.readouterr().out
    assert "verification passed" in out and "record 4 [infer]" in out
    assert run(ws, "trace", "output_commitment") == 0
    tree = capsys.readouterr().out
    for stage in ("infer", "train", "transform", "corpus"):
        assert stage in tree


def test_byte_flip_in_chain_log(tmp_path, capsys):
    ws = small(tmp_path)
    run_all(ws)
    log = ws.root / "work" / "chain.jsonl"
    lines = log.read_text().splitlines()
    # flip one hex digit inside the train record's spec hash
    rec = json.loads(lines[2])
    h = rec["spec_hash"]
    rec["spec_hash"] = ("0" if h[0] != "0" else "1") + h[1:]
    lines[2] = json.dumps(rec, sort_keys=True, separators=(",", ":"))
    log.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert run(ws, "verify", "--all") == 1
    out = capsys.readouterr().out
    assert "FAILED at record(s) 2" in out


def test_raw_byte_flip_anywhere_fails(tmp_path, capsys):
    ws = small(tmp_path)
    run_all(ws)
    log = ws.root / "work" / "chain.jsonl"
    raw = bytearray(log.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    log.write_bytes(bytes(raw))
    assert run(ws, "verify", "--all") == 1


def test_train_before_transform(tmp_path, capsys):
    ws = small(tmp_path)
    assert run(ws, "ingest") == 0
    capsys.readouterr()
    assert run(ws, "train") == 2
    assert "MissingPrerequisiteStage" in capsys.readouterr().err


def test_existing_stage_and_force_new(tmp_path, capsys):
    ws = small(tmp_path)
    assert run(ws, "ingest") == 0
    capsys.readouterr()
    assert run(ws, "ingest") == 2
    assert "ExistingStage" in capsys.readouterr().err
    assert run(ws, "ingest", "--force-new") == 0
    assert len((ws.root / "work" / "chain.jsonl").read_text().splitlines()) == 2


def test_json_report(tmp_path, capsys):
    ws = small(tmp_path)
    assert run(ws, "ingest", "--json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["report_version"] == 1 and doc["ok"] and doc["appended"] == 0
    assert run(ws, "train", "--json") == 2
    doc = json.loads(capsys.readouterr().out)
    assert doc["error"] == "MissingPrerequisiteStage" and doc["ok"] is False


def test_single_stage_verify(tmp_path, capsys):
    ws = small(tmp_path)
    run_all(ws)
    capsys.readouterr()
    assert run(ws, "verify", "--stage", "2", "--json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert [r["proof_valid"] for r in doc["records"]][2] is True
    assert run(ws, "verify", "--stage", "9") == 1


def test_spotcheck_mode(tmp_path):
    ws = small(tmp_path, mode="spotcheck")
    run_all(ws)
    assert run(ws, "verify", "--all") == 0


def test_fine_tune_and_unlearn(tmp_path, capsys):
    ws = small(tmp_path)
    run_all(ws)
    assert run(ws, "train", "--prior-weights", "latest") == 0
    assert run(ws, "unlearn", "--record", "3") == 0
    assert run(ws, "verify", "--all") == 0
    recs = [json.loads(l) for l in (ws.root / "work" / "chain.jsonl").read_text().splitlines()]
    assert [r["stage_type"] for r in recs][-2:] == ["fine_tune", "unlearn"]


def test_home_override(tmp_path, monkeypatch):
    ws = small(tmp_path / "ws")
    monkeypatch.setenv("PIPELINE_ATTEST_HOME", str(tmp_path / "elsewhere"))
    assert run(ws, "ingest") == 0
    assert (tmp_path / "elsewhere" / "chain.jsonl").exists()
    assert not (ws.root / "work").exists()


def test_config_invalid(tmp_path, capsys):
    ws = small(tmp_path)
    cfg = json.loads(ws.config.read_text())
    cfg["challenges"]["train"] = 0
    ws.config.write_text(json.dumps(cfg))
    with pytest.raises(ConfigInvalid):
        PipelineConfig.load(ws.config)
    assert run(ws, "ingest") == 2
    assert "ConfigInvalid" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{")
    assert main(["verify", "--config", str(tmp_path / "broken.json")]) == 2
    assert main(["ingest", "--config", str(tmp_path / "missing.json")]) == 2
    ws.config.write_text(json.dumps({**cfg, "challenges": {}, "corpus_dir": "nope"}))
    assert run(ws, "ingest") == 2


def test_secrets_separate_and_private(tmp_path):
    ws = small(tmp_path)
    run_all(ws)
    secrets = ws.root / "work" / "secrets"
    assert stat.S_IMODE(secrets.stat().st_mode) == 0o700
    files = list(secrets.iterdir())
    assert files
    for f in files:
        assert stat.S_IMODE(f.stat().st_mode) == 0o600
    log = (ws.root / "work" / "chain.jsonl").read_text()
    for f in files:
        doc = json.loads(f.read_text())
        for v in _strings(doc):
            if len(v) >= 32:
                assert v not in log


def _strings(doc):
    if isinstance(doc, str):
        yield doc
    elif isinstance(doc, dict):
        for v in doc.values():
            yield from _strings(v)
    elif isinstance(doc, list):
        for v in doc:
            yield from _strings(v)


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    ws = small(tmp_path)
    proc = subprocess.run([sys.executable, "-m", "pipeline_attest", "ingest", "--config", str(ws.config), "--json"],
                          capture_output=True, text=True, env={**os.environ})
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["ok"]


def test_synthetic_workspace_command(tmp_path, capsys):
    from pipeline_attest.synthetic import main as synth_main
    assert synth_main([str(tmp_path / "demo"), "--rows", "32", "--dim", "3", "--iterations", "4",
                       "--batch-size", "8"]) == 0
    assert "config:" in capsys.readouterr().out
    assert main(["ingest", "--config", str(tmp_path / "demo" / "config.json")]) == 0
    assert len(list((tmp_path / "demo" / "corpus").glob("*.row.json"))) == 32

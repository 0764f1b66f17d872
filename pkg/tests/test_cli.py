from __future__ import annotations

import json

import pytest

from oddvlm.cli import main
from oddvlm.taxonomy import data_path

DEMO = data_path("demo")
EXPECTED = json.loads((DEMO / "expected_metrics.json").read_text())


def _run(*argv):
    return main([str(a) for a in argv])


def test_validate_reference(capsys):
    assert _run("validate", "--reference-counts") == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "232 concepts (27/55/96/12/42)"
    assert "signs: 27" in out


def test_validate_duplicate_alias(tmp_path, capsys):
    path = tmp_path / "dup.json"
    concept = {"category": "Signs", "description": "d", "aliases": ["same"]}
    path.write_text(json.dumps({"concepts": [{"id": "a", **concept}, {"id": "b", **concept}]}))
    assert _run("validate", path) != 0
    err = capsys.readouterr().err
    assert "a" in err and "b" in err and "duplicate alias" in err


def test_validate_empty_file(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    assert _run("validate", path) != 0


def test_plan_prints_budget(capsys):
    assert _run("plan", "--strategy", "reevaluate") == 0
    out = capsys.readouterr().out
    assert "+ 2I" in out and "verify" in out


def test_run_oracle_twenty_samples(tmp_path):
    out = tmp_path / "out"
    code = _run(
        "run", "--strategy", "persona_cot", "--backend", "mock:oracle",
        "--manifest", DEMO / "classification.csv", "--out", out,
    )
    assert code == 0
    report = json.loads((out / "persona_cot" / "report.json").read_text())
    assert report["recall"] == 1.0
    assert report["sample_count"] == 20
    assert set(report["provenance"]) >= {"taxonomy_version", "template_digest", "config_digest"}
    records = (out / "persona_cot" / "records.jsonl").read_text().splitlines()
    assert len(records) == 20


def test_run_all_scripted_matches_expected(tmp_path):
    out = tmp_path / "out"
    assert _run("run", "--backend", "mock:scripted", "--manifest", DEMO / "classification.csv", "--out", out) == 0
    for strategy, expected in EXPECTED["classification"].items():
        report = json.loads((out / strategy / "report.json").read_text())
        assert report["recall"] == pytest.approx(expected["recall"], abs=1e-12)
        for cat, value in expected["per_category"].items():
            assert report["per_category"][cat] == pytest.approx(value, abs=1e-12)


def test_run_detection_scripted(tmp_path):
    out = tmp_path / "out"
    code = _run(
        "run", "--strategy", "flat_taxonomy", "--taxonomy", "mapillary",
        "--backend", f"mock:scripted:{DEMO / 'detection_script.json'}",
        "--manifest", DEMO / "detection.jsonl", "--out", out,
    )
    assert code == 0
    report = json.loads((out / "flat_taxonomy" / "report.json").read_text())
    for key, value in EXPECTED["detection"]["flat_taxonomy"].items():
        assert report[key] == pytest.approx(value, abs=1e-12)


def test_mock_reruns_are_byte_identical(tmp_path):
    args = ["run", "--strategy", "all", "--backend", "mock:noise", "--seed", "4",
            "--manifest", DEMO / "classification.csv"]
    assert _run(*args, "--out", tmp_path / "a") == 0
    assert _run(*args, "--out", tmp_path / "b") == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_missing_manifest_writes_nothing(tmp_path, capsys):
    out = tmp_path / "out"
    assert _run("run", "--manifest", tmp_path / "nope.csv", "--out", out) != 0
    assert not out.exists()
    assert "manifest not found" in capsys.readouterr().err


def test_noise_needs_seed(tmp_path):
    out = tmp_path / "out"
    assert _run("run", "--backend", "mock:noise", "--manifest", DEMO / "classification.csv", "--out", out) != 0
    assert not out.exists()


def test_remote_without_credential_fails_early(tmp_path, monkeypatch):
    monkeypatch.delenv("ODDVLM_API_KEY", raising=False)
    profiles = tmp_path / "profiles.json"
    profiles.write_text(json.dumps({"profiles": {"m": {"endpoint": "https://x", "model": "m"}}}))
    out = tmp_path / "out"
    code = _run("run", "--backend", "remote:m", "--profiles", profiles,
                "--manifest", DEMO / "classification.csv", "--out", out)
    assert code != 0
    assert not out.exists()


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"strategy": "persona_cot", "manifest": str(DEMO / "classification.csv"),
                               "backend": "mock:oracle"}))
    out = tmp_path / "out"
    assert _run("run", "--config", cfg, "--strategy", "flat_taxonomy", "--out", out) == 0
    assert (out / "flat_taxonomy" / "report.json").exists()
    assert not (out / "persona_cot").exists()


def test_score_reproduces_run_report(tmp_path):
    out = tmp_path / "out"
    _run("run", "--strategy", "persona_cot", "--backend", "mock:scripted",
         "--manifest", DEMO / "classification.csv", "--out", out)
    scored = tmp_path / "scored.json"
    assert _run("score", "--records", out / "persona_cot" / "records.jsonl",
                "--manifest", DEMO / "classification.csv", "--out", scored) == 0
    assert json.loads(scored.read_text())["recall"] == EXPECTED["classification"]["persona_cot"]["recall"]


def test_report_strategy_fixtures(capsys, tmp_path):
    assert _run("report", "--fixtures", "strategies", "--csv-dir", tmp_path) == 0
    out = capsys.readouterr().out
    first_row = out.splitlines()[3]
    assert first_row.startswith("Persona + CoT") and first_row.endswith("0.73")
    assert (tmp_path / "cost_plot.csv").exists()


def test_report_detection_fixtures(capsys):
    assert _run("report", "--fixtures", "detection") == 0
    out = capsys.readouterr().out
    assert "0.868" in out and "0.617" in out


def test_report_single_has_no_deltas(tmp_path, capsys):
    out = tmp_path / "out"
    _run("run", "--strategy", "flat_taxonomy", "--backend", "mock:oracle",
         "--manifest", DEMO / "classification.csv", "--out", out)
    capsys.readouterr()
    assert _run("report", out / "flat_taxonomy" / "report.json") == 0
    assert "Deltas" not in capsys.readouterr().out


def test_report_models_emits_deltas(tmp_path, capsys):
    assert _run("report", "--fixtures", "models", "--csv-dir", tmp_path) == 0
    delta_file = tmp_path / "deltas_gemini_2_5_pro.csv"
    assert "category,Signs,0.74,0.72,+0.02" in delta_file.read_text()


def test_compare_mismatched_versions(tmp_path):
    a = {"name": "a", "taxonomy_version": "v1", "recall": 0.5}
    b = {"name": "b", "taxonomy_version": "v2", "recall": 0.4}
    (tmp_path / "a.json").write_text(json.dumps(a))
    (tmp_path / "b.json").write_text(json.dumps(b))
    assert _run("compare", tmp_path / "a.json", tmp_path / "b.json") != 0


def test_report_requires_input():
    assert _run("report") != 0

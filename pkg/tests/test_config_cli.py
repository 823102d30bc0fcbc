import csv
import io
import json
import shutil

import pytest
import yaml

from daclab.cli import main
from daclab.config import config_from_dict, load_config
from daclab.errors import ConfigError

from conftest import ROOT

SMOKE = ROOT / "configs" / "smoke.yaml"


def rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


@pytest.fixture
def smoke_dict():
    raw = yaml.safe_load(SMOKE.read_text())
    raw["source"]["path"] = str(ROOT / "assets" / "structured.png")
    return raw


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["run", str(SMOKE), "--out", str(out)]) == 0
    return out / "seed_0"


# -- config ---------------------------------------------------------------------------

def test_shipped_configs_validate():
    for path in sorted((ROOT / "configs").glob("*.yaml")):
        load_config(path, env={})


def test_config_round_trip(tmp_path, smoke_dict):
    cfg = config_from_dict(smoke_dict, env={})
    (tmp_path / "again.yaml").write_text(cfg.to_yaml())
    again = load_config(tmp_path / "again.yaml", env={})
    assert again == cfg
    assert again.to_yaml() == cfg.to_yaml()


def test_field_level_diagnostics(smoke_dict):
    smoke_dict["adapt"]["iteratoins"] = 5
    smoke_dict["consolidation"]["temperature"] = 0
    smoke_dict["scheme"] = "federated"
    smoke_dict["seeds"] = []
    smoke_dict["source"]["path"] = "nowhere.png"
    with pytest.raises(ConfigError) as err:
        config_from_dict(smoke_dict, env={})
    text = "\n".join(err.value.problems)
    for field in ("adapt.iteratoins", "consolidation", "scheme", "seeds", "source.path"):
        assert field in text, field


def test_env_seed_override(smoke_dict):
    assert config_from_dict(smoke_dict, env={"DACLAB_SEED": "7"}).seeds == [7]
    with pytest.raises(ConfigError, match="DACLAB_SEED"):
        config_from_dict(smoke_dict, env={"DACLAB_SEED": "seven"})


# -- run --------------------------------------------------------------------------------

def test_run_writes_all_artifacts(smoke_run):
    names = {p.name for p in smoke_run.iterdir()}
    assert {"accuracy_matrix.csv", "metrics.json", "message_log.json", "config.yaml", "checkpoints"} <= names
    assert len(rows(smoke_run / "accuracy_matrix.csv")) == 3
    metrics = json.loads((smoke_run / "metrics.json").read_text())
    assert metrics["schema_version"] == 1
    assert len(metrics["average_accuracy"]) == 2 and set(metrics["forgetting"]) == {"1", "2"}
    assert metrics["wall_clock_seconds"] > 0
    assert len(json.loads((smoke_run / "message_log.json").read_text())) == 4
    assert sorted(p.name for p in (smoke_run / "checkpoints").iterdir()) == [
        "consolidated_1.dacm", "consolidated_2.dacm", "sc_1.dacm", "sc_2.dacm"
    ]


def test_rerun_is_byte_identical(smoke_run, tmp_path):
    assert main(["run", str(SMOKE), "--out", str(tmp_path)]) == 0
    for name in ("accuracy_matrix.csv", "message_log.json"):
        assert (tmp_path / "seed_0" / name).read_bytes() == (smoke_run / name).read_bytes()


def test_missing_image_exits_2_naming_field(tmp_path, smoke_dict, capsys):
    smoke_dict["source"]["path"] = "missing.png"
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(smoke_dict))
    assert main(["run", str(tmp_path / "c.yaml"), "--out", str(tmp_path)]) == 2
    assert "source.path" in capsys.readouterr().err


def test_env_seed_reaches_run(tmp_path, monkeypatch):
    monkeypatch.setenv("DACLAB_SEED", "3")
    assert main(["run", str(SMOKE), "--out", str(tmp_path)]) == 0
    assert [p.name for p in tmp_path.iterdir()] == ["seed_3"]


# -- report ------------------------------------------------------------------------------

def test_report_emits_probe_and_cka(smoke_run, tmp_path):
    run = tmp_path / "run"
    shutil.copytree(smoke_run, run)
    assert main(["report", str(run)]) == 0
    probe = rows(run / "probe.csv")
    assert [r["task"] for r in probe] == ["1", "2"]
    assert all(0 <= float(r["probe_accuracy"]) <= 1 for r in probe)
    cka = rows(run / "cka.csv")
    assert {float(r["cka"]) for r in cka if r["model_index"] == "0"} == {1.0}


def test_report_exit_codes(smoke_run, tmp_path):
    assert main(["report", str(tmp_path / "nope")]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == 2
    run = tmp_path / "broken"
    shutil.copytree(smoke_run, run)
    blob = bytearray((run / "checkpoints" / "sc_1.dacm").read_bytes())
    blob[-30] ^= 0xFF
    (run / "checkpoints" / "sc_1.dacm").write_bytes(bytes(blob))
    assert main(["report", str(run)]) == 1


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


# -- ablation ----------------------------------------------------------------------------

def test_ablate_sources_counts_rows(tmp_path, smoke_dict):
    smoke_dict["seeds"] = [0, 1, 2]
    smoke_dict["adapt"]["iterations"] = 30
    smoke_dict["consolidation"]["iterations"] = 20
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(smoke_dict))
    out = tmp_path / "abl"
    assert main(["ablate-sources", str(tmp_path / "c.yaml"), "--sources", "single_image,noise", "--out", str(out)]) == 0
    table = rows(out / "ablation.csv")
    summary = rows(out / "ablation_summary.csv")
    assert len(table) == 6 and len(summary) == 2
    for s in summary:
        vals = [float(r["avg_accuracy"]) for r in table if r["source"] == s["source"]]
        assert float(s["mean"]) == pytest.approx(sum(vals) / 3, abs=1e-6)
    assert main(["ablate-sources", str(tmp_path / "c.yaml"), "--sources", "webcam", "--out", str(out)]) == 2

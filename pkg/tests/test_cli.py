import os

import pandas as pd
import tomli_w
from typer.testing import CliRunner

from conftest import tiny_experiment
from scotopic import config
from scotopic.main import app
from scotopic.tools import storage

runner = CliRunner()


def teardown_function():
    config.set_workspace_dir(".")


def test_init_creates_config_once(tmp_path):
    result = runner.invoke(app, ["-w", str(tmp_path), "init"])
    assert result.exit_code == 0
    assert "Created config.toml" in result.output
    assert (tmp_path / "config.toml").exists()

    again = runner.invoke(app, ["-w", str(tmp_path), "init"])
    assert again.exit_code == 0
    assert "Skipped config.toml" in again.output


def test_exposure_table_command(tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(app, ["-w", str(tmp_path), "exposure-table", "--out", str(out), "--lux", "1", "--time", "1", "--time", "8"])
    assert result.exit_code == 0
    frame = pd.read_csv(out / "exposure_table.csv")
    assert list(frame.columns) == ["illuminance_lux", "1", "8"]
    assert frame.loc[0, "1"] == 5.0
    assert frame.loc[0, "8"] == 6.5


def test_exposure_table_uses_workspace_output_dir(tmp_path):
    (tmp_path / "config.toml").write_text('[paths]\noutput_dir = "tables"\n')
    result = runner.invoke(app, ["-w", str(tmp_path), "exposure-table"])
    assert result.exit_code == 0
    assert (tmp_path / "tables" / "exposure_table.csv").exists()


def test_invalid_exposure_exits_with_error(tmp_path):
    result = runner.invoke(app, ["-w", str(tmp_path), "exposure-table", "--out", str(tmp_path), "--lux", "0"])
    assert result.exit_code == 1
    assert "Error:" in result.output


def test_train_without_data_exits_with_error(tmp_path):
    result = runner.invoke(app, ["-w", str(tmp_path), "train"])
    assert result.exit_code == 1
    assert "fetch-data" in result.output


def test_bad_config_exits_with_error(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('[noise]\nshot_noise = 1.0\n')
    result = runner.invoke(app, ["-w", str(tmp_path), "train", "--config", str(path)])
    assert result.exit_code == 1
    assert "shot_noise" in result.output


def test_rerun_with_missing_manifest(tmp_path):
    result = runner.invoke(app, ["-w", str(tmp_path), "run", "--manifest", os.path.join(str(tmp_path), "missing.toml")])
    assert result.exit_code == 1
    assert "manifest not found" in result.output


def test_exposure_table_records_manifest_entry(tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(app, ["-w", str(tmp_path), "exposure-table", "--out", str(out), "--lux", "1", "--time", "1"])
    assert result.exit_code == 0
    manifest = storage.load_manifest(str(out / "manifest.toml"))
    assert manifest["artifacts"] == {"exposure_table.csv": storage.content_hash(str(out / "exposure_table.csv"))}
    assert "exposure-table" in manifest["timings"]
    assert manifest["config"]["exposure"]["illuminances"] == [1.0]


def test_stage_commands_hash_every_csv(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(tomli_w.dumps(tiny_experiment(tmp_path)))
    out = tmp_path / "results"

    trained = runner.invoke(app, ["-w", str(tmp_path), "train", "--config", str(path)])
    assert trained.exit_code == 0, trained.output
    swept = runner.invoke(app, ["-w", str(tmp_path), "sweep-sat", "--config", str(path)])
    assert swept.exit_code == 0, swept.output

    manifest = storage.load_manifest(str(out / "manifest.toml"))
    artifacts = manifest["artifacts"]
    assert set(artifacts) == {"training_history.csv", os.path.join("models", "waldnet.scot"), "sat_fr_waldnet.csv"}
    for name, digest in artifacts.items():
        assert digest == storage.content_hash(str(out / name))
    assert {"load-data", "train", "sweep-sat"} <= set(manifest["timings"])
    assert manifest["seeds"]["run"] == 0

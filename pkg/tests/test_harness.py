import csv
import json

import pytest
import yaml

from advtransfer.cli import main
from advtransfer.errors import ConfigError
from advtransfer.harness import AttackEntry, ExperimentConfig, Pipeline, run_experiment, write_csv
from advtransfer.plots import PlotWriter, emit_plots
from conftest import CACHE

BASE = {
    "name": "unit",
    "seed": 0,
    "dataset": {"per_class": 1},
    "attacks": [{"variant": "PGD", "step_size": "auto", "iterations": 5},
                {"variant": "MI", "step_size": 0.01, "epsilon": 8 / 255}],
    "defenses": ["none", "BDR"],
    "metrics": ["psnr", "ssim", "delta_e", "lpips"],
}


def _cfg(**over):
    d = json.loads(json.dumps(BASE))
    d.update(over)
    return ExperimentConfig.from_dict(d)


def test_config_round_trip():
    cfg = _cfg()
    again = ExperimentConfig.from_yaml(cfg.to_yaml())
    assert again.to_dict() == cfg.to_dict()
    assert again.digest() == cfg.digest()
    assert cfg.attacks[0].resolved_step() is None and cfg.attacks[1].resolved_step() == 0.01


@pytest.mark.parametrize("bad", [
    {"attacks": [{"variant": "PGD"}]},
    {"attacks": ["PGD"]},
    {"attacks": [{"variant": "Nope", "step_size": "auto"}]},
    {"attacks": [{"variant": "PGD", "step_size": -1}]},
    {"defenses": ["JPEG"]},
    {"metrics": ["bleu"]},
    {"targets": ["vgg99"]},
    {"schema_version": 2},
    {"colour": "blue"},
    {"repeats": 0},
    {"sweeps": [{"kind": "moon"}]},
    {"setup": {"n_epochs": 3}},
    {"attacks": [], "sweeps": []},
])
def test_config_rejections(bad):
    with pytest.raises(ConfigError):
        _cfg(**bad)


def test_attack_label():
    assert AttackEntry("RFA", "auto", params={"norm": "Linf"}).label == "RFA[norm=Linf]"


def test_csv_floats_round_trip(tmp_path):
    p = write_csv(tmp_path / "t.csv", [{"a": 0.1 + 0.2, "b": None}, {"a": float("nan"), "c": 3}])
    rows = list(csv.DictReader(p.open()))
    assert float(rows[0]["a"]) == 0.1 + 0.2
    assert rows[0]["b"] == "" and rows[1]["a"] == "nan" and rows[1]["c"] == "3"


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = run_experiment(_cfg(), out, CACHE)
    return out, res


def test_pipeline_outputs(run_dir):
    out, res = run_dir
    for f in ("transfer.csv", "imperceptibility.csv", "results.json", "manifest.json", "config.yaml"):
        assert (out / f).exists(), f
    rows = list(csv.DictReader((out / "transfer.csv").open()))
    assert [r["attack"] for r in rows] == ["PGD", "MI"]
    target = ExperimentConfig.from_dict(BASE).targets[0]
    assert f"{target}/BDR:mean" in rows[0]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["config_hash"] == _cfg().digest()
    assert {e["attack"] for e in manifest["seed_ledger"]} == {"PGD", "MI"}
    assert yaml.safe_load((out / "config.yaml").read_text())["name"] == "unit"
    batch = res["pipeline"].attack(_cfg().attacks[1])
    assert batch.linf().max() <= 8 / 255 + 1 / 510


def test_warm_cache_recomputes_nothing(run_dir, tmp_path):
    p = Pipeline(_cfg(), tmp_path, CACHE)
    p.run_defenses()
    assert p.manifest["attack_computations"] == 0
    assert p.manifest["attack_cache_hits"] == 2
    a = (run_dir[0] / "transfer.csv").read_text()
    assert (tmp_path / "transfer.csv").read_text() == a


def test_workers_do_not_change_results(run_dir, tmp_path):
    cfg = _cfg(cache={"policy": "off"})
    Pipeline(cfg, tmp_path, CACHE, workers=2).run_defenses()
    assert (tmp_path / "transfer.csv").read_text() == (run_dir[0] / "transfer.csv").read_text()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["evaluate", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("attacks:\n  - variant: PGD\n")
    assert main(["evaluate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["run-attacks", "--config", str(tmp_path / "missing.yaml")]) == 2
    good = tmp_path / "good.yaml"
    good.write_text(_cfg().to_yaml())
    assert main(["run-defenses", "--config", str(good), "--out", str(tmp_path / "o"),
                 "--cache-dir", str(CACHE)]) == 0
    assert (tmp_path / "o" / "transfer.csv").exists()
    assert "manifest:" in capsys.readouterr().out


def test_cli_failure_writes_manifest(tmp_path, capsys):
    cfg = _cfg(dataset={"path": str(tmp_path / "no_such_dir"), "label_file": None, "per_class": 1})
    good = tmp_path / "c.yaml"
    good.write_text(cfg.to_yaml())
    assert main(["run-attacks", "--config", str(good), "--out", str(tmp_path / "o"),
                 "--cache-dir", str(CACHE)]) == 1
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["status"] == "failed" and manifest["failures"]
    assert "manifest:" in capsys.readouterr().err


def test_plot_writer_csv_matches_drawn(tmp_path):
    w = PlotWriter(tmp_path)
    rows = [{"attack": "PGD", "iteration": i, "success": i / 10} for i in range(1, 4)]
    w.lines("curve", rows, "iteration", "success", "attack")
    back = list(csv.DictReader((tmp_path / "curve.csv").open()))
    assert [float(r["success"]) for r in back] == [0.1, 0.2, 0.3]
    w.heatmap("grid", [[0.1, 0.2], [0.3, 0.4]], ["a", "b"], ["x", "y"])
    assert (tmp_path / "grid.png").exists()
    with pytest.raises(ValueError):
        w.bars("curve", ["a"], [1.0])


def test_emit_plots_from_results(run_dir, tmp_path):
    paths = emit_plots(run_dir[0], tmp_path)
    assert any(p.name == "transfer.png" for p in paths)
    assert (tmp_path / "transfer.csv").exists()

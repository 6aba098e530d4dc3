import csv
import hashlib
import json

import numpy as np
import pytest
import yaml

from mvlab.cli import ConfigError, build_config, load_config, main, reference_config
from mvlab.variation import STATISTICS, remainder_rates


def write_config(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return str(path)


def zero_model(**extra):
    cfg = {"model": {"benchmark": None, "family": "linear_quadratic", "params": {}},
           "grid": {"M": 16}, "particles": 300, "seeds": [0, 1, 2, 3]}
    cfg.update(extra)
    return cfg


def manifest_artifacts(out):
    lines = (out / "manifest.txt").read_text().splitlines()
    start = lines.index("artifacts:")
    return dict(line.split("  ")[::-1] for line in lines[start + 1:]), lines[:start]


@pytest.mark.trivial
def test_zero_model_has_zero_cost(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["simulate", "--config", write_config(tmp_path, zero_model()), "--out", str(out)])
    assert code == 0
    assert json.loads((out / "cost.json").read_text())["cost"] == 0.0
    assert "PASS cost_finite" in capsys.readouterr().out


@pytest.mark.trivial
def test_invalid_grid_is_rejected_with_its_key(tmp_path, capsys):
    code = main(["simulate", "--config", write_config(tmp_path, zero_model(grid={"M": 0})),
                 "--out", str(tmp_path / "run")])
    assert code == 2
    assert "grid.M" in capsys.readouterr().err


def test_unknown_key_is_rejected(tmp_path, capsys):
    code = main(["simulate", "--config", write_config(tmp_path, {"grid": {"steps": 4}}),
                 "--out", str(tmp_path / "run")])
    assert code == 2
    assert "grid.steps" in capsys.readouterr().err


@pytest.mark.parametrize("change, key", [
    ({"particles": 0}, "particles"),
    ({"control": {"base": [2.0]}}, "control.base"),
    ({"model": {"benchmark": None}, "initial": {"std": [-1.0, 0.1]}}, "initial.std"),
    ({"eps": [2.0, 0.5, 0.25, 0.125]}, "eps"),
])
def test_config_validation_names_the_key(change, key):
    raw = reference_config()
    for k, v in change.items():
        if isinstance(v, dict):
            raw[k].update(v)
        else:
            raw[k] = v
    with pytest.raises(ConfigError) as info:
        build_config(raw)
    assert str(info.value).startswith(key)


def test_manifest_lists_every_artifact_with_its_hash(tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", "--config", write_config(tmp_path, zero_model()), "--out", str(out),
                 "--seed", "99"]) == 0
    artifacts, head = manifest_artifacts(out)
    written = {p.name for p in out.iterdir()} - {"manifest.txt"}
    assert set(artifacts) == written
    for name, digest in artifacts.items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    fields = dict(line.split(": ", 1) for line in head)
    assert fields["subcommand"] == "simulate" and fields["master_seed"] == "99"
    assert fields["mvlab"] == "0.1.0"
    assert fields["replicates"] == "0 1 2 3"
    resolved = yaml.safe_load((out / "config.resolved.yaml").read_text())
    assert resolved["seed"] == 99 and resolved["grid"]["M"] == 16


def test_results_do_not_depend_on_worker_count(tmp_path):
    cfg = write_config(tmp_path, {"particles": 1000, "grid": {"M": 16}})
    for workers in (1, 3):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / f"w{workers}"),
                     "--workers", str(workers)]) == 0
    for name in ("path_summary.csv", "final_ensemble.csv", "cost.json"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w3" / name).read_bytes()


def small_rates(**tolerances):
    cfg = {"particles": 128, "grid": {"M": 64}, "seeds": [0, 1, 2], "eps": [0.125, 0.0625, 0.03125, 0.015625],
           "rates": {"bootstrap": 50, "smoothing": False}}
    if tolerances:
        cfg["tolerances"] = tolerances
    return cfg


def test_rates_slopes_match_direct_computation(tmp_path):
    path = write_config(tmp_path, small_rates())
    out = tmp_path / "run"
    main(["rates", "--config", path, "--out", str(out)])
    cfg = load_config(path, None, None, None)
    direct = remainder_rates(cfg.model, cfg.space, cfg.grid, cfg.control_path(), cfg.perturbation, cfg.eps,
                             cfg.replicate_seeds(), cfg.xi, cfg.offset, n_boot=50)
    with open(out / "rates_slopes.csv", newline="") as fh:
        rows = {r["statistic"]: float(r["slope"]) for r in csv.DictReader(fh)}
    assert set(rows) == set(STATISTICS)
    for s in STATISTICS:
        assert rows[s] == direct.slopes[s]


def test_colliding_eps_values_are_a_config_error(tmp_path, capsys):
    cfg = small_rates()
    cfg["grid"] = {"M": 8}
    code = main(["rates", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path / "run")])
    assert code == 2
    assert "eps" in capsys.readouterr().err


def test_strict_mode_stops_at_first_failure(tmp_path, capsys):
    path = write_config(tmp_path, small_rates(slope_linear=[5.0, 6.0]))
    code = main(["rates", "--config", path, "--out", str(tmp_path / "run"), "--strict"])
    printed = capsys.readouterr().out
    assert code == 1
    assert [line.split(":")[0] for line in printed.splitlines() if line.startswith(("PASS", "FAIL"))] == \
        ["FAIL slope_xi"]
    assert "FAIL slope_xi" in (tmp_path / "run" / "summary.txt").read_text()


def test_failed_assertion_without_strict_runs_to_the_end(tmp_path, capsys):
    path = write_config(tmp_path, small_rates(slope_linear=[5.0, 6.0]))
    code = main(["rates", "--config", path, "--out", str(tmp_path / "run")])
    printed = capsys.readouterr().out
    assert code == 1
    assert "slope_zeta" in printed


def test_overflow_is_reported_as_simulation_fault(tmp_path, capsys):
    cfg = zero_model()
    cfg["model"]["params"] = {"Ax": [[1.0e6, 0.0], [0.0, 1.0e6]]}
    cfg["grid"] = {"M": 400}
    out = tmp_path / "run"
    code = main(["simulate", "--config", write_config(tmp_path, cfg), "--out", str(out)])
    assert code == 3
    assert "simulation fault" in capsys.readouterr().err
    assert "FAIL simulation" in (out / "summary.txt").read_text()
    assert (out / "manifest.txt").exists()


def test_lions_check_passes_on_reference_model(tmp_path):
    out = tmp_path / "run"
    assert main(["lions-check", "--out", str(out)]) == 0
    data = json.loads((out / "lions.json").read_text())
    assert set(data) == {"a", "b", "f", "h"}


def test_benchmark_configs_resolve():
    for name in ("tanh", "lq", "lq_diffusion"):
        raw = reference_config()
        raw["model"]["benchmark"] = name
        if name == "lq_diffusion":
            raw["space"].update({"n_state": 1, "n_noise": 1})
            raw["initial"] = {"mean": [0.5], "std": [0.2]}
        cfg = build_config(raw)
        assert cfg.model.n_state == cfg.space.n_state
        assert np.all(cfg.eps_realized >= cfg.eps - 1e-15)

import json

import numpy as np
import pytest

from ptgeo.cli import main
from ptgeo.config import baseline_sampler, build_posterior, load_config, parse_config
from ptgeo.errors import ConfigError, InvalidInputError
from ptgeo.io import COLUMNS, load_sensor_csv, read_table, subsample, subsample_csv, write_table
from ptgeo.sampler import read_store

from scenarios import gravity_stations


def minimal_config():
    return {
        "world": {
            "bounds": {"x_m": [0, 1000], "y_m": [0, 1000], "z_m": [0, 500]},
            "voxel_res": [4, 4, 5],
            "layers": [{"name": "rock", "mean_depth_m": 0.0}],
        },
        "priors": {"rock": {"properties": {"mean": [2.5],
                                           "cov": {"template": "independent", "sigma": 0.1}}}},
    }


def two_layer_project(tmp_path, iterations=60):
    loc = gravity_stations(5)
    rng = np.random.default_rng(0)
    rows = np.column_stack([loc.points, rng.standard_normal(len(loc.points))])
    write_table(tmp_path / "grav.csv", COLUMNS["gravity"], rows)
    cfg = {
        "world": {
            "bounds": {"x_m": [0, 4000], "y_m": [0, 4000], "z_m": [0, 2000]},
            "voxel_res": [6, 6, 10],
            "layers": [
                {"name": "cover", "mean_depth_m": 0.0},
                {"name": "basement", "mean_depth_m": 1000.0,
                 "control_grid": {"nx": 2, "ny": 2, "x_m": [1000, 3000], "y_m": [1000, 3000]}},
            ],
        },
        "priors": {
            "cover": {"properties": {"mean": [2.4], "cov": {"template": "independent", "sigma": 0.2}}},
            "basement": {"control": {"template": "independent", "sigma": 300.0},
                         "properties": {"mean": [2.7], "cov": {"template": "independent",
                                                                "sigma": 0.2}}},
        },
        "sensors": [{"kind": "gravity", "name": "grav", "data": "grav.csv"}],
        "sampler": {"iterations": iterations, "n_stacks": 2, "n_temps": 3, "thinning": 2,
                    "swap_interval": 3, "checkpoint_interval": 20},
        "outputs": {"directory": "run", "slice_depths_m": [500.0], "target_layer": "basement",
                    "entropy_depth_m": 500.0},
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    return path


def test_minimal_config_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(minimal_config()))
    cfg = load_config(p)
    assert cfg.sampler.n_stacks == 4 and cfg.sampler.n_temps == 8
    assert cfg.sampler.proposal == "pcn" and cfg.sampler.beta_min == 0.01
    assert cfg.format_version == 1 and cfg.sensors == []
    assert cfg.settings().iterations == 10_000


def test_negative_alpha_names_field():
    cfg = minimal_config()
    cfg["sensors"] = [{"kind": "gravity", "data": "g.csv", "noise": {"alpha": -1}}]
    with pytest.raises(ConfigError) as exc:
        parse_config(cfg)
    assert any(e.startswith("sensors.0.noise.alpha") for e in exc.value.errors)


def test_all_errors_reported_and_unknown_keys():
    cfg = minimal_config()
    cfg["bogus"] = 1
    cfg["sampler"] = {"n_stacks": 0, "beta_min": 2.0}
    with pytest.raises(ConfigError) as exc:
        parse_config(cfg)
    locs = " ".join(exc.value.errors)
    assert "bogus" in locs and "sampler.n_stacks" in locs and "sampler.beta_min" in locs


def test_non_pd_prior_rejected():
    cfg = minimal_config()
    cfg["priors"]["rock"]["properties"]["cov"] = {"matrix": [[-1.0]]}
    with pytest.raises(ConfigError):
        parse_config(cfg)
    cfg = minimal_config()
    cfg["priors"] = {}
    with pytest.raises(ConfigError, match="missing prior"):
        parse_config(cfg)


def test_baseline_sampler():
    s = baseline_sampler()
    assert (s.n_stacks, s.n_temps) == (4, 8)


def test_config_hash_ignores_run_length(tmp_path):
    path = two_layer_project(tmp_path)
    a = load_config(path)
    data = json.loads(path.read_text())
    data["sampler"]["iterations"] = 999
    b = parse_config(data, base_dir=tmp_path)
    data["sampler"]["seed"] = 5
    c = parse_config(data, base_dir=tmp_path)
    assert a.hash() == b.hash() != c.hash()
    before = a.hash()
    (tmp_path / "grav.csv").write_text((tmp_path / "grav.csv").read_text() + "1,1,1,1\n")
    assert load_config(path).hash() != before


def test_sensor_csv_parsing(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("x_m,y_m,z_m,value\n0,0,-1,1.5\n10,0,-1,2.5\n20,0,-1,0.5\n")
    loc, data = load_sensor_csv(p, "gravity")
    assert len(loc.points) == 3 and np.allclose(data.values, [1.5, 2.5, 0.5])
    assert np.allclose(data.reference, [0.0, 1.0, -1.0])  # gravity data are mean-centred
    p.write_text("x_m,y_m,z_m,value\nx_m,y_m,z_m,value\n0,0,-1,1\n")
    with pytest.raises(InvalidInputError, match="line 2"):
        load_sensor_csv(p, "gravity")
    p.write_text("x_m,y_m,z_m,value\n0,0,-1,1\n0,0,-1,nan\n")
    with pytest.raises(InvalidInputError, match="line 3"):
        load_sensor_csv(p, "gravity")
    p.write_text("")
    with pytest.raises(InvalidInputError, match="empty"):
        load_sensor_csv(p, "gravity")
    p.write_text("x_m,y_m,value\n0,0,1\n")
    with pytest.raises(InvalidInputError, match="z_m"):
        load_sensor_csv(p, "gravity")


def test_mt_csv_sorted(tmp_path):
    p = tmp_path / "mt.csv"
    p.write_text("x_m,y_m,freq_hz,app_res_ohmm,phase_deg\n"
                 "0,0,1,100,45\n0,0,10,10,40\n0,0,0.1,1000,50\n5,5,10,20,30\n5,5,1,30,35\n")
    survey, data = load_sensor_csv(p, "mt")
    assert np.allclose(survey.config.frequencies, [10, 1, 0.1])
    assert survey.rows[:3, 2].tolist() == [10, 1, 0.1]
    assert survey.row_site.tolist() == [0, 0, 0, 1, 1]
    assert survey.row_freq.tolist() == [0, 1, 2, 0, 1]
    assert np.allclose(data.reference[:, 0], np.log10([10, 100, 1000, 20, 30]))


def test_subsample(tmp_path):
    rows = np.arange(552 * 4, dtype=float).reshape(552, 4)
    out = subsample(rows, 100, seed=1)
    assert out.shape == (100, 4) and len(np.unique(out[:, 0])) == 100
    assert np.array_equal(out, subsample(rows, 100, seed=1))
    assert not np.array_equal(out, subsample(rows, 100, seed=2))
    assert np.array_equal(subsample(rows, 552, seed=3), rows)
    for n in (0, 553):
        with pytest.raises(InvalidInputError):
            subsample(rows, n, seed=0)
    write_table(tmp_path / "a.csv", COLUMNS["gravity"], rows)
    subsample_csv(tmp_path / "a.csv", tmp_path / "b.csv", "gravity", 100, 1)
    assert np.array_equal(read_table(tmp_path / "b.csv", COLUMNS["gravity"]), out)


def test_build_posterior(tmp_path):
    post = build_posterior(load_config(two_layer_project(tmp_path)))
    assert post.dim == 6 and post.sensors[0].name == "grav"
    assert np.isfinite(post.log_likelihood(post.prior.mean)).all()


def run_dir_files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())
            if p.is_file() and p.name != "timing.json"}


def test_cli_run_twice_identical(tmp_path, capsys):
    path = two_layer_project(tmp_path)
    assert main(["run", "--config", str(path), "--seed", "42", "--out", str(tmp_path / "a"),
                 "--workers", "1"]) == 0
    assert main(["run", "--config", str(path), "--seed", "42", "--out", str(tmp_path / "b"),
                 "--workers", "2"]) == 0
    a, b = run_dir_files(tmp_path / "a"), run_dir_files(tmp_path / "b")
    assert a.keys() == b.keys() and "samples_stack0.f64" in a
    assert all(a[k] == b[k] for k in a if k != "config.json")
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["status"] == "ok" and out["iterations"] == 60


def test_cli_resume_diagnose_voxelise(tmp_path, capsys):
    path = two_layer_project(tmp_path, iterations=40)
    run = tmp_path / "r"
    assert main(["run", "--config", str(path), "--out", str(run), "--workers", "1"]) == 0
    assert main(["resume", "--run-dir", str(run), "--iterations", "80", "--workers", "1"]) == 0
    assert read_store(run, "samples", 0).shape == (40, 6)
    assert main(["diagnose", "--run-dir", str(run)]) == 0
    rep = json.loads((run / "diagnostics" / "report.json").read_text())
    assert {"tau_min", "tau_med", "tau_max", "sigma", "S_mean", "N",
            "cpu_per_tau_max"} <= set(rep["table"])
    assert rep["format_version"] == 1 and len(rep["parameters"]) == 6
    assert (run / "diagnostics" / "slice_500m.csv").exists()
    assert (run / "diagnostics" / "residuals_grav.csv").exists()
    assert main(["voxelise", "--run-dir", str(run), "--sample", "3",
                 "--output", str(tmp_path / "v.csv")]) == 0
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "x_m,y_m,z_m,layer,density" and len(lines) == 1 + 6 * 6 * 10


def test_cli_errors_are_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    cfg = minimal_config()
    cfg["sampler"] = {"n_temps": 0}
    bad.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(bad)]) != 0
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "config" or "config" in err["error"].lower()
    assert any("n_temps" in d for d in err["details"])
    assert main(["resume", "--run-dir", str(tmp_path / "nowhere")]) != 0
    assert "error" in json.loads(capsys.readouterr().err.strip())


def test_cli_subsample(tmp_path, capsys):
    rows = np.arange(40.0).reshape(10, 4)
    write_table(tmp_path / "g.csv", COLUMNS["gravity"], rows)
    assert main(["subsample", "--input", str(tmp_path / "g.csv"), "--output",
                 str(tmp_path / "s.csv"), "--kind", "gravity", "--n", "4", "--seed", "9"]) == 0
    assert read_table(tmp_path / "s.csv", COLUMNS["gravity"]).shape == (4, 4)

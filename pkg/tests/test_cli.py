import json

import numpy as np
import pytest

from uotscaling import io
from uotscaling.cli import main


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(tmp_path, command, cfg=None, *extra):
    out = tmp_path / "out"
    argv = [command, "--out", str(out)]
    if cfg is not None:
        argv += ["--config", write_config(tmp_path, cfg)]
    return main(argv + list(extra)), out


SMALL = {"space": {"shape": [30]}, "solver": {"max_iter": 3000}}


def summary(out):
    return json.loads((out / "summary.json").read_text())


def test_transport_defaults(tmp_path):
    code, out = run(tmp_path, "transport", SMALL, "--epsilon", "0.01")
    assert code == 0
    s = summary(out)
    assert s["converged"]
    x, v = io.read_marginal_csv(out / "first_marginal.csv")
    _, p = io.read_marginal_csv(out / "p.csv")
    np.testing.assert_allclose(v, p, rtol=1e-6)


def test_transport_from_files(tmp_path):
    x = np.linspace(0, 1, 30)
    io.write_marginal_csv(tmp_path / "a.csv", x, np.exp(-(x - 0.3) ** 2 / 0.01) + 0.1)
    io.write_marginal_csv(tmp_path / "b.csv", x, np.exp(-(x - 0.6) ** 2 / 0.02) + 0.1)
    cfg = dict(SMALL, marginals=[{"file": "a.csv"}, {"file": "b.csv"}],
               first={"kind": "kl", "lam": 0.5}, second={"kind": "tv", "lam": 0.5})
    code, out = run(tmp_path, "transport", cfg)
    assert code == 0
    assert (out / "plan_support.csv").exists()


def test_barycenter_and_generalized(tmp_path):
    code, out = run(tmp_path, "barycenter", SMALL)
    assert code == 0 and (out / "barycenter.csv").exists()
    cfg = {"space": {"shape": [12]}, "epsilon": 0.05}
    code, out = run(tmp_path, "generalized", cfg)
    assert code == 0
    _, m0 = io.read_marginal_csv(out / "marginal_0.csv")
    _, m1 = io.read_marginal_csv(out / "marginal_1.csv")
    assert m0.shape == m1.shape == (12,)


def test_flow_empty_steps(tmp_path):
    cfg = dict(SMALL, flow={"energy": "congestion", "steps": 0})
    code, out = run(tmp_path, "flow", cfg)
    assert code == 0
    times, _, dens = io.read_trajectory_csv(out / "trajectory.csv")
    assert times.tolist() == [0.0] and dens.shape == (1, 30)


def test_flow_tumor_and_two_species(tmp_path):
    cfg = {"space": {"shape": [20]}, "cost": {"kind": "wf", "cutoff": 0.2}, "epsilon": 1e-3,
           "solver": {"max_iter": 500, "eps0": 1.0, "divisions": 3},
           "flow": {"energy": "tumor", "steps": 2, "tau": 0.01}}
    assert run(tmp_path, "flow", cfg)[0] == 0
    cfg["flow"]["energy"] = "two_species"
    code, out = run(tmp_path, "flow", cfg)
    assert code == 0 and (out / "trajectory_1.csv").exists()


def test_mass_emits_total_mass(tmp_path):
    cfg = dict(SMALL, first={"kind": "kl"}, second={"kind": "kl"},
               mass={"total": {"kind": "equality"}, "reference": 0.4})
    code, out = run(tmp_path, "mass", cfg)
    assert code == 0
    assert summary(out)["total_mass"] == pytest.approx(0.4, abs=1e-8)


def test_colortransfer(tmp_path):
    rng = np.random.default_rng(0)
    io.write_ppm(tmp_path / "src.ppm", rng.integers(0, 128, (6, 6, 3)))
    io.write_ppm(tmp_path / "tgt.ppm", rng.integers(128, 256, (6, 6, 3)))
    cfg = {"epsilon": 0.01, "color": {"source": "src.ppm", "target": "tgt.ppm",
                                      "resolution": [8, 4, 4]}}
    code, out = run(tmp_path, "colortransfer", cfg)
    assert code == 0
    img = io.read_ppm(out / "transferred.ppm")
    assert img.shape == (6, 6, 3)
    # colours move toward the brighter target
    assert img.astype(float).mean() > 128


@pytest.mark.parametrize("cfg", [
    {"epsilon": -1.0},
    {"unknown_key": 1},
    {"space": {"shape": [0]}},
    {"marginals": [{"file": "a.csv", "generator": "uniform"}]},
    {"kind": "flow"},
])
def test_config_errors_exit_2(tmp_path, cfg):
    assert run(tmp_path, "transport", cfg)[0] == 2


def test_missing_file_exit_2(tmp_path):
    cfg = {"marginals": [{"file": "nope.csv"}, {"file": "nope.csv"}]}
    assert run(tmp_path, "transport", cfg)[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["transport", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert run(tmp_path, "colortransfer", {})[0] == 2


def test_solver_failure_exit_3(tmp_path):
    # balanced marginals of different mass make the scalings diverge
    cfg = {"space": {"shape": [5]}, "solver": {"stabilized": False, "max_iter": 20000},
           "marginals": [{"generator": "uniform", "height": 1.0},
                         {"generator": "uniform", "height": 2.0}]}
    assert run(tmp_path, "transport", cfg, "--epsilon", "0.1")[0] == 3

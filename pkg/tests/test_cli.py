import json

import numpy as np
import pytest
import yaml

from mvquant import cli
from mvquant.cli import DEMO_CONFIGS, main, run_config, validate_artifacts
from mvquant.config import SUBSETS, load, schema, validate
from mvquant.errors import ConfigInvalid
from mvquant.gates import resolve_subset


def _write(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


# ---------------------------------------------------------------- config


def test_defaults_fill_every_section():
    cfg = validate({"kind": "linfp"})
    assert cfg.grid.dx == 0.02 and cfg.time.T == 1.0 and cfg.model.key == "median-attracting-ou"
    assert cfg.alpha_value == 0.5


@pytest.mark.parametrize("alpha", [1.2, 0.0, -0.5, [0.3, 1.5]])
def test_alpha_out_of_range_names_the_field(alpha):
    with pytest.raises(ConfigInvalid) as e:
        validate({"kind": "nonlinear", "alpha": alpha})
    assert e.value.field.startswith("alpha")


def test_list_alpha_must_be_single_level():
    assert validate({"kind": "nonlinear", "alpha": [0.3]}).alpha_value == 0.3
    with pytest.raises(ConfigInvalid, match="single"):
        validate({"kind": "nonlinear", "alpha": [0.3, 0.4]})


@pytest.mark.parametrize(
    "data, field",
    [
        ({"kind": "linfp", "grid": {"dx": -1}}, "grid.dx"),
        ({"kind": "linfp", "grid": {"x_min": 1, "x_max": 0}}, "grid"),
        ({"kind": "linfp", "model": {"key": "no-such-model"}}, "model"),
        ({"kind": "linfp", "bogus": 1}, "bogus"),
        ({"kind": "stable", "stable": {"alpha_s": 2.5}}, "stable.alpha_s"),
        ({"kind": "particles", "particles": {"seeds": []}}, "particles.seeds"),
        ({"kind": "linfp", "init": {"kind": "csv"}}, "init"),
        ({"kind": "nope"}, "kind"),
    ],
)
def test_invalid_fields_are_named(data, field):
    with pytest.raises(ConfigInvalid) as e:
        validate(data)
    assert e.value.field.startswith(field)


def test_unknown_subset_rejected():
    with pytest.raises(ConfigInvalid, match="subset"):
        validate({"kind": "verify", "verify": {"subset": "everything"}})
    with pytest.raises(ConfigInvalid, match="subset"):
        resolve_subset("everything")


def test_subsets_partition_the_gates():
    ids = sorted(i for v in SUBSETS.values() for i in v)
    assert ids == list(range(1, 13))
    assert resolve_subset("kernels") == [7, 8]
    assert resolve_subset(None) == list(range(1, 13))


def test_load_yaml_and_bad_yaml(tmp_path):
    assert load(_write(tmp_path, DEMO_CONFIGS["linfp"])).kind == "linfp"
    bad = tmp_path / "bad.yaml"
    bad.write_text("kind: [linfp\n")
    with pytest.raises(ConfigInvalid):
        load(bad)
    with pytest.raises(ConfigInvalid):
        load(tmp_path / "missing.yaml")


def test_schema_lists_sections(capsys):
    s = schema()
    assert {"grid", "time", "model", "alpha", "particles", "verify"} <= set(s["properties"])
    assert main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["title"] == "ScenarioConfig"


# ---------------------------------------------------------------- runs


def test_linfp_run_writes_artifacts(tmp_path, capsys):
    cfg = _write(tmp_path, DEMO_CONFIGS["linfp"])
    out = tmp_path / "out"
    assert main(["linfp", "run", "--config", str(cfg), "--out", str(out)]) == 0
    slices = sorted((out / "path").glob("slice_*.csv"))
    assert len(slices) >= 2
    q = np.loadtxt(out / "quantile.csv", delimiter=",", skiprows=1)
    assert q.shape[1] == 2 and q[0, 0] == 0.0
    man = json.loads((out / "run.json").read_text())
    assert man["exit_status"] == 0 and man["gates"]["mass"]["passed"]
    assert man["config"]["model"]["params"] == {"amplitude": 0.5}
    assert "path/manifest.json" in man["artifacts"]
    assert "linfp: PASS" in capsys.readouterr().out


def test_alpha_error_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, dict(DEMO_CONFIGS["nonlinear"], alpha=1.2))
    assert main(["nonlinear", "solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "alpha" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_kind_mismatch_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, DEMO_CONFIGS["linfp"])
    assert main(["nonlinear", "solve", "--config", str(cfg)]) == 2
    assert "kind" in capsys.readouterr().err


def test_unknown_subset_exits_2(capsys):
    assert main(["verify", "--subset", "everything"]) == 2
    assert "subset" in capsys.readouterr().err


@pytest.mark.parametrize("kind", sorted(DEMO_CONFIGS))
def test_demo_scenarios_pass(kind, tmp_path):
    assert run_config(DEMO_CONFIGS[kind], out=str(tmp_path), quiet=True) == 0
    man = json.loads((tmp_path / "run.json").read_text())
    assert man["config"]["kind"] == kind and man["versions"]["mvquant"]
    assert "out" not in man["config"]
    assert json.loads((tmp_path / "timing.json").read_text())["wall_seconds"] >= 0


def test_nonlinear_outputs(tmp_path):
    run_config(DEMO_CONFIGS["nonlinear"], out=str(tmp_path), quiet=True)
    omega = np.loadtxt(tmp_path / "omega.csv", delimiter=",", skiprows=1)
    # quantile level 0.25 of the OU model sits below zero
    assert np.all(omega[:, 1] < 0)
    assert (tmp_path / "trace.json").exists()


def test_stable_output_is_restricted_to_box(tmp_path):
    data = DEMO_CONFIGS["stable"]
    run_config(data, out=str(tmp_path), quiet=True)
    first = sorted((tmp_path / "path").glob("slice_*.csv"))[0]
    x = np.loadtxt(first, delimiter=",", skiprows=2, usecols=0)
    assert x.min() >= data["grid"]["x_min"] and x.max() <= data["grid"]["x_max"]


def test_particles_write_one_directory_per_seed(tmp_path):
    run_config(DEMO_CONFIGS["particles"], out=str(tmp_path), quiet=True)
    assert sorted(p.name for p in tmp_path.glob("seed_*")) == ["seed_0000", "seed_0001"]
    gaps = json.loads((tmp_path / "chaos_gap.json").read_text())
    assert set(gaps["sup_gap"]) == {"0", "1"} and gaps["N"] == 2000


def test_dirac_start_nonlinear(tmp_path):
    data = dict(DEMO_CONFIGS["nonlinear"], init={"kind": "dirac", "xi": 0.5, "width_cells": 2})
    assert run_config(data, out=str(tmp_path), quiet=True) == 0


def test_solver_error_exits_1(tmp_path, capsys):
    # dt far above the positivity limit of the linear solver
    data = dict(DEMO_CONFIGS["linfp"], time={"T": 0.5, "dt": 0.5, "n_save": 2}, grid={"x_min": -6, "x_max": 6, "dx": 0.005})
    assert run_config(data, out=str(tmp_path)) == 1
    assert capsys.readouterr().err


def test_verify_subset_runs_only_its_gates(tmp_path, capsys):
    assert main(["verify", "--subset", "density", "--out", str(tmp_path)]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("[")]
    assert len(lines) == 1 and lines[0].startswith("[PASS]  3 ")
    report = json.loads((tmp_path / "report.json").read_text())
    assert [r["id"] for r in report] == [3]


def test_failed_gate_exits_1(tmp_path, monkeypatch):
    from mvquant import gates

    def broken(session):
        raise RuntimeError("forced")

    monkeypatch.setitem(gates.GATES, 3, ("quantile Lipschitz bound", broken))
    assert main(["verify", "--subset", "density", "--out", str(tmp_path)]) == 1


# ---------------------------------------------------------------- manifest


def test_manifest_hashes_detect_tampering(tmp_path):
    run_config(DEMO_CONFIGS["linfp"], out=str(tmp_path), quiet=True)
    assert validate_artifacts(tmp_path) == []
    assert main(["validate", str(tmp_path)]) == 0
    victim = tmp_path / "quantile.csv"
    victim.write_text(victim.read_text() + "9,9\n")
    assert validate_artifacts(tmp_path) == ["quantile.csv"]
    assert main(["validate", str(tmp_path)]) == 1


def test_validate_without_manifest_exits_2(tmp_path):
    assert main(["validate", str(tmp_path)]) == 2


def test_identical_runs_give_identical_manifests(tmp_path):
    for d in ("a", "b"):
        run_config(DEMO_CONFIGS["particles"], out=str(tmp_path / d), quiet=True)
    assert (tmp_path / "a" / "run.json").read_bytes() == (tmp_path / "b" / "run.json").read_bytes()


def test_module_entry_point():
    assert cli.main.__module__ == "mvquant.cli"

import json

import numpy as np
import pytest

from roughvisc.cli import PRESETS, STAGES, ConfigError, load_config, main, validate_config
from roughvisc.operators import Operator
from roughvisc.pdesolve import Field, Grid, solve_pde

pytestmark = pytest.mark.filterwarnings("ignore::roughvisc.rpde.DomainExitWarning")


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def summary(out):
    with open(out / "summary.json") as fh:
        return json.load(fh)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate(name, capsys):
    assert main(["validate", "--preset", name]) == 0
    assert "0 diagnostics" in capsys.readouterr().out


def test_misspelled_kind_single_diagnostic(tmp_path, capsys):
    cfg = {"command": "opcheck", "operator": {"kind": "hjbb", "controls": [{"sigma": 1.0, "b": 0.0}]}}
    assert main(["validate", "--config", write(tmp_path, cfg)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "operator.kind" in err[0]


def test_grid_dimension_mismatch():
    cfg = dict(PRESETS["transport"], grid={"n": 2, "L": 4.0, "h": 0.01})
    diags = validate_config(cfg)
    assert len(diags) == 1 and diags[0].startswith("grid.n")


def test_cross_reference_diagnostics():
    base = PRESETS["transport"]
    assert validate_config(dict(base, fields={"name": "sine-cosine"}))[0].startswith("fields.name")
    assert validate_config(dict(base, grid={"n": 1, "L": 1.0, "h": 0.3}))[0].startswith("grid.h")
    assert validate_config(dict(base, operator={"kind": "custom"}))[0].startswith("operator.kind")
    bad_sigma = dict(base, operator={"kind": "linear", "sigma": [[1.0, 0.0], [0.0, 1.0]], "b": 0.0})
    assert validate_config(bad_sigma)[0].startswith("operator.sigma")
    tw = dict(PRESETS["twisted-sincos"], levels=[5, 4])
    assert validate_config(tw) == ["levels: must be strictly increasing"]


def test_json_syntax_error_reports_position():
    with pytest.raises(ConfigError) as exc:
        load_config(text='{"command": "solve",\n  "T": }')
    assert exc.value.diagnostics[0].startswith("line 2 column")


def test_missing_source(capsys):
    assert main(["validate"]) == 2


def test_transport_preset_runs(tmp_path):
    out = tmp_path / "res"
    assert main(["run", "--preset", "transport", "--out", str(out)]) == 0
    doc = summary(out)
    assert doc["status"] == 0 and doc["assertions"][0]["passed"]
    assert (out / "u.csv").exists() and (out / "u.csv.json").exists() and (out / "driver.json").exists()


def test_assertion_failure_exit_code(tmp_path):
    path = write(tmp_path, {"preset": "transport", "tolerance": 1e-12})
    assert main(["run", "--config", path, "--out", str(tmp_path / "r")]) == 4
    assert summary(tmp_path / "r")["assertions"][0]["passed"] is False


def test_identity_driver_matches_plain_pde_golden(tmp_path):
    cfg = {"command": "solve", "T": 0.2, "grid": {"n": 1, "L": 3.0, "h": 0.05},
           "operator": {"kind": "linear", "sigma": 0.8, "b": 0.3},
           "fields": {"name": "sin-cos"}, "driver": {"kind": "identity", "level": 3},
           "initial": {"name": "gaussian", "variance": 0.2}, "out_slices": 2}
    out = tmp_path / "r"
    assert main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
    g = Grid(1, 3.0, 0.05, 0.2)
    F = Operator("linear", 1, lambda t, x: np.full((x.shape[0], 1, 1), 0.8),
                 lambda t, x: np.full((x.shape[0], 1), 0.3))
    v = solve_pde(F, Field.initial(g, lambda x: np.exp(-x[:, 0] ** 2 / 0.4)), 0.2, [0.1, 0.2])
    v.to_csv(tmp_path / "golden.csv")
    assert (out / "u.csv").read_bytes() == (tmp_path / "golden.csv").read_bytes()


def test_byte_identical_reruns(tmp_path):
    cfg = {"command": "solve", "T": 0.5, "seed": 3, "grid": {"n": 1, "L": 3.0, "h": 0.05},
           "operator": {"kind": "linear", "sigma": 0.5, "b": 0.0},
           "fields": {"name": "sin-cos"}, "driver": {"kind": "brownian", "level": 6},
           "initial": {"name": "hat", "width": 1.0}}
    path = write(tmp_path, cfg)
    for d in ("a", "b"):
        assert main(["run", "--config", path, "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "u.csv").read_bytes() == (tmp_path / "b" / "u.csv").read_bytes()
    main(["run", "--config", path, "--out", str(tmp_path / "c"), "--seed", "4"])
    assert summary(tmp_path / "c")["config"]["seed"] == 4
    assert (tmp_path / "a" / "u.csv").read_bytes() != (tmp_path / "c" / "u.csv").read_bytes()


def test_numerical_abort_carries_stage(tmp_path, capsys):
    # sigma sigma^T = [[1, .9], [.9, .82]] is not diagonally dominant
    cfg = {"command": "solve", "T": 0.1, "grid": {"n": 2, "L": 1.0, "h": 0.1},
           "operator": {"kind": "linear", "sigma": [[1.0, 0.0], [0.9, 0.1]], "b": 0.0},
           "fields": {"name": "constant", "params": {"vectors": [[1.0, 0.0]]}},
           "driver": {"kind": "identity"}, "initial": {"name": "gaussian"}}
    out = tmp_path / "r"
    assert main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == 3
    err = summary(out)["error"]
    assert err["stage"] in STAGES and "MonotonicityError" in err["message"]
    assert "abort [" in capsys.readouterr().err


def test_wongzakai_resolved_smooth_driver(tmp_path):
    cfg = {"command": "wongzakai", "T": 1.0, "grid": {"n": 1, "L": 3.0, "h": 0.05},
           "operator": {"kind": "linear", "sigma": 0.0, "b": 0.0}, "fields": {"name": "sin-cos"},
           "driver": {"kind": "smooth", "samples": 17}, "initial": {"name": "hat", "width": 1.0},
           "levels": [4, 5, 6]}
    out = tmp_path / "r"
    assert main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
    check = summary(out)["assertions"][0]
    assert check["passed"] and check["value"] <= 1e-6
    assert (out / "wongzakai_seed0.csv").read_text().startswith("level,consecutive")


def test_twisted_summary_has_ratio_check(tmp_path):
    path = write(tmp_path, {"preset": "twisted-sincos", "grid": {"n": 1, "L": 4.0, "h": 0.08},
                            "levels": [3, 4], "out_slices": 2})
    out = tmp_path / "r"
    main(["run", "--config", path, "--out", str(out)])
    doc = summary(out)
    assert "ratio_check" in doc["summary"] and (out / "twisted.json").exists()


def test_opcheck_command(tmp_path):
    cfg = {"command": "opcheck", "operator": {"kind": "hjb", "controls": [{"sigma": 1.0, "b": 0.5},
                                                                          {"sigma": 0.3, "b": -0.5}]},
           "samples": 400}
    out = tmp_path / "r"
    assert main(["run", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
    assert summary(out)["summary"]["violations"] == 0 and (out / "modulus.json").exists()

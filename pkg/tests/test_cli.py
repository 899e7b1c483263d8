import csv
import json
from pathlib import Path

import pytest

from agmm.cli import main
from agmm.experiment import ConfigError, load_config, parse_config, replicate_seed

ROOT = Path(__file__).resolve().parents[1]
FAST = {"train": {"T": 10, "layer_widths": [1, 8, 1], "critic": {"K": 5, "r": 10}},
        "direct_nn": {"widths": [1, 8, 1], "epochs": 2}, "n": 120, "marginal_count": 50}


def write_cfg(tmp_path, name="cfg.json", **kw):
    cfg = {"schema_version": 1, "functions": ["abs"], "M_experiments": 2, **FAST, **kw}
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_minimal_run_counts_and_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(write_cfg(tmp_path)), "--out", str(out), "--workers", "1"]) == 0
    recs = rows(out / "records.csv")
    assert len(recs) == 2 * 7 * 2
    assert {r["scheme"] for r in recs} == {"grid", "marginal"}
    assert rows(out / "errors.csv") == []
    assert (out / "summary.csv").exists()
    assert sorted(p.name for p in (out / "tables").iterdir()) == [
        "dgp1_g0.5_d1_grid.txt", "dgp1_g0.5_d1_marginal.txt"]
    rid = "dgp1_abs_g0.5_d1_r001"
    assert main(["traces", "--out", str(out), "--run", rid]) == 0
    tr = rows(out / "runs" / rid / "traces.csv")
    assert len(tr) == 10 and set(tr[0]) == {"iter", "loss", "max_violation", "sigma_entropy"}
    assert main(["kernels", "--out", str(out), "--run", rid]) == 0
    k = json.loads((out / "runs" / rid / "kernels.json").read_text())
    assert set(k) == {"initial", "final"} and len(k["final"]["centers"]) == 5
    assert main(["traces", "--out", str(out), "--run", "nope"]) == 1


def test_rerun_is_byte_identical_across_worker_counts(tmp_path):
    cfg = write_cfg(tmp_path)
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--workers", "1"])
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--workers", "2"])
    a = (tmp_path / "a" / "records.csv").read_bytes()
    assert a == (tmp_path / "b" / "records.csv").read_bytes()
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()


def test_adding_a_cell_keeps_existing_records(tmp_path):
    one = write_cfg(tmp_path, "one.json", M_experiments=1)
    two = write_cfg(tmp_path, "two.json", M_experiments=1, functions=["linear", "abs"])
    main(["run", "--config", str(one), "--out", str(tmp_path / "one"), "--workers", "1"])
    main(["run", "--config", str(two), "--out", str(tmp_path / "two"), "--workers", "1"])
    only_abs = [r for r in rows(tmp_path / "two" / "records.csv") if r["function"] == "abs"]
    assert only_abs == rows(tmp_path / "one" / "records.csv")


def test_only_cell(tmp_path):
    cfg = write_cfg(tmp_path, functions=["linear", "abs"], M_experiments=1)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--only-cell", "1"]) == 0
    assert {r["function"] for r in rows(tmp_path / "o" / "records.csv")} == {"abs"}
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "p"), "--only-cell", "5"]) == 1


def test_partial_failure_exit_code(tmp_path):
    # K exceeds n: every replicate fails but the sweep completes
    cfg = write_cfg(tmp_path, train={"T": 5, "critic": {"K": 500, "r": 10}})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--workers", "1"]) == 2
    errs = rows(tmp_path / "o" / "errors.csv")
    assert len(errs) == 2 and "K=500" in errs[0]["error"]


@pytest.mark.parametrize(
    "patch,field",
    [
        ({"schema_version": 2}, "schema_version"),
        ({"functions": ["cubic"]}, "functions[0]"),
        ({"gammas": [1.5]}, "gammas[0]"),
        ({"train": {"T": 0}}, "train"),
        ({"train": {"critic": {"Kay": 3}}}, "train.critic.Kay"),
        ({"bogus": 1}, "bogus"),
        ({"dgps": [2], "dims": [1]}, "dims"),
    ],
)
def test_config_errors_name_the_field(tmp_path, capsys, patch, field):
    cfg = write_cfg(tmp_path, **patch)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert field in capsys.readouterr().err


def test_invalid_json_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "schema_version": 1,\n  "functions": [abs]\n}')
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "line 3" in capsys.readouterr().err


def test_missing_out_dir(tmp_path):
    assert main(["run", "--config", str(write_cfg(tmp_path))]) == 1


@pytest.mark.parametrize("path", sorted((ROOT / "configs").glob("*.json")), ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.cells()


def test_full_scale_configs_verbatim():
    cfg = load_config(ROOT / "configs" / "fig3_full.json")
    assert cfg.M_experiments == 100 and cfg.train.layer_widths == (1, 1000, 1000, 1000, 1)
    assert cfg.train.T == 400 and cfg.train.critic.K == 50 and cfg.train.critic.r == 50
    sweep = load_config(ROOT / "configs" / "fig4_dimension_full.json")
    assert {c[2] for c in sweep.cells()} == set(range(1, 11))


def test_seed_derivation_is_stable():
    cell = (1, 0.5, 1, "abs")
    assert replicate_seed(0, cell, 3) == replicate_seed(0, cell, 3)
    assert replicate_seed(0, cell, 3) != replicate_seed(0, cell, 4)
    assert replicate_seed(5, cell, 3) != replicate_seed(0, cell, 3)


def test_parse_config_direct():
    with pytest.raises(ConfigError):
        parse_config([])
    cfg = parse_config({"schema_version": 1, "functions": ["sin"], "baselines": False})
    assert cfg.estimators == ["AGMM-avg", "AGMM-final", "AGMM-best"]

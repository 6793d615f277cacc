import csv
import io
import json

import pytest

from ccrstyles import DomainError, StructuringStyle as S
from ccrstyles.cli import load_spec, main, render, run, spec_from_dict


def write(tmp_path, payload, name="run.json"):
    p = tmp_path / name
    p.write_text(payload if isinstance(payload, str) else json.dumps(payload))
    return str(p)


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


BASE = {"model": {}, "grid": {"steps": 10, "reset_every": 1},
        "sim": {"n_paths": 4000, "batch_size": 1000, "seed": 5}}


def test_price_without_counterparty_default(tmp_path, capsys):
    cfg = write(tmp_path, {**BASE, "model": {"lambda_C": 0.0}, "styles": ["FtdCva"]})
    assert main(["price", "--config", cfg]) == 0
    rows = read_csv(capsys.readouterr().out)
    cva = next(r for r in rows if r["quantity"] == "cva")
    assert float(cva["estimate"]) == 0.0 and float(cva["std_error"]) == 0.0
    assert float(cva["oracle_value"]) == 0.0
    assert {r["quantity"] for r in rows} == {"cva", "dva", "gamma", "v_B", "cva_C", "dva_C", "gamma_C", "v_C"}


def test_invalid_recovery_names_the_field(tmp_path, capsys):
    cfg = write(tmp_path, {**BASE, "model": {"R_C": 1.5}, "styles": ["FtdCva"]})
    assert main(["price", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert "R_C" in err and "recovery" in err


@pytest.mark.parametrize("payload,needle", [
    ("{not json", "run.json"),
    ({**BASE, "extras": {}, "styles": ["FtdCva"]}, "extras"),
    ({**BASE, "sim": {"paths": 10}, "styles": ["FtdCva"]}, "sim.paths"),
    ({**BASE, "styles": ["NoSuchStyle"]}, "styles"),
    ({**BASE, "grid": {"steps": 0}, "styles": ["FtdCva"]}, "grid.steps"),
    ({**BASE}, "styles"),
])
def test_bad_run_files_exit_2(tmp_path, capsys, payload, needle):
    cfg = write(tmp_path, payload)
    assert main(["price", "--config", cfg]) == 2
    assert needle in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path, capsys):
    assert main(["price", "--config", str(tmp_path / "absent.json")]) == 2
    assert "cannot read" in capsys.readouterr().err


def test_json_output_to_file(tmp_path):
    cfg = write(tmp_path, {**BASE, "styles": ["UcvaOnly"], "output": {"format": "json"}})
    out = tmp_path / "report.json"
    assert main(["price", "--config", cfg, "--out", str(out), "--paths", "2000"]) == 0
    rows = json.loads(out.read_text())
    assert all(r["n_paths"] == 2000 and r["seed"] == 5 for r in rows)
    cva = next(r for r in rows if r["quantity"] == "cva")
    assert cva["oracle_value"] == pytest.approx(0.0030778545236665425, rel=1e-12)


def test_json_renders_non_finite_as_text():
    rows = [{"style": "x", "quantity": "q", "estimate": float("inf")}]
    assert json.loads(render(rows, "json", "price"))[0]["estimate"] == "inf"


def test_report_independent_of_worker_count(tmp_path):
    cfg = write(tmp_path, {**BASE, "styles": ["FtdCva", "PortableCvaC1", "QuadripartitePeriodic"]})
    one, many = tmp_path / "one.csv", tmp_path / "many.csv"
    assert main(["price", "--config", cfg, "--out", str(one), "--workers", "1"]) == 0
    assert main(["price", "--config", cfg, "--out", str(many), "--workers", "4"]) == 0
    assert one.read_bytes() == many.read_bytes()


def test_check_exit_code_tracks_expected_passes(tmp_path):
    fine = write(tmp_path, {**BASE, "styles": ["FtdCva"], "expect_pass": ["FtdCva"]}, "a.json")
    broken = write(tmp_path, {**BASE, "styles": ["UcvaOnly"], "expect_pass": True}, "b.json")
    out = tmp_path / "check.csv"
    assert main(["check", "--config", fine, "--out", str(out)]) == 0
    rows = read_csv(out.read_text())
    assert [r["check"] for r in rows] == ["A", "B", "C", "R"]
    assert rows[3]["verdict"] == "not-applicable"
    assert main(["check", "--config", broken, "--out", str(out)]) == 3
    rows = read_csv(out.read_text())
    assert next(r for r in rows if r["check"] == "B")["verdict"] == "fail"


def test_compare_includes_every_style_and_mismatch():
    spec = spec_from_dict({**BASE, "styles": "all"})
    rows, code = run(spec.replace(sim=spec.sim.replace(n_paths=2000)), "compare")
    assert code == 0
    mism = {r["style"]: r for r in rows if r["quantity"] == "closeout_mismatch"}
    assert set(mism) == {s.value for s in S}
    assert mism["FtdCva"]["estimate"] == 0.0 and mism["BcvaRiskFreeCloseout"]["estimate"] > 0


def test_tranche_mode(tmp_path, capsys):
    cfg = write(tmp_path, {**BASE, "pool": {"counterparties": [{}, {"lambda_C": 0.05}, {"sigma": 0.2}]},
                           "tranches": [{"attachment": 0.0, "notional": 0.01},
                                        {"attachment": 0.0, "notional": 10.0}]})
    assert main(["tranche", "--config", cfg]) == 0
    rows = read_csv(capsys.readouterr().out)
    el = rows[0]
    assert (el["style"], el["quantity"]) == ("pool", "expected_loss")
    assert abs(float(el["z_vs_oracle"])) < 4
    spreads = [float(r["estimate"]) for r in rows if r["quantity"] == "spread"]
    assert len(spreads) == 2 and spreads[0] >= spreads[1] > 0


def test_tranche_mode_needs_tranches():
    with pytest.raises(DomainError):
        run(spec_from_dict({**BASE, "styles": ["FtdCva"]}), "tranche")


def test_explicit_grid_and_liquidity(tmp_path):
    spec = load_spec(write(tmp_path, {**BASE, "grid": {"times": [0, 1, 2.5, 5], "resets": [0, 2.5, 5]},
                                      "liquidity": {"kind": "constant_fraction", "kappa": 0.1},
                                      "styles": ["PortableCvaC2"]}))
    assert spec.grid.resets.tolist() == [0.0, 2.5, 5.0]
    rows, _ = run(spec, "price")
    # liquidity-adjusted prices have no quadrature reference
    assert all(r["oracle_value"] is None for r in rows)

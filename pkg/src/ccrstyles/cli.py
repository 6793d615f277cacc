"""Command-line front end: parse a JSON run file, price, check, write a report.

Usage::

    ccrstyles {price,compare,check,tranche} --config run.json [--out FILE]
              [--format csv|json] [--seed N] [--paths N] [--workers N]

Exit codes: 0 success, 2 invalid input (the message names the field),
3 a check that the run file requires to pass failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import oracle
from .axioms import COLUMNS, verdict_matrix
from .errors import CcrError, ConfigParse, DomainError
from .liquidity import LiquiditySpec
from .margin import PoolConfig, TrancheSpec, pool_loss, simulate_pool, tranche_spreads
from .model import ModelConfig, StructuringStyle, TimeGrid, validate
from .sim import EstimatorStats, SimSettings, batch_ranges, _Partial, _pairwise, _stats
from .structures import closeout_mismatch, fair_value

S = StructuringStyle
MODES = ("price", "compare", "check", "tranche")
ROW_FIELDS = ("style", "quantity", "estimate", "std_error", "n_paths", "seed", "oracle_value",
              "z_vs_oracle")
CHECK_FIELDS = ("style", "check", "axiom", "verdict", "discrepancy", "p_value", "n_paths", "seed",
                "detail")
_SIM_KEYS = {"n_paths", "seed", "batch_size", "antithetic", "workers"}


@dataclass(frozen=True)
class RunSpec:
    model: ModelConfig
    grid: TimeGrid
    sim: SimSettings
    styles: tuple = ()
    tranches: tuple = ()
    liquidity: LiquiditySpec = field(default_factory=LiquiditySpec)
    pool: PoolConfig | None = None
    out: str | None = None
    format: str = "csv"
    expect_pass: tuple = ()

    def __post_init__(self):
        if not self.styles and not self.tranches:
            raise DomainError("styles", "request at least one style or tranche")
        if self.format not in ("csv", "json"):
            raise DomainError("format", f"expected 'csv' or 'json', got {self.format!r}")

    def replace(self, **kw) -> "RunSpec":
        from dataclasses import replace
        return replace(self, **kw)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

def _section(d: dict, key: str, kind=dict):
    val = d.get(key, kind())
    if not isinstance(val, kind):
        raise DomainError(key, f"expected a {kind.__name__}")
    return val


def _grid(d: dict, T: float) -> TimeGrid:
    if "times" in d:
        return TimeGrid(np.asarray(d["times"], dtype=float),
                        np.asarray(d.get("resets", [0.0, d["times"][-1]]), dtype=float))
    unknown = set(d) - {"steps", "reset_every"}
    if unknown:
        raise DomainError(f"grid.{sorted(unknown)[0]}", "unknown grid parameter")
    steps = d.get("steps", 10)
    if not isinstance(steps, int) or steps < 1:
        raise DomainError("grid.steps", "must be a positive integer")
    every = d.get("reset_every")
    if every is not None and (not isinstance(every, int) or every < 1):
        raise DomainError("grid.reset_every", "must be a positive integer")
    return TimeGrid.uniform(T, steps, every)


def _sim(d: dict) -> SimSettings:
    unknown = set(d) - _SIM_KEYS
    if unknown:
        raise DomainError(f"sim.{sorted(unknown)[0]}", "unknown simulation parameter")
    for k in ("n_paths", "seed", "batch_size", "workers"):
        if k in d and (not isinstance(d[k], int) or isinstance(d[k], bool)):
            raise DomainError(f"sim.{k}", "must be an integer")
    return SimSettings(**d)


def _styles(raw) -> tuple:
    if raw == "all":
        return tuple(S)
    if not isinstance(raw, list):
        raise DomainError("styles", "expected a list of style names or 'all'")
    try:
        return tuple(S(s) for s in raw)
    except ValueError as exc:
        raise DomainError("styles", str(exc)) from None


def spec_from_dict(d: dict) -> RunSpec:
    """Build and validate a :class:`RunSpec` from the parsed run file."""
    if not isinstance(d, dict):
        raise ConfigParse("run file must hold a JSON object")
    unknown = set(d) - {"model", "grid", "sim", "styles", "tranches", "pool", "liquidity",
                        "output", "expect_pass"}
    if unknown:
        raise DomainError(sorted(unknown)[0], "unknown section")
    model = validate(_section(d, "model"))
    grid = _grid(_section(d, "grid"), model.T)
    if grid.T != model.T:
        raise DomainError("grid", f"grid ends at {grid.T}, model maturity is {model.T}")
    sim = _sim(_section(d, "sim"))
    styles = _styles(d.get("styles", []))
    tranches = tuple(TrancheSpec(float(t["attachment"]), float(t["notional"]))
                     for t in d.get("tranches", []))
    liquidity = LiquiditySpec.from_dict(_section(d, "liquidity"))
    pool = None
    if tranches or "pool" in d:
        p = _section(d, "pool")
        members = tuple(validate({**model.to_dict(), **m}) for m in p.get("counterparties", [{}]))
        pool = PoolConfig(members, np.asarray(p.get("resets", grid.resets), dtype=float),
                          p.get("side", "quadri"))
    out = _section(d, "output")
    expect = d.get("expect_pass", [])
    expect = tuple(S) if expect is True else (() if expect is False else _styles(expect))
    return RunSpec(model, grid, sim, styles, tranches, liquidity, pool,
                   out.get("path"), out.get("format", "csv"), expect)


def load_spec(path: str | Path) -> RunSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigParse(f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParse(f"{path}: {exc}") from None
    return spec_from_dict(raw)


# --------------------------------------------------------------------------
# oracle lookups
# --------------------------------------------------------------------------

def _oracles(c: ModelConfig, style: StructuringStyle) -> dict:
    """Quadrature reference values for the reported quantities, if available."""
    if not c.zero_correlation or c.amortizing and style in (S.PortableCvaC1, S.PortableCvaC2):
        return {}
    u_bc, u_cb = oracle.ucva_quadrature(c, "BC"), oracle.ucva_quadrature(c, "CB")
    gamma_bc = gamma_cb = 0.0
    if style in (S.UcvaOnly, S.BcvaRiskFreeCloseout, S.BcvaReplacementCloseout):
        cva, cva_c = u_bc, u_cb
    elif style is S.FtdCva:
        cva, cva_c = oracle.ftdcva_quadrature(c, "BC"), oracle.ftdcva_quadrature(c, "CB")
    elif style in (S.PortableCvaC1, S.PortableCvaC2):
        rule = "C2" if style is S.PortableCvaC2 else "C1"
        gamma_bc = oracle.gamma_quadrature(c, rule, "BC")
        gamma_cb = oracle.gamma_quadrature(c, rule, "CB")
        cva, cva_c = u_bc + gamma_bc, u_cb + gamma_cb
    elif style is S.TripartitePeriodic:
        cva, cva_c = 0.0, u_cb
    else:
        cva, cva_c = 0.0, 0.0
    conserving = style.money_conserving
    dva = cva_c if conserving else 0.0
    dva_c = cva if conserving else 0.0
    out = {"cva": cva, "dva": dva, "gamma": gamma_bc, "cva_C": cva_c, "dva_C": dva_c,
           "gamma_C": gamma_cb, "v_B": c.m0 - cva + dva, "v_C": -c.m0 - cva_c + dva_c}
    return out


def _mismatch_oracle(c: ModelConfig, style: StructuringStyle):
    if not c.zero_correlation:
        return None
    if style is S.BcvaRiskFreeCloseout:
        return oracle.gamma_quadrature(c, "C1", "CB") + oracle.gamma_quadrature(c, "C1", "BC")
    if style is S.BcvaReplacementCloseout:
        return oracle.gamma_quadrature(c, "C2", "CB") + oracle.gamma_quadrature(c, "C2", "BC")
    return 0.0


# --------------------------------------------------------------------------
# jobs
# --------------------------------------------------------------------------

def _row(style, quantity, st: EstimatorStats, sim: SimSettings, ref=None) -> dict:
    z = None if ref is None else st.z_score(ref)
    return {"style": style, "quantity": quantity, "estimate": st.mean, "std_error": st.std_error,
            "n_paths": st.n, "seed": sim.seed, "oracle_value": ref, "z_vs_oracle": z}


def price_rows(spec: RunSpec, styles, with_mismatch: bool = False) -> list[dict]:
    rows = []
    c, sim = spec.model, spec.sim
    liq = None if spec.liquidity.is_none else spec.liquidity
    for style in styles:
        res = fair_value(c, spec.grid, sim, style, liq)
        refs = _oracles(c, style) if liq is None else {}
        for q in ("cva", "dva", "gamma", "v_B", "cva_C", "dva_C", "gamma_C", "v_C"):
            rows.append(_row(style.value, q, getattr(res, q), sim, refs.get(q)))
        if with_mismatch:
            mm = closeout_mismatch(c, spec.grid, sim, style, liq)
            ref = _mismatch_oracle(c, style) if liq is None else None
            rows.append(_row(style.value, "closeout_mismatch", mm, sim, ref))
    return rows


def check_rows(spec: RunSpec) -> tuple[list[dict], bool]:
    styles = spec.styles or tuple(S)
    matrix = verdict_matrix(spec.model, spec.grid, spec.sim, styles)
    rows, ok = [], True
    for style in styles:
        for col in COLUMNS:
            v = matrix[(style, col)]
            rows.append({"style": style.value, "check": col, "axiom": v.axiom,
                         "verdict": v.verdict.value, "discrepancy": v.discrepancy,
                         "p_value": v.p_value, "n_paths": spec.sim.n_paths,
                         "seed": spec.sim.seed, "detail": v.detail})
            if style in spec.expect_pass and not v.passed:
                ok = False
    return rows, ok


def _pool_expected_loss(spec: RunSpec) -> EstimatorStats:
    pool, sim = spec.pool, spec.sim
    r = pool.counterparties[0].r
    resets = pool.resets
    parts = []
    for start, count in batch_ranges(sim):
        bundle = simulate_pool(pool, start, count, sim.seed)
        losses = [pool_loss(bundle, t) for t in resets]
        v = sum(math.exp(-r * resets[i + 1]) * (losses[i + 1] - losses[i])
                for i in range(resets.size - 1))
        parts.append(_Partial.of(np.asarray(v, dtype=float)))
    return _stats(_pairwise(parts), sim.n_paths)


def tranche_rows(spec: RunSpec) -> list[dict]:
    if spec.pool is None or not spec.tranches:
        raise DomainError("tranches", "tranche mode needs a pool and at least one tranche")
    sim = spec.sim
    rows = []
    el = _pool_expected_loss(spec)
    ref = None
    if spec.pool.side == "quadri" and all(m.zero_correlation for m in spec.pool.counterparties):
        ref = oracle.pool_loss_quadrature(spec.pool.counterparties, spec.pool.resets,
                                          spec.pool.counterparties[0].r)
    rows.append(_row("pool", "expected_loss", el, sim, ref))
    for ts in tranche_spreads(spec.pool, spec.tranches, sim):
        name = f"tranche[{ts.tranche.attachment!r},{ts.tranche.notional!r}]"
        rows.append(_row(name, "protection", ts.protection, sim))
        rows.append(_row(name, "premium", ts.premium, sim))
        rows.append({**_row(name, "spread", EstimatorStats(ts.spread, 0.0, sim.n_paths), sim),
                     "std_error": None})
    return rows


def run(spec: RunSpec, mode: str) -> tuple[list[dict], int]:
    """Execute one job; returns the report rows and the exit code."""
    if mode == "price":
        return price_rows(spec, spec.styles), 0
    if mode == "compare":
        return price_rows(spec, tuple(S), with_mismatch=True), 0
    if mode == "check":
        rows, ok = check_rows(spec)
        return rows, 0 if ok else 3
    if mode == "tranche":
        return tranche_rows(spec), 0
    raise DomainError("mode", f"expected one of {MODES}")


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def render(rows: list[dict], fmt: str, mode: str) -> str:
    fields = CHECK_FIELDS if mode == "check" else ROW_FIELDS
    if fmt == "json":
        return json.dumps([{k: _json_value(r.get(k)) for k in fields} for r in rows], indent=2) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in fields])
    return buf.getvalue()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccrstyles", description="Counterparty-risk structuring styles")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", required=True, help="JSON run file")
    p.add_argument("--out", help="report file (default: stdout)")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--workers", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = load_spec(args.config)
        sim = spec.sim
        overrides = {k: v for k, v in (("seed", args.seed), ("n_paths", args.paths),
                                       ("workers", args.workers)) if v is not None}
        if overrides:
            sim = sim.replace(**overrides)
        spec = spec.replace(sim=sim, out=args.out or spec.out, format=args.format or spec.format)
        rows, code = run(spec, args.mode)
        text = render(rows, spec.format, args.mode)
        if spec.out:
            Path(spec.out).write_text(text)
        else:
            sys.stdout.write(text)
    except (CcrError, ValueError) as exc:
        print(f"ccrstyles: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ccrstyles: error: {exc}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

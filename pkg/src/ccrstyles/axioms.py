"""Executable consistency checks for the structuring styles.

Four columns are checked per style:

* ``A`` martingale: the adjustment discounted and stopped at the first
  default has constant expectation, where at the counterparty's default it
  is replaced by the value its close-out rule prescribes.
* ``B`` money conservation: one party's DVA is the other party's CVA.
* ``C`` close-out: on every simulated first default the style's CVA jump
  equals the rule's value.
* ``R`` reset equilibrium: lenders break even window by window.

Statistical verdicts use ``|z| < 3`` for each tested quantity; the reported
p-value is Bonferroni-adjusted over the quantities of one check.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from . import analytic
from .errors import UnsupportedStyle
from .liquidity import LiquiditySpec
from .margin import WINDOW_NODES, highfreq_premium, lender_fairness
from .model import ModelConfig, StructuringStyle, TimeGrid
from .sim import PathBatch, SimSettings, map_batches, mc_estimate, mc_estimate_columns
from .structures import (_style_dva_at_default, closeout_mismatch, default_events, default_state,
                         fair_value, portable_rule, survivor_mark, unilateral_loss)

S = StructuringStyle
COLUMNS = ("A", "B", "C", "R")
Z_LIMIT = 3.0
_PERIODIC = (S.TripartitePeriodic, S.QuadripartitePeriodic, S.PentapartiteCcp)


class Verdict(str, enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    STATISTICAL_PASS = "statistical-pass"
    NOT_APPLICABLE = "not-applicable"


@dataclass(frozen=True)
class AxiomVerdict:
    axiom: str
    style: StructuringStyle
    verdict: Verdict
    discrepancy: float = 0.0
    p_value: float | None = None
    detail: str = ""
    z_scores: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.p_value is not None and not 0.0 <= self.p_value <= 1.0:
            raise ValueError("p-value outside [0, 1]")

    @property
    def passed(self) -> bool:
        return self.verdict is not Verdict.FAIL


def _bonferroni(zs) -> float:
    zs = [abs(z) for z in zs if math.isfinite(z)]
    if not zs:
        return 1.0
    p = 2.0 * float(ndtr(-max(zs)))
    return min(1.0, p * len(zs))


def _statistical(axiom, style, named_stats, detail="") -> AxiomVerdict:
    """Verdict from ``(name, stats)`` pairs whose target value is 0."""
    zs = tuple(st.z_score(0.0) for _, st in named_stats)
    worst = max(named_stats, key=lambda kv: abs(kv[1].mean), default=(None, None))[1]
    disc = worst.mean if worst is not None else 0.0
    ok = all(abs(z) < Z_LIMIT for z in zs)
    text = "; ".join(f"{n}: {st.mean:.3e} (z={z:+.2f})" for (n, st), z in zip(named_stats, zs))
    if detail:
        text = f"{detail}; {text}" if text else detail
    return AxiomVerdict(axiom, style, Verdict.STATISTICAL_PASS if ok else Verdict.FAIL,
                        disc, _bonferroni(zs), text, zs)


# --------------------------------------------------------------------------
# A: martingale until default
# --------------------------------------------------------------------------

class _GammaTable:
    """Portable correction as a function of ``M_t(B)`` at a fixed ``t``."""

    def __init__(self, config, t, closeout, direction, nodes=121, width=8.0):
        a = float(analytic._amort(config, t))
        sd = max(a * config.sigma * math.sqrt(t), 1e-12)
        self.m = np.linspace(a * config.m0 - width * sd, a * config.m0 + width * sd, nodes)
        self.v = analytic.gamma_conditional(config, self.m, t, closeout, direction)

    def __call__(self, m):
        return np.interp(m, self.m, self.v)


def _process_kind(style: StructuringStyle):
    """``(unilateral kind, portable rule or None)`` of a bipartite CVA process."""
    if style is S.FtdCva:
        return "ftd", None
    if style in (S.PortableCvaC1, S.PortableCvaC2):
        return "ucva", portable_rule(style)
    return "ucva", None


def _martingale_columns(style, batch: PathBatch, checkpoints, sides, tables, v0):
    c = batch.config
    kind, prule = _process_kind(style)
    rule = style.closeout_rule
    cols = {}
    t_idx = np.searchsorted(batch.grid.times, checkpoints)
    first = np.minimum(batch.tau_B, batch.tau_C)
    for assessor, defaulter in sides:
        extra = c.hazard(assessor) if kind == "ftd" else 0.0
        tau_x, tau_y, m_x, _ = default_state(batch, defaulter)
        _, _, m_y, _ = default_state(batch, assessor)
        R = c.recovery(defaulter)
        # value taken at the counterparty's default, as the rule prescribes
        ix = np.flatnonzero(np.isfinite(tau_x) & (tau_x < tau_y))
        ms = survivor_mark(m_x[ix], assessor)
        dva = _style_dva_at_default(style, c, ms, tau_x[ix], assessor)
        if rule == "C1":
            at_x = (1.0 - R) * np.maximum(ms, 0.0) + dva
        else:
            at_x = (1.0 - R) * np.maximum(ms + dva, 0.0)
        # value at the assessor's own default: the part that keeps running
        iy = np.flatnonzero(np.isfinite(tau_y) & (tau_y < tau_x))
        if kind == "ftd":
            at_y = np.zeros(iy.size)
        else:
            at_y = analytic.protection_value(c, m_y[iy], tau_y[iy], defaulter)
        for t, k in zip(checkpoints, t_idx):
            m_t = batch.m_grid[:, k]
            alive = first > t
            pre = analytic.protection_value(c, m_t, t, defaulter, extra_hazard=extra)
            if prule is not None:
                pre = pre + tables[(assessor + defaulter, t)](m_t)
            d = np.where(alive, math.exp(-c.r * t) * pre, 0.0)
            sel = tau_x[ix] <= t
            d[ix[sel]] = batch.discount(tau_x[ix[sel]]) * at_x[sel]
            sel = tau_y[iy] <= t
            d[iy[sel]] = batch.discount(tau_y[iy[sel]]) * at_y[sel]
            cols[f"{assessor}{defaulter}@{t:g}"] = d - v0[assessor + defaulter]
    return cols


def _bipartite_martingale(style, config, grid, settings, checkpoints, sides):
    kind, prule = _process_kind(style)
    grid = grid.with_times(checkpoints)
    tables = {}
    if prule is not None:
        for a, d in sides:
            for t in checkpoints:
                tables[(a + d, t)] = _GammaTable(config, t, prule, a + d)
    v0 = {}
    for a, d in sides:
        extra = config.hazard(a) if kind == "ftd" else 0.0
        v = float(analytic.protection_value(config, config.m0, 0.0, d, extra_hazard=extra))
        if prule is not None:
            v += float(analytic.gamma_conditional(config, config.m0, 0.0, prule, a + d)[0])
        v0[a + d] = v
    res = mc_estimate_columns(
        lambda b: _martingale_columns(style, b, checkpoints, sides, tables, v0),
        config, grid, settings, compare=[])
    return list(res.stats.items())


def select_windows(grid: TimeGrid, max_windows: int = 12) -> list[tuple[float, float]]:
    """Reset windows of ``grid``, thinned evenly to at most ``max_windows``."""
    r = grid.resets
    idx = np.arange(r.size - 1)
    if idx.size > max_windows:
        idx = np.unique(np.linspace(0, r.size - 2, max_windows).round().astype(int))
    return [(float(r[i]), float(r[i + 1])) for i in idx]


def _window_grid(config: ModelConfig, windows, extra=()) -> TimeGrid:
    edges = {0.0, config.T}
    for a, b in windows:
        edges |= {a, b}
    return TimeGrid.from_resets(sorted(edges), extra)


def _window_martingale_columns(batch: PathBatch, windows, side_pairs):
    """Midpoint martingale of the windowed lender CVA, conditional on the window start."""
    c = batch.config
    times = batch.grid.times
    cols = {}
    for lender, (defaulter, other) in side_pairs:
        tau_x, tau_y, m_x, _ = default_state(batch, defaulter)
        survivor = "B" if defaulter == "C" else "C"
        R = c.recovery(defaulter)
        first = np.minimum(tau_x, tau_y)
        pay = (1.0 - R) * np.maximum(survivor_mark(m_x, survivor), 0.0)
        for t0, t1 in windows:
            tm = 0.5 * (t0 + t1)
            k0, km = np.searchsorted(times, [t0, tm])
            start = first > t0
            w0 = analytic.protection_value(c, batch.m_grid[:, k0], t0, defaulter, end=t1,
                                           extra_hazard=c.hazard(other), nodes=WINDOW_NODES)
            wm = analytic.protection_value(c, batch.m_grid[:, km], tm, defaulter, end=t1,
                                           extra_hazard=c.hazard(other), nodes=WINDOW_NODES)
            hit = start & (tau_x <= tm) & (tau_x < tau_y)
            d = np.where(first > tm, math.exp(-c.r * tm) * wm, 0.0)
            d = np.where(hit, batch.discount(tau_x) * pay, d)
            cols[f"{lender}[{t0:g},{t1:g}]"] = np.where(start, d - math.exp(-c.r * t0) * w0, 0.0)
    return cols


def check_martingale(style: StructuringStyle, config: ModelConfig, grid: TimeGrid,
                     settings: SimSettings, checkpoints=None) -> AxiomVerdict:
    """Discounted adjustment stopped at the first default keeps its t=0 value."""
    style = S(style)
    checkpoints = sorted(set(float(t) for t in (checkpoints or (1.0, 2.5, config.T))
                             if 0.0 < t <= config.T))
    if style in (S.BcvaRiskFreeCloseout, S.BcvaReplacementCloseout):
        mm = closeout_mismatch(config, grid, settings, style)
        if mm.mean != 0.0 or mm.std_error != 0.0:
            return AxiomVerdict("A1", style, Verdict.FAIL, mm.mean, None,
                                f"close-out mismatch {mm.mean:.6e} +/- {mm.std_error:.2e}: the CVA "
                                f"does not jump to the {style.closeout_rule} value")
    if not style.is_collateralized:
        stats = _bipartite_martingale(style, config, grid, settings, checkpoints,
                                      (("B", "C"), ("C", "B")))
        return _statistical("A1", style, stats, f"checkpoints {checkpoints}")

    windows = select_windows(grid)
    sides = [("A", ("C", "B"))]
    if style is not S.TripartitePeriodic:
        sides.append(("D", ("B", "C")))
    wgrid = _window_grid(config, windows, [0.5 * (a + b) for a, b in windows])
    res = mc_estimate_columns(lambda b: _window_martingale_columns(b, windows, sides),
                              config, wgrid, settings, compare=[])
    stats = list(res.stats.items())
    if style is S.TripartitePeriodic:
        # the unsecured leg on B's default is an ordinary unilateral CVA of C
        stats += _bipartite_martingale(S.UcvaOnly, config, grid, settings, checkpoints, (("C", "B"),))
    return _statistical("A1", style, stats, f"{len(windows)} windows")


# --------------------------------------------------------------------------
# B: money conservation
# --------------------------------------------------------------------------

def check_money_conservation(style: StructuringStyle, config: ModelConfig, grid: TimeGrid,
                             settings: SimSettings) -> AxiomVerdict:
    """Exact: the DVA of one party is the very estimator of the other's CVA."""
    style = S(style)
    res = fair_value(config, grid, settings, style)
    if not style.money_conserving:
        missing = res.cva_C
        return AxiomVerdict("B1", style, Verdict.FAIL, missing.mean, None,
                            f"DVA booked as 0 while the counterparty books CVA {missing.mean:.6e}"
                            f" +/- {missing.std_error:.2e}; v_B + v_C = {res.conservation_gap:.6e}")
    same = res.dva is res.cva_C and res.dva_C is res.cva
    gap = res.conservation_gap
    if same and gap == 0.0:
        return AxiomVerdict("B1", style, Verdict.PASS, 0.0, None, "v_B + v_C = 0 exactly")
    return AxiomVerdict("B1", style, Verdict.FAIL, gap, None, "role-swapped estimators differ")


# --------------------------------------------------------------------------
# C: close-out rule
# --------------------------------------------------------------------------

def check_closeout(style: StructuringStyle, config: ModelConfig, grid: TimeGrid,
                   settings: SimSettings, rule: str | None = None,
                   liquidity: LiquiditySpec | None = None) -> AxiomVerdict:
    """Both sides of the close-out equation on every first-default event."""
    style = S(style)
    rule = rule or style.closeout_rule

    def per_batch(batch):
        worst, worst_rel, events = 0.0, 0.0, 0
        for ev in default_events(style, batch, rule, liquidity):
            res = np.abs(ev.residual[ev.hit])
            if res.size:
                worst = max(worst, float(res.max()))
                worst_rel = max(worst_rel, float((res / (1.0 + np.abs(ev.m_survivor[ev.hit]))).max()))
            events += int(ev.hit.sum())
        return worst, worst_rel, events

    parts = map_batches(per_batch, config, grid, settings)
    worst = max(p[0] for p in parts)
    worst_rel = max(p[1] for p in parts)
    events = sum(p[2] for p in parts)
    axiom = rule.rstrip("'") if not style.is_collateralized else "C1"
    verdict = Verdict.PASS if worst_rel < 1e-10 else Verdict.FAIL
    return AxiomVerdict(axiom, style, verdict, worst, None,
                        f"rule {rule}: {events} first-default events, max |residual| {worst:.3e}")


# --------------------------------------------------------------------------
# R: reset equilibrium
# --------------------------------------------------------------------------

def check_reset_equilibrium(style: StructuringStyle, config: ModelConfig, grid: TimeGrid,
                            settings: SimSettings,
                            liquidity: LiquiditySpec | None = None) -> AxiomVerdict:
    """Lenders break even per window; bipartite styles have no resets to check."""
    style = S(style)
    if not style.is_collateralized:
        return AxiomVerdict("R", style, Verdict.NOT_APPLICABLE, 0.0, None, "no margin lender")
    windows = select_windows(grid)
    wgrid = _window_grid(config, windows)
    wanted = set(windows)
    all_windows = list(zip(wgrid.resets[:-1].tolist(), wgrid.resets[1:].tolist()))
    structure = "tri" if style is S.TripartitePeriodic else "quadri"
    sides = ["A"] if structure == "tri" else ["A", "D"]
    stats = []
    for side in sides:
        per_window = lender_fairness(config, wgrid, settings, structure, side, liquidity)
        for w, st in zip(all_windows, per_window):
            if w in wanted:
                stats.append((f"{side}[{w[0]:g},{w[1]:g}]", st))
    detail = f"{len(windows)} windows"
    if structure == "tri":
        leg = mc_estimate(lambda b: unilateral_loss(b, "B"), config, grid, settings)
        detail += f"; persistent DVA(B,C) leg {leg.mean:.6e} +/- {leg.std_error:.2e}"
    if style is S.QuadripartiteHighFreq:
        hf = highfreq_premium(config, grid, settings, "A", liquidity)
        detail += f"; premia sum {hf.total.mean:.6e}"
    return _statistical("R", style, stats, detail)


# --------------------------------------------------------------------------
# matrix
# --------------------------------------------------------------------------

@dataclass
class VerdictMatrix:
    cells: dict

    def __getitem__(self, key) -> AxiomVerdict:
        style, col = key
        return self.cells[(S(style), col)]

    def row(self, style) -> list[AxiomVerdict]:
        return [self[(style, c)] for c in COLUMNS]

    def rows(self) -> list[dict]:
        out = []
        for (style, col), v in self.cells.items():
            out.append({"style": style.value, "check": col, "axiom": v.axiom,
                        "verdict": v.verdict.value, "discrepancy": v.discrepancy,
                        "p_value": v.p_value, "detail": v.detail})
        return out


def verdict_matrix(config: ModelConfig, grid: TimeGrid, settings: SimSettings,
                   styles=None, checkpoints=None) -> VerdictMatrix:
    """Every style against every check column; no cell is left undecided."""
    styles = [S(s) for s in (styles or list(S))]
    cells, shared = {}, {}

    def reuse(key, style, compute):
        # quadri-type styles run the same window tests; compute them once
        if key is None:
            return compute()
        if key not in shared:
            shared[key] = compute()
        return replace(shared[key], style=style)

    for style in styles:
        quadri = style.is_collateralized and style is not S.TripartitePeriodic
        cells[(style, "A")] = reuse("A" if quadri else None, style, lambda: check_martingale(
            style, config, grid, settings, checkpoints))
        cells[(style, "B")] = check_money_conservation(style, config, grid, settings)
        cells[(style, "C")] = check_closeout(style, config, grid, settings)
        same_r = style in (S.QuadripartitePeriodic, S.PentapartiteCcp)
        cells[(style, "R")] = reuse("R" if same_r else None, style, lambda: check_reset_equilibrium(
            style, config, grid, settings))
    return VerdictMatrix(cells)


def check(style, column: str, config, grid, settings) -> AxiomVerdict:
    fn = {"A": check_martingale, "B": check_money_conservation, "C": check_closeout,
          "R": check_reset_equilibrium}.get(column)
    if fn is None:
        raise UnsupportedStyle(f"unknown check column {column!r}")
    return fn(style, config, grid, settings)

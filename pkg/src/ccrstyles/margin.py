"""Collateralized styles: lender premia, reset fairness, tranches, netting, carry.

A margin lender ``A`` insures the default of ``C`` (a second lender ``D``
insures ``B`` in the quadri-partite styles) against premia that are reset
periodically.  The lender's pool of insured defaults can be tranched.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import analytic
from .errors import DegeneratePool, DomainError, UnsupportedStyle
from .liquidity import LiquiditySpec
from .model import ModelConfig, ScenarioPath, TimeGrid
from .sim import (POOL_STREAM_STRIDE, EstimatorStats, PathBatch, SimSettings, _pairwise,
                  _Partial, _stats, batch_ranges, map_batches, mc_estimate,
                  mc_estimate_columns, simulate)
from .structures import default_state, survivor_mark

__all__ = [
    "LiquiditySpec", "TrancheSpec", "PoolConfig", "PoolPaths", "NettingSet", "Trade",
    "HighFreqPremia", "TrancheSpread", "StackReport", "highfreq_premium",
    "periodic_window_cva", "lender_fairness", "simulate_pool", "pool_loss", "tranche_cut",
    "tranche_loss", "tranche_spread", "tranche_spreads", "tranche_stack_consistency",
    "netting_set_exposure", "netting_set_report", "repo_carry_cost",
]

WINDOW_NODES = 32  # windows are short; relative error ~4e-9
_SIDES = {"A": ("C", "B"), "D": ("B", "C")}  # lender side -> (insured defaulter, other)


def _side(side: str):
    if side not in _SIDES:
        raise DomainError("side", f"expected 'A' or 'D', got {side!r}")
    return _SIDES[side]


def _structure(structure: str) -> str:
    if structure not in ("quadri", "tri"):
        raise DomainError("structure", f"expected 'quadri' or 'tri', got {structure!r}")
    return structure


def _coarse_grid(config: ModelConfig) -> TimeGrid:
    return TimeGrid(np.array([0.0, config.T]), np.array([0.0, config.T]))


def lender_loss(batch: PathBatch, defaulter: str, liquidity: LiquiditySpec | None = None):
    """Undiscounted lender payment ``(1-R)((M)^- + min(L, H))`` and the uncovered residual."""
    c = batch.config
    _, _, m_B, z = default_state(batch, defaulter)
    survivor = "B" if defaulter == "C" else "C"
    base = np.maximum(survivor_mark(m_B, survivor), 0.0)
    rec = c.recovery(defaulter)
    if liquidity is None or liquidity.is_none:
        return (1.0 - rec) * base, np.zeros(batch.size)
    L = liquidity.sample(m_B, z)
    return (1.0 - rec) * (base + liquidity.lender_share(L)), (1.0 - rec) * liquidity.residual(L)


# --------------------------------------------------------------------------
# high-frequency resets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class HighFreqPremia:
    """Fair per-step premia (valued at t=0) and their sum."""

    times: np.ndarray
    steps: list
    total: EstimatorStats
    residual: EstimatorStats


def highfreq_premium(config: ModelConfig, grid: TimeGrid, settings: SimSettings, side: str = "A",
                     liquidity: LiquiditySpec | None = None) -> HighFreqPremia:
    """Premium stream that balances the lender's protection step by step.

    The premium for step ``(t_k, t_{k+1}]`` is the discounted expected
    payment on the insured default inside that step.  Each default lands in
    exactly one step, so the stream sums path by path to the unilateral
    protection value.  The exposure at the default time is exact (bridged),
    so paths are simulated on a coarse grid and ``grid`` only fixes the steps.
    """
    defaulter, _ = _side(side)
    if settings.antithetic:
        raise DomainError("antithetic", "not supported for per-step premia")
    edges = grid.times
    n_steps = edges.size - 1

    def per_batch(batch: PathBatch):
        tau = default_state(batch, defaulter)[0]
        pay, resid = lender_loss(batch, defaulter, liquidity)
        hit = np.isfinite(tau)
        pay = np.where(hit, batch.discount(tau) * pay, 0.0)
        resid = np.where(hit, batch.discount(tau) * resid, 0.0)
        idx = np.clip(np.searchsorted(edges, np.where(hit, tau, edges[-1]), side="left") - 1,
                      0, n_steps - 1)
        n = batch.size
        s1 = np.bincount(idx, weights=pay, minlength=n_steps)
        s2 = np.bincount(idx, weights=pay * pay, minlength=n_steps)
        mean = s1 / n
        steps = _Partial(n, mean, np.maximum(s2 - s1 * mean, 0.0))
        return steps, _Partial.of(pay), _Partial.of(resid)

    parts = map_batches(per_batch, config, _coarse_grid(config), settings)
    step_stats = _stats(_pairwise([p[0] for p in parts]), settings.n_paths)
    total = _stats(_pairwise([p[1] for p in parts]), settings.n_paths)
    resid = _stats(_pairwise([p[2] for p in parts]), settings.n_paths)
    return HighFreqPremia(edges, step_stats, total, resid)


def discretization_tolerance(config: ModelConfig, grid: TimeGrid, value: float) -> float:
    """``2 dt (lambda_C + r) value`` for the largest step ``dt`` of ``grid``."""
    dt = float(np.max(np.diff(grid.times)))
    return 2.0 * dt * (config.lambda_C + config.r) * abs(value)


# --------------------------------------------------------------------------
# periodic resets
# --------------------------------------------------------------------------

def _liquidity_terms(liquidity: LiquiditySpec | None):
    if liquidity is None or liquidity.is_none:
        return 0.0, 0.0
    if liquidity.kind == "constant_fraction":
        if math.isfinite(liquidity.haircut):
            raise DomainError("liquidity.haircut",
                              "finite haircut with exposure-proportional costs is only priced by simulation")
        return liquidity.kappa, 0.0
    return 0.0, liquidity.expected_lender_share()


def periodic_window_cva(config: ModelConfig, window: tuple[float, float], m, structure: str = "quadri",
                        side: str = "A", liquidity: LiquiditySpec | None = None):
    """Lender CVA at the window start given ``M_start(B) = m`` (the reset premium).

    Side ``"A"`` covers C's default inside the window provided C defaults
    first.  For ``structure="tri"`` side ``"D"`` is the uncollateralized leg
    ``CVA(C,B)``, valued without any window or first-to-default indicator.
    """
    _structure(structure)
    defaulter, other = _side(side)
    start, end = float(window[0]), float(window[1])
    if end < start:
        raise DomainError("window", "end precedes start")
    if structure == "tri" and side == "D":
        out = analytic.protection_value(config, m, start, "B")
        return out if np.ndim(out) else float(out)
    kappa, lmean = _liquidity_terms(liquidity)
    out = analytic.protection_value(config, m, start, defaulter, end=end,
                                    extra_hazard=config.hazard(other), kappa=kappa,
                                    liquidity_mean=lmean, nodes=WINDOW_NODES)
    return out if np.ndim(out) else float(out)


def _reset_index(grid: TimeGrid) -> np.ndarray:
    return np.searchsorted(grid.times, grid.resets)


def window_pnl_columns(batch: PathBatch, grid: TimeGrid, structure: str, side: str,
                       liquidity: LiquiditySpec | None, premium_scale: float = 1.0) -> np.ndarray:
    """Discounted lender P&L per window (premium received minus protection paid)."""
    c = batch.config
    defaulter, other = _side(side)
    tau_x = default_state(batch, defaulter)[0]
    tau_y = default_state(batch, other)[0]
    first = np.minimum(tau_x, tau_y)
    pay, _ = lender_loss(batch, defaulter, liquidity)
    m_grid = batch.m_grid
    ridx = _reset_index(grid)
    resets = grid.resets
    cols = np.zeros((batch.size, resets.size - 1))
    for i in range(resets.size - 1):
        t0, t1 = resets[i], resets[i + 1]
        alive = first > t0
        premium = periodic_window_cva(c, (t0, t1), m_grid[:, ridx[i]], structure, side, liquidity)
        hit = alive & (tau_x <= t1) & (tau_x < tau_y)
        payout = np.where(hit, batch.discount(tau_x) * pay, 0.0)
        cols[:, i] = np.where(alive, math.exp(-c.r * t0) * premium_scale * premium, 0.0) - payout
    return cols


def lender_fairness(config: ModelConfig, grid: TimeGrid, settings: SimSettings,
                    structure: str = "quadri", side: str = "A",
                    liquidity: LiquiditySpec | None = None,
                    premium_scale: float = 1.0) -> list[EstimatorStats]:
    """Expected discounted lender P&L for each reset window of ``grid``.

    With ``premium_scale=1`` the premia are the fair window CVAs and every
    window should break even up to Monte Carlo error.
    """
    _structure(structure)
    _side(side)
    if structure == "tri" and side == "D":
        raise UnsupportedStyle("the tri-partite structure has no lender on B's default")
    return mc_estimate(lambda b: window_pnl_columns(b, grid, structure, side, liquidity, premium_scale),
                       config, grid, settings)


# --------------------------------------------------------------------------
# tranches
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrancheSpec:
    """Slice ``(L, L+N]`` of cumulative pool loss."""

    attachment: float
    notional: float

    def __post_init__(self):
        if not (math.isfinite(self.attachment) and self.attachment >= 0):
            raise DomainError("attachment", "must be finite and >= 0")
        if not (math.isfinite(self.notional) and self.notional > 0):
            raise DomainError("notional", "must be finite and > 0")

    @property
    def detachment(self) -> float:
        return self.attachment + self.notional


@dataclass(frozen=True)
class PoolConfig:
    """Counterparties served by one margin lender, and the premium reset dates."""

    counterparties: tuple
    resets: np.ndarray
    side: str = "quadri"

    def __post_init__(self):
        members = tuple(self.counterparties)
        if not members:
            raise DomainError("counterparties", "pool must not be empty")
        r, T = members[0].r, members[0].T
        if any(m.r != r or m.T != T for m in members):
            raise DomainError("counterparties", "all members must share r and T")
        _structure(self.side)
        grid = TimeGrid.from_resets(self.resets)
        if grid.T != T:
            raise DomainError("resets", f"last reset {grid.T} differs from maturity {T}")
        object.__setattr__(self, "counterparties", members)
        object.__setattr__(self, "resets", grid.resets)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.from_resets(self.resets)


@dataclass
class PoolPaths:
    """Per-member default times and loss summands for a block of paths."""

    tau: np.ndarray   # (members, paths)
    loss: np.ndarray  # (members, paths), 0 where the member survives

    @property
    def n_paths(self) -> int:
        return self.tau.shape[1]


def _member_summand(batch: PathBatch, side: str) -> np.ndarray:
    c = batch.config
    m = batch.m_tau_C
    hit = np.isfinite(batch.tau_C)
    if side == "quadri":
        val = np.maximum(m, 0.0)
    else:
        # the survivor also loses its own DVA on the novated trade
        val = np.zeros(batch.size)
        idx = np.flatnonzero(hit)
        udva = analytic.inner_udva_vec(c, m[idx], batch.tau_C[idx], "B")
        val[idx] = np.maximum(m[idx] + udva, 0.0)
    return np.where(hit, (1.0 - c.R_C) * val, 0.0)


def simulate_pool(pool: PoolConfig, start: int, count: int, seed: int) -> PoolPaths:
    """Independent paths for every member; member ``j`` uses its own streams."""
    grid = pool.grid
    taus, losses = [], []
    for j, member in enumerate(pool.counterparties):
        b = simulate(member, grid, start, count, seed, stream_base=(j + 1) * POOL_STREAM_STRIDE)
        taus.append(b.tau_C)
        losses.append(_member_summand(b, pool.side))
    return PoolPaths(np.array(taus), np.array(losses))


def pool_loss(bundle: PoolPaths, t: float) -> np.ndarray:
    return np.sum(np.where(bundle.tau <= t, bundle.loss, 0.0), axis=0)


def tranche_cut(loss, tranche: TrancheSpec):
    """``(min(loss, L+N) - L)^+``."""
    out = np.maximum(np.minimum(loss, tranche.attachment + tranche.notional) - tranche.attachment, 0.0)
    return out if np.ndim(out) else float(out)


def tranche_loss(pool: PoolConfig, tranche: TrancheSpec, bundle: PoolPaths, t: float) -> np.ndarray:
    """Tranche loss at ``t`` on every path of ``bundle``."""
    return tranche_cut(pool_loss(bundle, t), tranche)


@dataclass(frozen=True)
class TrancheSpread:
    """Fair running spread and the two legs it is the ratio of."""

    tranche: TrancheSpec
    spread: float
    protection: EstimatorStats
    premium: EstimatorStats


def _tranche_legs(pool: PoolConfig, tranches: Sequence[TrancheSpec], bundle: PoolPaths) -> np.ndarray:
    resets = pool.resets
    r = pool.counterparties[0].r
    losses = [pool_loss(bundle, t) for t in resets]
    cols = np.zeros((bundle.n_paths, 2 * len(tranches)))
    for k, tr in enumerate(tranches):
        x = [tranche_cut(l, tr) for l in losses]
        num = np.zeros(bundle.n_paths)
        den = np.zeros(bundle.n_paths)
        for i in range(resets.size - 1):
            d = math.exp(-r * resets[i + 1])
            num += d * (x[i + 1] - x[i])
            den += d * (resets[i + 1] - resets[i]) * (tr.notional - x[i + 1])
        cols[:, 2 * k] = num
        cols[:, 2 * k + 1] = den
    return cols


def tranche_spreads(pool: PoolConfig, tranches: Sequence[TrancheSpec],
                    settings: SimSettings) -> list[TrancheSpread]:
    """Spreads of several tranches estimated on the same pool paths."""
    tranches = list(tranches)

    def job(rng):
        start, count = rng
        bundle = simulate_pool(pool, start, count, settings.seed)
        return _Partial.of(_tranche_legs(pool, tranches, bundle))

    ranges = batch_ranges(settings)
    if settings.workers == 1 or len(ranges) == 1:
        parts = [job(r) for r in ranges]
    else:
        with ThreadPoolExecutor(max_workers=settings.workers) as ex:
            parts = list(ex.map(job, ranges))
    stats = _stats(_pairwise(parts), settings.n_paths)
    out = []
    for k, tr in enumerate(tranches):
        num, den = stats[2 * k], stats[2 * k + 1]
        if den.mean <= 0.0:
            raise DegeneratePool(f"tranche ({tr.attachment}, {tr.notional}) has no surviving notional")
        out.append(TrancheSpread(tr, num.mean / den.mean, num, den))
    return out


def tranche_spread(pool: PoolConfig, tranche: TrancheSpec, settings: SimSettings) -> TrancheSpread:
    """Ratio of expected discounted tranche loss to the expected risky annuity."""
    return tranche_spreads(pool, [tranche], settings)[0]


@dataclass(frozen=True)
class StackReport:
    max_abs_error: float
    violations: int
    checks: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def tranche_stack_consistency(pool: PoolConfig, stack: Sequence[TrancheSpec], bundle: PoolPaths,
                              tol: float = 1e-12) -> StackReport:
    """Check that contiguous tranches add up to the capped pool loss on every path."""
    stack = list(stack)
    for lo, hi in zip(stack[:-1], stack[1:]):
        if hi.attachment != lo.detachment:
            raise DomainError("stack", "tranches must be contiguous")
    base, top = stack[0].attachment, stack[-1].detachment
    worst, bad, checks = 0.0, 0, 0
    for t in pool.resets:
        loss = pool_loss(bundle, t)
        total = np.zeros(bundle.n_paths)
        for tr in stack:
            total = total + tranche_cut(loss, tr)
        expect = np.maximum(np.minimum(loss, top) - base, 0.0)
        err = np.abs(total - expect)
        worst = max(worst, float(err.max(initial=0.0)))
        bad += int(np.sum(err > tol))
        checks += err.size
    return StackReport(worst, bad, checks)


# --------------------------------------------------------------------------
# netting sets and carry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Trade:
    """A position of ``weight`` units of the reference exposure ``M(B)``."""

    weight: float
    name: str = ""

    def __post_init__(self):
        if not math.isfinite(self.weight):
            raise DomainError("weight", "must be finite")


@dataclass(frozen=True)
class NettingSet:
    trades: tuple

    def __post_init__(self):
        object.__setattr__(self, "trades", tuple(self.trades))

    def net(self, m_B):
        """Sum of the member exposures, trade by trade."""
        total = np.zeros(np.shape(m_B))
        for tr in self.trades:
            total = total + tr.weight * np.asarray(m_B, dtype=float)
        return total


def netting_set_exposure(nset: NettingSet, path: ScenarioPath, t: float) -> float:
    """Net exposure of the set to the counterparty at a sampled time of ``path``."""
    return float(nset.net(path.m_B(t)))


def netting_set_report(nset: NettingSet, config: ModelConfig, grid: TimeGrid, settings: SimSettings,
                       liquidity: LiquiditySpec | None = None) -> dict:
    """Exposure, collateral, CVA and carry of a netting set on common paths.

    Collateral is the sum of absolute net exposures called at the reset
    dates; carry is the discounted liquidity loss at C's first default.
    """
    liquidity = liquidity or LiquiditySpec.constant_fraction(0.1)
    ridx = _reset_index(grid)

    def columns(batch: PathBatch):
        c = batch.config
        net_grid = nset.net(batch.m_grid)
        net_tau = nset.net(batch.m_tau_C)
        hit = np.isfinite(batch.tau_C)
        ftd = hit & (batch.tau_C < batch.tau_B)
        disc = batch.discount(batch.tau_C)
        return {
            "max_abs_exposure": np.max(np.abs(net_grid), axis=1),
            "collateral": np.sum(np.abs(net_grid[:, ridx]), axis=1),
            "cva": np.where(hit, disc * (1.0 - c.R_C) * np.maximum(net_tau, 0.0), 0.0),
            "carry": np.where(ftd, disc * (1.0 - c.R_C) * liquidity.sample(net_tau, batch.z_liq_C), 0.0),
        }

    return mc_estimate_columns(columns, config, grid, settings, compare=[]).stats


def repo_carry_cost(config: ModelConfig, settings: SimSettings, liquidity: LiquiditySpec,
                    grid: TimeGrid | None = None) -> EstimatorStats:
    """Discounted novation cost ``(1-R_C) L`` at a first default of C."""
    grid = grid or _coarse_grid(config)

    def payoff(batch: PathBatch):
        tau, other, m_B, z = default_state(batch, "C")
        hit = np.isfinite(tau) & (tau < other)
        if liquidity is None or liquidity.is_none:
            return np.zeros(batch.size)
        L = liquidity.sample(m_B, z)
        return np.where(hit, batch.discount(tau) * (1.0 - config.R_C) * L, 0.0)

    return mc_estimate(payoff, config, grid, settings)

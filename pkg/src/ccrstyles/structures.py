"""Bipartite valuation adjustments, close-out rules and fair values.

Direction strings name ``(assessor, defaulter)``: ``"BC"`` is the
adjustment ``B`` books against the default of ``C``.  The per-path payoff
builders (``*_payoff``) are public so that callers can combine them on a
common path stream with :func:`ccrstyles.sim.mc_estimate_crn`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import analytic
from .errors import DomainError, QuadratureFailure, UnsupportedStyle
from .liquidity import LiquiditySpec
from .model import ModelConfig, StructuringStyle, TimeGrid
from .sim import EstimatorStats, PathBatch, SimSettings, mc_estimate, mc_estimate_columns

S = StructuringStyle
_RULES = ("C1", "C2", "C1'", "C2'")


def _check_direction(direction: str) -> tuple[str, str]:
    if direction not in ("BC", "CB"):
        raise DomainError("direction", f"expected 'BC' or 'CB', got {direction!r}")
    return direction[0], direction[1]


def _check_closeout(closeout: str) -> str:
    if closeout not in ("C1", "C2"):
        raise DomainError("closeout", f"expected 'C1' or 'C2', got {closeout!r}")
    return closeout


def zero_stats(n: int) -> EstimatorStats:
    return EstimatorStats(0.0, 0.0, n)


# --------------------------------------------------------------------------
# per-path building blocks
# --------------------------------------------------------------------------

def default_state(batch: PathBatch, defaulter: str):
    """``(tau_x, tau_y, M_{tau_x}(B), liquidity normal)`` for defaulter ``x``."""
    if defaulter == "C":
        return batch.tau_C, batch.tau_B, batch.m_tau_C, batch.z_liq_C
    return batch.tau_B, batch.tau_C, batch.m_tau_B, batch.z_liq_B


def survivor_mark(m_B, assessor: str):
    return m_B if assessor == "B" else -m_B


def unilateral_loss(batch: PathBatch, defaulter: str, first_to_default: bool = False,
                    liquidity: LiquiditySpec | None = None) -> np.ndarray:
    """Discounted close-out loss of the survivor at ``defaulter``'s default."""
    c = batch.config
    tau, other, m_B, z = default_state(batch, defaulter)
    hit = np.isfinite(tau)
    if first_to_default:
        hit &= tau < other
    assessor = "B" if defaulter == "C" else "C"
    loss = (1.0 - c.recovery(defaulter)) * np.maximum(survivor_mark(m_B, assessor), 0.0)
    if liquidity is not None and not liquidity.is_none:
        loss = loss + liquidity.sample(m_B, z)
    return np.where(hit, batch.discount(tau) * loss, 0.0)


def gamma_payment(batch: PathBatch, closeout: str, direction: str) -> np.ndarray:
    """Discounted portable correction paid when the defaulter goes first."""
    assessor, defaulter = _check_direction(direction)
    tau, other, m_B, _ = default_state(batch, defaulter)
    hit = np.isfinite(tau) & (tau < other)
    out = np.zeros(batch.size)
    idx = np.flatnonzero(hit)
    if idx.size and batch.config.hazard(assessor) > 0.0:
        g = analytic.gamma_integrand(batch.config, m_B[idx], tau[idx], closeout, direction)
        out[idx] = batch.discount(tau[idx]) * g
    return out


def ucva_payoff(direction: str = "BC", liquidity: LiquiditySpec | None = None):
    _, defaulter = _check_direction(direction)
    return lambda b: unilateral_loss(b, defaulter, False, liquidity)


def ftdcva_payoff(direction: str = "BC", liquidity: LiquiditySpec | None = None):
    _, defaulter = _check_direction(direction)
    return lambda b: unilateral_loss(b, defaulter, True, liquidity)


def gamma_payoff(closeout: str, direction: str = "CB"):
    _check_closeout(closeout)
    _check_direction(direction)
    return lambda b: gamma_payment(b, closeout, direction)


def pcva_payoff(closeout: str, direction: str = "CB", liquidity: LiquiditySpec | None = None):
    _, defaulter = _check_direction(direction)
    _check_closeout(closeout)
    return lambda b: (unilateral_loss(b, defaulter, False, liquidity)
                      + gamma_payment(b, closeout, direction))


# --------------------------------------------------------------------------
# t = 0 estimators
# --------------------------------------------------------------------------

def ucva(config: ModelConfig, grid: TimeGrid, settings: SimSettings, direction: str = "BC",
         liquidity: LiquiditySpec | None = None) -> EstimatorStats:
    """Unilateral CVA: loss at the defaulter's default, own default ignored."""
    return mc_estimate(ucva_payoff(direction, liquidity), config, grid, settings)


def udva(config: ModelConfig, grid: TimeGrid, settings: SimSettings,
         direction: str = "BC") -> EstimatorStats:
    """``UDVA(B,C) = UCVA(C,B)``: the same estimator with the roles swapped."""
    return ucva(config, grid, settings, direction[::-1])


def bcva(config: ModelConfig, grid: TimeGrid, settings: SimSettings) -> EstimatorStats:
    """``UCVA(B,C) - UDVA(B,C)`` path by path."""
    return mc_estimate(lambda b: unilateral_loss(b, "C") - unilateral_loss(b, "B"),
                       config, grid, settings)


def ftdcva(config: ModelConfig, grid: TimeGrid, settings: SimSettings, direction: str = "BC",
           liquidity: LiquiditySpec | None = None) -> EstimatorStats:
    """First-to-default CVA; the defaulter must default before the assessor."""
    return mc_estimate(ftdcva_payoff(direction, liquidity), config, grid, settings)


def pcva_gamma(config: ModelConfig, grid: TimeGrid, settings: SimSettings, closeout: str,
               direction: str = "CB") -> EstimatorStats:
    """Portable correction Γ; its per-path integrand is never negative."""
    return mc_estimate(gamma_payoff(closeout, direction), config, grid, settings)


def inner_udva(m: float, t: float, config: ModelConfig, party: str = "C",
               method: str = "gauss", epsrel: float = 1e-10):
    """UDVA of ``party`` at ``t`` given its own mark-to-market ``m``.

    ``method="gauss"`` is the vectorised fixed rule the pricers use;
    ``method="adaptive"`` runs scipy's adaptive quadrature on scalars and
    raises :class:`QuadratureFailure` if the tolerance is not met.
    """
    if party not in ("B", "C"):
        raise DomainError("party", f"expected 'B' or 'C', got {party!r}")
    if method == "gauss":
        out = analytic.inner_udva_vec(config, m, t, party)
        return out if np.ndim(out) else float(out)
    if method != "adaptive":
        raise DomainError("method", f"expected 'gauss' or 'adaptive', got {method!r}")
    lam, rec = config.hazard(party), config.recovery(party)
    span = config.T - float(t)
    if lam == 0.0 or span <= 0.0:
        return 0.0
    m_B = m if party == "B" else -m
    sign = 1.0 if party == "C" else -1.0

    def f(u):
        mean, sd = analytic.exposure_moments(config, m_B, t, u)
        return lam * math.exp(-(lam + config.r) * u) * float(analytic.positive_part_mean(sign * mean, sd))

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.quad(f, 0.0, span, epsabs=0.0, epsrel=epsrel, limit=200)
        except integrate.IntegrationWarning as exc:
            raise QuadratureFailure(f"inner UDVA at t={t}, m={m}: {exc}") from exc
    return (1.0 - rec) * val


# --------------------------------------------------------------------------
# close-out rules
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CloseoutInputs:
    """Arguments of a close-out rule, from the survivor's point of view."""

    m_survivor: float
    udva_survivor: float = 0.0
    recovery_defaulted: float = 0.0
    liquidity_L: float = 0.0

    def __post_init__(self):
        if not self.liquidity_L >= 0.0:
            raise DomainError("liquidity_L", "novation cost must be >= 0")
        if not 0.0 <= self.recovery_defaulted <= 1.0:
            raise DomainError("recovery_defaulted", "recovery must lie in [0, 1]")


def closeout_value(inputs: CloseoutInputs, rule: str) -> float:
    """Survivor's value at the default under rule C1, C2 or their primed forms."""
    if rule not in _RULES:
        raise DomainError("rule", f"expected one of {_RULES}, got {rule!r}")
    x = inputs.m_survivor
    if rule.startswith("C2"):
        x = x + inputs.udva_survivor
    L = inputs.liquidity_L if rule.endswith("'") else 0.0
    R = inputs.recovery_defaulted
    return -max(-x, 0.0) + R * max(x, 0.0) - L


# --------------------------------------------------------------------------
# style definitions
# --------------------------------------------------------------------------

_BIPARTITE_UNILATERAL = (S.UcvaOnly, S.BcvaRiskFreeCloseout, S.BcvaReplacementCloseout)
_PORTABLE = (S.PortableCvaC1, S.PortableCvaC2)
_LENDER_BOTH_SIDES = (S.QuadripartiteHighFreq, S.QuadripartitePeriodic, S.PentapartiteCcp)


def portable_rule(style: StructuringStyle) -> str:
    return "C2" if style is S.PortableCvaC2 else "C1"


def style_columns(style: StructuringStyle, batch: PathBatch,
                  liquidity: LiquiditySpec | None = None) -> dict:
    """Per-path bipartite adjustments of ``style``.

    Keys: ``cva_B`` (booked by B on C), ``cva_C`` (booked by C on B),
    ``gamma_B``/``gamma_C`` (portable corrections) and, for portable styles,
    the unilateral parts ``ucva_B``/``ucva_C``.  In collateralized styles the
    lenders carry the insured legs, which therefore vanish here.
    """
    zero = np.zeros(batch.size)
    cols = {"gamma_B": zero, "gamma_C": zero}
    if style in _BIPARTITE_UNILATERAL:
        cols["cva_B"] = unilateral_loss(batch, "C", False, liquidity)
        cols["cva_C"] = unilateral_loss(batch, "B", False, liquidity)
    elif style is S.FtdCva:
        cols["cva_B"] = unilateral_loss(batch, "C", True, liquidity)
        cols["cva_C"] = unilateral_loss(batch, "B", True, liquidity)
    elif style in _PORTABLE:
        rule = portable_rule(style)
        cols["ucva_B"] = unilateral_loss(batch, "C", False, liquidity)
        cols["ucva_C"] = unilateral_loss(batch, "B", False, liquidity)
        cols["gamma_B"] = gamma_payment(batch, rule, "BC")
        cols["gamma_C"] = gamma_payment(batch, rule, "CB")
        cols["cva_B"] = cols["ucva_B"] + cols["gamma_B"]
        cols["cva_C"] = cols["ucva_C"] + cols["gamma_C"]
    elif style is S.TripartitePeriodic:
        # the lender insures C's default only; B's default stays bilateral
        cols["cva_B"] = zero
        cols["cva_C"] = unilateral_loss(batch, "B", False, liquidity)
    elif style in _LENDER_BOTH_SIDES:
        cols["cva_B"] = zero
        cols["cva_C"] = zero
    else:  # pragma: no cover - exhaustive over the enum
        raise UnsupportedStyle(str(style))
    return cols


@dataclass(frozen=True)
class ValuationResult:
    """Adjustments and fair values at t=0 for one structuring style.

    ``cva``/``dva``/``gamma`` are B's entries.  For money-conserving styles
    ``dva`` *is* ``cva_C`` and ``dva_C`` *is* ``cva`` (the same objects).
    """

    style: StructuringStyle
    cva: EstimatorStats
    dva: EstimatorStats
    gamma: EstimatorStats
    v_B: EstimatorStats
    v_C: EstimatorStats
    cva_C: EstimatorStats
    dva_C: EstimatorStats
    gamma_C: EstimatorStats
    money_conserving: bool
    extras: dict = field(default_factory=dict)
    violations: dict = field(default_factory=dict)

    @property
    def conservation_gap(self) -> float:
        return self.v_B.mean + self.v_C.mean

    @property
    def conservation_violated(self) -> bool:
        combined = math.hypot(self.v_B.std_error, self.v_C.std_error)
        return abs(self.conservation_gap) > 2.0 * combined


def fair_value(config: ModelConfig, grid: TimeGrid, settings: SimSettings,
               style: StructuringStyle, liquidity: LiquiditySpec | None = None) -> ValuationResult:
    """``V(B) = M(B) - CVA(B,C) + DVA(B,C)`` and its mirror for C."""
    style = StructuringStyle(style)
    conserving = style.money_conserving
    m0 = config.m0

    def columns(batch):
        cols = style_columns(style, batch, liquidity)
        dva_B = cols["cva_C"] if conserving else np.zeros(batch.size)
        cols["v_B"] = m0 - cols["cva_B"] + dva_B
        cols["v_C"] = -cols["v_B"] if conserving else -m0 - cols["cva_C"]
        return cols

    compare = [("ucva_B", "cva_B"), ("ucva_C", "cva_C")] if style in _PORTABLE else []
    res = mc_estimate_columns(columns, config, grid, settings, compare=compare)
    st = res.stats
    zero = zero_stats(settings.n_paths)
    extras = {}
    if style in _PORTABLE:
        extras = {"ucva_B": st["ucva_B"], "ucva_C": st["ucva_C"]}
    violations = {side: res.violations(f"ucva_{side}", f"cva_{side}")
                  for side in ("B", "C")} if style in _PORTABLE else {}
    return ValuationResult(
        style=style,
        cva=st["cva_B"],
        dva=st["cva_C"] if conserving else zero,
        gamma=st["gamma_B"],
        v_B=st["v_B"],
        v_C=st["v_C"],
        cva_C=st["cva_C"],
        dva_C=st["cva_B"] if conserving else zero,
        gamma_C=st["gamma_C"],
        money_conserving=conserving,
        extras=extras,
        violations=violations,
    )


def pcva(config: ModelConfig, grid: TimeGrid, settings: SimSettings, closeout: str = "C1",
         liquidity: LiquiditySpec | None = None) -> ValuationResult:
    """Portable CVA ``UCVA + Γ`` for both parties on common paths.

    ``result.cva`` is PCVA(B,C), ``result.dva`` is PDVA(B,C) = PCVA(C,B);
    ``result.violations`` counts paths where PCVA < UCVA (always 0).
    """
    style = S.PortableCvaC2 if _check_closeout(closeout) == "C2" else S.PortableCvaC1
    return fair_value(config, grid, settings, style, liquidity)


# --------------------------------------------------------------------------
# close-out consistency at the first default
# --------------------------------------------------------------------------

@dataclass
class DefaultEvents:
    """Both sides of a close-out equation on every first-default event.

    ``actual`` is the value the style's CVA of the survivor jumps to at the
    default; ``required`` is what the close-out rule prescribes.
    """

    assessor: str
    defaulter: str
    hit: np.ndarray
    tau: np.ndarray
    m_survivor: np.ndarray
    actual: np.ndarray
    required: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return np.where(self.hit, self.actual - self.required, 0.0)


def _style_dva_at_default(style, config, m_surv, tau, assessor):
    """The survivor's DVA under ``style`` just as the counterparty defaults."""
    if style in (S.BcvaRiskFreeCloseout, S.BcvaReplacementCloseout) or style in _PORTABLE:
        # the unilateral part survives; a portable correction on the
        # survivor's own default cannot pay any more
        return analytic.inner_udva_vec(config, m_surv, tau, assessor)
    return np.zeros(np.shape(m_surv))


def default_events(style: StructuringStyle, batch: PathBatch, rule: str | None = None,
                   liquidity: LiquiditySpec | None = None) -> list[DefaultEvents]:
    """Evaluate the close-out equation for both defaulters on a batch."""
    style = StructuringStyle(style)
    rule = rule or style.closeout_rule
    if rule not in _RULES:
        raise DomainError("rule", f"expected one of {_RULES}, got {rule!r}")
    c = batch.config
    out = []
    for assessor, defaulter in (("B", "C"), ("C", "B")):
        tau, other, m_B, z = default_state(batch, defaulter)
        hit = np.isfinite(tau) & (tau < other)
        idx = np.flatnonzero(hit)
        t, mb = tau[idx], m_B[idx]
        m_s = survivor_mark(mb, assessor)
        R = c.recovery(defaulter)
        pos = np.maximum(m_s, 0.0)
        L = np.zeros(idx.size)
        if rule.endswith("'") and liquidity is not None and not liquidity.is_none:
            L = liquidity.sample(mb, z[idx])
        actual = np.zeros(idx.size)
        required = np.zeros(idx.size)
        insured = (style in _LENDER_BOTH_SIDES
                   or (style is S.TripartitePeriodic and defaulter == "C"))
        if insured:
            # survivor recovers R*p from the estate and the rest from the lender
            actual = R * pos + (1.0 - R) * pos
            required = pos
        else:
            dva = _style_dva_at_default(style, c, m_s, t, assessor)
            if rule.startswith("C1"):
                required = (1.0 - R) * pos + dva + L
            else:
                required = (1.0 - R) * np.maximum(m_s + dva, 0.0) + L
            actual = (1.0 - R) * pos + L
            if style in _PORTABLE:
                actual = actual + analytic.gamma_integrand(
                    c, mb, t, portable_rule(style), assessor + defaulter)
        full = lambda a: _scatter(a, idx, batch.size)
        out.append(DefaultEvents(assessor, defaulter, hit, np.where(hit, tau, np.inf),
                                 full(m_s), full(actual), full(required)))
    return out


def _scatter(values, idx, n):
    arr = np.zeros(n)
    arr[idx] = values
    return arr


def closeout_mismatch(config: ModelConfig, grid: TimeGrid, settings: SimSettings,
                      style: StructuringStyle, liquidity: LiquiditySpec | None = None,
                      sides: str = "both") -> EstimatorStats:
    """Expected discounted gap between the rule and the style at first default.

    The gap is ``required - actual`` summed over the two possible
    defaulters (``sides="BC"`` or ``"CB"`` keeps one assessor).
    """
    style = StructuringStyle(style)
    if style in (S.FtdCva, S.PortableCvaC1) or style.is_collateralized:
        return zero_stats(settings.n_paths)
    keep = {"both": ("B", "C"), "BC": ("B",), "CB": ("C",)}[sides]

    def payoff(batch):
        total = np.zeros(batch.size)
        for ev in default_events(style, batch, liquidity=liquidity):
            if ev.assessor in keep:
                total = total - ev.residual * batch.discount(ev.tau)
        return total

    return mc_estimate(payoff, config, grid, settings)

"""Semi-analytic ground truth for the zero-correlation reference model.

Everything here is scalar ``scipy.integrate.quad`` over closed-form
Gaussian/exponential integrands.  Nothing in this module touches the
simulation or the vectorised fixed-rule quadrature used by the pricers,
so it can serve as the independent side of the acceptance checks.

Conventions: ``M_t(B) = a(t) (m0 + sigma W_t)``.  A direction string
``"BC"`` means the adjustment assessed by ``B`` on the default of ``C``;
its loss is ``(1 - R_C) (M_{tau_C}(B))^+``.
"""
from __future__ import annotations

import math
import warnings
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.optimize import brentq
from scipy.special import ndtr

from .errors import DomainError, QuadratureFailure
from .model import ModelConfig

_SQRT2PI = math.sqrt(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


def expected_positive_part(m, s, sigma, scale=1.0):
    """``scale * E[(m + sigma sqrt(s) Z)^+]`` for standard normal ``Z``.

    Vectorised over numpy inputs; ``scale`` is the (non-negative)
    amortisation factor a(t).
    """
    m = np.asarray(m, dtype=float)
    sd = np.asarray(sigma, dtype=float) * np.sqrt(np.maximum(np.asarray(s, dtype=float), 0.0))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        d = np.where(sd > 0, m / np.where(sd > 0, sd, 1.0), 0.0)
        val = np.where(sd > 0, m * ndtr(d) + sd * np.exp(-0.5 * d * d) / _SQRT2PI, np.maximum(m, 0.0))
    out = np.asarray(scale, dtype=float) * val
    return out if out.ndim else float(out)


def _epp(m: float, sd: float) -> float:
    """Scalar closed form, math module only (used inside nested quad)."""
    if sd <= 0.0:
        return m if m > 0.0 else 0.0
    d = m / sd
    return m * 0.5 * math.erfc(-d / _SQRT2) + sd * math.exp(-0.5 * d * d) / _SQRT2PI


def expected_positive_part_numeric(m: float, s: float, sigma: float) -> float:
    """Same quantity by adaptive integration against the normal density."""
    sd = sigma * math.sqrt(max(s, 0.0))
    if sd == 0.0:
        return max(m, 0.0)
    lo = -m / sd
    if lo >= 40.0:
        return 0.0
    a = max(lo, -40.0)
    f = lambda z: (m + sd * z) * math.exp(-0.5 * z * z) / _SQRT2PI
    pts = [p for p in (-1.0, 0.0, 1.0) if a < p < 40.0]
    val, _ = integrate.quad(f, a, 40.0, epsabs=1e-15, epsrel=1e-13, limit=200, points=pts or None)
    return val


def _quad(f, a, b, epsrel, points=None, limit=200):
    if b <= a:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.quad(f, a, b, epsabs=0.0, epsrel=epsrel, limit=limit, points=points)
        except integrate.IntegrationWarning as exc:
            raise QuadratureFailure(str(exc)) from exc
    return val


def _decay_points(rate: float, end: float):
    """Breakpoints a few e-folds into an exponential decay, so quad sees a sharp one."""
    pts = [k / rate for k in (1.0, 4.0, 16.0, 64.0)] if rate > 0 else []
    pts = [p for p in pts if 0.0 < p < end]
    return pts or None


def _amort(c: ModelConfig, t: float) -> float:
    if t > c.T:
        return 0.0
    return (c.T - t) / c.T if c.amortizing else 1.0


def _sign(direction: str) -> float:
    """+1 when the loss is on B's positive exposure (C defaults), else -1."""
    if direction not in ("BC", "CB"):
        raise DomainError("direction", f"expected 'BC' or 'CB', got {direction!r}")
    return 1.0 if direction == "BC" else -1.0


def _parties(direction: str):
    _sign(direction)
    return direction[0], direction[1]


def _require_zero_corr(c: ModelConfig):
    if not c.zero_correlation:
        raise DomainError("correlation", "quadrature oracles need zero correlations")


def _loss_exposure(c: ModelConfig, direction: str, t: float) -> float:
    """E[(M_t(assessor))^+] at time t under the unconditional law."""
    a = _amort(c, t)
    return a * _epp(_sign(direction) * c.m0, c.sigma * math.sqrt(t))


def ucva_quadrature(config: ModelConfig, direction: str = "BC", epsrel: float = 1e-10) -> float:
    """Unilateral CVA at t=0, e.g. ``(1-R_C) int e^{-rt} lambda_C e^{-lambda_C t} E[(M_t(B))^+] dt``."""
    _require_zero_corr(config)
    _, x = _parties(direction)
    lam, rec = config.hazard(x), config.recovery(x)
    if lam == 0.0 or rec == 1.0:
        return 0.0
    f = lambda t: math.exp(-(config.r + lam) * t) * lam * _loss_exposure(config, direction, t)
    return (1.0 - rec) * _quad(f, 0.0, config.T, epsrel, _decay_points(config.r + lam, config.T))


def udva_quadrature(config: ModelConfig, direction: str = "BC", epsrel: float = 1e-10) -> float:
    """``UDVA(Y, X) = UCVA(X, Y)``."""
    return ucva_quadrature(config, direction[::-1], epsrel)


def ftdcva_quadrature(config: ModelConfig, direction: str = "BC", epsrel: float = 1e-10) -> float:
    """First-to-default CVA: the unilateral integrand times the assessor's survival."""
    _require_zero_corr(config)
    y, x = _parties(direction)
    lam, rec, lam_y = config.hazard(x), config.recovery(x), config.hazard(y)
    if lam == 0.0 or rec == 1.0:
        return 0.0
    rate = config.r + lam + lam_y
    f = lambda t: math.exp(-rate * t) * lam * _loss_exposure(config, direction, t)
    return (1.0 - rec) * _quad(f, 0.0, config.T, epsrel, _decay_points(rate, config.T))


def repo_carry_quadrature(config: ModelConfig, kappa: float, epsrel: float = 1e-10) -> float:
    """Expected discounted liquidity loss ``kappa (1-R_C) |M|`` at a first default of C."""
    _require_zero_corr(config)
    lam, rec = config.lambda_C, config.R_C
    if lam == 0.0 or rec == 1.0 or kappa == 0.0:
        return 0.0

    def f(t):
        sd = config.sigma * math.sqrt(t)
        e_abs = _epp(config.m0, sd) + _epp(-config.m0, sd)
        return math.exp(-rate * t) * lam * _amort(config, t) * e_abs

    rate = config.r + lam + config.lambda_B
    return kappa * (1.0 - rec) * _quad(f, 0.0, config.T, epsrel, _decay_points(rate, config.T))


def window_cva_quadrature(config: ModelConfig, start: float, end: float, m: float,
                          side: str = "A", first_to_default: bool = True,
                          liquidity_kappa: float = 0.0, epsrel: float = 1e-10) -> float:
    """Conditional protection value over ``[start, end]`` given ``M_start(B) = m``.

    Side ``"A"`` insures the default of C, side ``"D"`` the default of B.
    """
    _require_zero_corr(config)
    x, y = ("C", "B") if side == "A" else ("B", "C")
    lam, rec = config.hazard(x), config.recovery(x)
    lam_y = config.hazard(y) if first_to_default else 0.0
    end = min(end, config.T)
    if lam == 0.0 or end <= start:
        return 0.0
    a0 = _amort(config, start)
    sgn = 1.0 if x == "C" else -1.0

    def f(u):
        a1 = _amort(config, start + u)
        mu = (a1 / a0) * m if a0 > 0 else 0.0
        sd = a1 * config.sigma * math.sqrt(u)
        loss = _epp(sgn * mu, sd)
        if liquidity_kappa:
            loss += liquidity_kappa * (_epp(mu, sd) + _epp(-mu, sd))
        return math.exp(-(config.r + lam + lam_y) * u) * lam * loss

    return (1.0 - rec) * _quad(f, 0.0, end - start, epsrel)


def pool_loss_quadrature(members, resets, r: float, epsrel: float = 1e-10) -> float:
    """Expected pool loss paid at the reset following each default, discounted."""
    resets = np.asarray(resets, dtype=float)
    total = 0.0
    for c in members:
        _require_zero_corr(c)
        lam, rec = c.lambda_C, c.R_C
        if lam == 0.0:
            continue
        f = lambda t: lam * math.exp(-lam * t) * _loss_exposure(c, "BC", t)
        for t0, t1 in zip(resets[:-1], resets[1:]):
            total += (1.0 - rec) * math.exp(-r * t1) * _quad(f, t0, t1, epsrel)
    return total


def _inner_udva_scalar(c: ModelConfig, party: str, m_own: float, t: float, epsrel: float) -> float:
    """UDVA of ``party`` at ``t`` given its own mark-to-market ``m_own`` (zero correlation)."""
    lam, rec = c.hazard(party), c.recovery(party)
    if lam == 0.0 or t >= c.T:
        return 0.0
    a0 = _amort(c, t)

    def f(u):
        a1 = _amort(c, t + u)
        mu = (a1 / a0) * m_own if a0 > 0 else 0.0
        return math.exp(-(c.r + lam) * u) * lam * _epp(-mu, a1 * c.sigma * math.sqrt(u))

    return (1.0 - rec) * _quad(f, 0.0, c.T - t, epsrel)


def gamma_quadrature(config: ModelConfig, closeout: str, direction: str = "CB",
                     epsrel: float = 1e-8) -> float:
    """Portable-CVA correction at t=0.

    For direction ``"CB"`` this is
    ``E[1{tau_B < tau_C} e^{-r tau_B} G(M_{tau_B}, tau_B)]`` with ``G`` the
    UDVA of C (rule C1) or the replacement increment
    ``(1-R_B)((M(C) + UDVA)^+ - M(C)^+)`` (rule C2).
    """
    _require_zero_corr(config)
    if closeout not in ("C1", "C2"):
        raise DomainError("closeout", f"expected 'C1' or 'C2', got {closeout!r}")
    return _gamma_cached(config, closeout, direction, epsrel)


@lru_cache(maxsize=64)
def _gamma_cached(config: ModelConfig, closeout: str, direction: str, epsrel: float) -> float:
    y, x = _parties(direction)  # assessor y, first defaulter x
    c = config
    lam_x, lam_y = c.hazard(x), c.hazard(y)
    if lam_x == 0.0 or lam_y == 0.0:
        return 0.0
    rec_x, rec_y = c.recovery(x), c.recovery(y)
    sgn_y = 1.0 if y == "B" else -1.0  # M(y) = sgn_y * M(B)

    def density(t):
        return lam_x * math.exp(-(lam_x + lam_y + c.r) * t)

    if closeout == "C1":
        # tower property: E[UDVA_t(y) | tau_x = t] = (1-R_y) int lam_y e^{-(lam_y+r)u} E[M_{t+u}(y)^-] du
        def outer(t):
            def inner(u):
                s = t + u
                a = _amort(c, s)
                return lam_y * math.exp(-(lam_y + c.r) * u) * a * _epp(-sgn_y * c.m0, c.sigma * math.sqrt(s))
            return density(t) * (1.0 - rec_y) * _quad(inner, 0.0, c.T - t, epsrel * 0.1)
        return _quad(outer, 0.0, c.T, epsrel)

    def outer(t):
        a = _amort(c, t)
        mean, sd = a * c.m0, a * c.sigma * math.sqrt(t)
        if sd == 0.0:
            m_y = sgn_y * mean
            u = _inner_udva_scalar(c, y, m_y, t, epsrel * 0.01)
            return density(t) * (1.0 - rec_x) * (max(m_y + u, 0.0) - max(m_y, 0.0))
        return density(t) * (1.0 - rec_x) * _replacement_increment(c, y, sgn_y, t, mean, sd, epsrel)

    return _quad(outer, 0.0, c.T, epsrel)


def _udva_vector(c: ModelConfig, party: str, m_own: np.ndarray, t: float, epsrel: float) -> np.ndarray:
    """Vector form of :func:`_inner_udva_scalar` via adaptive ``quad_vec``."""
    lam, rec = c.hazard(party), c.recovery(party)
    if lam == 0.0 or t >= c.T:
        return np.zeros_like(m_own)
    a0 = _amort(c, t)

    ratio = 1.0 / a0 if a0 > 0 else 0.0
    neg = -np.asarray(m_own, dtype=float)

    def f(u):
        a1 = _amort(c, t + u)
        mu = (a1 * ratio) * neg
        sd = a1 * c.sigma * math.sqrt(u)
        w = math.exp(-(c.r + lam) * u) * lam
        if sd <= 0.0:
            return w * np.maximum(mu, 0.0)
        d = mu / sd
        return w * (mu * ndtr(d) + sd * np.exp(-0.5 * d * d) / _SQRT2PI)

    val, err = integrate.quad_vec(f, 0.0, c.T - t, epsabs=0.0, epsrel=epsrel, limit=400)
    return (1.0 - rec) * val


def _replacement_increment(c, y, sgn_y, t, mean, sd, epsrel, nodes=48):
    """``E[(M_t(y) + UDVA_t(y))^+ - M_t(y)^+]`` over ``M_t(B) ~ N(mean, sd^2)``.

    The integrand in the Gaussian variable is analytic between its two
    kinks (``M(y) = 0`` and ``M(y) + UDVA = 0``), so each piece gets its own
    Gauss-Legendre rule.
    """
    def h(x):
        return x + _inner_udva_scalar(c, y, x, t, epsrel * 0.01)

    u0 = h(0.0)
    lo = -2.0 * u0 - 1e-300
    while h(lo) > 0.0:
        lo *= 2.0
    x_root = brentq(h, lo, 0.0, xtol=1e-15, rtol=4 * np.finfo(float).eps) if u0 > 0 else 0.0
    kinks = sorted({(sgn_y * 0.0 - mean) / sd, (sgn_y * x_root - mean) / sd})
    edges = [-12.0] + [k for k in kinks if -12.0 < k < 12.0] + [12.0]
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    total = 0.0
    for z0, z1 in zip(edges[:-1], edges[1:]):
        z = 0.5 * (z1 - z0) * gx + 0.5 * (z1 + z0)
        w = 0.5 * (z1 - z0) * gw
        m_y = sgn_y * (mean + sd * z)
        udva = _udva_vector(c, y, m_y, t, epsrel * 0.01)
        inc = np.maximum(m_y + udva, 0.0) - np.maximum(m_y, 0.0)
        total += float(np.sum(w * inc * np.exp(-0.5 * z * z))) / _SQRT2PI
    return total


def gamma_quadrature_nested(config: ModelConfig, direction: str = "CB", epsrel: float = 1e-8) -> float:
    """Rule-C1 correction by explicit three-level nesting (no tower step).

    Slower cross-check for :func:`gamma_quadrature`.
    """
    _require_zero_corr(config)
    y, x = _parties(direction)
    c = config
    lam_x, lam_y = c.hazard(x), c.hazard(y)
    if lam_x == 0.0 or lam_y == 0.0:
        return 0.0
    sgn_y = 1.0 if y == "B" else -1.0

    def outer(t):
        a = _amort(c, t)
        mean, sd = a * c.m0, a * c.sigma * math.sqrt(t)
        g = lambda z: (math.exp(-0.5 * z * z) / _SQRT2PI
                       * _inner_udva_scalar(c, y, sgn_y * (mean + sd * z), t, epsrel * 0.1))
        val = g(0.0) * _SQRT2PI if sd == 0.0 else _quad(g, -12.0, 12.0, epsrel * 0.1)
        return lam_x * math.exp(-(lam_x + lam_y + c.r) * t) * val

    return _quad(outer, 0.0, c.T, epsrel)

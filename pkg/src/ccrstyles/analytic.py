"""Vectorised conditional valuation formulas for the reference model.

These are the semi-analytic building blocks used inside the pricers:
given the exposure ``M_t(B) = m`` at time ``t``, the future exposure is
Gaussian, so expected losses over a default-time density reduce to a 1-D
time integral of the Bachelier positive-part formula.  The time integral
uses a fixed Gauss-Legendre rule after the substitution ``u = span * v**2``,
which removes the square-root singularity of the diffusion at ``u = 0``.

All functions broadcast over numpy arrays of ``m`` and ``t``.

Default times are treated as independent of the exposure with memoryless
hazards, which is exact at zero correlation and an approximation otherwise.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .model import ModelConfig

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
TIME_NODES = 64


@lru_cache(maxsize=None)
def _legendre01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def positive_part_mean(mean, sd):
    """``E[(mean + sd Z)^+]`` for standard normal ``Z``, elementwise."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    pos = sd > 0.0
    safe = np.where(pos, sd, 1.0)
    with np.errstate(over="ignore"):  # subnormal sd: d saturates to +-inf, still exact
        d = mean / safe
        val = mean * ndtr(d) + safe * np.exp(-0.5 * d * d) * _INV_SQRT2PI
    return np.where(pos, val, np.maximum(mean, 0.0))


def _amort(config: ModelConfig, t):
    t = np.asarray(t, dtype=float)
    if config.amortizing:
        return np.clip((config.T - t) / config.T, 0.0, None) * (t <= config.T)
    return np.where(t <= config.T, 1.0, 0.0)


def exposure_moments(config: ModelConfig, m_B, t, u):
    """Mean and standard deviation of ``M_{t+u}(B)`` given ``M_t(B) = m_B``."""
    a0 = _amort(config, t)
    a1 = _amort(config, np.asarray(t) + np.asarray(u))
    ratio = np.divide(a1, a0, out=np.zeros(np.broadcast(a0, a1).shape), where=a0 > 0)
    mean = ratio * m_B
    sd = a1 * config.sigma * np.sqrt(np.maximum(u, 0.0))
    return mean, sd


def protection_value(config: ModelConfig, m_B, t, defaulter: str, end=None,
                     extra_hazard: float = 0.0, kappa: float = 0.0,
                     liquidity_mean: float = 0.0, nodes: int = TIME_NODES):
    """Value at ``t`` of protection against the default of ``defaulter``.

    Computes ``(1-R_x) int_0^{end-t} lam_x e^{-(lam_x + extra_hazard + r) u}
    E[loss_{t+u}] du`` where the loss is the survivor's positive exposure,
    plus ``kappa * |M|`` and a constant expected add-on ``liquidity_mean``.
    ``extra_hazard`` turns it into a first-to-default value.
    """
    lam = config.hazard(defaulter)
    rec = config.recovery(defaulter)
    m_B = np.asarray(m_B, dtype=float)
    t = np.asarray(t, dtype=float)
    end = config.T if end is None else end
    span = np.clip(np.minimum(end, config.T) - t, 0.0, None)
    shape = np.broadcast(m_B, t, span).shape
    if lam == 0.0 or rec == 1.0:
        return np.zeros(shape)

    v, w = _legendre01(nodes)
    sign = 1.0 if defaulter == "C" else -1.0
    mb = m_B[..., None]
    tt = t[..., None]
    sp = span[..., None]
    u = sp * v * v
    mean, sd = exposure_moments(config, mb, tt, u)
    loss = positive_part_mean(sign * mean, sd)
    if kappa:
        loss = loss + kappa * (positive_part_mean(mean, sd) + positive_part_mean(-mean, sd))
    if liquidity_mean:
        loss = loss + liquidity_mean
    dens = lam * np.exp(-(lam + extra_hazard + config.r) * u)
    integral = np.sum(w * dens * loss * 2.0 * sp * v, axis=-1)
    return (1.0 - rec) * np.broadcast_to(integral, shape)


def inner_udva_vec(config: ModelConfig, m_own, t, party: str = "C", nodes: int = TIME_NODES):
    """UDVA of ``party`` at ``t`` given its own mark-to-market ``m_own``.

    The loss the other side suffers on ``party``'s default is ``(M(party))^-``.
    """
    m_own = np.asarray(m_own, dtype=float)
    m_B = m_own if party == "B" else -m_own
    return protection_value(config, m_B, t, party, nodes=nodes)


def gamma_integrand(config: ModelConfig, m_B, t, closeout: str, direction: str,
                    nodes: int = TIME_NODES):
    """Portable-CVA correction paid at the first default ``t``.

    ``direction = "CB"``: C assesses, B defaults first; the payment is C's
    UDVA (rule C1) or ``(1-R_B)((M(C)+UDVA)^+ - M(C)^+)`` (rule C2).
    """
    assessor, defaulter = direction[0], direction[1]
    m_B = np.asarray(m_B, dtype=float)
    m_own = m_B if assessor == "B" else -m_B
    udva = inner_udva_vec(config, m_own, t, assessor, nodes)
    if closeout == "C1":
        return udva
    rec = config.recovery(defaulter)
    return (1.0 - rec) * (np.maximum(m_own + udva, 0.0) - np.maximum(m_own, 0.0))


def replacement_root(config: ModelConfig, s, party: str, nodes: int = TIME_NODES, iters: int = 40):
    """Root ``x`` of ``x + UDVA_s(x) = 0`` for ``party``'s own mark ``x``.

    ``x + UDVA(x)`` is strictly increasing (the UDVA slope lies in
    ``(-(1-R), 0]``), so Newton from ``x = 0`` converges monotonically.
    """
    s = np.asarray(s, dtype=float)
    x = np.zeros(s.shape)
    h = 1e-7
    for _ in range(iters):
        f = x + inner_udva_vec(config, x, s, party, nodes)
        df = 1.0 + (inner_udva_vec(config, x + h, s, party, nodes)
                    - inner_udva_vec(config, x - h, s, party, nodes)) / (2 * h)
        step = f / df
        x = x - step
        if np.all(np.abs(step) <= 1e-15 * (1.0 + np.abs(x))):
            break
    return x


def gamma_conditional(config: ModelConfig, m_B, t, closeout: str, direction: str,
                      time_nodes: int = 32, piece_nodes: int = 24,
                      inner_nodes: int = 48, z_max: float = 9.0):
    """Pre-default value at ``t`` of the portable correction given ``M_t(B) = m_B``.

    Integrates :func:`gamma_integrand` over the first-default density of the
    defaulter and the Gaussian law of the future exposure.  The Gaussian
    integral is split at the kinks of the rule-C2 payment.
    """
    assessor, defaulter = direction[0], direction[1]
    lam_x, lam_y = config.hazard(defaulter), config.hazard(assessor)
    m_B = np.atleast_1d(np.asarray(m_B, dtype=float))
    span = max(config.T - float(t), 0.0)
    if lam_x == 0.0 or lam_y == 0.0 or span == 0.0:
        return np.zeros(m_B.shape)
    sgn = 1.0 if assessor == "B" else -1.0
    v, w = _legendre01(time_nodes)
    zx, zw = _legendre01(piece_nodes)
    out = np.zeros(m_B.shape)
    for vi, wi in zip(v, w):
        u = span * vi * vi
        mean, sd = exposure_moments(config, m_B, t, u)
        sd = float(sd)
        if sd == 0.0:
            g = gamma_integrand(config, mean, t + u, closeout, direction, inner_nodes)
        else:
            # kinks where the assessor's own mark is 0 or the replacement root
            kinks = [0.0]
            if closeout == "C2":
                kinks.append(float(replacement_root(config, t + u, assessor, inner_nodes)))
            zk = np.sort(np.stack([(sgn * k - mean) / sd for k in kinks], axis=-1), axis=-1)
            edges = np.concatenate([np.full(m_B.shape + (1,), -z_max),
                                    np.clip(zk, -z_max, z_max),
                                    np.full(m_B.shape + (1,), z_max)], axis=-1)
            lo, width = edges[:, :-1, None], np.diff(edges, axis=-1)[..., None]
            z = lo + width * zx
            m_future = mean[:, None, None] + sd * z
            g_vals = gamma_integrand(config, m_future, t + u, closeout, direction, inner_nodes)
            pdf = np.exp(-0.5 * z * z) * _INV_SQRT2PI
            g = np.sum(g_vals * pdf * width * zw, axis=(1, 2))
        dens = lam_x * math.exp(-(lam_x + lam_y + config.r) * u)
        out += wi * 2.0 * span * vi * dens * g
    return out

"""Novation-cost (liquidity) corrections applied at a default time."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DomainError

_KINDS = ("none", "constant_fraction", "lognormal")


@dataclass(frozen=True)
class LiquiditySpec:
    """How the non-negative correction ``L_tau`` is generated.

    ``constant_fraction`` sets ``L = kappa |M_tau|``; ``lognormal`` draws
    ``L = exp(mu + s Z)`` from a normal reserved on each path for this
    purpose.  A margin lender absorbs at most ``haircut`` of it; the excess
    is reported separately as a residual.
    """

    kind: str = "none"
    kappa: float = 0.0
    mu: float = 0.0
    s: float = 0.0
    haircut: float = math.inf

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DomainError("liquidity.kind", f"expected one of {_KINDS}, got {self.kind!r}")
        for name in ("kappa", "mu", "s"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"liquidity.{name}", "must be finite")
        if self.kappa < 0:
            raise DomainError("liquidity.kappa", "must be >= 0")
        if self.s < 0:
            raise DomainError("liquidity.s", "must be >= 0")
        if math.isnan(self.haircut) or self.haircut < 0:
            raise DomainError("liquidity.haircut", "must be >= 0 (or inf)")

    @classmethod
    def none(cls) -> "LiquiditySpec":
        return cls()

    @classmethod
    def constant_fraction(cls, kappa: float, haircut: float = math.inf) -> "LiquiditySpec":
        return cls("constant_fraction", kappa=float(kappa), haircut=float(haircut))

    @classmethod
    def lognormal(cls, mu: float, s: float, haircut: float = math.inf) -> "LiquiditySpec":
        return cls("lognormal", mu=float(mu), s=float(s), haircut=float(haircut))

    @property
    def is_none(self) -> bool:
        return self.kind == "none" or (self.kind == "constant_fraction" and self.kappa == 0.0)

    def sample(self, m_tau, z) -> np.ndarray:
        """Correction for exposures ``m_tau`` and liquidity normals ``z``."""
        m_tau = np.asarray(m_tau, dtype=float)
        if self.kind == "constant_fraction":
            return self.kappa * np.abs(m_tau)
        if self.kind == "lognormal":
            return np.exp(self.mu + self.s * np.asarray(z, dtype=float))
        return np.zeros(m_tau.shape)

    def lender_share(self, L) -> np.ndarray:
        return np.minimum(L, self.haircut)

    def residual(self, L) -> np.ndarray:
        return np.maximum(np.asarray(L) - self.haircut, 0.0)

    def expected_lender_share(self) -> float:
        """``E[min(L, H)]`` for the exposure-independent (lognormal) kind."""
        if self.kind != "lognormal":
            raise DomainError("liquidity.kind", "only defined for exposure-independent corrections")
        mean = math.exp(self.mu + 0.5 * self.s * self.s)
        if math.isinf(self.haircut):
            return mean
        if self.haircut == 0.0:
            return 0.0
        lh = math.log(self.haircut)
        if self.s == 0.0:
            return min(math.exp(self.mu), self.haircut)
        below = mean * float(ndtr((lh - self.mu - self.s * self.s) / self.s))
        above = self.haircut * float(ndtr(-(lh - self.mu) / self.s))
        return below + above

    def to_dict(self) -> dict:
        return {"kind": self.kind, "kappa": self.kappa, "mu": self.mu, "s": self.s,
                "haircut": self.haircut}

    @classmethod
    def from_dict(cls, d: dict) -> "LiquiditySpec":
        unknown = set(d) - {"kind", "kappa", "mu", "s", "haircut"}
        if unknown:
            raise DomainError(f"liquidity.{sorted(unknown)[0]}", "unknown liquidity parameter")
        kw = dict(d)
        if "haircut" in kw and kw["haircut"] is None:
            kw["haircut"] = math.inf
        for k in ("kappa", "mu", "s", "haircut"):
            if k in kw:
                try:
                    kw[k] = float(kw[k])
                except (TypeError, ValueError):
                    raise DomainError(f"liquidity.{k}", f"expected a number, got {kw[k]!r}") from None
        return cls(**kw)

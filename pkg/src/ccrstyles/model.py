"""Domain types for the reference counterparty model.

The exposure of the bank ``B`` to the counterparty ``C`` follows an
arithmetic Brownian motion, optionally amortised linearly to zero at
maturity::

    M_t(B) = a(t) * (m0 + sigma * W_t),   M_t(C) = -M_t(B)

Default times use exponential triggers ``tau = -ln Phi(Z) / lambda`` where
``(W_T / sqrt(T), Z_B, Z_C)`` is jointly Gaussian.  A default after ``T`` is
encoded as ``inf`` ("never").
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, NonPsdCorrelation

NEVER = math.inf

_PSD_TOL = 1e-12


class StructuringStyle(str, enum.Enum):
    """The ten contractual designs priced by the engine."""

    UcvaOnly = "UcvaOnly"
    BcvaRiskFreeCloseout = "BcvaRiskFreeCloseout"
    BcvaReplacementCloseout = "BcvaReplacementCloseout"
    FtdCva = "FtdCva"
    PortableCvaC1 = "PortableCvaC1"
    PortableCvaC2 = "PortableCvaC2"
    QuadripartiteHighFreq = "QuadripartiteHighFreq"
    TripartitePeriodic = "TripartitePeriodic"
    QuadripartitePeriodic = "QuadripartitePeriodic"
    PentapartiteCcp = "PentapartiteCcp"

    @property
    def is_heritage(self) -> bool:
        return self in _HERITAGE

    @property
    def is_collateralized(self) -> bool:
        return self in _COLLATERALIZED

    @property
    def money_conserving(self) -> bool:
        return self is not StructuringStyle.UcvaOnly

    @property
    def closeout_rule(self) -> str:
        """Close-out rule the contract is written under ("C1" or "C2")."""
        if self in (StructuringStyle.BcvaReplacementCloseout, StructuringStyle.PortableCvaC2):
            return "C2"
        return "C1"


_HERITAGE = frozenset({
    StructuringStyle.UcvaOnly,
    StructuringStyle.BcvaRiskFreeCloseout,
    StructuringStyle.BcvaReplacementCloseout,
})
_COLLATERALIZED = frozenset({
    StructuringStyle.QuadripartiteHighFreq,
    StructuringStyle.TripartitePeriodic,
    StructuringStyle.QuadripartitePeriodic,
    StructuringStyle.PentapartiteCcp,
})


def correlation_matrix(rho_BC: float, rho_MB: float, rho_MC: float) -> np.ndarray:
    """Correlation over (exposure driver, trigger B, trigger C)."""
    return np.array([
        [1.0, rho_MB, rho_MC],
        [rho_MB, 1.0, rho_BC],
        [rho_MC, rho_BC, 1.0],
    ])


def psd_cholesky(corr: np.ndarray) -> np.ndarray:
    """Lower-triangular factor of a PSD matrix, tolerating zero pivots.

    ``np.linalg.cholesky`` refuses singular matrices (e.g. perfectly
    correlated triggers), which are legitimate here.
    """
    eig = np.linalg.eigvalsh(corr)
    if eig.min() < -_PSD_TOL:
        raise NonPsdCorrelation(
            "correlation", f"matrix is not positive semi-definite (min eigenvalue {eig.min():.3g})"
        )
    n = corr.shape[0]
    low = np.zeros_like(corr, dtype=float)
    for j in range(n):
        d = corr[j, j] - low[j, :j] @ low[j, :j]
        if d < -1e-10:
            raise NonPsdCorrelation("correlation", "negative pivot in factorization")
        ljj = math.sqrt(max(d, 0.0))
        low[j, j] = ljj
        for i in range(j + 1, n):
            s = corr[i, j] - low[i, :j] @ low[j, :j]
            if ljj > 1e-10:
                low[i, j] = s / ljj
            elif abs(s) > 1e-8:
                raise NonPsdCorrelation("correlation", "inconsistent singular correlation")
    return low


@dataclass(frozen=True)
class ModelConfig:
    """Market and credit parameters of the reference model.

    Construction validates every parameter and caches the lower-triangular
    factor of the 3x3 correlation matrix in ``chol``.
    """

    r: float = 0.03
    lambda_B: float = 0.05
    lambda_C: float = 0.02
    R_B: float = 0.5
    R_C: float = 0.4
    sigma: float = 0.1
    m0: float = 0.0
    T: float = 5.0
    rho_BC: float = 0.0
    rho_MB: float = 0.0
    rho_MC: float = 0.0
    amortizing: bool = False
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("r", "lambda_B", "lambda_C", "R_B", "R_C", "sigma", "m0", "T",
                     "rho_BC", "rho_MB", "rho_MC"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                raise DomainError(name, f"must be a finite number, got {value!r}")
            object.__setattr__(self, name, float(value))
        if self.lambda_B < 0:
            raise DomainError("lambda_B", "hazard rate must be >= 0")
        if self.lambda_C < 0:
            raise DomainError("lambda_C", "hazard rate must be >= 0")
        if self.sigma < 0:
            raise DomainError("sigma", "volatility must be >= 0")
        if self.T <= 0:
            raise DomainError("T", "maturity must be > 0")
        for name in ("R_B", "R_C"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DomainError(name, "recovery must lie in [0, 1]")
        for name in ("rho_BC", "rho_MB", "rho_MC"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise DomainError(name, "correlation must lie in [-1, 1]")
        corr = correlation_matrix(self.rho_BC, self.rho_MB, self.rho_MC)
        object.__setattr__(self, "chol", psd_cholesky(corr))

    @property
    def zero_correlation(self) -> bool:
        return self.rho_BC == 0.0 and self.rho_MB == 0.0 and self.rho_MC == 0.0

    def amortization(self, t):
        """Scale factor a(t): 1, or (T - t)/T when amortizing; 0 after T."""
        t = np.asarray(t, dtype=float)
        if self.amortizing:
            a = (self.T - t) / self.T
        else:
            a = np.ones_like(t)
        return np.where(t > self.T, 0.0, a)

    def hazard(self, party: str) -> float:
        return self.lambda_B if party == "B" else self.lambda_C

    def recovery(self, party: str) -> float:
        return self.R_B if party == "B" else self.R_C

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.init}


def validate(config: ModelConfig | dict) -> ModelConfig:
    """Return a validated :class:`ModelConfig`.

    Accepts a raw mapping of parameters or an existing config; idempotent on
    the latter.
    """
    if isinstance(config, ModelConfig):
        return dataclasses.replace(config)
    unknown = set(config) - {f.name for f in dataclasses.fields(ModelConfig) if f.init}
    if unknown:
        raise DomainError(sorted(unknown)[0], "unknown model parameter")
    return ModelConfig(**config)


@dataclass(frozen=True)
class TimeGrid:
    """Simulation dates with a designated subsequence of reset dates."""

    times: np.ndarray
    resets: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        resets = np.asarray(self.resets, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise DomainError("times", "need at least the two dates 0 and T")
        if times[0] != 0.0:
            raise DomainError("times", "first date must be exactly 0")
        if np.any(np.diff(times) <= 0):
            raise DomainError("times", "dates must be strictly increasing")
        if resets.size < 2 or resets[0] != 0.0 or resets[-1] != times[-1]:
            raise DomainError("resets", "resets must start at 0 and end at T")
        if not np.all(np.isin(resets, times)):
            raise DomainError("resets", "every reset must be a grid date")
        if np.any(np.diff(resets) <= 0):
            raise DomainError("resets", "resets must be strictly increasing")
        times.setflags(write=False)
        resets.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "resets", resets)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @classmethod
    def uniform(cls, T: float, n_steps: int, reset_every: int | None = None) -> "TimeGrid":
        """Equidistant grid; every ``reset_every``-th date is a reset."""
        times = np.linspace(0.0, T, n_steps + 1)
        times[-1] = T
        if reset_every is None:
            resets = times[[0, -1]]
        else:
            idx = sorted(set(range(0, n_steps + 1, reset_every)) | {n_steps})
            resets = times[idx]
        return cls(times, resets)

    @classmethod
    def from_resets(cls, resets: Sequence[float], extra: Sequence[float] = ()) -> "TimeGrid":
        """Grid made of the reset dates plus optional extra dates."""
        resets = np.asarray(sorted(set(float(x) for x in resets)))
        times = np.asarray(sorted(set(resets.tolist()) | {float(x) for x in extra}))
        return cls(times, resets)

    def with_times(self, extra: Sequence[float]) -> "TimeGrid":
        times = np.asarray(sorted(set(self.times.tolist()) | {float(x) for x in extra}))
        return TimeGrid(times, self.resets)

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "resets": self.resets.tolist()}


@dataclass(frozen=True)
class ScenarioPath:
    """One simulated world.

    ``times`` is the union of grid dates and in-horizon default times;
    ``m_values[k]`` is ``M_{times[k]}(B)``.  The exposure to ``C`` is the
    negation and is never stored.
    """

    tau_B: float
    tau_C: float
    times: np.ndarray
    m_values: np.ndarray
    r: float

    def _index(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t))
        if k >= self.times.size or self.times[k] != t:
            raise KeyError(f"exposure not sampled at t={t!r}")
        return k

    def m_B(self, t: float) -> float:
        return float(self.m_values[self._index(t)])

    def m_C(self, t: float) -> float:
        return -float(self.m_values[self._index(t)])

    def discount(self, t: float) -> float:
        return math.exp(-self.r * t)

    @property
    def first_default(self) -> float:
        return min(self.tau_B, self.tau_C)

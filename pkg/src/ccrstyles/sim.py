"""Exact path generation and deterministic Monte Carlo estimation.

Random numbers come from numpy's counter-based Philox generator.  Each path
owns a fixed block of counters, so a path is a pure function of
``(seed, path_index)`` (plus the model and grid) and batches can be
evaluated in any order or on any number of workers.  Batch partials are
combined in a fixed pairwise tree, which makes every estimate bit-identical
for a given ``(seed, n_paths, batch_size)``.

Layout of the per-path draws:

* stream 0, 8 normals: the three copula factors, the two bridge normals for
  the exposure at the default times and two normals reserved for random
  liquidity corrections.
* stream 1, one normal per interior grid date: the Brownian bridge pinned at
  ``W_T``.

Since the exposure driver enters the copula only through ``W_T``, the path
is built terminal-value first and bridged inwards; the exposure at the
default times is then bridged between its grid neighbours (``tau_C`` first,
so ``M_{tau_C}`` does not depend on ``lambda_B``).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from numpy.random import Philox
from scipy.special import log_ndtr, ndtri

from .errors import DomainError, NonFinitePayoff, SimulationError
from .model import ModelConfig, ScenarioPath, TimeGrid

_MASK64 = (1 << 64) - 1
_FIXED_DIMS = 8
_MAX_TIE_REDRAWS = 16
STREAM_MAIN = 0
STREAM_GRID = 1
STREAM_TIES = 2
POOL_STREAM_STRIDE = 1 << 20


@dataclass(frozen=True)
class SimSettings:
    n_paths: int = 100_000
    seed: int = 20110909
    batch_size: int = 50_000
    antithetic: bool = False
    workers: int = 1

    def __post_init__(self):
        if int(self.n_paths) < 1:
            raise DomainError("n_paths", "need at least one path")
        if int(self.batch_size) < 1:
            raise DomainError("batch_size", "must be >= 1")
        if int(self.workers) < 1:
            raise DomainError("workers", "must be >= 1")
        if self.antithetic and (self.n_paths % 2 or self.batch_size % 2):
            raise DomainError("antithetic", "n_paths and batch_size must be even")
        object.__setattr__(self, "n_paths", int(self.n_paths))
        object.__setattr__(self, "batch_size", int(self.batch_size))
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    def replace(self, **kw) -> "SimSettings":
        from dataclasses import replace
        return replace(self, **kw)


@dataclass(frozen=True)
class EstimatorStats:
    mean: float
    std_error: float
    n: int

    def z_score(self, target: float) -> float:
        diff = self.mean - target
        if self.std_error == 0.0:
            return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
        return diff / self.std_error

    def within(self, target: float, n_se: float = 3.0, abs_tol: float = 0.0) -> bool:
        return abs(self.mean - target) <= n_se * self.std_error + abs_tol


def _stream_key(seed: int, stream: int) -> int:
    return (seed & _MASK64) | (stream << 64)


def _normals(seed: int, stream: int, first: int, count: int, dims: int,
             antithetic: bool = False) -> np.ndarray:
    """Standard normals for paths ``first .. first+count-1``, shape (count, dims)."""
    stride = -(-dims // 4) * 4
    if antithetic:
        base = first // 2
        n_base = (first + count + 1) // 2 - base
    else:
        base, n_base = first, count
    gen = Philox(key=_stream_key(seed, stream),
                 counter=np.array([base * (stride // 4), 0, 0, 0], dtype=np.uint64))
    raw = gen.random_raw(n_base * stride).reshape(n_base, stride)[:, :dims]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    z = ndtri(u)
    if antithetic:
        idx = np.arange(first, first + count)
        z = z[idx // 2 - base] * np.where(idx % 2 == 0, 1.0, -1.0)[:, None]
    return z


def _default_times(config: ModelConfig, z: np.ndarray):
    factors = z[:, :3] @ config.chol.T
    taus = []
    for lam, col in ((config.lambda_B, 1), (config.lambda_C, 2)):
        if lam == 0.0:
            tau = np.full(z.shape[0], math.inf)
        else:
            with np.errstate(divide="ignore"):
                tau = -log_ndtr(factors[:, col]) / lam
            tau = np.where(tau <= config.T, tau, math.inf)
        taus.append(tau)
    return factors[:, 0], taus[0], taus[1]


def _bridge(w_left, w_right, t_left, t_right, t, z):
    span = t_right - t_left
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(span > 0, (t - t_left) / span, 0.0)
        var = np.where(span > 0, (t - t_left) * (t_right - t) / span, 0.0)
    return w_left + frac * (w_right - w_left) + np.sqrt(np.maximum(var, 0.0)) * z


@dataclass
class PathBatch:
    """A contiguous block of simulated paths, stored column-wise.

    ``w_grid[:, k]`` is the driving Brownian motion at ``grid.times[k]``;
    ``w_tau_B`` / ``w_tau_C`` hold it at the default times (0 where the
    party survives the horizon).
    """

    config: ModelConfig
    grid: TimeGrid
    start: int
    tau_B: np.ndarray
    tau_C: np.ndarray
    w_grid: np.ndarray
    w_tau_B: np.ndarray
    w_tau_C: np.ndarray
    z_liq_B: np.ndarray
    z_liq_C: np.ndarray
    tie_redraws: int = 0

    @property
    def size(self) -> int:
        return self.tau_B.size

    def exposure(self, t, w):
        """``M_t(B)`` for Brownian values ``w`` observed at times ``t``."""
        c = self.config
        return c.amortization(t) * (c.m0 + c.sigma * w)

    @property
    def m_grid(self) -> np.ndarray:
        return self.exposure(self.grid.times[None, :], self.w_grid)

    @property
    def m_tau_B(self) -> np.ndarray:
        """``M_{tau_B}(B)``; 0 where B survives."""
        t = np.where(np.isfinite(self.tau_B), self.tau_B, 0.0)
        return np.where(np.isfinite(self.tau_B), self.exposure(t, self.w_tau_B), 0.0)

    @property
    def m_tau_C(self) -> np.ndarray:
        """``M_{tau_C}(B)``; 0 where C survives."""
        t = np.where(np.isfinite(self.tau_C), self.tau_C, 0.0)
        return np.where(np.isfinite(self.tau_C), self.exposure(t, self.w_tau_C), 0.0)

    def discount(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            return np.where(np.isfinite(t), np.exp(-self.config.r * np.where(np.isfinite(t), t, 0.0)), 0.0)

    def path(self, i: int) -> ScenarioPath:
        """Materialise path ``i`` of the batch (local index)."""
        pts = {float(t): float(m) for t, m in zip(self.grid.times, self.m_grid[i])}
        if math.isfinite(self.tau_B[i]):
            pts[float(self.tau_B[i])] = float(self.m_tau_B[i])
        if math.isfinite(self.tau_C[i]):
            pts[float(self.tau_C[i])] = float(self.m_tau_C[i])
        times = np.array(sorted(pts))
        return ScenarioPath(
            tau_B=float(self.tau_B[i]), tau_C=float(self.tau_C[i]),
            times=times, m_values=np.array([pts[t] for t in times]), r=self.config.r,
        )


def simulate(config: ModelConfig, grid: TimeGrid, start: int, count: int, seed: int,
             antithetic: bool = False, stream_base: int = 0) -> PathBatch:
    """Simulate paths ``start .. start+count-1`` exactly under the reference model."""
    if abs(grid.T - config.T) > 1e-12:
        raise DomainError("grid", f"grid ends at {grid.T}, model maturity is {config.T}")
    z = _normals(seed, stream_base + STREAM_MAIN, start, count, _FIXED_DIMS, antithetic)
    driver, tau_B, tau_C = _default_times(config, z)

    redraws = 0
    for attempt in range(_MAX_TIE_REDRAWS + 1):
        tie = np.isfinite(tau_B) & (tau_B == tau_C)
        if not tie.any():
            break
        if attempt == _MAX_TIE_REDRAWS:
            raise SimulationError(
                f"{int(tie.sum())} paths still have simultaneous defaults after "
                f"{_MAX_TIE_REDRAWS} redraws (degenerate copula?)"
            )
        for i in np.flatnonzero(tie):
            zi = _normals(seed, stream_base + STREAM_TIES + attempt, start + int(i), 1,
                          _FIXED_DIMS, False)
            z[i] = zi[0]
            d, tb, tc = _default_times(config, zi)
            driver[i], tau_B[i], tau_C[i] = d[0], tb[0], tc[0]
            redraws += 1

    times = grid.times
    T = config.T
    n_int = times.size - 2
    w = np.empty((count, times.size))
    w[:, 0] = 0.0
    w[:, -1] = math.sqrt(T) * driver
    if n_int > 0:
        zg = _normals(seed, stream_base + STREAM_GRID, start, count, n_int, antithetic)
        for k in range(1, times.size - 1):
            w[:, k] = _bridge(w[:, k - 1], w[:, -1], times[k - 1], T, times[k], zg[:, k - 1])

    w_tau_C = _bridge_at(times, w, tau_C, z[:, 3])
    w_tau_B = _bridge_at(times, w, tau_B, z[:, 4], other_t=tau_C, other_w=w_tau_C)

    return PathBatch(
        config=config, grid=grid, start=start, tau_B=tau_B, tau_C=tau_C,
        w_grid=w, w_tau_B=w_tau_B, w_tau_C=w_tau_C,
        z_liq_B=z[:, 6].copy(), z_liq_C=z[:, 5].copy(), tie_redraws=redraws,
    )


def _bridge_at(times, w, tau, z, other_t=None, other_w=None):
    """Brownian value at ``tau`` given grid values (and one extra observation)."""
    out = np.zeros(tau.size)
    live = np.isfinite(tau)
    if not live.any():
        return out
    t = tau[live]
    k = np.clip(np.searchsorted(times, t, side="right") - 1, 0, times.size - 2)
    rows = np.flatnonzero(live)
    tl, tr = times[k], times[k + 1]
    wl, wr = w[rows, k], w[rows, k + 1]
    if other_t is not None:
        ot, ow = other_t[live], other_w[live]
        left = np.isfinite(ot) & (ot >= tl) & (ot <= t)
        right = np.isfinite(ot) & (ot <= tr) & (ot > t)
        tl = np.where(left, ot, tl)
        wl = np.where(left, ow, wl)
        tr = np.where(right, ot, tr)
        wr = np.where(right, ow, wr)
    out[live] = _bridge(wl, wr, tl, tr, t, z[live])
    return out


def generate_path(config: ModelConfig, grid: TimeGrid, path_index: int, seed: int) -> ScenarioPath:
    """The single scenario with index ``path_index``; identical to its batch twin."""
    return simulate(config, grid, path_index, 1, seed).path(0)


# --------------------------------------------------------------------------
# estimation
# --------------------------------------------------------------------------

Payoff = Callable[[PathBatch], np.ndarray]


@dataclass(frozen=True)
class _Partial:
    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, values: np.ndarray) -> "_Partial":
        mean = values.mean(axis=0)
        m2 = ((values - mean) ** 2).sum(axis=0)
        # constant columns: keep the value itself so no rounding spread appears
        const = np.all(values == values[0], axis=0)
        return cls(values.shape[0], np.where(const, values[0], mean), np.where(const, 0.0, m2))

    def merge(self, other: "_Partial") -> "_Partial":
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.n * other.n / n)
        return _Partial(n, mean, m2)


def _pairwise(parts: list):
    while len(parts) > 1:
        nxt = [parts[i].merge(parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def batch_ranges(settings: SimSettings) -> list[tuple[int, int]]:
    n, bs = settings.n_paths, settings.batch_size
    return [(s, min(bs, n - s)) for s in range(0, n, bs)]


def map_batches(fn: Callable[[PathBatch], object], config: ModelConfig, grid: TimeGrid,
                settings: SimSettings, stream_base: int = 0) -> list:
    """Apply ``fn`` to every batch; results are returned in batch order."""
    def job(rng):
        start, count = rng
        return fn(simulate(config, grid, start, count, settings.seed,
                           settings.antithetic, stream_base))

    ranges = batch_ranges(settings)
    if settings.workers == 1 or len(ranges) == 1:
        return [job(r) for r in ranges]
    with ThreadPoolExecutor(max_workers=settings.workers) as pool:
        return list(pool.map(job, ranges))


def _as_columns(values, count: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(count, float(arr))
    if arr.shape[0] != count:
        raise ValueError(f"payoff {name!r} returned {arr.shape[0]} values for {count} paths")
    if not np.all(np.isfinite(arr)):
        raise NonFinitePayoff(f"payoff {name!r} is not finite on some path")
    return arr


def _pair_average(arr: np.ndarray) -> np.ndarray:
    return 0.5 * (arr[0::2] + arr[1::2])


def _stats(part: _Partial, paths: int) -> list[EstimatorStats] | EstimatorStats:
    n = part.n
    var = part.m2 / (n - 1) if n > 1 else np.zeros_like(part.m2)
    se = np.sqrt(np.maximum(var, 0.0) / n)
    if np.ndim(part.mean) == 0:
        return EstimatorStats(float(part.mean), float(se), paths)
    return [EstimatorStats(float(m), float(s), paths) for m, s in zip(part.mean, se)]


@dataclass(frozen=True)
class PairCounts:
    less: int
    equal: int
    greater: int


@dataclass(frozen=True)
class CrnResult:
    """Estimates of several functionals on one common path stream."""

    stats: dict
    pairs: dict
    n_paths: int

    def violations(self, lower: str, upper: str) -> int:
        """Paths on which ``lower <= upper`` fails."""
        return self.pairs[(lower, upper)].greater

    def __getitem__(self, name):
        return self.stats[name]


def mc_estimate_columns(fn: Callable[[PathBatch], Mapping[str, np.ndarray]], config: ModelConfig,
                        grid: TimeGrid, settings: SimSettings,
                        compare: Sequence[tuple[str, str]] | None = None,
                        stream_base: int = 0) -> CrnResult:
    """Like :func:`mc_estimate_crn` for a function producing all columns at once."""

    def per_batch(batch: PathBatch):
        raw = fn(batch)
        vals = {k: _as_columns(v, batch.size, k) for k, v in raw.items()}
        scalar = [k for k in vals if vals[k].ndim == 1]
        pairs = compare if compare is not None else [
            (a, b) for i, a in enumerate(scalar) for b in scalar[i + 1:]]
        counts = {}
        for a, b in pairs:
            va, vb = vals[a], vals[b]
            counts[(a, b)] = (int(np.sum(va < vb)), int(np.sum(va == vb)), int(np.sum(va > vb)))
        if settings.antithetic:
            vals = {k: _pair_average(v) for k, v in vals.items()}
        return {k: _Partial.of(v) for k, v in vals.items()}, counts

    results = map_batches(per_batch, config, grid, settings, stream_base)
    names = list(results[0][0])
    stats = {k: _stats(_pairwise([r[0][k] for r in results]), settings.n_paths) for k in names}
    pairs = {}
    for key in results[0][1]:
        tot = np.sum([r[1][key] for r in results], axis=0)
        pairs[key] = PairCounts(int(tot[0]), int(tot[1]), int(tot[2]))
    return CrnResult(stats, pairs, settings.n_paths)


def mc_estimate_crn(payoffs: Mapping[str, Payoff], config: ModelConfig, grid: TimeGrid,
                    settings: SimSettings, compare: Sequence[tuple[str, str]] | None = None,
                    stream_base: int = 0) -> CrnResult:
    """Estimate several payoffs on the identical path stream.

    Pathwise comparison counts are collected for every ordered pair in
    ``compare`` (default: all pairs of scalar payoffs).
    """
    return mc_estimate_columns(lambda b: {k: p(b) for k, p in payoffs.items()},
                               config, grid, settings, compare, stream_base)


def mc_estimate(payoff: Payoff, config: ModelConfig, grid: TimeGrid,
                settings: SimSettings, stream_base: int = 0):
    """Sample mean and standard error of ``payoff`` over ``settings.n_paths`` paths.

    ``payoff`` maps a :class:`PathBatch` to one value per path (or a 2-D
    array of several values per path, giving a list of stats).
    """
    return mc_estimate_crn({"payoff": payoff}, config, grid, settings, compare=[],
                           stream_base=stream_base)["payoff"]


def iter_batches(config: ModelConfig, grid: TimeGrid, settings: SimSettings,
                 stream_base: int = 0) -> Iterator[PathBatch]:
    for start, count in batch_ranges(settings):
        yield simulate(config, grid, start, count, settings.seed, settings.antithetic, stream_base)

"""Memory kernels rho: N -> R, their norms, truncation, and causal convolution.

All infinite sums over lags are replaced by certified truncation: every
closed form carries an analytic over-estimate of its l1 tail mass, and the
norm routines report the horizon plus the tail bound they used.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TOL = 1e-10


class NonSummableError(ValueError):
    """l1 machinery applied to a kernel whose tail mass diverges."""


@dataclass(frozen=True)
class TailBound:
    horizon: int
    bound: float


class MemoryKernel:
    """Base class; concrete forms implement eval / tail_mass / summable."""

    def eval(self, t):
        raise NotImplementedError

    def tail_mass(self, horizon: int) -> float:
        """Certified upper bound on sum_{s > horizon} |rho(s)|."""
        raise NotImplementedError

    def summable(self) -> bool:
        raise NotImplementedError

    def __call__(self, t):
        return self.eval(t)


def _as_lags(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("lags must be >= 0")
    return t


@dataclass(frozen=True)
class Indicator(MemoryKernel):
    """1 at lag T, 0 elsewhere."""
    T: int

    def __post_init__(self):
        if self.T < 0:
            raise ValueError("Indicator lag must be >= 0")

    def eval(self, t):
        t = _as_lags(t)
        return (t == self.T).astype(np.float64)

    def tail_mass(self, horizon):
        return 0.0 if horizon >= self.T else 1.0

    def summable(self):
        return True


@dataclass(frozen=True)
class ExpDecay(MemoryKernel):
    """c * exp(-beta * t), beta > 0."""
    c: float
    beta: float

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("ExpDecay rate must be > 0")

    def eval(self, t):
        t = _as_lags(t)
        return self.c * np.exp(-self.beta * t)

    def tail_mass(self, horizon):
        return abs(self.c) * np.exp(-self.beta * (horizon + 1)) / (1.0 - np.exp(-self.beta))

    def summable(self):
        return True


@dataclass(frozen=True)
class PolyDecay(MemoryKernel):
    """c * t^(-beta) for t >= 1, and 0 at lag 0 (log-domain kernels skip s=0).

    Evaluation permits any beta > 0 (the heavy-tail experiment uses 0.5);
    l1 operations require beta > 1.
    """
    c: float
    beta: float

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("PolyDecay exponent must be > 0")

    def eval(self, t):
        t = _as_lags(t)
        out = np.zeros_like(t)
        pos = t >= 1
        out[pos] = self.c * t[pos] ** (-self.beta)
        return out

    def tail_mass(self, horizon):
        if not self.summable():
            raise NonSummableError(f"PolyDecay beta={self.beta} <= 1 has divergent l1 tail")
        h = max(horizon, 1)
        return abs(self.c) * h ** (1.0 - self.beta) / (self.beta - 1.0)

    def summable(self):
        return self.beta > 1.0


@dataclass(frozen=True)
class ExpSum(MemoryKernel):
    """Finite sum of exponentials: sum_k alpha_k * exp(-beta_k * t)."""
    terms: tuple = field(default_factory=tuple)  # ((alpha, beta>0), ...)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((float(a), float(b)) for a, b in self.terms))
        if any(b <= 0 for _, b in self.terms):
            raise ValueError("ExpSum rates must be > 0")

    def eval(self, t):
        t = _as_lags(t)
        out = np.zeros_like(t)
        for a, b in self.terms:
            out += a * np.exp(-b * t)
        return out

    def tail_mass(self, horizon):
        return sum(abs(a) * np.exp(-b * (horizon + 1)) / (1.0 - np.exp(-b))
                   for a, b in self.terms)

    def summable(self):
        return True


@dataclass(frozen=True)
class PowerSum(MemoryKernel):
    """Finite sum of power laws on t >= 1: sum_k alpha_k * t^(-beta_k); 0 at t=0."""
    terms: tuple = field(default_factory=tuple)  # ((alpha, beta), ...)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((float(a), float(b)) for a, b in self.terms))
        if any(b <= 0 for _, b in self.terms):
            raise ValueError("PowerSum exponents must be > 0")

    def eval(self, t):
        t = _as_lags(t)
        out = np.zeros_like(t)
        pos = t >= 1
        tp = t[pos]
        acc = np.zeros_like(tp)
        for a, b in self.terms:
            acc += a * tp ** (-b)
        out[pos] = acc
        return out

    def tail_mass(self, horizon):
        if not self.summable():
            raise NonSummableError("PowerSum with an exponent <= 1 has divergent l1 tail")
        h = max(horizon, 1)
        return sum(abs(a) * h ** (1.0 - b) / (b - 1.0) for a, b in self.terms)

    def summable(self):
        return all(b > 1.0 for _, b in self.terms)


@dataclass(frozen=True)
class Tabulated(MemoryKernel):
    """Explicit values for lags 0..len-1, exactly zero beyond."""
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def eval(self, t):
        t = _as_lags(t)
        idx = t.astype(np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        out = np.zeros_like(t)
        inside = idx < len(self.values)
        out[inside] = vals[idx[inside]]
        return out

    def tail_mass(self, horizon):
        if horizon + 1 >= len(self.values):
            return 0.0
        return float(np.abs(np.asarray(self.values)[horizon + 1:]).sum())

    def summable(self):
        return True


def kernel_eval(k: MemoryKernel, t) -> np.ndarray | float:
    """rho(t) for scalar or array lags t >= 0."""
    scalar = np.isscalar(t)
    out = k.eval(np.atleast_1d(t))
    return float(out[0]) if scalar else out


def truncation_horizon(k: MemoryKernel, tol: float = DEFAULT_TOL) -> int:
    """Smallest horizon whose certified tail l1 mass is < tol."""
    if not k.summable():
        raise NonSummableError("kernel tail is not summable")
    if k.tail_mass(0) < tol:
        return 0
    hi = 1
    while k.tail_mass(hi) >= tol:
        hi *= 2
        if hi > 10 ** 9:
            raise ValueError("horizon search exceeded 1e9 lags; tol too small for this kernel")
    lo = hi // 2
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if k.tail_mass(mid) < tol:
            hi = mid
        else:
            lo = mid
    return hi


def l1_distance(a: MemoryKernel, b: MemoryKernel, start: int = 0,
                tol: float = DEFAULT_TOL) -> tuple[float, TailBound]:
    """sum_{s >= start} |a(s) - b(s)| with a certified truncation tail.

    start is 0 for lin-domain kernels and 1 for log-domain kernels (which
    exclude lag 0 by convention).
    """
    if start not in (0, 1):
        raise ValueError("start must be 0 or 1")
    horizon = max(truncation_horizon(a, tol / 2), truncation_horizon(b, tol / 2), start)
    s = np.arange(start, horizon + 1, dtype=np.float64)
    dist = float(np.abs(a.eval(s) - b.eval(s)).sum())
    bound = float(a.tail_mass(horizon) + b.tail_mass(horizon))
    return dist, TailBound(horizon=horizon, bound=bound)


def convolve(x: np.ndarray, k: MemoryKernel, horizon: int) -> np.ndarray:
    """Causal convolution y_t = sum_{s=0..min(t,horizon)} x_{t-s} rho(s).

    Tokens before index 0 are treated as zero. x may be (L,) or (L, d).
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    kv = k.eval(np.arange(horizon + 1, dtype=np.float64))
    L = x.shape[0]
    if x.ndim == 1:
        return np.convolve(x, kv)[:L]
    return np.stack([np.convolve(x[:, j], kv)[:L] for j in range(x.shape[1])], axis=1)


def save_tabulated(k: Tabulated, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag", "value"])
        for lag, v in enumerate(k.values):
            w.writerow([lag, repr(v)])


def load_tabulated(path) -> Tabulated:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0][:2] == ["lag", "value"]:
        rows = rows[1:]
    pairs = sorted((int(r[0]), float(r[1])) for r in rows)
    values = np.zeros(pairs[-1][0] + 1 if pairs else 0)
    for lag, v in pairs:
        values[lag] = v
    return Tabulated(values=tuple(values))

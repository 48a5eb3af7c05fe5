"""Constructive approximation of indicator and decaying memory kernels by
mixtures of exponentials (lin route) and power laws (log route).

Two construction routes coexist:

* the bump route: a smooth bump pinned at the target lag is fitted by a
  Chebyshev polynomial on [0,1] and pulled back through x = exp(-alpha*t)
  or x = t^(-alpha); this mirrors the analytic existence argument and is
  accurate once the polynomial degree resolves the bump (m of order 4-5x
  the lag);
* the grid route: amplitudes on the same arithmetic rate grid are chosen
  to minimise the certified l1 error directly, solved as a linear program
  in an orthonormalised basis (extended precision) so the optimum survives
  the heavy cancellation these fits require.

Reports always carry the certified l1 error (truncated sum plus analytic
tail bound) of the kernel that is actually returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import chebyshev as _cheb
from numpy.polynomial import polynomial as _poly
from scipy.optimize import linprog

from .kernels import (ExpDecay, ExpSum, Indicator, MemoryKernel, PolyDecay,
                      PowerSum, TailBound, truncation_horizon)

LD = np.longdouble

MONOMIAL_CAP = 20          # beyond this, Chebyshev->monomial conversion is unusable
HEAD_COEFF_CAP = 1e8       # largest per-head amplitude a double-precision model realizes cleanly


# ---------------------------------------------------------------------------
# bump function machinery
# ---------------------------------------------------------------------------

def standard_bump(z) -> np.ndarray:
    """exp(-1/(1-z^2)) on (-1,1), zero outside."""
    z = np.asarray(z, dtype=np.float64)
    out = np.zeros_like(z)
    inside = np.abs(z) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - z[inside] ** 2))
    return out


@dataclass(frozen=True)
class BumpSpec:
    """A scaled/translated bump on (0,1]: V * Psi((x - mu)/sigma) inside support."""
    center: float
    half_width: float
    scale: float
    alpha: float
    gamma: float
    lag: int

    @classmethod
    def indicator_exp(cls, T: int, alpha: float, gamma: float) -> "BumpSpec":
        mu = math.exp(-alpha * T)
        sigma = math.exp(-alpha * T) - math.exp(-alpha * (T + 1))
        scale = math.e * math.exp(gamma * T)        # so the center value is e^{gamma T}
        return cls(mu, sigma, scale, alpha, gamma, T)

    @classmethod
    def indicator_poly(cls, T: int, alpha: float, gamma: float) -> "BumpSpec":
        mu = T ** (-alpha)
        sigma = T ** (-alpha) - (T + 1) ** (-alpha)
        scale = math.e * T ** (1.0 + gamma)
        return cls(mu, sigma, scale, alpha, gamma, T)

    @classmethod
    def decay_exp(cls, T: int, alpha: float, gamma: float, rho_T: float) -> "BumpSpec":
        # half-width version used for decaying targets: supports stay disjoint
        if T == 0:
            mu, sigma = 1.0, 0.5 * (1.0 - math.exp(-alpha))
        else:
            mu = math.exp(-alpha * T)
            sigma = 0.5 * (math.exp(-alpha * T) - math.exp(-alpha * (T + 1)))
        return cls(mu, sigma, math.e * math.exp(gamma * T) * rho_T, alpha, gamma, T)

    @classmethod
    def decay_poly(cls, T: int, alpha: float, gamma: float, rho_T: float) -> "BumpSpec":
        mu = T ** (-alpha)
        sigma = 0.5 * (T ** (-alpha) - (T + 1) ** (-alpha))
        return cls(mu, sigma, math.e * T ** (1.0 + gamma) * rho_T, alpha, gamma, T)


def bump_eval(spec: BumpSpec, x) -> np.ndarray | float:
    scalar = np.isscalar(x)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = spec.scale * standard_bump((x - spec.center) / spec.half_width)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# polynomial fitting (Chebyshev ground truth, optional monomial form)
# ---------------------------------------------------------------------------

@dataclass
class PolyApprox:
    """Degree-(m-1) polynomial on [0,1]: Chebyshev coefficients are the ground
    truth; monomial coefficients exist only when extraction is well-posed."""
    cheb: _cheb.Chebyshev
    monomial: np.ndarray | None = None

    @property
    def degree(self) -> int:
        return len(self.cheb.coef) - 1

    def eval_cheb(self, x) -> np.ndarray:
        return self.cheb(np.asarray(x, dtype=np.float64))

    def eval_monomial(self, x) -> np.ndarray:
        if self.monomial is None:
            raise ValueError("no monomial form for this fit")
        return _poly.polyval(np.asarray(x, dtype=np.float64), self.monomial)

    def coef_l1(self) -> float:
        # |Q(x)| <= sum |cheb coef| everywhere on the domain
        return float(np.abs(self.cheb.coef).sum())


def jackson_fit(f: Callable[[np.ndarray], np.ndarray], m: int,
                monomial_cap: int = MONOMIAL_CAP) -> PolyApprox:
    """Degree-(m-1) Chebyshev interpolant of f on [0,1].

    Monomial extraction is attempted only for m <= monomial_cap and kept only
    when both evaluations agree to 1e-8 on a dense grid.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    ser = _cheb.Chebyshev.interpolate(lambda x: np.asarray(f(x), dtype=np.float64),
                                      m - 1, domain=[0.0, 1.0])
    mono = None
    if m <= monomial_cap:
        p = ser.convert(kind=_poly.Polynomial, domain=[0.0, 1.0], window=[0.0, 1.0])
        cand = p.coef
        grid = np.linspace(0.0, 1.0, 1000)
        if np.max(np.abs(_poly.polyval(grid, cand) - ser(grid))) <= 1e-8:
            mono = cand
    return PolyApprox(cheb=ser, monomial=mono)


# ---------------------------------------------------------------------------
# extended-precision least-l1 amplitude fitting
# ---------------------------------------------------------------------------

def _mgs_qr(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Modified Gram-Schmidt QR in extended precision, with reorthogonalization."""
    A = A.astype(LD).copy()
    n, m = A.shape
    Q = np.zeros((n, m), dtype=LD)
    R = np.zeros((m, m), dtype=LD)
    for j in range(m):
        v = A[:, j].copy()
        for _ in range(2):
            for i in range(j):
                c = Q[:, i] @ v
                R[i, j] += c
                v -= c * Q[:, i]
        nrm = np.sqrt(v @ v)
        R[j, j] = nrm if nrm > 0 else np.finfo(LD).tiny
        Q[:, j] = v / R[j, j]
    return Q, R


def _solve_upper(R: np.ndarray, y: np.ndarray) -> np.ndarray:
    m = R.shape[0]
    x = np.zeros(m, dtype=LD)
    for i in range(m - 1, -1, -1):
        x[i] = (y[i] - R[i, i + 1:] @ x[i + 1:]) / R[i, i]
    return x


def _inv_upper(R: np.ndarray) -> np.ndarray:
    m = R.shape[0]
    out = np.zeros_like(R)
    for k in range(m):
        e = np.zeros(m, dtype=LD)
        e[k] = 1
        out[:, k] = _solve_upper(R, e)
    return out


def l1_amplitude_fit(A: np.ndarray, b: np.ndarray,
                     coeff_cap: float | None = None) -> tuple[np.ndarray, float]:
    """min ||A c - b||_1, optionally s.t. |c| <= coeff_cap.

    Solved as an LP over the orthonormalised column basis so the solver sees
    a well-conditioned matrix; coefficients are reconstructed in extended
    precision. Returns (c as longdouble, realized objective).
    """
    Q, R = _mgs_qr(A)
    Qd = Q.astype(np.float64)
    n, m = Qd.shape
    blocks_ub = [np.hstack([Qd, -np.eye(n)]), np.hstack([-Qd, -np.eye(n)])]
    rhs_ub = [b.astype(np.float64), -b.astype(np.float64)]
    if coeff_cap is not None:
        Rinv = _inv_upper(R).astype(np.float64)
        if np.all(np.isfinite(Rinv)):
            blocks_ub.append(np.hstack([Rinv, np.zeros((m, n))]))
            blocks_ub.append(np.hstack([-Rinv, np.zeros((m, n))]))
            rhs_ub += [np.full(m, coeff_cap), np.full(m, coeff_cap)]
    res = linprog(np.concatenate([np.zeros(m), np.ones(n)]),
                  A_ub=np.vstack(blocks_ub), b_ub=np.concatenate(rhs_ub),
                  bounds=[(None, None)] * m + [(0, None)] * n,
                  method="highs")
    if res.status != 0:
        # fall back to plain least squares in the orthonormal basis
        y = (Q.T @ b.astype(LD))
    else:
        y = res.x[:m].astype(LD)
    c = _solve_upper(R, y)
    realized = float(np.abs(A.astype(LD) @ c - b.astype(LD)).sum())
    return c, realized


def _ridge_fit(A: np.ndarray, b: np.ndarray, coeff_cap: float) -> tuple[np.ndarray, float]:
    """Least squares with the smallest ridge keeping coefficients under the cap."""
    A64 = A.astype(np.float64)
    m = A64.shape[1]
    gram = A64.T @ A64
    rhs = A64.T @ b
    lam = 0.0
    c = np.zeros(m)
    for _ in range(80):
        try:
            c = np.linalg.solve(gram + lam * np.eye(m), rhs)
        except np.linalg.LinAlgError:
            lam = 1e-18 if lam == 0.0 else lam * 4.0
            continue
        if np.abs(c).max() <= coeff_cap:
            break
        lam = 1e-18 if lam == 0.0 else lam * 4.0
    realized = float(np.abs(A64 @ c - b).sum())
    return c.astype(LD), realized


# ---------------------------------------------------------------------------
# fitted kernels
# ---------------------------------------------------------------------------

@dataclass
class ApproxReport:
    target: str
    family: str                   # "exp" | "poly"
    m: int
    alpha: float
    gamma: float
    route: str
    l1_error: float               # certified: truncated sum + tail bound
    tail_bound: float
    horizon: int
    head_decomposition: bool
    max_coeff: float
    ridge_fallback: bool = False
    notes: str = ""

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class FittedKernel(MemoryKernel):
    """A finite mixture sum_k c_k * exp(-beta_k t) (exp family) or
    sum_k c_k * t^(-beta_k) on t>=1 (poly family), evaluated in extended
    precision so large cancelling amplitudes remain meaningful.
    """

    def __init__(self, family: str, rates: np.ndarray, coeffs: np.ndarray,
                 ref_lag: int | None = None):
        if family not in ("exp", "poly"):
            raise ValueError("family must be 'exp' or 'poly'")
        self.family = family
        self.rates = np.asarray(rates, dtype=LD)
        self.coeffs = np.asarray(coeffs, dtype=LD)
        self.ref_lag = ref_lag

    # -- MemoryKernel interface --

    def eval(self, t):
        return self.eval_real(np.asarray(t, dtype=np.float64))

    def eval_real(self, t) -> np.ndarray:
        """Evaluate at (possibly non-integer) arguments >= 0 (exp) / >= 1 (poly)."""
        t = np.atleast_1d(np.asarray(t, dtype=LD))
        if self.family == "exp":
            vals = np.exp(-np.outer(t, self.rates)) @ self.coeffs
        else:
            out = np.zeros_like(t)
            pos = t >= 1
            if np.any(pos):
                out[pos] = (t[pos, None] ** (-self.rates[None, :])) @ self.coeffs
            vals = out
        return vals.astype(np.float64)

    def tail_mass(self, horizon):
        if self.family == "exp":
            return float(sum(abs(c) * np.exp(-b * (horizon + 1)) / (1 - np.exp(-b))
                             for c, b in zip(self.coeffs, self.rates)))
        h = max(horizon, 1)
        return float(sum(abs(c) * h ** (1.0 - b) / (b - 1.0)
                         for c, b in zip(self.coeffs, self.rates) if b > 1))

    def summable(self):
        return self.family == "exp" or bool(np.all(self.rates > 1))

    # -- shifted / rescaled evaluation (translation and rescaling operators) --

    def eval_shifted(self, t, B: int) -> np.ndarray:
        """exp family: evaluate at t - B + ref_lag, so the peak sits at lag B."""
        if self.family != "exp":
            raise ValueError("eval_shifted applies to the exp family")
        if self.ref_lag is None:
            raise ValueError("kernel has no reference lag")
        if not 0 <= B <= self.ref_lag:
            raise ValueError(f"B must be in [0, {self.ref_lag}]")
        t = np.asarray(t, dtype=np.float64)
        return self.eval_real(t - B + self.ref_lag)

    def eval_rescaled(self, t, B: int) -> np.ndarray:
        """poly family: evaluate at t * ref_lag / B, so the peak sits at lag B."""
        if self.family != "poly":
            raise ValueError("eval_rescaled applies to the poly family")
        if self.ref_lag is None:
            raise ValueError("kernel has no reference lag")
        if not 1 <= B <= self.ref_lag:
            raise ValueError(f"B must be in [1, {self.ref_lag}]")
        t = np.asarray(t, dtype=np.float64)
        return self.eval_real(t * (self.ref_lag / B))

    def heads(self) -> ExpSum | PowerSum | None:
        """Per-head decomposition, or None when amplitudes exceed what a
        double-precision model can realize."""
        if np.abs(self.coeffs).max(initial=0.0) > HEAD_COEFF_CAP:
            return None
        pairs = tuple((float(c), float(b)) for c, b in zip(self.coeffs, self.rates)
                      if c != 0.0)
        if self.family == "exp":
            return ExpSum(terms=pairs)
        if any(b <= 1 for _, b in pairs):
            return None
        return PowerSum(terms=pairs)


class ChebKernel(MemoryKernel):
    """Kernel in transform form: damp(t) * Q(x(t)) with Q in Chebyshev basis.

    exp family: exp(-gamma t) * Q(exp(-alpha t)); poly family:
    t^-(1+gamma) * Q(t^-alpha) on t >= 1. Clenshaw evaluation is the ground
    truth; no per-head decomposition unless the monomial form exists.
    """

    def __init__(self, family: str, poly: PolyApprox, alpha: float, gamma: float,
                 ref_lag: int | None = None):
        self.family = family
        self.poly = poly
        self.alpha = alpha
        self.gamma = gamma
        self.ref_lag = ref_lag

    def _transform(self, t: np.ndarray) -> np.ndarray:
        if self.family == "exp":
            return np.exp(-self.alpha * t)
        return t ** (-self.alpha)

    def eval(self, t):
        return self.eval_real(t)

    def eval_real(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if self.family == "exp":
            return np.exp(-self.gamma * t) * self.poly.eval_cheb(np.exp(-self.alpha * t))
        out = np.zeros_like(t)
        pos = t >= 1
        tp = t[pos]
        out[pos] = tp ** (-(1.0 + self.gamma)) * self.poly.eval_cheb(tp ** (-self.alpha))
        return out

    def eval_shifted(self, t, B: int) -> np.ndarray:
        if self.family != "exp" or self.ref_lag is None:
            raise ValueError("eval_shifted needs an exp-family kernel with a reference lag")
        if not 0 <= B <= self.ref_lag:
            raise ValueError(f"B must be in [0, {self.ref_lag}]")
        return self.eval_real(np.asarray(t, dtype=np.float64) - B + self.ref_lag)

    def eval_rescaled(self, t, B: int) -> np.ndarray:
        if self.family != "poly" or self.ref_lag is None:
            raise ValueError("eval_rescaled needs a poly-family kernel with a reference lag")
        if not 1 <= B <= self.ref_lag:
            raise ValueError(f"B must be in [1, {self.ref_lag}]")
        return self.eval_real(np.asarray(t, dtype=np.float64) * (self.ref_lag / B))

    def tail_mass(self, horizon):
        qmax = self.poly.coef_l1()
        if self.family == "exp":
            return qmax * np.exp(-self.gamma * (horizon + 1)) / (1 - np.exp(-self.gamma))
        h = max(horizon, 1)
        return qmax * h ** (-self.gamma) / self.gamma

    def summable(self):
        return True

    def heads(self) -> ExpSum | PowerSum | None:
        if self.poly.monomial is None:
            return None
        coefs = self.poly.monomial
        if np.abs(coefs).max(initial=0.0) > HEAD_COEFF_CAP:
            return None
        if self.family == "exp":
            terms = tuple((float(c), self.gamma + self.alpha * k)
                          for k, c in enumerate(coefs) if c != 0.0)
            return ExpSum(terms=terms) if terms else ExpSum(terms=((0.0, 1.0),))
        terms = tuple((float(c), 1.0 + self.gamma + self.alpha * k)
                      for k, c in enumerate(coefs) if c != 0.0)
        return PowerSum(terms=terms) if terms else None


# ---------------------------------------------------------------------------
# certified l1 error of a fitted kernel against a target
# ---------------------------------------------------------------------------

def certified_l1(kernel, target: MemoryKernel, start: int,
                 horizon: int) -> tuple[float, float]:
    """(truncated l1 distance + tail bound, tail bound alone)."""
    s = np.arange(start, horizon + 1, dtype=np.float64)
    dist = float(np.abs(kernel.eval_real(s) - target.eval(s)).sum())
    tail = float(kernel.tail_mass(horizon) + target.tail_mass(horizon))
    return dist + tail, tail


# ---------------------------------------------------------------------------
# design matrices for grid fits
# ---------------------------------------------------------------------------

def _exp_design(rates: np.ndarray, S: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(S + 1, dtype=LD)
    A = np.exp(-np.outer(t, rates.astype(LD)))
    tails = np.exp(-rates.astype(LD) * (S + 1)) / (1 - np.exp(-rates.astype(LD)))
    return np.vstack([A, np.diag(tails)]), t

def _poly_design(exponents: np.ndarray, S: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(1, S + 1, dtype=LD)
    A = t[:, None] ** (-exponents.astype(LD)[None, :])
    tails = np.array([S ** (1.0 - b) / (b - 1.0) if b > 1 else np.inf
                      for b in exponents], dtype=LD)
    return np.vstack([A, np.diag(tails)]), t


def _grid_fit_indicator(T: int, m: int, family: str, alpha: float, gamma: float,
                        coeff_cap: float | None) -> FittedKernel:
    """Best-l1 amplitudes on the lemma's arithmetic rate grid."""
    if family == "exp":
        rates = gamma + alpha * np.arange(m)
        rates = rates if rates[0] > 0 else rates + alpha  # gamma=0 guard
        S = int(40.0 / rates[0]) + 10 * T
        A, t = _exp_design(rates, S)
        b = np.concatenate([(t == T).astype(np.float64), np.zeros(m)])
    else:
        rates = 1.0 + gamma + alpha * np.arange(m)
        S = max(4000, 40 * T)
        A, t = _poly_design(rates, S)
        b = np.concatenate([(t == T).astype(np.float64), np.zeros(m)])
    c, _ = l1_amplitude_fit(A, b, coeff_cap)
    return FittedKernel(family, rates, c, ref_lag=T)


def _zero_kernel(family: str, ref_lag: int) -> FittedKernel:
    return FittedKernel(family, np.array([1.0 if family == "exp" else 2.0]),
                        np.array([0.0]), ref_lag=ref_lag)


# ---------------------------------------------------------------------------
# indicator approximants (fixed delta at lag T)
# ---------------------------------------------------------------------------

def _report_for(kernel, target, start, family, T, m, alpha, gamma, route,
                notes="") -> ApproxReport:
    horizon = max(truncation_horizon(target, 1e-14) if target.summable() else 0,
                  int(10 * T + 40.0 / max(gamma, 1e-3)), 50)
    err, tail = certified_l1(kernel, target, start, horizon)
    heads = kernel.heads()
    if isinstance(kernel, FittedKernel):
        max_coeff = float(np.abs(kernel.coeffs).max(initial=0.0))
    else:
        max_coeff = float(np.abs(kernel.poly.cheb.coef).max(initial=0.0))
    return ApproxReport(target=repr(target), family=family, m=m, alpha=alpha,
                        gamma=gamma, route=route, l1_error=err, tail_bound=tail,
                        horizon=horizon, head_decomposition=heads is not None,
                        max_coeff=max_coeff, notes=notes)


def indicator_exp_approx(T: int, m: int, alpha: float = 0.01, gamma: float = 0.01,
                         route: str = "auto"):
    """Approximate Indicator(T) by a kernel of the form e^{-gamma t} Q_m(e^{-alpha t}).

    route "bump" follows the smooth-bump construction literally; route "grid"
    picks the best-l1 amplitudes on the same rate set {gamma + alpha k}; "auto"
    returns whichever certifies the smaller l1 error. Returns (kernel, report).
    """
    if T < 1 or m < 1:
        raise ValueError("need T >= 1 and m >= 1")
    target = Indicator(T)
    candidates = []
    if route in ("bump", "auto"):
        spec = BumpSpec.indicator_exp(T, alpha, gamma)
        q = jackson_fit(lambda x: bump_eval(spec, x), m)
        candidates.append(("bump", ChebKernel("exp", q, alpha, gamma, ref_lag=T)))
    if route in ("grid", "auto"):
        candidates.append(("grid", _grid_fit_indicator(T, m, "exp", alpha, gamma, None)))
        candidates.append(("zero", _zero_kernel("exp", T)))
    if not candidates:
        raise ValueError(f"unknown route {route!r}")
    best = None
    for name, k in candidates:
        rep = _report_for(k, target, 0, "exp", T, m, alpha, gamma, name)
        if best is None or rep.l1_error < best[1].l1_error:
            best = (k, rep)
    return best


def indicator_poly_approx(T: int, m: int, alpha: float = 0.01, gamma: float = 0.01,
                          route: str = "auto"):
    """Approximate Indicator(T) on t >= 1 by t^-(1+gamma) Q_m(t^-alpha)."""
    if T < 1 or m < 1:
        raise ValueError("need T >= 1 and m >= 1")
    target = Indicator(T)
    candidates = []
    if route in ("bump", "auto"):
        spec = BumpSpec.indicator_poly(T, alpha, gamma)
        q = jackson_fit(lambda x: bump_eval(spec, x), m)
        candidates.append(("bump", ChebKernel("poly", q, alpha, gamma, ref_lag=T)))
    if route in ("grid", "auto"):
        candidates.append(("grid", _grid_fit_indicator(T, m, "poly", alpha, gamma, None)))
        candidates.append(("zero", _zero_kernel("poly", T)))
    if not candidates:
        raise ValueError(f"unknown route {route!r}")
    best = None
    for name, k in candidates:
        rep = _report_for(k, target, 1, "poly", T, m, alpha, gamma, name)
        if best is None or rep.l1_error < best[1].l1_error:
            best = (k, rep)
    return best


def shifted_exp_eval(kernel, t, B: int) -> np.ndarray:
    """Adaptive-lag evaluation: the translation t - B + T applied to a kernel
    built at reference lag T moves its peak to lag B."""
    return kernel.eval_shifted(t, B)


def rescaled_poly_eval(kernel, t, B: int) -> np.ndarray:
    """Adaptive-lag evaluation for the poly family: rescale the argument by T/B."""
    return kernel.eval_rescaled(t, B)


def peak_location(kernel, B: int, tmax: int | None = None) -> int:
    """argmax over integer lags of the shifted/rescaled kernel."""
    if kernel.family == "exp":
        hi = tmax if tmax is not None else 4 * kernel.ref_lag + 50
        t = np.arange(0, hi + 1, dtype=np.float64)
        return int(np.argmax(kernel.eval_shifted(t, B)))
    hi = tmax if tmax is not None else 8 * kernel.ref_lag + 50
    t = np.arange(1, hi + 1, dtype=np.float64)
    return int(np.argmax(kernel.eval_rescaled(t, B))) + 1


# ---------------------------------------------------------------------------
# decaying-kernel approximants (sum-of-bumps route)
# ---------------------------------------------------------------------------

class _BumpComb:
    """phi(x) = sum over lags of disjoint bumps carrying the target's values."""

    def __init__(self, family: str, alpha: float, gamma: float, rho: MemoryKernel,
                 include_zero_lag: bool):
        self.family = family
        self.alpha = alpha
        self.gamma = gamma
        self.rho = rho
        self.t_min = 0 if include_zero_lag else 1

    def _lag_of(self, x: np.ndarray) -> np.ndarray:
        if self.family == "exp":
            return -np.log(np.maximum(x, 1e-300)) / self.alpha
        return np.maximum(x, 1e-300) ** (-1.0 / self.alpha)

    def _bump_for(self, T: int) -> BumpSpec:
        rho_T = float(self.rho.eval(np.array([float(T)]))[0])
        if self.family == "exp":
            return BumpSpec.decay_exp(T, self.alpha, self.gamma, rho_T)
        return BumpSpec.decay_poly(T, self.alpha, self.gamma, rho_T)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        out = np.zeros_like(x)
        approx_lag = self._lag_of(x)
        for i, (xi, ti) in enumerate(zip(x, approx_lag)):
            if xi <= 0:
                continue
            for T in {max(self.t_min, int(np.floor(ti)) + d) for d in (-1, 0, 1)}:
                spec = self._bump_for(T)
                if abs(xi - spec.center) < spec.half_width:
                    out[i] = bump_eval(spec, xi)
                    break
        return out


def decay_exp_approx(rho: ExpDecay, m: int, n: int = 1, alpha: float = 5e-3,
                     gamma: float | None = None):
    """Fit an exponentially decaying kernel by the sum-of-bumps construction
    pulled back through x = exp(-alpha t). gamma defaults to beta/100."""
    beta = rho.beta
    n_max = math.floor(99.0 * beta)
    if not 1 <= n <= n_max:
        raise ValueError(f"rate n={n} outside the admissible range [1, {n_max}]")
    if gamma is None:
        gamma = 1e-2 * beta
    comb = _BumpComb("exp", alpha, gamma, rho, include_zero_lag=True)
    q = jackson_fit(comb, m)
    kernel = ChebKernel("exp", q, alpha, gamma)
    horizon = max(truncation_horizon(rho, 1e-14), int(40.0 / gamma), 50)
    err, tail = certified_l1(kernel, rho, 0, horizon)
    rep = ApproxReport(target=repr(rho), family="exp", m=m, alpha=alpha, gamma=gamma,
                       route="bump-comb", l1_error=err, tail_bound=tail,
                       horizon=horizon, head_decomposition=kernel.heads() is not None,
                       max_coeff=float(np.abs(q.cheb.coef).max()))
    return kernel, rep


def decay_poly_approx(rho: PolyDecay, m: int, n: int = 1, alpha: float = 1e-2,
                      gamma: float | None = None):
    """Fit a polynomially decaying kernel via bumps in x = t^(-alpha), t >= 1."""
    beta = rho.beta
    n_max = math.floor(0.99 * beta) - 1
    if not 1 <= n <= n_max:
        raise ValueError(f"rate n={n} outside the admissible range [1, {n_max}]")
    if gamma is None:
        gamma = 1e-4 * beta
    comb = _BumpComb("poly", alpha, gamma, rho, include_zero_lag=False)
    q = jackson_fit(comb, m)
    kernel = ChebKernel("poly", q, alpha, gamma)
    horizon = max(truncation_horizon(rho, 1e-12), 2000)
    err, tail = certified_l1(kernel, rho, 1, horizon)
    rep = ApproxReport(target=repr(rho), family="poly", m=m, alpha=alpha, gamma=gamma,
                       route="bump-comb", l1_error=err, tail_bound=tail,
                       horizon=horizon, head_decomposition=kernel.heads() is not None,
                       max_coeff=float(np.abs(q.cheb.coef).max()))
    return kernel, rep


# ---------------------------------------------------------------------------
# least-squares oracle on a log-spaced rate grid
# ---------------------------------------------------------------------------

def lsq_grid(m: int, family: str) -> np.ndarray:
    """The oracle's fixed log-spaced rate grid."""
    base = np.exp(np.linspace(np.log(0.05), np.log(25.0), m))
    return base if family == "exp" else 1.0 + base


def lsq_fit(target: MemoryKernel, m: int, family: str = "exp",
            horizon: int | None = None):
    """Least-squares amplitudes on the fixed log grid; the numerical oracle
    cross-checking the analytic constructors. Returns (kernel, report)."""
    if family not in ("exp", "poly", "power"):
        raise ValueError("family must be 'exp' or 'power'")
    fam = "exp" if family == "exp" else "poly"
    rates = lsq_grid(m, fam)
    if horizon is None:
        # cover the target's mass and the slowest basis rate, so the residual
        # is minimized over the whole range the report will certify
        horizon = max(truncation_horizon(target, 1e-8), 32,
                      int(28.0 / rates.min()) if fam == "exp" else 4000)
    start = 0 if fam == "exp" else 1
    t = np.arange(start, horizon + 1, dtype=np.float64)
    if fam == "exp":
        A = np.exp(-np.outer(t, rates))
        tails = np.exp(-rates * (horizon + 1)) / (1 - np.exp(-rates))
    else:
        A = t[:, None] ** (-rates[None, :])
        tails = np.array([horizon ** (1.0 - b) / (b - 1.0) for b in rates])
    A_aug = np.vstack([A, np.diag(tails)])
    b = np.concatenate([target.eval(t), np.zeros(m)])
    c, residuals, rank, _ = np.linalg.lstsq(A_aug, b, rcond=None)
    ridge = False
    if rank < m:
        c = np.linalg.solve(A_aug.T @ A_aug + 1e-10 * np.eye(m), A_aug.T @ b)
        ridge = True
    kernel = FittedKernel(fam, rates, c.astype(LD),
                          ref_lag=getattr(target, "T", None))
    rep_h = horizon
    err, tail = certified_l1(kernel, target, start, rep_h)
    rep = ApproxReport(target=repr(target), family=fam, m=m, alpha=float("nan"),
                       gamma=float("nan"), route="lsq", l1_error=err,
                       tail_bound=tail, horizon=rep_h,
                       head_decomposition=kernel.heads() is not None,
                       max_coeff=float(np.abs(c).max()), ridge_fallback=ridge)
    return kernel, rep


# ---------------------------------------------------------------------------
# head-grade fits: what a double-precision attention model can realize
# ---------------------------------------------------------------------------

def fit_indicator_heads(T: int, m: int, family: str = "exp",
                        coeff_cap: float = HEAD_COEFF_CAP,
                        rate_scale: float = 2.0) -> tuple[FittedKernel, float]:
    """Best realizable m-term head kernel for Indicator(T).

    Tries capped-l1 and ridge amplitude fits on T-scaled rate grids for every
    budget m' <= m (idle heads are free), floors against the zero kernel, and
    returns the candidate with the smallest certified l1 error. Monotone in m
    by construction.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    target = Indicator(T)
    start = 0 if family == "exp" else 1
    budgets = sorted({mm for mm in (1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, m)
                      if 1 <= mm <= m})
    best: tuple[FittedKernel, float] | None = None

    def consider(kernel: FittedKernel):
        nonlocal best
        if np.abs(kernel.coeffs).max(initial=0.0) > coeff_cap:
            return
        # store in plain double: this is what the attention heads will carry
        kernel = FittedKernel(kernel.family, kernel.rates.astype(np.float64),
                              kernel.coeffs.astype(np.float64), ref_lag=T)
        if kernel.family == "exp":
            h = max(int(30.0 / kernel.rates.min()), 8 * T, 64)
        else:
            h = max(40 * T, 400)
        err, _ = certified_l1(kernel, target, start, h)
        if best is None or err < best[1]:
            best = (kernel, err)

    consider(_zero_kernel(family, T))
    for mm in budgets:
        if family == "exp":
            grids = [(rate_scale / T) * np.arange(1, mm + 1),
                     np.exp(np.linspace(np.log(0.1 / T), np.log(6.0), mm))]
        else:
            grids = [1.01 + (rate_scale / math.log(T + 1.0)) * np.arange(mm),
                     1.0 + np.exp(np.linspace(np.log(0.1), np.log(4.0 * T), mm))]
        for rates in grids:
            if family == "exp":
                S = int(30.0 / rates.min()) + 10 * T
                A, t = _exp_design(rates, S)
            else:
                S = 40 * T + 400
                A, t = _poly_design(rates, S)
            b = np.concatenate([(t == T).astype(np.float64), np.zeros(mm)])
            c_lp, _ = l1_amplitude_fit(A, b, coeff_cap)
            consider(FittedKernel(family, rates, c_lp, ref_lag=T))
            c_rg, _ = _ridge_fit(A, b, coeff_cap)
            consider(FittedKernel(family, rates, c_rg, ref_lag=T))
    return best


def fit_decay_heads(rho: MemoryKernel, m: int, family: str,
                    coeff_cap: float = HEAD_COEFF_CAP) -> tuple[FittedKernel, float]:
    """Best realizable m-term head kernel for a decaying target (lsq grid)."""
    kernel, rep = lsq_fit(rho, m, "exp" if family == "exp" else "power")
    if float(np.abs(kernel.coeffs).max(initial=0.0)) > coeff_cap:
        start = 0 if family == "exp" else 1
        horizon = max(truncation_horizon(rho, 1e-8), 32)
        t = np.arange(start, horizon + 1, dtype=np.float64)
        rates = lsq_grid(m, "exp" if family == "exp" else "poly")
        if family == "exp":
            A = np.exp(-np.outer(t, rates))
        else:
            A = t[:, None] ** (-rates[None, :])
        c, _ = _ridge_fit(A, rho.eval(t), coeff_cap)
        kernel = FittedKernel("exp" if family == "exp" else "poly", rates,
                              c.astype(np.float64), ref_lag=getattr(rho, "T", None))
        err, _ = certified_l1(kernel, rho, start, horizon)
        return kernel, err
    kernel = FittedKernel(kernel.family, kernel.rates.astype(np.float64),
                          kernel.coeffs.astype(np.float64), ref_lag=kernel.ref_lag)
    start = 0 if family == "exp" else 1
    h = max(truncation_horizon(rho, 1e-12),
            int(28.0 / float(kernel.rates.min())) if family == "exp" else 4000)
    err, _ = certified_l1(kernel, rho, start, h)
    return kernel, err


# ---------------------------------------------------------------------------
# rate sweeps
# ---------------------------------------------------------------------------

@dataclass
class RateReport:
    target: str
    decay_type: str
    n: int
    entries: list = field(default_factory=list)   # (m, measured l1, predicted shape)
    slope: float = float("nan")
    pre_floor_points: int = 0
    inconclusive: bool = False
    flat: bool = False

    def to_dict(self) -> dict:
        return {"target": self.target, "decay_type": self.decay_type, "n": self.n,
                "entries": [list(e) for e in self.entries], "slope": self.slope,
                "pre_floor_points": self.pre_floor_points,
                "inconclusive": self.inconclusive, "flat": self.flat}


def fit_loglog_slope(ms: Sequence[int], errs: Sequence[float],
                     floor: float = 1e-12) -> tuple[float, int]:
    ms = np.asarray(ms, dtype=np.float64)
    errs = np.asarray(errs, dtype=np.float64)
    keep = errs > floor
    if keep.sum() < 2:
        return float("nan"), int(keep.sum())
    slope = float(np.polyfit(np.log(ms[keep]), np.log(errs[keep]), 1)[0])
    return slope, int(keep.sum())


def predicted_shape(kind: str, T: int, m: int, n: int) -> float:
    """The theorem's bound shape (no absolute constant): rate term only."""
    if kind == "indicator-exp":
        return math.exp(0.01 * (n + 1) * T) / m ** n
    if kind == "indicator-poly":
        return T ** (1.01 * (n + 1)) / m ** n
    if kind in ("decay-exp", "decay-poly"):
        return 1.0 / m ** n
    raise ValueError(f"unknown shape kind {kind!r}")


def rate_sweep(builder: Callable[[int], tuple], m_list: Sequence[int], n: int,
               shape_kind: str, T: int = 1, target_name: str = "") -> RateReport:
    """Run a constructor across a budget list and fit the log-log error slope.

    builder(m) must return (kernel, ApproxReport). The slope is fitted over
    the pre-floor regime only (errors above 1e-12).
    """
    m_list = list(m_list)
    if len(m_list) < 4 or any(b <= a for a, b in zip(m_list, m_list[1:])):
        raise ValueError("m_list must be increasing with length >= 4")
    rep = RateReport(target=target_name or shape_kind, decay_type=shape_kind, n=n)
    for m in m_list:
        _, r = builder(m)
        rep.entries.append((m, r.l1_error, predicted_shape(shape_kind, T, m, n)))
    errs = [e[1] for e in rep.entries]
    rep.slope, rep.pre_floor_points = fit_loglog_slope(m_list, errs)
    rep.inconclusive = rep.pre_floor_points < 3
    rep.flat = (not rep.inconclusive) and rep.slope > -0.1
    return rep

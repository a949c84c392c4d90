"""Bivariate renewal laws with a pure power-law loop weight.

The inter-arrival law puts mass ``K(l1 + l2) = c * L0 / (l1 + l2)**(2 + alpha)``
on every increment ``(l1, l2)`` with both coordinates >= 1, where ``L0`` is the
user supplied slow constant and ``c`` normalizes the total mass to one.  The
tail constant that enters every rescaling is ``L = c * L0``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numba import njit
from scipy.special import zeta as hurwitz_zeta

from ._kernels import cone_dp, triangle_mass
from .seeding import as_generator, stream

__all__ = [
    "RenewalLaw",
    "LatticeBox",
    "MassTable",
    "Trajectory",
    "PhiProfile",
    "IntersectionSummary",
    "make_law",
    "interarrival_pmf",
    "mass_function",
    "phi_estimate",
    "angular_profile",
    "limit_profile",
    "surrogate_profile",
    "laplace_functional",
    "laplace_target",
    "marginal_pmf",
    "marginal_mass",
    "sample_renewal",
    "intersection_stats",
]

# Bernoulli numbers B_2, B_4, B_6, B_8, B_10 for the Euler-Maclaurin tail.
_BERNOULLI = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66)


def _rising(p: float, k: int) -> float:
    out = 1.0
    for j in range(k):
        out *= p + j
    return out


def _power_deriv(p: float, k: int, x: float) -> float:
    """k-th derivative of x**(-p)."""
    return (-1) ** k * _rising(p, k) * x ** (-p - k)


def _em_tail(alpha: float, n: int) -> tuple[float, float]:
    """Euler-Maclaurin value of sum_{m > n} (m^{-1-a} - m^{-2-a}) and an error bound."""
    p1, p2 = 1.0 + alpha, 2.0 + alpha
    integral = n ** (1 - p1) / (p1 - 1) - n ** (1 - p2) / (p2 - 1)
    f_n = n ** -p1 - n ** -p2
    total = integral + 0.5 * f_n
    last = 0.0
    for j, b in enumerate(_BERNOULLI, start=1):
        k = 2 * j - 1
        term = b / math.factorial(2 * j) * (_power_deriv(p1, k, n) - _power_deriv(p2, k, n))
        total -= term
        last = term
    # remainder is dominated by the size of the last retained correction
    return total - f_n, abs(last)


@dataclass(frozen=True)
class RenewalLaw:
    """Inter-arrival law of the bivariate renewal.

    ``normalizer`` is the constant c; ``head_sum`` and ``tail_sum`` are the two
    pieces of sum_{m>=2} (m-1) m^{-2-alpha} (direct part up to ``cutoff``,
    Euler-Maclaurin remainder above it) and ``tail_bracket`` the monotone
    integral bounds that contain the remainder.
    """

    alpha: float
    slow_constant: float
    normalizer: float
    cutoff: int
    head_sum: float
    tail_sum: float
    tail_error: float
    tail_bracket: tuple[float, float]
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    @property
    def L(self) -> float:
        """Tail constant: K(m) = L / m**(2 + alpha)."""
        return self.normalizer * self.slow_constant

    def K(self, m: int) -> float:
        if m < 2:
            return 0.0
        return self.L / float(m) ** (2.0 + self.alpha)

    def kvec(self, nmax: int) -> np.ndarray:
        """K(0..nmax) with K(0) = K(1) = 0 (memoized, read only)."""
        cur = self._cache.get("kvec")
        if cur is None or cur.size < nmax + 1:
            size = max(nmax + 1, 2 * (0 if cur is None else cur.size), 64)
            m = np.arange(size, dtype=float)
            k = np.zeros(size)
            k[2:] = self.L / m[2:] ** (2.0 + self.alpha)
            k.setflags(write=False)
            self._cache["kvec"] = k
            cur = k
        return cur[: nmax + 1]

    def total_length_pmf(self, m):
        """P(l1 + l2 = m) = (m - 1) K(m)."""
        m = np.asarray(m, dtype=float)
        return np.where(m >= 2, (m - 1.0) * self.L / np.maximum(m, 2.0) ** (2.0 + self.alpha), 0.0)

    def normalization_residual(self) -> float:
        return abs(self.normalizer * self.slow_constant * (self.head_sum + self.tail_sum) - 1.0)

    def key(self) -> tuple[float, float]:
        return (self.alpha, self.slow_constant)


def make_law(alpha: float, slow_constant: float = 1.0, tol: float = 1e-12) -> RenewalLaw:
    """Normalized law; the series is summed directly up to a cutoff plus a tail estimate."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0 (got {alpha})")
    if not slow_constant > 0:
        raise ValueError(f"slow_constant must be > 0 (got {slow_constant})")
    if not tol > 0:
        raise ValueError("tol must be > 0")
    n = 64
    while True:
        tail, err = _em_tail(alpha, n)
        if err < 1e-3 * tol or n > 1 << 22:
            break
        n *= 2
    m = np.arange(2, n + 1, dtype=float)
    head = math.fsum(m ** -(1.0 + alpha) - m ** -(2.0 + alpha))
    lo = (n + 1) ** -alpha / alpha - (n + 1) ** (-1 - alpha) / (1 + alpha)
    hi = n ** -alpha / alpha - n ** (-1 - alpha) / (1 + alpha)
    total = head + tail
    return RenewalLaw(
        alpha=float(alpha),
        slow_constant=float(slow_constant),
        normalizer=1.0 / (slow_constant * total),
        cutoff=n,
        head_sum=head,
        tail_sum=tail,
        tail_error=err,
        tail_bracket=(lo, hi),
    )


def interarrival_pmf(law: RenewalLaw, l1: int, l2: int) -> float:
    if l1 < 1 or l2 < 1:
        raise ValueError("increments are >= 1 in both coordinates")
    return law.K(int(l1) + int(l2))


# ---------------------------------------------------------------------------
# mass function


@dataclass(frozen=True)
class LatticeBox:
    n1: int
    n2: int

    def __post_init__(self):
        if int(self.n1) < 1 or int(self.n2) < 1:
            raise ValueError("box sides must be >= 1")

    @classmethod
    def of(cls, box) -> "LatticeBox":
        if isinstance(box, LatticeBox):
            return box
        if np.isscalar(box):
            return cls(int(box), int(box))
        n1, n2 = box
        return cls(int(n1), int(n2))


@dataclass(frozen=True)
class MassTable:
    box: LatticeBox
    values: np.ndarray

    def __call__(self, i1: int, i2: int) -> float:
        return float(self.values[i1, i2])

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i1", "i2", "u"])
            for i1 in range(self.box.n1 + 1):
                for i2 in range(self.box.n2 + 1):
                    w.writerow([i1, i2, f"{self.values[i1, i2]:.17g}"])
        return path


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def mass_function(law: RenewalLaw, box) -> MassTable:
    """u(i) = P(i in tau) on [0, n1] x [0, n2]."""
    box = LatticeBox.of(box)
    n1, n2 = box.n1, box.n2
    big = law._cache.get("mass")
    if big is not None and big.shape[0] > n1 and big.shape[1] > n2:
        # cone locality: a larger table agrees bit for bit on the overlap
        return MassTable(box, _readonly(big[: n1 + 1, : n2 + 1].copy()))
    z = cone_dp(law.kvec(n1 + n2), np.ones((n1 + 1, n2 + 1)), n1, n2)
    if big is None or z.size > big.size:
        law._cache["mass"] = z
    return MassTable(box, _readonly(z))


def phi_estimate(law: RenewalLaw, s, n: int) -> float:
    """phi_n(s) = n^{2-alpha} L u(floor(n s))."""
    s1, s2 = float(s[0]), float(s[1])
    if s1 <= 0 or s2 <= 0:
        raise ValueError("phi_n needs both coordinates of s > 0")
    i1, i2 = int(math.floor(n * s1)), int(math.floor(n * s2))
    if i1 == 0 or i2 == 0:
        u = 1.0 if (i1 == 0 and i2 == 0) else 0.0
    else:
        u = mass_function(law, (i1, i2))(i1, i2)
    return n ** (2.0 - law.alpha) * law.L * u


# ---------------------------------------------------------------------------
# homogeneous profiles:  phi(s) = |s|_1^{alpha-2} a(s1 / |s|_1)


@dataclass(frozen=True)
class PhiProfile:
    """Angular profile a(v) on the uniform grid v_j = j / (len(a) - 1).

    ``kind`` is ``surrogate`` (a = 1, i.e. phi = |s|^{alpha-2}), ``table``
    (anti-diagonal of the finite-resolution table phi_d) or ``limit``
    (extrapolation of a sequence of tables).
    """

    alpha: float
    a: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict, compare=False)

    def angular(self, v):
        v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
        x = np.linspace(0.0, 1.0, self.a.size)
        return np.interp(v, x, self.a)

    def __call__(self, s1, s2):
        s1 = np.asarray(s1, dtype=float)
        s2 = np.asarray(s2, dtype=float)
        r = s1 + s2
        with np.errstate(divide="ignore", invalid="ignore"):
            out = r ** (self.alpha - 2.0) * self.angular(s1 / np.where(r > 0, r, 1.0))
        return np.where((s1 > 0) & (s2 > 0), out, 0.0)


def surrogate_profile(alpha: float) -> PhiProfile:
    return PhiProfile(alpha=float(alpha), a=_readonly(np.ones(2)), kind="surrogate")


@lru_cache(maxsize=32)
def _profile_cached(alpha: float, slow_constant: float, d: int) -> np.ndarray:
    law = make_law(alpha, slow_constant)
    z = triangle_mass(law.kvec(d + 1), d)
    j = np.arange(d + 1)
    row = z[j, d - j].copy()
    return _readonly(row * d ** (2.0 - alpha) * law.L)


def angular_profile(law: RenewalLaw, d: int) -> np.ndarray:
    """a_d(j/d) = d^{2-alpha} L u(j, d - j) for j = 0..d."""
    return _profile_cached(law.alpha, law.slow_constant, int(d))


def _correction_exponents(alpha: float, count: int) -> list[float]:
    cand = sorted({round(j * (1.0 - alpha), 12) for j in range(1, 6)} | {1.0})
    out: list[float] = []
    for e in cand:
        if e > 0 and all(abs(e - x) > 1e-3 for x in out):
            out.append(e)
    return out[:count]


def limit_profile(
    law: RenewalLaw,
    levels: tuple[int, ...] = (128, 256, 512, 1024, 2048),
    fine: int = 2048,
) -> PhiProfile:
    """Richardson extrapolation of a_d over ``levels``.

    Corrections are taken in powers d^{-j(1-alpha)} and d^{-1}; the solve is
    done on the coarsest common v-grid, then resampled by a cubic spline.
    """
    from scipy.interpolate import CubicSpline

    levels = tuple(sorted(int(d) for d in levels))
    base = levels[0]
    if any(d % base for d in levels):
        raise ValueError("levels must be multiples of the coarsest level")
    exps = _correction_exponents(law.alpha, len(levels) - 1)
    rows = np.array([angular_profile(law, d)[:: d // base] for d in levels])
    design = np.array([[1.0] + [float(d) ** -e for e in exps] for d in levels])
    lim = np.linalg.solve(design, rows)[0]
    lim = 0.5 * (lim + lim[::-1])
    lim = np.clip(lim, 0.0, None)
    lim[0] = lim[-1] = 0.0
    spline = CubicSpline(np.linspace(0.0, 1.0, base + 1), lim)
    a = np.clip(spline(np.linspace(0.0, 1.0, fine + 1)), 0.0, None)
    meta = {"levels": list(levels), "exponents": exps}
    return PhiProfile(alpha=law.alpha, a=_readonly(a), kind="limit", meta=meta)


def table_profile(law: RenewalLaw, m: int) -> PhiProfile:
    """Finite-resolution profile taken from the anti-diagonal |i| = m."""
    return PhiProfile(alpha=law.alpha, a=angular_profile(law, m), kind="table", meta={"m": int(m)})


def laplace_functional(profile: PhiProfile, mu: float, npts: int = 200001) -> float:
    """Gamma(alpha) * int_0^1 a(v) (v + mu (1 - v))^{-alpha} dv."""
    v = np.linspace(0.0, 1.0, npts)
    f = profile.angular(v) * (v + mu * (1.0 - v)) ** (-profile.alpha)
    return math.gamma(profile.alpha) * float(np.trapezoid(f, v))


def laplace_target(alpha: float, mu: float) -> float:
    """Value of the same functional implied by the Laplace exponent of the limit.

    For the power-law loop weight the Laplace exponent of the rescaled renewal
    is Gamma(1-a)/(a(1+a)) (l1^{1+a} - l2^{1+a})/(l1 - l2); homogeneity reduces
    the transform of phi to the functional above evaluated at (1, mu).
    """
    ratio = 1.0 / (1.0 + alpha) if abs(mu - 1.0) < 1e-12 else (1.0 - mu) / (1.0 - mu ** (1.0 + alpha))
    return alpha * (1.0 + alpha) / math.gamma(1.0 - alpha) * ratio


# ---------------------------------------------------------------------------
# marginals


def marginal_pmf(law: RenewalLaw, nmax: int) -> np.ndarray:
    """f(l) = sum_{l2 >= 1} K(l + l2) for l = 0..nmax (f(0) = 0)."""
    out = np.zeros(nmax + 1)
    if nmax >= 1:
        ls = np.arange(1, nmax + 1, dtype=float)
        out[1:] = law.L * hurwitz_zeta(2.0 + law.alpha, ls + 1.0)
    return out


@njit(cache=True)
def _mass_1d(f, n):
    u = np.zeros(n + 1)
    u[0] = 1.0
    for i in range(1, n + 1):
        acc = 0.0
        for l in range(1, i + 1):
            acc += f[l] * u[i - l]
        u[i] = acc
    return u


def marginal_mass(law: RenewalLaw, n: int) -> np.ndarray:
    """P(i in tau^(1)) for i = 0..n by the 1D renewal recursion."""
    return _mass_1d(marginal_pmf(law, n), int(n))


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray  # shape (k, 2), strictly increasing in both coordinates

    def __len__(self) -> int:
        return int(self.points.shape[0])


def _length_cdf(law: RenewalLaw, mmax: int) -> np.ndarray:
    pm = law.total_length_pmf(np.arange(mmax + 1))
    return np.cumsum(pm)


@njit(cache=True)
def _walk_box(cdf, n1, n2, unif, out):
    """Fill ``out`` with in-box renewal points; returns the count.

    Each step uses two uniforms: one for the total length by inverse CDF (mass
    beyond the box diameter means exit), one for the uniform split.
    """
    p1 = 0
    p2 = 0
    k = 0
    j = 0
    mmax = cdf.size - 1
    while True:
        u = unif[j]
        j += 1
        if u >= cdf[mmax]:
            return k
        m = np.searchsorted(cdf, u, side="right")
        l1 = 1 + int(unif[j] * (m - 1))
        j += 1
        if l1 > m - 1:
            l1 = m - 1
        p1 += l1
        p2 += m - l1
        if p1 > n1 or p2 > n2:
            return k
        out[k, 0] = p1
        out[k, 1] = p2
        k += 1


@njit(cache=True)
def _walk_line(cdf, n, unif, out):
    p = 0
    k = 0
    for j in range(unif.size):
        u = unif[j]
        if u >= cdf[n]:
            return k
        l = np.searchsorted(cdf, u, side="right")
        p += l
        if p > n:
            return k
        out[k] = p
        k += 1
    return k


def sample_renewal(law: RenewalLaw, box, seed) -> Trajectory:
    box = LatticeBox.of(box)
    rng = as_generator(seed)
    cdf = _length_cdf(law, box.n1 + box.n2)
    unif = rng.random(2 * min(box.n1, box.n2) + 2)
    out = np.zeros((min(box.n1, box.n2) + 1, 2), dtype=np.int64)
    k = _walk_box(cdf, box.n1, box.n2, unif, out)
    return Trajectory(out[:k].copy())


@njit(cache=True)
def _pair_counts(cdf, n1, n2, unif_a, unif_b, buf_a, buf_b, counts):
    reps = unif_a.shape[0]
    for r in range(reps):
        ka = _walk_box(cdf, n1, n2, unif_a[r], buf_a)
        kb = _walk_box(cdf, n1, n2, unif_b[r], buf_b)
        i = 0
        j = 0
        c = 0
        while i < ka and j < kb:
            if buf_a[i, 0] < buf_b[j, 0]:
                i += 1
            elif buf_a[i, 0] > buf_b[j, 0]:
                j += 1
            else:
                if buf_a[i, 1] == buf_b[j, 1]:
                    c += 1
                i += 1
                j += 1
        counts[r] = c


@njit(cache=True)
def _line_counts(cdf, n, unif_a, unif_b, buf_a, buf_b, counts):
    reps = unif_a.shape[0]
    for r in range(reps):
        ka = _walk_line(cdf, n, unif_a[r], buf_a)
        kb = _walk_line(cdf, n, unif_b[r], buf_b)
        i = 0
        j = 0
        c = 0
        while i < ka and j < kb:
            if buf_a[i] < buf_b[j]:
                i += 1
            elif buf_a[i] > buf_b[j]:
                j += 1
            else:
                c += 1
                i += 1
                j += 1
        counts[r] = c


@dataclass
class IntersectionSummary:
    reps: int
    box: LatticeBox
    tau_counts: np.ndarray  # |tau cap tau' cap box| per replica (origin excluded)
    rho_counts: tuple[np.ndarray, np.ndarray]  # per axis
    U: tuple[float, float]  # exact expected occupation of rho per axis
    geometric_fit: dict
    moments: dict  # k -> (estimate, se) of E[(|rho|/U)^k], axis 1
    gamma_check: dict
    beta_moments: dict | None = None

    def tail(self) -> np.ndarray:
        counts = np.bincount(self.tau_counts)
        return self.reps - np.cumsum(counts)


def _geometric_fit(counts: np.ndarray, min_count: int = 100) -> dict:
    n = counts.size
    hist = np.bincount(counts)
    exceed = n - np.cumsum(hist)  # #(N > k)
    ks = np.nonzero(exceed >= min_count)[0]
    if ks.size < 2:
        return {"ks": ks.tolist(), "slope": float("nan"), "intercept": float("nan"), "r2": float("nan")}
    y = np.log(exceed[ks] / n)
    slope, intercept = np.polyfit(ks, y, 1)
    resid = y - (slope * ks + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return {"ks": ks.tolist(), "slope": float(slope), "intercept": float(intercept), "r2": r2}


def _gamma_growth(x: np.ndarray, moments: dict, rho: float, min_count: int = 100) -> dict:
    """Tail fit P(X >= t) <= exp(-c t^{1/rho}) on t >= 1, then the implied moment bound.

    c is the largest constant compatible with the empirical tail wherever at
    least ``min_count`` samples exceed t; integrating the tail bound gives
    E[X^k] <= 1 + k rho c^{-k rho} Gamma(k rho) =: B_k, and C_k = (B_k / Gamma(k rho))^{1/k}.
    """
    xs = np.sort(x)
    n = xs.size
    ts = np.unique(xs[xs >= 1.0])
    exceed = n - np.searchsorted(xs, ts, side="left")
    keep = exceed >= min_count
    if not np.any(keep):
        return {"c": float("nan"), "rho": rho, "bounds": {}, "C": float("nan"), "holds": False}
    c = float(np.min(-np.log(exceed[keep] / n) / ts[keep] ** (1.0 / rho)))
    bounds = {}
    for k in moments:
        bounds[k] = 1.0 + k * rho * c ** (-k * rho) * math.gamma(k * rho)
    C = max((bounds[k] / math.gamma(k * rho)) ** (1.0 / k) for k in bounds)
    holds = all(moments[k][0] <= C**k * math.gamma(k * rho) for k in moments)
    return {"c": c, "rho": rho, "bounds": bounds, "C": C, "holds": bool(holds)}


def intersection_stats(
    law: RenewalLaw,
    box,
    reps: int,
    seed: int,
    *,
    k_max: int = 6,
    beta: float | None = None,
    r: int = 1,
    chunk: int | None = None,
) -> IntersectionSummary:
    """Intersection statistics of two independent renewals.

    The projections' intersections rho^(a) are sampled from the exact 1D
    marginal renewals (the projection of a bivariate renewal is a 1D renewal
    with inter-arrival law ``marginal_pmf``).
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    box = LatticeBox.of(box)
    n1, n2 = box.n1, box.n2
    cdf2 = _length_cdf(law, n1 + n2)
    tau = np.zeros(reps, dtype=np.int64)
    rho = (np.zeros(reps, dtype=np.int64), np.zeros(reps, dtype=np.int64))
    lines = []
    for axis, n in enumerate((n1, n2)):
        lines.append(np.cumsum(marginal_pmf(law, n)))
    steps = 2 * min(n1, n2) + 2
    if chunk is None:
        chunk = max(256, min(20000, 4_000_000 // (steps + max(n1, n2))))
    for c0 in range(0, reps, chunk):
        c1 = min(reps, c0 + chunk)
        rng = stream(seed, "renewal", "intersection_stats", c0 // chunk)
        ua = rng.random((c1 - c0, steps))
        ub = rng.random((c1 - c0, steps))
        buf_a = np.zeros((min(n1, n2) + 1, 2), dtype=np.int64)
        buf_b = np.zeros_like(buf_a)
        _pair_counts(cdf2, n1, n2, ua, ub, buf_a, buf_b, tau[c0:c1])
        for axis, n in enumerate((n1, n2)):
            la = rng.random((c1 - c0, n + 1))
            lb = rng.random((c1 - c0, n + 1))
            ba = np.zeros(n + 1, dtype=np.int64)
            bb = np.zeros(n + 1, dtype=np.int64)
            _line_counts(lines[axis], n, la, lb, ba, bb, rho[axis][c0:c1])
    U = tuple(float(np.sum(marginal_mass(law, n)[1:] ** 2)) for n in (n1, n2))
    x = rho[0] / U[0]
    moments = {}
    for k in range(1, k_max + 1):
        xk = x**k
        moments[k] = (float(xk.mean()), float(xk.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0)
    gamma = 2.0 * law.alpha - 1.0
    rho_exp = 1.0 - gamma + 0.5 * gamma if gamma > 0 else 1.0
    check = _gamma_growth(x, moments, rho_exp)
    beta_moments = None
    if beta is not None:
        y = (float(beta) ** (2 * r)) * rho[0]
        beta_moments = {k: float(np.mean(y**k)) for k in range(1, k_max + 1)}
    return IntersectionSummary(
        reps=reps,
        box=box,
        tau_counts=tau,
        rho_counts=rho,
        U=U,
        geometric_fit=_geometric_fit(tau),
        moments=moments,
        gamma_check=check,
        beta_moments=beta_moments,
    )

"""Finite-support disorder laws with a symmetric interaction.

Disorder at site ``(i1, i2)`` is ``omega = V(omega_hat[i1], omega_bar[i2])``
where both sequences are i.i.d. with the same finite marginal.  Everything
needed downstream (log-mgf, conditional moments, correlations of the
centered weights ``zeta = exp(beta omega - lambda) - 1``) is computed by
exact enumeration over the support.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .seeding import as_generator

__all__ = [
    "DisorderSpec",
    "Classification",
    "DisorderSample",
    "SpecError",
    "make_spec",
    "load_spec",
    "spec_from_dict",
    "rademacher_product",
    "designed_r1_law",
    "appendix_c_law",
    "log_mgf",
    "conditional_moment_variance",
    "conditional_moments",
    "classify_r",
    "two_point_correlation",
    "multi_correlation",
    "sample_fields",
]

INFINITY = "infinity-certificate"
UNDETERMINED = "undetermined"


class SpecError(ValueError):
    """Invalid disorder specification."""


@dataclass(frozen=True)
class DisorderSpec:
    """Marginal law on ``atoms`` and the interaction matrix V[a, b] = V(atoms[a], atoms[b])."""

    atoms: np.ndarray
    probs: np.ndarray
    V: np.ndarray
    interaction: str
    params: tuple = ()
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def size(self) -> int:
        return int(self.atoms.size)

    def mean(self) -> float:
        return math.fsum((self.probs[:, None] * self.probs[None, :] * self.V).ravel())

    def variance(self) -> float:
        """sigma^2 = Var(omega) under the product law."""
        mu = self.mean()
        w = self.probs[:, None] * self.probs[None, :]
        return math.fsum((w * (self.V - mu) ** 2).ravel())

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.V)))

    def to_dict(self) -> dict:
        d = {"marginal": [[float(a), float(p)] for a, p in zip(self.atoms, self.probs)]}
        if self.interaction == "product":
            d["interaction"] = "product"
        elif self.interaction == "appendix_c":
            d["interaction"] = {"appendix_c": list(self.params)}
        else:
            d["interaction"] = {"table": self.V.tolist()}
        return d


def _ro(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def make_spec(atoms, probs, interaction="product", table=None, params=(), meta=None) -> DisorderSpec:
    atoms = np.asarray(atoms, dtype=float).ravel()
    probs = np.asarray(probs, dtype=float).ravel()
    if atoms.size == 0 or atoms.size != probs.size:
        raise SpecError("marginal needs matching, non-empty atom and probability lists")
    if not np.all(np.isfinite(atoms)) or np.unique(atoms).size != atoms.size:
        raise SpecError("atoms must be finite and distinct")
    if np.any(probs <= 0) or not np.all(np.isfinite(probs)):
        raise SpecError("probabilities must be positive")
    if abs(math.fsum(probs) - 1.0) > 1e-14:
        raise SpecError(f"probabilities sum to {math.fsum(probs)!r}, not 1")
    if interaction == "product":
        V = np.outer(atoms, atoms)
    elif interaction in ("table", "appendix_c"):
        if table is None:
            raise SpecError("table interaction needs a matrix")
        V = np.asarray(table, dtype=float)
        if V.shape != (atoms.size, atoms.size):
            raise SpecError("interaction table must be support x support")
        if not np.array_equal(V, V.T):
            raise SpecError("interaction table must be symmetric")
    else:
        raise SpecError(f"unknown interaction {interaction!r}")
    if np.ptp(V) == 0.0:
        raise SpecError("V is constant on the support")
    return DisorderSpec(_ro(atoms), _ro(probs), _ro(V), interaction, tuple(params), dict(meta or {}))


def spec_from_dict(d: dict) -> DisorderSpec:
    """Build a spec from the parsed config layout (``marginal`` / ``interaction`` keys)."""
    inter = d.get("interaction", "product")
    if isinstance(inter, dict) and "appendix_c" in inter:
        a, b = inter["appendix_c"]
        return appendix_c_law(float(a), float(b))
    if "marginal" not in d:
        raise SpecError("missing 'marginal'")
    try:
        pairs = [(float(a), float(p)) for a, p in d["marginal"]]
    except (TypeError, ValueError) as exc:
        raise SpecError(f"malformed marginal: {exc}") from None
    atoms = [a for a, _ in pairs]
    probs = [p for _, p in pairs]
    if inter == "product":
        return make_spec(atoms, probs)
    if isinstance(inter, dict) and "table" in inter:
        return make_spec(atoms, probs, "table", inter["table"])
    raise SpecError(f"unknown interaction {inter!r}")


def load_spec(path) -> DisorderSpec:
    import tomli

    with Path(path).open("rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise SpecError(f"cannot parse {path}: {exc}") from None
    if "disorder" in data and isinstance(data["disorder"], dict):
        data = data["disorder"]
    return spec_from_dict(data)


def rademacher_product() -> DisorderSpec:
    return make_spec([-1.0, 1.0], [0.5, 0.5])


def designed_r1_law() -> DisorderSpec:
    """Rademacher marginal with V(x, y) = (x + y) / 4.

    Here E[omega | omega_hat] = omega_hat / 4, so r = 1 with sigma_1^2 = 1/16 and
    sigma^2 = 1/8.  The aligned correlation is tanh(beta/4)^2, which is
    beta^2 sigma_1^2 up to a relative O(beta^2) correction.
    """
    return make_spec([-1.0, 1.0], [0.5, 0.5], "table", [[-0.5, 0.0], [0.0, 0.5]])


def appendix_c_law(a: float, b: float) -> DisorderSpec:
    """Eight-atom law with V(x, y) = x f(y) + y f(x) and x^2 + f(x)^2 = 2.

    f sends sqrt(a) -> sqrt(2-a) and sqrt(2-a) -> -sqrt(a) (same for b, odd in x),
    so f(f(x)) = -x.
    """
    if not (0.0 < a < 1.0 and 0.0 < b < 1.0):
        raise SpecError("appendix_c needs 0 < a, b < 1")
    if not a < b:
        raise SpecError("appendix_c needs a < b")
    sa, sb, ta, tb = math.sqrt(a), math.sqrt(b), math.sqrt(2 - a), math.sqrt(2 - b)
    atoms = [sa, -sa, sb, -sb, ta, -ta, tb, -tb]
    image = [ta, -ta, tb, -tb, -sa, sa, -sb, sb]
    x = np.array(atoms)
    f = np.array(image)
    V = np.outer(x, f) + np.outer(f, x)
    V = 0.5 * (V + V.T)  # exact already; guards the symmetry check against rounding
    u, v = a * (2 - a), b * (2 - b)
    meta = {"u": u, "v": v, "discriminant": 8.0 * (u - v) * (u + v - 1.0), "f": dict(zip(atoms, image))}
    return make_spec(atoms, [0.125] * 8, "appendix_c", V, params=(a, b), meta=meta)


# ---------------------------------------------------------------------------
# exact moment machinery


def log_mgf(spec: DisorderSpec, beta: float) -> float:
    """lambda(beta) = log E[exp(beta omega)] by log-sum-exp over support pairs."""
    if beta == 0:
        return 0.0
    w = np.log(spec.probs)[:, None] + np.log(spec.probs)[None, :]
    return float(logsumexp(w + float(beta) * spec.V))


def conditional_moments(spec: DisorderSpec, k: int, axis: int = 0) -> np.ndarray:
    """m_k(x) = E[V(x, Y)^k] for every atom x (compensated sums)."""
    V = spec.V if axis == 0 else spec.V.T
    p = spec.probs
    Vk = V**k
    return np.array([math.fsum(p * Vk[a]) for a in range(spec.size)])


def _weighted_cov(p: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    mx = math.fsum(p * x)
    my = math.fsum(p * y)
    return math.fsum(p * (x - mx) * (y - my))


def conditional_moment_variance(spec: DisorderSpec, k: int) -> float:
    """Var(E[omega^k | omega_hat])."""
    if k < 1:
        raise ValueError("k must be >= 1")
    m = conditional_moments(spec, k)
    return max(_weighted_cov(spec.probs, m, m), 0.0)


@dataclass(frozen=True)
class Classification:
    r: int | str
    sigma_r_sq: float | None
    sigma_sq: float
    variance_trace: list
    certificate: dict | None = None

    @property
    def finite(self) -> bool:
        return isinstance(self.r, int)

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "sigma_r_sq": self.sigma_r_sq,
            "sigma_sq": self.sigma_sq,
            "variance_trace": list(self.variance_trace),
            "certificate": self.certificate,
        }


def _certificate(spec: DisorderSpec, betas=(0.1, 0.2, 0.5), tol=1e-10) -> dict:
    spread = {}
    for b in betas:
        g = np.exp(b * spec.V) @ spec.probs
        spread[b] = float(np.ptp(g) / np.mean(g))
    return {"betas": list(betas), "relative_spread": list(spread.values()), "holds": all(s <= tol for s in spread.values())}


def classify_r(spec: DisorderSpec, r_max: int = 12, tol: float = 1e-10) -> Classification:
    """Smallest k with Var(E[omega^k | omega_hat]) / sigma^{2k} > tol."""
    if r_max < 1:
        raise ValueError("r_max must be >= 1")
    if np.ptp(spec.V) == 0.0:
        raise SpecError("V is constant on the support")
    s2 = spec.variance()
    trace = []
    for k in range(1, r_max + 1):
        var = conditional_moment_variance(spec, k)
        trace.append(var)
        if var / s2**k > tol:
            return Classification(k, var / math.factorial(k) ** 2, s2, trace)
    cert = _certificate(spec)
    r = INFINITY if cert["holds"] else UNDETERMINED
    return Classification(r, None, s2, trace, cert)


# ---------------------------------------------------------------------------
# correlations of zeta


def _aligned_series(spec: DisorderSpec, beta: float, axis: int, k_cap: int = 400) -> tuple[float, dict]:
    """Var_X(E_Y exp(beta V(X, Y))) as sum_K beta^K/K! sum_j C(K, j) Cov(m_j, m_{K-j})."""
    p = spec.probs
    M = spec.max_abs()
    s2 = spec.variance()
    q = 2.0 * beta * M
    moms = [np.ones(spec.size)]
    total = []
    lead = 0.0
    log_fact = 0.0
    info = {"terms": 0, "remainder": 0.0}
    for K in range(1, k_cap + 1):
        moms.append(conditional_moments(spec, K, axis))
        log_fact += math.log(K)
        s = math.fsum(math.comb(K, j) * _weighted_cov(p, moms[j], moms[K - j]) for j in range(1, K))
        term = s * math.exp(K * math.log(beta) - log_fact) if beta > 0 else 0.0
        total.append(term)
        if lead == 0.0 and abs(term) > 1e-300:
            # the first K whose covariances are not rounding noise
            if abs(s) > 1e-10 * s2 ** (K / 2):
                lead = abs(term)
        # tail bound: sum_{K' > K} q^{K'}/K'!
        if q == 0.0:
            rem = 0.0
        else:
            lrem = (K + 1) * math.log(q) - (log_fact + math.log(K + 1))
            ratio = q / (K + 2)
            rem = math.exp(lrem) / (1.0 - ratio) if ratio < 1 else math.inf
        info = {"terms": K, "remainder": rem}
        # the loosest acceptable stop is 1e-3 of the leading term; we go to
        # double precision of the running sum since the extra terms are cheap
        if lead > 0 and rem < 1e-16 * abs(math.fsum(total)) and K >= 4:
            break
        if lead == 0.0 and rem < 1e-300:
            break
    return math.fsum(total), info


def two_point_correlation(
    spec: DisorderSpec, beta: float, relation: str = "aligned-distinct", axis: str = "row", details: bool = False
):
    """E[zeta_i zeta_j] for ``equal``, ``aligned-distinct`` or ``non-aligned`` points.

    ``axis`` says which strand carries the shared coordinate (``row`` shares
    omega_hat, ``column`` shares omega_bar).
    """
    beta = float(beta)
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if relation == "non-aligned":
        out, info = 0.0, {"method": "factorization"}
    elif relation == "equal":
        out = math.expm1(log_mgf(spec, 2 * beta) - 2 * log_mgf(spec, beta))
        info = {"method": "closed-form"}
    elif relation == "aligned-distinct":
        if axis not in ("row", "column"):
            raise ValueError("axis must be 'row' or 'column'")
        var, info = _aligned_series(spec, beta, 0 if axis == "row" else 1)
        out = math.exp(-2.0 * log_mgf(spec, beta)) * var
        info = dict(info, method="series")
    else:
        raise ValueError(f"unknown relation {relation!r}")
    return (out, info) if details else out


def _components(points: list[tuple[int, int]]) -> list[list[int]]:
    parent = list(range(len(points)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(len(points)):
        for b in range(a + 1, len(points)):
            if points[a][0] == points[b][0] or points[a][1] == points[b][1]:
                parent[find(a)] = find(b)
    groups: dict[int, list[int]] = {}
    for a in range(len(points)):
        groups.setdefault(find(a), []).append(a)
    return list(groups.values())


_LETTERS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"


def multi_correlation(spec: DisorderSpec, beta: float, index_set, exponents=None) -> float:
    """E[prod_p zeta_{i_p}^{q_p}] by exact contraction over distinct rows and columns.

    The expectation factorizes over connected components of the alignment
    graph; a component made of one point with q = 1 contributes exactly 0.
    """
    pts = [(int(a), int(b)) for a, b in index_set]
    qs = [1] * len(pts) if exponents is None else [int(q) for q in exponents]
    if len(qs) != len(pts):
        raise ValueError("one exponent per point")
    if len(pts) > 6:
        raise ValueError("at most 6 points")
    # merge repeated points
    merged: dict[tuple[int, int], int] = {}
    for p, q in zip(pts, qs):
        if q < 0:
            raise ValueError("exponents must be >= 0")
        merged[p] = merged.get(p, 0) + q
    pts = [p for p, q in merged.items() if q > 0]
    qs = [merged[p] for p in pts]
    if not pts:
        return 1.0
    if len({p[0] for p in pts}) + len({p[1] for p in pts}) > 8:
        raise ValueError("more than 8 distinct rows and columns")
    lam = log_mgf(spec, beta)
    zeta = np.expm1(beta * spec.V - lam)
    p = spec.probs
    out = 1.0
    for comp in _components(pts):
        if len(comp) == 1 and qs[comp[0]] == 1:
            return 0.0
        rows = sorted({pts[c][0] for c in comp})
        cols = sorted({pts[c][1] for c in comp})
        lr = {r: _LETTERS[i] for i, r in enumerate(rows)}
        lc = {c: _LETTERS[len(rows) + i] for i, c in enumerate(cols)}
        ops, subs = [], []
        for r in rows:
            ops.append(p)
            subs.append(lr[r])
        for c in cols:
            ops.append(p)
            subs.append(lc[c])
        for c in comp:
            ops.append(zeta ** qs[c])
            subs.append(lr[pts[c][0]] + lc[pts[c][1]])
        expr = ",".join(subs) + "->"
        out *= float(np.einsum(expr, *ops, optimize="greedy"))
    return out


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class DisorderSample:
    """Index draws for the two strands; omega is looked up from V on demand."""

    spec: DisorderSpec
    hat_idx: np.ndarray
    bar_idx: np.ndarray
    beta: float
    lambda_beta: float

    @property
    def omega_hat(self) -> np.ndarray:
        return self.spec.atoms[self.hat_idx]

    @property
    def omega_bar(self) -> np.ndarray:
        return self.spec.atoms[self.bar_idx]

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.hat_idx.size), int(self.bar_idx.size)

    def omega(self, i1: int, i2: int) -> float:
        """Disorder at lattice site (i1, i2), 1-based."""
        return float(self.spec.V[self.hat_idx[i1 - 1], self.bar_idx[i2 - 1]])

    def omega_block(self, n1: int | None = None, n2: int | None = None) -> np.ndarray:
        n1 = self.shape[0] if n1 is None else n1
        n2 = self.shape[1] if n2 is None else n2
        return self.spec.V[np.ix_(self.hat_idx[:n1], self.bar_idx[:n2])]

    def zeta(self, n1: int | None = None, n2: int | None = None) -> np.ndarray:
        if self.beta == 0.0:
            n1 = self.shape[0] if n1 is None else n1
            n2 = self.shape[1] if n2 is None else n2
            return np.zeros((n1, n2))
        z = np.expm1(self.beta * self.spec.V - self.lambda_beta)
        n1 = self.shape[0] if n1 is None else n1
        n2 = self.shape[1] if n2 is None else n2
        return z[np.ix_(self.hat_idx[:n1], self.bar_idx[:n2])]

    def log_weights(self, n1: int, n2: int, h: float = 0.0) -> np.ndarray:
        """(n1+1) x (n2+1) array of beta omega - lambda + h, padded with a zero row/column."""
        out = np.zeros((n1 + 1, n2 + 1))
        out[1:, 1:] = self.beta * self.omega_block(n1, n2) - self.lambda_beta + h
        return out


def sample_fields(spec: DisorderSpec, n1: int, n2: int, beta: float, seed) -> DisorderSample:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    rng = as_generator(seed)
    hat = rng.choice(spec.size, size=int(n1), p=spec.probs)
    bar = rng.choice(spec.size, size=int(n2), p=spec.probs)
    hat.setflags(write=False)
    bar.setflags(write=False)
    return DisorderSample(spec, hat, bar, float(beta), log_mgf(spec, beta))

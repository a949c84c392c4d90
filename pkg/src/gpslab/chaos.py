"""Covariance-measure integrals and chaos norms.

The covariance measure of the limit field charges pairs of points that share
one coordinate, so

    <g, h>_nu = int g(u) [int h(x, u2) dx + int h(u1, y) dy] du.

For k >= 2 the product measure pairs every point u_j of one block with a point
v_i of the other block aligned with it; only permutations avoiding the
pattern 321 give pairings that are compatible with both orderings.  Each
admissible (permutation, mask) term is written as

    int F_u(P) F_v(P) dP

where P collects the k shared coordinates and F_u, F_v integrate the kernel
over the remaining coordinate of each point.  Every domain that appears is a
product of ordered simplices, handled by stick-breaking maps with graded
Gauss-Legendre rules in each unit variable.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from ._kernels import chain_integral
from .renewal import PhiProfile, RenewalLaw, mass_function, surrogate_profile
from .seeding import stream

__all__ = [
    "DivergenceError",
    "QuadSpec",
    "QuadResult",
    "ChaosKernel",
    "NuNorm",
    "PairingSet",
    "graded_rule",
    "nu_pair_integral",
    "avoiding_permutations",
    "admissible",
    "admissible_lp",
    "psi_norm_k",
    "gamma_bound_constant",
    "gamma_bound",
    "c_tka",
    "HomogeneousSeries",
    "majorant",
    "profile_sup",
    "continuum_homogeneous",
    "discrete_phi_table",
    "field_increments",
    "discrete_iterated_integral",
    "tilde_z_factor",
    "tilde_z_direct",
    "chaos_variance_series",
    "orthogonality_check",
    "tilde_z1_mc",
    "tilde_z1_variance",
]

ROW, COLUMN = 0, 1  # shared coordinate of an aligned pair: first (row) or second (column)


class DivergenceError(ArithmeticError):
    """Quadrature values keep growing under refinement."""

    def __init__(self, msg: str, history=()):
        super().__init__(msg)
        self.history = list(history)


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadSpec:
    """Level l uses ``layers_per_level * l`` geometric layers at each end of (0, 1)."""

    levels: tuple[int, ...] = (2, 3, 4, 5)
    layers_per_level: int = 4
    grading: float = 2.0
    order: int = 4

    def layers(self, level: int) -> int:
        return self.layers_per_level * int(level)

    @classmethod
    def from_dict(cls, d: dict) -> "QuadSpec":
        kw = {}
        if "levels" in d:
            lv = d["levels"]
            kw["levels"] = tuple(range(1, int(lv) + 1)) if isinstance(lv, int) else tuple(int(x) for x in lv)
        if "grading" in d:
            kw["grading"] = float(d["grading"])
        if "order" in d:
            kw["order"] = int(d["order"])
        if "layers_per_level" in d:
            kw["layers_per_level"] = int(d["layers_per_level"])
        return cls(**kw)


@lru_cache(maxsize=64)
def graded_rule(layers: int, order: int = 4, ratio: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule on (0, 1), panels shrinking by ``ratio`` toward both ends."""
    if layers < 1:
        raise ValueError("need at least one layer")
    x, w = np.polynomial.legendre.leggauss(order)
    left = [ratio ** (-j) for j in range(layers, 0, -1)]
    if left[-1] != 0.5:
        left.append(0.5)
    b = np.array([0.0] + left[:-1] + [0.5] + [1.0 - ratio ** (-j) for j in range(2, layers + 1)] + [1.0])
    b = np.unique(b)
    lo, hi = b[:-1], b[1:]
    nodes = (0.5 * (hi - lo)[:, None] * x[None, :] + 0.5 * (hi + lo)[:, None]).ravel()
    wts = (0.5 * (hi - lo)[:, None] * w[None, :]).ravel()
    nodes.setflags(write=False)
    wts.setflags(write=False)
    return nodes, wts


@dataclass(frozen=True)
class QuadResult:
    value: float
    abserr: float
    history: tuple[float, ...]
    converged: bool


def _refine(values: list[float], what: str) -> QuadResult:
    v = values[-1]
    if len(values) < 2:
        return QuadResult(v, float("nan"), tuple(values), False)
    prev = values[-2]
    growth = (v - prev) / abs(prev) if prev != 0 else 0.0
    if growth > 0.10:
        raise DivergenceError(f"{what}: value grows by {growth:.1%} at the finest refinement", values)
    err = abs(v - prev)
    return QuadResult(v, err, tuple(values), err <= 0.01 * abs(v))


def nu_pair_integral(g, h, t=(1.0, 1.0), quad: QuadSpec | None = None) -> QuadResult:
    """<g, h>_nu on [0, t] by graded tensor quadrature.

    ``g`` and ``h`` are vectorized callables ``f(s1, s2)``.  Raises
    DivergenceError when the finest refinement still increases the value by
    more than 10%.
    """
    quad = quad or QuadSpec()
    t1, t2 = float(t[0]), float(t[1])
    vals = []
    for lev in quad.levels:
        x, w = graded_rule(quad.layers(lev), quad.order, quad.grading)
        x1, w1 = x * t1, w * t1
        x2, w2 = x * t2, w * t2
        X, Y = np.meshgrid(x1, x2, indexing="ij")
        G = np.asarray(g(X, Y), dtype=float)
        H = G if h is g else np.asarray(h(X, Y), dtype=float)
        along1 = w1 @ H  # int h(x, y) dx, as a function of y
        along2 = H @ w2  # int h(x, y) dy, as a function of x
        vals.append(float(w1 @ (G * (along1[None, :] + along2[:, None])) @ w2))
    return _refine(vals, "nu pair integral")


# ---------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class ChaosKernel:
    """psi(s_1..s_k) = prod phi(s_i - s_{i-1}) with s_0 = 0, s_{k+1} = t.

    ``cond`` divides by phi(t), ``free`` drops the last factor and
    ``h-dressed`` uses the continuum homogeneous partition function in place
    of phi.  ``profile`` defaults to the power-law surrogate.
    """

    alpha: float
    t: tuple[float, float] = (1.0, 1.0)
    k: int = 1
    variant: str = "q"
    profile: PhiProfile | None = None
    h_hat: float = 0.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.variant not in ("q", "cond", "free", "h-dressed"):
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("chaos kernels need alpha in (0, 1)")
        object.__setattr__(self, "t", (float(self.t[0]), float(self.t[1])))

    @property
    def prof(self) -> PhiProfile:
        return self.profile if self.profile is not None else surrogate_profile(self.alpha)

    @property
    def source(self) -> str:
        return self.prof.kind

    def with_k(self, k: int) -> "ChaosKernel":
        return ChaosKernel(self.alpha, self.t, int(k), self.variant, self.profile, self.h_hat)

    def _dressed(self) -> "HomogeneousSeries":
        hs = self._cache.get("dressed")
        if hs is None:
            hs = HomogeneousSeries.build(self.alpha, self.h_hat, self.prof)
            self._cache["dressed"] = hs
        return hs

    def phi(self, d1, d2) -> np.ndarray:
        if self.variant == "h-dressed":
            return self._dressed()(d1, d2)
        return self.prof(d1, d2)

    def _chain(self, pts: np.ndarray) -> np.ndarray:
        """Kernel on points of shape (..., k, 2); zero off the increasing simplex."""
        t = np.array(self.t)
        prev = np.zeros(pts.shape[:-2] + (2,))
        out = np.ones(pts.shape[:-2])
        ok = np.ones(pts.shape[:-2], dtype=bool)
        for j in range(pts.shape[-2]):
            d = pts[..., j, :] - prev
            ok &= (d[..., 0] > 0) & (d[..., 1] > 0)
            out = out * self.phi(d[..., 0], d[..., 1])
            prev = pts[..., j, :]
        if self.variant != "free":
            d = t - prev
            ok &= (d[..., 0] > 0) & (d[..., 1] > 0)
            out = out * self.phi(d[..., 0], d[..., 1])
        if self.variant == "cond":
            out = out / float(self.phi(np.array(self.t[0]), np.array(self.t[1])))
        return np.where(ok, out, 0.0)

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.shape[-2:] != (self.k, 2):
            raise ValueError(f"points must have trailing shape ({self.k}, 2)")
        return self._chain(pts)

    def one_point(self):
        """The k = 1 kernel as a callable of (s1, s2), for nu_pair_integral."""
        kk = self.with_k(1)
        return lambda s1, s2: kk._chain(np.stack([s1, s2], axis=-1)[..., None, :])


@dataclass(frozen=True)
class NuNorm:
    k: int
    value: float
    abserr: float
    method: str
    flagged: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def to_dict(self, gamma_bound: float | None = None) -> dict:
        out = {"k": self.k, "value": self.value, "abserr": self.abserr, "method": self.method}
        if gamma_bound is not None:
            out["gamma_bound"] = gamma_bound
            out["pass"] = bool(self.value <= gamma_bound)
        return out


# ---------------------------------------------------------------------------
# pairings


def _avoids_321(p) -> bool:
    k = len(p)
    for i in range(k):
        for j in range(i + 1, k):
            if p[j] < p[i]:
                for m in range(j + 1, k):
                    if p[m] < p[j]:
                        return False
    return True


def _axis_orders(perm0, mask):
    k = len(perm0)
    inv = [0] * k
    for i, j in enumerate(perm0):
        inv[j] = i
    a_u = [mask[inv[j]] for j in range(k)]
    u_order = [[j for j in range(k) if a_u[j] == b] for b in (0, 1)]
    v_order = [[perm0[i] for i in range(k) if mask[i] == b] for b in (0, 1)]
    return a_u, u_order, v_order


def admissible(perm, mask) -> bool:
    """Whether some u_1 < ... < u_k and v_1 < ... < v_k realize the pairing.

    ``perm`` is 1-based (v_i is aligned with u_perm[i]); ``mask[i]`` is ROW
    or COLUMN.  The shared coordinates on each axis must come in the same
    order along both chains; the free coordinates can always be slotted in.
    """
    perm0 = tuple(int(p) - 1 for p in perm)
    _, u_order, v_order = _axis_orders(perm0, mask)
    return u_order == v_order


def admissible_lp(perm, mask, t=(1.0, 1.0)) -> bool:
    """Same question answered by a linear program on all 3k coordinates."""
    from scipy.optimize import linprog

    k = len(perm)
    perm0 = [int(p) - 1 for p in perm]
    inv = [0] * k
    for i, j in enumerate(perm0):
        inv[j] = i
    # variables: u (2k), free coordinate of v_i (k), margin eps
    nv = 3 * k + 1

    def ucoord(j, b):
        return 2 * j + b

    def vcoord(i, b):
        if mask[i] == b:
            return ucoord(perm0[i], b)
        return 2 * k + i

    rows, rhs = [], []

    def less(a, b_):  # x_a + eps <= x_b
        r = np.zeros(nv)
        if a is not None:
            r[a] += 1.0
        if b_ is not None:
            r[b_] -= 1.0
        r[-1] = 1.0
        return r

    for b in (0, 1):
        for coord in (ucoord, vcoord):
            seq = [coord(j, b) for j in range(k)]
            prev = None
            for c in seq:
                row = less(prev, c)
                rows.append(row)
                rhs.append(0.0)
                prev = c
            r = less(prev, None)
            rows.append(r)
            rhs.append(float(t[b]))
    res = linprog(
        c=np.r_[np.zeros(nv - 1), -1.0],
        A_ub=np.array(rows),
        b_ub=np.array(rhs),
        bounds=[(0, None)] * (nv - 1) + [(None, 1.0)],
        method="highs",
    )
    return bool(res.status == 0 and -res.fun > 1e-9)


@dataclass(frozen=True)
class PairingSet:
    k: int
    permutations: tuple[tuple[int, ...], ...]
    row_col_masks: dict

    def terms(self):
        for p in self.permutations:
            for m in self.row_col_masks[p]:
                yield p, m

    def __len__(self) -> int:
        return len(self.permutations)


def avoiding_permutations(k: int) -> PairingSet:
    """Permutations of 1..k with no decreasing subsequence of length 3."""
    if not 1 <= k <= 8:
        raise ValueError("k must be in 1..8")
    perms = tuple(p for p in itertools.permutations(range(1, k + 1)) if _avoids_321(p))
    masks = {p: tuple(m for m in itertools.product((ROW, COLUMN), repeat=k) if admissible(p, m)) for p in perms}
    return PairingSet(k, perms, masks)


# ---------------------------------------------------------------------------
# (permutation, mask) terms


def _stick(lo, hi, w):
    """Ordered points lo < x_1 < ... < x_m < hi from unit variables w[..., m]."""
    xs, jac = [], np.ones(np.broadcast_shapes(np.shape(lo), w.shape[:-1]))
    cur = lo
    for i in range(w.shape[-1]):
        span = hi - cur
        jac = jac * span
        cur = cur + span * w[..., i]
        xs.append(cur)
    return xs, jac


def _chain_layout(k, pinned, n_free_axis):
    """Walk one chain: ``pinned[b]`` maps chain position -> P index on axis b."""
    runs = []  # (axis, [free ids], left P index or None, right P index or None)
    for b in (0, 1):
        cur, left = [], None
        for pos in range(k):
            if pos in pinned[b]:
                if cur:
                    runs.append((b, cur, left, pinned[b][pos]))
                    cur = []
                left = pinned[b][pos]
            else:
                cur.append(pos)
        if cur:
            runs.append((b, cur, left, None))
    return runs


class _Term:
    """Geometry of one admissible (permutation, mask) pairing."""

    def __init__(self, perm, mask, k):
        perm0 = tuple(int(p) - 1 for p in perm)
        self.perm, self.mask, self.k = tuple(perm), tuple(mask), k
        a_u, u_order, v_order = _axis_orders(perm0, mask)
        if u_order != v_order:
            raise ValueError("pairing is not admissible")
        self.a_u = a_u
        self.p_axis_order = u_order  # P indices per axis, increasing
        self.u_pin = [{j: j for j in range(k) if a_u[j] == b} for b in (0, 1)]
        self.v_pin = [{i: perm0[i] for i in range(k) if mask[i] == b} for b in (0, 1)]
        self.v_axis = [mask[i] for i in range(k)]
        self.v_ref = perm0
        self.u_runs = _chain_layout(k, self.u_pin, None)
        self.v_runs = _chain_layout(k, self.v_pin, None)
        self.symmetric = self.u_runs == self.v_runs and perm0 == tuple(range(k))

    # P nodes on the product of per-axis simplices
    def p_nodes(self, w, t):
        P = np.empty(w.shape[:-1] + (self.k,))
        jac = np.ones(w.shape[:-1])
        col = 0
        for b in (0, 1):
            idx = self.p_axis_order[b]
            if not idx:
                continue
            xs, jb = _stick(0.0, t[b], w[..., col : col + len(idx)])
            for j, x in zip(idx, xs):
                P[..., j] = x
            jac = jac * jb
            col += len(idx)
        return P, jac

    def points(self, P, wf, t, which):
        """Points (..., k, 2) of chain ``which`` for shared coordinates P[..., None, k]."""
        runs = self.u_runs if which == "u" else self.v_runs
        shape = np.broadcast_shapes(P.shape[:-1], wf.shape[:-1])
        pts = np.empty(shape + (self.k, 2))
        jac = np.ones(shape)
        col = 0
        for b, ids, left, right in runs:
            lo = 0.0 if left is None else P[..., left]
            hi = t[b] if right is None else P[..., right]
            xs, jb = _stick(lo, hi, wf[..., col : col + len(ids)])
            for pos, x in zip(ids, xs):
                pts[..., pos, b] = x
            jac = jac * jb
            col += len(ids)
        pin = self.u_pin if which == "u" else self.v_pin
        for b in (0, 1):
            for pos, j in pin[b].items():
                pts[..., pos, b] = P[..., j]
        return pts, jac


def _tensor(nodes, wts, d):
    if d == 0:
        return np.zeros((1, 0)), np.ones(1)
    grids = np.meshgrid(*([nodes] * d), indexing="ij")
    wg = np.meshgrid(*([wts] * d), indexing="ij")
    w = np.ones(grids[0].size)
    for x in wg:
        w = w * x.ravel()
    return np.stack([g.ravel() for g in grids], axis=-1), w


def _term_grid(kernel: ChaosKernel, term: _Term, layers: int, order: int, ratio: float, chunk: int = 1_500_000) -> float:
    k, t = term.k, kernel.t
    nodes, wts = graded_rule(layers, order, ratio)
    wp, qp = _tensor(nodes, wts, k)
    wf, qf = _tensor(nodes, wts, k)
    P, jp = term.p_nodes(wp, t)
    fu = np.empty(P.shape[0])
    fv = np.empty(P.shape[0]) if not term.symmetric else fu
    step = max(1, chunk // wf.shape[0])
    for s in range(0, P.shape[0], step):
        Pc = P[s : s + step, None, :]
        for which, dest in (("u", fu), ("v", fv)):
            if which == "v" and term.symmetric:
                continue
            pts, jac = term.points(Pc, wf[None, :, :], t, which)
            dest[s : s + step] = (kernel._chain(pts) * jac) @ qf
    return float(np.sum(qp * jp * fu * fv))


def _dirichlet_logpdf(g, a):
    m = g.shape[-1]
    return gammaln(m * a) - m * gammaln(a) + (a - 1.0) * np.sum(np.log(g), axis=-1)


def _term_mc(kernel: ChaosKernel, term: _Term, n: int, rng: np.random.Generator, shape: float) -> np.ndarray:
    """Importance samples of one term: Dirichlet gaps for u, then for the free v coordinates."""
    k, t = term.k, kernel.t
    a = float(shape)
    u = np.empty((n, k, 2))
    logq = np.zeros(n)
    for b in (0, 1):
        g = rng.dirichlet(np.full(k + 1, a), size=n)
        g = np.maximum(g, 1e-300)
        logq += _dirichlet_logpdf(g, a) - k * math.log(t[b])
        u[..., b] = t[b] * np.cumsum(g[:, :k], axis=1)
    P = np.stack([u[:, j, term.a_u[j]] for j in range(k)], axis=-1)
    v = np.empty((n, k, 2))
    ok = np.ones(n, dtype=bool)
    for b in (0, 1):
        for pos, j in term.v_pin[b].items():
            v[:, pos, b] = P[:, j]
    for b, ids, left, right in term.v_runs:
        lo = np.zeros(n) if left is None else P[:, left]
        hi = np.full(n, t[b]) if right is None else P[:, right]
        m = len(ids)
        g = np.maximum(rng.dirichlet(np.full(m + 1, a), size=n), 1e-300)
        span = hi - lo
        # coincident shared coordinates (gap underflow) form a null set
        ok &= span > 0
        span = np.where(span > 0, span, 1.0)
        logq += _dirichlet_logpdf(g, a) - m * np.log(span)
        xs = lo[:, None] + span[:, None] * np.cumsum(g[:, :m], axis=1)
        for c, pos in enumerate(ids):
            v[:, pos, b] = xs[:, c]
    return np.where(ok, kernel._chain(u) * kernel._chain(v) * np.exp(-logq), 0.0)


# ---------------------------------------------------------------------------
# psi norms


def c_tka(t, k: int, alpha: float) -> float:
    lo, hi = min(t), max(t)
    return lo ** (2 * (k + 1) * (alpha - 2.0)) / (t[0] * t[1] * hi) ** k


def gamma_bound_constant(value_k1: float, alpha: float, t=(1.0, 1.0)) -> float:
    """C with C^2 C_{t,1,a} / Gamma(a - 1/2) equal to the k = 1 norm."""
    return math.sqrt(value_k1 * math.gamma(alpha - 0.5) / c_tka(t, 1, alpha))


def gamma_bound(C: float, k: int, alpha: float, t=(1.0, 1.0)) -> float:
    return C ** (k + 1) * c_tka(t, k, alpha) / math.gamma(k * (alpha - 0.5))


GRID_LAYERS = (3, 4, 5, 6, 7, 8)


def _swap_classes(kernel: ChaosKernel, terms) -> list[tuple[int, float]]:
    """Merge terms exchanged by swapping the axes when the problem is symmetric."""
    a = kernel.prof.a
    sym = kernel.t[0] == kernel.t[1] and np.allclose(a, a[::-1], rtol=0, atol=1e-14)
    if not sym:
        return [(i, 1.0) for i in range(len(terms))]
    index = {(tm.perm, tm.mask): i for i, tm in enumerate(terms)}
    out, seen = [], set()
    for i, tm in enumerate(terms):
        if i in seen:
            continue
        j = index[(tm.perm, tuple(1 - m for m in tm.mask))]
        seen.update((i, j))
        out.append((i, 2.0 if j != i else 1.0))
    return out


def _aitken(vals: list[float]) -> QuadResult:
    """Delta-squared acceleration of a geometrically converging refinement sequence.

    The truncation error of the graded rules decays like a fixed power of the
    innermost panel width, i.e. geometrically in the number of layers.
    Falls back to the raw sequence when the ratios are not in (0, 1).
    """
    acc = []
    for j in range(2, len(vals)):
        d1, d2 = vals[j - 1] - vals[j - 2], vals[j] - vals[j - 1]
        q = d2 / d1 if d1 != 0 else float("nan")
        if not 0.0 < q < 1.0:
            return _refine(vals, "psi norm")
        acc.append(vals[j] + d2 * q / (1.0 - q))
    if len(acc) < 2:
        return _refine(vals, "psi norm")
    err = abs(acc[-1] - acc[-2])
    return QuadResult(acc[-1], err, tuple(acc), err <= 0.01 * abs(acc[-1]))


def psi_norm_k(
    kernel: ChaosKernel,
    method: str = "closed-grid",
    budget: int | None = None,
    seed=0,
    quad: QuadSpec | None = None,
    grid_layers: tuple[int, ...] = GRID_LAYERS,
    shape: float | None = None,
    target: float | None = None,
) -> NuNorm:
    """Squared nu_k norm of the kernel.

    ``closed-grid`` (k <= 2) refines graded tensor meshes and reports the last
    refinement difference (for k = 2 on the Aitken-accelerated sequence); ``mc-importance`` (k <= 4) samples every
    admissible term ``budget`` times and reports the standard error from 32
    batch means.  ``target`` flags results whose error is above it.
    """
    k, alpha = kernel.k, kernel.alpha
    if alpha <= 0.5:
        raise DivergenceError(f"psi kernels are not in L^2(nu) for alpha = {alpha} <= 1/2")
    ps = avoiding_permutations(k)
    terms = [_Term(p, m, k) for p, m in ps.terms()]
    if method == "closed-grid":
        if k > 2:
            raise ValueError("closed-grid is limited to k <= 2")
        if k == 1:
            f = kernel.one_point()
            res = nu_pair_integral(f, f, kernel.t, quad)
            hist = res.history
        else:
            quad = quad or QuadSpec()
            weights = _swap_classes(kernel, terms)
            vals = []
            for lay in grid_layers:
                vals.append(math.fsum(wt * _term_grid(kernel, terms[i], lay, quad.order, quad.grading) for i, wt in weights))
            _refine(vals, "psi norm")
            res = _aitken(vals)
            hist = tuple(vals)
        flagged = not res.converged or (target is not None and res.abserr > target)
        return NuNorm(k, res.value, res.abserr, "closed-grid", flagged, {"history": hist, "terms": len(terms)})
    if method != "mc-importance":
        raise ValueError(f"unknown method {method!r}")
    if k > 4:
        raise ValueError("mc-importance is limited to k <= 4")
    budget = int(budget or 200_000)
    shape = alpha - 0.5 if shape is None else float(shape)
    batches = 32
    per = -(-budget // batches)
    means = np.zeros((len(terms), batches))
    for ti, tm in enumerate(terms):
        rng = stream(seed, "chaos", f"psi_norm_k{k}", ti)
        for bi in range(batches):
            means[ti, bi] = float(np.mean(_term_mc(kernel, tm, per, rng, shape)))
    tot = means.sum(axis=0)
    value = math.fsum(tot) / batches
    err = float(np.std(tot, ddof=1) / math.sqrt(batches))
    flagged = target is not None and err > target
    meta = {"terms": len(terms), "per_term": [float(x) for x in means.mean(axis=1)], "samples": per * batches, "shape": shape}
    return NuNorm(k, value, err, "mc-importance", flagged, meta)


# ---------------------------------------------------------------------------
# continuum homogeneous partition function

_V_NODES = 129


def _v_grid(n: int = _V_NODES) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(np.pi * np.arange(n) / (n - 1)))


@dataclass(frozen=True)
class HomogeneousSeries:
    """phi^{*m}(s) = |s|^{m alpha - 2} a_m(v) on a Chebyshev grid in v = s1 / |s|.

    ``terms`` holds the k-th series term at t = (v, 1 - v) for k = 0, 1, ...
    (without the h_hat^k factor); evaluation reuses the angular tables with
    the exact radial power.
    """

    alpha: float
    h_hat: float
    v: np.ndarray
    a: np.ndarray  # a[m - 1] is a_m on v
    meta: dict = field(default_factory=dict, compare=False)

    @classmethod
    def build(cls, alpha, h_hat, profile: PhiProfile, k_max: int = 60, tol: float = 1e-10, layers: int = 16) -> "HomogeneousSeries":
        v = _v_grid()
        a = [profile.angular(v)]
        x, w = graded_rule(layers)
        cphi = profile_sup(profile)
        for m in range(1, k_max + 1):
            if h_hat == 0.0:
                break
            nxt = np.zeros_like(v)
            prev = a[-1]
            for j, vv in enumerate(v):
                if vv <= 0.0 or vv >= 1.0:
                    continue
                S1, S2 = np.meshgrid(x * vv, x * (1.0 - vv), indexing="ij")
                r = S1 + S2
                f = r ** (m * alpha - 2.0) * np.interp(S1 / r, v, prev)
                f = f * profile(vv - S1, (1.0 - vv) - S2)
                nxt[j] = vv * (1.0 - vv) * float(w @ f @ w)
            a.append(nxt)
            nxt_bound = abs(h_hat) ** (m + 1) * majorant(cphi, m + 1, alpha, 1.0)
            if m >= 2 and nxt_bound < tol * float(np.max(a[0])):
                break
        return cls(float(alpha), float(h_hat), v, np.array(a), {"C_phi": cphi, "orders": len(a)})

    def __call__(self, s1, s2) -> np.ndarray:
        s1 = np.asarray(s1, dtype=float)
        s2 = np.asarray(s2, dtype=float)
        r = s1 + s2
        safe = np.where(r > 0, r, 1.0)
        vv = s1 / safe
        out = np.zeros(np.broadcast_shapes(s1.shape, s2.shape))
        hk = 1.0
        for m in range(1, self.a.shape[0] + 1):
            out = out + hk * safe ** (m * self.alpha - 2.0) * np.interp(vv, self.v, self.a[m - 1])
            hk *= self.h_hat
        return np.where((s1 > 0) & (s2 > 0), out, 0.0)

    def term(self, k: int, t) -> float:
        """k-th term (times h_hat^k) at t."""
        r = t[0] + t[1]
        return self.h_hat**k * r ** ((k + 1) * self.alpha - 2.0) * float(np.interp(t[0] / r, self.v, self.a[k]))


def profile_sup(profile: PhiProfile) -> float:
    """C_phi = sup a, so that phi(s) <= C_phi |s|^{alpha - 2}."""
    return float(np.max(profile.angular(np.linspace(0.0, 1.0, 4097))))


def majorant(cphi: float, k: int, alpha: float, norm: float) -> float:
    """Bound on the k-th homogeneous term at |t| = norm.

    With phi <= C_phi |s|^{alpha-2}, the k-fold integral over the increasing
    chain is at most C_phi^{k+1} times the same integral over ordered norms
    0 < r_1 < ... < r_k < |t|, a Dirichlet integral equal to
    Gamma(alpha)^{k+1} / Gamma((k+1) alpha) |t|^{(k+1) alpha - 1}.
    """
    return cphi * (cphi * math.gamma(alpha)) ** k * math.gamma(alpha) / math.gamma((k + 1) * alpha) * norm ** (
        (k + 1) * alpha - 1.0
    )


def continuum_homogeneous(
    t=(1.0, 1.0),
    h_hat: float = 1.0,
    alpha: float = 0.75,
    phi_source: PhiProfile | None = None,
    k_max: int = 60,
    tol: float = 1e-10,
    details: bool = False,
    layers: int = 16,
):
    """Z_{t, h} = phi(t) + sum_k h^k int prod phi over the increasing simplex.

    Terms come from the recursion a_{m+1}(v) = int phi^{*m}(s) phi(t - s) ds on
    |t| = 1 and homogeneity.  The series stops once the Gamma decay majorant
    of the next term drops below ``tol``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    prof = phi_source if phi_source is not None else surrogate_profile(alpha)
    t = (float(t[0]), float(t[1]))
    if h_hat == 0.0:
        val = float(prof(np.array(t[0]), np.array(t[1])))
        return (val, {"terms": [val], "majorant_dominates": True}) if details else val
    hs = HomogeneousSeries.build(alpha, h_hat, prof, k_max=k_max, tol=tol, layers=layers)
    terms = [hs.term(k, t) for k in range(hs.a.shape[0])]
    val = math.fsum(terms)
    if not details:
        return val
    norm = t[0] + t[1]
    cphi = hs.meta["C_phi"]
    maj = [abs(h_hat) ** k * majorant(cphi, k, alpha, norm) for k in range(len(terms))]
    dom = all(abs(x) <= m * (1 + 1e-9) for x, m in zip(terms, maj))
    info = {"terms": terms, "majorant": maj, "C_phi": cphi, "majorant_dominates": dom, "series": hs}
    return val, info


# ---------------------------------------------------------------------------
# discrete iterated integrals


def discrete_phi_table(law: RenewalLaw, m: int, t=(1.0, 1.0)) -> np.ndarray:
    """phi_m(j / m) = m^{2 - alpha} L u(j) for 0 <= j <= m t."""
    j1, j2 = int(round(m * t[0])), int(round(m * t[1]))
    u = mass_function(law, (j1, j2)).values
    return m ** (2.0 - law.alpha) * law.L * np.asarray(u[: j1 + 1, : j2 + 1])


def field_increments(fg, m: int) -> np.ndarray:
    """M_bar_n(u - 1/n + Delta_m) at every node u = j / m of [0, t].

    The rectangle covers the lattice cells u n <= i < u n + n / m, clipped to
    the box; read from the stored prefix sums.
    """
    n = int(fg.meta["n"])
    if n % m:
        raise ValueError(f"m = {m} does not divide n = {n}")
    pre = fg.prefix
    N1, N2 = pre.shape[0] - 1, pre.shape[1] - 1
    step = n // m
    j1, j2 = N1 // step, N2 // step
    a1 = np.arange(j1 + 1) * step
    a2 = np.arange(j2 + 1) * step
    hi1 = np.minimum(a1 + step - 1, N1)
    hi2 = np.minimum(a2 + step - 1, N2)
    lo1 = np.maximum(a1 - 1, 0)
    lo2 = np.maximum(a2 - 1, 0)
    # cells with index 0 do not exist; prefix[0, :] = prefix[:, 0] = 0 handles the first block
    inc = pre[np.ix_(hi1, hi2)] - pre[np.ix_(lo1, hi2)] - pre[np.ix_(hi1, lo2)] + pre[np.ix_(lo1, lo2)]
    return fg.scale * inc


def discrete_iterated_integral(psi, increments: np.ndarray, k: int = 1) -> float:
    """g_m ._k M_bar_n.

    ``psi`` is either an array of k = 1 kernel values at the nodes of D_m, or
    a phi_m table (tuple ``("chain", table)``) from which the product kernel
    psi_m with its strict ordering is built for any k.
    """
    inc = np.asarray(increments, dtype=float)
    if isinstance(psi, tuple) and psi[0] == "chain":
        tab = np.ascontiguousarray(psi[1], dtype=float)
        if tab.shape != inc.shape:
            raise ValueError("phi table and increments must share the node grid")
        return float(chain_integral(tab, np.ascontiguousarray(inc), int(k)))
    g = np.asarray(psi, dtype=float)
    if k != 1:
        raise ValueError("array kernels are supported for k = 1 only")
    if g.shape != inc.shape:
        raise ValueError("kernel and increments must share the node grid")
    return math.fsum((g * inc).ravel())


def tilde_z_factor(schedule, n: int, sigma_r: float, k: int = 1) -> float:
    """(sigma_r n^{3/2} beta_n^r / (n^{2 - alpha} L))^k."""
    return (sigma_r * n**1.5 * schedule.beta(n) ** schedule.r / schedule.rescale(n)) ** k


def tilde_z_direct(law: RenewalLaw, zeta: np.ndarray, n: int, t=(1.0, 1.0)) -> float:
    """n^{2 - alpha} L sum_i zeta_i u(i) u(nt - i) over 0 < i < nt."""
    N1, N2 = int(math.floor(n * t[0])), int(math.floor(n * t[1]))
    u = mass_function(law, (N1, N2)).values[: N1 + 1, : N2 + 1]
    body = u[1:N1, 1:N2] * u[N1 - 1 : 0 : -1, N2 - 1 : 0 : -1] * zeta[: N1 - 1, : N2 - 1]
    return n ** (2.0 - law.alpha) * law.L * math.fsum(body.ravel())


# ---------------------------------------------------------------------------
# chaos series


def chaos_variance_series(
    alpha: float,
    t=(1.0, 1.0),
    r: int = 1,
    sigma_r: float = 1.0,
    beta_hat: float = 1.0,
    k_max: int = 3,
    budget: int = 200_000,
    profile: PhiProfile | None = None,
    seed=0,
    norms: dict | None = None,
) -> dict:
    """Partial sums S_K = sum_{k <= K} (sigma_r beta_hat^r)^{2k} |psi_k|^2.

    Orders are treated as mutually orthogonal (convention: orthogonal chaos).
    The Gamma bound with its constant fitted at k = 1 gives a tail estimate.
    """
    if alpha <= 0.5:
        raise DivergenceError("the chaos series needs alpha > 1/2")
    if not 1 <= k_max <= 4:
        raise ValueError("k_max must be in 1..4")
    x = (sigma_r * beta_hat**r) ** 2
    if beta_hat == 0:
        return {"partial_sums": [0.0] * k_max, "norms": [], "tail": 0.0, "convention": "orthogonal chaos"}
    norms = dict(norms or {})
    base = ChaosKernel(alpha, t, 1, "q", profile)
    for k in range(1, k_max + 1):
        if k in norms:
            continue
        method = "closed-grid" if k <= 2 else "mc-importance"
        norms[k] = psi_norm_k(base.with_k(k), method=method, budget=budget, seed=seed)
    vals = [norms[k].value for k in range(1, k_max + 1)]
    sums = list(itertools.accumulate(x**k * v for k, v in enumerate(vals, 1)))
    C = gamma_bound_constant(vals[0], alpha, t)
    tail = 0.0
    for k in range(k_max + 1, k_max + 400):
        term = x**k * gamma_bound(C, k, alpha, t)
        tail += term
        if term < 1e-16 * max(tail, 1e-300):
            break
    majorant = [math.fsum(x**j * gamma_bound(C, j, alpha, t) for j in range(1, K + 1)) for K in range(1, k_max + 1)]
    return {
        "partial_sums": sums,
        "norms": [norms[k] for k in range(1, k_max + 1)],
        "gamma_constant": C,
        "majorant_partial_sums": majorant,
        "tail": tail,
        "convention": "orthogonal chaos",
    }


def orthogonality_check(alpha: float, m: int = 16, reps: int = 20_000, seed=0, profile: PhiProfile | None = None) -> dict:
    """MC mean of (psi_1 . M)(psi_2 . M) using discrete sums on the limit field."""
    from .field import sample_limit_batch, uniform_axes

    prof = profile if profile is not None else surrogate_profile(alpha)
    axes = uniform_axes((1.0, 1.0), m)
    cells = (np.arange(m) + 0.5) / m
    ker = ChaosKernel(alpha, (1.0, 1.0), 1, "q", prof)
    C1, C2 = np.meshgrid(cells, cells, indexing="ij")
    psi1 = ker.one_point()(C1, C2)
    tab = np.zeros((m + 1, m + 1))
    tab[1:, 1:] = prof(C1, C2)
    tab[0, 0] = 0.0
    vals = sample_limit_batch(axes, reps, seed)
    out = np.empty(reps)
    inc = np.zeros((m + 1, m + 1))
    for rix in range(reps):
        f = vals[rix]
        d = f[1:, 1:] - f[:-1, 1:] - f[1:, :-1] + f[:-1, :-1]
        one = float(np.sum(psi1 * d))
        inc[1:, 1:] = d
        two = float(chain_integral(tab, inc, 2))
        out[rix] = one * two
    mean = float(out.mean())
    se = float(out.std(ddof=1) / math.sqrt(reps))
    return {"mean": mean, "se": se, "z": mean / se if se > 0 else 0.0, "reps": reps, "m": m}


def tilde_z1_mc(law: RenewalLaw, spec, schedule, n: int, reps: int, seed=0, t=(1.0, 1.0), block: int = 256) -> dict:
    """Replicas of the first chaos term n^{2 - alpha} L sum_i zeta_i u(i) u(nt - i).

    The disorder enters only through the atom indices of each row and
    column, so the sum reduces to sum_{a, b} zeta(a, b) (H^T W B)[a, b] with
    one-hot matrices H, B.
    """
    from .disorder import log_mgf

    N1, N2 = int(math.floor(n * t[0])), int(math.floor(n * t[1]))
    u = mass_function(law, (N1, N2)).values[: N1 + 1, : N2 + 1]
    W = np.zeros((N1, N2))
    W[: N1 - 1, : N2 - 1] = u[1:N1, 1:N2] * u[N1 - 1 : 0 : -1, N2 - 1 : 0 : -1]
    bn = schedule.beta(n)
    zt = np.expm1(bn * spec.V - log_mgf(spec, bn))
    c = n ** (2.0 - law.alpha) * law.L
    s = spec.size
    vals = np.empty(reps)
    for b0 in range(0, reps, block):
        m = min(block, reps - b0)
        rng = stream(seed, "chaos", "tilde_z1", b0 // block)
        hat = rng.choice(s, size=(block, N1), p=spec.probs)[:m]
        bar = rng.choice(s, size=(block, N2), p=spec.probs)[:m]
        H = np.eye(s)[hat]  # (m, N1, s)
        B = np.eye(s)[bar]
        A = np.einsum("mia,ij,mjb->mab", H, W, B, optimize=True)
        vals[b0 : b0 + m] = c * np.einsum("mab,ab->m", A, zt)
    mean = float(vals.mean())
    var = float(vals.var(ddof=1))
    cc = vals - mean
    se_var = math.sqrt(max(float(np.mean(cc**4)) - var**2 * (reps - 3) / (reps - 1), 0.0) / reps)
    return {"values": vals, "mean": mean, "var": var, "se_var": se_var, "reps": reps, "beta_n": bn}


def tilde_z1_variance(law: RenewalLaw, spec, schedule, n: int, t=(1.0, 1.0)) -> float:
    """Exact Var of the first chaos term at finite n from the two-point correlations."""
    from .disorder import two_point_correlation

    N1, N2 = int(math.floor(n * t[0])), int(math.floor(n * t[1]))
    u = mass_function(law, (N1, N2)).values[: N1 + 1, : N2 + 1]
    W = u[1:N1, 1:N2] * u[N1 - 1 : 0 : -1, N2 - 1 : 0 : -1]
    bn = schedule.beta(n)
    ce = two_point_correlation(spec, bn, "equal")
    cr = two_point_correlation(spec, bn, "aligned-distinct", axis="row")
    cc = two_point_correlation(spec, bn, "aligned-distinct", axis="column")
    sq = math.fsum((W**2).ravel())
    rows = math.fsum((W.sum(axis=1) ** 2).ravel()) - sq  # same first coordinate
    cols = math.fsum((W.sum(axis=0) ** 2).ravel()) - sq
    c = n ** (2.0 - law.alpha) * law.L
    return c * c * (ce * sq + cr * rows + cc * cols)

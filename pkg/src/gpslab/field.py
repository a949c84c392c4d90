"""Discrete partial-sum fields and the limiting Gaussian field.

The limit field has covariance
``K(u, v) = (u1 ^ v1)(u2 ^ v2)(u1 v v1 + u2 v v2)``, which equals
``u1 v1 (u2 ^ v2) + u2 v2 (u1 ^ v1)`` because ``(x ^ y)(x v y) = x y``.
The second form is the covariance of ``t2 B1(t1) + t1 B2(t2)`` for two
independent Brownian motions, which is what the exact sampler uses.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .disorder import DisorderSample, classify_r
from .seeding import as_generator

__all__ = [
    "FieldGrid",
    "cov_k",
    "cov_k_product",
    "uniform_axes",
    "partial_sum_field",
    "discrete_field_batch",
    "sample_limit_field",
    "sample_limit_batch",
    "rectangle_increment",
    "nu_rectangles",
    "nu_lebesgue",
    "moment_estimate",
    "jackknife",
    "gaussian_moment",
    "wick_fourth",
    "write_csv",
    "write_binary",
    "read_binary",
]

MAGIC = b"GPSF"
KIND_CODE = {"discrete": 1, "limit": 2}


def cov_k(u, v) -> np.ndarray:
    """K in the min/max form."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    lo = np.minimum(u, v)
    hi = np.maximum(u, v)
    return lo[..., 0] * lo[..., 1] * (hi[..., 0] + hi[..., 1])


def cov_k_product(u, v) -> np.ndarray:
    """K in the product form u1 v1 (u2 ^ v2) + u2 v2 (u1 ^ v1)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return u[..., 0] * v[..., 0] * np.minimum(u[..., 1], v[..., 1]) + u[..., 1] * v[..., 1] * np.minimum(
        u[..., 0], v[..., 0]
    )


def uniform_axes(t, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    g = np.arange(resolution + 1) / resolution
    return g * float(t[0]), g * float(t[1])


@dataclass(frozen=True)
class FieldGrid:
    """Field values on the tensor grid ``axes[0] x axes[1]``.

    For the discrete kind ``prefix`` holds the 2D prefix sums of zeta over the
    underlying lattice and ``scale`` the normalization, so the field can be
    read at any point, not only on the stored grid.
    """

    kind: str
    axes: tuple[np.ndarray, np.ndarray]
    values: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)
    prefix: np.ndarray | None = field(default=None, compare=False, repr=False)
    scale: float = 1.0

    def __post_init__(self):
        for ax in self.axes:
            if np.any(np.diff(ax) <= 0):
                raise ValueError("grid axes must be strictly increasing")

    def at(self, s) -> float:
        """Field value at an arbitrary point (discrete kind) or a grid node."""
        if self.prefix is not None:
            n = self.meta["n"]
            i1 = min(int(math.floor(n * s[0] + 1e-9)), self.prefix.shape[0] - 1)
            i2 = min(int(math.floor(n * s[1] + 1e-9)), self.prefix.shape[1] - 1)
            return float(self.scale * self.prefix[i1, i2])
        return float(self.values[_node(self.axes[0], s[0]), _node(self.axes[1], s[1])])


def _node(ax: np.ndarray, x: float) -> int:
    j = int(np.searchsorted(ax, x - 1e-12))
    if j >= ax.size or abs(ax[j] - x) > 1e-12:
        raise ValueError(f"{x} is not a grid coordinate")
    return j


# ---------------------------------------------------------------------------
# discrete field


def _prefix(zeta: np.ndarray) -> np.ndarray:
    p = np.zeros((zeta.shape[0] + 1, zeta.shape[1] + 1))
    np.cumsum(np.cumsum(zeta, axis=0), axis=1, out=p[1:, 1:])
    return p


def _discrete_scale(n: int, beta_n: float, sigma_r: float, r: int) -> float:
    return 1.0 / (sigma_r * n**1.5 * beta_n**r)


def partial_sum_field(
    sample: DisorderSample,
    schedule,
    n: int,
    t=(1.0, 1.0),
    grid_resolution: int = 4,
    sigma_r_sq: float | None = None,
) -> FieldGrid:
    """M_bar_n(s) = (sigma_r n^{3/2} beta_n^r)^{-1} sum_{i <= ns} zeta_i on a uniform grid."""
    n1, n2 = int(math.floor(n * t[0])), int(math.floor(n * t[1]))
    if sample.shape[0] < n1 or sample.shape[1] < n2:
        raise ValueError("sample does not cover floor(n t)")
    if sigma_r_sq is None:
        cl = classify_r(sample.spec)
        if not cl.finite:
            raise ValueError("the partial-sum normalization needs a finite r")
        sigma_r_sq = cl.sigma_r_sq
    beta_n = schedule.beta(n)
    r = schedule.r
    pre = _prefix(sample.zeta(n1, n2) if sample.beta == beta_n else _zeta_at(sample, n1, n2, beta_n))
    scale = _discrete_scale(n, beta_n, math.sqrt(sigma_r_sq), r) if beta_n > 0 else 0.0
    axes = uniform_axes(t, grid_resolution)
    idx1 = np.floor(n * axes[0] + 1e-9).astype(int)
    idx2 = np.floor(n * axes[1] + 1e-9).astype(int)
    vals = scale * pre[np.ix_(np.minimum(idx1, n1), np.minimum(idx2, n2))]
    meta = {"n": int(n), "beta_n": beta_n, "sigma_r_sq": float(sigma_r_sq), "r": r, "t": list(map(float, t))}
    return FieldGrid("discrete", axes, vals, meta, prefix=pre, scale=scale)


def _zeta_at(sample: DisorderSample, n1: int, n2: int, beta: float) -> np.ndarray:
    from .disorder import log_mgf

    lam = log_mgf(sample.spec, beta)
    return np.expm1(beta * sample.omega_block(n1, n2) - lam)


def discrete_field_batch(spec, schedule, n: int, points, reps: int, seed, sigma_r_sq: float, op="discrete_field") -> np.ndarray:
    """M_bar_n at ``points`` for ``reps`` independent disorder draws, shape (reps, len(points))."""
    from .disorder import log_mgf
    from .seeding import stream

    beta_n = schedule.beta(n)
    lam = log_mgf(spec, beta_n)
    zt = np.expm1(beta_n * spec.V - lam)
    scale = _discrete_scale(n, beta_n, math.sqrt(sigma_r_sq), schedule.r)
    pts = np.floor(n * np.asarray(points, dtype=float) + 1e-9).astype(int)
    m1, m2 = int(pts[:, 0].max()), int(pts[:, 1].max())
    out = np.empty((reps, len(pts)))
    for r in range(reps):
        rng = stream(seed, "field", op, r)
        hat = rng.choice(spec.size, size=m1, p=spec.probs)
        bar = rng.choice(spec.size, size=m2, p=spec.probs)
        pre = _prefix(zt[np.ix_(hat, bar)])
        out[r] = scale * pre[pts[:, 0], pts[:, 1]]
    return out


# ---------------------------------------------------------------------------
# limit field


def _bm(rng: np.random.Generator, x: np.ndarray, reps: int) -> np.ndarray:
    steps = np.diff(np.concatenate(([0.0], x)))
    inc = rng.standard_normal((reps, x.size)) * np.sqrt(steps)
    return np.cumsum(inc, axis=1)


def sample_limit_batch(axes, reps: int, seed, method: str = "two-bm") -> np.ndarray:
    """``reps`` draws of the limit field on the grid, shape (reps, len(ax0), len(ax1))."""
    x1 = np.asarray(axes[0], dtype=float)
    x2 = np.asarray(axes[1], dtype=float)
    if np.any(x1 < 0) or np.any(x2 < 0):
        raise ValueError("the field lives on the positive quadrant")
    rng = as_generator(seed)
    if method == "two-bm":
        b1 = _bm(rng, x1, reps)
        b2 = _bm(rng, x2, reps)
        return x2[None, None, :] * b1[:, :, None] + x1[None, :, None] * b2[:, None, :]
    if method == "cholesky":
        pts = np.array([(a, b) for a in x1 for b in x2])
        live = np.nonzero((pts[:, 0] > 0) & (pts[:, 1] > 0))[0]
        cov = cov_k(pts[live][:, None, :], pts[live][None, :, :])
        chol = np.linalg.cholesky(cov + 1e-14 * np.eye(live.size) * np.trace(cov) / live.size)
        out = np.zeros((reps, pts.shape[0]))
        out[:, live] = rng.standard_normal((reps, live.size)) @ chol.T
        return out.reshape(reps, x1.size, x2.size)
    raise ValueError(f"unknown method {method!r}")


def sample_limit_field(axes, seed, method: str = "two-bm") -> FieldGrid:
    """One draw on the tensor grid (two-BM construction, or grid Cholesky)."""
    if isinstance(axes, FieldGrid):
        axes = axes.axes
    ax = (np.asarray(axes[0], dtype=float), np.asarray(axes[1], dtype=float))
    vals = sample_limit_batch(ax, 1, seed, method)[0]
    return FieldGrid("limit", ax, vals, {"method": method})


def rectangle_increment(fg: FieldGrid, rect) -> float:
    """F(u1, s1) - F(u0, s1) - F(u1, s0) + F(u0, s0) over [u0, u1) x [s0, s1)."""
    (u0, u1), (s0, s1) = rect
    if fg.prefix is not None:
        return fg.at((u1, s1)) - fg.at((u0, s1)) - fg.at((u1, s0)) + fg.at((u0, s0))
    a0, a1 = _node(fg.axes[0], u0), _node(fg.axes[0], u1)
    b0, b1 = _node(fg.axes[1], s0), _node(fg.axes[1], s1)
    v = fg.values
    return float(v[a1, b1] - v[a0, b1] - v[a1, b0] + v[a0, b0])


def _overlap(a, b) -> float:
    return max(0.0, min(a[1], b[1]) - max(a[0], b[0]))


def nu_rectangles(A, B) -> float:
    """E[M(A) M(B)] as int 1_A(s) (int 1_B(x, s2) dx + int 1_B(s1, y) dy) ds for A, B rectangles."""
    (a1, a2), (b1, b2) = A, B
    la1, la2 = a1[1] - a1[0], a2[1] - a2[0]
    lb1, lb2 = b1[1] - b1[0], b2[1] - b2[0]
    return la1 * lb1 * _overlap(a2, b2) + la2 * lb2 * _overlap(a1, b1)


def nu_lebesgue(A, B) -> float:
    """Same quantity as two 3D Lebesgue volumes: {(x,y,z): (x,y) in A, (x,z) in B} and {(x,y) in A, (z,y) in B}."""
    (a1, a2), (b1, b2) = A, B
    shared_x = _overlap(a1, b1) * (a2[1] - a2[0]) * (b2[1] - b2[0])
    shared_y = _overlap(a2, b2) * (a1[1] - a1[0]) * (b1[1] - b1[0])
    return shared_x + shared_y


# ---------------------------------------------------------------------------
# moments


def jackknife(values: np.ndarray, stat, blocks: int = 200) -> tuple[float, float]:
    """Delete-a-block jackknife estimate and SE of ``stat`` (a function of a 1D sample)."""
    x = np.asarray(values, dtype=float).ravel()
    n = x.size
    full = float(stat(x))
    g = min(blocks, n)
    if g < 2:
        return full, float("nan")
    edges = np.linspace(0, n, g + 1).astype(int)
    reps = np.empty(g)
    for j in range(g):
        keep = np.concatenate((x[: edges[j]], x[edges[j + 1] :]))
        reps[j] = stat(keep)
    se = math.sqrt((g - 1) / g * float(np.sum((reps - reps.mean()) ** 2)))
    return full, se


def moment_estimate(samples, s=None, ell: int = 2, blocks: int = 200) -> tuple[float, float]:
    """MC estimate of E[X(s)^ell] with jackknife SE.

    ``samples`` is a sequence of FieldGrid (read at ``s``) or a 1D array of values.
    """
    if ell < 1 or ell > 8:
        raise ValueError("ell must be in 1..8")
    if s is not None and len(samples) and isinstance(samples[0], FieldGrid):
        x = np.array([fg.at(s) for fg in samples])
    else:
        x = np.asarray(samples, dtype=float)
    return jackknife(x, lambda y: float(np.mean(y**ell)), blocks)


def gaussian_moment(ell: int, k_ss: float) -> float:
    if ell % 2:
        return 0.0
    h = ell // 2
    return k_ss**h * math.factorial(ell) / (2**h * math.factorial(h))


def wick_fourth(points) -> float:
    """E[X1 X2 X3 X4] for the centered Gaussian field with covariance K."""
    p = [np.asarray(x, dtype=float) for x in points]
    k = lambda a, b: float(cov_k(p[a], p[b]))  # noqa: E731
    return k(0, 1) * k(2, 3) + k(0, 2) * k(1, 3) + k(0, 3) * k(1, 2)


# ---------------------------------------------------------------------------
# dumps


def write_csv(path, grids, header_line: str | None = None) -> Path:
    """Rows ``sample,s1,s2,value``; 17 significant digits."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        if header_line:
            fh.write(f"# {header_line}\n")
        w = csv.writer(fh)
        w.writerow(["sample", "s1", "s2", "value"])
        for k, fg in enumerate(grids):
            for a, x in enumerate(fg.axes[0]):
                for b, y in enumerate(fg.axes[1]):
                    w.writerow([k, f"{x:.17g}", f"{y:.17g}", f"{fg.values[a, b]:.17g}"])
    return path


def write_binary(path, fg: FieldGrid) -> Path:
    """32-byte header (magic, version, n1, n2, kind, pad) then little-endian doubles, row-major."""
    path = Path(path)
    n1, n2 = fg.values.shape
    head = struct.pack("<4sIQQII", MAGIC, 1, n1, n2, KIND_CODE[fg.kind], 0)
    assert len(head) == 32
    with path.open("wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(fg.values, dtype="<f8").tobytes())
    return path


def read_binary(path) -> tuple[int, int, str, np.ndarray]:
    raw = Path(path).read_bytes()
    magic, _ver, n1, n2, code, _ = struct.unpack("<4sIQQII", raw[:32])
    if magic != MAGIC:
        raise ValueError("not a field dump")
    kind = {v: k for k, v in KIND_CODE.items()}[code]
    vals = np.frombuffer(raw[32:], dtype="<f8").reshape(n1, n2).copy()
    return int(n1), int(n2), kind, vals

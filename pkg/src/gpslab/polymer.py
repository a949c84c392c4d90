"""Partition functions of the pinning model on a bivariate renewal.

Three variants share one lattice recursion:
``q`` (constrained, the renewal is forced through the corner ``n``),
``cond`` (constrained divided by u(n)) and ``free`` (no endpoint condition;
the last renewal point in the box is followed by a jump leaving it).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.special import zeta as hurwitz_zeta

from ._kernels import cone_dp, cone_dp_batch, cone_dp_log, diagonal_free
from .disorder import DisorderSample, DisorderSpec, log_mgf, sample_fields
from .renewal import LatticeBox, RenewalLaw, mass_function
from .seeding import stream

__all__ = [
    "ScalingSchedule",
    "PartitionValue",
    "DegenerateRegimeWarning",
    "escape_tail",
    "homogeneous_partition",
    "quenched_partition",
    "rescaled_partition",
    "rescaled_partition_mc",
    "chains",
    "second_moment_exact",
    "replica_second_moment",
    "second_moment_mc",
    "free_second_moments",
    "n_beta_estimate",
    "free_energy_estimate",
]

VARIANTS = ("q", "cond", "free")


class DegenerateRegimeWarning(UserWarning):
    """alpha <= 1/2: no disordered scaling limit is expected."""


@dataclass(frozen=True)
class ScalingSchedule:
    """beta_n = beta_hat (n^{1/2 - alpha} L)^{1/r} and h_n = h_hat L n^{-alpha}.

    With ``beta_decay`` set, beta_n = beta_hat n^{-beta_decay} instead; this is
    for runs outside the intermediate scaling, e.g. vanishing disorder at
    alpha <= 1/2 where the default sequence grows.
    """

    alpha: float
    L: float
    r: int
    beta_hat: float
    h_hat: float = 0.0
    beta_decay: float | None = None

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.beta_hat < 0:
            raise ValueError("beta_hat must be >= 0")

    @classmethod
    def from_law(
        cls, law: RenewalLaw, r: int, beta_hat: float, h_hat: float = 0.0, beta_decay: float | None = None
    ) -> "ScalingSchedule":
        decay = None if beta_decay is None else float(beta_decay)
        return cls(law.alpha, law.L, int(r), float(beta_hat), float(h_hat), decay)

    @property
    def vanishing(self) -> bool:
        """beta_n -> 0 (alpha > 1/2 for the default sequence)."""
        if self.beta_decay is not None:
            return self.beta_decay > 0 or self.beta_hat == 0
        return self.alpha > 0.5

    def beta(self, n: int) -> float:
        if self.beta_decay is not None:
            return self.beta_hat * float(n) ** (-self.beta_decay)
        return self.beta_hat * (n ** (0.5 - self.alpha) * self.L) ** (1.0 / self.r)

    def h(self, n: int) -> float:
        return self.h_hat * self.L * n ** (-self.alpha)

    def rescale(self, n: int) -> float:
        return n ** (2.0 - self.alpha) * self.L


@dataclass(frozen=True)
class PartitionValue:
    value: float
    variant: str
    box: LatticeBox
    params: tuple  # (beta, h)
    rescale: float = 1.0
    log_value: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __float__(self) -> float:
        return float(self.value)


# ---------------------------------------------------------------------------
# escape probabilities


def escape_tail(law: RenewalLaw, n1: int, n2: int) -> np.ndarray:
    """T[m1, m2] = P(l1 > m1 or l2 > m2) for the inter-arrival (l1, l2).

    Computed from Hurwitz zeta closed forms rather than 1 - (partial sum):
    P(l1 > m) = L [zeta(1+a, m+2) - (m+1) zeta(2+a, m+2)] and
    P(l1 > m1, l2 > m2) = L [zeta(1+a, s+2) - (s+1) zeta(2+a, s+2)], s = m1 + m2.
    """
    a = law.alpha

    def g(m):
        m = np.asarray(m, dtype=float)
        return law.L * (hurwitz_zeta(1.0 + a, m + 2.0) - (m + 1.0) * hurwitz_zeta(2.0 + a, m + 2.0))

    g1 = g(np.arange(n1 + 1))
    g2 = g(np.arange(n2 + 1))
    both = g(np.add.outer(np.arange(n1 + 1), np.arange(n2 + 1)))
    return g1[:, None] + g2[None, :] - both


def _escape_cached(law: RenewalLaw, n1: int, n2: int) -> np.ndarray:
    cur = law._cache.get("escape")
    if cur is None or cur.shape[0] <= n1 or cur.shape[1] <= n2:
        m = max(n1, n2, 0 if cur is None else cur.shape[0] - 1)
        cur = escape_tail(law, m, m)
        cur.setflags(write=False)
        law._cache["escape"] = cur
    return cur[: n1 + 1, : n2 + 1]


def _free_sum(law: RenewalLaw, z: np.ndarray, n1: int, n2: int) -> float:
    tail = _escape_cached(law, n1, n2)[::-1, ::-1]
    inner = z[1:, 1:] * tail[1:, 1:]
    return math.fsum(inner.ravel()) + z[0, 0] * tail[0, 0]


def _free_sum_log(law: RenewalLaw, logz: np.ndarray, n1: int, n2: int) -> float:
    tail = np.log(_escape_cached(law, n1, n2)[::-1, ::-1])
    terms = np.concatenate(([logz[0, 0] + tail[0, 0]], (logz[1:, 1:] + tail[1:, 1:]).ravel()))
    return float(logsumexp(terms))


# ---------------------------------------------------------------------------
# partition functions


def _finish(law, z, box, variant, params, log_domain, meta=None) -> PartitionValue:
    n1, n2 = box.n1, box.n2
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if log_domain:
        if variant == "free":
            lv = _free_sum_log(law, z, n1, n2)
        else:
            lv = float(z[n1, n2])
            if variant == "cond":
                lv -= math.log(mass_function(law, box)(n1, n2))
        return PartitionValue(math.exp(lv), variant, box, params, log_value=lv, meta=meta or {})
    if variant == "free":
        v = _free_sum(law, z, n1, n2)
    else:
        v = float(z[n1, n2])
        if variant == "cond":
            v = v / mass_function(law, box)(n1, n2)
    return PartitionValue(v, variant, box, params, log_value=math.log(v) if v > 0 else -math.inf, meta=meta or {})


def _logk(law: RenewalLaw, nmax: int) -> np.ndarray:
    k = law.kvec(nmax)
    with np.errstate(divide="ignore"):
        return np.log(k)


def homogeneous_partition(law: RenewalLaw, box, h: float = 0.0, variant: str = "q", log_domain: bool = False) -> PartitionValue:
    box = LatticeBox.of(box)
    n1, n2 = box.n1, box.n2
    if log_domain:
        logw = np.full((n1 + 1, n2 + 1), float(h))
        z = cone_dp_log(_logk(law, n1 + n2), logw, n1, n2)
    elif h == 0.0 and variant != "free":
        z = mass_function(law, box).values
    else:
        z = cone_dp(law.kvec(n1 + n2), np.full((n1 + 1, n2 + 1), math.exp(h)), n1, n2)
    return _finish(law, z, box, variant, (0.0, float(h)), log_domain)


def _weights(sample: DisorderSample, n1: int, n2: int, beta: float, h: float) -> tuple[np.ndarray, float]:
    if beta == sample.beta:
        lam = sample.lambda_beta
    else:
        lam = log_mgf(sample.spec, beta)
    lw = np.zeros((n1 + 1, n2 + 1))
    lw[1:, 1:] = beta * sample.omega_block(n1, n2) - lam + h
    return lw, lam


def quenched_partition(
    law: RenewalLaw,
    sample: DisorderSample,
    box,
    beta: float | None = None,
    h: float = 0.0,
    variant: str = "q",
    log_domain: bool = False,
) -> PartitionValue:
    """Z(i) = exp(beta omega(i) - lambda(beta) + h) sum_{j < i} Z(j) K(|i - j|)."""
    box = LatticeBox.of(box)
    n1, n2 = box.n1, box.n2
    if sample.shape[0] < n1 or sample.shape[1] < n2:
        raise ValueError("disorder sample does not cover the box")
    beta = sample.beta if beta is None else float(beta)
    lw, lam = _weights(sample, n1, n2, beta, h)
    if log_domain:
        z = cone_dp_log(_logk(law, n1 + n2), lw, n1, n2)
    else:
        z = cone_dp(law.kvec(n1 + n2), np.exp(lw), n1, n2)
    return _finish(law, z, box, variant, (beta, float(h)), log_domain, {"lambda": lam})


BLOCK = 256  # replicas per named stream; fixed so results never depend on chunking


def _index_block(spec: DisorderSpec, n1: int, n2: int, seed, op: str, block: int):
    rng = stream(seed, "polymer", op, block)
    hat = rng.choice(spec.size, size=(BLOCK, n1), p=spec.probs)
    bar = rng.choice(spec.size, size=(BLOCK, n2), p=spec.probs)
    return hat, bar


def _sample_stack(spec: DisorderSpec, n1: int, n2: int, beta: float, h: float, reps: int, seed, op: str, offset: int = 0):
    """Weights exp(beta omega - lambda + h) for replicas offset..offset+reps-1.

    Replica r reads row r mod BLOCK of block r // BLOCK of the stream ``op``.
    """
    lam = log_mgf(spec, beta)
    table = np.exp(beta * spec.V - lam + h)
    w = np.ones((reps, n1 + 1, n2 + 1))
    r = offset
    while r < offset + reps:
        b = r // BLOCK
        hat, bar = _index_block(spec, n1, n2, seed, op, b)
        lo = r - b * BLOCK
        hi = min(BLOCK, offset + reps - b * BLOCK)
        for k in range(lo, hi):
            w[r - offset + k - lo, 1:, 1:] = table[np.ix_(hat[k], bar[k])]
        r += hi - lo
    return w


def rescaled_partition(
    law: RenewalLaw, spec: DisorderSpec, schedule: ScalingSchedule, n: int, t=(1.0, 1.0), seed=0, replica: int = 0
) -> PartitionValue:
    """n^{2-alpha} L Z^q_{floor(nt), h_n} with disorder at beta_n."""
    if not 0 < law.alpha < 1:
        raise ValueError("rescaled partition needs alpha in (0, 1)")
    meta = {"degenerate": law.alpha <= 0.5}
    if meta["degenerate"]:
        warnings.warn("alpha <= 1/2: degenerate regime", DegenerateRegimeWarning, stacklevel=2)
    n1, n2 = int(math.floor(n * t[0])), int(math.floor(n * t[1]))
    box = LatticeBox(n1, n2)
    bn, hn = schedule.beta(n), schedule.h(n)
    if bn == 0.0:
        pv = homogeneous_partition(law, box, hn)
    else:
        sample = sample_fields(spec, n1, n2, bn, stream(seed, "polymer", "rescaled_partition", replica))
        pv = quenched_partition(law, sample, box, bn, hn)
    c = schedule.rescale(n)
    meta.update(beta_n=bn, h_n=hn)
    return PartitionValue(c * pv.value, "q", box, (bn, hn), rescale=c, meta=meta)


def rescaled_partition_mc(law, spec, schedule, n, t=(1.0, 1.0), reps=1000, seed=0, chunk=256) -> dict:
    """Replicas of the rescaled constrained partition function (batched DP)."""
    if law.alpha <= 0.5:
        warnings.warn("alpha <= 1/2: degenerate regime", DegenerateRegimeWarning, stacklevel=2)
    n1, n2 = int(math.floor(n * t[0])), int(math.floor(n * t[1]))
    bn, hn = schedule.beta(n), schedule.h(n)
    kv = law.kvec(n1 + n2)
    vals = np.empty(reps)
    for c0 in range(0, reps, chunk):
        m = min(chunk, reps - c0)
        w = _sample_stack(spec, n1, n2, bn, hn, m, seed, "rescaled_partition", c0)
        z = cone_dp_batch(kv, w, n1, n2)
        vals[c0 : c0 + m] = z[:, n1, n2]
    vals *= schedule.rescale(n)
    return _summary(vals, n=n, beta_n=bn, h_n=hn, degenerate=law.alpha <= 0.5)


def _summary(vals: np.ndarray, **extra) -> dict:
    reps = vals.size
    mean = float(np.mean(vals))
    var = float(np.var(vals, ddof=1)) if reps > 1 else 0.0
    # SE of the sample variance from the fourth central moment
    c = vals - mean
    m4 = float(np.mean(c**4))
    se_var = math.sqrt(max(m4 - var**2 * (reps - 3) / (reps - 1), 0.0) / reps) if reps > 3 else float("nan")
    out = {"values": vals, "mean": mean, "var": var, "se_mean": math.sqrt(var / reps), "se_var": se_var, "reps": reps}
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# second moments


def chains(n1: int, n2: int, end: bool = True) -> list[tuple[tuple[int, int], ...]]:
    """Strictly increasing chains of points of [1, n1] x [1, n2].

    With ``end`` the chain must finish at (n1, n2); otherwise every chain,
    including the empty one, is returned.
    """
    out: list[tuple[tuple[int, int], ...]] = []

    def rec(prefix, a, b):
        if end:
            if (a, b) == (n1, n2):
                out.append(prefix)
                return
        else:
            out.append(prefix)
        for i in range(a + 1, n1 + 1):
            for j in range(b + 1, n2 + 1):
                if end and (i == n1) != (j == n2):
                    continue
                rec(prefix + ((i, j),), i, j)

    rec((), 0, 0)
    return out


def _chain_weight(law: RenewalLaw, ch) -> float:
    w = 1.0
    a = b = 0
    for i, j in ch:
        w *= law.K(i - a + j - b)
        a, b = i, j
    return w


def _pattern_expectation(spec: DisorderSpec, beta: float, sites: dict, cache: dict, lam: float) -> float:
    """E[prod_s exp(q_s (beta omega_s - lambda))] for sites {(row, col): q}."""
    rows = sorted({r for r, _ in sites})
    cols = sorted({c for _, c in sites})
    rmap = {r: i for i, r in enumerate(rows)}
    cmap = {c: i for i, c in enumerate(cols)}
    key = tuple(sorted((rmap[r], cmap[c], q) for (r, c), q in sites.items()))
    if key in cache:
        return cache[key]
    # connected components of the row/column bipartite graph
    parent = list(range(len(rows) + len(cols)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for r, c, _ in key:
        parent[find(r)] = find(len(rows) + c)
    groups: dict[int, list] = {}
    for r, c, q in key:
        groups.setdefault(find(r), []).append((r, c, q))
    mats = {}
    p = spec.probs
    total = 1.0
    for comp in groups.values():
        rs = sorted({r for r, _, _ in comp})
        cs = sorted({c for _, c, _ in comp})
        letters = {("r", r): chr(97 + i) for i, r in enumerate(rs)}
        letters.update({("c", c): chr(97 + len(rs) + i) for i, c in enumerate(cs)})
        ops, subs = [], []
        for r in rs:
            ops.append(p)
            subs.append(letters[("r", r)])
        for c in cs:
            ops.append(p)
            subs.append(letters[("c", c)])
        for r, c, q in comp:
            if q not in mats:
                mats[q] = np.exp(q * (beta * spec.V - lam))
            ops.append(mats[q])
            subs.append(letters[("r", r)] + letters[("c", c)])
        total *= float(np.einsum(",".join(subs) + "->", *ops, optimize="greedy"))
    cache[key] = total
    return total


def second_moment_exact(law: RenewalLaw, spec: DisorderSpec, box, beta: float, h: float = 0.0) -> float:
    """E[(Z^q)^2] by enumerating ordered pairs of chains and the disorder exactly."""
    box = LatticeBox.of(box)
    if box.n1 > 5 or box.n2 > 5:
        raise ValueError("second_moment_exact is limited to boxes <= (5, 5)")
    chs = chains(box.n1, box.n2)
    wts = [_chain_weight(law, c) for c in chs]
    lam = log_mgf(spec, beta)
    cache: dict = {}
    terms = []
    for a, ca in enumerate(chs):
        for b, cb in enumerate(chs):
            sites: dict = {}
            for s in ca:
                sites[s] = sites.get(s, 0) + 1
            for s in cb:
                sites[s] = sites.get(s, 0) + 1
            e = _pattern_expectation(spec, beta, sites, cache, lam)
            terms.append(wts[a] * wts[b] * math.exp(h * (len(ca) + len(cb))) * e)
    return math.fsum(terms)


def replica_second_moment(law: RenewalLaw, spec: DisorderSpec, box, beta: float, h: float = 0.0) -> float:
    """sum over chain pairs of exp((lambda(2 beta) - 2 lambda(beta)) |I cap J|) (valid when the
    conditional law of omega given omega_hat does not depend on omega_hat)."""
    box = LatticeBox.of(box)
    chs = chains(box.n1, box.n2)
    wts = [_chain_weight(law, c) for c in chs]
    g = log_mgf(spec, 2 * beta) - 2 * log_mgf(spec, beta)
    sets = [frozenset(c) for c in chs]
    terms = []
    for a in range(len(chs)):
        for b in range(len(chs)):
            k = len(sets[a] & sets[b])
            terms.append(wts[a] * wts[b] * math.exp(g * k + h * (len(chs[a]) + len(chs[b]))))
    return math.fsum(terms)


def second_moment_mc(law, spec, box, beta, h=0.0, reps=10000, seed=0, variant="q", chunk=4096) -> dict:
    box = LatticeBox.of(box)
    n1, n2 = box.n1, box.n2
    kv = law.kvec(n1 + n2)
    vals = np.empty(reps)
    for c0 in range(0, reps, chunk):
        m = min(chunk, reps - c0)
        w = _sample_stack(spec, n1, n2, beta, h, m, seed, "second_moment_mc", c0)
        z = cone_dp_batch(kv, w, n1, n2)
        if variant == "free":
            vals[c0 : c0 + m] = [_free_sum(law, zz, n1, n2) for zz in z]
        else:
            vals[c0 : c0 + m] = z[:, n1, n2]
    sq = vals**2
    return {
        "mean": float(vals.mean()),
        "se_mean": float(vals.std(ddof=1) / math.sqrt(reps)),
        "second": float(sq.mean()),
        "se_second": float(sq.std(ddof=1) / math.sqrt(reps)),
        "reps": reps,
    }


def free_second_moments(law, spec, beta, n_max, reps, seed, h=0.0, chunk=512) -> dict:
    """MC E[(Z^free_{(n,n)})^2] for every n <= n_max from one DP per replica."""
    kv = law.kvec(2 * n_max)
    tail = np.ascontiguousarray(_escape_cached(law, n_max, n_max))
    acc = np.zeros((reps, n_max + 1))
    for c0 in range(0, reps, chunk):
        m = min(chunk, reps - c0)
        w = _sample_stack(spec, n_max, n_max, beta, h, m, seed, "free_second_moments", c0)
        z = cone_dp_batch(kv, w, n_max, n_max)
        for r in range(m):
            acc[c0 + r] = diagonal_free(z[r], tail, n_max)
    sq = acc**2
    return {
        "n": np.arange(n_max + 1),
        "mean": sq.mean(axis=0),
        "se": sq.std(axis=0, ddof=1) / math.sqrt(reps) if reps > 1 else np.zeros(n_max + 1),
        "first": acc.mean(axis=0),
        "reps": reps,
    }


@dataclass(frozen=True)
class NBeta:
    n: int
    exceeds: bool
    table: dict

    def __str__(self) -> str:
        return f"exceeds {self.n}" if self.exceeds else str(self.n)


def n_beta_estimate(law, spec, beta, C=10.0, n_max=32, reps=2000, seed=0) -> NBeta:
    """Largest n <= n_max such that estimate + 2 SE <= C holds for every m <= n."""
    if not C > 1:
        raise ValueError("C must be > 1")
    tab = free_second_moments(law, spec, beta, n_max, reps, seed)
    ok = tab["mean"] + 2.0 * tab["se"] <= C
    n = 0
    for m in range(1, n_max + 1):
        if not ok[m]:
            break
        n = m
    return NBeta(n=n, exceeds=n == n_max, table=tab)


def free_energy_estimate(law, spec, beta, h, n_list, reps, seed) -> list[tuple[int, float, float]]:
    """(n, mean of log Z^q_{(n,n)} / n, SE) using the log-domain recursion."""
    out = []
    for n in n_list:
        lk = _logk(law, 2 * n)
        vals = np.empty(reps)
        for r in range(reps):
            rng = stream(seed, "polymer", "free_energy", n * 1_000_003 + r)
            sample = sample_fields(spec, n, n, beta, rng)
            lw, _ = _weights(sample, n, n, beta, h)
            vals[r] = cone_dp_log(lk, lw, n, n)[n, n] / n
        se = float(vals.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
        out.append((int(n), float(vals.mean()), se))
    return out

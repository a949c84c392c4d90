"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Failures here are reported as they are; the tolerances are the stated ones.
"""

import itertools
import math
import time

import numpy as np

from gpslab.chaos import (
    ChaosKernel,
    DivergenceError,
    QuadSpec,
    avoiding_permutations,
    continuum_homogeneous,
    gamma_bound,
    gamma_bound_constant,
    nu_pair_integral,
    psi_norm_k,
    tilde_z1_mc,
    tilde_z1_variance,
)
from gpslab.disorder import (
    INFINITY,
    appendix_c_law,
    classify_r,
    designed_r1_law,
    log_mgf,
    make_spec,
    rademacher_product,
    sample_fields,
    two_point_correlation,
)
from gpslab.field import (
    cov_k,
    cov_k_product,
    discrete_field_batch,
    moment_estimate,
    sample_limit_batch,
    uniform_axes,
)
from gpslab.polymer import (
    ScalingSchedule,
    free_second_moments,
    homogeneous_partition,
    n_beta_estimate,
    quenched_partition,
    replica_second_moment,
    rescaled_partition,
    second_moment_exact,
    second_moment_mc,
)
from gpslab.renewal import intersection_stats

SEED = 20261014
TERNARY = make_spec([-1.0, 0.0, 1.0], [0.25, 0.5, 0.25])


def brute_quenched(law, smp, n1, n2, beta, h):
    """Sum over increasing chains of [1,n1]x[1,n2] ending at (n1, n2)."""
    lam = log_mgf(smp.spec, beta)
    total = 0.0
    for k in range(1, min(n1, n2) + 1):
        for xs in itertools.combinations(range(1, n1), k - 1):
            for ys in itertools.combinations(range(1, n2), k - 1):
                pts = list(zip(xs, ys)) + [(n1, n2)]
                w, prev = 1.0, (0, 0)
                for p in pts:
                    w *= law.K(p[0] - prev[0] + p[1] - prev[1])
                    w *= math.exp(beta * smp.omega(*p) - lam + h)
                    prev = p
                total += w
    return total


def wls_slope(x, y, se):
    w = 1.0 / np.asarray(se) ** 2
    x, y = np.asarray(x, float), np.asarray(y, float)
    xm = np.sum(w * x) / w.sum()
    ym = np.sum(w * y) / w.sum()
    sxx = np.sum(w * (x - xm) ** 2)
    slope = np.sum(w * (x - xm) * (y - ym)) / sxx
    return slope, math.sqrt(1.0 / sxx)


def test_criterion_01_dp_matches_enumeration(law, verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    pool = [TERNARY, rademacher_product(), designed_r1_law(), appendix_c_law(0.5, 0.75)]
    worst = 0.0
    for draw in range(20):
        if draw % 5 == 4:
            atoms = np.sort(rng.normal(size=3))
            spec = make_spec(atoms, rng.dirichlet(np.ones(3)))
        else:
            spec = pool[draw % 5]
        beta, h = rng.uniform(0.0, 1.5), rng.uniform(-1.0, 1.0)
        for n1, n2 in itertools.product(range(1, 5), repeat=2):
            smp = sample_fields(spec, n1, n2, beta, np.random.SeedSequence([SEED, draw, n1, n2]))
            got = quenched_partition(law, smp, (n1, n2), beta, h).value
            want = brute_quenched(law, smp, n1, n2, beta, h)
            worst = max(worst, abs(got - want) / want)
    dt = time.perf_counter() - t0
    verdict(1, worst < 1e-12 and dt < 10, f"max rel err {worst:.2e} over 20 draws x 16 boxes, {dt:.1f}s")


def test_criterion_02_annealed_identity(law, verdict):
    t0 = time.perf_counter()
    spec, beta, h = TERNARY, 0.8, 0.1
    total = 0.0
    for hat in itertools.product(range(3), repeat=2):
        for bar in itertools.product(range(3), repeat=2):
            w = np.prod(spec.probs[list(hat)]) * np.prod(spec.probs[list(bar)])
            smp = sample_fields(spec, 2, 2, beta, 0)
            smp = type(smp)(spec, np.array(hat), np.array(bar), beta, log_mgf(spec, beta))
            total += w * quenched_partition(law, smp, (2, 2), beta, h).value
    hom2 = homogeneous_partition(law, (2, 2), h).value
    rel = abs(total - hom2) / hom2
    vals = np.empty(10_000)
    for i in range(vals.size):
        smp = sample_fields(spec, 6, 6, beta, np.random.SeedSequence([SEED, i]))
        vals[i] = quenched_partition(law, smp, (6, 6), beta, h).value
    hom6 = homogeneous_partition(law, (6, 6), h).value
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    z = abs(vals.mean() - hom6) / se
    dt = time.perf_counter() - t0
    ok = rel < 1e-12 and z < 4 and dt < 60
    verdict(2, ok, f"(2,2) rel err {rel:.1e}; (6,6) MC off by {z:.2f} SE; {dt:.1f}s")


def test_criterion_03_classification(verdict):
    t0 = time.perf_counter()
    notes, ok = [], True
    c = classify_r(rademacher_product())
    ok &= c.r == INFINITY
    notes.append(f"rademacher {c.r}")
    c = classify_r(TERNARY)
    ok &= c.r == 2 and abs(c.sigma_r_sq - 1 / 64) < 1e-10
    notes.append(f"ternary r={c.r} sigma^2={c.sigma_r_sq:.12g}")
    c = classify_r(appendix_c_law(0.5, 0.75))
    ok &= c.r == 4
    notes.append(f"(a,b)=(0.5,0.75) r={c.r}")
    # u = a(2-a) = 0.2 and v = b(2-b) = 0.8
    c = classify_r(appendix_c_law(1 - math.sqrt(0.8), 1 - math.sqrt(0.2)))
    ok &= c.r == 8
    notes.append(f"(u,v)=(0.2,0.8) r={c.r}")
    dt = time.perf_counter() - t0
    verdict(3, ok and dt < 5, "; ".join(notes) + f"; {dt:.1f}s")


def test_criterion_04_correlation_asymptotics(verdict):
    cases = [(designed_r1_law(), 1, 1e-3, 1e-2), (TERNARY, 2, 1e-3, 1e-2), (appendix_c_law(0.5, 0.75), 4, 10**-1.5, 5e-2)]
    ok, notes = True, []
    for spec, r, beta, tol in cases:
        c = classify_r(spec)
        dev = abs(two_point_correlation(spec, beta) / beta ** (2 * r) - c.sigma_r_sq) / c.sigma_r_sq
        zero = two_point_correlation(spec, beta, "non-aligned")
        ok &= c.r == r and dev < tol and zero == 0.0
        notes.append(f"r={r} dev {dev:.1e} (tol {tol:g}), non-aligned {zero}")
    verdict(4, ok, "; ".join(notes))


def test_criterion_05_gaussian_field(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    u, v = rng.uniform(0, 2, (10_000, 2)), rng.uniform(0, 2, (10_000, 2))
    resid = float(np.max(np.abs(cov_k(u, v) - cov_k_product(u, v))))
    axes = uniform_axes((1.0, 1.0), 4)
    s = sample_limit_batch(axes, 200_000, SEED, "two-bm")
    probe = [(i, j) for i in range(1, 5) for j in range(1, 5)]
    worst = 0.0
    for i, j in probe:
        for k, l in probe:
            p = s[:, i, j] * s[:, k, l]
            target = cov_k((axes[0][i], axes[1][j]), (axes[0][k], axes[1][l]))
            worst = max(worst, abs(p.mean() - target) / (p.std(ddof=1) / math.sqrt(p.size)))
    # rectangle [0.25, 0.75] x [0.5, 1]
    inc = s[:, 3, 4] - s[:, 1, 4] - s[:, 3, 2] + s[:, 1, 2]
    du, ds = 0.5, 0.5
    sq = inc**2
    zinc = abs(sq.mean() - du * ds * (du + ds)) / (sq.std(ddof=1) / math.sqrt(sq.size))
    dt = time.perf_counter() - t0
    ok = resid < 1e-13 and worst < 4 and zinc < 4 and dt < 120
    verdict(5, ok, f"identity residual {resid:.1e}; worst probe pair {worst:.2f} SE; increment {zinc:.2f} SE; {dt:.1f}s")


def test_criterion_06_discrete_field_moments(law, verdict):
    t0 = time.perf_counter()
    spec = designed_r1_law()
    c = classify_r(spec)
    sch = ScalingSchedule.from_law(law, 1, 1.0)
    n = 256
    b = sch.beta(n)
    x = discrete_field_batch(spec, sch, n, [(1.0, 1.0)], 10_000, SEED, c.sigma_r_sq)[:, 0]
    target2 = 2.0 + c.sigma_sq / (c.sigma_r_sq * n * b * b)
    m2, se2 = moment_estimate(x, ell=2)
    m3, se3 = moment_estimate(x, ell=3)
    m4, se4 = moment_estimate(x, ell=4)
    # exact finite-n second moment from the two-point correlations
    exact2 = (n * n * two_point_correlation(spec, b, "equal") + 2 * n * n * (n - 1) * two_point_correlation(spec, b)) / (
        c.sigma_r_sq * n**3 * b * b
    )
    z2 = abs(m2 - target2) / se2
    z3 = abs(m3) / se3
    z4 = abs(m4 - 3 * target2**2) / se4
    dt = time.perf_counter() - t0
    ok = z2 < 4 and z3 < 4 and z4 < 4 and dt < 600
    verdict(
        6,
        ok,
        f"m2 {m2:.4f} vs {target2:.5f} ({z2:.2f} SE, exact finite-n {exact2:.5f}); m3 {z3:.2f} SE; m4 {z4:.2f} SE; {dt:.0f}s",
    )


def test_criterion_07_nu_threshold(verdict):
    t0 = time.perf_counter()
    g = lambda s1, s2: (s1 + s2) ** (0.75 - 2.0)  # noqa: E731
    r = nu_pair_integral(g, g, (1.0, 1.0), QuadSpec(levels=(2, 3, 4, 5, 6, 7)))
    change = abs(r.history[-1] - r.history[-2]) / abs(r.history[-1])
    bad = lambda s1, s2: (s1 + s2) ** (0.45 - 2.0)  # noqa: E731
    try:
        nu_pair_integral(bad, bad, (1.0, 1.0))
        fired = False
    except DivergenceError:
        fired = True
    dt = time.perf_counter() - t0
    ok = change < 0.01 and r.value <= 64 and fired and dt < 60
    verdict(7, ok, f"value {r.value:.5f}, last change {change:.1e}, bound 64; divergence at 0.45 fired={fired}; {dt:.1f}s")


def test_criterion_08_psi_norms(limit_phi, verdict):
    t0 = time.perf_counter()
    n3, n4 = len(avoiding_permutations(3).permutations), len(avoiding_permutations(4).permutations)
    ker = {k: ChaosKernel(0.75, k=k, profile=limit_phi) for k in (1, 2, 3)}
    vals = {k: psi_norm_k(ker[k], "closed-grid") for k in (1, 2)}
    # the closed grid stops at k = 2
    vals[3] = psi_norm_k(ker[3], "mc-importance", budget=400_000, seed=SEED)
    C = gamma_bound_constant(vals[1].value, 0.75)
    bound_ok = all(vals[k].value <= gamma_bound(C, k, 0.75) * (1 + 1e-12) for k in (1, 2, 3))
    mc = psi_norm_k(ker[2], "mc-importance", budget=400_000, seed=SEED)
    g2 = vals[2]
    diff = abs(g2.value - mc.value)
    allowed = max(0.02 * g2.value, 2 * math.hypot(g2.abserr, mc.abserr))
    dt = time.perf_counter() - t0
    ok = n3 == 5 and n4 == 14 and bound_ok and diff <= allowed and dt < 900
    bounds = ", ".join(f"k={k}: {vals[k].value:.4g} <= {gamma_bound(C, k, 0.75):.4g}" for k in (1, 2, 3))
    verdict(8, ok, f"|S3|={n3}, |S4|={n4}; C={C:.4f}; {bounds}; k=2 grid-mc diff {diff:.3g} (allowed {allowed:.3g}); {dt:.0f}s")


def test_criterion_09_first_chaos_variance(law, limit_phi, verdict):
    t0 = time.perf_counter()
    spec = designed_r1_law()
    c = classify_r(spec)
    sch = ScalingSchedule.from_law(law, 1, 1.0)
    mc = tilde_z1_mc(law, spec, sch, 128, 10_000, seed=SEED)
    norm = psi_norm_k(ChaosKernel(0.75, k=1, profile=limit_phi), "closed-grid").value
    target = c.sigma_r_sq * 1.0**2 * norm
    exact = tilde_z1_variance(law, spec, sch, 128)
    rel = abs(mc["var"] - target) / target
    dt = time.perf_counter() - t0
    verdict(
        9,
        rel < 0.10 and dt < 600,
        f"MC var {mc['var']:.5f} +- {mc['se_var']:.5f} vs {target:.5f} (rel {rel:.3f}); exact finite-n {exact:.5f}; {dt:.0f}s",
    )


def test_criterion_10_homogeneous_continuum(law, limit_phi, verdict):
    t0 = time.perf_counter()
    sch = ScalingSchedule.from_law(law, 1, 0.0, 1.0)
    target = continuum_homogeneous((1.0, 1.0), 1.0, 0.75, limit_phi)
    gaps = [abs(rescaled_partition(law, TERNARY, sch, n).value - target) / target for n in (64, 128, 256)]
    dt = time.perf_counter() - t0
    ok = gaps[0] > gaps[1] > gaps[2] and gaps[2] < 0.02 and dt < 300
    verdict(10, ok, f"continuum {target:.5f}; rel gaps {', '.join(f'{g:.4f}' for g in gaps)}; {dt:.1f}s")


def test_criterion_11_replica_second_moment(law, verdict):
    t0 = time.perf_counter()
    spec = rademacher_product()
    worst = 0.0
    for beta in (0.2, 0.7, 1.5):
        for box in itertools.product(range(1, 4), repeat=2):
            a = second_moment_exact(law, spec, box, beta)
            b = replica_second_moment(law, spec, box, beta)
            worst = max(worst, abs(a - b) / a)
    mc = second_moment_mc(law, TERNARY, (3, 3), 0.5, reps=100_000, seed=SEED)
    exact = second_moment_exact(law, TERNARY, (3, 3), 0.5)
    z = abs(mc["second"] - exact) / mc["se_second"]
    dt = time.perf_counter() - t0
    verdict(11, worst < 1e-10 and z < 4 and dt < 300, f"replica identity max rel err {worst:.1e}; MC {z:.2f} SE; {dt:.1f}s")


def test_criterion_12_degenerate_regime(law, verdict):
    t0 = time.perf_counter()
    spec, beta = rademacher_product(), 0.2
    res = free_second_moments(law, spec, beta, 32, 8000, SEED)
    ns = [8, 16, 24, 32]
    mean = [res["mean"][n] for n in ns]
    se = [res["se"][n] for n in ns]
    slope, sse = wls_slope(ns, mean, se)
    nb = n_beta_estimate(law, spec, beta, C=10.0, n_max=32, reps=2000, seed=SEED)
    dt = time.perf_counter() - t0
    ok = abs(slope) <= 2 * sse and max(mean) < 10.0 and nb.exceeds and dt < 600
    verdict(
        12,
        ok,
        f"E[(Z^free)^2] at n={ns}: {', '.join(f'{m:.4f}' for m in mean)}; slope {slope:.2e} ({abs(slope) / sse:.2f} SE); n_beta {nb}; {dt:.1f}s",
    )


def test_criterion_13_intersection_tails(law, verdict):
    t0 = time.perf_counter()
    s = intersection_stats(law, (64, 64), 50_000, SEED, k_max=6)
    fit, gc = s.geometric_fit, s.gamma_check
    dt = time.perf_counter() - t0
    ok = fit["r2"] > 0.98 and gc["holds"] and dt < 300
    verdict(13, ok, f"geometric R^2 {fit['r2']:.4f}; Gamma-growth C {gc['C']:.3f} holds={gc['holds']} for k<=6; {dt:.1f}s")

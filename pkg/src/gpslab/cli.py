"""Command line runner: ``gpslab <subcommand>``.

Every run writes its data files and a ``manifest.json`` (resolved config,
version, seed ledger, file index) into the output directory.  CSV files start
with one ``#`` line carrying the timestamp; everything after it depends only
on the config and the seed.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import json
import math
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .seeding import derived_seed

DEFAULTS = {
    "model": {"alpha": 0.75, "slow_constant": 1.0},
    "disorder": {"marginal": [[-1.0, 0.5], [1.0, 0.5]], "interaction": "product"},
    "schedule": {"beta_hat": 1.0, "h_hat": 0.0, "r": "auto"},
    "run": {"seed": 0, "t": [1.0, 1.0], "reps": 1000, "variant": "q", "k_max": 3},
    "output": {"dir": "gpslab-out", "formats": ["csv"]},
    "quad": {},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "disorder":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        import tomli

        with open(path, "rb") as fh:
            user = tomli.load(fh)
        cfg = _merge(cfg, user)
        d = cfg.get("disorder", {})
        if isinstance(d, dict) and "file" in d:
            ref = Path(d["file"])
            if not ref.is_absolute():
                ref = Path(path).parent / ref
            d["file"] = str(ref)
    return cfg


def _spec(cfg):
    from .disorder import load_spec, spec_from_dict

    d = cfg["disorder"]
    if "file" in d:
        return load_spec(d["file"])
    return spec_from_dict(d)


def _law(cfg):
    from .renewal import make_law

    m = cfg["model"]
    return make_law(float(m["alpha"]), float(m.get("slow_constant", 1.0)))


def _resolve_r(cfg, spec, manifest):
    from .disorder import classify_r

    s = cfg["schedule"]
    cl = classify_r(spec)
    manifest["classification"] = cl.to_dict()
    if s.get("r", "auto") == "auto" and float(s.get("beta_hat", 0.0)) == 0.0 and not cl.finite:
        # no disorder in play: r only labels the schedule
        s["r"] = 1
    if s.get("r", "auto") == "auto":
        if not cl.finite:
            raise UsageError(f"r = auto but the disorder law is {cl.r}")
        s["r"] = int(cl.r)
    return int(s["r"]), cl


# ---------------------------------------------------------------------------
# output


class Run:
    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.command = command
        self.out = Path(cfg["output"]["dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[dict] = []
        self.ledger: list[dict] = []
        self.extra: dict = {}
        self.t0 = time.time()

    @property
    def seed(self) -> int:
        return int(self.cfg["run"]["seed"])

    def streams(self, module: str, op: str, count: int, root: int | None = None):
        root = self.seed if root is None else root
        self.ledger.append(
            {
                "module": module,
                "op": op,
                "root": root,
                "derived": [derived_seed(root, module, op, i) for i in range(int(count))],
            }
        )

    def write_csv(self, name: str, header: list[str], rows) -> Path:
        path = self.out / name
        with path.open("w", newline="") as fh:
            fh.write(f"# {self.command} {_dt.datetime.now(_dt.timezone.utc).isoformat()}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(x) for x in row])
        self.files.append({"path": name, "kind": "csv"})
        return path

    def write_json(self, name: str, obj) -> Path:
        path = self.out / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
        self.files.append({"path": name, "kind": "json"})
        return path

    def add_file(self, name: str, kind: str):
        self.files.append({"path": name, "kind": kind})

    def finish(self) -> Path:
        man = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg,
            "wall_clock_s": time.time() - self.t0,
            "seed_ledger": self.ledger,
            "files": self.files,
        }
        man.update(self.extra)
        path = self.out / "manifest.json"
        path.write_text(json.dumps(man, indent=2, sort_keys=True, default=_json_default) + "\n")
        return path


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return x


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# commands


def cmd_classify(args, cfg) -> int:
    from .disorder import SpecError, UNDETERMINED, classify_r, load_spec

    try:
        spec = load_spec(args.spec) if args.spec else _spec(cfg)
        cl = classify_r(spec)
    except (SpecError, ValueError, OSError) as exc:
        print(f"invalid disorder specification: {exc}", file=sys.stderr)
        return 1
    report = cl.to_dict()
    print(json.dumps(report, default=_json_default))
    if args.out_given:
        run = Run(cfg, "classify")
        run.write_json("classify.json", report)
        run.finish()
    return 2 if cl.r == UNDETERMINED else 0


def cmd_renewal_mass(args, cfg) -> int:
    from .renewal import mass_function

    law = _law(cfg)
    n1, n2 = args.box
    tab = mass_function(law, (n1, n2))
    run = Run(cfg, "renewal-mass")
    u = tab.values
    run.write_csv(
        "renewal_mass.csv",
        ["i1", "i2", "u"],
        ((i, j, float(u[i, j])) for i in range(n1 + 1) for j in range(n2 + 1)),
    )
    run.extra["normalization_residual"] = law.normalization_residual()
    run.finish()
    return 0


def cmd_partition(args, cfg) -> int:
    from .disorder import sample_fields
    from .polymer import homogeneous_partition, quenched_partition
    from .seeding import stream

    law = _law(cfg)
    n1, n2 = args.box
    beta = float(args.beta)
    h = float(args.h)
    run = Run(cfg, "partition")
    rows = []
    if beta == 0.0:
        pv = homogeneous_partition(law, (n1, n2), h, args.variant, args.log_domain)
        rows.append((0, pv.value, pv.log_value if pv.log_value is not None else math.log(pv.value)))
    else:
        spec = _spec(cfg)
        reps = int(args.reps)
        run.streams("cli", "partition", reps)
        for r in range(reps):
            smp = sample_fields(spec, n1, n2, beta, stream(run.seed, "cli", "partition", r))
            pv = quenched_partition(law, smp, (n1, n2), beta, h, args.variant, args.log_domain)
            lv = pv.log_value if pv.log_value is not None else math.log(pv.value)
            rows.append((r, pv.value, lv))
    run.write_csv("partition.csv", ["replica", "value", "log_value"], rows)
    run.finish()
    return 0


def cmd_second_moment(args, cfg) -> int:
    from .polymer import replica_second_moment, second_moment_exact, second_moment_mc

    law = _law(cfg)
    spec = _spec(cfg)
    box = tuple(args.box)
    run = Run(cfg, "second-moment")
    res = {"box": list(box), "beta": args.beta, "h": args.h, "method": args.method}
    if args.method == "exact":
        res["value"] = second_moment_exact(law, spec, box, args.beta, args.h)
    elif args.method == "replica":
        res["value"] = replica_second_moment(law, spec, box, args.beta, args.h)
    else:
        run.streams("polymer", "second_moment_mc", -(-int(args.reps) // 256))
        mc = second_moment_mc(law, spec, box, args.beta, args.h, reps=int(args.reps), seed=run.seed)
        res.update({k: v for k, v in mc.items() if k != "values"})
    run.write_json("second_moment.json", res)
    run.finish()
    print(json.dumps(res, default=_json_default))
    return 0


def cmd_field_dump(args, cfg) -> int:
    from .disorder import sample_fields
    from .field import partial_sum_field, sample_limit_field, uniform_axes, write_binary, write_csv
    from .polymer import ScalingSchedule
    from .seeding import stream

    run = Run(cfg, "field-dump")
    t = tuple(float(x) for x in cfg["run"]["t"])
    res = int(args.resolution)
    kinds = ["discrete", "limit"] if args.kind == "both" else [args.kind]
    fmts = cfg["output"].get("formats", ["csv"]) if args.format is None else [args.format]
    if "both" in fmts:
        fmts = ["csv", "binary"]
    grids = []
    for kind in kinds:
        if kind == "limit":
            run.streams("cli", "field_dump_limit", 1)
            fg = sample_limit_field(uniform_axes(t, res), stream(run.seed, "cli", "field_dump_limit", 0))
        else:
            law = _law(cfg)
            spec = _spec(cfg)
            r, cl = _resolve_r(cfg, spec, run.extra)
            sch = ScalingSchedule.from_law(law, r, float(cfg["schedule"]["beta_hat"]))
            n = int(args.n)
            if n % res:
                raise UsageError("n must be a multiple of the grid resolution")
            run.streams("cli", "field_dump_discrete", 1)
            n1, n2 = int(math.floor(n * t[0])), int(math.floor(n * t[1]))
            smp = sample_fields(spec, n1, n2, sch.beta(n), stream(run.seed, "cli", "field_dump_discrete", 0))
            sig = cl.sigma_r_sq if cl.finite and cl.sigma_r_sq > 0 else 1.0
            fg = partial_sum_field(smp, sch, n, t, res, sigma_r_sq=sig)
        grids.append(fg)
        if "binary" in fmts:
            name = f"field_{kind}.bin"
            write_binary(run.out / name, fg)
            run.add_file(name, "binary")
    if "csv" in fmts:
        name = "field.csv"
        stamp = f"field-dump {_dt.datetime.now(_dt.timezone.utc).isoformat()}"
        write_csv(run.out / name, grids, header_line=stamp)
        run.add_file(name, "csv")
    run.finish()
    return 0


def _profile(name: str, law, m: int | None = None):
    from .renewal import limit_profile, surrogate_profile, table_profile

    if name == "surrogate":
        return None
    if name == "limit":
        return limit_profile(law)
    if name == "table":
        return table_profile(law, int(m or 256))
    raise UsageError(f"unknown phi source {name!r}")


def _quad(cfg):
    from .chaos import QuadSpec

    return QuadSpec.from_dict(cfg.get("quad", {}))


def cmd_chaos_norm(args, cfg) -> int:
    from .chaos import ChaosKernel, gamma_bound, gamma_bound_constant, psi_norm_k

    law = _law(cfg)
    t = tuple(float(x) for x in cfg["run"]["t"])
    prof = _profile(args.phi, law, args.m)
    kern = ChaosKernel(law.alpha, t, 1, args.variant, prof, float(cfg["schedule"].get("h_hat", 0.0)))
    run = Run(cfg, "chaos-norm")
    quad = _quad(cfg)
    k1 = psi_norm_k(kern, "closed-grid", quad=quad)
    C = gamma_bound_constant(k1.value, law.alpha, t)
    reports = []
    for k in range(1, int(args.k) + 1):
        method = args.method or ("closed-grid" if k <= 2 else "mc-importance")
        if k == 1 and method == "closed-grid":
            nn = k1
        else:
            nn = psi_norm_k(kern.with_k(k), method, budget=args.budget, seed=run.seed, quad=quad)
        rep = nn.to_dict(gamma_bound(C, k, law.alpha, t))
        rep["flagged"] = nn.flagged
        if nn.method == "mc-importance":
            run.streams("chaos", f"psi_norm_k{k}", len(nn.meta.get("per_term", [])))
        reports.append(rep)
    run.extra["gamma_constant"] = C
    run.write_json("chaos_norm.json", reports)
    run.finish()
    print(json.dumps(reports, default=_json_default))
    return 0


def cmd_scaling_experiment(args, cfg) -> int:
    from .chaos import chaos_variance_series, continuum_homogeneous
    from .polymer import DegenerateRegimeWarning, ScalingSchedule, rescaled_partition_mc

    law = _law(cfg)
    spec = _spec(cfg)
    run = Run(cfg, "scaling-experiment")
    rcfg = cfg["run"]
    n_list = [int(x) for x in (args.n_list or rcfg.get("n_list") or [rcfg.get("n", 32)])]
    reps = int(args.reps or rcfg["reps"])
    beta_hat = float(cfg["schedule"]["beta_hat"])
    h_hat = float(cfg["schedule"].get("h_hat", 0.0))
    t = tuple(float(x) for x in rcfg["t"])
    r, cl = _resolve_r(cfg, spec, run.extra)
    sch = ScalingSchedule.from_law(law, r, beta_hat, h_hat, cfg["schedule"].get("beta_decay"))
    if law.alpha <= 0.5:
        msg = f"alpha = {law.alpha} <= 1/2: no disordered limit is expected (degenerate regime)"
        if not sch.vanishing:
            msg += "; beta_n does not vanish, set schedule.beta_decay for a vanishing sequence"
        print(f"warning: {msg}", file=sys.stderr)
        run.extra["warning"] = msg
    prof = _profile(args.phi, law) if 0 < law.alpha < 1 else None
    mean_pred = continuum_homogeneous(t, h_hat, law.alpha, prof) if 0 < law.alpha < 1 else float("nan")
    var_pred = float("nan")
    if beta_hat > 0 and law.alpha > 0.5 and h_hat == 0.0 and cl.finite and sch.beta_decay is None:
        ser = chaos_variance_series(
            law.alpha, t, r, math.sqrt(cl.sigma_r_sq), beta_hat, int(rcfg.get("k_max", 3)), profile=prof, seed=run.seed
        )
        var_pred = ser["partial_sums"][-1]
        run.extra["variance_convention"] = ser["convention"]
    rows = []
    for n in n_list:
        sd = derived_seed(run.seed, "cli", "scaling_experiment", n)
        run.streams("polymer", "rescaled_partition", -(-reps // 256), root=sd)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateRegimeWarning)
            s = rescaled_partition_mc(law, spec, sch, n, t, reps=reps, seed=sd)
        rows.append((n, s["mean"], s["var"], s["se_mean"], s["se_var"], mean_pred, var_pred))
    run.write_csv("scaling.csv", ["n", "mean", "var", "se_mean", "se_var", "mean_pred", "var_pred"], rows)
    run.finish()
    return 0


def cmd_intersections(args, cfg) -> int:
    from .renewal import intersection_stats

    law = _law(cfg)
    run = Run(cfg, "intersections")
    reps = int(args.reps)
    s = intersection_stats(law, tuple(args.box), reps, run.seed, k_max=int(args.k_max))
    run.streams("renewal", "intersection_stats", 1)
    tail = s.tail()
    run.write_csv("intersection_tail.csv", ["k", "count_gt_k"], ((k, int(v)) for k, v in enumerate(tail)))
    rep = {
        "geometric_fit": s.geometric_fit,
        "moments": {str(k): v for k, v in s.moments.items()},
        "gamma_check": s.gamma_check,
        "U": s.U,
    }
    run.write_json("intersections.json", rep)
    run.finish()
    return 0


def cmd_free_energy(args, cfg) -> int:
    from .polymer import free_energy_estimate

    law = _law(cfg)
    spec = _spec(cfg)
    run = Run(cfg, "free-energy")
    rows = free_energy_estimate(law, spec, args.beta, args.h, [int(x) for x in args.n_list], int(args.reps), run.seed)
    run.write_csv("free_energy.csv", ["n", "F", "se"], rows)
    run.finish()
    return 0


def cmd_n_beta(args, cfg) -> int:
    from .polymer import n_beta_estimate

    law = _law(cfg)
    spec = _spec(cfg)
    run = Run(cfg, "n-beta")
    res = n_beta_estimate(law, spec, args.beta, args.C, int(args.n_max), int(args.reps), run.seed)
    tab = res.table
    run.write_csv(
        "n_beta.csv", ["n", "second_moment", "se"], ((n, tab["mean"][n], tab["se"][n]) for n in range(1, len(tab["n"])))
    )
    out = {"n_beta": res.n, "exceeds": res.exceeds, "display": str(res), "C": args.C}
    run.write_json("n_beta.json", out)
    run.finish()
    print(json.dumps(out))
    return 0


# ---------------------------------------------------------------------------
# parser

COMMANDS = {
    "classify": cmd_classify,
    "renewal-mass": cmd_renewal_mass,
    "partition": cmd_partition,
    "second-moment": cmd_second_moment,
    "field-dump": cmd_field_dump,
    "chaos-norm": cmd_chaos_norm,
    "scaling-experiment": cmd_scaling_experiment,
    "intersections": cmd_intersections,
    "free-energy": cmd_free_energy,
    "n-beta": cmd_n_beta,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpslab", description="Numerical experiments for the disordered gPS model.")
    p.add_argument("--version", action="version", version=f"gpslab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--threads", type=int, help="worker threads (numeric results do not depend on it)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="TOML experiment config")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("classify", parents=[common], help="classify a disorder law")
    s.add_argument("spec", nargs="?", help="TOML disorder spec")

    s = sub.add_parser("renewal-mass", parents=[common], help="renewal mass function table")
    s.add_argument("--box", type=int, nargs=2, default=(16, 16))

    s = sub.add_parser("partition", parents=[common], help="partition functions")
    s.add_argument("--box", type=int, nargs=2, default=(8, 8))
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--h", type=float, default=0.0)
    s.add_argument("--variant", choices=("q", "cond", "free"), default="q")
    s.add_argument("--reps", type=int, default=1)
    s.add_argument("--log-domain", action="store_true")

    s = sub.add_parser("second-moment", parents=[common], help="second moment of Z^q")
    s.add_argument("--box", type=int, nargs=2, default=(3, 3))
    s.add_argument("--beta", type=float, default=0.5)
    s.add_argument("--h", type=float, default=0.0)
    s.add_argument("--method", choices=("exact", "replica", "mc"), default="exact")
    s.add_argument("--reps", type=int, default=10000)

    s = sub.add_parser("field-dump", parents=[common], help="sampled fields for external rendering")
    s.add_argument("--kind", choices=("discrete", "limit", "both"), default="both")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--resolution", type=int, default=16)
    s.add_argument("--format", choices=("csv", "binary", "both"))

    s = sub.add_parser("chaos-norm", parents=[common], help="psi kernel norms with the Gamma bound")
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--method", choices=("closed-grid", "mc-importance"))
    s.add_argument("--phi", choices=("surrogate", "limit", "table"), default="limit")
    s.add_argument("--m", type=int, help="table resolution for --phi table")
    s.add_argument("--variant", choices=("q", "cond", "free", "h-dressed"), default="q")
    s.add_argument("--budget", type=int, default=200_000)

    s = sub.add_parser("scaling-experiment", parents=[common], help="rescaled partition functions over n")
    s.add_argument("--n-list", type=int, nargs="+")
    s.add_argument("--reps", type=int)
    s.add_argument("--phi", choices=("surrogate", "limit"), default="limit")

    s = sub.add_parser("intersections", parents=[common], help="intersection statistics of two renewals")
    s.add_argument("--box", type=int, nargs=2, default=(256, 256))
    s.add_argument("--reps", type=int, default=20000)
    s.add_argument("--k-max", type=int, default=6)

    s = sub.add_parser("free-energy", parents=[common], help="finite-volume quenched free energy")
    s.add_argument("--beta", type=float, default=0.5)
    s.add_argument("--h", type=float, default=0.0)
    s.add_argument("--n-list", type=int, nargs="+", default=[16, 32, 64])
    s.add_argument("--reps", type=int, default=200)

    s = sub.add_parser("n-beta", parents=[common], help="second-moment size estimate")
    s.add_argument("--beta", type=float, default=0.1)
    s.add_argument("--C", type=float, default=10.0)
    s.add_argument("--n-max", type=int, default=32)
    s.add_argument("--reps", type=int, default=2000)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg["run"]["seed"] = int(args.seed)
    args.out_given = args.out is not None
    if args.out is not None:
        cfg["output"]["dir"] = args.out
    if args.threads is not None:
        cfg["run"]["threads"] = int(args.threads)
        os.environ.setdefault("NUMBA_NUM_THREADS", str(int(args.threads)))
    from .disorder import SpecError

    try:
        return COMMANDS[args.command](args, cfg)
    except (UsageError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

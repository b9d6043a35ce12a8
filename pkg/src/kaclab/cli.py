"""Command-line interface.

One verb per workflow: simulate a collision path, compute a distance,
estimate a branching expectation, and run the packaged experiments.  The
experiment verbs accept --config pointing at a JSON file whose entries
override the flags; every experiment writes result.json, curves.csv, a
rendered figure, and optional event logs into --out.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .branching import Environment, estimate_Ef
from .core import EmpiricalMeasure, builtin_test_function
from .experiments import (ExperimentConfig, git_describe, run_experiment,
                          write_outputs)
from .kernels import hard_sphere, kernel_by_name
from .sampling import law_by_name, rescale, sample_empirical
from .signed_measure import FiniteSignedMeasure, MeasureFlow, tv_identity_check
from .simulator import load_path_jsonl, run
from .transport import w_distance, w_subsampled


def _print(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _build_kernel(name: str, d: int):
    if name == "hard-sphere":
        return hard_sphere(d)
    kernel = kernel_by_name(name)
    if kernel.d != d:
        raise SystemExit(f"kernel dimension {kernel.d} != requested d {d}")
    return kernel


def _cmd_simulate(args) -> int:
    kernel = _build_kernel(args.kernel, args.d)
    rng = np.random.default_rng(args.seed)
    if args.init == "gaussian":
        law = law_by_name("gaussian", d=args.d)
        state = rescale(sample_empirical(law, args.n, rng))
    else:
        mu = EmpiricalMeasure.load(args.init)
        if not np.allclose(mu.weights, mu.weights[0]):
            raise SystemExit("initial measure must have uniform weights")
        state = rescale(mu)
    path = run(state, kernel, args.T, args.seed)
    if args.out:
        path.save_jsonl(args.out, meta={"git_describe": git_describe()})
    final = path.final_state()
    report = {"n": state.n, "d": state.d, "kernel": kernel.name, "T": args.T,
              "seed": args.seed, "n_events": path.n_events,
              "momentum_error": final.momentum_error(),
              "energy_error": final.energy_error(),
              "out": args.out}
    _print(report)
    ok = final.momentum_error() <= 1e-8 and final.energy_error() <= 1e-8
    return 0 if ok else 1


def _cmd_wdist(args) -> int:
    mu = EmpiricalMeasure.load(args.a)
    nu = EmpiricalMeasure.load(args.b)
    if args.subsample:
        m, reps = (int(x) for x in args.subsample.split(","))
        rng = np.random.default_rng(args.seed)
        value, stderr = w_subsampled(mu, nu, m, reps, rng)
        report = {"value": value, "stderr": stderr,
                  "method": f"subsampled(m={m}, reps={reps})",
                  "note": "upward-biased estimate"}
    else:
        value = w_distance(mu, nu, exact_limit=args.exact_limit,
                           strict=not args.relaxed)
        report = {"value": value, "method": "exact"}
    _print(report)
    return 0 if 0.0 <= report["value"] else 1


def _load_environment(spec: str, horizon_hint: float) -> Environment:
    if spec.startswith("from-path:"):
        path = load_path_jsonl(spec[len("from-path:"):])
        return Environment.from_path(path, horizon=min(horizon_hint, path.T)
                                     if horizon_hint else None)
    return Environment.load(spec)


def _cmd_branch(args) -> int:
    v0 = np.array([float(x) for x in args.v0.split(",")])
    env = _load_environment(args.env, args.t)
    kernel = _build_kernel(args.kernel, env.d)
    f = builtin_test_function(args.f, d=env.d)
    t = args.t if args.t is not None else env.horizon
    rng = np.random.default_rng(args.seed)
    est = estimate_Ef(env, args.s, t, f, v0, n_rep=args.reps, cap=args.cap,
                      rng=rng, kernel=kernel)
    report = {"mean": est.mean, "stderr": est.stderr, "n_rep": est.n_rep,
              "n_capped": est.n_capped, "flagged": est.flagged,
              "f": args.f, "s": args.s, "t": t, "v0": v0.tolist(),
              "cap": args.cap, "seed": args.seed}
    _print(report)
    return 0 if not est.flagged else 1


def _cmd_tv_check(args) -> int:
    payload = json.loads(Path(args.flow).read_text())
    flow = MeasureFlow(FiniteSignedMeasure(np.asarray(payload["mu0"])),
                       np.asarray(payload["nu"]), float(payload["horizon"]))
    t = payload.get("t", flow.horizon)
    report = tv_identity_check(flow, float(t), dt=args.dt)
    _print(report)
    return 0 if report["within_bound"] else 1


_EXPERIMENT_FLAGS = (
    ("--d", int, "dimension"),
    ("--kernel", str, "collision kernel name"),
    ("--N-prime", int, "reference system size"),
    ("--T", float, "time horizon"),
    ("--tau", float, "restart time (boltzmann-proxy)"),
    ("--law", str, "initial velocity law"),
    ("--p", float, "moment order of the law"),
    ("--reps", int, "replicas"),
    ("--seed", int, "master seed"),
    ("--grid-points", int, "time grid resolution"),
    ("--quantile", float, "sup-W quantile for the rate fit"),
    ("--n-boot", int, "bootstrap resamples"),
    ("--n-reference", int, "quasi-reference sample size"),
    ("--log-events", str, "event logging policy: all|small|none"),
)


def _add_experiment_flags(sp):
    sp.add_argument("--config", help="JSON config file; entries override flags")
    sp.add_argument("--Ns", help="comma-separated system sizes")
    sp.add_argument("--qs", help="comma-separated moment orders (moments)")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--rescaled", action="store_true", default=None,
                    help="compare rescaled samples (sampling-rate)")
    sp.add_argument("--raw", action="store_true",
                    help="compare raw samples (sampling-rate)")
    for flag, typ, help_text in _EXPERIMENT_FLAGS:
        sp.add_argument(flag, type=typ, help=help_text)


def _experiment_config(args, experiment: str) -> ExperimentConfig:
    payload = {"experiment": experiment}
    for flag, _, _ in _EXPERIMENT_FLAGS:
        name = flag.lstrip("-").replace("-", "_")
        val = getattr(args, name, None)
        if val is not None:
            payload[name] = val
    if args.Ns:
        payload["Ns"] = tuple(int(x) for x in args.Ns.split(","))
    if args.qs:
        payload["qs"] = tuple(float(x) for x in args.qs.split(","))
    if args.out:
        payload["outdir"] = args.out
    if args.rescaled:
        payload["use_rescaled"] = True
    elif args.raw:
        payload["use_rescaled"] = False
    if args.config:
        payload.update(json.loads(Path(args.config).read_text()))
        payload["experiment"] = experiment
    return ExperimentConfig.from_dict(payload)


def _render_figure(cfg: ExperimentConfig, result, outdir: Path) -> str:
    from . import figures
    if cfg.experiment == "sampling-rate":
        return figures.rate_figure(result.fit, outdir / "rate.png")
    if cfg.experiment in ("consistency", "boltzmann-proxy"):
        return figures.consistency_figure(result, outdir / "consistency.png")
    if cfg.experiment == "moments":
        return figures.moment_figure(result, outdir / "moments.png")
    return ""


def _cmd_experiment(args, experiment: str) -> int:
    cfg = _experiment_config(args, experiment)
    result = run_experiment(cfg)
    outdir = cfg.outdir or args.out
    figure = ""
    if outdir:
        outdir = Path(outdir)
        write_outputs(cfg, result, outdir)
        figure = _render_figure(cfg, result, outdir)
    summary = {"experiment": experiment, "config_hash": cfg.config_hash(),
               "violations": list(result.violations),
               "summary": result.summary()}
    if figure:
        summary["figure"] = figure
    _print(summary)
    return 0 if not result.violations else 1


def _cmd_selftest(args) -> int:
    from .experiments import selftest
    report = selftest() if args.seed is None else selftest(args.seed)
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "selftest.json").write_text(json.dumps(report, indent=2))
    _print(report)
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="kac-lab",
        description="simulation and verification laboratory for mean-field "
                    "elastic collision dynamics")
    sub = ap.add_subparsers(dest="verb", required=True)

    sp = sub.add_parser("simulate", help="run one collision path")
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--d", type=int, default=3)
    sp.add_argument("--kernel", default="hard-sphere")
    sp.add_argument("--T", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--init", default="gaussian",
                    help="'gaussian' or a measure JSON file")
    sp.add_argument("--out", help="event log path (JSONL)")
    sp.set_defaults(func=_cmd_simulate)

    sp = sub.add_parser("wdist", help="distance between two stored measures")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--exact-limit", type=int, default=5000)
    sp.add_argument("--subsample", help="m,reps for the biased estimator")
    sp.add_argument("--relaxed", action="store_true",
                    help="accept measures off the shell")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_wdist)

    sp = sub.add_parser("branch", help="signed branching expectation")
    sp.add_argument("--env", required=True,
                    help="environment JSON, or from-path:<events.jsonl>")
    sp.add_argument("--v0", required=True, help="comma-separated velocity")
    sp.add_argument("--s", type=float, default=0.0)
    sp.add_argument("--t", type=float, default=None)
    sp.add_argument("--f", default="gauss_bump",
                    help="built-in test function name")
    sp.add_argument("--reps", type=int, default=1000)
    sp.add_argument("--cap", type=int, default=100000)
    sp.add_argument("--kernel", default="hard-sphere")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_branch)

    for name in ("sampling-rate", "consistency", "moments", "boltzmann-proxy"):
        sp = sub.add_parser(name, help=f"{name} experiment")
        _add_experiment_flags(sp)
        sp.set_defaults(func=lambda a, _n=name: _cmd_experiment(a, _n))

    sp = sub.add_parser("tv-check", help="total-variation identity check")
    sp.add_argument("--flow", required=True, help="flow JSON file")
    sp.add_argument("--dt", type=float, default=None)
    sp.set_defaults(func=_cmd_tv_check)

    sp = sub.add_parser("selftest", help="fast invariant sweep")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", help="directory for selftest.json")
    sp.set_defaults(func=_cmd_selftest)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

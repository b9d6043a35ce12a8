"""Experiment harness: configs, seeded replicas, persistence, headline runs.

Every experiment is driven by an ExperimentConfig and a master seed.  Random
streams are derived from (seed, role, N, replica) spawn keys, so re-running a
recorded config reproduces every output column bit-exactly.  Outputs are a
result.json, a curves.csv (both embedding the config hash, the git-describe
string, and the master seed), and optional event logs under events/.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import EmpiricalMeasure, ParticleState
from .kernels import hard_sphere, kernel_by_name
from .sampling import (law_by_name, quasi_reference, rate_experiment,
                       rescale, sample_empirical)
from .simulator import run
from .transport import w_distance

EXPERIMENT_NAMES = ("consistency", "moments", "boltzmann-proxy",
                    "sampling-rate", "selftest")

# spawn-key role codes; part of the reproducibility contract
_ROLE_REFERENCE = 0
_ROLE_PATH = 1
_ROLE_RESAMPLE = 2
_ROLE_PROXY = 3
_ROLE_FIT = 4


def _stream(master: int, *key: int) -> np.random.Generator:
    """Independent generator for one labeled role of one experiment."""
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=key))


def _int_seed(master: int, *key: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=key)
    return int(ss.generate_state(1, np.uint32)[0])


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parents[2],
            capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unreleased"


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment run."""

    experiment: str
    d: int = 3
    kernel: str = "hard-sphere"
    Ns: tuple = (128, 256, 512, 1024)
    N_prime: int = None
    T: float = 1.0
    tau: float = 0.0
    law: str = "gaussian"
    p: float = 10.0
    reps: int = 20
    seed: int = 0
    outdir: str = None
    grid_points: int = 20
    quantile: float = 0.8
    n_boot: int = 300
    qs: tuple = ()
    use_rescaled: bool = True
    n_reference: int = 12000
    log_events: str = "small"

    def __post_init__(self):
        self.Ns = tuple(int(n) for n in self.Ns)
        self.qs = tuple(float(q) for q in self.qs)
        if self.N_prime is None and self.Ns:
            self.N_prime = max(self.Ns)
        self.validate()

    def validate(self):
        problems = []
        if self.experiment not in EXPERIMENT_NAMES:
            problems.append(f"unknown experiment {self.experiment!r}")
        if self.d < 2:
            problems.append("d must be >= 2")
        if not self.Ns or any(n < 2 for n in self.Ns):
            problems.append("Ns must be a nonempty list of sizes >= 2")
        if self.N_prime is not None and self.N_prime < 2:
            problems.append("N_prime must be >= 2")
        if self.T < 0:
            problems.append("T must be nonnegative")
        if not 0 <= self.tau <= max(self.T, 0):
            problems.append("tau must lie in [0, T]")
        if self.reps < 1:
            problems.append("reps must be >= 1")
        if self.grid_points < 1:
            problems.append("grid_points must be >= 1")
        if not 0 < self.quantile < 1:
            problems.append("quantile must lie in (0, 1)")
        if self.n_boot < 200:
            problems.append("n_boot must be >= 200 (CI resampling floor)")
        if self.log_events not in ("all", "small", "none"):
            problems.append("log_events must be all|small|none")
        try:
            self.build_kernel()
        except Exception as exc:
            problems.append(f"kernel: {exc}")
        try:
            law_by_name(self.law, d=self.d, p=self.p)
        except Exception as exc:
            problems.append(f"law: {exc}")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    def build_kernel(self):
        if self.kernel == "hard-sphere":
            return hard_sphere(self.d)
        k = kernel_by_name(self.kernel)
        if k.d != self.d:
            raise ValueError(f"kernel dimension {k.d} != config d {self.d}")
        return k

    def build_law(self):
        return law_by_name(self.law, d=self.d, p=self.p)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["Ns"] = list(self.Ns)
        out["qs"] = list(self.qs)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**payload)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _time_grid(t0: float, t1: float, points: int) -> np.ndarray:
    if points == 1 or t1 <= t0:
        return np.array([t1])
    return np.linspace(t0, t1, points)


def _quantile_fit(sups_by_n: dict, quantile: float, n_boot: int,
                  rng: np.random.Generator) -> dict:
    """Log-log slope of the per-N quantile of sup-W, with a replica bootstrap."""
    Ns = sorted(sups_by_n)
    qs = np.array([np.quantile(sups_by_n[N], quantile) for N in Ns])
    means = np.array([np.mean(sups_by_n[N]) for N in Ns])
    log_n = np.log(np.array(Ns, dtype=np.float64))

    def fit(vals):
        if np.any(vals <= 0):
            return float("nan")
        A = np.vstack([log_n, np.ones_like(log_n)]).T
        coef, *_ = np.linalg.lstsq(A, np.log(vals), rcond=None)
        return float(coef[0])

    slope_q = fit(qs)
    slope_mean = fit(means)
    boots = []
    reps = len(next(iter(sups_by_n.values())))
    for _ in range(n_boot):
        b = np.array([np.quantile(rng.choice(sups_by_n[N], size=reps),
                                  quantile) for N in Ns])
        s = fit(b)
        if np.isfinite(s):
            boots.append(s)
    if len(boots) >= max(10, n_boot // 2) and np.isfinite(slope_q):
        lo, hi = np.percentile(boots, [2.5, 97.5])
    else:
        lo = hi = float("nan")
    return {"Ns": Ns, "quantile": quantile,
            "quantile_values": qs.tolist(), "mean_values": means.tolist(),
            "exponent": slope_q, "exponent_ci": [float(lo), float(hi)],
            "exponent_mean_fit": slope_mean, "n_boot": n_boot}


@dataclass
class ConsistencyResult:
    """Per-(N, replica) sup-W data with the fitted decay exponent."""

    config: ExperimentConfig
    time_grid: np.ndarray
    rows: list                      # (N, replica, t, W)
    sup_by_n: dict                  # N -> array of per-replica sup W
    fit: dict
    quantile_curves: dict           # eps label -> per-N quantile list
    violations: list = field(default_factory=list)
    event_logs: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"fit": self.fit,
                "time_grid": [float(t) for t in self.time_grid],
                "sup_by_N": {str(n): list(map(float, v))
                             for n, v in self.sup_by_n.items()},
                "quantile_curves": self.quantile_curves}

    curve_header = ("N", "replica", "t", "W")

    def curve_rows(self):
        return self.rows


def _log_policy(cfg: ExperimentConfig, N: int, replica: int) -> bool:
    if cfg.log_events == "none":
        return False
    if cfg.log_events == "all":
        return True
    return N <= 256 and replica == 0


def consistency_experiment(cfg: ExperimentConfig,
                           independent_reference: bool = True) -> ConsistencyResult:
    """Distance between size-N runs and an independent size-N' reference.

    All initial states are rescaled samples of the same law, so the starting
    separation is already small.  With independent_reference=False the N=N'
    comparison reuses the reference stream, giving identical paths (useful as
    a pipeline null test); the default keeps every run independent.
    """
    kernel = cfg.build_kernel()
    law = cfg.build_law()
    Np = cfg.N_prime
    grid = _time_grid(0.0, cfg.T, cfg.grid_points)
    limit = max(max(cfg.Ns), Np) + 1
    rows = []
    sup_by_n = {N: np.empty(cfg.reps) for N in cfg.Ns}
    violations = []
    logs = []

    for r in range(cfg.reps):
        def make_path(N, role):
            rng = _stream(cfg.seed, role, N, r)
            st = rescale(sample_empirical(law, N, rng))
            return run(st, kernel, cfg.T, _int_seed(cfg.seed, role, N, r, 1))

        ref_role = _ROLE_PATH if not independent_reference else _ROLE_REFERENCE
        ref = make_path(Np, ref_role)
        ref_states = [ref.state_at(t).as_measure() for t in grid]
        if _log_policy(cfg, Np, r):
            logs.append((f"reference-N{Np}-r{r}", ref))
        for N in cfg.Ns:
            if not independent_reference and N == Np:
                path = ref
            else:
                path = make_path(N, _ROLE_PATH)
            if _log_policy(cfg, N, r) and path is not ref:
                logs.append((f"path-N{N}-r{r}", path))
            sup_w = 0.0
            for t, ref_mu in zip(grid, ref_states):
                w = (0.0 if path is ref
                     else w_distance(path.state_at(t).as_measure(), ref_mu,
                                     exact_limit=limit))
                if not 0.0 <= w <= 4.0:
                    violations.append(f"W out of range at N={N} r={r} t={t}")
                rows.append((N, r, float(t), w))
                sup_w = max(sup_w, w)
            sup_by_n[N][r] = sup_w

    fit = _quantile_fit(sup_by_n, cfg.quantile, cfg.n_boot,
                        _stream(cfg.seed, _ROLE_FIT))
    curves = {}
    for eps in (0.5, cfg.quantile, 0.9):
        curves[f"q{eps:g}"] = [float(np.quantile(sup_by_n[N], eps))
                               for N in sorted(sup_by_n)]
    return ConsistencyResult(cfg, grid, rows, sup_by_n, fit, curves,
                             violations, logs)


@dataclass
class MomentResult:
    """Empirical moment trajectories with envelope and shape audits."""

    config: ExperimentConfig
    time_grid: np.ndarray
    rows: list                      # (N, q, t, mean, stderr)
    audits: dict
    violations: list = field(default_factory=list)
    event_logs: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"audits": self.audits,
                "time_grid": [float(t) for t in self.time_grid]}

    curve_header = ("N", "q", "t", "mean", "stderr")

    def curve_rows(self):
        return self.rows


def moment_experiment(cfg: ExperimentConfig) -> MomentResult:
    """Track <|v|^q, mu_t^N> trajectories for each requested moment order.

    Audits: the energy trajectory (q=2) must be identically 1; the q=p
    trajectory is fitted to a linear-in-t envelope (slope free, fit quality
    reported); orders q>p are checked for the t^(p-q) short-time shape by
    requiring t^(q-p)-weighted values to stay within an order of magnitude
    of their median over the early-time window.
    """
    kernel = cfg.build_kernel()
    law = cfg.build_law()
    qs = cfg.qs or (2.0, cfg.p, cfg.p + 2.0)
    base = _time_grid(0.0, cfg.T, cfg.grid_points)
    audit_ts = np.linspace(0.01, 0.1, 10)
    need_audit = any(q > cfg.p for q in qs) and cfg.T >= 0.1
    grid = np.unique(np.concatenate([base, audit_ts])) if need_audit else base

    rows = []
    audits = {}
    violations = []
    logs = []
    for N in cfg.Ns:
        traj = {q: np.empty((cfg.reps, grid.size)) for q in qs}
        for r in range(cfg.reps):
            rng = _stream(cfg.seed, _ROLE_PATH, N, r)
            st = rescale(sample_empirical(law, N, rng))
            path = run(st, kernel, cfg.T, _int_seed(cfg.seed, _ROLE_PATH, N, r, 1))
            if _log_policy(cfg, N, r):
                logs.append((f"moments-N{N}-r{r}", path))
            for k, t in enumerate(grid):
                mu = path.state_at(float(t)).as_measure()
                for q in qs:
                    traj[q][r, k] = mu.moment(q)
        for q in qs:
            means = traj[q].mean(axis=0)
            errs = (traj[q].std(axis=0, ddof=1) / np.sqrt(cfg.reps)
                    if cfg.reps > 1 else np.zeros(grid.size))
            for k, t in enumerate(grid):
                rows.append((N, q, float(t), float(means[k]), float(errs[k])))
            key = f"N{N}-q{q:g}"
            if q == 2.0:
                drift = float(np.max(np.abs(traj[2.0] - 1.0)))
                audits[key] = {"kind": "energy-constant", "max_drift": drift,
                               "ok": drift <= 1e-8}
                if drift > 1e-8:
                    violations.append(f"energy drift {drift} at N={N}")
            elif q == cfg.p:
                m0 = means[0]
                ts = grid[grid > 0]
                ys = means[grid > 0] / m0 - 1.0
                C = float(ts @ ys / (ts @ ts)) if ts.size else 0.0
                pred = m0 * (1.0 + C * ts)
                ss_res = float(np.sum((means[grid > 0] - pred) ** 2))
                ss_tot = float(np.sum((means[grid > 0]
                                       - means[grid > 0].mean()) ** 2))
                r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
                audits[key] = {"kind": "linear-envelope", "C": C, "r2": r2}
            elif q > cfg.p and need_audit:
                sel = (grid >= 0.01 - 1e-12) & (grid <= 0.1 + 1e-12)
                shaped = grid[sel] ** (q - cfg.p) * means[sel]
                med = float(np.median(shaped))
                mx = float(np.max(shaped))
                audits[key] = {"kind": "short-time-shape", "max": mx,
                               "median": med,
                               "ok": mx <= 10.0 * med if med > 0 else False}
    return MomentResult(cfg, grid, rows, audits, violations, logs)


def boltzmann_proxy(cfg: ExperimentConfig) -> ConsistencyResult:
    """Accuracy of each run against a high-resolution restart of itself.

    For each size-N path, its time-tau state is resampled to N' atoms,
    rescaled onto the shell, and evolved as a stand-in for the limiting flow
    started from that state; distances are tracked on [tau, T].  At N = N'
    the best available stand-in is the path itself, so that curve is zero.
    """
    kernel = cfg.build_kernel()
    law = cfg.build_law()
    Np = cfg.N_prime
    grid = _time_grid(cfg.tau, cfg.T, cfg.grid_points)
    limit = max(max(cfg.Ns), Np) + 1
    rows = []
    sup_by_n = {N: np.empty(cfg.reps) for N in cfg.Ns}
    violations = []
    logs = []

    for r in range(cfg.reps):
        for N in cfg.Ns:
            rng = _stream(cfg.seed, _ROLE_PATH, N, r)
            st = rescale(sample_empirical(law, N, rng))
            path = run(st, kernel, cfg.T, _int_seed(cfg.seed, _ROLE_PATH, N, r, 1))
            if _log_policy(cfg, N, r):
                logs.append((f"proxy-base-N{N}-r{r}", path))
            if N == Np:
                proxy = None
            else:
                mid = path.state_at(cfg.tau).as_measure()
                rs = _stream(cfg.seed, _ROLE_RESAMPLE, N, r)
                pick = rs.integers(0, mid.n, size=Np)
                boosted = rescale(EmpiricalMeasure(mid.atoms[pick],
                                                   np.full(Np, 1.0 / Np)))
                proxy = run(boosted, kernel, cfg.T - cfg.tau,
                            _int_seed(cfg.seed, _ROLE_PROXY, N, r, 1))
            sup_w = 0.0
            for t in grid:
                if proxy is None:
                    w = 0.0
                else:
                    w = w_distance(path.state_at(float(t)).as_measure(),
                                   proxy.state_at(float(t - cfg.tau)).as_measure(),
                                   exact_limit=limit)
                if not 0.0 <= w <= 4.0:
                    violations.append(f"W out of range at N={N} r={r} t={t}")
                rows.append((N, r, float(t), w))
                sup_w = max(sup_w, w)
            sup_by_n[N][r] = sup_w

    fit_ns = {N: v for N, v in sup_by_n.items() if N != Np}
    fit = (_quantile_fit(fit_ns, cfg.quantile, cfg.n_boot,
                         _stream(cfg.seed, _ROLE_FIT))
           if len(fit_ns) >= 2 else {"exponent": float("nan"),
                                     "exponent_ci": [float("nan")] * 2,
                                     "note": "fewer than two non-reference sizes"})
    curves = {f"q{cfg.quantile:g}": [float(np.quantile(sup_by_n[N], cfg.quantile))
                                     for N in sorted(sup_by_n)]}
    return ConsistencyResult(cfg, grid, rows, sup_by_n, fit, curves,
                             violations, logs)


@dataclass
class SamplingRateResult:
    config: ExperimentConfig
    fit: object                     # sampling.RateFit
    violations: list = field(default_factory=list)
    event_logs: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        f = self.fit
        return {"law": f.law_name, "use_rescaled": f.use_rescaled,
                "Ns": list(f.Ns), "means": list(map(float, f.means)),
                "stderrs": [float(s) for s in f.stderrs],
                "fitted_slope": f.fitted_slope,
                "slope_ci": [f.slope_ci_low, f.slope_ci_high],
                "excluded_Ns": list(f.excluded_Ns),
                "degenerate_fit": f.degenerate_fit,
                "ci_unreliable": f.ci_unreliable,
                "per_replica": {str(N): list(map(float, f.per_replica[N]))
                                for N in f.Ns}}

    curve_header = ("N", "mean", "stderr")

    def curve_rows(self):
        return [(N, float(m), float(s))
                for N, m, s in zip(self.fit.Ns, self.fit.means,
                                   self.fit.stderrs)]


def sampling_rate_experiment(cfg: ExperimentConfig) -> SamplingRateResult:
    """Empirical-measure convergence-rate fit wired to the config schema."""
    law = cfg.build_law()
    rng = _stream(cfg.seed, _ROLE_PATH, 0, 0)
    ref = quasi_reference(law, _stream(cfg.seed, _ROLE_REFERENCE, 0, 0),
                          n=cfg.n_reference)
    fit = rate_experiment(law, cfg.Ns, cfg.reps, cfg.use_rescaled, rng,
                          reference=ref, n_boot=cfg.n_boot)
    violations = []
    for N in fit.Ns:
        bad = fit.per_replica[N][(fit.per_replica[N] < 0)]
        if bad.size:
            violations.append(f"negative W at N={N}")
    return SamplingRateResult(cfg, fit, violations)


def _csv_float(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_outputs(cfg: ExperimentConfig, result, outdir=None) -> Path:
    """Persist result.json, curves.csv, and event logs for one experiment."""
    outdir = Path(outdir or cfg.outdir or ".")
    outdir.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": cfg.config_hash(), "git_describe": git_describe(),
            "master_seed": cfg.seed}

    payload = {"experiment": cfg.experiment, **meta,
               "config": cfg.to_dict(), "summary": result.summary(),
               "violations": list(result.violations)}
    (outdir / "result.json").write_text(json.dumps(payload, indent=2,
                                                   sort_keys=True) + "\n")

    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines.append(",".join(result.curve_header))
    for row in result.curve_rows():
        lines.append(",".join(_csv_float(x) for x in row))
    (outdir / "curves.csv").write_text("\n".join(lines) + "\n")

    logs = getattr(result, "event_logs", [])
    if logs:
        evdir = outdir / "events"
        evdir.mkdir(exist_ok=True)
        for tag, path in logs:
            path.save_jsonl(str(evdir / f"{tag}.jsonl"), meta=meta)
    return outdir


def run_experiment(cfg: ExperimentConfig, outdir=None):
    """Dispatch a config to its experiment; write outputs when a directory
    is set; return the result object."""
    if cfg.experiment == "consistency":
        result = consistency_experiment(cfg)
    elif cfg.experiment == "moments":
        result = moment_experiment(cfg)
    elif cfg.experiment == "boltzmann-proxy":
        result = boltzmann_proxy(cfg)
    elif cfg.experiment == "sampling-rate":
        result = sampling_rate_experiment(cfg)
    elif cfg.experiment == "selftest":
        result = SelftestResult(cfg, selftest())
    else:
        raise ValueError(f"unknown experiment {cfg.experiment!r}")
    if outdir or cfg.outdir:
        write_outputs(cfg, result, outdir)
    return result


@dataclass
class SelftestResult:
    config: ExperimentConfig
    report: dict
    event_logs: list = field(default_factory=list, repr=False)

    @property
    def violations(self):
        return [f"{c['module']}.{c['name']} (seed {c['seed']})"
                for c in self.report["checks"] if not c["ok"]]

    def summary(self) -> dict:
        return self.report

    curve_header = ("module", "name", "ok")

    def curve_rows(self):
        return [(c["module"], c["name"], int(c["ok"]))
                for c in self.report["checks"]]


def selftest(seed: int = 20260819) -> dict:
    """Fast end-to-end invariant sweep across every module.

    Returns a report with one entry per check: module, invariant name, ok,
    detail, and the seed that drove it.  Designed to finish in well under
    five minutes on one core.
    """
    from . import branching, signed_measure
    from .core import collide, shell_project
    from .kernels import povzner_gap, find_povzner_beta
    from .simulator import martingale_ledger
    from .core import metric_family_member

    checks = []
    t_start = time.time()

    def record(module, name, ok, detail=""):
        checks.append({"module": module, "name": name, "ok": bool(ok),
                       "detail": str(detail), "seed": seed})

    kernel = hard_sphere(3)
    law = law_by_name("gaussian", 3)

    # conservation along a short run, event by event, with the first
    # offending event pinpointed; also recomputes every collision
    rng = _stream(seed, 0)
    st = rescale(sample_empirical(law, 64, rng))
    path = run(st, kernel, 0.5, _int_seed(seed, 0, 1))
    bad_event = -1
    worst = 0.0
    for k in range(path.n_events):
        gain = (path.post[k, 0] + path.post[k, 1]
                - path.pre[k, 0] - path.pre[k, 1])
        e_gain = (path.post[k] ** 2).sum() - (path.pre[k] ** 2).sum()
        resid = max(float(np.abs(gain).max()), abs(float(e_gain)))
        q0, q1 = collide(path.pre[k, 0], path.pre[k, 1], path.sigmas[k])
        if not (np.allclose(q0, path.post[k, 0], atol=1e-12)
                and np.allclose(q1, path.post[k, 1], atol=1e-12)):
            resid = max(resid, 1.0)
        if resid > 1e-9 and bad_event < 0:
            bad_event = k
        worst = max(worst, resid)
    record("simulator", "event-conservation", bad_event < 0,
           f"events={path.n_events} worst={worst:.2e}"
           + (f" first_bad_event={bad_event}" if bad_event >= 0 else ""))

    final = path.final_state()
    record("core", "state-conservation",
           final.momentum_error() <= 1e-8 and final.energy_error() <= 1e-8,
           f"momentum={final.momentum_error():.2e} energy={final.energy_error():.2e}")

    # metric axioms on small random shell triples
    rng = _stream(seed, 1)
    ok = True
    detail = ""
    for _ in range(5):
        mus = []
        for n in (16, 24, 32):
            atoms = shell_project(rng.standard_normal((n, 3)))
            mus.append(EmpiricalMeasure(atoms, np.full(n, 1.0 / n)))
        d01 = w_distance(mus[0], mus[1])
        d10 = w_distance(mus[1], mus[0])
        d02 = w_distance(mus[0], mus[2])
        d12 = w_distance(mus[1], mus[2])
        if abs(d01 - d10) > 1e-9 or d01 > d02 + d12 + 1e-9:
            ok = False
            detail = f"sym={abs(d01-d10):.2e} tri={d01-d02-d12:.2e}"
            break
        if w_distance(mus[0], mus[0]) != 0.0:
            ok = False
            detail = "self-distance nonzero"
            break
    record("transport", "metric-axioms", ok, detail)

    # transport optimality certificate (primal = dual, feasibility)
    try:
        rng = _stream(seed, 2)
        a = shell_project(rng.standard_normal((40, 3)))
        b = shell_project(rng.standard_normal((33, 3)))
        w_distance(EmpiricalMeasure(a, np.full(40, 1 / 40)),
                   EmpiricalMeasure(b, np.full(33, 1 / 33)), certify=True)
        record("transport", "optimality-certificate", True)
    except Exception as exc:
        record("transport", "optimality-certificate", False, exc)

    # pathwise collision accounting: jump sums must retell <f, mu_t> exactly
    ok = True
    detail = ""
    for fs in range(3):
        f = metric_family_member(fs, 3)
        entries = martingale_ledger(path, f, kernel)
        lhs = (path.final_state().as_measure().integrate(f)
               - path.initial.as_measure().integrate(f))
        resid = abs(lhs - entries[-1].jump_sum)
        if resid > 1e-9 * max(1.0, abs(lhs)):
            ok = False
            detail = f"f#{fs} residual={resid:.2e}"
            break
    record("simulator", "collision-ledger", ok, detail)

    # moment dissipation gap on a small grid
    try:
        beta = find_povzner_beta(kernel, 4.0)
        rng = _stream(seed, 3)
        ok = beta > 0
        for _ in range(20):
            v = rng.standard_normal(3) * rng.uniform(0.2, 2.0)
            vs = rng.standard_normal(3) * rng.uniform(0.2, 2.0)
            rep = povzner_gap(kernel, v, vs, 4.0, beta)
            if rep.gap < -1e-10:
                ok = False
                break
        record("kernels", "moment-dissipation", ok, f"beta={beta:.4f}")
    except Exception as exc:
        record("kernels", "moment-dissipation", False, exc)

    # TV identity on random step flows
    rng = _stream(seed, 4)
    ok = True
    for _ in range(5):
        mu0 = signed_measure.FiniteSignedMeasure(rng.standard_normal(12) * 0.5)
        nu = rng.standard_normal((64, 12)) * 2.0
        fl = signed_measure.MeasureFlow(mu0, nu, 1.0)
        rep = signed_measure.tv_identity_check(fl, 1.0)
        if not rep["within_bound"]:
            ok = False
            break
    record("signed_measure", "tv-identity", ok)

    # branching conservation trivials on a frozen environment
    try:
        env = branching.Environment.zero(3, 1.0)
        pop = branching.branch_run(env, 0.0, np.array([0.4, 0.1, 0.0]),
                                   t=1.0, rng=_stream(seed, 5), kernel=kernel)
        ok = pop.n_events == 0 and pop.count_signed == 1
        env2 = branching.Environment.frozen(
            EmpiricalMeasure(shell_project(_stream(seed, 6).standard_normal((16, 3))),
                             np.full(16, 1 / 16)), 1.0)
        pop2 = branching.branch_run(env2, 0.0, np.array([0.4, 0.1, 0.0]),
                                    t=1.0, rng=_stream(seed, 7), kernel=kernel)
        ok = (ok and pop2.count_signed == 1
              and len(pop2.atoms) == 1 + 2 * pop2.n_events)
        record("branching", "population-identities", ok,
               f"events={pop2.n_events}")
    except Exception as exc:
        record("branching", "population-identities", False, exc)

    # sampling invariants
    rng = _stream(seed, 8)
    stt = rescale(sample_empirical(law, 500, rng))
    v = stt.velocities
    ok = (abs(v.sum(axis=0)).max() <= 1e-10 * 500
          and abs((v * v).sum() / 500 - 1.0) <= 1e-10)
    record("sampling", "rescale-shell-membership", ok)

    # reproducibility: identical config -> identical curve rows
    cfg = ExperimentConfig(experiment="consistency", Ns=(16, 32), N_prime=32,
                           T=0.2, reps=2, grid_points=4, seed=seed,
                           n_boot=200, log_events="none")
    r1 = consistency_experiment(cfg)
    r2 = consistency_experiment(cfg)
    record("experiments", "bit-exact-reruns", r1.rows == r2.rows,
           f"rows={len(r1.rows)}")

    elapsed = time.time() - t_start
    return {"passed": all(c["ok"] for c in checks), "checks": checks,
            "elapsed_seconds": round(elapsed, 2), "seed": seed}

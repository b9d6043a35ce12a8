"""Signed branching particles in a measure-valued environment.

The linearized collision dynamics evolve particles (v, s) with sign s = +/-1.
Against an environment piece with atoms (y_j, w_j), a particle branches at
rate 2 sum_j w_j |v - y_j|; the event replaces (v, s) by (v', s), (v'_*, s)
and (y_j, -s), where (v', v'_*) is the elastic collision output of v and y_j.

Everything is vectorized across replicas: each round draws one proposal per
active particle, thinned against the bound 2 sum_j w_j (|v| + |y_j|), which
is constant between accepted events and piece boundaries, so rejected
proposals advance the particle clock exactly.

Two couplings are provided: `coupled_initial` runs pairs started from two
velocities in a common environment (decoupling when the two angular rate
measures disagree), and `coupled_environment` runs one velocity against two
environments (uncoupling driven by the weight excesses).  Both realize the
maximal coupling of the relevant kernels pointwise, so coupled events occur
at exactly the overlap rate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import EmpiricalMeasure, TestFunction, collide
from .kernels import CollisionKernel, hard_sphere, kernel_kappa

_CHUNK = 131072


class CapExceeded(RuntimeError):
    """A replica's population hit the explosion guard."""

    def __init__(self, cap: int, time_reached: float, replica: int = 0):
        super().__init__(
            f"population cap {cap} exceeded at time {time_reached:.6g}")
        self.cap = cap
        self.time_reached = float(time_reached)
        self.replica = int(replica)


# ---------------------------------------------------------------------------
# environments


@dataclass
class Environment:
    """Piecewise-constant measure flow on [0, horizon].

    pieces: ordered (start_time, measure); the first start must be 0 and the
    piece beginning at s_k is in force on [s_k, s_{k+1}).
    """

    pieces: list
    horizon: float

    def __post_init__(self):
        if not self.pieces:
            raise ValueError("environment needs at least one piece")
        starts = [float(s) for s, _ in self.pieces]
        if starts[0] != 0.0:
            raise ValueError("first piece must start at time 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("piece start times must increase")
        if self.horizon < starts[-1]:
            raise ValueError("horizon precedes the last piece")
        self.horizon = float(self.horizon)

    @property
    def starts(self) -> np.ndarray:
        return np.array([s for s, _ in self.pieces], dtype=np.float64)

    @property
    def edges(self) -> np.ndarray:
        return np.append(self.starts, self.horizon)

    @property
    def d(self) -> int:
        return self.pieces[0][1].d

    def piece_index(self, t: float) -> int:
        if t < 0 or t > self.horizon + 1e-12:
            raise ValueError(f"t={t} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.starts, t, side="right")) - 1
        return min(max(k, 0), len(self.pieces) - 1)

    def measure_at(self, t: float) -> EmpiricalMeasure:
        return self.pieces[self.piece_index(t)][1]

    def moment_integral(self, s: float, t: float, q: float) -> float:
        """integral over [s, t] of <1 + |v|^q, rho_r> dr, exact per piece."""
        if t < s:
            raise ValueError("need s <= t")
        edges = self.edges
        total = 0.0
        for k, (_, mu) in enumerate(self.pieces):
            a = max(float(edges[k]), s)
            b = min(float(edges[k + 1]), t)
            if b > a:
                total += (b - a) * (mu.mass + mu.moment(q))
        return total

    def m3_integral(self, s: float, t: float) -> float:
        return self.moment_integral(s, t, 3.0)

    def validate(self, tol: float = 1e-9) -> None:
        """Mass and kinetic-energy caps (<= 1) and finite third moments."""
        for start, mu in self.pieces:
            if not (np.all(np.isfinite(mu.atoms)) and np.all(np.isfinite(mu.weights))):
                raise ValueError(f"piece at t={start}: non-finite data")
            if mu.mass > 1.0 + tol:
                raise ValueError(f"piece at t={start}: mass {mu.mass} > 1")
            if mu.moment(2.0) > 1.0 + tol:
                raise ValueError(f"piece at t={start}: energy {mu.moment(2.0)} > 1")
            if not np.isfinite(mu.moment(3.0)):
                raise ValueError(f"piece at t={start}: infinite third moment")

    @classmethod
    def frozen(cls, mu: EmpiricalMeasure, horizon: float) -> "Environment":
        return cls(pieces=[(0.0, mu)], horizon=horizon)

    @classmethod
    def zero(cls, d: int, horizon: float) -> "Environment":
        empty = EmpiricalMeasure(np.zeros((0, d)), np.zeros(0))
        return cls.frozen(empty, horizon)

    @classmethod
    def from_path(cls, path, horizon: float = None) -> "Environment":
        """Empirical flow of one trajectory (uniform weights 1/N)."""
        horizon = path.T if horizon is None else float(horizon)
        times = [0.0] + [float(s) for s in path.times if s < horizon]
        pieces = [(s, path.state_at(s).as_measure()) for s in times]
        return cls(pieces=pieces, horizon=horizon)

    @classmethod
    def from_paths(cls, path_a, path_b, horizon: float = None) -> "Environment":
        """Half-sum of two trajectories' empirical flows, union time grid."""
        horizon = min(path_a.T, path_b.T) if horizon is None else float(horizon)
        times = np.union1d(path_a.times, path_b.times)
        times = [0.0] + [float(s) for s in times if s < horizon]
        pieces = []
        for s in times:
            ma = path_a.state_at(s).as_measure()
            mb = path_b.state_at(s).as_measure()
            mu = EmpiricalMeasure(
                np.vstack([ma.atoms, mb.atoms]),
                np.concatenate([0.5 * ma.weights, 0.5 * mb.weights]))
            pieces.append((s, mu))
        return cls(pieces=pieces, horizon=horizon)

    def to_dict(self) -> dict:
        return {"horizon": self.horizon,
                "pieces": [{"start": s, **mu.to_dict()}
                           for s, mu in self.pieces]}

    @classmethod
    def from_dict(cls, payload: dict) -> "Environment":
        pieces = [(float(p["start"]), EmpiricalMeasure.from_dict(p))
                  for p in payload["pieces"]]
        return cls(pieces=pieces, horizon=float(payload["horizon"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Environment":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class _PieceData:
    """Arrays one engine round needs for a single environment piece."""

    __slots__ = ("Y", "w", "sy", "W", "Sy", "cw0", "cw1", "K")

    def __init__(self, Y: np.ndarray, w: np.ndarray):
        self.Y = np.ascontiguousarray(Y, dtype=np.float64)
        self.w = np.ascontiguousarray(w, dtype=np.float64)
        self.sy = np.linalg.norm(self.Y, axis=1) if self.Y.size else np.zeros(0)
        self.W = float(self.w.sum())
        self.Sy = float((self.w * self.sy).sum())
        self.cw0 = np.cumsum(self.w)
        self.cw1 = np.cumsum(self.w * self.sy)
        self.K = self.w.shape[0]


class _EnvData:
    __slots__ = ("edges", "data", "d")

    def __init__(self, env: Environment):
        self.edges = env.edges
        self.data = [_PieceData(mu.atoms, mu.weights) for _, mu in env.pieces]
        self.d = env.d

    def piece_of(self, t: np.ndarray) -> np.ndarray:
        k = np.searchsorted(self.edges, t, side="right") - 1
        return np.clip(k, 0, len(self.data) - 1)


def _sample_partners(pd: _PieceData, sp: np.ndarray, rng) -> np.ndarray:
    """Partner index j with probability proportional to w_j (sp + |y_j|)."""
    totals = sp * pd.W + pd.Sy
    target = rng.random(sp.shape[0]) * totals
    cum = sp[:, None] * pd.cw0[None, :] + pd.cw1[None, :]
    j = (cum < target[:, None]).sum(axis=1)
    return np.minimum(j, pd.K - 1)


def _draw_sigma(kernel: CollisionKernel, gap: np.ndarray, rng) -> np.ndarray:
    """One scattering direction per row, law B-hat(gap_row, .)."""
    B, d = gap.shape
    r = np.linalg.norm(gap, axis=1)
    uh = gap / np.maximum(r, 1e-300)[:, None]
    t = kernel.sample_cos_theta(rng, B)
    g = rng.standard_normal((B, d))
    g -= (g * uh).sum(axis=1)[:, None] * uh
    gn = np.linalg.norm(g, axis=1)
    bad = np.flatnonzero(gn < 1e-12)
    for b in bad:
        e = np.zeros(d)
        e[int(np.argmin(np.abs(uh[b])))] = 1.0
        e -= (e @ uh[b]) * uh[b]
        g[b] = e
        gn[b] = np.linalg.norm(e)
    w = g / gn[:, None]
    return t[:, None] * uh + np.sqrt(np.maximum(1.0 - t * t, 0.0))[:, None] * w


# ---------------------------------------------------------------------------
# single-particle engine


def _register_events(counts, capped, cap_time, rep_ev, t_ev, cap, growth):
    """Bump per-replica populations and freeze replicas crossing the cap."""
    np.add.at(counts, rep_ev, growth)
    over = np.flatnonzero((counts > cap) & ~capped)
    if over.size:
        tmp = np.full(counts.shape[0], np.inf)
        np.minimum.at(tmp, rep_ev, t_ev)
        capped[over] = True
        cap_time[over] = np.where(np.isfinite(tmp[over]), tmp[over], t_ev.max())


def _evolve_singles(envd: _EnvData, kernel: CollisionKernel, vel, sign, rep,
                    t_cur, t_end, cap, rng, counts, capped, cap_time,
                    track=None):
    """Advance every particle to t_end; capped replicas freeze in place.

    Arrays are consumed and the grown versions returned.  counts / capped /
    cap_time are per-replica and updated in place.  track, when given, is a
    dict with per-replica arrays "n_events" and "signed_sum".
    """
    # the engine writes parent velocities in place, so it must own the array
    vel = np.array(vel, dtype=np.float64, order="C", copy=True)
    sign = np.asarray(sign, dtype=np.int8)
    rep = np.asarray(rep, dtype=np.int64)
    t_cur = np.asarray(t_cur, dtype=np.float64).copy()
    while True:
        live = np.flatnonzero((t_cur < t_end) & ~capped[rep])
        if live.size == 0:
            break
        live = live[:_CHUNK]
        pc = envd.piece_of(t_cur[live])
        buf_v, buf_s, buf_r, buf_t = [], [], [], []
        for p in np.unique(pc):
            g = live[pc == p]
            pd = envd.data[p]
            boundary = min(float(envd.edges[p + 1]), t_end)
            if pd.K == 0 or pd.W <= 0.0:
                t_cur[g] = boundary
                continue
            sp = np.linalg.norm(vel[g], axis=1)
            lam = 2.0 * (pd.W * sp + pd.Sy)
            tn = t_cur[g] + rng.exponential(size=g.size) / np.maximum(lam, 1e-300)
            cross = tn >= boundary
            t_cur[g[cross]] = boundary
            stay = g[~cross]
            if stay.size == 0:
                continue
            tn = tn[~cross]
            sps = sp[~cross]
            j = _sample_partners(pd, sps, rng)
            y = pd.Y[j]
            gap = vel[stay] - y
            r = np.linalg.norm(gap, axis=1)
            acc = rng.random(stay.size) * (sps + pd.sy[j]) < r
            t_cur[stay] = tn
            if not np.any(acc):
                continue
            ai = stay[acc]
            ya = y[acc]
            sigma = _draw_sigma(kernel, gap[acc], rng)
            vp, vps = collide(vel[ai], ya, sigma)
            vel[ai] = vp
            s_par = sign[ai]
            buf_v.append(np.vstack([vps, ya]))
            buf_s.append(np.concatenate([s_par, -s_par]))
            buf_r.append(np.concatenate([rep[ai], rep[ai]]))
            buf_t.append(np.concatenate([tn[acc], tn[acc]]))
            _register_events(counts, capped, cap_time, rep[ai], tn[acc], cap, 2)
            if track is not None:
                np.add.at(track["n_events"], rep[ai], 1)
                np.add.at(track["signed_sum"], rep[ai], s_par.astype(np.int64))
        if buf_v:
            vel = np.vstack([vel] + buf_v)
            sign = np.concatenate([sign] + buf_s)
            rep = np.concatenate([rep] + buf_r)
            t_cur = np.concatenate([t_cur] + buf_t)
    return vel, sign, rep, t_cur


# ---------------------------------------------------------------------------
# populations and plain runs


@dataclass
class SignedPopulation:
    """Particles with signs at a common time."""

    velocities: np.ndarray
    signs: np.ndarray
    time: float
    n_events: int = 0
    signed_event_sum: int = 0

    @property
    def atoms(self) -> list:
        return [(self.velocities[k], int(self.signs[k]))
                for k in range(self.signs.shape[0])]

    @property
    def n_plus(self) -> int:
        return int(np.sum(self.signs > 0))

    @property
    def n_minus(self) -> int:
        return int(np.sum(self.signs < 0))

    @property
    def count_signed(self) -> int:
        return self.n_plus - self.n_minus

    def signed_pairing(self, f) -> float:
        """sum of sign * f(v) over the population."""
        if self.signs.size == 0:
            return 0.0
        return float(np.sum(self.signs * np.asarray(f(self.velocities))))

    def weighted_count(self, p: float) -> float:
        """sum of 1 + |v|^p over the population, signs ignored."""
        if self.signs.size == 0:
            return 0.0
        speed = np.linalg.norm(self.velocities, axis=1)
        return float(np.sum(1.0 + speed ** p))


def branch_run(env: Environment, s: float, v0, sign0: int = 1, t: float = None,
               cap: int = 100000, rng=None, kernel: CollisionKernel = None):
    """One replica from a single particle (v0, sign0) at time s up to time t."""
    if t is None:
        t = env.horizon
    if not (0.0 <= s <= t <= env.horizon + 1e-12):
        raise ValueError("need 0 <= s <= t <= horizon")
    if cap < 1:
        raise ValueError("cap must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    kernel = hard_sphere(env.d) if kernel is None else kernel
    envd = _EnvData(env)
    v0 = np.asarray(v0, dtype=np.float64).reshape(1, env.d)
    counts = np.ones(1, dtype=np.int64)
    capped = np.zeros(1, dtype=bool)
    cap_time = np.full(1, np.nan)
    track = {"n_events": np.zeros(1, dtype=np.int64),
             "signed_sum": np.zeros(1, dtype=np.int64)}
    vel, sign, _, _ = _evolve_singles(
        envd, kernel, v0, np.array([sign0], dtype=np.int8),
        np.zeros(1, dtype=np.int64), np.array([s]), float(t), cap, rng,
        counts, capped, cap_time, track=track)
    if capped[0]:
        raise CapExceeded(cap, cap_time[0])
    return SignedPopulation(velocities=vel, signs=sign, time=float(t),
                            n_events=int(track["n_events"][0]),
                            signed_event_sum=int(track["signed_sum"][0]))


@dataclass
class EfEstimate:
    """Monte Carlo estimate of a signed-population pairing."""

    mean: float
    stderr: float
    n_rep: int
    n_capped: int
    flagged: bool

    def __iter__(self):
        return iter((self.mean, self.stderr))


def _replica_reduce(vals_by_rep: np.ndarray, ok: np.ndarray):
    """Per-point mean / stderr over the uncapped replicas of each point."""
    n_ok = ok.sum(axis=1)
    safe = np.maximum(n_ok, 1)
    means = np.where(n_ok > 0, (vals_by_rep * ok).sum(axis=1) / safe, np.nan)
    dev = (vals_by_rep - means[:, None]) * ok
    var = np.where(n_ok > 1, (dev * dev).sum(axis=1) / np.maximum(n_ok - 1, 1), np.nan)
    stderr = np.sqrt(var / safe)
    return means, stderr, n_ok


def estimate_Ef_points(env: Environment, starts, points, t: float,
                       f, n_rep: int = 100, cap: int = 100000, rng=None,
                       kernel: CollisionKernel = None):
    """Batched estimates of the signed expectation at many (start, point) pairs.

    Runs n_rep independent replicas from each (starts[k], points[k]) with sign
    +1 up to time t and averages sum(sign * f(v)) per point.  Returns
    (means, stderrs, capped_fraction) arrays of length len(points).
    """
    rng = np.random.default_rng() if rng is None else rng
    kernel = hard_sphere(env.d) if kernel is None else kernel
    points = np.asarray(points, dtype=np.float64).reshape(-1, env.d)
    starts = np.asarray(starts, dtype=np.float64).reshape(-1)
    if starts.shape[0] != points.shape[0]:
        raise ValueError("starts and points must align")
    if np.any(starts > t + 1e-12):
        raise ValueError("starts must not exceed t")
    P = points.shape[0]
    R = P * n_rep
    envd = _EnvData(env)
    vel = np.repeat(points, n_rep, axis=0)
    t0 = np.repeat(starts, n_rep)
    sign = np.ones(R, dtype=np.int8)
    rep = np.arange(R, dtype=np.int64)
    counts = np.ones(R, dtype=np.int64)
    capped = np.zeros(R, dtype=bool)
    cap_time = np.full(R, np.nan)
    vel, sign, rep, _ = _evolve_singles(envd, kernel, vel, sign, rep, t0,
                                        float(t), cap, rng, counts, capped,
                                        cap_time)
    contrib = sign.astype(np.float64) * np.asarray(f(vel), dtype=np.float64)
    sums = np.zeros(R)
    np.add.at(sums, rep, contrib)
    means, stderrs, n_ok = _replica_reduce(sums.reshape(P, n_rep),
                                           ~capped.reshape(P, n_rep))
    return means, stderrs, 1.0 - n_ok / float(n_rep)


def estimate_Ef(env: Environment, s: float, t: float, f, v0,
                n_rep: int = 1000, cap: int = 100000, rng=None,
                kernel: CollisionKernel = None) -> EfEstimate:
    """Monte Carlo mean and replica stderr of the signed pairing from (s, v0)."""
    means, stderrs, cfrac = estimate_Ef_points(
        env, [s], np.asarray(v0, dtype=np.float64).reshape(1, -1), t, f,
        n_rep=n_rep, cap=cap, rng=rng, kernel=kernel)
    n_capped = int(round(cfrac[0] * n_rep))
    return EfEstimate(mean=float(means[0]), stderr=float(stderrs[0]),
                      n_rep=n_rep, n_capped=n_capped,
                      flagged=n_capped > 0.01 * n_rep)


def jpe_bound(env: Environment, s: float, t: float, v0) -> float:
    """Second-moment growth envelope: (1+|v0|^2) exp(8 int <1+|v|^3, rho>)."""
    v0 = np.asarray(v0, dtype=np.float64)
    return float((1.0 + v0 @ v0) * np.exp(8.0 * env.m3_integral(s, t)))


# ---------------------------------------------------------------------------
# coupling of two initial points in one environment


@dataclass
class CouplingStats:
    """Replica-averaged masses of the coupled and uncoupled populations."""

    p: float
    n_rep: int
    n_capped: int
    coupled_mass: float
    uncoupled_mass_1: float
    uncoupled_mass_2: float
    uncoupled_total: float
    uncoupled_stderr: float
    contraction_gap0: float = float("nan")
    contraction_max: float = float("nan")
    flagged: bool = False
    per_replica: dict = field(default_factory=dict, repr=False)


def _pool_append(pool, v, s, r, tb):
    pool[0].append(np.atleast_2d(v))
    pool[1].append(np.asarray(s, dtype=np.int8))
    pool[2].append(np.asarray(r, dtype=np.int64))
    pool[3].append(np.asarray(tb, dtype=np.float64))


def _pool_arrays(pool, d):
    if not pool[0]:
        return (np.zeros((0, d)), np.zeros(0, dtype=np.int8),
                np.zeros(0, dtype=np.int64), np.zeros(0))
    return (np.vstack(pool[0]), np.concatenate(pool[1]),
            np.concatenate(pool[2]), np.concatenate(pool[3]))


def _evolve_pairs(envd: _EnvData, kernel: CollisionKernel, u1, u2, sign, rep,
                  t_cur, t_end, cap, rng, counts, capped, cap_time,
                  pools, cmax):
    """Coupled-pair phase: advance pairs, spilling decoupled singles to pools.

    A pair proposes from the superposition of its two thinning chains; an
    accepted direction sigma is classified against the two rate densities
    b_k = |u_k - y| g(sigma . unit(u_k - y)): overlap -> coupled transition
    with common (y, sigma), excess -> the larger side branches alone.
    cmax accumulates the largest coupled-pair gap seen per replica.
    """
    u1 = np.array(u1, dtype=np.float64, order="C", copy=True)
    u2 = np.array(u2, dtype=np.float64, order="C", copy=True)
    t_cur = np.asarray(t_cur, dtype=np.float64).copy()
    alive = np.ones(u1.shape[0], dtype=bool)
    while True:
        live = np.flatnonzero(alive & (t_cur < t_end) & ~capped[rep])
        if live.size == 0:
            break
        live = live[:_CHUNK]
        pc = envd.piece_of(t_cur[live])
        b1_v, b1_u2, b1_s, b1_r, b1_t = [], [], [], [], []
        for p in np.unique(pc):
            g = live[pc == p]
            pd = envd.data[p]
            boundary = min(float(envd.edges[p + 1]), t_end)
            if pd.K == 0 or pd.W <= 0.0:
                t_cur[g] = boundary
                continue
            sp1 = np.linalg.norm(u1[g], axis=1)
            sp2 = np.linalg.norm(u2[g], axis=1)
            lam1 = pd.W * sp1 + pd.Sy
            lam2 = pd.W * sp2 + pd.Sy
            lam = 2.0 * (lam1 + lam2)
            tn = t_cur[g] + rng.exponential(size=g.size) / np.maximum(lam, 1e-300)
            cross = tn >= boundary
            t_cur[g[cross]] = boundary
            stay = g[~cross]
            if stay.size == 0:
                continue
            tn = tn[~cross]
            side1 = rng.random(stay.size) * (lam1 + lam2)[~cross] < lam1[~cross]
            spk = np.where(side1, sp1[~cross], sp2[~cross])
            uk = np.where(side1[:, None], u1[stay], u2[stay])
            j = _sample_partners(pd, spk, rng)
            y = pd.Y[j]
            gapk = uk - y
            rk = np.linalg.norm(gapk, axis=1)
            acc = rng.random(stay.size) * (spk + pd.sy[j]) < rk
            t_cur[stay] = tn
            if not np.any(acc):
                continue
            ai = stay[acc]
            ya = y[acc]
            sigma = _draw_sigma(kernel, gapk[acc], rng)
            g1 = u1[ai] - ya
            g2 = u2[ai] - ya
            r1 = np.linalg.norm(g1, axis=1)
            r2 = np.linalg.norm(g2, axis=1)
            t1 = (sigma * g1).sum(axis=1) / np.maximum(r1, 1e-300)
            t2 = (sigma * g2).sum(axis=1) / np.maximum(r2, 1e-300)
            b1 = r1 * kernel.angular_density(np.clip(t1, -1.0, 1.0))
            b2 = r2 * kernel.angular_density(np.clip(t2, -1.0, 1.0))
            v = rng.random(ai.size) * (b1 + b2)
            lo = np.minimum(b1, b2)
            hi = np.maximum(b1, b2)
            kind_c = v < lo
            kind_d = (~kind_c) & (v < hi)
            tacc = tn[acc]
            if np.any(kind_c):
                ci = ai[kind_c]
                yc = ya[kind_c]
                sc = sigma[kind_c]
                p1, p1s = collide(u1[ci], yc, sc)
                p2, p2s = collide(u2[ci], yc, sc)
                u1[ci] = p1
                u2[ci] = p2
                rr = rep[ci]
                np.maximum.at(cmax, rr, np.linalg.norm(p1 - p2, axis=1))
                np.maximum.at(cmax, rr, np.linalg.norm(p1s - p2s, axis=1))
                b1_v.append(np.vstack([p1s, yc]))
                b1_u2.append(np.vstack([p2s, yc]))
                b1_s.append(np.concatenate([sign[ci], -sign[ci]]))
                b1_r.append(np.concatenate([rr, rr]))
                b1_t.append(np.concatenate([tacc[kind_c], tacc[kind_c]]))
            if np.any(kind_d):
                di = ai[kind_d]
                yd = ya[kind_d]
                sd = sigma[kind_d]
                to1 = b1[kind_d] >= b2[kind_d]
                for side, mask in ((1, to1), (2, ~to1)):
                    if not np.any(mask):
                        continue
                    ii = di[mask]
                    uk_ = u1[ii] if side == 1 else u2[ii]
                    uo_ = u2[ii] if side == 1 else u1[ii]
                    wp, wps = collide(uk_, yd[mask], sd[mask])
                    ss = sign[ii]
                    rr = rep[ii]
                    tt = tacc[kind_d][mask]
                    tri = np.vstack([wp, wps, yd[mask]])
                    tris = np.concatenate([ss, ss, -ss])
                    trir = np.concatenate([rr, rr, rr])
                    trit = np.concatenate([tt, tt, tt])
                    _pool_append(pools[side - 1], tri, tris, trir, trit)
                    _pool_append(pools[2 - side], uo_, ss, rr, tt)
                alive[di] = False
            # a coupled event adds two pairs (4 atoms), a decoupling nets +2
            if np.any(kind_c):
                _register_events(counts, capped, cap_time, rep[ai[kind_c]],
                                 tacc[kind_c], cap, 4)
            if np.any(kind_d):
                _register_events(counts, capped, cap_time, rep[ai[kind_d]],
                                 tacc[kind_d], cap, 2)
        if b1_v:
            u1 = np.vstack([u1] + b1_v)
            u2 = np.vstack([u2] + b1_u2)
            sign = np.concatenate([sign] + b1_s)
            rep = np.concatenate([rep] + b1_r)
            t_cur = np.concatenate([t_cur] + b1_t)
            alive = np.concatenate([alive, np.ones(sum(a.shape[0] for a in b1_v),
                                                   dtype=bool)])
    return u1, u2, sign, rep, alive


def _mass_by_rep(vel, rep, n_rep, p):
    out = np.zeros(n_rep)
    if vel.shape[0]:
        speed = np.linalg.norm(vel, axis=1)
        np.add.at(out, rep, 1.0 + speed ** p)
    return out


def coupled_initial(env: Environment, v1, v2, t: float, p: float = 2.0,
                    n_rep: int = 1000, cap: int = 100000, rng=None,
                    kernel: CollisionKernel = None) -> CouplingStats:
    """Pairs started from (v1, v2) in a common environment, maximally coupled.

    Coupled pairs branch together with a shared partner and direction; the
    gap between their components never grows.  Decoupled particles continue
    as independent single-particle populations, whose p-weighted masses are
    what the growth bound controls.
    """
    rng = np.random.default_rng() if rng is None else rng
    kernel = hard_sphere(env.d) if kernel is None else kernel
    if not (0.0 <= t <= env.horizon + 1e-12):
        raise ValueError("t outside environment horizon")
    envd = _EnvData(env)
    d = env.d
    v1 = np.asarray(v1, dtype=np.float64).reshape(d)
    v2 = np.asarray(v2, dtype=np.float64).reshape(d)
    gap0 = float(np.linalg.norm(v1 - v2))
    u1 = np.tile(v1, (n_rep, 1))
    u2 = np.tile(v2, (n_rep, 1))
    sign = np.ones(n_rep, dtype=np.int8)
    rep = np.arange(n_rep, dtype=np.int64)
    t_cur = np.zeros(n_rep)
    counts = np.full(n_rep, 2, dtype=np.int64)
    capped = np.zeros(n_rep, dtype=bool)
    cap_time = np.full(n_rep, np.nan)
    cmax = np.full(n_rep, gap0)
    pools = ([[], [], [], []], [[], [], [], []])
    u1, u2, sign, rep, alive = _evolve_pairs(
        envd, kernel, u1, u2, sign, rep, t_cur, float(t), cap, rng,
        counts, capped, cap_time, pools, cmax)
    singles = []
    for pool in pools:
        sv, ssn, srp, stb = _pool_arrays(pool, d)
        if sv.shape[0]:
            sv, ssn, srp, _ = _evolve_singles(envd, kernel, sv, ssn, srp, stb,
                                              float(t), cap, rng, counts,
                                              capped, cap_time)
        singles.append((sv, ssn, srp))
    ok = ~capped
    m1 = _mass_by_rep(singles[0][0], singles[0][2], n_rep, p)
    m2 = _mass_by_rep(singles[1][0], singles[1][2], n_rep, p)
    pair_keep = alive & ok[rep]
    cm1 = _mass_by_rep(u1[pair_keep], rep[pair_keep], n_rep, p)
    cm2 = _mass_by_rep(u2[pair_keep], rep[pair_keep], n_rep, p)
    cm = 0.5 * (cm1 + cm2)
    tot = m1 + m2
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise CapExceeded(cap, float(np.nanmin(cap_time)))
    mean_tot = float(tot[ok].mean())
    se_tot = float(tot[ok].std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else float("nan")
    return CouplingStats(
        p=p, n_rep=n_rep, n_capped=int(n_rep - n_ok),
        coupled_mass=float(cm[ok].mean()),
        uncoupled_mass_1=float(m1[ok].mean()),
        uncoupled_mass_2=float(m2[ok].mean()),
        uncoupled_total=mean_tot, uncoupled_stderr=se_tot,
        contraction_gap0=gap0, contraction_max=float(cmax[ok].max()),
        flagged=(n_rep - n_ok) > 0.01 * n_rep,
        per_replica={"uncoupled_total": tot, "coupled": cm, "capped": capped,
                     "contraction_max": cmax, "coupled_1": cm1,
                     "coupled_2": cm2, "uncoupled_1": m1, "uncoupled_2": m2})


def ghu_bound(env: Environment, v1, v2, t: float,
              kappa: float = None, kernel: CollisionKernel = None) -> float:
    """Growth envelope for the mean uncoupled second-moment mass."""
    if kappa is None:
        kappa = kernel_kappa(hard_sphere(env.d) if kernel is None else kernel)
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    gap = float(np.linalg.norm(v1 - v2))
    return float(6.0 * kappa * t * (2.0 + v1 @ v1 + v2 @ v2) * gap
                 * np.exp(8.0 * env.m3_integral(0.0, t)))


# ---------------------------------------------------------------------------
# coupling of one point in two environments


def _align_environments(env1: Environment, env2: Environment):
    """Union time grid with per-piece shared atom support and both weights."""
    if abs(env1.horizon - env2.horizon) > 1e-12:
        raise ValueError("environments must share a horizon")
    starts = np.union1d(env1.starts, env2.starts)
    pieces = []
    for k, s in enumerate(starts):
        mu1 = env1.measure_at(float(s))
        mu2 = env2.measure_at(float(s))
        index = {}
        Y, w1, w2 = [], [], []
        for mu, wlist in ((mu1, w1), (mu2, w2)):
            for a, wt in zip(mu.atoms, mu.weights):
                key = a.tobytes()
                if key not in index:
                    index[key] = len(Y)
                    Y.append(a)
                    w1.append(0.0)
                    w2.append(0.0)
                wlist[index[key]] += float(wt)
        Y = np.array(Y, dtype=np.float64).reshape(-1, env1.d)
        pieces.append((float(s), Y, np.array(w1), np.array(w2)))
    return pieces, np.append(starts, env1.horizon)


class _SharedPiece:
    __slots__ = ("Y", "sy", "w1", "w2", "wmin", "wmax", "pd")

    def __init__(self, Y, w1, w2):
        self.Y = Y
        self.sy = np.linalg.norm(Y, axis=1) if Y.size else np.zeros(0)
        self.w1 = w1
        self.w2 = w2
        self.wmin = np.minimum(w1, w2)
        self.wmax = np.maximum(w1, w2)
        self.pd = _PieceData(Y, self.wmax)


def coupled_environment(env1: Environment, env2: Environment, v0,
                        t: float, p: float = 2.0, n_rep: int = 1000,
                        cap: int = 100000, rng=None,
                        kernel: CollisionKernel = None) -> CouplingStats:
    """One initial particle driven by two environments, maximally coupled.

    While coupled, the particle branches with a partner drawn from the
    overlap (atomwise weight minimum); an excess-weight proposal uncouples
    it: the richer side branches alone and the other side retains the
    particle.  Uncoupled populations then evolve under their own
    environments.
    """
    rng = np.random.default_rng() if rng is None else rng
    d = env1.d
    kernel = hard_sphere(d) if kernel is None else kernel
    shared_pieces, edges = _align_environments(env1, env2)
    shared = [_SharedPiece(Y, w1, w2) for _, Y, w1, w2 in shared_pieces]
    v0 = np.asarray(v0, dtype=np.float64).reshape(d)
    vel = np.tile(v0, (n_rep, 1))
    sign = np.ones(n_rep, dtype=np.int8)
    rep = np.arange(n_rep, dtype=np.int64)
    t_cur = np.zeros(n_rep)
    alive = np.ones(n_rep, dtype=bool)
    counts = np.ones(n_rep, dtype=np.int64)
    capped = np.zeros(n_rep, dtype=bool)
    cap_time = np.full(n_rep, np.nan)
    pools = ([[], [], [], []], [[], [], [], []])
    n_unc_events = np.zeros(n_rep, dtype=np.int64)
    while True:
        live = np.flatnonzero(alive & (t_cur < t) & ~capped[rep])
        if live.size == 0:
            break
        live = live[:_CHUNK]
        pc = np.clip(np.searchsorted(edges, t_cur[live], side="right") - 1,
                     0, len(shared) - 1)
        b_v, b_s, b_r, b_t = [], [], [], []
        for pz in np.unique(pc):
            g = live[pc == pz]
            sh = shared[pz]
            pd = sh.pd
            boundary = min(float(edges[pz + 1]), float(t))
            if pd.K == 0 or pd.W <= 0.0:
                t_cur[g] = boundary
                continue
            sp = np.linalg.norm(vel[g], axis=1)
            lam = 2.0 * (pd.W * sp + pd.Sy)
            tn = t_cur[g] + rng.exponential(size=g.size) / np.maximum(lam, 1e-300)
            cross = tn >= boundary
            t_cur[g[cross]] = boundary
            stay = g[~cross]
            if stay.size == 0:
                continue
            tn = tn[~cross]
            sps = sp[~cross]
            j = _sample_partners(pd, sps, rng)
            y = pd.Y[j]
            gap = vel[stay] - y
            r = np.linalg.norm(gap, axis=1)
            acc = rng.random(stay.size) * (sps + pd.sy[j]) < r
            t_cur[stay] = tn
            if not np.any(acc):
                continue
            ai = stay[acc]
            ja = j[acc]
            ya = y[acc]
            sigma = _draw_sigma(kernel, gap[acc], rng)
            vp, vps = collide(vel[ai], ya, sigma)
            tacc = tn[acc]
            u = rng.random(ai.size) * sh.wmax[ja]
            kc = u < sh.wmin[ja]
            if np.any(kc):
                ci = ai[kc]
                vel[ci] = vp[kc]
                b_v.append(np.vstack([vps[kc], ya[kc]]))
                b_s.append(np.concatenate([sign[ci], -sign[ci]]))
                b_r.append(np.concatenate([rep[ci], rep[ci]]))
                b_t.append(np.concatenate([tacc[kc], tacc[kc]]))
                _register_events(counts, capped, cap_time, rep[ci], tacc[kc],
                                 cap, 2)
            kd = ~kc
            if np.any(kd):
                di = ai[kd]
                to1 = sh.w1[ja[kd]] >= sh.w2[ja[kd]]
                for side, mask in ((1, to1), (2, ~to1)):
                    if not np.any(mask):
                        continue
                    ii = di[mask]
                    sel = np.flatnonzero(kd)[mask]
                    ss = sign[ii]
                    rr = rep[ii]
                    tt = tacc[kd][mask]
                    tri = np.vstack([vp[sel], vps[sel], ya[sel]])
                    _pool_append(pools[side - 1], tri,
                                 np.concatenate([ss, ss, -ss]),
                                 np.concatenate([rr, rr, rr]),
                                 np.concatenate([tt, tt, tt]))
                    _pool_append(pools[2 - side], vel[ii], ss, rr, tt)
                alive[di] = False
                np.add.at(n_unc_events, rep[di], 1)
                _register_events(counts, capped, cap_time, rep[di], tacc[kd],
                                 cap, 3)
        if b_v:
            vel = np.vstack([vel] + b_v)
            sign = np.concatenate([sign] + b_s)
            rep = np.concatenate([rep] + b_r)
            t_cur = np.concatenate([t_cur] + b_t)
            alive = np.concatenate([alive, np.ones(sum(a.shape[0] for a in b_v),
                                                   dtype=bool)])
    singles = []
    for env, pool in ((env1, pools[0]), (env2, pools[1])):
        sv, ssn, srp, stb = _pool_arrays(pool, d)
        if sv.shape[0]:
            sv, ssn, srp, _ = _evolve_singles(_EnvData(env), kernel, sv, ssn,
                                              srp, stb, float(t), cap, rng,
                                              counts, capped, cap_time)
        singles.append((sv, ssn, srp))
    ok = ~capped
    m1 = _mass_by_rep(singles[0][0], singles[0][2], n_rep, p)
    m2 = _mass_by_rep(singles[1][0], singles[1][2], n_rep, p)
    keep = alive & ok[rep]
    cm = _mass_by_rep(vel[keep], rep[keep], n_rep, p)
    coupled_count = np.zeros(n_rep)
    if np.any(keep):
        np.add.at(coupled_count, rep[keep], 1.0)
    tot = m1 + m2
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise CapExceeded(cap, float(np.nanmin(cap_time)))
    se = float(tot[ok].std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else float("nan")
    return CouplingStats(
        p=p, n_rep=n_rep, n_capped=int(n_rep - n_ok),
        coupled_mass=float(cm[ok].mean()),
        uncoupled_mass_1=float(m1[ok].mean()),
        uncoupled_mass_2=float(m2[ok].mean()),
        uncoupled_total=float(tot[ok].mean()), uncoupled_stderr=se,
        flagged=(n_rep - n_ok) > 0.01 * n_rep,
        per_replica={"uncoupled_total": tot, "coupled": cm, "capped": capped,
                     "coupled_count": coupled_count,
                     "n_uncouple_events": n_unc_events})


def dcl_envelope(env1: Environment, env2: Environment, v0, t: float,
                 p: float = 2.0) -> float:
    """Shape of the environment-difference bound, with unit front constant.

    Returns (1+|v0|^{p+1}) exp(int <1+|v|^{p+2}, rho1+rho2>) int d_{p+1},
    where d_{p+1}(s) pairs 1+|v|^{p+1} with the total-variation measure
    |rho1_s - rho2_s|.  The literature constant in front is not numeric,
    so consumers fit it; only the functional form is asserted.
    """
    shared_pieces, edges = _align_environments(env1, env2)
    v0 = np.asarray(v0, dtype=np.float64)
    grow = 0.0
    dint = 0.0
    for k, (_, Y, w1, w2) in enumerate(shared_pieces):
        a, b = float(edges[k]), min(float(edges[k + 1]), t)
        if b <= a:
            continue
        sy = np.linalg.norm(Y, axis=1) if Y.size else np.zeros(0)
        wd = np.abs(w1 - w2)
        ws = w1 + w2
        grow += (b - a) * float(np.sum(ws * (1.0 + sy ** (p + 2.0))))
        dint += (b - a) * float(np.sum(wd * (1.0 + sy ** (p + 1.0))))
    return float((1.0 + np.linalg.norm(v0) ** (p + 1.0)) * np.exp(grow) * dint)


# ---------------------------------------------------------------------------
# martingale representation of the difference of two trajectories


@dataclass
class RepresentationReport:
    """Exact difference functional versus its Monte Carlo reconstruction."""

    lhs: float
    rhs: float
    stderr: float
    z: float
    n_groups: int
    n_points: int
    flagged: bool
    details: dict = field(default_factory=dict, repr=False)


def _representation_terms(path, sign_coeff, t):
    """(start, point, coeff) triples for one trajectory's exact terms.

    Covers the initial-condition pairing and the jump sums; the compensator
    part is sampled separately.
    """
    n = path.initial.n
    starts, points, coeffs = [], [], []
    # initial-condition term at time 0
    starts.append(np.zeros(n))
    points.append(path.initial.velocities)
    coeffs.append(np.full(n, sign_coeff / n))
    # jump terms
    for k in range(path.n_events):
        tk = float(path.times[k])
        if tk > t:
            break
        starts.append(np.full(4, tk))
        points.append(np.vstack([path.post[k, 0], path.post[k, 1],
                                 path.pre[k, 0], path.pre[k, 1]]))
        coeffs.append(sign_coeff / n * np.array([1.0, 1.0, -1.0, -1.0]))
    return starts, points, coeffs


def _compensator_terms(path, sign_coeff, t, env_edges, pairs_per_piece,
                       kernel, rng):
    n = path.initial.n
    starts, points, coeffs = [], [], []
    for k in range(len(env_edges) - 1):
        a = float(env_edges[k])
        b = min(float(env_edges[k + 1]), t)
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        state = path.state_at(mid)
        x = state.velocities
        R = pairs_per_piece
        i = rng.integers(0, n, size=R)
        j = rng.integers(0, n - 1, size=R)
        j = j + (j >= i)
        gap = x[i] - x[j]
        rr = np.linalg.norm(gap, axis=1)
        sigma = _draw_sigma(kernel, gap, rng)
        vp, vps = collide(x[i], x[j], sigma)
        # unbiased for the pairing: ordered pairs are uniform on n(n-1)
        base = -sign_coeff * (b - a) * (n - 1.0) / (n * R) * rr
        starts.append(np.full(4 * R, mid))
        points.append(np.vstack([vp, vps, x[i], x[j]]))
        coeffs.append(np.concatenate([base, base, -base, -base]))
    return starts, points, coeffs


def verify_representation(pathN, pathNp, f: TestFunction, t: float = None,
                          n_rep: int = 16, rng=None,
                          kernel: CollisionKernel = None, n_groups: int = 8,
                          pairs_per_piece: int = 8, cap: int = 100000,
                          ) -> RepresentationReport:
    """Check the two-trajectory difference identity by Monte Carlo.

    The exact left side pairs f with the difference of the two empirical
    states at time t.  The right side transports every term back through the
    branching semigroup of the half-sum environment: the initial difference,
    each trajectory's jump sums, minus each trajectory's compensator
    integral.  Each of n_groups groups rebuilds the right side with fresh
    randomness (both the pair subsampling and the branching estimates), so
    the group spread is an honest standard error for the z-score.
    """
    rng = np.random.default_rng() if rng is None else rng
    if t is None:
        t = min(pathN.T, pathNp.T)
    env = Environment.from_paths(pathN, pathNp, horizon=max(t, 1e-12))
    kernel = hard_sphere(env.d) if kernel is None else kernel
    muN = pathN.state_at(t).as_measure()
    muNp = pathNp.state_at(t).as_measure()
    lhs = float(np.sum(muN.weights * f(muN.atoms))
                - np.sum(muNp.weights * f(muNp.atoms)))
    edges = env.edges
    rhs_groups = []
    flagged = False
    capped_total = 0
    for _ in range(n_groups):
        starts, points, coeffs = [], [], []
        for path, sc in ((pathN, 1.0), (pathNp, -1.0)):
            s1, p1, c1 = _representation_terms(path, sc, t)
            s2, p2, c2 = _compensator_terms(path, sc, t, edges,
                                            pairs_per_piece, kernel, rng)
            starts += s1 + s2
            points += p1 + p2
            coeffs += c1 + c2
        starts = np.concatenate(starts)
        points = np.vstack(points)
        coeffs = np.concatenate(coeffs)
        means, _, cfrac = estimate_Ef_points(env, starts, points, t, f,
                                             n_rep=n_rep, cap=cap, rng=rng,
                                             kernel=kernel)
        if np.any(cfrac[np.abs(coeffs) > 0] > 0.01):
            flagged = True
        capped_total += int(round(float(cfrac.sum()) * n_rep))
        rhs_groups.append(float(np.sum(coeffs * means)))
    rhs_groups = np.array(rhs_groups)
    rhs = float(rhs_groups.mean())
    stderr = float(rhs_groups.std(ddof=1) / np.sqrt(n_groups))
    if stderr > 0:
        z = (lhs - rhs) / stderr
    else:
        z = 0.0 if abs(lhs - rhs) < 1e-12 else float("inf")
    return RepresentationReport(
        lhs=lhs, rhs=rhs, stderr=stderr, z=float(z), n_groups=n_groups,
        n_points=int(starts.shape[0]), flagged=flagged,
        details={"rhs_groups": rhs_groups, "n_capped": capped_total,
                 "t": float(t)})

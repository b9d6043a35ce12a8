"""Event-driven simulation of the pairwise-collision jump process.

States live on the shell S_N (zero mean velocity, unit mean energy).  Each
unordered pair {i, j} collides at rate 2|v_i - v_j|/N; at a collision the
pair jumps to the post-collision velocities given by core.collide with a
scattering direction drawn from the kernel's angular law.

Simulation is exact by thinning: proposals arrive at the bound rate
lam_bar = (2/N) sum_{i<j} (|v_i| + |v_j|) = 2(N-1)S1/N with S1 = sum |v_i|,
realized by drawing the first index proportional to speed (sum tree) and the
second uniformly among the rest, which makes the proposal law of {i, j}
proportional to |v_i| + |v_j|; acceptance with probability
|v_i - v_j|/(|v_i| + |v_j|) then yields the exact pair rates.  Rejected
proposals still advance time, which is valid because the bound is constant
between accepted events.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import EmpiricalMeasure, ParticleState, TestFunction, collide
from .kernels import CollisionKernel, HardSphereKernel, kernel_by_name


@njit(cache=True)
def _run_loop(vel, T, seed, invpow, cap, times, idx, sigmas, pre, post):
    """Jit core: fills event arrays, returns (n_events, n_proposals, status, bad).

    status 0 = ran to horizon, 1 = event capacity reached, 2 = non-finite
    state (bad = offending event index).
    """
    N, d = vel.shape
    np.random.seed(seed)

    speeds = np.empty(N)
    for k in range(N):
        s = 0.0
        for c in range(d):
            s += vel[k, c] * vel[k, c]
        speeds[k] = np.sqrt(s)

    M = 1
    while M < N:
        M *= 2
    tree = np.zeros(2 * M)
    for k in range(N):
        tree[M + k] = speeds[k]
    for k in range(M - 1, 0, -1):
        tree[k] = tree[2 * k] + tree[2 * k + 1]

    u_hat = np.empty(d)
    z = np.empty(d)
    sig = np.empty(d)

    t = 0.0
    nev = 0
    nprop = 0
    while True:
        s1 = tree[1]
        lam = 2.0 * (N - 1) * s1 / N
        if lam <= 0.0:
            break
        inc = -np.log(1.0 - np.random.random()) / lam
        while inc == 0.0:          # keep event times strictly increasing
            inc = -np.log(1.0 - np.random.random()) / lam
        t += inc
        if t > T:
            break
        nprop += 1

        # first index ~ speed via tree descent, second uniform among the rest
        u = np.random.random() * tree[1]
        k = 1
        while k < M:
            k *= 2
            if u >= tree[k]:
                u -= tree[k]
                k += 1
        i = k - M
        if i >= N:
            i = N - 1
        j = np.random.randint(0, N - 1)
        if j >= i:
            j += 1

        den = speeds[i] + speeds[j]
        if den <= 0.0:
            continue
        s = 0.0
        for c in range(d):
            dc = vel[i, c] - vel[j, c]
            s += dc * dc
        r = np.sqrt(s)
        if np.random.random() * den >= r:
            continue

        # accepted: scattering direction = t_cos * u_hat + sin * (unit normal)
        for c in range(d):
            u_hat[c] = (vel[i, c] - vel[j, c]) / r
        t_cos = 2.0 * np.random.random() ** invpow - 1.0
        while True:
            zu = 0.0
            for c in range(d):
                z[c] = np.random.normal(0.0, 1.0)
            for c in range(d):
                zu += z[c] * u_hat[c]
            nz = 0.0
            for c in range(d):
                z[c] -= zu * u_hat[c]
                nz += z[c] * z[c]
            nz = np.sqrt(nz)
            if nz > 1e-12:
                break
        st = np.sqrt(max(1.0 - t_cos * t_cos, 0.0))
        for c in range(d):
            sig[c] = t_cos * u_hat[c] + st * z[c] / nz

        half = 0.5 * r
        ok = True
        for c in range(d):
            m = 0.5 * (vel[i, c] + vel[j, c])
            p0 = m + half * sig[c]
            p1 = m - half * sig[c]
            pre[nev, 0, c] = vel[i, c]
            pre[nev, 1, c] = vel[j, c]
            post[nev, 0, c] = p0
            post[nev, 1, c] = p1
            if not (np.isfinite(p0) and np.isfinite(p1)):
                ok = False
        if not ok:
            return nev, nprop, 2, nev
        times[nev] = t
        idx[nev, 0] = i
        idx[nev, 1] = j
        sigmas[nev] = sig

        for c in range(d):
            vel[i, c] = post[nev, 0, c]
            vel[j, c] = post[nev, 1, c]
        for a in (i, j):
            s = 0.0
            for c in range(d):
                s += vel[a, c] * vel[a, c]
            speeds[a] = np.sqrt(s)
            node = M + a
            tree[node] = speeds[a]
            node >>= 1
            while node >= 1:
                tree[node] = tree[2 * node] + tree[2 * node + 1]
                node >>= 1

        nev += 1
        if nev == cap:
            return nev, nprop, 1, -1
    return nev, nprop, 0, -1


@dataclass
class KacEvent:
    time: float
    i: int
    j: int
    sigma: np.ndarray
    pre: tuple
    post: tuple


class KacPath:
    """Immutable record of one simulated trajectory.

    Event data is held columnar (times, idx, sigmas, pre, post); the final
    state is produced by replaying the recorded post-collision velocities, so
    identical inputs give bit-identical paths.
    """

    def __init__(self, initial: ParticleState, T: float, seed: int,
                 kernel_name: str, times, idx, sigmas, pre, post, n_proposals: int):
        if np.any(np.diff(times) <= 0):
            raise ValueError("event times must be strictly increasing")
        if times.size and (times[0] <= 0 or times[-1] > T):
            raise ValueError("event times must lie in (0, T]")
        self.initial = initial
        self.T = float(T)
        self.seed = int(seed)
        self.kernel_name = kernel_name
        self.times = times
        self.idx = idx
        self.sigmas = sigmas
        self.pre = pre
        self.post = post
        self.n_proposals = int(n_proposals)
        for a in (self.initial.velocities, times, idx, sigmas, pre, post):
            a.setflags(write=False)

    @property
    def n_events(self) -> int:
        return self.times.size

    def event(self, k: int) -> KacEvent:
        return KacEvent(time=float(self.times[k]), i=int(self.idx[k, 0]),
                        j=int(self.idx[k, 1]), sigma=self.sigmas[k],
                        pre=(self.pre[k, 0], self.pre[k, 1]),
                        post=(self.post[k, 0], self.post[k, 1]))

    @property
    def events(self) -> list:
        return [self.event(k) for k in range(self.n_events)]

    def state_at(self, t: float) -> ParticleState:
        if t < 0 or t > self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        k = int(np.searchsorted(self.times, t, side="right"))
        vel = self.initial.velocities.copy()
        for e in range(k):
            vel[self.idx[e, 0]] = self.post[e, 0]
            vel[self.idx[e, 1]] = self.post[e, 1]
        return ParticleState(velocities=vel, t=float(t))

    def final_state(self) -> ParticleState:
        return self.state_at(self.T)

    def verify_events(self) -> bool:
        """Recompute every post pair from (pre, sigma); True iff bit-identical."""
        for k in range(self.n_events):
            p0, p1 = collide(self.pre[k, 0], self.pre[k, 1], self.sigmas[k])
            if not (np.array_equal(p0, self.post[k, 0]) and np.array_equal(p1, self.post[k, 1])):
                return False
        return True

    def save_jsonl(self, fname: str, meta: dict | None = None) -> None:
        with open(fname, "w") as fh:
            head = {"n": self.initial.n, "d": self.initial.d, "T": self.T,
                    "seed": self.seed, "kernel": self.kernel_name,
                    "initial": self.initial.velocities.tolist()}
            if meta:
                head.update(meta)
            fh.write(json.dumps(head) + "\n")
            for k in range(self.n_events):
                fh.write(json.dumps({"t": float(self.times[k]),
                                     "i": int(self.idx[k, 0]),
                                     "j": int(self.idx[k, 1]),
                                     "sigma": self.sigmas[k].tolist()}) + "\n")


def load_path_jsonl(fname: str) -> KacPath:
    """Rebuild a path from its event log; post states come from replay."""
    with open(fname) as fh:
        head = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    vel = np.array(head["initial"], dtype=np.float64)
    n_ev = len(rows)
    d = vel.shape[1]
    times = np.array([r["t"] for r in rows])
    idx = np.array([[r["i"], r["j"]] for r in rows], dtype=np.int64).reshape(n_ev, 2)
    sigmas = np.array([r["sigma"] for r in rows], dtype=np.float64).reshape(n_ev, d)
    pre = np.empty((n_ev, 2, d))
    post = np.empty((n_ev, 2, d))
    cur = vel.copy()
    for k in range(n_ev):
        i, j = idx[k]
        pre[k, 0], pre[k, 1] = cur[i], cur[j]
        p0, p1 = collide(cur[i], cur[j], sigmas[k])
        post[k, 0], post[k, 1] = p0, p1
        cur[i], cur[j] = p0, p1
    initial = ParticleState(velocities=vel, t=0.0)
    return KacPath(initial, head["T"], head["seed"], head.get("kernel", ""),
                   times, idx, sigmas, pre, post, n_proposals=-1)


def run(initial: ParticleState, kernel: CollisionKernel, T: float, seed: int) -> KacPath:
    """Simulate the collision process from `initial` over [0, T]."""
    initial.check_conserved()
    if T < 0:
        raise ValueError("T must be nonnegative")
    N, d = initial.n, initial.d
    if d != kernel.d:
        raise ValueError(f"state dimension {d} != kernel dimension {kernel.d}")
    if not isinstance(kernel, HardSphereKernel):
        raise NotImplementedError("jit event loop is shipped for the closed-form kernels")
    invpow = 2.0 / (kernel.d - 1)
    seed_u32 = int(seed) % (2 ** 32)

    # expected event count is at most 2NT (rate bound); headroom for the tail
    mean_cap = 2.0 * N * T
    cap = int(mean_cap + 8.0 * np.sqrt(mean_cap + 1.0)) + 256
    while True:
        vel = np.ascontiguousarray(initial.velocities.copy())
        times = np.empty(cap)
        idx = np.empty((cap, 2), dtype=np.int64)
        sigmas = np.empty((cap, d))
        pre = np.empty((cap, 2, d))
        post = np.empty((cap, 2, d))
        nev, nprop, status, bad = _run_loop(vel, T, seed_u32, invpow, cap,
                                            times, idx, sigmas, pre, post)
        if status == 2:
            raise RuntimeError(f"non-finite state produced at event {bad}")
        if status == 0:
            break
        cap = int(cap * 1.6) + 256
    return KacPath(ParticleState(velocities=initial.velocities.copy(), t=0.0),
                   T, seed, kernel.name, times[:nev].copy(), idx[:nev].copy(),
                   sigmas[:nev].copy(), pre[:nev].copy(), post[:nev].copy(), nprop)


def state_at(path: KacPath, t: float) -> ParticleState:
    return path.state_at(t)


def spawn_seeds(master_seed: int, n: int) -> list:
    """n reproducible independent integer seeds derived from one master seed."""
    ss = np.random.SeedSequence(master_seed)
    return [int(child.generate_state(1, np.uint32)[0]) for child in ss.spawn(n)]


# ---------------------------------------------------------------------------
# collision pairing functional and pathwise martingale accounting


def _angular_coeff_nodes(kernel: CollisionKernel, n_quad: int):
    """Canonical scattering nodes as frame coefficients (A, B, C) + weights.

    A scattering direction is A*u + B*e1 + C*e2 for any orthonormal frame
    (u, e1, e2) headed by the unit gap direction; C = 0 when d = 2.  Weights
    embed the angular density and sum to one.
    """
    from scipy.special import roots_legendre
    if kernel.d == 2:
        x, wx = roots_legendre(n_quad)
        phi = (x + 1.0) * (np.pi / 2.0)
        w = wx * kernel.angular_density(np.cos(phi))
        coeffs = np.concatenate([
            np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=1),
            np.stack([np.cos(phi), -np.sin(phi), np.zeros_like(phi)], axis=1)])
        wts = np.concatenate([w, w])
        return coeffs, wts / wts.sum()
    if kernel.d == 3:
        x, wx = roots_legendre(n_quad)
        wt = wx * kernel.angular_density(x)
        n_az = max(4, n_quad)
        phi = 2.0 * np.pi * (np.arange(n_az) + 0.5) / n_az
        st = np.sqrt(np.maximum(1.0 - x * x, 0.0))
        A = np.repeat(x, n_az)
        B = (st[:, None] * np.cos(phi)[None, :]).ravel()
        C = (st[:, None] * np.sin(phi)[None, :]).ravel()
        wts = np.repeat(wt / n_az, n_az)
        return np.stack([A, B, C], axis=1), wts / wts.sum()
    raise NotImplementedError("pairing quadrature shipped for d in {2, 3}")


def _frames(u: np.ndarray):
    """Orthonormal completions e1, e2 for unit rows u: (M, d) each; e2 = 0 if d=2."""
    M, d = u.shape
    if d == 2:
        e1 = np.stack([-u[:, 1], u[:, 0]], axis=1)
        return e1, np.zeros_like(e1)
    a = -u.copy()
    a[:, 0] += 1.0                       # a = e0 - u, Householder axis
    s2 = 2.0 * (1.0 - u[:, 0])
    degen = s2 < 1e-24
    s2 = np.where(degen, 1.0, s2)
    e1 = -a * (2.0 * a[:, 1] / s2)[:, None]
    e1[:, 1] += 1.0
    e2 = -a * (2.0 * a[:, 2] / s2)[:, None]
    e2[:, 2] += 1.0
    if np.any(degen):
        e1[degen] = np.array([0.0, 1.0, 0.0])
        e2[degen] = np.array([0.0, 0.0, 1.0])
    return e1, e2


def _pair_gain_rows(f, v_center: np.ndarray, partners: np.ndarray,
                    coeffs: np.ndarray, wts: np.ndarray) -> np.ndarray:
    """For each partner b: |v-v_b| * angular average of the collision gain of f.

    Zero-distance partners contribute zero (zero collision rate).
    """
    d = partners.shape[1]
    diff = v_center[None, :] - partners
    r = np.sqrt(np.sum(diff * diff, axis=1))
    live = r > 0.0
    out = np.zeros(partners.shape[0])
    if not np.any(live):
        return out
    vb = partners[live]
    rl = r[live]
    u = diff[live] / rl[:, None]
    # canonical orientation makes the quadrature symmetric in the pair order,
    # so incremental row updates track a fresh recomputation exactly
    key = np.sign(u[:, 0])
    for c in range(1, d):
        key = np.where(key == 0.0, np.sign(u[:, c]), key)
    u = u * np.where(key < 0.0, -1.0, 1.0)[:, None]
    e1, e2 = _frames(u)
    m = 0.5 * (v_center[None, :] + vb)
    # sigma nodes: (M, Q, d)
    sig = (coeffs[None, :, 0, None] * u[:, None, :]
           + coeffs[None, :, 1, None] * e1[:, None, :]
           + coeffs[None, :, 2, None] * e2[:, None, :])
    half = 0.5 * rl
    vp = m[:, None, :] + half[:, None, None] * sig
    vps = m[:, None, :] - half[:, None, None] * sig
    Mx, Q = vp.shape[0], vp.shape[1]
    gain = (f(vp.reshape(-1, d)).reshape(Mx, Q)
            + f(vps.reshape(-1, d)).reshape(Mx, Q))
    gain = gain @ wts
    gain -= f(v_center[None, :])[0] + f(vb)
    out[live] = rl * gain
    return out


def q_pairing(f: TestFunction, mu: EmpiricalMeasure, nu: EmpiricalMeasure,
              kernel: CollisionKernel, n_quad: int = 12) -> float:
    """Bilinear collision functional: sum over atom pairs of
    w_i w_j |v_i - v_j| x angular average of f(v') + f(v'_*) - f(v_i) - f(v_j).
    """
    coeffs, wts = _angular_coeff_nodes(kernel, n_quad)
    total = 0.0
    for a in range(mu.atoms.shape[0]):
        rows = _pair_gain_rows(f, mu.atoms[a], nu.atoms, coeffs, wts)
        total += mu.weights[a] * float(rows @ nu.weights)
    if not np.isfinite(total):
        raise FloatingPointError("pairing sum is not finite; test function grows too fast")
    return total


@dataclass
class MartingaleLedger:
    f: TestFunction
    t: float
    jump_sum: float
    compensator_integral: float
    stderr: float = 0.0

    @property
    def value(self) -> float:
        return self.jump_sum - self.compensator_integral


def martingale_ledger(path: KacPath, f: TestFunction, kernel: CollisionKernel | None = None,
                      n_quad: int = 12, n_exact: int = 2048,
                      n_subsample: int = 10_000) -> list:
    """Pathwise decomposition ledger of <f, mu_t> along a simulated path.

    Returns one entry per event time plus a closing entry at the horizon.
    jump_sum accumulates the per-event (1/N) collision gains; the compensator
    integrates the pairing functional of the piecewise-constant empirical
    measure.  For N <= n_exact the pairing is the exact O(N^2) double sum,
    maintained incrementally (only two velocities change per event, so only
    their interaction rows are recomputed).  Above n_exact each interval uses
    a per-atom stratified pair subsample and reports its standard error.
    """
    if kernel is None:
        kernel = kernel_by_name(path.kernel_name)
    N, d = path.initial.n, path.initial.d
    vel = path.initial.velocities.copy()
    coeffs, wts = _angular_coeff_nodes(kernel, n_quad)
    exact = N <= n_exact
    rng = np.random.default_rng(path.seed ^ 0x9E3779B9)

    def stratified_rate():
        m = max(2, n_subsample // N)
        tot = 0.0
        var = 0.0
        for a in range(N):
            others = rng.choice(N - 1, size=m, replace=True)
            others[others >= a] += 1
            g = _pair_gain_rows(f, vel[a], vel[others], coeffs, wts)
            tot += g.mean() * (N - 1)
            var += g.var() / m * (N - 1) ** 2
        return tot / N ** 2, np.sqrt(var) / N ** 2

    if exact:
        rows = np.empty(N)
        for a in range(N):
            rows[a] = _pair_gain_rows(f, vel[a], vel, coeffs, wts).sum()
        rate = rows.sum() / N ** 2
        rate_err = 0.0
    else:
        rate, rate_err = stratified_rate()

    entries = []
    jump_sum = 0.0
    comp = 0.0
    comp_var = 0.0
    t_prev = 0.0
    inv_n = 1.0 / N
    for k in range(path.n_events):
        t_k = float(path.times[k])
        comp += (t_k - t_prev) * rate
        comp_var += ((t_k - t_prev) * rate_err) ** 2
        i, j = int(path.idx[k, 0]), int(path.idx[k, 1])
        jump_sum += inv_n * float(f(path.post[k]).sum() - f(path.pre[k]).sum())
        if exact:
            old_i = _pair_gain_rows(f, vel[i], vel, coeffs, wts)
            old_j = _pair_gain_rows(f, vel[j], vel, coeffs, wts)
            vel[i] = path.post[k, 0]
            vel[j] = path.post[k, 1]
            new_i = _pair_gain_rows(f, vel[i], vel, coeffs, wts)
            new_j = _pair_gain_rows(f, vel[j], vel, coeffs, wts)
            delta = (new_i - old_i) + (new_j - old_j)
            delta[i] = 0.0
            delta[j] = 0.0
            rows += delta
            rows[i] = new_i.sum()
            rows[j] = new_j.sum()
            rate = rows.sum() / N ** 2
        else:
            vel[i] = path.post[k, 0]
            vel[j] = path.post[k, 1]
            rate, rate_err = stratified_rate()
        entries.append(MartingaleLedger(f=f, t=t_k, jump_sum=jump_sum,
                                        compensator_integral=comp,
                                        stderr=float(np.sqrt(comp_var))))
        t_prev = t_k
    comp += (path.T - t_prev) * rate
    comp_var += ((path.T - t_prev) * rate_err) ** 2
    entries.append(MartingaleLedger(f=f, t=path.T, jump_sum=jump_sum,
                                    compensator_integral=comp,
                                    stderr=float(np.sqrt(comp_var))))
    return entries

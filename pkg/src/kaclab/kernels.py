"""Collision kernels: angular laws, sampling, and moment-production bounds.

A kernel assigns each pre-collision gap u a measure on scattering directions
with total mass |u| (degree-one homogeneity) and a rotation-equivariant
angular profile.  The shipped family has angular density proportional to
sin^{3-d}(theta/2) relative to the uniform measure on the sphere, where
cos theta = u.sigma / |u|.  In d=3 that is the uniform law; in d=2 it favors
large deflections.

The angular density times the uniform t-marginal (1-t^2)^{(d-3)/2} collapses
to a multiple of (1+t)^{(d-3)/2}, so cos theta has the exact inverse CDF
t = 2 U^{2/(d-1)} - 1 in every dimension d >= 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gamma, pi, sqrt

import numpy as np
from scipy.integrate import quad
from scipy.special import roots_jacobi, roots_legendre


def _uniform_t_marginal_const(d: int) -> float:
    # density of t = e.sigma under the uniform law: K_d (1-t^2)^{(d-3)/2}
    return gamma(d / 2.0) / (sqrt(pi) * gamma((d - 1) / 2.0))


@dataclass
class CollisionKernel:
    """Angular law on the sphere, parametrized by t = cos(theta)."""

    d: int
    name: str
    angular_density: object          # vectorized t -> density w.r.t. uniform measure
    kappa: float | None = None       # Lipschitz constant in total variation, if known

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("no scattering sphere below dimension 2")

    def normalization_defect(self) -> float:
        """|integral of the angular density over the sphere - 1|."""
        kd = _uniform_t_marginal_const(self.d)
        val, _ = quad(
            lambda t: self.angular_density(np.array([t]))[0]
            * kd * (1.0 - t * t) ** ((self.d - 3) / 2.0),
            -1.0, 1.0, limit=200,
        )
        return abs(val - 1.0)

    def sample_cos_theta(self, rng, size: int) -> np.ndarray:
        raise NotImplementedError

    def total_rate(self, v, v_star) -> float:
        """Mass of the scattering measure for this pre-collision pair."""
        return float(np.linalg.norm(np.asarray(v) - np.asarray(v_star)))


@dataclass
class HardSphereKernel(CollisionKernel):
    c_norm: float = field(default=0.0)

    def sample_cos_theta(self, rng, size: int) -> np.ndarray:
        u = rng.random(size)
        return 2.0 * u ** (2.0 / (self.d - 1)) - 1.0


def hard_sphere(d: int = 3) -> HardSphereKernel:
    """Hard-sphere angular law in dimension d (uniform when d=3)."""
    if d < 2:
        raise ValueError("d must be >= 2")
    expo = (3.0 - d) / 2.0
    kd = _uniform_t_marginal_const(d)
    # normalizer: c * integral of ((1-t)/2)^expo against the uniform marginal = 1
    val, _ = quad(lambda t: ((1.0 - t) / 2.0) ** expo
                  * kd * (1.0 - t * t) ** ((d - 3) / 2.0), -1.0, 1.0, limit=200)
    c = 1.0 / val

    def density(t):
        t = np.asarray(t, dtype=np.float64)
        return c * ((1.0 - t) / 2.0) ** expo

    return HardSphereKernel(
        d=d, name=f"hard-sphere-d{d}", angular_density=density,
        kappa=1.0 if d == 3 else None, c_norm=c,
    )


def kernel_by_name(name: str) -> CollisionKernel:
    if name.startswith("hard-sphere-d"):
        return hard_sphere(int(name[len("hard-sphere-d"):]))
    raise KeyError(f"unknown kernel {name!r}")


def _orthonormal_complement(u: np.ndarray) -> np.ndarray:
    """(d-1, d) rows completing unit u to an orthonormal basis."""
    d = u.shape[0]
    basis = np.eye(d)
    # Householder reflection mapping e_0 to u; its remaining columns span u-perp
    w = basis[0] - u
    nw = np.linalg.norm(w)
    if nw < 1e-12:
        return basis[1:]
    w = w / nw
    H = np.eye(d) - 2.0 * np.outer(w, w)
    return H[:, 1:].T


def sample_sigma(kernel: CollisionKernel, u, rng, size: int = 1) -> np.ndarray:
    """Scattering directions for unit gap direction u: (size, d) array."""
    u = np.asarray(u, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu < 1e-300:
        raise ValueError("gap direction has zero length")
    u = u / nu
    d = u.shape[0]
    t = kernel.sample_cos_theta(rng, size)
    z = rng.normal(size=(size, d))
    z -= np.outer(z @ u, u)
    nz = np.linalg.norm(z, axis=1)
    bad = nz < 1e-12
    while np.any(bad):
        z[bad] = rng.normal(size=(int(bad.sum()), d))
        z[bad] -= np.outer(z[bad] @ u, u)
        nz[bad] = np.linalg.norm(z[bad], axis=1)
        bad = nz < 1e-12
    w = z / nz[:, None]
    return t[:, None] * u[None, :] + np.sqrt(np.maximum(1.0 - t * t, 0.0))[:, None] * w


def sigma_quadrature(kernel: CollisionKernel, u, n_quad: int = 8):
    """Nodes and weights for integrating f(sigma) against the angular law.

    Returns (dirs, wts): dirs (K, d) unit vectors, wts summing to one.
    Exactness follows Gauss rules in cos(theta) with the angular density
    folded into the weights; the azimuthal factor is a trapezoid rule on
    the circle (exact for trigonometric polynomials).
    """
    u = np.asarray(u, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu < 1e-300:
        raise ValueError("gap direction has zero length")
    u = u / nu
    d = u.shape[0]
    if d == 2:
        # symmetric angle nodes on each half circle, density folded in
        x, wx = roots_legendre(n_quad)
        phi = (x + 1.0) * (pi / 2.0)           # (0, pi)
        wphi = wx * (pi / 2.0) / (2.0 * pi)    # d phi / (2 pi) on one half
        g = kernel.angular_density(np.cos(phi))
        perp = _orthonormal_complement(u)[0]
        dirs = []
        wts = []
        for s in (+1.0, -1.0):
            dirs.append(np.cos(phi)[:, None] * u[None, :]
                        + s * np.sin(phi)[:, None] * perp[None, :])
            wts.append(wphi * g)
        dirs = np.vstack(dirs)
        wts = np.concatenate(wts)
        return dirs, wts / wts.sum()
    if d == 3:
        x, wx = roots_legendre(n_quad)         # t in (-1, 1), uniform marginal 1/2
        g = kernel.angular_density(x)
        wt = wx * 0.5 * g
        n_az = max(4, n_quad)
        phi = 2.0 * pi * (np.arange(n_az) + 0.5) / n_az
        e1, e2 = _orthonormal_complement(u)
        ring = np.cos(phi)[:, None] * e1[None, :] + np.sin(phi)[:, None] * e2[None, :]
        st = np.sqrt(np.maximum(1.0 - x * x, 0.0))
        dirs = (x[:, None, None] * u[None, None, :]
                + st[:, None, None] * ring[None, :, :]).reshape(-1, 3)
        wts = np.repeat(wt / n_az, n_az)
        return dirs, wts / wts.sum()
    raise NotImplementedError("full-direction quadrature shipped for d in {2, 3}")


def expansion_constant(p: float) -> float:
    """Smallest C with (x^2+y^2)^{p/2} <= x^p + y^p + C (x y^{p-1} + x^{p-1} y).

    By scaling it suffices to take x = 1, y = s in (0, 1].
    """
    if p <= 2:
        return 0.0

    def ratio(s):
        return ((1.0 + s * s) ** (p / 2.0) - 1.0 - s ** p) / (s ** (p - 1) + s)

    s = np.linspace(1e-6, 1.0, 20001)
    r = ratio(s)
    k = int(np.argmax(r))
    lo = s[max(k - 1, 0)]
    hi = s[min(k + 1, len(s) - 1)]
    # golden-section refinement
    gr = (sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c1 = b - gr * (b - a)
    c2 = a + gr * (b - a)
    for _ in range(80):
        if ratio(c1) > ratio(c2):
            b, c2 = c2, c1
            c1 = b - gr * (b - a)
        else:
            a, c1 = c1, c2
            c2 = a + gr * (b - a)
    return float(ratio(0.5 * (a + b)))


def _tau_density_moments(kernel: CollisionKernel, fn, n_grid: int = 4001) -> float:
    """Integral of fn(tau) with tau = (1 + cos theta)/2 under the angular law."""
    # change of variables: under the angular law the density of tau on (0,1)
    # is dens(tau) = 2 g(2 tau - 1) K_d (1-t^2)^{(d-3)/2} with t = 2 tau - 1
    d = kernel.d
    kd = _uniform_t_marginal_const(d)
    tau = np.linspace(0.0, 1.0, n_grid)
    tau = 0.5 * (tau[1:] + tau[:-1])        # midpoints avoid endpoint blowup
    h = 1.0 / (n_grid - 1)
    t = 2.0 * tau - 1.0
    dens = 2.0 * kernel.angular_density(t) * kd * np.maximum(1.0 - t * t, 1e-300) ** ((d - 3) / 2.0)
    return float(np.sum(fn(tau) * dens) * h)


def find_povzner_beta(kernel: CollisionKernel, p: float, tol: float = 1e-12) -> float:
    """Positive moment-production constant for exponent p > 2.

    beta(delta) = min(delta / C(p), integral of the clipped angular profile);
    the first argument increases and the second decreases in delta, so the
    min is maximized at their crossing, found by bisection.
    """
    if p <= 2:
        raise ValueError("p must exceed 2")
    cp = expansion_constant(p)

    def clipped_integral(delta):
        def fn(tau):
            val = 1.0 - (1.0 + delta) ** (p + 1) * (tau ** (p / 2.0) + (1.0 - tau) ** (p / 2.0))
            return 0.5 * np.maximum(val, 0.0)
        return _tau_density_moments(kernel, fn)

    delta_max = 2.0 ** ((p - 2.0) / (2.0 * (p + 1.0))) - 1.0
    lo, hi = 0.0, delta_max
    # g(delta) = delta/C - integral: increasing, g(0) < 0, g(delta_max) > 0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid / cp - clipped_integral(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    delta = 0.5 * (lo + hi)
    beta = min(delta / cp, clipped_integral(delta))
    if beta <= 0.0:
        raise RuntimeError(f"no positive production constant found for p={p}")
    return float(beta)


def _pair_quadrature_speeds(kernel: CollisionKernel, v, v_star, n_quad: int):
    """Post-collision squared speeds on a reduced (cos theta, azimuthal-cos) grid.

    The squared speeds depend on sigma only through its components along the
    gap direction and the in-plane midpoint direction, so a tensor rule in
    those two coordinates integrates them with Gauss exactness.
    Returns (|v'|^2 nodes, |v'_*|^2 nodes, weights).
    """
    v = np.asarray(v, dtype=np.float64)
    v_star = np.asarray(v_star, dtype=np.float64)
    d = kernel.d
    gap = v - v_star
    r = np.linalg.norm(gap)
    if r < 1e-300:
        raise ValueError("coincident velocities have no scattering law")
    u = gap / r
    m = 0.5 * (v + v_star)
    m_par = float(m @ u)
    m_perp = m - m_par * u
    mp = np.linalg.norm(m_perp)

    # t nodes against the angular-law t-density ~ (1+t)^{(d-3)/2}
    t, wt = roots_jacobi(n_quad, 0.0, (d - 3) / 2.0)
    wt = wt / wt.sum()
    if d == 2:
        s = np.array([-1.0, 1.0])
        ws = np.array([0.5, 0.5])
    else:
        s, ws = roots_jacobi(max(2, n_quad), (d - 4) / 2.0, (d - 4) / 2.0)
        ws = ws / ws.sum()

    T, S = np.meshgrid(t, s, indexing="ij")
    W = np.outer(wt, ws)
    m_dot_sigma = T * m_par + np.sqrt(np.maximum(1.0 - T * T, 0.0)) * S * mp
    base = float(m @ m) + 0.25 * r * r
    sq_prime = base + r * m_dot_sigma
    sq_prime_star = base - r * m_dot_sigma
    return sq_prime.ravel(), sq_prime_star.ravel(), W.ravel()


def povzner_lhs(kernel: CollisionKernel, v, v_star, p: float, n_quad: int = 32) -> float:
    """Angular average of the p-th power gain |v'|^p + |v'_*|^p - |v|^p - |v_*|^p."""
    sq1, sq2, w = _pair_quadrature_speeds(kernel, v, v_star, n_quad)
    v = np.asarray(v, dtype=np.float64)
    v_star = np.asarray(v_star, dtype=np.float64)
    before = float(np.dot(v, v)) ** (p / 2.0) + float(np.dot(v_star, v_star)) ** (p / 2.0)
    gain = np.dot(w, sq1 ** (p / 2.0) + sq2 ** (p / 2.0)) - before
    return float(gain)


@dataclass
class PovznerReport:
    p: float
    beta: float
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return self.rhs - self.lhs


def povzner_gap(kernel: CollisionKernel, v, v_star, p: float, beta: float,
                n_quad: int = 32) -> PovznerReport:
    """Moment-production check for one velocity pair.

    rhs = -beta (|v|^p + |v_*|^p) + beta^{-1} (|v||v_*|^{p-1} + |v|^{p-1}|v_*|);
    a nonnegative gap = rhs - lhs certifies the production inequality there.
    """
    if p <= 2:
        raise ValueError("p must exceed 2")
    if beta <= 0:
        raise ValueError("beta must be positive")
    v = np.asarray(v, dtype=np.float64)
    v_star = np.asarray(v_star, dtype=np.float64)
    a = float(np.linalg.norm(v))
    b = float(np.linalg.norm(v_star))
    lhs = povzner_lhs(kernel, v, v_star, p, n_quad=n_quad)
    rhs = -beta * (a ** p + b ** p) + (a * b ** (p - 1) + a ** (p - 1) * b) / beta
    return PovznerReport(p=p, beta=beta, lhs=lhs, rhs=rhs)


def estimate_kappa(kernel: CollisionKernel, n_pairs: int = 256, seed: int = 0,
                   n_grid: int = 20001) -> float:
    """Lower bound on the total-variation Lipschitz constant of the rate kernel.

    Maximizes ||B(v,.) - B(v',.)||_TV / |v - v'| over sampled velocity pairs,
    where B(v,.) has density |v| g(sigma.v/|v|) against the uniform law on the
    sphere.  Both the relative length and the separation angle vary; collinear
    pairs (where the ratio is exactly 1 for any normalized angular density) are
    probed explicitly, so the estimate never falls below 1 - O(grid error).
    """
    rng = np.random.default_rng(seed)
    d = kernel.d
    probes = [(1.0, 0.25, 1e-9), (1.0, 1.0, pi / 2), (1.0, 1.0, pi - 1e-6)]
    for _ in range(n_pairs):
        probes.append((1.0, float(rng.uniform(0.05, 3.0)),
                       float(rng.uniform(1e-3, pi - 1e-3))))
    if d == 2:
        phi = np.linspace(-pi, pi, n_grid)
        phi = 0.5 * (phi[1:] + phi[:-1])
        base = kernel.angular_density(np.cos(phi))
    else:
        nt = 256
        x, wx = roots_legendre(nt)
        kd = _uniform_t_marginal_const(d)
        wth = wx * kd * np.maximum(1.0 - x * x, 0.0) ** ((d - 3) / 2.0)
        ns = 256
        s, ws = roots_jacobi(ns, (d - 4) / 2.0, (d - 4) / 2.0)
        ws = ws / ws.sum()
        T, S = np.meshgrid(x, s, indexing="ij")
        W = np.outer(wth, ws)
        base = kernel.angular_density(T)
    best = 0.0
    for r1, r2, alpha in probes:
        gap = sqrt(max(r1 * r1 + r2 * r2 - 2.0 * r1 * r2 * np.cos(alpha), 1e-300))
        if d == 2:
            g2 = kernel.angular_density(np.cos(phi - alpha))
            tv = float(np.mean(np.abs(r1 * base - r2 * g2)))
        else:
            t2 = np.cos(alpha) * T + np.sin(alpha) * np.sqrt(np.maximum(1 - T * T, 0.0)) * S
            tv = float(np.sum(np.abs(r1 * base - r2 * kernel.angular_density(t2)) * W))
        best = max(best, tv / gap)
    return best


def kernel_kappa(kernel: CollisionKernel) -> float:
    """Total-variation Lipschitz constant, declared or numerically estimated.

    The estimate is a sampled lower bound, so a small safety factor is applied
    before caching it on the kernel instance.
    """
    if kernel.kappa is not None:
        return float(kernel.kappa)
    est = 1.02 * estimate_kappa(kernel)
    object.__setattr__(kernel, "kappa", est)
    return est

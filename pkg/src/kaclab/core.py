"""States, empirical measures, and test functions.

A system state is N velocities in R^d with zero total momentum and average
kinetic energy one.  Conservation is audited, never repaired: collisions are
exact in both quantities, so any drift is float accumulation and stays far
below the audit tolerance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

EPS_CONS = 1e-8


def collide(v, v_star, sigma):
    """Post-collision pair: midpoint +/- half the gap length along sigma.

    Preserves v + v_star and |v|^2 + |v_star|^2 exactly (up to rounding).
    Accepts single vectors or batches with matching leading shape.
    """
    v = np.asarray(v, dtype=np.float64)
    v_star = np.asarray(v_star, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    mid = 0.5 * (v + v_star)
    gap = v - v_star
    r = np.linalg.norm(gap, axis=-1, keepdims=True)
    half = 0.5 * r * sigma
    return mid + half, mid - half


@dataclass
class ParticleState:
    """N velocities at a point in simulated time."""

    velocities: np.ndarray  # (N, d)
    t: float = 0.0

    def __post_init__(self):
        self.velocities = np.ascontiguousarray(self.velocities, dtype=np.float64)
        if self.velocities.ndim != 2:
            raise ValueError("velocities must be an (N, d) array")
        if self.n < 2:
            raise ValueError("at least two particles required")

    @property
    def n(self) -> int:
        return self.velocities.shape[0]

    @property
    def d(self) -> int:
        return self.velocities.shape[1]

    def momentum_error(self) -> float:
        # relative to the natural scale sqrt(N) of a unit-energy system
        return float(np.linalg.norm(self.velocities.sum(axis=0)) / np.sqrt(self.n))

    def energy_error(self) -> float:
        return float(abs((self.velocities ** 2).sum() / self.n - 1.0))

    def check_conserved(self, tol: float = EPS_CONS):
        m_err = self.momentum_error()
        e_err = self.energy_error()
        if m_err > tol or e_err > tol:
            raise ValueError(
                f"state outside conservation tolerance: momentum {m_err:.3e}, "
                f"energy {e_err:.3e}"
            )

    def as_measure(self) -> "EmpiricalMeasure":
        w = np.full(self.n, 1.0 / self.n)
        return EmpiricalMeasure(self.velocities.copy(), w)


@dataclass
class EmpiricalMeasure:
    """Finitely many weighted atoms; mass is the weight total."""

    atoms: np.ndarray    # (n, d)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        self.atoms = np.ascontiguousarray(self.atoms, dtype=np.float64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.atoms.ndim != 2 or self.weights.ndim != 1:
            raise ValueError("atoms must be (n, d), weights (n,)")
        if self.atoms.shape[0] != self.weights.shape[0]:
            raise ValueError("atom/weight count mismatch")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def moment(self, p: float) -> float:
        """<|v|^p, mu>."""
        speed = np.linalg.norm(self.atoms, axis=1)
        return float(np.dot(self.weights, speed ** p))

    def integrate(self, f) -> float:
        """<f, mu> for a vectorized evaluator f: (n, d) -> (n,)."""
        vals = np.asarray(f(self.atoms), dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise ValueError(
                f"non-finite evaluation at atom {bad}: v={self.atoms[bad]}")
        return float(np.dot(self.weights, vals))

    def merged(self) -> "EmpiricalMeasure":
        """Coalesce exactly repeated atoms (weight summation)."""
        order = np.lexsort(self.atoms.T)
        atoms = self.atoms[order]
        w = self.weights[order]
        if len(atoms) == 0:
            return EmpiricalMeasure(atoms, w)
        new = np.empty(len(atoms), dtype=bool)
        new[0] = True
        new[1:] = np.any(atoms[1:] != atoms[:-1], axis=1)
        idx = np.cumsum(new) - 1
        out_atoms = atoms[new]
        out_w = np.zeros(new.sum())
        np.add.at(out_w, idx, w)
        return EmpiricalMeasure(out_atoms, out_w)

    def to_dict(self) -> dict:
        return {
            "atoms": [[list(map(float, a)), float(w)]
                      for a, w in zip(self.atoms, self.weights)],
            "mass": self.mass,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EmpiricalMeasure":
        entries = payload["atoms"]
        if entries:
            atoms = np.array([e[0] for e in entries], dtype=np.float64)
            weights = np.array([e[1] for e in entries], dtype=np.float64)
        else:
            atoms = np.zeros((0, 1))
            weights = np.zeros(0)
        mu = cls(atoms, weights)
        declared = float(payload.get("mass", mu.mass))
        if abs(declared - mu.mass) > 1e-9 * max(1.0, declared):
            raise ValueError("declared mass does not match weight total")
        return mu

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "EmpiricalMeasure":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def shell_project(velocities: np.ndarray) -> np.ndarray:
    """Recenter and rescale rows onto the shell: zero mean, unit mean square.

    Two passes keep the residuals at rounding level (<= 1e-12).  If every row
    is identical the variance is zero and no rescaling exists; the canonical
    fallback is alternating +/- e1 for even N, an error for odd N.
    """
    v = np.array(velocities, dtype=np.float64)
    n, d = v.shape
    for _ in range(2):
        v -= v.mean(axis=0)
        s = (v ** 2).sum() / n
        if s < 1e-28:
            if n % 2:
                raise ValueError("degenerate sample with odd N has no shell element")
            v = np.zeros((n, d))
            v[0::2, 0] = 1.0
            v[1::2, 0] = -1.0
            return v
        v /= np.sqrt(s)
    return v


def moment(mu: EmpiricalMeasure, p: float) -> float:
    return mu.moment(p)


def integrate(f, mu: EmpiricalMeasure) -> float:
    return mu.integrate(f)


@dataclass
class TestFunction:
    """Observable with a declared growth order and a declared norm.

    The norm refers to the rescaled function fhat(v) = f(v) / (1 + |v|^2):
    membership in the metric-defining family requires sup |fhat| <= 1 and
    fhat 1-Lipschitz.  Declared values are spot-checked probabilistically,
    not proven.
    """

    evaluator: object            # vectorized (n, d) -> (n,)
    weight_order: float = 2.0    # growth exponent: |f(v)| <= C (1 + |v|^weight_order)
    declared_norm: float = 1.0
    name: str = "f"

    def __call__(self, v):
        v = np.asarray(v, dtype=np.float64)
        single = v.ndim == 1
        vals = np.asarray(self.evaluator(v[None, :] if single else v), dtype=np.float64)
        return float(vals[0]) if single else vals

    def rescaled(self, v):
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        return self(v) / (1.0 + (v ** 2).sum(axis=1))

    def check_membership(self, rng, n_samples: int = 1000, spread: float = 3.0,
                         d: int = 3):
        """Sampled bound and Lipschitz checks on fhat; raises on violation."""
        v = rng.normal(scale=spread, size=(n_samples, d))
        vals = np.abs(self.rescaled(v))
        slack = 1e-9
        if vals.max() > self.declared_norm + slack:
            raise ValueError(
                f"{self.name}: |fhat| sample {vals.max():.6f} exceeds declared "
                f"norm {self.declared_norm}"
            )
        v2 = v + rng.normal(scale=0.5, size=v.shape)
        num = np.abs(self.rescaled(v) - self.rescaled(v2))
        den = np.linalg.norm(v - v2, axis=1)
        ok = den > 1e-12
        ratio = num[ok] / den[ok]
        if ratio.max() > self.declared_norm + slack:
            raise ValueError(
                f"{self.name}: fhat Lipschitz sample {ratio.max():.6f} exceeds "
                f"declared norm {self.declared_norm}"
            )


def _wave_family(seed: int, n_terms: int = 3, d: int = 3) -> TestFunction:
    # fhat = sum_j a_j cos(k_j . v + b_j) with sum |a_j| <= 1, sum |a_j||k_j| <= 1
    rng = np.random.default_rng(seed)
    k = rng.normal(size=(n_terms, d))
    b = rng.uniform(0, 2 * np.pi, size=n_terms)
    raw = rng.uniform(0.2, 1.0, size=n_terms)
    knorm = np.linalg.norm(k, axis=1)
    a = raw / max(raw.sum(), np.dot(raw, knorm))

    def ev(v):
        phase = v @ k.T + b
        fhat = np.cos(phase) @ a
        return fhat * (1.0 + (v ** 2).sum(axis=1))

    return TestFunction(ev, weight_order=2.0, declared_norm=1.0,
                        name=f"wave{seed}d{d}")


_BUILTINS = {}


def _register(name, weight_order, declared_norm, ev):
    _BUILTINS[name] = TestFunction(ev, weight_order=weight_order,
                                   declared_norm=declared_norm, name=name)


_register("one", 0.0, 1.0, lambda v: np.ones(v.shape[0]))
_register("energy", 2.0, 1.0, lambda v: (v ** 2).sum(axis=1))
_register("one_plus_energy", 2.0, 2.0, lambda v: 1.0 + (v ** 2).sum(axis=1))
_register("comp0", 1.0, 1.0, lambda v: v[:, 0])
_register("cos0", 0.0, 1.0, lambda v: np.cos(v[:, 0]))
_register("gauss_bump", 0.0, 1.0, lambda v: np.exp(-0.5 * (v ** 2).sum(axis=1)))
_register("speed_cap", 1.0, 1.0,
          lambda v: np.minimum(np.linalg.norm(v, axis=1), 2.0) - 1.0)


def builtin_test_function(name: str, d: int = 3) -> TestFunction:
    if name.startswith("wave"):
        return _wave_family(int(name[4:] or 0), d=d)
    try:
        return _BUILTINS[name]
    except KeyError:
        raise KeyError(
            f"unknown test function {name!r}; choices: "
            f"{sorted(_BUILTINS)} or waveNN"
        ) from None


def metric_family_member(seed: int, d: int = 3) -> TestFunction:
    """Random member of the metric-defining family (norm at most one)."""
    n_terms = int(np.random.default_rng(seed ^ 0x9E37).integers(1, 5))
    return _wave_family(seed, n_terms=n_terms, d=d)

"""Maximal monotone graphs and their Yosida / Moreau regularizations.

Each graph ``beta`` is the subdifferential of a convex potential that
vanishes at the origin, so ``beta(0) = 0`` and the resolvent
``J_lam = (I + lam*beta)^{-1}`` is a single-valued contraction for every
``lam > 0``.  The Yosida map ``beta_lam(r) = (r - J_lam r)/lam`` is the
Lipschitz surrogate the time stepper evaluates; the Moreau envelope
``env_lam(r) = |r - J_lam r|^2/(2 lam) + pot(J_lam r)`` is the smooth
surrogate potential, with ``0 <= env_lam <= pot`` everywhere.

All operations accept scalars or numpy arrays and evaluate elementwise.
Values are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MonotoneGraph",
    "Stefan",
    "DoubleObstacle",
    "PowerLaw",
    "Cubic",
    "Identity",
    "PiFunction",
    "ZeroPi",
    "NegIdentityPi",
    "StefanPi",
    "epsilon0",
    "make_graph",
    "make_pi",
]

_INF = math.inf


def _ret(out):
    """Collapse 0-d arrays back to python floats."""
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


class MonotoneGraph:
    """Base class: a scalar maximal monotone graph beta = d(pot)."""

    kind = "abstract"
    #: (lo, hi) of the effective domain D(beta); endpoints may be infinite.
    domain = (-_INF, _INF)
    #: abscissae where beta_lam has a derivative jump (for test sampling)
    kinks: tuple = ()
    #: True when beta itself is single-valued with locally Lipschitz slope,
    #: which is what the stepper needs to run with lam = 0 (and eps = 0).
    allows_lambda_zero = False

    # -- defining data (overridden per graph) -------------------------------

    def beta(self, r):
        """Pointwise value of beta, for graphs that are single-valued."""
        raise NotImplementedError(f"{self.kind}: beta is not single-valued")

    def beta_derivative(self, r):
        """Slope of beta where defined (right-hand value at kinks)."""
        raise NotImplementedError(f"{self.kind}: beta is not single-valued")

    def potential(self, r):
        """Convex potential pot with pot(0) = 0; +inf outside D(beta)."""
        raise NotImplementedError

    def resolvent(self, lam, r):
        """The unique p with p + lam*beta(p) containing r (lam > 0)."""
        raise NotImplementedError

    # -- derived operations --------------------------------------------------

    def yosida(self, lam, r):
        """beta_lam(r) = (r - J_lam r)/lam, the Lipschitz regularization."""
        if lam <= 0:
            raise ValueError("yosida requires lam > 0")
        r = np.asarray(r, dtype=float)
        return _ret((r - self.resolvent(lam, r)) / lam)

    def yosida_derivative(self, lam, r):
        """d/dr beta_lam(r); right-hand value at kinks, always in [0, 1/lam].

        Uses the implicit relation beta_lam'(r) = beta'(p)/(1 + lam*beta'(p))
        at p = J_lam r; graphs with piecewise-linear structure override this
        with the exact branch formula.
        """
        if lam <= 0:
            raise ValueError("yosida_derivative requires lam > 0")
        r = np.asarray(r, dtype=float)
        p = self.resolvent(lam, r)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            bp = np.asarray(self.beta_derivative(p), dtype=float)
            d = bp / (1.0 + lam * bp)
        d = np.where(np.isfinite(bp), d, 1.0 / lam)
        return _ret(np.clip(d, 0.0, 1.0 / lam))

    def moreau_envelope(self, lam, r):
        """env_lam(r) = |r - J_lam r|^2 / (2 lam) + pot(J_lam r); finite."""
        if lam <= 0:
            raise ValueError("moreau_envelope requires lam > 0")
        r = np.asarray(r, dtype=float)
        p = self.resolvent(lam, r)
        return _ret((r - p) ** 2 / (2.0 * lam) + self.potential(p))

    # -- catalog plumbing ----------------------------------------------------

    def config_params(self) -> dict:
        return {}

    def __repr__(self):
        params = ", ".join(f"{k}={v!r}" for k, v in self.config_params().items())
        return f"{type(self).__name__}({params})"

    def __eq__(self, other):
        return type(self) is type(other) and self.config_params() == other.config_params()

    def __hash__(self):
        return hash((type(self).__name__, tuple(sorted(self.config_params().items()))))


@dataclass(frozen=True, eq=False, repr=False)
class Stefan(MonotoneGraph):
    """Two-phase enthalpy graph: linear branches with a flat segment.

        beta(r) = k_solid * r            for r < 0,
                  0                      for 0 <= r <= latent,
                  k_liquid * (r-latent)  for r > latent.

    ``k_solid``/``k_liquid`` are the phase conductivities, ``latent`` the
    width of the exchange plateau.  Globally Lipschitz but degenerate
    (zero slope) on the plateau, so the stepper keeps lam > 0.
    """

    k_solid: float = 1.0
    k_liquid: float = 1.0
    latent: float = 1.0

    kind = "stefan"

    def __post_init__(self):
        if self.k_solid <= 0 or self.k_liquid <= 0 or self.latent <= 0:
            raise ValueError("stefan graph needs k_solid, k_liquid, latent > 0")

    @property
    def kinks(self):
        return (0.0, self.latent)

    def beta(self, r):
        r = np.asarray(r, dtype=float)
        return _ret(np.where(r < 0, self.k_solid * r,
                             np.where(r <= self.latent, 0.0,
                                      self.k_liquid * (r - self.latent))))

    def beta_derivative(self, r):
        r = np.asarray(r, dtype=float)
        return _ret(np.where(r < 0, self.k_solid,
                             np.where(r < self.latent, 0.0, self.k_liquid)))

    def potential(self, r):
        r = np.asarray(r, dtype=float)
        return _ret(np.where(r < 0, 0.5 * self.k_solid * r ** 2,
                             np.where(r <= self.latent, 0.0,
                                      0.5 * self.k_liquid * (r - self.latent) ** 2)))

    def resolvent(self, lam, r):
        r = np.asarray(r, dtype=float)
        ks, kl, L = self.k_solid, self.k_liquid, self.latent
        return _ret(np.where(r < 0, r / (1.0 + lam * ks),
                             np.where(r <= L, r,
                                      (r + lam * kl * L) / (1.0 + lam * kl))))

    def yosida_derivative(self, lam, r):
        if lam <= 0:
            raise ValueError("yosida_derivative requires lam > 0")
        r = np.asarray(r, dtype=float)
        ks, kl, L = self.k_solid, self.k_liquid, self.latent
        return _ret(np.where(r < 0, ks / (1.0 + lam * ks),
                             np.where(r < L, 0.0, kl / (1.0 + lam * kl))))

    def config_params(self):
        return {"k_solid": self.k_solid, "k_liquid": self.k_liquid, "latent": self.latent}


@dataclass(frozen=True, eq=False, repr=False)
class DoubleObstacle(MonotoneGraph):
    """Subdifferential of the indicator of [0, 1] (Hele-Shaw graph).

    Multivalued: vertical rays at 0 and 1, zero in between.  Only the
    regularized maps are exposed; the resolvent is a clamp onto [0, 1].
    """

    kind = "double_obstacle"
    domain = (0.0, 1.0)
    kinks = (0.0, 1.0)

    def potential(self, r):
        r = np.asarray(r, dtype=float)
        return _ret(np.where((r >= 0.0) & (r <= 1.0), 0.0, _INF))

    def resolvent(self, lam, r):
        r = np.asarray(r, dtype=float)
        return _ret(np.clip(r, 0.0, 1.0))

    def yosida(self, lam, r):
        if lam <= 0:
            raise ValueError("yosida requires lam > 0")
        r = np.asarray(r, dtype=float)
        return _ret((r - np.clip(r, 0.0, 1.0)) / lam)

    def yosida_derivative(self, lam, r):
        if lam <= 0:
            raise ValueError("yosida_derivative requires lam > 0")
        r = np.asarray(r, dtype=float)
        inside = (r >= 0.0) & (r < 1.0)
        return _ret(np.where(inside, 0.0, 1.0 / lam))

    def moreau_envelope(self, lam, r):
        if lam <= 0:
            raise ValueError("moreau_envelope requires lam > 0")
        r = np.asarray(r, dtype=float)
        return _ret((r - np.clip(r, 0.0, 1.0)) ** 2 / (2.0 * lam))


@dataclass(frozen=True, eq=False, repr=False)
class PowerLaw(MonotoneGraph):
    """beta(r) = |r|^(exponent-1) * r; porous medium for exponent > 1,
    fast diffusion for exponent < 1.  The resolvent has no closed form,
    so it is solved by a safeguarded elementwise Newton iteration with a
    bisection bracket [0, |r|] (monotonicity guarantees the bracket)."""

    exponent: float = 2.0

    kind = "power_law"

    def __post_init__(self):
        if self.exponent <= 0:
            raise ValueError("power_law exponent must be > 0")

    @property
    def allows_lambda_zero(self):
        return self.exponent > 1.0

    @property
    def kinks(self):
        # beta' is non-smooth at 0 unless the exponent is an odd integer
        return () if self.exponent in (1.0, 3.0) else (0.0,)

    def beta(self, r):
        r = np.asarray(r, dtype=float)
        return _ret(np.sign(r) * np.abs(r) ** self.exponent)

    def beta_derivative(self, r):
        m = self.exponent
        r = np.asarray(r, dtype=float)
        a = np.abs(r)
        with np.errstate(divide="ignore", over="ignore"):
            d = m * a ** (m - 1.0)
        if m < 1.0:
            d = np.where(a == 0.0, _INF, d)
        elif m == 1.0:
            d = np.ones_like(a)
        return _ret(d)

    def potential(self, r):
        m = self.exponent
        r = np.asarray(r, dtype=float)
        return _ret(np.abs(r) ** (m + 1.0) / (m + 1.0))

    def resolvent(self, lam, r):
        if lam <= 0:
            raise ValueError("resolvent requires lam > 0")
        r = np.asarray(r, dtype=float)
        q = self._resolve_abs(lam, np.abs(r))
        return _ret(np.sign(r) * q)

    def _resolve_abs(self, lam, a, tol=1e-14, maxiter=200):
        """Solve q + lam*q^m = a for q in [0, a], elementwise (a >= 0)."""
        m = self.exponent
        shape = np.shape(a)
        a = np.atleast_1d(np.asarray(a, dtype=float))
        lo = np.zeros_like(a)
        hi = a.copy()
        q = a / (1.0 + lam) if m >= 1.0 else 0.5 * a
        done = np.zeros(a.shape, dtype=bool)
        for _ in range(maxiter):
            g = q + lam * q ** m - a
            done = np.abs(g) <= tol * (1.0 + a)
            if done.all():
                break
            hi = np.where(g > 0, q, hi)
            lo = np.where(g < 0, q, lo)
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                slope = 1.0 + lam * m * q ** (m - 1.0)
                trial = q - g / slope
            bad = ~np.isfinite(trial) | (trial <= lo) | (trial >= hi)
            trial = np.where(bad, 0.5 * (lo + hi), trial)
            q = np.where(done, q, trial)
        if not done.all():
            raise RuntimeError(
                f"power-law resolvent did not converge (exponent={m}, lam={lam})")
        return q.reshape(shape)

    def config_params(self):
        return {"exponent": self.exponent}


@dataclass(frozen=True, eq=False, repr=False)
class Cubic(PowerLaw):
    """beta(r) = r^3, the classical smooth double-well convex part."""

    exponent: float = 3.0

    kind = "cubic"
    allows_lambda_zero = True
    kinks = ()

    def __post_init__(self):
        if self.exponent != 3.0:
            raise ValueError("cubic graph has a fixed exponent")

    def beta(self, r):
        r = np.asarray(r, dtype=float)
        return _ret(r ** 3)

    def beta_derivative(self, r):
        r = np.asarray(r, dtype=float)
        return _ret(3.0 * r ** 2)

    def potential(self, r):
        r = np.asarray(r, dtype=float)
        return _ret(0.25 * r ** 4)

    def config_params(self):
        return {}


@dataclass(frozen=True, eq=False, repr=False)
class Identity(MonotoneGraph):
    """beta(r) = r; turns the flow into linear heat with dynamic boundary."""

    kind = "identity"
    allows_lambda_zero = True
    kinks = ()

    def beta(self, r):
        return _ret(np.asarray(r, dtype=float))

    def beta_derivative(self, r):
        return _ret(np.ones_like(np.asarray(r, dtype=float)))

    def potential(self, r):
        r = np.asarray(r, dtype=float)
        return _ret(0.5 * r ** 2)

    def resolvent(self, lam, r):
        r = np.asarray(r, dtype=float)
        return _ret(r / (1.0 + lam))

    def yosida_derivative(self, lam, r):
        if lam <= 0:
            raise ValueError("yosida_derivative requires lam > 0")
        r = np.asarray(r, dtype=float)
        return _ret(np.full_like(r, 1.0 / (1.0 + lam)))


# ---------------------------------------------------------------------------
# Lipschitz perturbations
# ---------------------------------------------------------------------------


class PiFunction:
    """A Lipschitz perturbation pi breaking the monotonicity of beta + eps*pi."""

    kind = "abstract"
    lipschitz_constant = 0.0

    def value(self, r):
        raise NotImplementedError

    def derivative(self, r):
        """Slope of pi (right-hand value at kinks); Newton uses this."""
        raise NotImplementedError

    def primitive(self, r):
        """Antiderivative with primitive(0) = 0, for energy diagnostics."""
        raise NotImplementedError

    def config_params(self) -> dict:
        return {}

    def __repr__(self):
        params = ", ".join(f"{k}={v!r}" for k, v in self.config_params().items())
        return f"{type(self).__name__}({params})"

    def __eq__(self, other):
        return type(self) is type(other) and self.config_params() == other.config_params()

    def __hash__(self):
        return hash((type(self).__name__, tuple(sorted(self.config_params().items()))))


class ZeroPi(PiFunction):
    kind = "zero"
    lipschitz_constant = 0.0

    def value(self, r):
        return _ret(np.zeros_like(np.asarray(r, dtype=float)))

    def derivative(self, r):
        return _ret(np.zeros_like(np.asarray(r, dtype=float)))

    def primitive(self, r):
        return _ret(np.zeros_like(np.asarray(r, dtype=float)))


class NegIdentityPi(PiFunction):
    """pi(r) = -r, the concave part of the smooth double well."""

    kind = "neg_identity"
    lipschitz_constant = 1.0

    def value(self, r):
        return _ret(-np.asarray(r, dtype=float))

    def derivative(self, r):
        return _ret(np.full_like(np.asarray(r, dtype=float), -1.0))

    def primitive(self, r):
        r = np.asarray(r, dtype=float)
        return _ret(-0.5 * r ** 2)


@dataclass(frozen=True, eq=False, repr=False)
class StefanPi(PiFunction):
    """Piecewise-linear perturbation matched to the enthalpy plateau:

        pi(r) = L/2        for r < 0,
                L/2 - r    for 0 <= r <= L,
                -L/2       for r > L.
    """

    latent: float = 1.0

    kind = "stefan"
    lipschitz_constant = 1.0

    def __post_init__(self):
        if self.latent <= 0:
            raise ValueError("stefan pi needs latent > 0")

    def value(self, r):
        L = self.latent
        r = np.asarray(r, dtype=float)
        return _ret(np.where(r < 0, 0.5 * L,
                             np.where(r <= L, 0.5 * L - r, -0.5 * L)))

    def derivative(self, r):
        L = self.latent
        r = np.asarray(r, dtype=float)
        return _ret(np.where(r < 0, 0.0, np.where(r < L, -1.0, 0.0)))

    def primitive(self, r):
        L = self.latent
        r = np.asarray(r, dtype=float)
        return _ret(np.where(r < 0, 0.5 * L * r,
                             np.where(r <= L, 0.5 * L * r - 0.5 * r ** 2,
                                      -0.5 * L * (r - L))))

    def config_params(self):
        return {"latent": self.latent}


def epsilon0(pi: PiFunction) -> float:
    """Largest viscosity for which the perturbation stays dominated:
    min{1, 1/(4*L_pi^2)}, with the convention 1 when L_pi = 0."""
    L = pi.lipschitz_constant
    if L == 0:
        return 1.0
    return min(1.0, 1.0 / (4.0 * L * L))


# ---------------------------------------------------------------------------
# name-based construction (config files, presets)
# ---------------------------------------------------------------------------

_GRAPHS = {
    "stefan": (Stefan, ("k_solid", "k_liquid", "latent")),
    "double_obstacle": (DoubleObstacle, ()),
    "power_law": (PowerLaw, ("exponent",)),
    "cubic": (Cubic, ()),
    "identity": (Identity, ()),
}

_PIS = {
    "zero": (ZeroPi, ()),
    "neg_identity": (NegIdentityPi, ()),
    "stefan": (StefanPi, ("latent",)),
}


def _make(table, what, kind, params):
    if kind not in table:
        known = ", ".join(sorted(table))
        raise ValueError(f"unknown {what} kind '{kind}' (known: {known})")
    ctor, allowed = table[kind]
    for key in params:
        if key not in allowed:
            raise ValueError(f"{what} '{kind}' does not take parameter '{key}'")
    return ctor(**params)


def make_graph(kind: str, params: dict | None = None) -> MonotoneGraph:
    return _make(_GRAPHS, "graph", kind, dict(params or {}))


def make_pi(kind: str, params: dict | None = None) -> PiFunction:
    return _make(_PIS, "pi", kind, dict(params or {}))

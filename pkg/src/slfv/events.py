"""Reproduction-event laws and every scalar quantity derived from them.

A law bundles up to two event classes.  Small events happen at rate 1 per
unit area with radii drawn from their own measure.  Large events have
their radius inflated by a spatial scale ``psi`` and their rate divided
by ``rho * psi**2``; ``rho`` may be infinite, meaning large events never
occur.  Each class pairs a radius measure with an impact kernel giving
the distribution of the replaced fraction u at a given radius.

Derived quantities (admissibility masses, jump rates, per-coordinate
dispersal variances, pairwise coalescence rates and the merger-rate
families of the limiting coalescents) are evaluated by exact summation
over radius atoms, trapezoid integration over tabulated radius
densities, and 64-point Gauss-Jacobi quadrature in u, which integrates
polynomial integrands against Beta weights exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import betaln, roots_jacobi

from slfv.geometry import TorusSpec, lens_area, torus_ball_volume


class AdmissibilityError(ValueError):
    """A law violates one of the finiteness or support conditions."""


def _as_float_fn(value: Union[float, Callable[[float], float]]) -> Callable[[float], float]:
    if callable(value):
        return value
    v = float(value)
    return lambda _r: v


@lru_cache(maxsize=64)
def _beta_nodes(a: float, b: float, order: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating f against the Beta(a, b) density on [0, 1]."""
    x, w = roots_jacobi(order, b - 1.0, a - 1.0)
    u = 0.5 * (x + 1.0)
    scale = math.exp(-betaln(a, b) - (a + b - 1.0) * math.log(2.0))
    return u, w * scale


# ---------------------------------------------------------------------------
# radius measures
# ---------------------------------------------------------------------------


class RadiusMeasure:
    """Finite measure on radii: weighted atoms plus an optional density table.

    Atoms are (radius, weight) pairs with positive entries.  A tabulated
    part is a density sampled on an increasing grid, integrated by the
    trapezoid rule.  Total mass is finite by construction.
    """

    def __init__(
        self,
        atoms: Sequence[Tuple[float, float]] = (),
        grid: Optional[np.ndarray] = None,
        density: Optional[np.ndarray] = None,
    ):
        self.atoms = [(float(r), float(w)) for r, w in atoms]
        for r, w in self.atoms:
            if not (r > 0 and math.isfinite(r)):
                raise ValueError(f"atom radius must be positive and finite, got {r}")
            if not (w > 0 and math.isfinite(w)):
                raise ValueError(f"atom weight must be positive and finite, got {w}")
        if (grid is None) != (density is None):
            raise ValueError("grid and density must be given together")
        if grid is not None:
            self.grid = np.asarray(grid, dtype=float)
            self.density = np.asarray(density, dtype=float)
            if self.grid.ndim != 1 or self.grid.shape != self.density.shape:
                raise ValueError("grid and density must be 1-D arrays of equal length")
            if len(self.grid) < 2 or np.any(np.diff(self.grid) <= 0):
                raise ValueError("grid must be increasing with at least two points")
            if self.grid[0] <= 0:
                raise ValueError("tabulated radii must be positive")
            if np.any(self.density < 0) or not np.all(np.isfinite(self.density)):
                raise ValueError("density values must be finite and nonnegative")
        else:
            self.grid = None
            self.density = None
        if not self.atoms and self.grid is None:
            raise ValueError("radius measure needs at least one atom or a density table")

    @classmethod
    def point(cls, r: float, weight: float = 1.0) -> "RadiusMeasure":
        return cls(atoms=[(r, weight)])

    @classmethod
    def table(cls, grid: Sequence[float], density: Sequence[float]) -> "RadiusMeasure":
        return cls(grid=np.asarray(grid, float), density=np.asarray(density, float))

    def integrate(self, f: Callable[[float], float]) -> float:
        """Integral of f(r) against the measure."""
        total = sum(w * f(r) for r, w in self.atoms)
        if self.grid is not None:
            vals = np.array([f(float(r)) for r in self.grid])
            total += float(np.trapezoid(vals * self.density, self.grid))
        return total

    @property
    def total_mass(self) -> float:
        return self.integrate(lambda _r: 1.0)

    @property
    def max_radius(self) -> float:
        """Essential supremum of the supported radii."""
        top = max((r for r, _w in self.atoms), default=0.0)
        if self.grid is not None:
            positive = self.grid[self.density > 0]
            if len(positive):
                top = max(top, float(positive[-1]))
        return top

    def simulation_atoms(self) -> list:
        """Radius atoms used by the event-driven simulators.

        Tabulated densities are collapsed onto their own grid with
        trapezoid weights; laws meant for simulation normally use atoms
        directly, where this is exact.
        """
        out = list(self.atoms)
        if self.grid is not None:
            g, d = self.grid, self.density
            w = np.empty_like(g)
            w[0] = 0.5 * (g[1] - g[0]) * d[0]
            w[-1] = 0.5 * (g[-1] - g[-2]) * d[-1]
            if len(g) > 2:
                w[1:-1] = 0.5 * (g[2:] - g[:-2]) * d[1:-1]
            out.extend((float(r), float(wi)) for r, wi in zip(g, w) if wi > 0)
        return out


# ---------------------------------------------------------------------------
# impact kernels
# ---------------------------------------------------------------------------


class ImpactKernel:
    """Map from radius to a probability distribution for the impact u on [0, 1].

    Three shapes are supported: a point mass at u(r), a Beta(a(r), b(r))
    law, and a fixed discrete table of (values, probabilities).  The
    parameter arguments may be constants or callables of r.
    """

    def __init__(self, kind: str, **params):
        if kind not in ("delta", "beta", "table"):
            raise ValueError(f"unknown impact kernel kind {kind!r}")
        self.kind = kind
        if kind == "delta":
            self._u = _as_float_fn(params.pop("u"))
        elif kind == "beta":
            self._a = _as_float_fn(params.pop("a"))
            self._b = _as_float_fn(params.pop("b"))
        else:
            us = np.asarray(params.pop("values"), dtype=float)
            ps = np.asarray(params.pop("probs"), dtype=float)
            if us.shape != ps.shape or us.ndim != 1 or len(us) == 0:
                raise ValueError("table kernel needs matching 1-D values and probs")
            if np.any(us < 0) or np.any(us > 1):
                raise ValueError("impact values must lie in [0, 1]")
            if np.any(ps < 0) or abs(ps.sum() - 1.0) > 1e-9:
                raise ValueError("table probabilities must be nonnegative and sum to 1")
            self._us, self._ps = us, ps
        if params:
            raise ValueError(f"unexpected kernel parameters {sorted(params)}")

    @classmethod
    def delta(cls, u: Union[float, Callable[[float], float]]) -> "ImpactKernel":
        return cls("delta", u=u)

    @classmethod
    def beta(cls, a, b) -> "ImpactKernel":
        return cls("beta", a=a, b=b)

    @classmethod
    def table(cls, values, probs) -> "ImpactKernel":
        return cls("table", values=values, probs=probs)

    def _check(self, u: float) -> float:
        if not (0.0 <= u <= 1.0):
            raise AdmissibilityError(f"impact fraction {u} outside [0, 1]")
        return u

    def integral(self, r: float, f: Callable[[float], float]) -> float:
        """Integral of f(u) against the impact distribution at radius r."""
        if self.kind == "delta":
            return f(self._check(self._u(r)))
        if self.kind == "beta":
            a, b = self._a(r), self._b(r)
            if not (a > 0 and b > 0):
                raise AdmissibilityError(f"Beta impact parameters must be positive, got ({a}, {b})")
            u, w = _beta_nodes(a, b)
            return float(np.dot(w, [f(float(ui)) for ui in u]))
        return float(sum(p * f(self._check(float(u))) for u, p in zip(self._us, self._ps)))

    def moment(self, r: float, k: int) -> float:
        """k-th moment of u at radius r (closed form where available)."""
        if self.kind == "delta":
            return self._check(self._u(r)) ** k
        if self.kind == "beta":
            a, b = self._a(r), self._b(r)
            out = 1.0
            for i in range(k):
                out *= (a + i) / (a + b + i)
            return out
        return float(np.dot(self._ps, self._us**k))

    def sample(self, r: float, rng: np.random.Generator) -> float:
        if self.kind == "delta":
            return self._check(self._u(r))
        if self.kind == "beta":
            return float(rng.beta(self._a(r), self._b(r)))
        return float(rng.choice(self._us, p=self._ps))


# ---------------------------------------------------------------------------
# event laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventClass:
    """One reproduction-event class: radius measure plus impact kernel."""

    measure: RadiusMeasure
    impact: ImpactKernel


@dataclass(frozen=True)
class EventLaw:
    """Small and large event classes with the large-event scale modifiers.

    ``psi`` multiplies large-event radii; the large-event intensity is
    divided by ``rho * psi**2`` so that a single large event of raw
    radius r affects any fixed lineage at rate pi r^2 u / rho.  ``rho``
    may be ``math.inf``, in which case large events never fire.
    """

    small: Optional[EventClass] = None
    large: Optional[EventClass] = None
    psi: float = 1.0
    rho: float = math.inf

    def __post_init__(self) -> None:
        if self.small is None and self.large is None:
            raise ValueError("an event law needs at least one event class")
        if not (self.psi > 0 and math.isfinite(self.psi)):
            raise ValueError(f"psi must be positive and finite, got {self.psi}")
        if not (self.rho > 0):
            raise ValueError(f"rho must be positive (possibly inf), got {self.rho}")

    def event_class(self, which: str) -> Optional[EventClass]:
        if which == "small":
            return self.small
        if which == "large":
            return self.large
        raise ValueError(f"event class must be 'small' or 'large', got {which!r}")

    @property
    def max_small_radius(self) -> float:
        return self.small.measure.max_radius if self.small else 0.0

    @property
    def max_large_radius(self) -> float:
        return self.large.measure.max_radius if self.large else 0.0

    def small_only(self) -> "EventLaw":
        """The same law with the large class switched off."""
        if self.small is None:
            raise ValueError("law has no small class")
        return EventLaw(small=self.small, large=None, psi=1.0, rho=math.inf)


@dataclass(frozen=True)
class ClassMasses:
    lambda_mass: float
    tilde_lambda_mass: float
    boundary_active: bool


@dataclass(frozen=True)
class AdmissibilityReport:
    small: Optional[ClassMasses]
    large: Optional[ClassMasses]


def _class_masses(ec: EventClass) -> ClassMasses:
    lam = ec.measure.integrate(lambda r: r * r * ec.impact.moment(r, 2))
    til = ec.measure.integrate(lambda r: r * r * ec.impact.moment(r, 1))
    if not (math.isfinite(lam) and math.isfinite(til)):
        raise AdmissibilityError(
            f"event-class masses must be finite: lambda={lam}, tilde-lambda={til}"
        )
    top = ec.measure.max_radius
    near_top = [r for r, _w in ec.measure.simulation_atoms() if r >= 0.95 * top]
    boundary = any(ec.impact.moment(r, 1) > 0 for r in near_top)
    return ClassMasses(lambda_mass=lam, tilde_lambda_mass=til, boundary_active=boundary)


def check_admissibility(law: EventLaw) -> AdmissibilityReport:
    """Compute the admissibility masses of both classes.

    lambda_mass is the second-moment mass controlling pairwise merger
    rates; tilde_lambda_mass is the first-moment mass whose finiteness
    the convergence conditions require.  Nonfinite values raise
    AdmissibilityError; a class whose impact vanishes near its largest
    radius is reported with boundary_active=False.
    """
    return AdmissibilityReport(
        small=_class_masses(law.small) if law.small else None,
        large=_class_masses(law.large) if law.large else None,
    )


def single_lineage_jump_rate(law: EventLaw, event_class: str) -> float:
    """Rate at which one lineage is displaced by events of the given class.

    A lineage sits inside a radius-r event ball with probability
    proportional to the ball area, and is then affected with probability
    u, giving pi * integral of r^2 u.  Large events use the raw radius
    here because the psi^2 area factor cancels the psi^2 in the rate
    divisor, leaving a single factor 1/rho.
    """
    ec = law.event_class(event_class)
    if ec is None:
        return 0.0
    base = math.pi * ec.measure.integrate(lambda r: r * r * ec.impact.moment(r, 1))
    if event_class == "large":
        return 0.0 if math.isinf(law.rho) else base / law.rho
    return base


def dispersal_variance(law: EventLaw, event_class: str) -> float:
    """Per-coordinate displacement variance accumulated per unit time.

    For a lineage hit by an event of radius r, the event centre is
    uniform on the ball around the lineage and the landing point is
    uniform on the ball around the centre, so the squared displacement
    averages r^2 and each coordinate contributes r^2/2.  Combined with
    the pi r^2 u coverage rate this gives (pi/2) * integral of r^4 u.
    Large-class variance is reported in units of psi (raw radii), with
    the rate divisor rho deliberately not applied: the physical
    per-unit-time contribution of the large class is this value times
    psi^2 / rho.
    """
    ec = law.event_class(event_class)
    if ec is None:
        return 0.0
    return (math.pi / 2.0) * ec.measure.integrate(lambda r: r**4 * ec.impact.moment(r, 1))


def pair_coalescence_rate(separation: float, law: EventLaw, event_class: str) -> float:
    """Rate at which two lineages at the given separation merge in one event.

    Both lineages must fall in the same event ball (lens area of the two
    radius-r_eff balls) and both must be affected (second moment of u).
    Large events use the inflated radius psi*r and the 1/(rho psi^2)
    intensity divisor.
    """
    if separation < 0:
        raise ValueError(f"separation must be nonnegative, got {separation}")
    ec = law.event_class(event_class)
    if ec is None:
        return 0.0
    if event_class == "large":
        if math.isinf(law.rho):
            return 0.0
        scale, divisor = law.psi, law.rho * law.psi**2
    else:
        scale, divisor = 1.0, 1.0

    def integrand(r: float) -> float:
        r_eff = scale * r
        if separation >= 2.0 * r_eff:
            return 0.0
        return lens_area(separation, r_eff) * ec.impact.moment(r, 2)

    return ec.measure.integrate(integrand) / divisor


# ---------------------------------------------------------------------------
# measures on [0, 1] and the limiting merger-rate families
# ---------------------------------------------------------------------------


class LambdaMeasure:
    """Finite measure on [0, 1] driving a nonspatial multiple-merger coalescent."""

    def __init__(self, atoms: Sequence[Tuple[float, float]] = (), beta_parts: Sequence[Tuple[float, float, float]] = ()):
        self.atoms = [(float(u), float(w)) for u, w in atoms]
        for u, w in self.atoms:
            if not (0.0 <= u <= 1.0):
                raise ValueError(f"atom location {u} outside [0, 1]")
            if w < 0:
                raise ValueError(f"atom mass must be nonnegative, got {w}")
        self.beta_parts = [(float(a), float(b), float(m)) for a, b, m in beta_parts]
        for a, b, m in self.beta_parts:
            if not (a > 0 and b > 0 and m >= 0):
                raise ValueError(f"invalid Beta component ({a}, {b}, mass={m})")

    @classmethod
    def point(cls, u: float, mass: float = 1.0) -> "LambdaMeasure":
        return cls(atoms=[(u, mass)])

    @classmethod
    def lebesgue(cls, mass: float = 1.0) -> "LambdaMeasure":
        return cls(beta_parts=[(1.0, 1.0, mass)])

    @classmethod
    def beta(cls, a: float, b: float, mass: float = 1.0) -> "LambdaMeasure":
        return cls(beta_parts=[(a, b, mass)])

    def integrate(self, f: Callable[[float], float]) -> float:
        total = sum(w * f(u) for u, w in self.atoms)
        for a, b, m in self.beta_parts:
            u, w = _beta_nodes(a, b)
            total += m * float(np.dot(w, [f(float(ui)) for ui in u]))
        return total


def nonspatial_lambda_rate(p: int, j: int, Lambda: LambdaMeasure) -> float:
    """Rate at which a fixed j-subset of p blocks merges: integral of
    u^(j-2) (1-u)^(p-j) against the measure.

    The point mass at zero recovers pairwise-only mergers: rate 1 for
    j = 2 and 0 for j > 2.
    """
    if not (2 <= j <= p):
        raise ValueError(f"need 2 <= j <= p, got j={j}, p={p}")
    return Lambda.integrate(lambda u: (u ** (j - 2) if j > 2 or u > 0 else 1.0) * (1.0 - u) ** (p - j))


def lambda_beta_c_rate(m: int, k: int, c: float, beta: float, large_class: EventClass) -> float:
    """Merger rate of a fixed k-subset out of m blocks in the limiting
    coalescent driven by whole-torus events of relative radius c*r.

    Each block is captured independently with probability V(c r) * u,
    where V is the ball area on the unit torus; the pairwise rate gains
    an extra additive beta.
    """
    if not (2 <= k <= m):
        raise ValueError(f"need 2 <= k <= m, got k={k}, m={m}")
    if not (c > 0):
        raise ValueError(f"c must be positive, got {c}")
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    unit = TorusSpec(1.0)
    limit = unit.max_distance * (1.0 + 1e-12)

    def integrand(r: float) -> float:
        if c * r > limit:
            raise ValueError(
                f"scaled radius c*r = {c * r} exceeds the unit-torus diameter 1/sqrt(2)"
            )
        V = torus_ball_volume(c * r, unit)
        return large_class.impact.integral(r, lambda u: (V * u) ** k * (1.0 - V * u) ** (m - k))

    rate = large_class.measure.integrate(integrand) / (c * c)
    if k == 2:
        rate += beta
    return rate


# ---------------------------------------------------------------------------
# flattened laws for the event-driven simulators
# ---------------------------------------------------------------------------

IMPACT_DELTA = 0
IMPACT_BETA = 1
IMPACT_TABLE = 2


@dataclass(frozen=True)
class FlatLaw:
    """Plain-array form of an EventLaw consumed by the compiled simulators.

    One row per radius atom across both classes.  ``rate_per_block`` is
    the candidate event rate contributed by each atom for every tracked
    block: exact ball area of the effective radius times the atom weight
    over the class rate divisor.  ``cum_prob`` is the cumulative
    distribution used to pick the atom of a candidate event.
    """

    r_eff: np.ndarray
    is_large: np.ndarray
    impact_kind: np.ndarray
    impact_p1: np.ndarray
    impact_p2: np.ndarray
    table_offset: np.ndarray
    table_u: np.ndarray
    table_cum: np.ndarray
    rate_per_block: float
    cum_prob: np.ndarray
    max_r_eff: float

    @property
    def n_atoms(self) -> int:
        return len(self.r_eff)


def flatten_law(law: EventLaw, torus: TorusSpec) -> FlatLaw:
    """Flatten a law into the per-atom arrays used by the simulators.

    Tabulated radius densities are collapsed onto their grids (exact for
    atomic laws, trapezoid-weighted otherwise).  Impact kernels are
    evaluated at each atom's raw radius.  Raises when any effective
    radius exceeds the torus diameter.
    """
    r_eff, is_large, kind, p1, p2 = [], [], [], [], []
    t_off, t_u, t_cum = [], [], []
    rates = []

    def add_class(ec: EventClass, large: bool) -> None:
        scale = law.psi if large else 1.0
        divisor = law.rho * law.psi**2 if large else 1.0
        if math.isinf(divisor):
            return
        for r, w in ec.measure.simulation_atoms():
            re = scale * r
            if re > torus.max_distance * (1.0 + 1e-12):
                raise ValueError(
                    f"effective event radius {re} exceeds torus diameter {torus.max_distance}"
                )
            r_eff.append(re)
            is_large.append(large)
            rates.append(torus_ball_volume(min(re, torus.max_distance), torus) * w / divisor)
            if ec.impact.kind == "delta":
                kind.append(IMPACT_DELTA)
                p1.append(ec.impact._u(r))
                p2.append(0.0)
                t_off.append(len(t_u))
            elif ec.impact.kind == "beta":
                kind.append(IMPACT_BETA)
                p1.append(ec.impact._a(r))
                p2.append(ec.impact._b(r))
                t_off.append(len(t_u))
            else:
                kind.append(IMPACT_TABLE)
                p1.append(0.0)
                p2.append(0.0)
                t_off.append(len(t_u))
                t_u.extend(ec.impact._us)
                t_cum.extend(np.cumsum(ec.impact._ps))

    if law.small:
        add_class(law.small, large=False)
    if law.large:
        add_class(law.large, large=True)
    if not rates:
        raise ValueError("law has no active event class on this torus")
    t_off.append(len(t_u))
    rates = np.asarray(rates, dtype=np.float64)
    total = float(rates.sum())
    return FlatLaw(
        r_eff=np.asarray(r_eff, dtype=np.float64),
        is_large=np.asarray(is_large, dtype=np.bool_),
        impact_kind=np.asarray(kind, dtype=np.int64),
        impact_p1=np.asarray(p1, dtype=np.float64),
        impact_p2=np.asarray(p2, dtype=np.float64),
        table_offset=np.asarray(t_off, dtype=np.int64),
        table_u=np.asarray(t_u, dtype=np.float64),
        table_cum=np.asarray(t_cum, dtype=np.float64),
        rate_per_block=total,
        cum_prob=np.cumsum(rates) / total,
        max_r_eff=float(np.max(r_eff)),
    )

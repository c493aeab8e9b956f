"""Exact geometry on the two-dimensional torus T(L).

Distances, ball volumes, two-ball intersection (lens) areas and uniform
sampling inside balls.  All points are kept in canonical form: both
coordinates in [-L/2, L/2).  The torus metric is the per-coordinate
minimal-image Euclidean distance, which equals the minimum over the nine
periodic images of the planar distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class TorusSpec:
    """Square torus of sidelength ``L``, identified with [-L/2, L/2)^2."""

    L: float

    def __post_init__(self) -> None:
        if not (self.L > 0 and math.isfinite(self.L)):
            raise ValueError(f"torus sidelength must be positive and finite, got {self.L}")

    @property
    def max_distance(self) -> float:
        """Largest possible torus distance, attained at the cell corner."""
        return self.L / math.sqrt(2.0)


class TorusPoint(NamedTuple):
    x: float
    y: float


def _canon_coord(v: float, L: float) -> float:
    """Map one coordinate into [-L/2, L/2)."""
    w = v - L * math.floor(v / L + 0.5)
    # division rounding can misplace the fold by one period in either
    # direction (e.g. 0.75 / 0.1 rounds up to exactly 7.5), so fix up both
    # edges; the lower wrap runs first because adding L to a value just
    # below -L/2 can round onto +L/2, which the upper guard then folds back
    if w < -L / 2.0:
        w += L
    if w >= L / 2.0:
        w -= L
    return w


def canonical_point(x: float, y: float, torus: TorusSpec) -> TorusPoint:
    """Return the canonical representative of (x, y) on the torus."""
    return TorusPoint(_canon_coord(x, torus.L), _canon_coord(y, torus.L))


def torus_distance(a: TorusPoint, b: TorusPoint, torus: TorusSpec) -> float:
    """Euclidean distance on the torus between two canonical points.

    Args:
        a: first point (canonical form).
        b: second point (canonical form).
        torus: torus spec providing the sidelength.

    Returns:
        The minimal-image distance, always at most L/sqrt(2).
    """
    L = torus.L
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    dx -= L * round(dx / L)
    dy -= L * round(dy / L)
    return math.hypot(dx, dy)


def lens_area(d: float, r: float) -> float:
    """Area of the intersection of two radius-r discs with centres d apart.

    Planar formula; on a torus it is only used in the non-wrapping regime
    (2r < L/2), where discs never self-overlap around the torus.

    Args:
        d: centre separation, d >= 0.
        r: common disc radius, r > 0.

    Returns:
        2 r^2 arccos(d / 2r) - (d/2) sqrt(4 r^2 - d^2) for d <= 2r, else 0.
    """
    if r <= 0:
        raise ValueError(f"disc radius must be positive, got {r}")
    if d < 0:
        raise ValueError(f"separation must be nonnegative, got {d}")
    if d >= 2.0 * r:
        return 0.0
    return 2.0 * r * r * math.acos(d / (2.0 * r)) - (d / 2.0) * math.sqrt(4.0 * r * r - d * d)


def torus_ball_volume(r: float, torus: TorusSpec) -> float:
    """Area of a metric ball of radius r on the torus.

    For r <= L/2 the ball is an ordinary disc of area pi r^2.  For
    L/2 < r <= L/sqrt(2) the disc wraps and overlaps itself across each of
    the four edges; the overlap beyond each edge is a circular segment of
    area r^2 arccos(L/2r) - (L/2) sqrt(r^2 - L^2/4), subtracted once per
    edge.  At r = L/sqrt(2) the ball is the whole torus, area exactly L^2.

    Args:
        r: ball radius with 0 <= r <= L/sqrt(2).
        torus: torus spec.

    Returns:
        The ball area.
    """
    L = torus.L
    if r < 0:
        raise ValueError(f"ball radius must be nonnegative, got {r}")
    if r > torus.max_distance * (1.0 + 1e-12):
        raise ValueError(f"ball radius {r} exceeds the torus diameter L/sqrt(2) = {torus.max_distance}")
    r = min(r, torus.max_distance)
    if r <= L / 2.0:
        return math.pi * r * r
    segment = r * r * math.acos(L / (2.0 * r)) - (L / 2.0) * math.sqrt(r * r - L * L / 4.0)
    return math.pi * r * r - 4.0 * segment


def uniform_on_torus(torus: TorusSpec, rng: np.random.Generator) -> TorusPoint:
    """Draw a point uniformly on the torus."""
    L = torus.L
    return TorusPoint(rng.uniform(-L / 2.0, L / 2.0), rng.uniform(-L / 2.0, L / 2.0))


def uniform_in_ball(
    center: TorusPoint, r: float, torus: TorusSpec, rng: np.random.Generator
) -> TorusPoint:
    """Draw a point uniformly from the torus ball B(center, r).

    Uses rejection from the bounding square of the planar disc when the
    ball does not wrap (acceptance pi/4).  For r > L/2 the ball wraps
    around the torus and rejection is from the whole torus against the
    torus metric (acceptance >= pi/8 at worst).

    Args:
        center: ball centre (canonical form).
        r: ball radius with 0 < r <= L/sqrt(2).
        torus: torus spec.
        rng: numpy random generator.

    Returns:
        A canonical point at torus distance <= r from the centre.
    """
    L = torus.L
    if not (0.0 < r <= torus.max_distance * (1.0 + 1e-12)):
        raise ValueError(f"ball radius must lie in (0, L/sqrt(2)], got {r}")
    if r <= L / 2.0:
        while True:
            dx = rng.uniform(-r, r)
            dy = rng.uniform(-r, r)
            if dx * dx + dy * dy <= r * r:
                return canonical_point(center[0] + dx, center[1] + dy, torus)
    while True:
        p = uniform_on_torus(torus, rng)
        if torus_distance(p, center, torus) <= r:
            return p

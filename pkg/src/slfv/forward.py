"""Forward-in-time population models on the torus.

Two simulators live here.  The individual-based model keeps a finite
point cloud at intensity m: a reproduction event picks a parent among
the occupants of its ball, kills each occupant with probability u and
throws down Poisson(u m area) offspring of the parent's type.  The
measure-valued model tracks per-cell type frequencies on a G x G grid:
an event moves a u-fraction of every covered cell's mass onto the type
of a parent drawn at a uniform location z in the ball.

The moment-duality check runs the field forward and the labelled
coalescent backward on the same grid geometry and law, and compares
E[prod_i rho_t(x_i)({a_i})] against the genealogical estimate in which
every block of the ancestral partition draws one type at its final
label.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import IO, List, Sequence, Tuple

import numpy as np
from scipy import stats

import slfv._kernels as _K
from slfv.coalescent import SampleConfig, simulate_genealogy
from slfv.events import EventLaw, flatten_law
from slfv.geometry import (
    TorusPoint,
    TorusSpec,
    canonical_point,
    torus_ball_volume,
    torus_distance,
    uniform_in_ball,
)

Event = Tuple[Tuple[float, float], float, float]  # (center, radius, impact)


class EventBudgetExceeded(RuntimeError):
    """A forward run would need more events than the configured cap."""


# ---------------------------------------------------------------------------
# individual-based model
# ---------------------------------------------------------------------------


@dataclass
class IndividualPopulation:
    """Finite point cloud of typed individuals at nominal intensity m."""

    xs: np.ndarray
    ys: np.ndarray
    types: np.ndarray
    intensity: float
    torus: TorusSpec

    def __post_init__(self) -> None:
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        self.types = np.asarray(self.types, dtype=np.int64)
        if not (len(self.xs) == len(self.ys) == len(self.types)):
            raise ValueError("coordinate and type arrays must have equal length")
        if not (self.intensity > 0 and math.isfinite(self.intensity)):
            raise ValueError("intensity must be positive and finite")

    @property
    def size(self) -> int:
        return len(self.xs)

    def validate(self) -> None:
        half = self.torus.L / 2
        if self.size and not (
            (self.xs >= -half).all()
            and (self.xs < half).all()
            and (self.ys >= -half).all()
            and (self.ys < half).all()
        ):
            raise ValueError("positions must be canonical")

    @classmethod
    def poisson(
        cls,
        intensity: float,
        torus: TorusSpec,
        rng: np.random.Generator,
        type_id: int = 0,
    ) -> "IndividualPopulation":
        """Translation-invariant start: Poisson(m L^2) uniform points."""
        n = rng.poisson(intensity * torus.L**2)
        xs = (rng.random(n) - 0.5) * torus.L
        ys = (rng.random(n) - 0.5) * torus.L
        return cls(xs, ys, np.full(n, type_id), intensity, torus)


def empirical_density(pop: IndividualPopulation) -> float:
    """Individuals per unit area, the quantity the model holds near m."""
    return pop.size / pop.torus.L**2


def step_individual_model(
    pop: IndividualPopulation, event: Event, rng: np.random.Generator
) -> IndividualPopulation:
    """Apply one reproduction event to the point cloud.

    An empty ball changes nothing.  Otherwise a parent is chosen
    uniformly among the occupants, every occupant dies independently
    with probability u, and Poisson(u m area) offspring of the parent's
    type land uniformly in the ball.
    """
    (cx, cy), r, u = event
    if not 0.0 <= u <= 1.0:
        raise ValueError("impact must lie in [0, 1]")
    center = canonical_point(cx, cy, pop.torus)
    dx = pop.xs - center.x
    dx -= pop.torus.L * np.round(dx / pop.torus.L)
    dy = pop.ys - center.y
    dy -= pop.torus.L * np.round(dy / pop.torus.L)
    inside = dx * dx + dy * dy <= r * r
    occupants = np.flatnonzero(inside)
    if occupants.size == 0:
        return pop
    parent_type = int(pop.types[occupants[rng.integers(0, occupants.size)]])
    survives = np.ones(pop.size, dtype=bool)
    survives[occupants] = rng.random(occupants.size) >= u
    area = torus_ball_volume(min(r, pop.torus.max_distance), pop.torus)
    n_off = rng.poisson(u * pop.intensity * area)
    births = [uniform_in_ball(center, min(r, pop.torus.max_distance), pop.torus, rng) for _ in range(n_off)]
    xs = np.concatenate([pop.xs[survives], [p.x for p in births]])
    ys = np.concatenate([pop.ys[survives], [p.y for p in births]])
    types = np.concatenate([pop.types[survives], np.full(n_off, parent_type)])
    return IndividualPopulation(xs, ys, types, pop.intensity, pop.torus)


# ---------------------------------------------------------------------------
# measure-valued model on a grid
# ---------------------------------------------------------------------------


@dataclass
class TypeField:
    """Per-cell type frequencies: values[i, j] is a probability vector."""

    values: np.ndarray
    torus: TorusSpec

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("values must have shape (G, G, K)")
        if self.n_types > 256:
            raise ValueError("type alphabet is limited to 256")

    @property
    def grid(self) -> int:
        return self.values.shape[0]

    @property
    def n_types(self) -> int:
        return self.values.shape[2]

    @property
    def cell_size(self) -> float:
        return self.torus.L / self.grid

    def validate(self) -> None:
        if (self.values < 0).any():
            raise ValueError("negative cell mass")
        sums = self.values.sum(axis=2)
        drift = np.abs(sums - 1.0).max()
        if drift > 1e-12:
            raise ValueError(f"cell vectors sum to 1 +/- {drift:.2e}, beyond 1e-12")

    def copy(self) -> "TypeField":
        return TypeField(self.values.copy(), self.torus)

    def cell_of(self, p: TorusPoint) -> Tuple[int, int]:
        G, L = self.grid, self.torus.L
        i = min(int((p.x + L / 2) / self.cell_size), G - 1)
        j = min(int((p.y + L / 2) / self.cell_size), G - 1)
        return i, j

    def cell_center(self, i: int, j: int) -> TorusPoint:
        h = self.cell_size
        return TorusPoint(-self.torus.L / 2 + (i + 0.5) * h, -self.torus.L / 2 + (j + 0.5) * h)

    def probability(self, p: TorusPoint, type_id: int) -> float:
        """Mass the cell containing p assigns to the given type."""
        i, j = self.cell_of(p)
        return float(self.values[i, j, type_id])

    @classmethod
    def constant(cls, torus: TorusSpec, grid: int, probs: Sequence[float]) -> "TypeField":
        probs = np.asarray(probs, dtype=np.float64)
        if abs(probs.sum() - 1.0) > 1e-12 or (probs < 0).any():
            raise ValueError("probs must be a probability vector")
        return cls(np.tile(probs, (grid, grid, 1)), torus)

    @classmethod
    def checkerboard(cls, torus: TorusSpec, grid: int) -> "TypeField":
        """Two-type field alternating deterministically between cells."""
        values = np.zeros((grid, grid, 2))
        ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
        even = (ii + jj) % 2 == 0
        values[:, :, 0] = even
        values[:, :, 1] = ~even
        return cls(values, torus)


def step_type_field(field: TypeField, event: Event, rng: np.random.Generator) -> TypeField:
    """Apply one reproduction event to the frequency field.

    A parent location z is uniform in the ball, the parent type is drawn
    from the cell containing z, and every cell whose centre lies in the
    ball moves a u-fraction of its mass to that type.  Events narrower
    than one cell diagonal cannot cover any centre reliably and are
    skipped, as in the compiled driver.
    """
    (cx, cy), r, u = event
    if not 0.0 <= u <= 1.0:
        raise ValueError("impact must lie in [0, 1]")
    if r < field.cell_size * math.sqrt(2.0):
        return field
    center = canonical_point(cx, cy, field.torus)
    z = uniform_in_ball(center, min(r, field.torus.max_distance), field.torus, rng)
    zi, zj = field.cell_of(z)
    k = int(rng.choice(field.n_types, p=field.values[zi, zj]))
    out = field.values.copy()
    G = field.grid
    for i in range(G):
        for j in range(G):
            c = field.cell_center(i, j)
            if torus_distance(c, center, field.torus) <= r:
                out[i, j] *= 1.0 - u
                out[i, j, k] += u
    return TypeField(out, field.torus)


def _forward_arrays(law: EventLaw, torus: TorusSpec):
    """Unweighted atom table plus impact columns for the field driver."""
    if law.large is not None:
        raise ValueError("forward field runs take a small-class-only law")
    flat = flatten_law(law, torus)
    weights = np.array([w for _r, w in law.small.measure.simulation_atoms()])
    total_rate = torus.L**2 * float(weights.sum())
    atom_cum = np.cumsum(weights) / weights.sum()
    return flat, atom_cum, total_rate


def run_forward(
    field0: TypeField,
    law: EventLaw,
    torus: TorusSpec,
    t_end: float,
    rng: np.random.Generator,
    max_events: int = 10**8,
) -> TypeField:
    """Evolve the frequency field through its Poisson event stream.

    Events arrive at rate L^2 times the radius-measure mass, with
    uniform centres.  Raises EventBudgetExceeded when the expected event
    count is beyond max_events.
    """
    if torus.L != field0.torus.L:
        raise ValueError("field and law tori disagree")
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    flat, atom_cum, total_rate = _forward_arrays(law, torus)
    if total_rate * t_end > max_events:
        raise EventBudgetExceeded(
            f"expected {total_rate * t_end:.3g} events exceeds the cap {max_events}"
        )
    out = field0.copy()
    _K.forward_field_run(
        _as_compiled_gen(rng),
        out.values,
        torus.L,
        flat.r_eff,
        atom_cum,
        total_rate,
        flat.impact_kind,
        flat.impact_p1,
        flat.impact_p2,
        flat.table_offset,
        flat.table_u,
        flat.table_cum,
        t_end,
    )
    return out


def _as_compiled_gen(rng: np.random.Generator) -> np.random.Generator:
    """Derive a counter-based generator usable inside the compiled kernels."""
    seed = np.random.SeedSequence(rng.integers(0, 2**32 - 1, size=8).tolist())
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# moment duality
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualityReport:
    forward_moment: float
    dual_moment: float
    forward_ci: Tuple[float, float]
    dual_ci: Tuple[float, float]
    level: float
    replicates: int

    @property
    def overlapping(self) -> bool:
        return (
            self.forward_ci[0] <= self.dual_ci[1]
            and self.dual_ci[0] <= self.forward_ci[1]
        )


def confidence_interval(values: np.ndarray, level: float) -> Tuple[float, float]:
    """Normal-approximation interval; Wilson when the data are 0/1."""
    n = len(values)
    if n < 2:
        return (math.nan, math.nan)
    z = float(stats.norm.ppf(0.5 + level / 2))
    if np.isin(values, (0.0, 1.0)).all():
        p = values.mean()
        denom = 1 + z * z / n
        mid = (p + z * z / (2 * n)) / denom
        half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
        return mid - half, mid + half
    se = values.std(ddof=1) / math.sqrt(n)
    m = values.mean()
    return m - z * se, m + z * se


def _block_moment(field0: TypeField, blocks: List[Tuple[TorusPoint, List[int]]], types) -> float:
    """Product over ancestral blocks of the start-field type mass.

    A block whose leaves demand different types contributes zero: the
    single ancestral type cannot satisfy both.
    """
    value = 1.0
    for label, leaves in blocks:
        wanted = {types[i] for i in leaves}
        if len(wanted) > 1:
            return 0.0
        value *= field0.probability(label, wanted.pop())
    return value


def duality_check(
    field0: TypeField,
    points: Sequence[Tuple[float, float]],
    types: Sequence[int],
    t: float,
    law: EventLaw,
    torus: TorusSpec,
    replicates: int,
    rng: np.random.Generator,
    level: float = 0.99,
) -> DualityReport:
    """Monte Carlo check of the forward/backward moment identity.

    The forward side averages prod_i rho_t(x_i)({a_i}) over independent
    field runs; the dual side runs the grid-snapped coalescent from the
    sample points for time t and evaluates the start field at the
    ancestral labels, one shared type per block.  Sample points must sit
    on cell centres so both sides see the same geometry.
    """
    if len(points) != len(types):
        raise ValueError("need one type per sample point")
    if any(not 0 <= a < field0.n_types for a in types):
        raise ValueError(
            f"type ids must lie in the field alphabet of size {field0.n_types}"
        )
    pts = [canonical_point(x, y, torus) for x, y in points]
    for p in pts:
        i, j = field0.cell_of(p)
        c = field0.cell_center(i, j)
        if torus_distance(p, c, torus) > 1e-9:
            raise ValueError(f"sample point {tuple(p)} is not a cell centre")

    flat, atom_cum, total_rate = _forward_arrays(law, torus)
    min_radius = field0.cell_size * math.sqrt(2.0)

    fwd = np.empty(replicates)
    for rep in range(replicates):
        gen = _as_compiled_gen(rng)
        values = field0.values.copy()
        _K.forward_field_run(
            gen, values, torus.L, flat.r_eff, atom_cum, total_rate,
            flat.impact_kind, flat.impact_p1, flat.impact_p2,
            flat.table_offset, flat.table_u, flat.table_cum, t,
        )
        v = 1.0
        for p, a in zip(pts, types):
            i, j = field0.cell_of(p)
            v *= values[i, j, a]
        fwd[rep] = v

    law_args = (
        flat.r_eff, flat.is_large, flat.impact_kind, flat.impact_p1, flat.impact_p2,
        flat.table_offset, flat.table_u, flat.table_cum,
        flat.rate_per_block, flat.cum_prob,
    )
    dual = np.empty(replicates)
    G = field0.grid
    if len(pts) == 2:
        c1 = field0.cell_of(pts[0])
        c2 = field0.cell_of(pts[1])
        for rep in range(replicates):
            gen = _as_compiled_gen(rng)
            merged, i1, j1, i2, j2 = _K.pair_dual_grid(
                gen, c1[0], c1[1], c2[0], c2[1], torus.L, G, *law_args, t, min_radius
            )
            if merged:
                blocks = [(field0.cell_center(i1, j1), [0, 1])]
            else:
                blocks = [
                    (field0.cell_center(i1, j1), [0]),
                    (field0.cell_center(i2, j2), [1]),
                ]
            dual[rep] = _block_moment(field0, blocks, types)
    else:
        sample = SampleConfig(len(pts), placement=tuple((p.x, p.y) for p in pts))
        for rep in range(replicates):
            rec = simulate_genealogy(
                sample, law, torus, t,
                np.random.default_rng(rng.integers(0, 2**63 - 1)),
                snap_grid=G,
            )
            blocks = [(b.label, sorted(b.leaves)) for b in rec.final.blocks]
            dual[rep] = _block_moment(field0, blocks, types)

    return DualityReport(
        forward_moment=float(fwd.mean()),
        dual_moment=float(dual.mean()),
        forward_ci=confidence_interval(fwd, level),
        dual_ci=confidence_interval(dual, level),
        level=level,
        replicates=replicates,
    )


# ---------------------------------------------------------------------------
# field export
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<dII")


def write_field_binary(field: TypeField, fp: IO[bytes]) -> None:
    """Dense snapshot: header (L float64, G uint32, K uint32 little-endian)
    followed by the (G, G, K) array as little-endian float64, row-major."""
    fp.write(_HEADER.pack(field.torus.L, field.grid, field.n_types))
    fp.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_field_binary(fp: IO[bytes]) -> TypeField:
    head = fp.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ValueError("truncated field header")
    L, G, K = _HEADER.unpack(head)
    payload = fp.read(G * G * K * 8)
    if len(payload) != G * G * K * 8:
        raise ValueError("truncated field payload")
    values = np.frombuffer(payload, dtype="<f8").reshape(G, G, K).copy()
    return TypeField(values, TorusSpec(L))


def write_field_csv(field: TypeField, fp: IO[str]) -> None:
    """Readable export for small grids: one row per cell."""
    K = field.n_types
    fp.write("i,j," + ",".join(f"p{k}" for k in range(K)) + "\n")
    for i in range(field.grid):
        for j in range(field.grid):
            probs = ",".join(repr(float(v)) for v in field.values[i, j])
            fp.write(f"{i},{j},{probs}\n")

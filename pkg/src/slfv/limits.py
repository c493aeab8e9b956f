"""Direct samplers for the limiting genealogy processes.

Three limits are covered: the pairwise-merger coalescent with a rate
multiplier, the event-driven coalescent in which a ball of scaled
radius marks each block independently (pairwise mergers superposed at
rate beta per pair), and its labelled refinement on the unit torus
where blocks carry diffusing labels between events.  All three emit
partition-valued paths that downstream validation compares against the
rescaled finite-torus genealogies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, List, Sequence, Tuple

import numpy as np

from slfv.coalescent import GenealogyEvent
from slfv.events import EventClass
from slfv.geometry import (
    TorusPoint,
    TorusSpec,
    canonical_point,
    torus_ball_volume,
    torus_distance,
    uniform_in_ball,
    uniform_on_torus,
)

UNIT_TORUS = TorusSpec(1.0)


@dataclass(frozen=True)
class PartitionState:
    time: float
    blocks: Tuple[frozenset, ...]


@dataclass
class PartitionPath:
    """Time-ordered partition states; one merger per state change."""

    states: List[PartitionState]
    horizon: float

    @property
    def n(self) -> int:
        return sum(len(b) for b in self.states[0].blocks)

    def block_count_at(self, t: float) -> int:
        count = len(self.states[0].blocks)
        for s in self.states:
            if s.time > t:
                break
            count = len(s.blocks)
        return count

    def merger_times(self) -> List[float]:
        return [s.time for s in self.states[1:]]

    def validate(self) -> None:
        if not self.states or self.states[0].time != 0.0:
            raise ValueError("path must start with a state at time zero")
        prev = self.states[0]
        for s in self.states[1:]:
            if not s.time > prev.time:
                raise ValueError("state times must strictly increase")
            gone = set(prev.blocks) - set(s.blocks)
            added = set(s.blocks) - set(prev.blocks)
            if len(added) != 1 or len(gone) < 2:
                raise ValueError("each state change must merge one group of blocks")
            if frozenset().union(*gone) != next(iter(added)):
                raise ValueError("merged block must be the union of the removed ones")
            prev = s


def write_block_count_csv(path: PartitionPath, fp: IO[str]) -> None:
    """Plain (time, block-count) rows, one per state."""
    fp.write("time,block_count\n")
    for s in path.states:
        fp.write(f"{s.time!r},{len(s.blocks)}\n")


def _singletons(n: int) -> Tuple[frozenset, ...]:
    return tuple(frozenset([i]) for i in range(n))


def sample_kingman(
    n: int,
    rate_multiplier: float,
    horizon: float,
    rng: np.random.Generator,
) -> PartitionPath:
    """Pairwise mergers: each pair of blocks coalesces at a constant rate."""
    if n < 1:
        raise ValueError("need at least one lineage")
    if rate_multiplier <= 0:
        raise ValueError("rate multiplier must be positive")
    blocks = list(_singletons(n))
    states = [PartitionState(0.0, tuple(blocks))]
    t = 0.0
    while len(blocks) >= 2:
        k = len(blocks)
        t += rng.exponential(1.0 / (rate_multiplier * k * (k - 1) / 2))
        if t > horizon:
            break
        i, j = rng.choice(k, size=2, replace=False)
        merged = blocks[i] | blocks[j]
        blocks = [b for idx, b in enumerate(blocks) if idx not in (i, j)]
        blocks.append(merged)
        states.append(PartitionState(t, tuple(blocks)))
    return PartitionPath(states, horizon)


def _marked_merge(blocks: List[frozenset], marks: Sequence[int]) -> List[frozenset]:
    merged = frozenset().union(*(blocks[i] for i in marks))
    out = [b for i, b in enumerate(blocks) if i not in set(marks)]
    out.append(merged)
    return out


def sample_lambda_beta_c(
    n: int,
    c: float,
    beta: float,
    large_law: EventClass,
    horizon: float,
    rng: np.random.Generator,
) -> PartitionPath:
    """Event-driven coalescent with a pairwise-merger component.

    Pairs merge at rate beta each; events arrive at total rate
    c^-2 times the radius-measure mass and mark every block
    independently with probability V_cr * u, where V_cr is the exact
    unit-torus ball volume at radius c*r.  At least two marks are needed
    for a state change.
    """
    if n < 1:
        raise ValueError("need at least one lineage")
    if c <= 0 or beta < 0:
        raise ValueError("need c > 0 and beta >= 0")
    atoms = large_law.measure.simulation_atoms()
    mass = sum(w for _r, w in atoms)
    if not math.isfinite(mass) or mass <= 0:
        raise ValueError("radius measure must have positive finite mass")
    for r, _w in atoms:
        if c * r > UNIT_TORUS.max_distance * (1 + 1e-12):
            raise ValueError(f"scaled radius {c * r} exceeds the unit-torus diameter")
    weights = np.array([w for _r, w in atoms]) / mass
    radii = [r for r, _w in atoms]
    volumes = [torus_ball_volume(min(c * r, UNIT_TORUS.max_distance), UNIT_TORUS) for r in radii]
    event_rate = mass / (c * c)

    blocks = list(_singletons(n))
    states = [PartitionState(0.0, tuple(blocks))]
    t = 0.0
    while len(blocks) >= 2:
        k = len(blocks)
        pair_rate = beta * k * (k - 1) / 2
        t += rng.exponential(1.0 / (pair_rate + event_rate))
        if t > horizon:
            break
        if rng.random() < pair_rate / (pair_rate + event_rate):
            i, j = rng.choice(k, size=2, replace=False)
            blocks = _marked_merge(blocks, (int(i), int(j)))
        else:
            a = int(rng.choice(len(radii), p=weights))
            u = large_law.impact.sample(radii[a], rng)
            p_mark = volumes[a] * u
            marks = np.flatnonzero(rng.random(k) < p_mark)
            if len(marks) < 2:
                continue
            blocks = _marked_merge(blocks, marks)
        states.append(PartitionState(t, tuple(blocks)))
    return PartitionPath(states, horizon)


# ---------------------------------------------------------------------------
# labelled limit on the unit torus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelledState:
    time: float
    blocks: Tuple[Tuple[frozenset, TorusPoint], ...]


@dataclass
class LabelledLimitPath:
    """Labelled partition path: states at time 0, after each affecting
    event, and at the horizon; events in the shared event-log shape."""

    states: List[LabelledState]
    events: List[GenealogyEvent]
    horizon: float

    @property
    def final(self) -> LabelledState:
        return self.states[-1]


def _diffuse(
    labels: List[TorusPoint], dt: float, variance_rate: float, rng: np.random.Generator
) -> List[TorusPoint]:
    if dt <= 0 or variance_rate <= 0:
        return labels
    sd = math.sqrt(variance_rate * dt)
    return [
        canonical_point(p.x + rng.normal(0.0, sd), p.y + rng.normal(0.0, sd), UNIT_TORUS)
        for p in labels
    ]


def sample_spatial_limit(
    n: int,
    x: Sequence[Tuple[float, float]],
    b: float,
    c: float,
    large_law: EventClass,
    sigma_s2: float,
    horizon: float,
    rng: np.random.Generator,
) -> LabelledLimitPath:
    """Labelled coalescent on the unit torus with diffusing labels.

    Between events every block label performs an independent Brownian
    motion with per-coordinate infinitesimal variance b * sigma_s2
    (labels are frozen when b = 0).  Events arrive at rate c^-2 times
    the measure mass with uniform centres; every label in the radius-c*r
    ball is affected with probability u, affected blocks merge into one,
    and the merged block lands uniformly in the ball, a single affected
    block simply jumping there.
    """
    if n < 1:
        raise ValueError("need at least one lineage")
    if len(x) != n:
        raise ValueError("need one initial label per lineage")
    if b < 0 or sigma_s2 < 0:
        raise ValueError("diffusion parameters must be nonnegative")
    labels = [canonical_point(px, py, UNIT_TORUS) for px, py in x]
    if len({(p.x, p.y) for p in labels}) != n:
        raise ValueError("initial labels must be distinct")
    atoms = large_law.measure.simulation_atoms()
    mass = sum(w for _r, w in atoms)
    if not math.isfinite(mass) or mass <= 0:
        raise ValueError("radius measure must have positive finite mass")
    for r, _w in atoms:
        if c * r > UNIT_TORUS.max_distance * (1 + 1e-12):
            raise ValueError(f"scaled radius {c * r} exceeds the unit-torus diameter")
    weights = np.array([w for _r, w in atoms]) / mass
    radii = [r for r, _w in atoms]
    event_rate = mass / (c * c)
    variance_rate = b * sigma_s2

    blocks = list(_singletons(n))
    states = [LabelledState(0.0, tuple(zip(blocks, labels)))]
    events: List[GenealogyEvent] = []
    t = 0.0
    # under a finite horizon the surviving root keeps moving until the
    # horizon; under an infinite one the path ends at full coalescence
    while len(blocks) >= 2 or math.isfinite(horizon):
        dt = rng.exponential(1.0 / event_rate)
        if t + dt > horizon:
            labels = _diffuse(labels, horizon - t, variance_rate, rng)
            states.append(LabelledState(horizon, tuple(zip(blocks, labels))))
            return LabelledLimitPath(states, events, horizon)
        t += dt
        labels = _diffuse(labels, dt, variance_rate, rng)
        a = int(rng.choice(len(radii), p=weights))
        r_eff = c * radii[a]
        u = large_law.impact.sample(radii[a], rng)
        center = uniform_on_torus(UNIT_TORUS, rng)
        affected = [
            i
            for i, p in enumerate(labels)
            if torus_distance(p, center, UNIT_TORUS) <= r_eff and rng.random() < u
        ]
        if not affected:
            continue
        z = uniform_in_ball(center, r_eff, UNIT_TORUS, rng)
        merged_sets = tuple(blocks[i] for i in affected)
        events.append(GenealogyEvent(t, merged_sets, z, "large", r_eff, center))
        if len(affected) == 1:
            labels[affected[0]] = z
        else:
            blocks = _marked_merge(blocks, affected)
            labels = [p for i, p in enumerate(labels) if i not in set(affected)]
            labels.append(z)
        states.append(LabelledState(t, tuple(zip(blocks, labels))))
    return LabelledLimitPath(states, events, horizon)


def ks_exponential(samples: Sequence[float]) -> float:
    """Sup-norm distance between the empirical CDF and 1 - e^-t.

    Needs at least 10 samples; intended for normalized coalescence
    times whose limit law is standard exponential.
    """
    xs = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(xs)
    if n < 10:
        raise ValueError(f"need at least 10 samples, got {n}")
    if (xs < 0).any():
        raise ValueError("samples must be nonnegative")
    cdf = 1.0 - np.exp(-xs)
    upper = np.max(np.arange(1, n + 1) / n - cdf)
    lower = np.max(cdf - np.arange(0, n) / n)
    return float(max(upper, lower))

"""Event-driven simulation of the labelled spatial coalescent.

n sampled lineages live on the torus as blocks of a labelled partition.
Reproduction events arrive through exact thinning (see slfv._kernels):
an accepted event with centre x, radius r and impact u affects each
block whose label lies in B(x, r) independently with probability u; the
affected blocks merge into a single block whose new label is uniform on
B(x, r).  A single affected block simply jumps to the new label.

This module holds the readable reference engine with full genealogy
recording, event-stream replay for structural tests, subsample
restriction, affine rescaling, and a line-oriented JSON event-log
format.  The throughput-critical experiments use the compiled kernels
directly instead.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Dict, IO, List, Optional, Sequence, Tuple, Union

import numpy as np

from slfv.events import EventLaw, FlatLaw, flatten_law
from slfv.geometry import (
    TorusPoint,
    TorusSpec,
    canonical_point,
    torus_distance,
    uniform_in_ball,
    uniform_on_torus,
)


class CoalescenceTimeout(RuntimeError):
    """An until-MRCA run exhausted its event budget before coalescing fully."""


class ReplayCouplingError(RuntimeError):
    """A replayed event covered a block the original run never drew a coin for."""


@dataclass
class Block:
    leaves: frozenset
    label: TorusPoint


@dataclass
class LabelledPartition:
    """Blocks of {0..n-1}, each carrying a torus label."""

    blocks: List[Block]
    torus: TorusSpec

    @property
    def n_leaves(self) -> int:
        return sum(len(b.leaves) for b in self.blocks)

    def validate(self) -> None:
        seen = set()
        for b in self.blocks:
            if not b.leaves:
                raise ValueError("empty block")
            if seen & b.leaves:
                raise ValueError("blocks are not disjoint")
            seen |= b.leaves
            L = self.torus.L
            if not (-L / 2 <= b.label.x < L / 2 and -L / 2 <= b.label.y < L / 2):
                raise ValueError(f"label {b.label} not canonical for L={L}")

    def block_of(self, leaf: int) -> Block:
        for b in self.blocks:
            if leaf in b.leaves:
                return b
        raise KeyError(leaf)


@dataclass(frozen=True)
class GenealogyEvent:
    time: float
    merged: Tuple[frozenset, ...]
    label: TorusPoint
    event_class: str
    radius: float
    center: TorusPoint


@dataclass(frozen=True)
class ReplayEvent:
    """Replay payload of one accepted, affecting event.

    coins maps each covered block's label (as an exact coordinate pair)
    to the uniform variate compared against the impact to decide
    affection, so a permuted or subsampled initial state can be driven
    through the identical randomness.
    """

    center: TorusPoint
    radius: float
    impact: float
    coins: Dict[Tuple[float, float], float]
    label: TorusPoint


@dataclass
class GenealogyRecord:
    n: int
    torus: TorusSpec
    events: List[GenealogyEvent]
    final: LabelledPartition
    pair_coalescence: Dict[Tuple[int, int], float]
    pair_gathering_small: Dict[Tuple[int, int], float]
    pair_gathering_large: Dict[Tuple[int, int], float]
    thresholds: Tuple[float, float]
    elapsed: float
    replay: Optional[List[ReplayEvent]] = None

    def validate(self) -> None:
        last = 0.0
        for ev in self.events:
            if not ev.time > last:
                raise ValueError("event times must strictly increase")
            last = ev.time
            sets = list(ev.merged)
            for i, a in enumerate(sets):
                for b in sets[i + 1 :]:
                    if a & b:
                        raise ValueError("merged sets must be disjoint")
        self.final.validate()


@dataclass(frozen=True)
class SampleConfig:
    """Initial sample: size plus placement rule.

    placement is 'uniform', 'well-separated' (pairwise torus distance at
    least L/log L, drawn by rejection) or an explicit list of points.
    """

    n: int
    placement: Union[str, Tuple[Tuple[float, float], ...]] = "uniform"

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("sample size must be at least 1")
        if isinstance(self.placement, str):
            if self.placement not in ("uniform", "well-separated"):
                raise ValueError(f"unknown placement {self.placement!r}")
        else:
            pts = tuple(tuple(p) for p in self.placement)
            if len(pts) != self.n:
                raise ValueError("explicit placement must list exactly n points")
            object.__setattr__(self, "placement", pts)


def draw_sample(
    sample: SampleConfig, torus: TorusSpec, rng: np.random.Generator
) -> List[TorusPoint]:
    """Realize the initial labels of a sample on the torus."""
    if not isinstance(sample.placement, str):
        return [canonical_point(x, y, torus) for x, y in sample.placement]
    if sample.placement == "uniform":
        return [uniform_on_torus(torus, rng) for _ in range(sample.n)]
    if torus.L <= math.e:
        raise ValueError("well-separated placement needs L > e")
    min_dist = torus.L / math.log(torus.L)
    for _attempt in range(1000):
        pts = [uniform_on_torus(torus, rng) for _ in range(sample.n)]
        ok = all(
            torus_distance(pts[i], pts[j], torus) >= min_dist
            for i in range(sample.n)
            for j in range(i + 1, sample.n)
        )
        if ok:
            return pts
    raise ValueError(
        f"could not place {sample.n} points at pairwise distance >= {min_dist:.3g} "
        f"on a torus of side {torus.L}; the sample is too large for this spacing"
    )


# ---------------------------------------------------------------------------
# candidate generation (exact thinning, reference implementation)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateEvent:
    waiting_time: float
    center: TorusPoint
    radius: float
    event_class: str
    accepted: bool
    covered: Tuple[int, ...]
    atom_index: int


def _sample_impact(flat: FlatLaw, j: int, rng: np.random.Generator) -> float:
    kind = int(flat.impact_kind[j])
    if kind == 0:
        return float(flat.impact_p1[j])
    if kind == 1:
        return float(rng.beta(flat.impact_p1[j], flat.impact_p2[j]))
    lo, hi = int(flat.table_offset[j]), int(flat.table_offset[j + 1])
    v = rng.random()
    for i in range(lo, hi):
        if v <= flat.table_cum[i]:
            return float(flat.table_u[i])
    return float(flat.table_u[hi - 1])


def next_event(
    state: LabelledPartition,
    law: Union[EventLaw, FlatLaw],
    torus: TorusSpec,
    rng: np.random.Generator,
) -> CandidateEvent:
    """Draw one thinning candidate for the current partition.

    The candidate fires after an exponential waiting time with rate
    (number of blocks) x (per-block candidate rate); its radius atom is
    size-biased by ball area, its centre uniform in the ball around a
    uniformly chosen block label.  It is accepted with probability one
    over the number of covered labels, which makes accepted candidates
    exactly the driving-process events that cover at least one label.
    """
    flat = law if isinstance(law, FlatLaw) else flatten_law(law, torus)
    k = len(state.blocks)
    if k < 1:
        raise ValueError("partition must have at least one block")
    dt = rng.exponential(1.0 / (k * flat.rate_per_block))
    j = int(np.searchsorted(flat.cum_prob, rng.random()))
    r = float(flat.r_eff[j])
    b = int(rng.integers(0, k))
    center = uniform_in_ball(state.blocks[b].label, r, torus, rng)
    covered = tuple(
        i
        for i, blk in enumerate(state.blocks)
        if torus_distance(blk.label, center, torus) <= r
    )
    accepted = len(covered) <= 1 or rng.random() < 1.0 / len(covered)
    event_class = "large" if flat.is_large[j] else "small"
    return CandidateEvent(dt, center, r, event_class, accepted, covered, j)


# ---------------------------------------------------------------------------
# full simulation with genealogy recording
# ---------------------------------------------------------------------------


def _snap(p: TorusPoint, torus: TorusSpec, grid: Optional[int]) -> TorusPoint:
    if grid is None:
        return p
    h = torus.L / grid
    i = min(int((p.x + torus.L / 2) / h), grid - 1)
    j = min(int((p.y + torus.L / 2) / h), grid - 1)
    return TorusPoint(-torus.L / 2 + (i + 0.5) * h, -torus.L / 2 + (j + 0.5) * h)


def simulate_genealogy(
    sample: SampleConfig,
    law: EventLaw,
    torus: TorusSpec,
    horizon: Optional[float],
    rng: np.random.Generator,
    gathering_thresholds: Optional[Tuple[float, float]] = None,
    record_replay: bool = False,
    snap_grid: Optional[int] = None,
    max_events: int = 10**9,
) -> GenealogyRecord:
    """Run the labelled coalescent and record the full genealogy.

    horizon is a stopping time, or None to run until the most recent
    common ancestor; exhausting max_events on an until-MRCA run raises
    CoalescenceTimeout.  With a time horizon the root block (once only
    one remains) keeps jumping until the horizon so the terminal labels
    stay meaningful.  Gathering times per leaf pair are recorded at two
    separation thresholds, defaulting to twice the maximal small radius
    and twice the maximal effective large radius.  snap_grid restricts
    labels to the centres of a G x G grid and skips events of less than
    one cell diagonal, matching the forward-field discretization.
    """
    flat = flatten_law(law, torus)
    if gathering_thresholds is None:
        thr_small = 2.0 * law.max_small_radius
        thr_large = 2.0 * law.psi * law.max_large_radius if not math.isinf(law.rho) else 0.0
        gathering_thresholds = (thr_small, thr_large)
    thr_s, thr_l = gathering_thresholds
    min_radius = torus.L / snap_grid * math.sqrt(2.0) if snap_grid else 0.0

    labels = [_snap(p, torus, snap_grid) for p in draw_sample(sample, torus, rng)]
    blocks = [Block(frozenset([i]), p) for i, p in enumerate(labels)]
    n = sample.n

    gather_s: Dict[Tuple[int, int], float] = {}
    gather_l: Dict[Tuple[int, int], float] = {}
    coal: Dict[Tuple[int, int], float] = {}

    def note_pairs(t: float) -> None:
        for bi in range(len(blocks)):
            for bj in range(bi + 1, len(blocks)):
                d = torus_distance(blocks[bi].label, blocks[bj].label, torus)
                for thr, out in ((thr_s, gather_s), (thr_l, gather_l)):
                    if d <= thr:
                        for i in blocks[bi].leaves:
                            for j in blocks[bj].leaves:
                                out.setdefault((min(i, j), max(i, j)), t)

    note_pairs(0.0)
    events: List[GenealogyEvent] = []
    replay: Optional[List[ReplayEvent]] = [] if record_replay else None
    t = 0.0
    n_candidates = 0

    while True:
        if horizon is None:
            if len(blocks) <= 1:
                break
        elif t >= horizon:
            t = horizon
            break
        state = LabelledPartition(blocks, torus)
        cand = next_event(state, flat, torus, rng)
        t += cand.waiting_time
        n_candidates += 1
        if n_candidates > max_events:
            if horizon is None:
                raise CoalescenceTimeout(
                    f"no full coalescence after {max_events} candidate events "
                    f"({len(blocks)} blocks left at t={t:.4g})"
                )
            break
        if horizon is not None and t > horizon:
            t = horizon
            break
        if not cand.accepted:
            continue
        if snap_grid and cand.radius < min_radius:
            continue
        u = _sample_impact(flat, cand.atom_index, rng)
        coins: Dict[Tuple[float, float], float] = {}
        affected = []
        for i in cand.covered:
            coin = float(rng.random())
            key = (blocks[i].label.x, blocks[i].label.y)
            if record_replay and key in coins:
                raise ReplayCouplingError(
                    "two covered blocks share a label; replay recording needs "
                    "distinct labels (avoid snap_grid here)"
                )
            coins[key] = coin
            if coin < u:
                affected.append(i)
        if not affected:
            continue
        new_label = _snap(uniform_in_ball(cand.center, cand.radius, torus, rng), torus, snap_grid)
        merged_sets = tuple(blocks[i].leaves for i in affected)
        events.append(
            GenealogyEvent(t, merged_sets, new_label, cand.event_class, cand.radius, cand.center)
        )
        if record_replay:
            replay.append(ReplayEvent(cand.center, cand.radius, u, coins, new_label))
        if len(affected) == 1:
            blocks[affected[0]] = Block(merged_sets[0], new_label)
        else:
            for si, set_a in enumerate(merged_sets):
                for set_b in merged_sets[si + 1 :]:
                    for leaf_i in set_a:
                        for leaf_j in set_b:
                            key = (min(leaf_i, leaf_j), max(leaf_i, leaf_j))
                            coal[key] = t
                            gather_s.setdefault(key, t)
                            gather_l.setdefault(key, t)
            union = frozenset().union(*merged_sets)
            blocks = [b for i, b in enumerate(blocks) if i not in affected]
            blocks.append(Block(union, new_label))
        note_pairs(t)

    final = LabelledPartition(blocks, torus)
    record = GenealogyRecord(
        n=n,
        torus=torus,
        events=events,
        final=final,
        pair_coalescence=coal,
        pair_gathering_small=gather_s,
        pair_gathering_large=gather_l,
        thresholds=gathering_thresholds,
        elapsed=t,
        replay=replay,
    )
    return record


# ---------------------------------------------------------------------------
# derived records: restriction, replay, rescaling
# ---------------------------------------------------------------------------


def restrict(record: GenealogyRecord, subsample: Sequence[int]) -> GenealogyRecord:
    """Project a genealogy onto a subset of the original leaves.

    Events whose merged sets all miss the subsample are dropped; events
    that merged only one subsample-containing block survive as label
    moves of that block.  Leaf indices are kept as in the full record.
    """
    keep = frozenset(subsample)
    if not keep <= frozenset(range(record.n)):
        raise ValueError("subsample contains unknown leaf indices")
    events = []
    for ev in record.events:
        merged = tuple(s & keep for s in ev.merged if s & keep)
        if merged:
            events.append(replace(ev, merged=merged))
    final_blocks = [
        Block(b.leaves & keep, b.label) for b in record.final.blocks if b.leaves & keep
    ]

    def filt(d: Dict[Tuple[int, int], float]) -> Dict[Tuple[int, int], float]:
        return {k: v for k, v in d.items() if k[0] in keep and k[1] in keep}

    return GenealogyRecord(
        n=record.n,
        torus=record.torus,
        events=events,
        final=LabelledPartition(final_blocks, record.torus),
        pair_coalescence=filt(record.pair_coalescence),
        pair_gathering_small=filt(record.pair_gathering_small),
        pair_gathering_large=filt(record.pair_gathering_large),
        thresholds=record.thresholds,
        elapsed=record.elapsed,
        replay=record.replay,
    )


def replay_genealogy(
    initial: LabelledPartition, record: GenealogyRecord
) -> GenealogyRecord:
    """Drive an initial partition through a previously recorded event stream.

    The initial labels must be a subset of the labels the recording run
    drew coins for (same torus); this is how coupling under subsampling
    or leaf permutation is checked.  Affection is decided by looking up
    each covered label's stored coin, so two partitions sharing labels
    see exactly the same randomness.
    """
    if record.replay is None:
        raise ValueError("record was produced without record_replay=True")
    torus = record.torus
    blocks = [Block(b.leaves, b.label) for b in initial.blocks]
    events: List[GenealogyEvent] = []
    for ev, rep in zip(record.events, record.replay):
        covered = [
            i
            for i, b in enumerate(blocks)
            if torus_distance(b.label, rep.center, torus) <= rep.radius
        ]
        affected = []
        for i in covered:
            key = (blocks[i].label.x, blocks[i].label.y)
            if key not in rep.coins:
                raise ReplayCouplingError(
                    f"no recorded coin for label {key} at t={ev.time:.6g}"
                )
            if rep.coins[key] < rep.impact:
                affected.append(i)
        if not affected:
            continue
        merged_sets = tuple(blocks[i].leaves for i in affected)
        events.append(replace(ev, merged=merged_sets, label=rep.label))
        if len(affected) == 1:
            blocks[affected[0]] = Block(merged_sets[0], rep.label)
        else:
            union = frozenset().union(*merged_sets)
            blocks = [b for i, b in enumerate(blocks) if i not in affected]
            blocks.append(Block(union, rep.label))
    return GenealogyRecord(
        n=initial.n_leaves,
        torus=torus,
        events=events,
        final=LabelledPartition(blocks, torus),
        pair_coalescence={},
        pair_gathering_small={},
        pair_gathering_large={},
        thresholds=record.thresholds,
        elapsed=record.elapsed,
        replay=None,
    )


def rescale_time_and_space(
    record: GenealogyRecord, time_factor: float, space_factor: float
) -> GenealogyRecord:
    """Return the record in rescaled units.

    Times are divided by time_factor and all spatial data (labels,
    centres, radii, thresholds, the torus side) multiplied by
    space_factor, so an event at time time_factor on the original torus
    appears at time 1 on the scaled one.
    """
    if time_factor <= 0 or space_factor <= 0:
        raise ValueError("scale factors must be positive")
    torus = TorusSpec(record.torus.L * space_factor)

    def pt(p: TorusPoint) -> TorusPoint:
        return canonical_point(p.x * space_factor, p.y * space_factor, torus)

    events = [
        GenealogyEvent(
            ev.time / time_factor,
            ev.merged,
            pt(ev.label),
            ev.event_class,
            ev.radius * space_factor,
            pt(ev.center),
        )
        for ev in record.events
    ]
    final = LabelledPartition(
        [Block(b.leaves, pt(b.label)) for b in record.final.blocks], torus
    )

    def scale_times(d: Dict[Tuple[int, int], float]) -> Dict[Tuple[int, int], float]:
        return {k: v / time_factor for k, v in d.items()}

    return GenealogyRecord(
        n=record.n,
        torus=torus,
        events=events,
        final=final,
        pair_coalescence=scale_times(record.pair_coalescence),
        pair_gathering_small=scale_times(record.pair_gathering_small),
        pair_gathering_large=scale_times(record.pair_gathering_large),
        thresholds=(
            record.thresholds[0] * space_factor,
            record.thresholds[1] * space_factor,
        ),
        elapsed=record.elapsed / time_factor,
        replay=None,
    )


# ---------------------------------------------------------------------------
# event-log serialization (one JSON object per line)
# ---------------------------------------------------------------------------


def write_event_log(record: GenealogyRecord, fp: IO[str]) -> int:
    """Write the genealogy's events, one JSON object per line.

    Returns the number of lines written.  Merged sets are emitted as
    sorted leaf-index lists so the log is byte-stable for a given run.
    """
    count = 0
    for ev in record.events:
        line = {
            "time": ev.time,
            "class": ev.event_class,
            "radius": ev.radius,
            "merged": [sorted(s) for s in ev.merged],
            "label": [ev.label.x, ev.label.y],
        }
        fp.write(json.dumps(line, separators=(",", ":")) + "\n")
        count += 1
    return count


def read_event_log(fp: IO[str]) -> List[dict]:
    """Parse an event log back into dictionaries, validating each line."""
    out = []
    for ln, raw in enumerate(fp, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {ln}: not valid JSON: {exc}") from exc
        missing = {"time", "class", "radius", "merged", "label"} - obj.keys()
        if missing:
            raise ValueError(f"line {ln}: missing fields {sorted(missing)}")
        if obj["class"] not in ("small", "large"):
            raise ValueError(f"line {ln}: unknown event class {obj['class']!r}")
        out.append(obj)
    return out

"""Tests for the labelled-coalescent engine, replay and serialization.

The thinning acceptance rule is checked against closed-form areas from
slfv.geometry (union of two balls, lens overlap), jump counts against a
Poisson law, and the replay machinery against the structural identity
restrict(simulate(full)) == replay(subsample) which must hold exactly,
event for event.
"""

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slfv.coalescent import (
    Block,
    CoalescenceTimeout,
    LabelledPartition,
    SampleConfig,
    draw_sample,
    next_event,
    read_event_log,
    replay_genealogy,
    rescale_time_and_space,
    restrict,
    simulate_genealogy,
    write_event_log,
)
from slfv.events import EventClass, EventLaw, ImpactKernel, RadiusMeasure, flatten_law
from slfv.geometry import TorusPoint, TorusSpec, lens_area, torus_distance

ORACLE_SEED = 90210


def point_law(r, u, weight=1.0, large=None, psi=1.0, rho=math.inf):
    small = EventClass(RadiusMeasure.point(r, weight), ImpactKernel.delta(u))
    return EventLaw(small=small, large=large, psi=psi, rho=rho)


def pair_state(torus, d, r_ignored=None):
    return LabelledPartition(
        [
            Block(frozenset([0]), TorusPoint(0.0, 0.0)),
            Block(frozenset([1]), TorusPoint(d, 0.0)),
        ],
        torus,
    )


class TestSamplePlacement:
    def test_explicit_points_are_canonicalized(self):
        torus = TorusSpec(16.0)
        sample = SampleConfig(2, placement=((8.0, 3.0), (-8.0, -9.0)))
        pts = draw_sample(sample, torus, np.random.default_rng(0))
        assert pts[0] == TorusPoint(-8.0, 3.0)
        assert pts[1] == TorusPoint(-8.0, 7.0)

    def test_uniform_sample_stays_in_box(self):
        torus = TorusSpec(10.0)
        pts = draw_sample(SampleConfig(40), torus, np.random.default_rng(1))
        assert len(pts) == 40
        assert all(-5 <= p.x < 5 and -5 <= p.y < 5 for p in pts)

    def test_well_separated_minimum_distance(self):
        torus = TorusSpec(256.0)
        rng = np.random.default_rng(ORACLE_SEED)
        min_dist = 256.0 / math.log(256.0)
        for _ in range(20):
            pts = draw_sample(SampleConfig(5, "well-separated"), torus, rng)
            dists = [
                torus_distance(pts[i], pts[j], torus)
                for i in range(5)
                for j in range(i + 1, 5)
            ]
            assert min(dists) >= min_dist

    def test_well_separated_infeasible_raises(self):
        # 60 points pairwise >= 16/log16 = 5.77 apart cannot fit on a
        # 16 x 16 torus (packing tops out near (16/5.77)^2 ~ 8).
        torus = TorusSpec(16.0)
        with pytest.raises(ValueError, match="too large"):
            draw_sample(SampleConfig(60, "well-separated"), torus, np.random.default_rng(2))

    def test_rejects_bad_placements(self):
        with pytest.raises(ValueError):
            SampleConfig(2, placement="ring")
        with pytest.raises(ValueError):
            SampleConfig(3, placement=((0.0, 0.0),))
        with pytest.raises(ValueError):
            SampleConfig(0)


class TestNextEvent:
    """Thinning candidates for a frozen two-block state.

    With both labels distance d apart and a single radius atom r, the
    union of the two candidate balls has area 2 pi r^2 - lens(d, r), so
    acceptance happens with probability (2 pi r^2 - lens) / (2 pi r^2)
    and an accepted candidate covers both labels with probability
    lens / (2 pi r^2 - lens).
    """

    N_CANDIDATES = 20_000

    def setup_method(self):
        self.torus = TorusSpec(16.0)
        self.law = point_law(1.0, 0.5)
        self.flat = flatten_law(self.law, self.torus)
        self.state = pair_state(self.torus, 1.0)
        self.rng = np.random.default_rng(ORACLE_SEED)

    def _draws(self):
        return [
            next_event(self.state, self.flat, self.torus, self.rng)
            for _ in range(self.N_CANDIDATES)
        ]

    def test_waiting_time_mean(self):
        draws = self._draws()
        mean = np.mean([c.waiting_time for c in draws])
        expect = 1.0 / (2.0 * self.flat.rate_per_block)
        assert abs(mean - expect) < 4 * expect / math.sqrt(self.N_CANDIDATES)

    def test_acceptance_probability_is_union_over_ball_area(self):
        draws = self._draws()
        union = 2 * math.pi - lens_area(1.0, 1.0)
        expect = union / (2 * math.pi)
        frac = np.mean([c.accepted for c in draws])
        se = math.sqrt(expect * (1 - expect) / self.N_CANDIDATES)
        assert abs(frac - expect) < 4 * se

    def test_merger_fraction_among_accepted(self):
        draws = self._draws()
        lens = lens_area(1.0, 1.0)
        expect = lens / (2 * math.pi - lens)
        both = [len(c.covered) == 2 for c in draws if c.accepted]
        frac = np.mean(both)
        se = math.sqrt(expect * (1 - expect) / len(both))
        assert abs(frac - expect) < 4 * se

    def test_single_block_candidates_always_accepted(self):
        state = LabelledPartition([Block(frozenset([0]), TorusPoint(0, 0))], self.torus)
        for _ in range(200):
            c = next_event(state, self.flat, self.torus, self.rng)
            assert c.accepted and c.covered == (0,)
            assert torus_distance(TorusPoint(0, 0), c.center, self.torus) <= c.radius


class TestSimulateGenealogy:
    def test_single_lineage_jump_count_is_poisson(self):
        # A lone lineage is hit at rate pi r^2 u; with r = 1, u = 0.5 and
        # horizon 2000 the count is Poisson with mean ~3141.
        torus = TorusSpec(16.0)
        law = point_law(1.0, 0.5)
        rng = np.random.default_rng(ORACLE_SEED + 1)
        rec = simulate_genealogy(SampleConfig(1, placement=((0.0, 0.0),)), law, torus, 2000.0, rng)
        lam = math.pi * 0.5 * 2000.0
        assert abs(len(rec.events) - lam) < 4 * math.sqrt(lam)
        assert all(len(ev.merged) == 1 for ev in rec.events)

    def test_forced_merger_with_full_impact(self):
        torus = TorusSpec(16.0)
        law = point_law(2.0, 1.0)
        rng = np.random.default_rng(3)
        sample = SampleConfig(2, placement=((0.0, 0.0), (1.0, 0.0)))
        rec = simulate_genealogy(sample, law, torus, None, rng)
        rec.validate()
        assert len(rec.final.blocks) == 1
        assert rec.final.blocks[0].leaves == frozenset([0, 1])
        merger = rec.events[-1]
        assert len(merger.merged) == 2
        assert rec.pair_coalescence[(0, 1)] == merger.time == rec.elapsed
        # initial separation 1 is already below the small threshold 2r = 4
        assert rec.pair_gathering_small[(0, 1)] == 0.0

    def test_horizon_truncates_and_keeps_root_moving(self):
        torus = TorusSpec(8.0)
        law = point_law(2.0, 1.0)
        rng = np.random.default_rng(4)
        sample = SampleConfig(2, placement=((0.0, 0.0), (0.5, 0.0)))
        rec = simulate_genealogy(sample, law, torus, 40.0, rng)
        assert rec.elapsed == 40.0
        assert all(ev.time <= 40.0 for ev in rec.events)
        # the pair merges almost immediately, then the root keeps jumping
        assert (0, 1) in rec.pair_coalescence
        post_root = [ev for ev in rec.events if ev.time > rec.pair_coalescence[(0, 1)]]
        assert post_root and all(ev.merged == (frozenset([0, 1]),) for ev in post_root)

    def test_until_mrca_event_budget_raises(self):
        torus = TorusSpec(64.0)
        law = point_law(0.5, 0.5)
        sample = SampleConfig(2, placement=((-20.0, 0.0), (20.0, 0.0)))
        with pytest.raises(CoalescenceTimeout):
            simulate_genealogy(sample, law, torus, None, np.random.default_rng(5), max_events=50)

    def test_pair_time_bookkeeping(self):
        torus = TorusSpec(8.0)
        law = point_law(1.0, 1.0)
        rng = np.random.default_rng(6)
        rec = simulate_genealogy(SampleConfig(5), law, torus, None, rng)
        rec.validate()
        pairs = [(i, j) for i in range(5) for j in range(i + 1, 5)]
        for key in pairs:
            assert key in rec.pair_coalescence
            assert rec.pair_gathering_small[key] <= rec.pair_coalescence[key]
            # no large class: the large threshold is zero, so gathering
            # there is only ever triggered by the merge itself
            assert rec.pair_gathering_large[key] == rec.pair_coalescence[key]
        assert rec.thresholds == (2.0, 0.0)
        assert sum(len(b.leaves) for b in rec.final.blocks) == 5

    def test_large_class_threshold_default(self):
        torus = TorusSpec(16.0)
        large = EventClass(RadiusMeasure.point(2.0), ImpactKernel.delta(0.5))
        law = point_law(1.0, 0.5, large=large, psi=4.0, rho=100.0)
        rng = np.random.default_rng(7)
        rec = simulate_genealogy(SampleConfig(3), law, torus, 0.5, rng)
        assert rec.thresholds == (2.0, 16.0)
        # 2 psi R_large = 16 exceeds the torus diameter, so every pair
        # is gathered at time zero under the large threshold
        for i in range(3):
            for j in range(i + 1, 3):
                assert rec.pair_gathering_large[(i, j)] == 0.0

    def test_snapped_labels_sit_on_cell_centres(self):
        torus = TorusSpec(16.0)
        law = point_law(3.0, 1.0)
        rng = np.random.default_rng(8)
        rec = simulate_genealogy(
            SampleConfig(3), law, torus, 5.0, rng, snap_grid=8, record_replay=False
        )
        h = 16.0 / 8
        for ev in rec.events:
            for coord in (ev.label.x, ev.label.y):
                steps = (coord + 8.0) / h - 0.5
                assert abs(steps - round(steps)) < 1e-9

    def test_snap_grid_skips_events_below_cell_diagonal(self):
        torus = TorusSpec(16.0)
        law = point_law(2.0, 1.0)  # 2 < 2 * sqrt(2) = cell diagonal
        rng = np.random.default_rng(9)
        rec = simulate_genealogy(SampleConfig(4), law, torus, 3.0, rng, snap_grid=8)
        assert rec.events == []


def _recorded_run(n=6, horizon=2.5, seed=ORACLE_SEED + 2):
    torus = TorusSpec(32.0)
    law = point_law(2.0, 0.5)
    placement = ((0.0, 0.0), (1.5, 0.5), (-1.0, 1.0), (0.5, -2.0), (10.0, 10.0), (-12.0, 6.0))
    sample = SampleConfig(n, placement=placement[:n])
    rng = np.random.default_rng(seed)
    rec = simulate_genealogy(sample, law, torus, horizon, rng, record_replay=True)
    initial = LabelledPartition(
        [Block(frozenset([i]), TorusPoint(*placement[i])) for i in range(n)], torus
    )
    return rec, initial, torus


def _event_key(ev):
    return (ev.time, tuple(sorted(map(tuple, map(sorted, ev.merged)))), ev.label, ev.radius)


class TestReplayAndRestrict:
    def test_identity_replay_reproduces_the_record(self):
        rec, initial, _ = _recorded_run()
        again = replay_genealogy(initial, rec)
        assert [_event_key(e) for e in again.events] == [_event_key(e) for e in rec.events]
        assert {(b.leaves, b.label) for b in again.final.blocks} == {
            (b.leaves, b.label) for b in rec.final.blocks
        }

    def test_subsample_replay_matches_restriction(self):
        rec, initial, torus = _recorded_run()
        assert rec.events, "recorded run produced no events; adjust parameters"
        for keep in [(0, 2, 4), (1, 3), (5,), (0, 1, 2, 3, 4, 5)]:
            sub_initial = LabelledPartition(
                [Block(frozenset([i]), b.label) for i, b in zip(keep, [initial.blocks[i] for i in keep])],
                torus,
            )
            replayed = replay_genealogy(sub_initial, rec)
            restricted = restrict(rec, keep)
            assert [_event_key(e) for e in replayed.events] == [
                _event_key(e) for e in restricted.events
            ]
            assert {(b.leaves, b.label) for b in replayed.final.blocks} == {
                (b.leaves, b.label) for b in restricted.final.blocks
            }

    def test_permutation_equivariance(self):
        rec, initial, torus = _recorded_run()
        perm = [5, 4, 3, 2, 1, 0]
        permuted = LabelledPartition(
            [Block(frozenset([perm[i]]), b.label) for i, b in enumerate(initial.blocks)], torus
        )
        replayed = replay_genealogy(permuted, rec)
        expected = [
            (ev.time, tuple(sorted(tuple(sorted(perm[i] for i in s)) for s in ev.merged)))
            for ev in rec.events
        ]
        got = [
            (ev.time, tuple(sorted(tuple(sorted(s)) for s in ev.merged)))
            for ev in replayed.events
        ]
        assert got == expected

    def test_restrict_to_all_leaves_is_identity(self):
        rec, _, _ = _recorded_run()
        full = restrict(rec, range(6))
        assert [_event_key(e) for e in full.events] == [_event_key(e) for e in rec.events]
        assert full.pair_coalescence == rec.pair_coalescence

    def test_restrict_to_singleton_leaves_only_label_moves(self):
        rec, _, _ = _recorded_run()
        solo = restrict(rec, [2])
        assert all(len(ev.merged) == 1 and ev.merged[0] == frozenset([2]) for ev in solo.events)
        assert solo.pair_coalescence == {}

    @settings(max_examples=40, deadline=None)
    @given(keep=st.frozensets(st.integers(0, 5), min_size=1))
    def test_restriction_is_structurally_valid(self, keep):
        sub = restrict(_RECORDED.record, keep)
        sub.validate()
        for ev in sub.events:
            assert all(s <= keep for s in ev.merged)
        leaves = frozenset().union(*(b.leaves for b in sub.final.blocks))
        assert leaves == keep

    def test_replay_requires_recording(self):
        torus = TorusSpec(16.0)
        rng = np.random.default_rng(10)
        rec = simulate_genealogy(SampleConfig(2), point_law(1.0, 1.0), torus, 1.0, rng)
        with pytest.raises(ValueError, match="record_replay"):
            replay_genealogy(rec.final, rec)

    def test_restrict_rejects_unknown_leaves(self):
        rec, _, _ = _recorded_run()
        with pytest.raises(ValueError, match="unknown leaf"):
            restrict(rec, [0, 17])


class _Recorded:
    def __init__(self):
        self.record = _recorded_run()[0]


_RECORDED = _Recorded()


class TestRescale:
    def test_identity_factors(self):
        rec, _, _ = _recorded_run(horizon=1.0)
        same = rescale_time_and_space(rec, 1.0, 1.0)
        assert [_event_key(e) for e in same.events] == [_event_key(e) for e in rec.events]
        assert same.torus.L == rec.torus.L

    def test_times_divide_and_space_multiplies(self):
        rec, _, _ = _recorded_run(horizon=1.0)
        assert rec.events
        scaled = rescale_time_and_space(rec, 4.0, 0.25)
        assert scaled.torus.L == 8.0
        for orig, ev in zip(rec.events, scaled.events):
            assert ev.time == pytest.approx(orig.time / 4.0)
            assert ev.radius == pytest.approx(orig.radius * 0.25)
            assert ev.label.x == pytest.approx(orig.label.x * 0.25)
        assert scaled.elapsed == pytest.approx(rec.elapsed / 4.0)
        assert scaled.thresholds[0] == pytest.approx(rec.thresholds[0] * 0.25)
        for key, t in rec.pair_coalescence.items():
            assert scaled.pair_coalescence[key] == pytest.approx(t / 4.0)

    def test_round_trip(self):
        rec, _, _ = _recorded_run(horizon=1.0)
        back = rescale_time_and_space(rescale_time_and_space(rec, 8.0, 0.5), 1 / 8.0, 2.0)
        for orig, ev in zip(rec.events, back.events):
            assert ev.time == pytest.approx(orig.time)
            assert ev.label.x == pytest.approx(orig.label.x)

    def test_rejects_nonpositive_factors(self):
        rec, _, _ = _recorded_run(horizon=0.5)
        with pytest.raises(ValueError):
            rescale_time_and_space(rec, 0.0, 1.0)
        with pytest.raises(ValueError):
            rescale_time_and_space(rec, 1.0, -2.0)


class TestEventLog:
    def test_round_trip(self):
        rec, _, _ = _recorded_run()
        buf = io.StringIO()
        n = write_event_log(rec, buf)
        assert n == len(rec.events)
        buf.seek(0)
        rows = read_event_log(buf)
        assert len(rows) == n
        for ev, row in zip(rec.events, rows):
            assert row["time"] == ev.time
            assert row["class"] == ev.event_class
            assert row["radius"] == ev.radius
            assert row["merged"] == [sorted(s) for s in ev.merged]
            assert tuple(row["label"]) == (ev.label.x, ev.label.y)

    def test_rejects_bad_lines(self):
        with pytest.raises(ValueError, match="not valid JSON"):
            read_event_log(io.StringIO("{nope\n"))
        with pytest.raises(ValueError, match="missing fields"):
            read_event_log(io.StringIO('{"time": 1.0, "class": "small"}\n'))
        bad_class = '{"time":1.0,"class":"huge","radius":1.0,"merged":[[0]],"label":[0,0]}\n'
        with pytest.raises(ValueError, match="unknown event class"):
            read_event_log(io.StringIO(bad_class))

    def test_blank_lines_are_skipped(self):
        line = '{"time":1.0,"class":"small","radius":1.0,"merged":[[0,1]],"label":[0.5,0.5]}'
        rows = read_event_log(io.StringIO("\n" + line + "\n\n"))
        assert len(rows) == 1 and rows[0]["merged"] == [[0, 1]]


class TestRecordValidation:
    def test_overlapping_blocks_rejected(self):
        torus = TorusSpec(8.0)
        part = LabelledPartition(
            [Block(frozenset([0, 1]), TorusPoint(0, 0)), Block(frozenset([1]), TorusPoint(1, 1))],
            torus,
        )
        with pytest.raises(ValueError, match="disjoint"):
            part.validate()

    def test_noncanonical_label_rejected(self):
        torus = TorusSpec(8.0)
        part = LabelledPartition([Block(frozenset([0]), TorusPoint(4.0, 0.0))], torus)
        with pytest.raises(ValueError, match="canonical"):
            part.validate()

    def test_decreasing_event_times_rejected(self):
        rec, _, _ = _recorded_run()
        assert len(rec.events) >= 2
        rec.events[1], rec.events[0] = rec.events[0], rec.events[1]
        with pytest.raises(ValueError, match="strictly increase"):
            rec.validate()

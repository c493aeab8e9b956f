"""Tests for regime classification and the validation experiments.

The classifier is cross-checked against a numeric brute-force reading
of the limit conditions at large L, the predicted timescales against
hand-evaluated closed forms, and each experiment against an elementary
oracle at desk scale (small tori, modest replicate counts).
"""

import math

import numpy as np
import pytest

from slfv import _kernels as K
from slfv.events import EventClass, EventLaw, ImpactKernel, RadiusMeasure, flatten_law
from slfv.geometry import TorusSpec, torus_ball_volume
from slfv.validation import (
    PowerLaw,
    RegimeSpec,
    UncoveredRegimeError,
    block_count_experiment,
    classify_regime,
    first_merger_distribution,
    hitting_time_experiment,
    limit_block_count_overlay,
    pair_time_experiment,
    predicted_timescale,
    short_window_entrance,
    single_lineage_variance,
    weakly_decreasing,
)

ORACLE_SEED = 271_828

SIGMA_UNIT = math.pi / 2  # per-coordinate variance of the r=1, u=1 class


def small_law(r=1.0, u=1.0):
    return EventLaw(small=EventClass(RadiusMeasure.point(r), ImpactKernel.delta(u)))


def two_class_law(r_small=1.0, u_small=1.0, r_large=0.5, u_large=0.5):
    return EventLaw(
        small=EventClass(RadiusMeasure.point(r_small), ImpactKernel.delta(u_small)),
        large=EventClass(RadiusMeasure.point(r_large), ImpactKernel.delta(u_large)),
    )


class TestPowerLaw:
    def test_evaluates_the_closed_form(self):
        p = PowerLaw(2.0, 0.5, 1.0)
        assert p(100.0) == pytest.approx(2.0 * 10.0 * math.log(100.0))
        assert PowerLaw(3.0)(17.0) == 3.0

    def test_rejects_bad_coefficient_and_small_l(self):
        with pytest.raises(ValueError):
            PowerLaw(0.0, 1.0)
        with pytest.raises(ValueError, match="L > 1"):
            PowerLaw(1.0, 1.0)(1.0)


class TestRegimeSpec:
    def test_sequences_come_together(self):
        with pytest.raises(ValueError, match="together"):
            RegimeSpec(psi=PowerLaw(1.0, 0.5))
        with pytest.raises(ValueError, match="together"):
            RegimeSpec(rho=PowerLaw(1.0, 1.0))

    def test_alpha_bounds(self):
        with pytest.raises(ValueError, match="alpha"):
            RegimeSpec(psi=PowerLaw(1.0, 0.0), rho=PowerLaw(1.0, 1.0))
        with pytest.raises(ValueError, match="alpha"):
            RegimeSpec(psi=PowerLaw(1.0, 1.5), rho=PowerLaw(1.0, 1.0))
        assert RegimeSpec(psi=PowerLaw(1.0, 1.0), rho=PowerLaw(1.0, 1.0)).alpha == 1.0
        assert RegimeSpec.small_only().alpha == 0.0

    def test_rho_must_diverge(self):
        with pytest.raises(ValueError, match="rho"):
            RegimeSpec(psi=PowerLaw(1.0, 0.5), rho=PowerLaw(2.0))
        with pytest.raises(ValueError, match="rho"):
            RegimeSpec(psi=PowerLaw(1.0, 0.5), rho=PowerLaw(1.0, -0.5))
        RegimeSpec(psi=PowerLaw(1.0, 0.5), rho=PowerLaw(1.0, 0.0, 2.0))

    def test_law_at(self):
        regime = RegimeSpec(psi=PowerLaw(1.0, 0.5), rho=PowerLaw(2.0, 1.0))
        law = two_class_law()
        concrete = regime.law_at(law, 64.0)
        assert concrete.psi == 8.0
        assert concrete.rho == 128.0
        stripped = RegimeSpec.small_only().law_at(law, 64.0)
        assert stripped.large is None
        with pytest.raises(ValueError, match="no large class"):
            regime.law_at(small_law(), 64.0)


# the configured regimes exercised below; expected kinds derived by hand
# from the scaling sequences
ALPHA_HALF_CASES = [
    (RegimeSpec(PowerLaw(1.0, 0.5), PowerLaw(1.0, 0.25)), "kingman-large"),
    (RegimeSpec(PowerLaw(1.0, 0.5), PowerLaw(1.0, 1.0)), "kingman-mixed"),
    (RegimeSpec(PowerLaw(1.0, 0.5), PowerLaw(1.0, 5.0)), "kingman-small"),
    (RegimeSpec(PowerLaw(1.0, 0.5), PowerLaw(1.0, 2.5)), "kingman-small"),
    (RegimeSpec(PowerLaw(1.0, 0.5), PowerLaw(1.0, 1.5)), "uncovered"),
    (RegimeSpec(PowerLaw(1.0, 0.5), PowerLaw(1.0, 1.0, 1.0)), "uncovered"),
    (RegimeSpec(PowerLaw(2.0, 0.5), PowerLaw(1.0, 1.0, 2.0)), "uncovered"),
    (RegimeSpec(PowerLaw(1.0, 0.25), PowerLaw(1.0, 0.0, 3.0)), "kingman-large"),
]


class TestClassifyRegime:
    def test_no_large_events_is_small_driven(self):
        assert classify_regime(RegimeSpec.small_only(), small_law()).kind == "kingman-small"
        regime = RegimeSpec(PowerLaw(1.0, 0.5), PowerLaw(1.0, 0.25))
        assert classify_regime(regime, small_law()).kind == "kingman-small"

    @pytest.mark.parametrize("regime,expected", ALPHA_HALF_CASES)
    def test_alpha_below_one_cases(self, regime, expected):
        law = two_class_law()
        if expected == "uncovered":
            with pytest.raises(UncoveredRegimeError):
                classify_regime(regime, law)
        else:
            assert classify_regime(regime, law).kind == expected

    def test_mixed_case_carries_the_variance_weight(self):
        regime = RegimeSpec(PowerLaw(2.0, 0.5), PowerLaw(3.0, 1.0))
        cls = classify_regime(regime, two_class_law())
        assert cls.kind == "kingman-mixed"
        assert cls.b == pytest.approx(4.0 / 3.0)

    def test_alpha_one_cases(self):
        law = two_class_law()
        psi = PowerLaw(0.5, 1.0)
        spatial = classify_regime(RegimeSpec(psi, PowerLaw(2.0, 2.0)), law)
        assert spatial.kind == "spatial"
        assert spatial.b == 2.0 and spatial.c == 0.5

        mm = classify_regime(RegimeSpec(psi, PowerLaw(3.0, 2.0, 1.0)), law)
        assert mm.kind == "multiple-merger"
        assert mm.c == 0.5
        assert mm.beta == pytest.approx(2 * math.pi * SIGMA_UNIT * 3.0)

        king = classify_regime(RegimeSpec(psi, PowerLaw(1.0, 2.0, 2.0)), law)
        assert king.kind == "kingman-small"
        assert classify_regime(RegimeSpec(psi, PowerLaw(1.0, 3.0)), law).kind == "kingman-small"

    def test_alpha_one_below_proportional(self):
        law = two_class_law()
        slow = PowerLaw(1.0, 1.0, -1.0)
        assert classify_regime(RegimeSpec(slow, PowerLaw(1.0, 3.0)), law).kind == "kingman-small"
        with pytest.raises(UncoveredRegimeError, match="proportional"):
            classify_regime(RegimeSpec(slow, PowerLaw(1.0, 2.0, 1.0)), law)

    @pytest.mark.parametrize("regime,expected", ALPHA_HALF_CASES)
    def test_matches_brute_force_condition_reading(self, regime, expected):
        # numeric evaluation of the four limit conditions at L = 1e6 vs
        # 1e12; log L doubles between the two scales, so any diverging
        # ratio in this power-times-log family grows by at least 2 while
        # a convergent one stays flat, and 1.5 splits the two
        L1, L2 = 1e6, 1e12

        def ratio(num, den):
            return num(L2) / den(L2), num(L1) / den(L1)

        def grows(pair):
            return pair[0] > 1.5 * pair[1]

        def vanishes(pair):
            return pair[0] < pair[1] / 1.5

        psi, rho = regime.psi, regime.rho
        psi2 = ratio(lambda L: psi(L) ** 2, rho)
        psi2log = ratio(lambda L: psi(L) ** 2 * math.log(L), rho)
        psi4 = ratio(lambda L: psi(L) ** 4, rho)
        l2log = ratio(lambda L: L * L * math.log(L), rho)
        if grows(psi2):
            brute = "kingman-large"
        elif grows(psi2log):
            brute = "kingman-mixed"
        elif not grows(psi4) or vanishes(l2log):
            brute = "kingman-small"
        else:
            brute = "uncovered"
        assert brute == expected


class TestPredictedTimescale:
    def test_small_only_closed_form(self):
        phi = predicted_timescale(RegimeSpec.small_only(), 64.0, small_law())
        assert phi == pytest.approx(64.0**2 * math.log(64.0) / (2 * math.pi * SIGMA_UNIT))

    def test_large_driven_closed_form(self):
        regime = RegimeSpec(PowerLaw(1.0, 0.5), PowerLaw(1.0, 0.25))
        law = two_class_law()
        L = 256.0
        sigma_b2 = (math.pi / 2) * 0.5**4 * 0.5
        expected = 0.5 * L**0.25 * L**2 * math.log(L) / (2 * math.pi * sigma_b2 * L)
        assert predicted_timescale(regime, L, law) == pytest.approx(expected)

    def test_mixed_closed_form(self):
        regime = RegimeSpec(PowerLaw(1.0, 0.5), PowerLaw(1.0, 1.0))
        law = two_class_law()
        L = 256.0
        sigma_b2 = (math.pi / 2) * 0.5**4 * 0.5
        expected = 0.5 * L**2 * math.log(L) / (2 * math.pi * (SIGMA_UNIT + sigma_b2))
        assert predicted_timescale(regime, L, law) == pytest.approx(expected)

    def test_rare_large_events_fall_back_to_the_small_form(self):
        regime = RegimeSpec(PowerLaw(1.0, 0.5), PowerLaw(1.0, 5.0))
        phi = predicted_timescale(regime, 64.0, two_class_law())
        assert phi == pytest.approx(64.0**2 * math.log(64.0) / (2 * math.pi * SIGMA_UNIT))

    def test_alpha_one_timescale_is_rho(self):
        psi = PowerLaw(1.0, 1.0)
        law = two_class_law(r_large=0.25)
        spatial = RegimeSpec(psi, PowerLaw(2.0, 2.0))
        assert predicted_timescale(spatial, 64.0, law) == pytest.approx(2.0 * 64.0**2)
        mm = RegimeSpec(psi, PowerLaw(1.0, 2.0, 1.0))
        assert predicted_timescale(mm, 64.0, law) == pytest.approx(
            64.0**2 * math.log(64.0)
        )

    def test_zero_dispersal_has_no_timescale(self):
        with pytest.raises(ValueError, match="dispersal"):
            predicted_timescale(RegimeSpec.small_only(), 64.0, small_law(u=0.0))


class TestSingleLineageVariance:
    def test_small_only(self):
        assert single_lineage_variance(small_law()) == pytest.approx(SIGMA_UNIT)

    def test_both_classes_scale_with_psi_and_rho(self):
        law = EventLaw(
            small=EventClass(RadiusMeasure.point(1.0), ImpactKernel.delta(1.0)),
            large=EventClass(RadiusMeasure.point(0.5), ImpactKernel.delta(0.5)),
            psi=2.0,
            rho=5.0,
        )
        sigma_b2 = (math.pi / 2) * 0.5**4 * 0.5
        assert single_lineage_variance(law) == pytest.approx(
            SIGMA_UNIT + sigma_b2 * 4.0 / 5.0
        )

    def test_infinite_rho_silences_the_large_class(self):
        law = two_class_law()
        assert single_lineage_variance(law) == pytest.approx(SIGMA_UNIT)


class TestWeaklyDecreasing:
    def test_slack_band(self):
        assert weakly_decreasing([3.0, 2.0, 2.5], slack=0.6)
        assert not weakly_decreasing([3.0, 2.0, 2.5], slack=0.1)
        assert weakly_decreasing([1.0])


class TestPairTimeExperiment:
    def test_smoke_and_reproducibility(self):
        regime = RegimeSpec.small_only()
        law = small_law()
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(ORACLE_SEED)
            (res,) = pair_time_experiment(regime, law, [16.0], 40, rng)
            runs.append(res)
        assert np.array_equal(runs[0].coalescence, runs[1].coalescence)
        res = runs[0]
        assert res.n_replicates == 40
        assert res.timescale == pytest.approx(
            predicted_timescale(regime, 16.0, law)
        )
        assert not res.non_coalescing
        finite = np.isfinite(res.coalescence)
        assert (res.gather_small[finite] <= res.coalescence[finite]).all()
        assert 0.0 <= res.ks("coalescence") <= 1.0
        rows = res.rows()
        assert len(rows) == 40
        assert rows[7]["replicate"] == 7 and rows[7]["L"] == 16.0
        summary = res.summary()
        assert summary["ks_coalescence"] == res.ks("coalescence")
        assert summary["timeouts"] == res.timeouts

    def test_zero_impact_law_reports_non_coalescing(self):
        rng = np.random.default_rng(ORACLE_SEED + 1)
        (res,) = pair_time_experiment(
            RegimeSpec.small_only(), small_law(u=0.0), [16.0], 15, rng, horizon=3.0
        )
        assert res.non_coalescing
        assert res.timescale is None
        assert res.summary()["ks_coalescence"] is None
        with pytest.raises(ValueError, match="timescale"):
            res.normalized()

    def test_unknown_time_kind_rejected(self):
        rng = np.random.default_rng(ORACLE_SEED + 2)
        (res,) = pair_time_experiment(
            RegimeSpec.small_only(), small_law(), [16.0], 12, rng
        )
        with pytest.raises(ValueError, match="time kind"):
            res.normalized("gathering")


class TestBlockCountExperiment:
    def test_sample_size_bounds(self):
        rng = np.random.default_rng(0)
        for n in (1, 9):
            with pytest.raises(ValueError, match="sample size"):
                block_count_experiment(n, RegimeSpec.small_only(), small_law(), 16.0, 5, rng)

    def test_smoke_structure(self):
        rng = np.random.default_rng(ORACLE_SEED + 3)
        res = block_count_experiment(
            4, RegimeSpec.small_only(), small_law(), 16.0, 30, rng
        )
        assert res.merger_times.shape == (30, 3)
        assert (res.block_counts_at(0.0) == 4).all()
        late = res.block_counts_at(25.0)
        assert (late >= 1).all() and late.mean() < 1.5
        dist = res.distribution_at(0.2)
        assert sum(dist.values()) == pytest.approx(1.0)
        rows = res.rows()
        assert set(rows[0]) == {"L", "replicate", "merge_1", "size_1", "merge_2", "size_2", "merge_3", "size_3"}
        summary = res.summary(times=[0.2])
        assert summary["curves"]["0.2"]["probability"] == dist

    def test_two_blocks_share_the_pair_simulation(self):
        regime = RegimeSpec.small_only()
        law = small_law()
        (pair,) = pair_time_experiment(
            regime, law, [16.0], 25, np.random.default_rng(ORACLE_SEED + 4)
        )
        blocks = block_count_experiment(
            2, regime, law, 16.0, 25, np.random.default_rng(ORACLE_SEED + 4)
        )
        assert np.array_equal(pair.coalescence, blocks.merger_times[:, 0])

    def test_kingman_overlay_matches_holding_probability(self):
        from slfv.validation import RegimeClass

        rng = np.random.default_rng(ORACLE_SEED + 5)
        overlay = limit_block_count_overlay(4, RegimeClass("kingman-small"), [0.3], 4000, rng)
        expect = math.exp(-1.8)
        se = math.sqrt(expect * (1 - expect) / 4000)
        assert abs(overlay[0.3][4] - expect) < 3 * se

    def test_overlay_kind_validation(self):
        from slfv.validation import RegimeClass

        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="spatial"):
            limit_block_count_overlay(3, RegimeClass("spatial", b=1.0, c=1.0), [0.1], 5, rng)
        with pytest.raises(ValueError, match="large event class"):
            limit_block_count_overlay(
                3, RegimeClass("multiple-merger", beta=0.1, c=1.0), [0.1], 5, rng
            )


class TestFirstMergerDistribution:
    REGIME = RegimeSpec(PowerLaw(1.0, 1.0), PowerLaw(1.0, 2.0, 2.0))

    def law(self, u=0.5):
        return EventLaw(
            small=EventClass(RadiusMeasure.point(1.0), ImpactKernel.delta(1.0)),
            large=EventClass(RadiusMeasure.point(0.25), ImpactKernel.delta(u)),
        )

    def test_two_lineages_only_pair_merge(self):
        rng = np.random.default_rng(ORACLE_SEED + 6)
        res = first_merger_distribution(2, self.REGIME, self.law(), 16.0, 150, rng)
        assert res.mergers == 150
        assert (res.sizes == 2).all()
        assert res.expected_frequencies == pytest.approx([1.0])
        assert not res.inconclusive

    def test_preconditions(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="proportionally"):
            first_merger_distribution(
                3, RegimeSpec(PowerLaw(1.0, 0.5), PowerLaw(1.0, 3.0)), self.law(), 16.0, 5, rng
            )
        with pytest.raises(ValueError, match="outgrow"):
            first_merger_distribution(
                3, RegimeSpec(PowerLaw(1.0, 1.0), PowerLaw(1.0, 2.0)), self.law(), 16.0, 5, rng
            )
        with pytest.raises(ValueError, match="large event class"):
            first_merger_distribution(3, self.REGIME, small_law(), 16.0, 5, rng)

    def test_insufficient_mergers_flagged(self):
        rng = np.random.default_rng(ORACLE_SEED + 7)
        res = first_merger_distribution(3, self.REGIME, self.law(), 16.0, 40, rng)
        assert res.inconclusive
        assert res.chisq is None and res.pvalue is None

    def test_sizes_match_the_transition_quadrature(self):
        # u = 0.5, V = pi/16 on the unit torus: conditioned frequencies
        # of k = 2, 3, 4 follow the binomial mixture in u*V
        rng = np.random.default_rng(ORACLE_SEED + 8)
        res = first_merger_distribution(4, self.REGIME, self.law(), 32.0, 5000, rng)
        uv = 0.5 * torus_ball_volume(0.25, TorusSpec(1.0))
        weights = [math.comb(4, k) * uv**k * (1 - uv) ** (4 - k) for k in (2, 3, 4)]
        hand = np.array(weights) / sum(weights)
        assert res.expected_frequencies == pytest.approx(hand)
        assert not res.inconclusive
        assert res.pvalue > 0.001
        assert res.frequencies() == pytest.approx(hand, abs=0.02)


class TestHittingTimeExperiment:
    def test_target_reaching_the_separation_is_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="separation"):
            hitting_time_experiment(small_law(), [16.0], PowerLaw(20.0), 5, rng)

    def test_target_growth_bound(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="slower than L"):
            hitting_time_experiment(small_law(), [16.0], PowerLaw(0.1, 1.0), 5, rng)

    def test_normalization_and_smoke(self):
        rng = np.random.default_rng(ORACLE_SEED + 9)
        (res,) = hitting_time_experiment(small_law(), [16.0], PowerLaw(1.0), 60, rng)
        assert res.gamma == 0.0
        assert res.normalization == pytest.approx(
            16.0**2 * math.log(16.0) / (math.pi * SIGMA_UNIT)
        )
        finite = np.isfinite(res.times)
        assert finite.sum() >= 50
        assert (res.jumps[finite] > 0).all()
        assert 0.0 <= res.ks() <= 1.0
        assert res.summary()["ks"] == res.ks()
        assert res.rows()[3]["replicate"] == 3

    def test_position_homogenizes_to_uniform(self):
        # well after the L^2 mixing time the lineage position is nearly
        # uniform, so it sits inside the central ball with probability
        # close to the ball's volume fraction
        L = 8.0
        torus = TorusSpec(L)
        flat = flatten_law(small_law(), torus)
        args = (
            flat.r_eff, flat.is_large, flat.impact_kind, flat.impact_p1,
            flat.impact_p2, flat.table_offset, flat.table_u, flat.table_cum,
            flat.rate_per_block, flat.cum_prob,
        )
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(ORACLE_SEED + 10)))
        n, d, t_end = 20_000, 2.0, 10 * L * L
        hits = 0
        for _ in range(n):
            x, y = K.single_lineage_position(gen, 0.0, 0.0, L, *args, t_end)
            if x * x + y * y <= d * d:
                hits += 1
        p = torus_ball_volume(d, torus) / L**2
        se = math.sqrt(p * (1 - p) / n)
        assert abs(hits / n - p) < 3 * se


class TestShortWindowEntrance:
    def test_empty_window_and_empty_target(self):
        rng = np.random.default_rng(ORACLE_SEED + 11)
        res = short_window_entrance(small_law(), 16.0, 1.0, 300.0, 0.0, 30, rng)
        assert res.probability == 0.0
        assert res.bound_ratio is None
        res = short_window_entrance(small_law(), 16.0, 0.0, 300.0, 40.0, 30, rng)
        assert res.probability == 0.0
        assert res.bound_ratio == 0.0

    def test_window_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="length <= end"):
            short_window_entrance(small_law(), 16.0, 1.0, 10.0, 20.0, 5, rng)
        with pytest.raises(ValueError, match="does not apply"):
            short_window_entrance(small_law(), 16.0, 1.0, 1000.0, 90.0, 5, rng)
        with pytest.raises(ValueError, match="nonnegative"):
            short_window_entrance(small_law(), 16.0, -1.0, 10.0, 1.0, 5, rng)

    def test_smoke_ratio(self):
        rng = np.random.default_rng(ORACLE_SEED + 12)
        L = 16.0
        window = L**2 / (2 * math.log(L))
        res = short_window_entrance(small_law(), L, 1.0, 2 * L**2, window, 300, rng)
        assert 0.0 <= res.probability <= 1.0
        assert res.bound_ratio >= 0.0
        assert res.in_window == round(res.probability * 300)
        assert len(res.rows()) == 300
        assert res.summary()["bound_ratio"] == res.bound_ratio

"""Experiments that compare finite-torus genealogies with their limits.

The scaling regime of the large events decides both the coalescence
timescale and the limiting genealogy.  This module classifies a regime
from closed-form scaling sequences, evaluates the predicted timescale,
and runs the Monte Carlo experiments (pair times, block counts, first
mergers, single-lineage hitting times) whose normalized outputs are
tested against the exponential and coalescent limit laws.

Every experiment draws all its randomness from the generator passed in,
so a rerun with the same seed reproduces every statistic bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from slfv import _kernels as _K
from slfv.coalescent import SampleConfig, draw_sample
from slfv.events import (
    EventLaw,
    FlatLaw,
    dispersal_variance,
    flatten_law,
    lambda_beta_c_rate,
)
from slfv.geometry import TorusSpec, canonical_point, torus_distance, uniform_on_torus
from slfv.limits import (
    PartitionPath,
    ks_exponential,
    sample_kingman,
    sample_lambda_beta_c,
)


class UncoveredRegimeError(ValueError):
    """The scaling sequences fall in a gap between the covered cases."""


@dataclass(frozen=True)
class PowerLaw:
    """Scaling sequence coef * L**exponent * (log L)**log_exponent."""

    coef: float = 1.0
    exponent: float = 0.0
    log_exponent: float = 0.0

    def __post_init__(self) -> None:
        if not (self.coef > 0 and math.isfinite(self.coef)):
            raise ValueError(f"coefficient must be positive and finite, got {self.coef}")

    def __call__(self, L: float) -> float:
        if L <= 1.0:
            raise ValueError(f"scaling sequences are defined for L > 1, got {L}")
        return self.coef * L**self.exponent * math.log(L) ** self.log_exponent


def _ratio_limit(coef: float, exponent: float, log_exponent: float) -> float:
    """Limit of coef * L**exponent * (log L)**log_exponent as L grows."""
    if exponent > 0 or (exponent == 0 and log_exponent > 0):
        return math.inf
    if exponent < 0 or (exponent == 0 and log_exponent < 0):
        return 0.0
    return coef


@dataclass(frozen=True)
class RegimeSpec:
    """How the large-event scale and rarity grow with the torus size.

    Large-event radii are inflated by ``psi(L)`` and their intensity
    divided by ``rho(L)``; ``psi=rho=None`` encodes a law whose large
    class is switched off at every L.  ``alpha`` is the growth exponent
    of ``psi`` and must lie in (0, 1]; ``rho`` must increase to
    infinity.
    """

    psi: Optional[PowerLaw] = None
    rho: Optional[PowerLaw] = None

    def __post_init__(self) -> None:
        if (self.psi is None) != (self.rho is None):
            raise ValueError("psi and rho must be supplied together")
        if self.psi is None:
            return
        if not 0 < self.psi.exponent <= 1:
            raise ValueError(f"alpha = {self.psi.exponent} outside (0, 1]")
        r = self.rho
        if r.exponent < 0 or (r.exponent == 0 and r.log_exponent <= 0):
            raise ValueError("rho must increase to infinity")

    @property
    def alpha(self) -> float:
        """Growth exponent of the large-event scale (0 without one)."""
        return self.psi.exponent if self.psi is not None else 0.0

    @classmethod
    def small_only(cls) -> "RegimeSpec":
        return cls()

    def law_at(self, law: EventLaw, L: float) -> EventLaw:
        """Concrete event law on the torus of side L."""
        if self.psi is None:
            return law.small_only() if law.large is not None else law
        if law.large is None:
            raise ValueError("regime scales large events but the law has no large class")
        return EventLaw(small=law.small, large=law.large, psi=self.psi(L), rho=self.rho(L))


@dataclass(frozen=True)
class RegimeClass:
    """Classified limit behaviour of a regime.

    kind is 'kingman-small', 'kingman-mixed', 'kingman-large',
    'spatial' or 'multiple-merger'.  b is the limit of psi^2/rho for
    the mixed kind and of rho/L^2 for the spatial kind, beta the
    pairwise-merger intensity of the multiple-merger kind, and c the
    unit-torus radius scale when psi grows like c*L.
    """

    kind: str
    b: Optional[float] = None
    beta: Optional[float] = None
    c: Optional[float] = None


def classify_regime(regime: RegimeSpec, law: EventLaw) -> RegimeClass:
    """Select the covered limit case for the given scaling sequences.

    Raises UncoveredRegimeError in the gap between the mixed and
    small-driven diffusive cases, and for alpha = 1 scalings below
    proportional-to-L whose large events are not asymptotically silent.
    """
    if regime.psi is None or law.large is None:
        return RegimeClass("kingman-small")
    psi, rho = regime.psi, regime.rho
    if regime.alpha < 1:
        lim_psi2 = _ratio_limit(
            psi.coef**2 / rho.coef,
            2 * psi.exponent - rho.exponent,
            2 * psi.log_exponent - rho.log_exponent,
        )
        if math.isinf(lim_psi2):
            return RegimeClass("kingman-large")
        lim_psi2_log = _ratio_limit(
            psi.coef**2 / rho.coef,
            2 * psi.exponent - rho.exponent,
            2 * psi.log_exponent + 1 - rho.log_exponent,
        )
        if math.isinf(lim_psi2_log):
            return RegimeClass("kingman-mixed", b=lim_psi2)
        lim_psi4 = _ratio_limit(
            psi.coef**4 / rho.coef,
            4 * psi.exponent - rho.exponent,
            4 * psi.log_exponent - rho.log_exponent,
        )
        lim_small = _ratio_limit(1.0 / rho.coef, 2 - rho.exponent, 1 - rho.log_exponent)
        if math.isfinite(lim_psi4) or lim_small == 0.0:
            return RegimeClass("kingman-small")
        raise UncoveredRegimeError(
            "psi^2 log L / rho stays bounded while psi^4 / rho grows and "
            "L^2 log L / rho does not vanish; no covered case applies"
        )
    proportional = psi.exponent == 1.0 and psi.log_exponent == 0.0
    lim_rho_l2log = _ratio_limit(rho.coef, rho.exponent - 2, rho.log_exponent - 1)
    if math.isinf(lim_rho_l2log):
        # large events are too rare to register before full coalescence
        return RegimeClass("kingman-small", c=psi.coef if proportional else None)
    if not proportional:
        raise UncoveredRegimeError(
            "alpha = 1 below proportional-to-L is only covered when large "
            "events are asymptotically silent"
        )
    lim_rho_l2 = _ratio_limit(rho.coef, rho.exponent - 2, rho.log_exponent)
    if math.isfinite(lim_rho_l2):
        return RegimeClass("spatial", b=lim_rho_l2, c=psi.coef)
    sigma_s2 = dispersal_variance(law, "small")
    return RegimeClass(
        "multiple-merger", beta=2 * math.pi * sigma_s2 * lim_rho_l2log, c=psi.coef
    )


def single_lineage_variance(law: EventLaw) -> float:
    """Per-coordinate displacement variance per unit time, both classes."""
    v = dispersal_variance(law, "small")
    if law.large is not None and math.isfinite(law.rho):
        v += dispersal_variance(law, "large") * law.psi**2 / law.rho
    return v


def predicted_timescale(regime: RegimeSpec, L: float, law: EventLaw) -> float:
    """Coalescence timescale of the classified regime at torus size L."""
    cls = classify_regime(regime, law)
    if cls.kind in ("spatial", "multiple-merger"):
        return regime.rho(L)
    l2log = L * L * math.log(L)
    sigma_s2 = dispersal_variance(law, "small")
    if cls.kind == "kingman-small":
        if sigma_s2 <= 0:
            raise ValueError("small-event dispersal is zero; no diffusive timescale")
        return l2log / (2 * math.pi * sigma_s2)
    sigma_b2 = dispersal_variance(law, "large")
    alpha = regime.alpha
    if cls.kind == "kingman-large":
        if sigma_b2 <= 0:
            raise ValueError("large-event dispersal is zero; no diffusive timescale")
        psi = regime.psi(L)
        return (1 - alpha) * regime.rho(L) * l2log / (2 * math.pi * sigma_b2 * psi * psi)
    denom = sigma_s2 + cls.b * sigma_b2
    if denom <= 0:
        raise ValueError("total dispersal is zero; no diffusive timescale")
    return (1 - alpha) * l2log / (2 * math.pi * denom)


def weakly_decreasing(values: Sequence[float], slack: float = 0.0) -> bool:
    """True when each value is at most its predecessor plus the slack."""
    return all(b <= a + slack for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# experiment plumbing
# ---------------------------------------------------------------------------


def _law_args(flat: FlatLaw):
    return (
        flat.r_eff,
        flat.is_large,
        flat.impact_kind,
        flat.impact_p1,
        flat.impact_p2,
        flat.table_offset,
        flat.table_u,
        flat.table_cum,
        flat.rate_per_block,
        flat.cum_prob,
    )


def _compiled_gen(rng: np.random.Generator) -> np.random.Generator:
    seeds = rng.integers(0, 2**32 - 1, size=8).tolist()
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seeds)))


def _finite(values: np.ndarray) -> np.ndarray:
    return values[np.isfinite(values)]


@dataclass(frozen=True)
class PairTimeResult:
    """Gathering and coalescence times of two lineages at one torus size.

    Raw simulation times; inf marks a replicate that hit the horizon
    before the event in question.  ``timescale`` is None when the regime
    has no predicted timescale (then nothing can be normalized).
    """

    L: float
    timescale: Optional[float]
    horizon: float
    gather_small: np.ndarray
    gather_large: np.ndarray
    coalescence: np.ndarray

    _KINDS = ("gather_small", "gather_large", "coalescence")

    @property
    def n_replicates(self) -> int:
        return len(self.coalescence)

    @property
    def timeouts(self) -> int:
        return int(np.sum(~np.isfinite(self.coalescence)))

    @property
    def non_coalescing(self) -> bool:
        """True when not a single replicate coalesced before the horizon."""
        return self.timeouts == self.n_replicates

    def normalized(self, which: str = "coalescence") -> np.ndarray:
        if which not in self._KINDS:
            raise ValueError(f"unknown time kind {which!r}")
        if self.timescale is None:
            raise ValueError("regime has no predicted timescale to normalize by")
        return _finite(getattr(self, which)) / self.timescale

    def ks(self, which: str = "coalescence") -> float:
        """Distance of the normalized times from the unit exponential law."""
        return ks_exponential(self.normalized(which))

    def rows(self) -> List[dict]:
        return [
            {
                "L": self.L,
                "replicate": i,
                "gather_small": float(self.gather_small[i]),
                "gather_large": float(self.gather_large[i]),
                "coalescence": float(self.coalescence[i]),
            }
            for i in range(self.n_replicates)
        ]

    def summary(self) -> dict:
        out = {
            "L": self.L,
            "timescale": self.timescale,
            "horizon": self.horizon,
            "replicates": self.n_replicates,
            "timeouts": self.timeouts,
            "non_coalescing": self.non_coalescing,
        }
        for which in self._KINDS:
            finite = _finite(getattr(self, which))
            if self.timescale is not None and len(finite) >= 10:
                out[f"ks_{which}"] = self.ks(which)
                out[f"mean_normalized_{which}"] = float(finite.mean()) / self.timescale
            else:
                out[f"ks_{which}"] = None
                out[f"mean_normalized_{which}"] = None
        return out


def pair_time_experiment(
    regime: RegimeSpec,
    law: EventLaw,
    L_values: Sequence[float],
    replicates: int,
    rng: np.random.Generator,
    horizon: Optional[float] = None,
    horizon_multiple: float = 30.0,
) -> List[PairTimeResult]:
    """Track a fresh well-separated pair of lineages per replicate.

    The pair evolves until merger or the horizon, which defaults to
    horizon_multiple times the predicted timescale (the mass of a unit
    exponential beyond 30 is about 1e-13, so censoring is negligible).
    An explicit ``horizon`` overrides that and also allows laws with no
    predicted timescale, such as zero-impact ones, to run.
    """
    results = []
    for L in L_values:
        torus = TorusSpec(float(L))
        concrete = regime.law_at(law, torus.L)
        if horizon is None:
            timescale = predicted_timescale(regime, torus.L, law)
            h = horizon_multiple * timescale
        else:
            h = horizon
            try:
                timescale = predicted_timescale(regime, torus.L, law)
            except (UncoveredRegimeError, ValueError):
                timescale = None
        args = _law_args(flatten_law(concrete, torus))
        thr_small = 2.0 * concrete.max_small_radius
        thr_large = (
            2.0 * concrete.psi * concrete.max_large_radius
            if math.isfinite(concrete.rho)
            else 0.0
        )
        sample = SampleConfig(2, "well-separated")
        gather_s = np.empty(replicates)
        gather_l = np.empty(replicates)
        coal = np.empty(replicates)
        for i in range(replicates):
            pts = draw_sample(sample, torus, rng)
            gen = _compiled_gen(rng)
            t_coal, tg_s, tg_l, _acc, _tf = _K.run_pair(
                gen,
                pts[0].x, pts[0].y, pts[1].x, pts[1].y,
                torus.L,
                *args,
                thr_small, thr_large,
                h,
                _K.PAIR_DYNAMICS,
                0,
            )
            gather_s[i], gather_l[i], coal[i] = tg_s, tg_l, t_coal
        results.append(
            PairTimeResult(
                L=torus.L,
                timescale=timescale,
                horizon=h,
                gather_small=gather_s,
                gather_large=gather_l,
                coalescence=coal,
            )
        )
    return results


@dataclass(frozen=True)
class BlockCountResult:
    """Merger times and sizes for an n-lineage sample at one torus size.

    merger_times is (replicates, n-1) with inf padding, merger_sizes the
    matching sizes with zero padding; times are raw simulation units and
    ``timescale`` converts to normalized time (None for regimes without
    a predicted timescale, where only raw times are meaningful).
    """

    n: int
    L: float
    timescale: Optional[float]
    horizon: float
    merger_times: np.ndarray
    merger_sizes: np.ndarray

    @property
    def n_replicates(self) -> int:
        return self.merger_times.shape[0]

    def block_counts_at(self, t: float) -> np.ndarray:
        """Block count of every replicate at normalized time t."""
        if self.timescale is None:
            raise ValueError("no predicted timescale to normalize against")
        done = self.merger_times <= t * self.timescale
        return self.n - (np.where(done, self.merger_sizes - 1, 0)).sum(axis=1)

    def distribution_at(self, t: float) -> Dict[int, float]:
        """Empirical block-count distribution at normalized time t."""
        counts = self.block_counts_at(t)
        return {
            j: float(np.mean(counts == j))
            for j in range(1, self.n + 1)
            if np.any(counts == j)
        }

    def rows(self) -> List[dict]:
        out = []
        for i in range(self.n_replicates):
            row = {"L": self.L, "replicate": i}
            for m in range(self.n - 1):
                row[f"merge_{m + 1}"] = float(self.merger_times[i, m])
                row[f"size_{m + 1}"] = int(self.merger_sizes[i, m])
            out.append(row)
        return out

    def summary(self, times: Sequence[float] = ()) -> dict:
        out = {
            "n": self.n,
            "L": self.L,
            "timescale": self.timescale,
            "horizon": self.horizon,
            "replicates": self.n_replicates,
        }
        curves = {}
        for t in times:
            dist = self.distribution_at(t)
            se = {
                j: math.sqrt(p * (1 - p) / self.n_replicates) for j, p in dist.items()
            }
            curves[repr(float(t))] = {"probability": dist, "se": se}
        out["curves"] = curves
        return out


def block_count_experiment(
    n: int,
    regime: RegimeSpec,
    law: EventLaw,
    L: float,
    replicates: int,
    rng: np.random.Generator,
    horizon: Optional[float] = None,
    horizon_multiple: float = 30.0,
    max_events: int = 10**9,
) -> BlockCountResult:
    """Record every merger of a well-separated n-sample per replicate.

    Two-block runs delegate to the pair simulation so their merger
    times coincide replicate for replicate with pair_time_experiment
    under the same generator state.  An explicit ``horizon`` overrides
    the default multiple of the predicted timescale and lets regimes
    without one run; their times then stay unnormalized.
    """
    if not 2 <= n <= 8:
        raise ValueError(f"sample size must be between 2 and 8, got {n}")
    torus = TorusSpec(float(L))
    concrete = regime.law_at(law, torus.L)
    if horizon is None:
        timescale = predicted_timescale(regime, torus.L, law)
        h = horizon_multiple * timescale
    else:
        h = horizon
        try:
            timescale = predicted_timescale(regime, torus.L, law)
        except (UncoveredRegimeError, ValueError):
            timescale = None
    args = _law_args(flatten_law(concrete, torus))
    sample = SampleConfig(n, "well-separated")
    all_times = np.full((replicates, n - 1), np.inf)
    all_sizes = np.zeros((replicates, n - 1), dtype=np.int64)
    for i in range(replicates):
        pts = draw_sample(sample, torus, rng)
        gen = _compiled_gen(rng)
        if n == 2:
            t_coal, _s, _l, _acc, _tf = _K.run_pair(
                gen,
                pts[0].x, pts[0].y, pts[1].x, pts[1].y,
                torus.L,
                *args,
                0.0, 0.0,
                h,
                _K.PAIR_DYNAMICS,
                0,
            )
            if math.isfinite(t_coal):
                all_times[i, 0] = t_coal
                all_sizes[i, 0] = 2
            continue
        xs = np.array([p.x for p in pts])
        ys = np.array([p.y for p in pts])
        times = np.zeros(n - 1)
        sizes = np.zeros(n - 1, dtype=np.int64)
        nm, _tf, _nc = _K.run_block_counts(
            gen, xs, ys, torus.L, *args, h, max_events, times, sizes
        )
        all_times[i, :nm] = times[:nm]
        all_sizes[i, :nm] = sizes[:nm]
    return BlockCountResult(
        n=n,
        L=torus.L,
        timescale=timescale,
        horizon=h,
        merger_times=all_times,
        merger_sizes=all_sizes,
    )


def limit_block_count_overlay(
    n: int,
    regime_class: RegimeClass,
    times: Sequence[float],
    replicates: int,
    rng: np.random.Generator,
    law: Optional[EventLaw] = None,
) -> Dict[float, Dict[int, float]]:
    """Block-count distribution of the limit process on a normalized grid.

    Sampled from the matching limit coalescent, so the overlay is an
    independent route to the same curves the finite-torus experiment
    estimates.  The spatial kind has no partition-only limit here.
    """
    horizon = max(times)
    paths: List[PartitionPath] = []
    if regime_class.kind.startswith("kingman"):
        for _ in range(replicates):
            paths.append(sample_kingman(n, 1.0, horizon, rng))
    elif regime_class.kind == "multiple-merger":
        if law is None or law.large is None:
            raise ValueError("the multiple-merger overlay needs the large event class")
        for _ in range(replicates):
            paths.append(
                sample_lambda_beta_c(
                    n, regime_class.c, regime_class.beta, law.large, horizon, rng
                )
            )
    else:
        raise ValueError(f"no partition-only overlay for kind {regime_class.kind!r}")
    out: Dict[float, Dict[int, float]] = {}
    for t in times:
        counts = np.array([p.block_count_at(t) for p in paths])
        out[float(t)] = {
            j: float(np.mean(counts == j)) for j in range(1, n + 1) if np.any(counts == j)
        }
    return out


@dataclass(frozen=True)
class FirstMergerResult:
    """First-merger sizes under homogenized positions at one torus size."""

    n: int
    L: float
    sizes: np.ndarray
    expected_frequencies: np.ndarray
    chisq: Optional[float]
    pvalue: Optional[float]
    inconclusive: bool

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.sizes, minlength=self.n + 1)

    @property
    def mergers(self) -> int:
        return int(np.sum(self.sizes >= 2))

    def frequencies(self) -> np.ndarray:
        """Observed merger-size frequencies over sizes 2..n."""
        return self.counts[2:] / self.mergers

    def rows(self) -> List[dict]:
        return [
            {"L": self.L, "replicate": i, "merger_size": int(s)}
            for i, s in enumerate(self.sizes)
        ]

    def summary(self) -> dict:
        return {
            "n": self.n,
            "L": self.L,
            "replicates": len(self.sizes),
            "mergers": self.mergers,
            "observed": self.counts[2:].tolist(),
            "expected_frequencies": self.expected_frequencies.tolist(),
            "chisq": self.chisq,
            "pvalue": self.pvalue,
            "inconclusive": self.inconclusive,
        }


def first_merger_distribution(
    n: int,
    regime: RegimeSpec,
    law: EventLaw,
    L: float,
    replicates: int,
    rng: np.random.Generator,
    max_candidates: int = 10**7,
) -> FirstMergerResult:
    """Size distribution of the first large event to affect 2+ lineages.

    Positions are resampled uniformly before every candidate event: with
    large events much rarer than the L^2 mixing time, the small events
    remix lineage locations completely between candidates.  The observed
    frequencies are chi-square tested against the multiple-merger
    transition quadrature restricted to sizes >= 2; fewer than 100
    observed mergers flag the result inconclusive instead.
    """
    if n < 2:
        raise ValueError(f"need at least two lineages, got {n}")
    if regime.psi is None or law.large is None:
        raise ValueError("first-merger sampling needs a large event class")
    if not (regime.psi.exponent == 1.0 and regime.psi.log_exponent == 0.0):
        raise ValueError("the event scale must grow proportionally to L")
    if not math.isinf(_ratio_limit(regime.rho.coef, regime.rho.exponent - 2, regime.rho.log_exponent)):
        raise ValueError("rho must outgrow L^2 for positions to homogenize")
    c = regime.psi.coef
    torus = TorusSpec(float(L))
    concrete = EventLaw(large=law.large, psi=regime.psi(torus.L), rho=regime.rho(torus.L))
    args = _law_args(flatten_law(concrete, torus))
    sizes = np.zeros(replicates, dtype=np.int64)
    for i in range(replicates):
        gen = _compiled_gen(rng)
        sizes[i] = _K.first_event_merger(gen, n, torus.L, *args, max_candidates)
    return summarize_first_merger(n, torus.L, sizes, first_merger_expected(n, c, law.large))


def first_merger_expected(n: int, c: float, large_class: EventClass) -> np.ndarray:
    """Limit frequencies of merger sizes 2..n, conditioned on a merger."""
    rates = np.array(
        [math.comb(n, k) * lambda_beta_c_rate(n, k, c, 0.0, large_class) for k in range(2, n + 1)]
    )
    return rates / rates.sum()


def summarize_first_merger(
    n: int, L: float, sizes: np.ndarray, expected: np.ndarray
) -> FirstMergerResult:
    """Chi-square the observed merger sizes against the limit frequencies."""
    sizes = np.asarray(sizes, dtype=np.int64)
    observed = np.bincount(sizes, minlength=n + 1)[2:]
    total = int(observed.sum())
    if total < 100:
        chisq = pvalue = None
    else:
        test = stats.chisquare(observed, f_exp=total * expected)
        chisq, pvalue = float(test.statistic), float(test.pvalue)
    return FirstMergerResult(
        n=n,
        L=float(L),
        sizes=sizes,
        expected_frequencies=expected,
        chisq=chisq,
        pvalue=pvalue,
        inconclusive=total < 100,
    )


@dataclass(frozen=True)
class HittingTimeResult:
    """First entrance times of a single lineage into a central ball."""

    L: float
    target_radius: float
    gamma: float
    normalization: float
    horizon: float
    times: np.ndarray
    jumps: np.ndarray

    @property
    def n_replicates(self) -> int:
        return len(self.times)

    @property
    def timeouts(self) -> int:
        return int(np.sum(~np.isfinite(self.times)))

    def normalized(self) -> np.ndarray:
        return _finite(self.times) / self.normalization

    def ks(self) -> float:
        return ks_exponential(self.normalized())

    def rows(self) -> List[dict]:
        return [
            {
                "L": self.L,
                "replicate": i,
                "entrance_time": float(self.times[i]),
                "jumps": int(self.jumps[i]),
            }
            for i in range(self.n_replicates)
        ]

    def summary(self) -> dict:
        finite = _finite(self.times)
        return {
            "L": self.L,
            "target_radius": self.target_radius,
            "gamma": self.gamma,
            "normalization": self.normalization,
            "replicates": self.n_replicates,
            "timeouts": self.timeouts,
            "ks": self.ks() if len(finite) >= 10 else None,
            "mean_normalized": float(finite.mean()) / self.normalization
            if len(finite)
            else None,
        }


def hitting_time_experiment(
    law: EventLaw,
    L_values: Sequence[float],
    target: PowerLaw,
    replicates: int,
    rng: np.random.Generator,
    regime: Optional[RegimeSpec] = None,
    horizon_multiple: float = 30.0,
) -> List[HittingTimeResult]:
    """First entrance of a lineage into B(0, target(L)) from far away.

    Starts are uniform on the torus conditioned on distance at least
    L/log L from the target centre.  Times are normalized by
    (1-gamma) L^2 log L / (pi sigma^2) with sigma^2 the per-coordinate
    lineage variance and gamma the growth exponent of the target radius,
    which must stay below 1.
    """
    gamma = max(target.exponent, 0.0)
    if gamma >= 1:
        raise ValueError(f"target radius must grow slower than L, got exponent {gamma}")
    results = []
    for L in L_values:
        torus = TorusSpec(float(L))
        concrete = regime.law_at(law, torus.L) if regime is not None else law
        d = target(torus.L)
        separation = torus.L / math.log(torus.L)
        if d >= separation:
            raise ValueError(
                f"target radius {d} reaches the separation distance {separation}; "
                "starts could not be placed outside it"
            )
        sigma2 = single_lineage_variance(concrete)
        if sigma2 <= 0:
            raise ValueError("lineage dispersal is zero; no entrance timescale")
        norm = (1 - gamma) * torus.L**2 * math.log(torus.L) / (math.pi * sigma2)
        h = horizon_multiple * norm
        args = _law_args(flatten_law(concrete, torus))
        times = np.empty(replicates)
        jumps = np.empty(replicates, dtype=np.int64)
        origin = canonical_point(0.0, 0.0, torus)
        for i in range(replicates):
            while True:
                start = uniform_on_torus(torus, rng)
                if torus_distance(start, origin, torus) >= separation:
                    break
            gen = _compiled_gen(rng)
            times[i], jumps[i] = _K.single_lineage_entrance(
                gen, start.x, start.y, torus.L, *args, d, h
            )
        results.append(
            HittingTimeResult(
                L=torus.L,
                target_radius=d,
                gamma=gamma,
                normalization=norm,
                horizon=h,
                times=times,
                jumps=jumps,
            )
        )
    return results


@dataclass(frozen=True)
class ShortWindowResult:
    """Frequency of first entrances inside a late, short time window."""

    L: float
    target_radius: float
    window_end: float
    window_length: float
    times: np.ndarray

    @property
    def n_replicates(self) -> int:
        return len(self.times)

    @property
    def in_window(self) -> int:
        lo = self.window_end - self.window_length
        return int(np.sum((self.times >= lo) & (self.times <= self.window_end)))

    @property
    def probability(self) -> float:
        return self.in_window / self.n_replicates

    @property
    def bound_ratio(self) -> Optional[float]:
        """Empirical probability over window_length / L^2; None for an
        empty window."""
        if self.window_length == 0:
            return None
        return self.probability / (self.window_length / self.L**2)

    def rows(self) -> List[dict]:
        return [
            {"L": self.L, "replicate": i, "entrance_time": float(t)}
            for i, t in enumerate(self.times)
        ]

    def summary(self) -> dict:
        return {
            "L": self.L,
            "target_radius": self.target_radius,
            "window_end": self.window_end,
            "window_length": self.window_length,
            "replicates": self.n_replicates,
            "in_window": self.in_window,
            "probability": self.probability,
            "bound_ratio": self.bound_ratio,
        }


def short_window_entrance(
    law: EventLaw,
    L: float,
    target_radius: float,
    window_end: float,
    window_length: float,
    replicates: int,
    rng: np.random.Generator,
) -> ShortWindowResult:
    """How often the first entrance lands in [end - length, end].

    Starts are uniform over the torus, exercising the worst case of a
    bound that holds for every start.  The window must satisfy
    2 * length <= L^2 / sqrt(log L), and the interesting comparisons
    keep end well beyond L^2 so the lineage position has homogenized.
    """
    if target_radius < 0:
        raise ValueError("target radius must be nonnegative")
    if not 0 <= window_length <= window_end:
        raise ValueError("window must satisfy 0 <= length <= end")
    torus = TorusSpec(float(L))
    if 2 * window_length > torus.L**2 / math.sqrt(math.log(torus.L)):
        raise ValueError(
            "window length exceeds L^2 / (2 sqrt(log L)); the bound does not apply"
        )
    args = _law_args(flatten_law(law, torus))
    times = np.empty(replicates)
    for i in range(replicates):
        start = uniform_on_torus(torus, rng)
        gen = _compiled_gen(rng)
        times[i], _ = _K.single_lineage_entrance(
            gen, start.x, start.y, torus.L, *args, target_radius, window_end
        )
    return ShortWindowResult(
        L=torus.L,
        target_radius=target_radius,
        window_end=window_end,
        window_length=window_length,
        times=times,
    )

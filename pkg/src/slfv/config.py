"""Experiment configuration: TOML parsing and whole-file validation.

A config file describes one experiment: the event law, an optional
scaling regime, torus sizes, sampling, replicate count, seed and output
directory, plus a kind-specific parameter table.  load_config collects
every validation failure it can find and reports them all at once, so a
bad file is fixed in one round trip.  The grammar is documented in the
README; see the configs under examples/ for working files.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .coalescent import SampleConfig
from .events import (
    AdmissibilityError,
    EventClass,
    EventLaw,
    ImpactKernel,
    RadiusMeasure,
    check_admissibility,
)
from .validation import (
    PowerLaw,
    RegimeClass,
    RegimeSpec,
    UncoveredRegimeError,
    classify_regime,
)

KINDS = (
    "genealogy",
    "pair-time",
    "block-count",
    "first-merger",
    "hitting-time",
    "short-window",
    "duality",
    "forward-run",
    "limit-sample",
)

# kinds whose sampling is fixed by the experiment itself
_NO_SAMPLE = ("pair-time", "hitting-time", "short-window", "duality", "forward-run")
_MULTI_L = ("pair-time", "hitting-time")

MAX_BALL_FRACTION = 1.0 / math.sqrt(2.0)


class ConfigError(ValueError):
    """Raised with the complete list of problems found in a config."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    """One fully validated experiment description."""

    kind: str
    law: Optional[EventLaw]
    regime: Optional[RegimeSpec]
    regime_class: Optional[RegimeClass]
    L_values: Tuple[float, ...]
    sample: Optional[SampleConfig]
    replicates: int
    seed: int
    output: Path
    params: Dict[str, Any]
    source: Dict[str, Any]

    @property
    def digest(self) -> str:
        """Content hash of the parsed tree, independent of formatting."""
        blob = json.dumps(self.source, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(
        self, seed: Optional[int] = None, output: Optional[Path] = None
    ) -> "ExperimentConfig":
        out = self
        if seed is not None:
            out = replace(out, seed=seed)
        if output is not None:
            out = replace(out, output=Path(output))
        return out


class _Walk:
    """Error-collecting reader over the parsed TOML tree."""

    def __init__(self, tree: Dict[str, Any]):
        self.tree = tree
        self.errors: List[str] = []

    def fail(self, path: str, message: str) -> None:
        self.errors.append(f"{path}: {message}")

    def table(self, parent: Dict[str, Any], path: str, key: str, required: bool = False):
        value = parent.get(key)
        if value is None:
            if required:
                self.fail(path, f"missing required table [{key}]" if "." not in key else "missing")
            return None
        if not isinstance(value, dict):
            self.fail(f"{path}.{key}" if path else key, "expected a table")
            return None
        return value

    def check_keys(self, table: Dict[str, Any], path: str, allowed: Sequence[str]) -> None:
        for key in table:
            if key not in allowed:
                self.fail(f"{path}.{key}", f"unknown key (allowed: {', '.join(sorted(allowed))})")

    def number(self, table, path, key, required=False, default=None, minimum=None, positive=False):
        if key not in table:
            if required:
                self.fail(f"{path}.{key}", "missing required number")
            return default
        value = table[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"{path}.{key}", f"expected a number, got {value!r}")
            return default
        value = float(value)
        if positive and not value > 0:
            self.fail(f"{path}.{key}", f"must be positive, got {value!r}")
            return default
        if minimum is not None and value < minimum:
            self.fail(f"{path}.{key}", f"must be at least {minimum}, got {value!r}")
            return default
        return value

    def integer(self, table, path, key, required=False, default=None, minimum=None):
        if key not in table:
            if required:
                self.fail(f"{path}.{key}", "missing required integer")
            return default
        value = table[key]
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(f"{path}.{key}", f"expected an integer, got {value!r}")
            return default
        if minimum is not None and value < minimum:
            self.fail(f"{path}.{key}", f"must be at least {minimum}, got {value!r}")
            return default
        return value

    def string(self, table, path, key, required=False, default=None, choices=None):
        if key not in table:
            if required:
                self.fail(f"{path}.{key}", "missing required string")
            return default
        value = table[key]
        if not isinstance(value, str):
            self.fail(f"{path}.{key}", f"expected a string, got {value!r}")
            return default
        if choices is not None and value not in choices:
            self.fail(f"{path}.{key}", f"must be one of {', '.join(choices)}; got {value!r}")
            return default
        return value


def _read_power_law(walk: _Walk, table: Dict[str, Any], path: str) -> Optional[PowerLaw]:
    walk.check_keys(table, path, ("coef", "exponent", "log_exponent"))
    coef = walk.number(table, path, "coef", default=1.0)
    exponent = walk.number(table, path, "exponent", default=0.0)
    log_exponent = walk.number(table, path, "log_exponent", default=0.0)
    try:
        return PowerLaw(coef, exponent, log_exponent)
    except ValueError as exc:
        walk.fail(path, str(exc))
        return None


def _read_radius(walk: _Walk, table: Dict[str, Any], path: str) -> Optional[RadiusMeasure]:
    kind = walk.string(table, path, "kind", required=True, choices=("point", "table"))
    if kind == "point":
        walk.check_keys(table, path, ("kind", "r", "weight"))
        r = walk.number(table, path, "r", required=True)
        weight = walk.number(table, path, "weight", default=1.0)
        if r is None:
            return None
        try:
            return RadiusMeasure.point(r, weight)
        except ValueError as exc:
            walk.fail(path, str(exc))
    elif kind == "table":
        walk.check_keys(table, path, ("kind", "grid", "density"))
        grid = table.get("grid")
        density = table.get("density")
        if not isinstance(grid, list) or not isinstance(density, list):
            walk.fail(path, "table measures need 'grid' and 'density' arrays")
            return None
        try:
            return RadiusMeasure.table(grid, density)
        except (ValueError, TypeError) as exc:
            walk.fail(path, str(exc))
    return None


def _read_impact(walk: _Walk, table: Dict[str, Any], path: str) -> Optional[ImpactKernel]:
    kind = walk.string(table, path, "kind", required=True, choices=("delta", "beta", "table"))
    try:
        if kind == "delta":
            walk.check_keys(table, path, ("kind", "u"))
            u = walk.number(table, path, "u", required=True)
            return ImpactKernel.delta(u) if u is not None else None
        if kind == "beta":
            walk.check_keys(table, path, ("kind", "a", "b"))
            a = walk.number(table, path, "a", required=True)
            b = walk.number(table, path, "b", required=True)
            return ImpactKernel.beta(a, b) if a is not None and b is not None else None
        if kind == "table":
            walk.check_keys(table, path, ("kind", "values", "probs"))
            values = table.get("values")
            probs = table.get("probs")
            if not isinstance(values, list) or not isinstance(probs, list):
                walk.fail(path, "table kernels need 'values' and 'probs' arrays")
                return None
            return ImpactKernel.table(values, probs)
    except (ValueError, TypeError) as exc:
        walk.fail(path, str(exc))
    return None


def _read_event_class(
    walk: _Walk, table: Dict[str, Any], path: str, role: str
) -> Optional[EventClass]:
    walk.check_keys(table, path, ("radius", "impact"))
    radius_tbl = walk.table(table, path, "radius", required=True)
    impact_tbl = walk.table(table, path, "impact", required=True)
    radius = _read_radius(walk, radius_tbl, f"{path}.radius") if radius_tbl else None
    impact = _read_impact(walk, impact_tbl, f"{path}.impact") if impact_tbl else None
    if radius is None or impact is None:
        return None
    try:
        cls = EventClass(radius, impact)
        # probe the masses now so the failure names this class, not the law
        check_admissibility(EventLaw(**{role: cls}))
        return cls
    except (ValueError, AdmissibilityError) as exc:
        walk.fail(path, str(exc))
        return None


def _read_law(walk: _Walk) -> Optional[EventLaw]:
    table = walk.table(walk.tree, "", "law")
    if table is None:
        return None
    walk.check_keys(table, "law", ("small", "large", "psi", "rho"))
    small_tbl = walk.table(table, "law", "small")
    large_tbl = walk.table(table, "law", "large")
    small = _read_event_class(walk, small_tbl, "law.small", "small") if small_tbl else None
    large = _read_event_class(walk, large_tbl, "law.large", "large") if large_tbl else None
    psi = walk.number(table, "law", "psi", default=1.0, positive=True)
    rho = walk.number(table, "law", "rho", default=math.inf, positive=True)
    if ("psi" in table or "rho" in table) and "regime" in walk.tree:
        walk.fail("law", "psi/rho fix the scales directly; remove them or the [regime] table")
    if small is None and large is None:
        if "small" in table or "large" in table:
            return None  # class errors already recorded
        walk.fail("law", "needs at least one of [law.small] or [law.large]")
        return None
    try:
        law = EventLaw(small=small, large=large, psi=psi or 1.0, rho=rho if rho is not None else math.inf)
    except ValueError as exc:
        walk.fail("law", str(exc))
        return None
    try:
        check_admissibility(law)
    except AdmissibilityError as exc:
        walk.fail("law", str(exc))
        return None
    return law


def _read_regime(walk: _Walk) -> Optional[RegimeSpec]:
    table = walk.table(walk.tree, "", "regime")
    if table is None:
        return None
    walk.check_keys(table, "regime", ("psi", "rho"))
    psi_tbl = walk.table(table, "regime", "psi", required=True)
    rho_tbl = walk.table(table, "regime", "rho", required=True)
    psi = _read_power_law(walk, psi_tbl, "regime.psi") if psi_tbl else None
    rho = _read_power_law(walk, rho_tbl, "regime.rho") if rho_tbl else None
    if psi is None or rho is None:
        return None
    try:
        return RegimeSpec(psi=psi, rho=rho)
    except ValueError as exc:
        walk.fail("regime", str(exc))
        return None


def _read_sample(walk: _Walk, kind: str) -> Optional[SampleConfig]:
    table = walk.table(walk.tree, "", "sample")
    if table is None:
        if kind in ("genealogy", "block-count", "first-merger", "limit-sample"):
            walk.fail("sample", f"kind {kind!r} needs a [sample] table")
        return None
    if kind in _NO_SAMPLE:
        walk.fail("sample", f"kind {kind!r} fixes its own sampling; remove this table")
        return None
    walk.check_keys(table, "sample", ("n", "placement"))
    n = walk.integer(table, "sample", "n", required=True, minimum=1)
    placement: Union[str, tuple, None] = table.get("placement", "uniform")
    if isinstance(placement, list):
        try:
            placement = tuple(tuple(float(c) for c in p) for p in placement)
        except (TypeError, ValueError):
            walk.fail("sample.placement", "explicit placement must be a list of [x, y] pairs")
            return None
        if any(len(p) != 2 for p in placement):
            walk.fail("sample.placement", "explicit placement must be a list of [x, y] pairs")
            return None
    if n is None or placement is None:
        return None
    if kind in ("block-count", "first-merger") and not isinstance(placement, str):
        walk.fail("sample.placement", f"kind {kind!r} always starts well separated")
        return None
    try:
        return SampleConfig(n, placement)
    except ValueError as exc:
        walk.fail("sample", str(exc))
        return None


def _read_points(walk: _Walk, params: Dict[str, Any], path: str, key: str):
    raw = params.get(key)
    if not isinstance(raw, list) or not raw:
        walk.fail(f"{path}.{key}", "expected a nonempty list of [x, y] pairs")
        return None
    points = []
    for item in raw:
        if not isinstance(item, list) or len(item) != 2 or not all(
            isinstance(c, (int, float)) and not isinstance(c, bool) for c in item
        ):
            walk.fail(f"{path}.{key}", "expected a nonempty list of [x, y] pairs")
            return None
        points.append((float(item[0]), float(item[1])))
    return points


def _validate_params(
    walk: _Walk,
    kind: str,
    law: Optional[EventLaw],
    regime: Optional[RegimeSpec],
    sample: Optional[SampleConfig],
) -> Dict[str, Any]:
    """Check the kind-specific [params] table and return it normalized."""
    table = walk.table(walk.tree, "", "params") or {}
    path = "params"
    out: Dict[str, Any] = {}

    if kind == "genealogy":
        walk.check_keys(table, path, ("horizon", "snap_grid", "max_events", "event_logs"))
        out["horizon"] = walk.number(table, path, "horizon", positive=True)
        out["snap_grid"] = walk.integer(table, path, "snap_grid", minimum=2)
        out["max_events"] = walk.integer(table, path, "max_events", default=10**9, minimum=1)
        event_logs = table.get("event_logs", True)
        if not isinstance(event_logs, bool):
            walk.fail(f"{path}.event_logs", "expected a boolean")
            event_logs = True
        out["event_logs"] = event_logs

    elif kind in ("pair-time", "block-count"):
        walk.check_keys(table, path, ("horizon", "horizon_multiple"))
        out["horizon"] = walk.number(table, path, "horizon", positive=True)
        out["horizon_multiple"] = walk.number(
            table, path, "horizon_multiple", default=30.0, positive=True
        )

    elif kind == "first-merger":
        walk.check_keys(table, path, ("max_candidates",))
        out["max_candidates"] = walk.integer(table, path, "max_candidates", default=10**7, minimum=1)

    elif kind == "hitting-time":
        walk.check_keys(table, path, ("target", "horizon_multiple"))
        target_tbl = walk.table(table, path, "target", required=True)
        out["target"] = _read_power_law(walk, target_tbl, f"{path}.target") if target_tbl else None
        out["horizon_multiple"] = walk.number(
            table, path, "horizon_multiple", default=30.0, positive=True
        )

    elif kind == "short-window":
        walk.check_keys(table, path, ("target_radius", "window_end", "window_length"))
        out["target_radius"] = walk.number(table, path, "target_radius", required=True, minimum=0.0)
        out["window_end"] = walk.number(table, path, "window_end", required=True, positive=True)
        out["window_length"] = walk.number(table, path, "window_length", required=True, minimum=0.0)

    elif kind == "duality":
        walk.check_keys(table, path, ("grid", "t", "points", "types", "initial", "probs", "level"))
        out["grid"] = walk.integer(table, path, "grid", required=True, minimum=2)
        out["t"] = walk.number(table, path, "t", required=True, positive=True)
        out["points"] = _read_points(walk, table, path, "points")
        types = table.get("types")
        if not isinstance(types, list) or not all(
            isinstance(a, int) and not isinstance(a, bool) for a in types or [None]
        ):
            walk.fail(f"{path}.types", "expected a list of type indices")
            types = None
        elif out["points"] is not None and len(types) != len(out["points"]):
            walk.fail(f"{path}.types", "need exactly one type per sample point")
            types = None
        out["types"] = types
        out["initial"] = walk.string(
            table, path, "initial", default="checkerboard", choices=("checkerboard", "constant")
        )
        out["probs"] = table.get("probs")
        out["level"] = walk.number(table, path, "level", default=0.99, positive=True)
        if out["level"] is not None and not out["level"] < 1:
            walk.fail(f"{path}.level", "confidence level must lie in (0, 1)")

    elif kind == "forward-run":
        walk.check_keys(table, path, ("grid", "t", "initial", "probs", "save_fields"))
        out["grid"] = walk.integer(table, path, "grid", required=True, minimum=2)
        out["t"] = walk.number(table, path, "t", required=True, minimum=0.0)
        out["initial"] = walk.string(
            table, path, "initial", default="checkerboard", choices=("checkerboard", "constant")
        )
        out["probs"] = table.get("probs")
        save = table.get("save_fields", True)
        if not isinstance(save, bool):
            walk.fail(f"{path}.save_fields", "expected a boolean")
            save = True
        out["save_fields"] = save

    elif kind == "limit-sample":
        walk.check_keys(
            table, path, ("limit", "horizon", "rate", "c", "beta", "b", "sigma_s2", "positions")
        )
        limit = walk.string(
            table, path, "limit", required=True,
            choices=("kingman", "multiple-merger", "spatial"),
        )
        out["limit"] = limit
        out["horizon"] = walk.number(table, path, "horizon", default=math.inf, positive=True)
        if limit == "kingman":
            out["rate"] = walk.number(table, path, "rate", default=1.0, positive=True)
        elif limit == "multiple-merger":
            out["c"] = walk.number(table, path, "c", required=True, positive=True)
            out["beta"] = walk.number(table, path, "beta", default=0.0, minimum=0.0)
            if law is None or law.large is None:
                walk.fail(path, "the multiple-merger limit needs [law.large]")
        elif limit == "spatial":
            out["b"] = walk.number(table, path, "b", required=True, minimum=0.0)
            out["c"] = walk.number(table, path, "c", required=True, positive=True)
            out["sigma_s2"] = walk.number(table, path, "sigma_s2", required=True, positive=True)
            out["positions"] = _read_points(walk, table, path, "positions")
            if out["positions"] is not None and sample is not None and len(out["positions"]) != sample.n:
                walk.fail(f"{path}.positions", "need exactly sample.n starting positions")
            if law is None or law.large is None:
                walk.fail(path, "the spatial limit needs [law.large]")
            if not math.isfinite(out["horizon"] or math.inf):
                walk.fail(f"{path}.horizon", "the spatial limit needs a finite horizon")

    # probs is shared by the two field initializers
    if kind in ("duality", "forward-run") and out.get("initial") == "constant":
        probs = out.get("probs")
        if not isinstance(probs, list) or not all(
            isinstance(p, (int, float)) and not isinstance(p, bool) for p in probs or [None]
        ):
            walk.fail(f"{path}.probs", "a constant initial field needs a probability vector")
            out["probs"] = None
        else:
            out["probs"] = [float(p) for p in probs]
    elif kind in ("duality", "forward-run") and "probs" in table:
        walk.fail(f"{path}.probs", "only meaningful with initial = 'constant'")

    return out


def _cross_checks(
    walk: _Walk,
    kind: str,
    law: Optional[EventLaw],
    regime: Optional[RegimeSpec],
    L_values: Tuple[float, ...],
    params: Dict[str, Any],
) -> Optional[RegimeClass]:
    """Constraints that couple law, regime, kind and torus sizes."""
    if law is None and "law" not in walk.tree and kind != "limit-sample":
        walk.fail("law", f"kind {kind!r} needs a [law] table")

    if kind == "limit-sample":
        if regime is not None:
            walk.fail("regime", "limit-sample draws from the limit directly; remove this table")
        if L_values:
            walk.fail("experiment.L", "limit-sample runs on the unit torus; remove L")
        return None

    if not L_values:
        walk.fail("experiment.L", "missing required torus size(s)")
    elif len(L_values) > 1 and kind not in _MULTI_L:
        walk.fail("experiment.L", f"kind {kind!r} takes a single torus size")

    if regime is not None and law is not None and law.large is None:
        walk.fail("regime", "a scaling regime needs [law.large] to scale")
        return None

    if regime is not None and regime.alpha == 1.0 and law is not None and law.large is not None:
        reach = regime.psi.coef * law.max_large_radius
        if reach > MAX_BALL_FRACTION + 1e-12:
            walk.fail(
                "regime",
                "large events must fit the torus: the relative radius "
                f"{reach:g} exceeds 1/sqrt(2) when the event scale grows like L",
            )
            return None

    effective = regime
    if effective is None and law is not None and law.large is None:
        effective = RegimeSpec.small_only()

    if kind in ("pair-time", "block-count", "first-merger") and effective is None:
        walk.fail(
            "regime",
            f"kind {kind!r} needs a [regime] table when the law has a large class",
        )
        return None

    regime_class: Optional[RegimeClass] = None
    if effective is not None and law is not None:
        try:
            regime_class = classify_regime(effective, law)
        except UncoveredRegimeError as exc:
            if kind in ("pair-time", "block-count") and params.get("horizon") is None:
                walk.fail(
                    "regime",
                    f"{exc}; uncovered regimes run exploratory only, set params.horizon",
                )

    if kind == "first-merger" and effective is not None and law is not None:
        if law.large is None:
            walk.fail("law", "first-merger sampling needs a large event class")
        elif not (effective.psi is not None and effective.psi.exponent == 1.0
                  and effective.psi.log_exponent == 0.0):
            walk.fail("regime.psi", "first-merger sampling needs the event scale to grow like L")

    return regime_class


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Parse and validate a config file, reporting every problem found."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    try:
        tree = tomllib.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError([f"{path}: parse error: {exc}"]) from exc
    return validate_tree(tree)


def validate_tree(tree: Dict[str, Any]) -> ExperimentConfig:
    """Validate an already-parsed config tree (see load_config)."""
    walk = _Walk(tree)
    walk.check_keys(tree, "", ("experiment", "law", "regime", "sample", "params"))

    exp = walk.table(tree, "", "experiment", required=True) or {}
    walk.check_keys(exp, "experiment", ("kind", "L", "replicates", "seed", "output"))
    kind = walk.string(exp, "experiment", "kind", required=True, choices=KINDS)
    replicates = walk.integer(exp, "experiment", "replicates", required=True, minimum=0)
    seed = walk.integer(exp, "experiment", "seed", default=0, minimum=0)
    output = walk.string(exp, "experiment", "output", default=f"artifact-{kind or 'run'}")

    L_raw = exp.get("L")
    L_values: Tuple[float, ...] = ()
    if isinstance(L_raw, list):
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) and v > 1 for v in L_raw) and L_raw:
            L_values = tuple(float(v) for v in L_raw)
        else:
            walk.fail("experiment.L", "every torus size must be a number above 1")
    elif isinstance(L_raw, (int, float)) and not isinstance(L_raw, bool):
        if L_raw > 1:
            L_values = (float(L_raw),)
        else:
            walk.fail("experiment.L", "every torus size must be a number above 1")
    elif L_raw is not None:
        walk.fail("experiment.L", "expected a number or a list of numbers")

    if kind is None:
        raise ConfigError(walk.errors)

    law = _read_law(walk)
    regime = _read_regime(walk)
    sample = _read_sample(walk, kind)
    params = _validate_params(walk, kind, law, regime, sample)
    regime_class = _cross_checks(walk, kind, law, regime, L_values, params)

    if kind == "block-count" and sample is not None and not 2 <= sample.n <= 8:
        walk.fail("sample.n", "block-count runs between 2 and 8 lineages")
    if kind == "first-merger" and sample is not None and sample.n < 2:
        walk.fail("sample.n", "first-merger sampling needs at least two lineages")
    if kind == "limit-sample" and sample is not None:
        if params.get("limit") == "spatial" and params.get("positions") is None:
            walk.fail("params.positions", "the spatial limit needs explicit starting positions")

    if walk.errors:
        raise ConfigError(walk.errors)
    return ExperimentConfig(
        kind=kind,
        law=law,
        regime=regime,
        regime_class=regime_class,
        L_values=L_values,
        sample=sample,
        replicates=int(replicates),
        seed=int(seed),
        output=Path(output),
        params=params,
        source=tree,
    )

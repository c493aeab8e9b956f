"""Experiment orchestration: seeding, fan-out, persistence, plot data.

run() turns a validated config into an artifact directory holding a
rows.csv (one row per replicate), a summary.json, any per-replicate
side files (event logs, field grids) and a manifest that content-hashes
everything.  Each replicate draws its randomness from a counter-based
stream keyed by (root seed, torus index, replicate index), so outputs
are byte-identical for a given config and seed no matter how many
worker threads run or whether the run was interrupted and resumed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import __version__
from .coalescent import CoalescenceTimeout, simulate_genealogy, write_event_log
from .config import ExperimentConfig
from .events import EventLaw
from .forward import (
    DualityReport,
    TypeField,
    confidence_interval,
    duality_check,
    run_forward,
    write_field_binary,
)
from .geometry import TorusSpec
from .limits import sample_kingman, sample_lambda_beta_c, sample_spatial_limit
from .validation import (
    RegimeSpec,
    block_count_experiment,
    first_merger_distribution,
    first_merger_expected,
    hitting_time_experiment,
    pair_time_experiment,
    short_window_entrance,
    summarize_first_merger,
)

ROWS_NAME = "rows.csv"
SUMMARY_NAME = "summary.json"
MANIFEST_NAME = "manifest.json"

PLOT_VIEWS = ("survival", "ks-trend", "block-count", "merger-hist")

# normalized times at which block-count summaries tabulate the curve
_CURVE_TIMES = (0.1, 0.2, 0.3, 0.5, 0.75, 1.0)


class PlotDataError(ValueError):
    """The requested view does not apply to the artifact's experiment."""


def replicate_generator(seed: int, experiment: int, index: int) -> np.random.Generator:
    """The stream for one replicate, identical however work is scheduled."""
    ss = np.random.SeedSequence(seed, spawn_key=(experiment, index))
    return np.random.Generator(np.random.Philox(ss))


def _effective_regime(config: ExperimentConfig) -> RegimeSpec:
    return config.regime if config.regime is not None else RegimeSpec.small_only()


def _concrete_law(config: ExperimentConfig, L: float) -> EventLaw:
    if config.regime is not None:
        return config.regime.law_at(config.law, L)
    return config.law


def _initial_field(torus: TorusSpec, params: Dict[str, Any]) -> TypeField:
    if params["initial"] == "constant":
        return TypeField.constant(torus, params["grid"], params["probs"])
    return TypeField.checkerboard(torus, params["grid"])


def fieldnames(config: ExperimentConfig) -> List[str]:
    """CSV schema of rows.csv for the given experiment."""
    kind = config.kind
    base = {
        "genealogy": ["L", "replicate", "status", "events", "final_blocks", "elapsed"],
        "pair-time": ["L", "replicate", "gather_small", "gather_large", "coalescence"],
        "first-merger": ["L", "replicate", "merger_size"],
        "hitting-time": ["L", "replicate", "entrance_time", "jumps"],
        "short-window": ["L", "replicate", "entrance_time"],
        "duality": ["L", "replicate", "forward_moment", "dual_moment"],
    }
    if kind in base:
        return base[kind]
    if kind == "block-count":
        merge = [c for m in range(1, config.sample.n) for c in (f"merge_{m}", f"size_{m}")]
        return ["L", "replicate"] + merge
    if kind == "limit-sample":
        merge = [c for m in range(1, config.sample.n) for c in (f"merge_{m}", f"size_{m}")]
        return ["replicate"] + merge + ["final_blocks"]
    if kind == "forward-run":
        k = 2 if config.params["initial"] == "checkerboard" else len(config.params["probs"])
        return ["L", "replicate", "t"] + [f"mean_{i}" for i in range(k)]
    raise ValueError(f"unknown experiment kind {config.kind!r}")


# ---------------------------------------------------------------------------
# per-replicate workers: pure functions of (config, L, torus index, replicate)
# ---------------------------------------------------------------------------

_RowsAndFiles = Tuple[List[dict], Dict[str, bytes]]


def _run_genealogy(config, L, exp, rep) -> _RowsAndFiles:
    gen = replicate_generator(config.seed, exp, rep)
    p = config.params
    row: Dict[str, Any] = {"L": L, "replicate": rep}
    files: Dict[str, bytes] = {}
    try:
        record = simulate_genealogy(
            config.sample,
            _concrete_law(config, L),
            TorusSpec(L),
            p["horizon"],
            gen,
            snap_grid=p["snap_grid"],
            max_events=p["max_events"],
        )
    except CoalescenceTimeout:
        row.update(status="timeout", events="", final_blocks="", elapsed="")
        return [row], files
    row.update(
        status="ok",
        events=len(record.events),
        final_blocks=len(record.final.blocks),
        elapsed=record.elapsed,
    )
    if p["event_logs"]:
        buf = io.StringIO()
        write_event_log(record, buf)
        files[f"events_r{rep}.jsonl"] = buf.getvalue().encode()
    return [row], files


def _run_pair_time(config, L, exp, rep) -> _RowsAndFiles:
    gen = replicate_generator(config.seed, exp, rep)
    (result,) = pair_time_experiment(
        _effective_regime(config),
        config.law,
        [L],
        1,
        gen,
        horizon=config.params["horizon"],
        horizon_multiple=config.params["horizon_multiple"],
    )
    row = result.rows()[0]
    row["replicate"] = rep
    return [row], {}


def _run_block_count(config, L, exp, rep) -> _RowsAndFiles:
    gen = replicate_generator(config.seed, exp, rep)
    result = block_count_experiment(
        config.sample.n,
        _effective_regime(config),
        config.law,
        L,
        1,
        gen,
        horizon=config.params["horizon"],
        horizon_multiple=config.params["horizon_multiple"],
    )
    row = result.rows()[0]
    row["replicate"] = rep
    return [row], {}


def _run_first_merger(config, L, exp, rep) -> _RowsAndFiles:
    gen = replicate_generator(config.seed, exp, rep)
    result = first_merger_distribution(
        config.sample.n,
        _effective_regime(config),
        config.law,
        L,
        1,
        gen,
        max_candidates=config.params["max_candidates"],
    )
    row = result.rows()[0]
    row["replicate"] = rep
    return [row], {}


def _run_hitting_time(config, L, exp, rep) -> _RowsAndFiles:
    gen = replicate_generator(config.seed, exp, rep)
    (result,) = hitting_time_experiment(
        config.law,
        [L],
        config.params["target"],
        1,
        gen,
        regime=config.regime,
        horizon_multiple=config.params["horizon_multiple"],
    )
    row = result.rows()[0]
    row["replicate"] = rep
    return [row], {}


def _run_short_window(config, L, exp, rep) -> _RowsAndFiles:
    gen = replicate_generator(config.seed, exp, rep)
    p = config.params
    result = short_window_entrance(
        _concrete_law(config, L),
        L,
        p["target_radius"],
        p["window_end"],
        p["window_length"],
        1,
        gen,
    )
    row = result.rows()[0]
    row["replicate"] = rep
    return [row], {}


def _run_duality(config, L, exp, rep) -> _RowsAndFiles:
    gen = replicate_generator(config.seed, exp, rep)
    p = config.params
    torus = TorusSpec(L)
    report = duality_check(
        _initial_field(torus, p),
        p["points"],
        p["types"],
        p["t"],
        _concrete_law(config, L),
        torus,
        1,
        gen,
        level=p["level"],
    )
    row = {
        "L": L,
        "replicate": rep,
        "forward_moment": report.forward_moment,
        "dual_moment": report.dual_moment,
    }
    return [row], {}


def _run_forward_run(config, L, exp, rep) -> _RowsAndFiles:
    gen = replicate_generator(config.seed, exp, rep)
    p = config.params
    torus = TorusSpec(L)
    field = run_forward(_initial_field(torus, p), _concrete_law(config, L), torus, p["t"], gen)
    means = field.values.mean(axis=(0, 1))
    row = {"L": L, "replicate": rep, "t": p["t"]}
    row.update({f"mean_{i}": float(m) for i, m in enumerate(means)})
    files: Dict[str, bytes] = {}
    if p["save_fields"]:
        buf = io.BytesIO()
        write_field_binary(field, buf)
        files[f"field_r{rep}.bin"] = buf.getvalue()
    return [row], files


def _run_limit_sample(config, L, exp, rep) -> _RowsAndFiles:
    gen = replicate_generator(config.seed, exp, rep)
    p = config.params
    n = config.sample.n
    if p["limit"] == "kingman":
        path = sample_kingman(n, p["rate"], p["horizon"], gen)
    elif p["limit"] == "multiple-merger":
        path = sample_lambda_beta_c(n, p["c"], p["beta"], config.law.large, p["horizon"], gen)
    else:
        path = sample_spatial_limit(
            n, p["positions"], p["b"], p["c"], config.law.large, p["sigma_s2"], p["horizon"], gen
        )
    row: Dict[str, Any] = {"replicate": rep}
    counts = [len(s.blocks) for s in path.states]
    times = [s.time for s in path.states]
    k = 0
    for i in range(1, len(counts)):
        drop = counts[i - 1] - counts[i]
        if drop > 0:
            k += 1
            row[f"merge_{k}"] = times[i]
            row[f"size_{k}"] = drop + 1
    for m in range(k + 1, n):
        row[f"merge_{m}"] = math.inf
        row[f"size_{m}"] = 0
    row["final_blocks"] = counts[-1]
    return [row], {}


_WORKERS = {
    "genealogy": _run_genealogy,
    "pair-time": _run_pair_time,
    "block-count": _run_block_count,
    "first-merger": _run_first_merger,
    "hitting-time": _run_hitting_time,
    "short-window": _run_short_window,
    "duality": _run_duality,
    "forward-run": _run_forward_run,
    "limit-sample": _run_limit_sample,
}


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def _torus_sizes(config: ExperimentConfig) -> Tuple[Optional[float], ...]:
    return config.L_values or (None,)


def _resume_count(path: Path, header: str) -> int:
    """Rows already on disk, after dropping any torn final line."""
    data = path.read_bytes()
    if not data.endswith(b"\n"):
        cut = data.rfind(b"\n")
        data = data[: cut + 1] if cut >= 0 else b""
        path.write_bytes(data)
    lines = data.decode("utf-8").splitlines()
    if not lines:
        return -1  # missing header: start over
    if lines[0] != header:
        raise RuntimeError(
            f"{path} was written with different columns; refusing to resume"
        )
    return len(lines) - 1


def run(config: ExperimentConfig, threads: int = 1, resume: bool = False) -> Path:
    """Execute every replicate and assemble the artifact directory."""
    if threads < 1:
        raise ValueError("threads must be at least 1")
    started = time.monotonic()
    out = config.output
    out.mkdir(parents=True, exist_ok=True)
    sizes = _torus_sizes(config)
    columns = fieldnames(config)
    header = ",".join(columns)
    worker = _WORKERS[config.kind]

    tasks = [
        (exp, rep) for exp in range(len(sizes)) for rep in range(config.replicates)
    ]
    rows_path = out / ROWS_NAME
    done = 0
    if config.replicates > 0:
        if resume and rows_path.exists():
            done = _resume_count(rows_path, header)
        if done <= 0:
            rows_path.write_text(header + "\n")
            done = 0

        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {
                i: pool.submit(worker, config, sizes[exp], exp, rep)
                for i, (exp, rep) in enumerate(tasks)
                if i >= done
            }
            with rows_path.open("a", newline="") as fp:
                writer = csv.DictWriter(fp, fieldnames=columns, lineterminator="\n")
                for i in sorted(futures):
                    rows, files = futures[i].result()
                    for name, blob in files.items():
                        (out / name).write_bytes(blob)
                    writer.writerows(rows)
                    fp.flush()

        summary = _summarize(config, _read_rows(rows_path))
        with (out / SUMMARY_NAME).open("w") as fp:
            json.dump(summary, fp, indent=2, sort_keys=True)
            fp.write("\n")

    _write_manifest(config, out, columns, threads, time.monotonic() - started)
    return out


def _write_manifest(config, out: Path, columns, threads, wall_time) -> None:
    files = {}
    for child in sorted(out.iterdir()):
        if child.name == MANIFEST_NAME or not child.is_file():
            continue
        files[child.name] = hashlib.sha256(child.read_bytes()).hexdigest()
    manifest = {
        "kind": config.kind,
        "config_sha256": config.digest,
        "seed": config.seed,
        "version": __version__,
        "threads": threads,
        "replicates": config.replicates,
        "L_values": list(config.L_values),
        "columns": columns,
        "wall_time_s": wall_time,
        "files": files,
    }
    with (out / MANIFEST_NAME).open("w") as fp:
        json.dump(manifest, fp, indent=2, sort_keys=True)
        fp.write("\n")


def _read_rows(path: Path) -> List[Dict[str, str]]:
    with path.open(newline="") as fp:
        return list(csv.DictReader(fp))


def _column(rows: Iterable[Dict[str, str]], name: str) -> np.ndarray:
    return np.array([float(r[name]) for r in rows])


def _by_L(rows: Sequence[Dict[str, str]], L: float) -> List[Dict[str, str]]:
    return [r for r in rows if float(r["L"]) == L]


def _summarize(config: ExperimentConfig, rows: List[Dict[str, str]]) -> dict:
    """Rebuild per-experiment statistics from the persisted rows."""
    kind = config.kind
    p = config.params
    results: List[dict] = []
    rng0 = np.random.default_rng(0)  # templates run zero replicates

    if kind == "pair-time":
        for L in config.L_values:
            (template,) = pair_time_experiment(
                _effective_regime(config), config.law, [L], 0, rng0,
                horizon=p["horizon"], horizon_multiple=p["horizon_multiple"],
            )
            sub = _by_L(rows, L)
            result = replace(
                template,
                gather_small=_column(sub, "gather_small"),
                gather_large=_column(sub, "gather_large"),
                coalescence=_column(sub, "coalescence"),
            )
            results.append(result.summary())

    elif kind == "block-count":
        n = config.sample.n
        L = config.L_values[0]
        template = block_count_experiment(
            n, _effective_regime(config), config.law, L, 0, rng0,
            horizon=p["horizon"], horizon_multiple=p["horizon_multiple"],
        )
        times = np.array([[float(r[f"merge_{m}"]) for m in range(1, n)] for r in rows])
        merged = np.array(
            [[int(r[f"size_{m}"]) for m in range(1, n)] for r in rows], dtype=np.int64
        )
        result = replace(template, merger_times=times, merger_sizes=merged)
        curve_times = _CURVE_TIMES if result.timescale is not None else ()
        results.append(result.summary(times=curve_times))

    elif kind == "first-merger":
        n = config.sample.n
        L = config.L_values[0]
        sizes = np.array([int(r["merger_size"]) for r in rows], dtype=np.int64)
        expected = first_merger_expected(n, config.regime.psi.coef, config.law.large)
        results.append(summarize_first_merger(n, L, sizes, expected).summary())

    elif kind == "hitting-time":
        for L in config.L_values:
            (template,) = hitting_time_experiment(
                config.law, [L], p["target"], 0, rng0,
                regime=config.regime, horizon_multiple=p["horizon_multiple"],
            )
            sub = _by_L(rows, L)
            result = replace(
                template,
                times=_column(sub, "entrance_time"),
                jumps=np.array([int(r["jumps"]) for r in sub], dtype=np.int64),
            )
            results.append(result.summary())

    elif kind == "short-window":
        L = config.L_values[0]
        template = short_window_entrance(
            _concrete_law(config, L), L,
            p["target_radius"], p["window_end"], p["window_length"], 0, rng0,
        )
        results.append(replace(template, times=_column(rows, "entrance_time")).summary())

    elif kind == "duality":
        fwd = _column(rows, "forward_moment")
        dual = _column(rows, "dual_moment")
        report = DualityReport(
            forward_moment=float(fwd.mean()),
            dual_moment=float(dual.mean()),
            forward_ci=confidence_interval(fwd, p["level"]),
            dual_ci=confidence_interval(dual, p["level"]),
            level=p["level"],
            replicates=len(rows),
        )
        results.append(
            {
                "L": config.L_values[0],
                "t": p["t"],
                "replicates": report.replicates,
                "forward_moment": report.forward_moment,
                "dual_moment": report.dual_moment,
                "forward_ci": [float(v) for v in report.forward_ci],
                "dual_ci": [float(v) for v in report.dual_ci],
                "level": report.level,
                "overlapping": bool(report.overlapping),
            }
        )

    elif kind == "genealogy":
        ok = [r for r in rows if r["status"] == "ok"]
        results.append(
            {
                "L": config.L_values[0],
                "replicates": len(rows),
                "timeouts": len(rows) - len(ok),
                "mean_events": float(np.mean([float(r["events"]) for r in ok])) if ok else None,
                "mean_final_blocks": float(np.mean([float(r["final_blocks"]) for r in ok]))
                if ok
                else None,
            }
        )

    elif kind == "forward-run":
        k = 2 if p["initial"] == "checkerboard" else len(p["probs"])
        results.append(
            {
                "L": config.L_values[0],
                "t": p["t"],
                "replicates": len(rows),
                "mean_frequencies": [float(_column(rows, f"mean_{i}").mean()) for i in range(k)],
            }
        )

    elif kind == "limit-sample":
        final = np.array([int(r["final_blocks"]) for r in rows])
        results.append(
            {
                "limit": p["limit"],
                "replicates": len(rows),
                "mean_final_blocks": float(final.mean()),
                "fully_coalesced": int(np.sum(final == 1)),
            }
        )

    return {"kind": kind, "results": results}


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------


def _load_artifact(artifact: Union[str, Path]) -> Tuple[dict, List[Dict[str, str]], Optional[dict]]:
    artifact = Path(artifact)
    manifest_path = artifact / MANIFEST_NAME
    if not manifest_path.exists():
        raise PlotDataError(f"{artifact} has no {MANIFEST_NAME}; run the experiment first")
    manifest = json.loads(manifest_path.read_text())
    rows_path = artifact / ROWS_NAME
    rows = _read_rows(rows_path) if rows_path.exists() else []
    summary_path = artifact / SUMMARY_NAME
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else None
    return manifest, rows, summary


def _require_kind(view: str, kind: str, allowed: Tuple[str, ...]) -> None:
    if kind not in allowed:
        raise PlotDataError(
            f"view {view!r} needs a {' or '.join(allowed)} artifact, got {kind!r}"
        )


_TIME_COLUMN = {"pair-time": "coalescence", "hitting-time": "entrance_time"}
_SCALE_KEY = {"pair-time": "timescale", "hitting-time": "normalization"}
_KS_KEY = {"pair-time": "ks_coalescence", "hitting-time": "ks"}


def emit_plotdata(
    artifact: Union[str, Path], view: str, out_path: Optional[Path] = None
) -> Path:
    """Write one tidy CSV for the requested view and hash it into the manifest."""
    artifact = Path(artifact)
    manifest, rows, summary = _load_artifact(artifact)
    kind = manifest["kind"]
    if view not in PLOT_VIEWS:
        raise PlotDataError(f"unknown view {view!r}; choose from {', '.join(PLOT_VIEWS)}")
    target = Path(out_path) if out_path else artifact / f"plot_{view.replace('-', '_')}.csv"

    lines: List[str] = []
    if view == "survival":
        _require_kind(view, kind, ("pair-time", "hitting-time"))
        lines.append("L,t_normalized,empirical_survival,exp_minus_t")
        for entry in (summary or {}).get("results", []):
            scale = entry[_SCALE_KEY[kind]]
            if scale is None:
                continue
            sub = _by_L(rows, entry["L"])
            values = _column(sub, _TIME_COLUMN[kind])
            normalized = np.sort(values[np.isfinite(values)]) / scale
            n = len(values)
            for j, t in enumerate(normalized.tolist()):
                lines.append(
                    f"{entry['L']!r},{t!r},{(n - j - 1) / n!r},{math.exp(-t)!r}"
                )

    elif view == "ks-trend":
        _require_kind(view, kind, ("pair-time", "hitting-time"))
        lines.append("L,ks_stat,n_replicates")
        for entry in (summary or {}).get("results", []):
            ks = entry[_KS_KEY[kind]]
            if ks is None:
                continue
            lines.append(f"{entry['L']!r},{ks!r},{entry['replicates']}")

    elif view == "block-count":
        _require_kind(view, kind, ("block-count",))
        lines.append("L,t_normalized,block_count,probability")
        entry = (summary or {}).get("results", [None])[0]
        if rows and entry is not None:
            if entry["timescale"] is None:
                raise PlotDataError("no predicted timescale; block-count view unavailable")
            n = entry["n"]
            times = np.array(
                [[float(r[f"merge_{m}"]) for m in range(1, n)] for r in rows]
            )
            sizes = np.array(
                [[int(r[f"size_{m}"]) for m in range(1, n)] for r in rows]
            )
            grid = np.arange(0.0, 2.0001, 0.05)
            for t in grid:
                done = times <= t * entry["timescale"]
                counts = n - np.where(done, sizes - 1, 0).sum(axis=1)
                for j in range(1, n + 1):
                    prob = float(np.mean(counts == j))
                    if prob > 0:
                        lines.append(f"{entry['L']!r},{float(t)!r},{j},{prob!r}")

    elif view == "merger-hist":
        _require_kind(view, kind, ("first-merger",))
        lines.append("L,merger_size,count,frequency,expected_frequency")
        entry = (summary or {}).get("results", [None])[0]
        if entry is not None:
            observed = entry["observed"]
            total = sum(observed) or 1
            for j, (count, expected) in enumerate(
                zip(observed, entry["expected_frequencies"]), start=2
            ):
                lines.append(
                    f"{entry['L']!r},{j},{count},{count / total!r},{expected!r}"
                )

    target.write_text("\n".join(lines) + "\n")
    if target.parent.resolve() == artifact.resolve():
        manifest["files"][target.name] = hashlib.sha256(target.read_bytes()).hexdigest()
        with (artifact / MANIFEST_NAME).open("w") as fp:
            json.dump(manifest, fp, indent=2, sort_keys=True)
            fp.write("\n")
    return target

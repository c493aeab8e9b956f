"""Compiled event-loop kernels shared by the simulators.

Everything here operates on the flattened law arrays produced by
``slfv.events.flatten_law`` and a per-replicate ``numpy.random.Generator``.
Candidate events are generated by exact thinning: each tracked block
contributes a candidate rate equal to the effective ball area times the
atom weight over the rate divisor; a candidate picks its radius atom
from the size-biased table, a block uniformly, a centre uniformly in the
ball around that block's label, and is accepted with probability one
over the number of labels the ball covers.  Accepted events are then
distributed exactly like the restriction of the driving Poisson process
to events that cover at least one label.
"""

import numpy as np
from numba import njit

INF = np.inf

# stop modes of run_pair
PAIR_DYNAMICS = 0
PAIR_FROZEN_HAZARD = 1
PAIR_FROZEN_COUNT = 2


@njit(inline="always")
def _wrap(d, L):
    """Signed minimal-image offset for one coordinate difference."""
    return d - L * np.round(d / L)


@njit(inline="always")
def _canon(x, L):
    """Canonical representative of one coordinate in [-L/2, L/2)."""
    w = x - L * np.floor(x / L + 0.5)
    if w >= 0.5 * L:
        w -= L
    return w


@njit(inline="always")
def _wdist2(ax, ay, bx, by, L):
    dx = _wrap(ax - bx, L)
    dy = _wrap(ay - by, L)
    return dx * dx + dy * dy


@njit(inline="always")
def _draw_center(gen, bx, by, r, L):
    """Uniform point of the torus ball B((bx, by), r), canonical coords."""
    if r <= 0.5 * L:
        while True:
            dx = (2.0 * gen.random() - 1.0) * r
            dy = (2.0 * gen.random() - 1.0) * r
            if dx * dx + dy * dy <= r * r:
                return _canon(bx + dx, L), _canon(by + dy, L)
    r2 = r * r
    while True:
        cx = (gen.random() - 0.5) * L
        cy = (gen.random() - 0.5) * L
        if _wdist2(cx, cy, bx, by, L) <= r2:
            return cx, cy


@njit(inline="always")
def _pick_atom(gen, cum_prob):
    return np.searchsorted(cum_prob, gen.random())


@njit(inline="always")
def _draw_impact(gen, j, impact_kind, p1, p2, toff, tu, tcum):
    if impact_kind[j] == 0:
        return p1[j]
    if impact_kind[j] == 1:
        return gen.beta(p1[j], p2[j])
    lo = toff[j]
    hi = toff[j + 1]
    v = gen.random()
    for i in range(lo, hi):
        if v <= tcum[i]:
            return tu[i]
    return tu[hi - 1]


@njit(cache=True, nogil=True)
def run_pair(
    gen,
    x1, y1, x2, y2,
    L,
    r_eff, is_large, impact_kind, p1, p2, toff, tu, tcum,
    rate_per_block, cum_prob,
    thr_small, thr_large,
    horizon,
    mode,
    count_target,
):
    """Evolve two lineages until merger, horizon, or a frozen-mode stop.

    Returns (t_coal, t_gather_small, t_gather_large, n_accepted, t_final).
    Gathering times are the first times the pair distance drops to the
    given thresholds (0 when already inside at the start, inf when never).
    In frozen modes the labels never move: mode 1 stops at the first
    event affecting both (hazard trials), mode 2 stops after
    count_target accepted events (coverage-rate trials).
    """
    t = 0.0
    n_acc = 0
    t_coal = INF
    d2 = _wdist2(x1, y1, x2, y2, L)
    tg_s = 0.0 if d2 <= thr_small * thr_small else INF
    tg_l = 0.0 if d2 <= thr_large * thr_large else INF
    total_rate = 2.0 * rate_per_block
    while True:
        t += gen.exponential(1.0) / total_rate
        if t > horizon:
            return t_coal, tg_s, tg_l, n_acc, horizon
        j = _pick_atom(gen, cum_prob)
        r = r_eff[j]
        if gen.random() < 0.5:
            cx, cy = _draw_center(gen, x1, y1, r, L)
        else:
            cx, cy = _draw_center(gen, x2, y2, r, L)
        r2 = r * r
        c1 = _wdist2(x1, y1, cx, cy, L) <= r2
        c2 = _wdist2(x2, y2, cx, cy, L) <= r2
        cnt = (1 if c1 else 0) + (1 if c2 else 0)
        if cnt == 2 and gen.random() >= 0.5:
            continue
        n_acc += 1
        if mode == PAIR_FROZEN_COUNT:
            if n_acc >= count_target:
                return t_coal, tg_s, tg_l, n_acc, t
            continue
        u = _draw_impact(gen, j, impact_kind, p1, p2, toff, tu, tcum)
        a1 = c1 and gen.random() < u
        a2 = c2 and gen.random() < u
        if mode == PAIR_FROZEN_HAZARD:
            if a1 and a2:
                return t, tg_s, tg_l, n_acc, t
            continue
        if a1 and a2:
            return t, tg_s, tg_l, n_acc, t
        if a1 or a2:
            zx, zy = _draw_center(gen, cx, cy, r, L)
            if a1:
                x1, y1 = zx, zy
            else:
                x2, y2 = zx, zy
            d2 = _wdist2(x1, y1, x2, y2, L)
            if tg_s == INF and d2 <= thr_small * thr_small:
                tg_s = t
            if tg_l == INF and d2 <= thr_large * thr_large:
                tg_l = t
    return t_coal, tg_s, tg_l, n_acc, t


@njit(cache=True, nogil=True)
def run_block_counts(
    gen,
    xs, ys,
    L,
    r_eff, is_large, impact_kind, p1, p2, toff, tu, tcum,
    rate_per_block, cum_prob,
    horizon,
    max_events,
    merger_times, merger_sizes,
):
    """Evolve n labelled blocks, recording every merger time and size.

    xs, ys hold the n initial labels and are modified in place; the
    leading k entries always hold the current block labels.  Returns
    (n_mergers, final_time, n_candidates); merger_times/merger_sizes
    must have length n-1.
    """
    n = len(xs)
    k = n
    t = 0.0
    nm = 0
    n_cand = 0
    affected = np.empty(n, dtype=np.int64)
    while k > 1:
        t += gen.exponential(1.0) / (k * rate_per_block)
        if t > horizon:
            return nm, horizon, n_cand
        n_cand += 1
        if n_cand > max_events:
            return nm, t, n_cand
        j = _pick_atom(gen, cum_prob)
        r = r_eff[j]
        b = gen.integers(0, k)
        cx, cy = _draw_center(gen, xs[b], ys[b], r, L)
        r2 = r * r
        cnt = 0
        for i in range(k):
            if _wdist2(xs[i], ys[i], cx, cy, L) <= r2:
                cnt += 1
        if cnt > 1 and gen.random() >= 1.0 / cnt:
            continue
        u = _draw_impact(gen, j, impact_kind, p1, p2, toff, tu, tcum)
        naff = 0
        for i in range(k):
            if _wdist2(xs[i], ys[i], cx, cy, L) <= r2 and gen.random() < u:
                affected[naff] = i
                naff += 1
        if naff == 0:
            continue
        zx, zy = _draw_center(gen, cx, cy, r, L)
        first = affected[0]
        xs[first] = zx
        ys[first] = zy
        if naff > 1:
            # swap-remove the other affected blocks from the live prefix
            for a in range(naff - 1, 0, -1):
                idx = affected[a]
                k -= 1
                xs[idx] = xs[k]
                ys[idx] = ys[k]
            merger_times[nm] = t
            merger_sizes[nm] = naff
            nm += 1
    return nm, t, n_cand


@njit(cache=True, nogil=True)
def first_event_merger(
    gen,
    n,
    L,
    r_eff, is_large, impact_kind, p1, p2, toff, tu, tcum,
    rate_per_block, cum_prob,
    max_candidates,
):
    """Merger size of one reproduction event drawn at stationarity.

    Block positions are resampled i.i.d. uniform before every candidate,
    so each accepted event is an independent draw from the single-event
    ensemble; the first candidate that affects at least two blocks gives
    the recorded size.  Returns 0 if max_candidates is exhausted first.
    """
    xs = np.empty(n)
    ys = np.empty(n)
    for _c in range(max_candidates):
        for i in range(n):
            xs[i] = (gen.random() - 0.5) * L
            ys[i] = (gen.random() - 0.5) * L
        j = _pick_atom(gen, cum_prob)
        r = r_eff[j]
        b = gen.integers(0, n)
        cx, cy = _draw_center(gen, xs[b], ys[b], r, L)
        r2 = r * r
        cnt = 0
        for i in range(n):
            if _wdist2(xs[i], ys[i], cx, cy, L) <= r2:
                cnt += 1
        if cnt > 1 and gen.random() >= 1.0 / cnt:
            continue
        u = _draw_impact(gen, j, impact_kind, p1, p2, toff, tu, tcum)
        naff = 0
        for i in range(n):
            if _wdist2(xs[i], ys[i], cx, cy, L) <= r2 and gen.random() < u:
                naff += 1
        if naff >= 2:
            return naff
    return 0


@njit(cache=True, nogil=True)
def single_lineage_entrance(
    gen,
    x, y,
    L,
    r_eff, is_large, impact_kind, p1, p2, toff, tu, tcum,
    rate_per_block, cum_prob,
    d_target,
    t_max,
):
    """First time a single lineage enters the ball B(0, d_target).

    The lineage is piecewise constant, so entrance can only happen at a
    jump (or at time 0 when the start is already inside).  Returns
    (entrance_time or inf, n_jumps).
    """
    d2 = d_target * d_target
    n_jumps = 0
    if x * x + y * y <= d2:
        return 0.0, n_jumps
    t = 0.0
    while True:
        t += gen.exponential(1.0) / rate_per_block
        if t > t_max:
            return INF, n_jumps
        j = _pick_atom(gen, cum_prob)
        u = _draw_impact(gen, j, impact_kind, p1, p2, toff, tu, tcum)
        if u < 1.0 and gen.random() >= u:
            continue
        r = r_eff[j]
        cx, cy = _draw_center(gen, x, y, r, L)
        x, y = _draw_center(gen, cx, cy, r, L)
        n_jumps += 1
        if _wdist2(x, y, 0.0, 0.0, L) <= d2:
            return t, n_jumps


@njit(cache=True, nogil=True)
def single_lineage_position(
    gen,
    x, y,
    L,
    r_eff, is_large, impact_kind, p1, p2, toff, tu, tcum,
    rate_per_block, cum_prob,
    t_end,
):
    """Position of a single lineage at a fixed time."""
    t = 0.0
    while True:
        t += gen.exponential(1.0) / rate_per_block
        if t > t_end:
            return x, y
        j = _pick_atom(gen, cum_prob)
        u = _draw_impact(gen, j, impact_kind, p1, p2, toff, tu, tcum)
        if u < 1.0 and gen.random() >= u:
            continue
        r = r_eff[j]
        cx, cy = _draw_center(gen, x, y, r, L)
        x, y = _draw_center(gen, cx, cy, r, L)


@njit(inline="always")
def _cell_of(x, L, G):
    i = int(np.floor((x + 0.5 * L) * G / L))
    if i >= G:
        i -= G
    if i < 0:
        i += G
    return i


@njit(inline="always")
def _cell_center(i, L, G):
    return -0.5 * L + (i + 0.5) * L / G


@njit(cache=True, nogil=True)
def forward_field_run(
    gen,
    field,
    L,
    atom_r, atom_cum, total_rate,
    impact_kind, p1, p2, toff, tu, tcum,
    t_end,
):
    """Evolve a G x G x K type-frequency field to t_end, in place.

    Events arrive at the whole-torus rate; each draws an unweighted
    radius atom, a uniform centre, an impact u, a parent location z
    uniform in the ball, and a parent type from the cell containing z.
    Every cell whose centre lies in the ball moves a u-fraction of its
    mass to the parent type.  Events with radius below one cell diagonal
    are skipped and counted.  Returns (n_events, n_applied, n_skipped).
    """
    G = field.shape[0]
    K = field.shape[2]
    h = L / G
    diag = h * np.sqrt(2.0)
    t = 0.0
    n_events = 0
    n_applied = 0
    n_skipped = 0
    while True:
        t += gen.exponential(1.0) / total_rate
        if t > t_end:
            return n_events, n_applied, n_skipped
        n_events += 1
        j = np.searchsorted(atom_cum, gen.random())
        r = atom_r[j]
        if r < diag:
            n_skipped += 1
            continue
        cx = (gen.random() - 0.5) * L
        cy = (gen.random() - 0.5) * L
        u = _draw_impact(gen, j, impact_kind, p1, p2, toff, tu, tcum)
        if u <= 0.0:
            continue
        zx, zy = _draw_center(gen, cx, cy, r, L)
        kz = K - 1
        best = gen.random()
        row = field[_cell_of(zx, L, G), _cell_of(zy, L, G)]
        acc = 0.0
        for kk in range(K - 1):
            acc += row[kk]
            if best <= acc:
                kz = kk
                break
        # update every cell whose centre falls inside the ball; the
        # window is clamped to G columns/rows so a wrapped ball never
        # visits the same cell twice
        r2 = r * r
        span = int(np.ceil(r / h)) + 1
        width = 2 * span + 1
        if width > G:
            width = G
        ci = _cell_of(cx, L, G)
        cj = _cell_of(cy, L, G)
        for qi in range(width):
            ii = (ci - span + qi) % G
            px = _cell_center(ii, L, G)
            dx = _wrap(px - cx, L)
            if dx * dx > r2:
                continue
            for qj in range(width):
                jj = (cj - span + qj) % G
                py = _cell_center(jj, L, G)
                dy = _wrap(py - cy, L)
                if dx * dx + dy * dy <= r2:
                    cell = field[ii, jj]
                    for kk in range(K):
                        cell[kk] *= 1.0 - u
                    cell[kz] += u
        n_applied += 1


@njit(cache=True, nogil=True)
def pair_dual_grid(
    gen,
    i1, j1, i2, j2,
    L, G,
    r_eff, is_large, impact_kind, p1, p2, toff, tu, tcum,
    rate_per_block, cum_prob,
    t_end,
    min_radius,
):
    """Two-lineage dual on the grid geometry: labels live on cell centres.

    Coverage tests use the cell-centre labels, new labels are the cell
    centres of the uniform parent draw, and events with radius below
    min_radius are ignored, mirroring the forward-field discretization.
    Returns (merged, i1, j1, i2, j2) as cell indices (block 2 equals
    block 1 after a merger).
    """
    merged = False
    t = 0.0
    while True:
        k = 1.0 if merged else 2.0
        t += gen.exponential(1.0) / (k * rate_per_block)
        if t > t_end:
            return merged, i1, j1, i2, j2
        j = _pick_atom(gen, cum_prob)
        r = r_eff[j]
        if r < min_radius:
            continue
        x1 = _cell_center(i1, L, G)
        y1 = _cell_center(j1, L, G)
        x2 = _cell_center(i2, L, G)
        y2 = _cell_center(j2, L, G)
        if merged or gen.random() < 0.5:
            cx, cy = _draw_center(gen, x1, y1, r, L)
        else:
            cx, cy = _draw_center(gen, x2, y2, r, L)
        r2 = r * r
        c1 = _wdist2(x1, y1, cx, cy, L) <= r2
        c2 = (not merged) and _wdist2(x2, y2, cx, cy, L) <= r2
        cnt = (1 if c1 else 0) + (1 if c2 else 0)
        if cnt == 0:
            continue
        if cnt == 2 and gen.random() >= 0.5:
            continue
        u = _draw_impact(gen, j, impact_kind, p1, p2, toff, tu, tcum)
        a1 = c1 and gen.random() < u
        a2 = c2 and gen.random() < u
        if not (a1 or a2):
            continue
        zx, zy = _draw_center(gen, cx, cy, r, L)
        zi = _cell_of(zx, L, G)
        zj = _cell_of(zy, L, G)
        if merged:
            i1, j1 = zi, zj
            i2, j2 = zi, zj
            continue
        if a1 and a2:
            merged = True
            i1, j1 = zi, zj
            i2, j2 = zi, zj
        elif a1:
            i1, j1 = zi, zj
        else:
            i2, j2 = zi, zj

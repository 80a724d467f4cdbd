"""Satellite gap filling from prior satellite fields and co-temporal ground data.

A missing satellite cell at day ``t_j`` is reconstructed in three stages:

1. For a reference day ``t_i`` where the cell was observed, pick cells whose
   satellite value is close to the target's (``tau_spatial``) and whose
   satellite and ground values agree (``tau_consistency``), weighted by
   inverse concentration distance.
2. Fit a robust (Huber) weighted line ``G_j ~ a * G_i + b`` through the ground
   pairs at those cells and project the neighbors' satellite values forward.
3. Blend the projections from several reference days with weights inversely
   proportional to the ground-field variance between ``t_i`` and ``t_j``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .grid import Field, FieldStack, GridError


class FusionError(ValueError):
    """Raised on configuration errors or missing estimates."""


class InsufficientDataError(FusionError):
    pass


@dataclass(frozen=True)
class FusionParams:
    tau_spatial: float = 1.5
    tau_consistency: float = 2.0
    max_neighbors: int = 8
    huber_delta: float = 1.0
    max_reference_times: int = 5
    min_overlap: int = 3
    idw_epsilon: float = 1e-6

    def __post_init__(self):
        for name in ("tau_spatial", "tau_consistency", "huber_delta", "idw_epsilon"):
            if not getattr(self, name) > 0:
                raise FusionError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_neighbors < 1:
            raise FusionError("max_neighbors must be >= 1")
        if self.max_reference_times < 1:
            raise FusionError("max_reference_times must be >= 1")
        if self.min_overlap < 2:
            raise FusionError("min_overlap must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NeighborSet:
    cells: np.ndarray      # (k, 2) int rows/cols
    distances: np.ndarray  # (k,)
    weights: np.ndarray    # (k,)

    def __len__(self):
        return len(self.distances)


@dataclass(frozen=True)
class LocalLinearCoeffs:
    a: float
    b: float
    degenerate: bool = False


@dataclass
class TemporalEstimate:
    reference_time: int
    estimate: float
    dt: float
    weight: float = float("nan")


# --------------------------------------------------------------------------
# neighbor selection


def idw_weights(distances, epsilon: float = 1e-6) -> np.ndarray:
    """Normalized inverse-distance weights with distances floored at ``epsilon``."""
    inv = 1.0 / np.maximum(np.asarray(distances, dtype=np.float64), epsilon)
    return inv / inv.sum(axis=-1, keepdims=True)


def _select_neighbors(target_vals, cand_vals, params: FusionParams):
    """Pick up to N closest candidates (by satellite difference) for each target.

    ``cand_vals`` must already be restricted to cells passing the consistency
    check, in row-major order so that stable sorting breaks ties toward the
    lower (row, col).  Returns ``(idx, dist)`` of shape ``(T, N)`` with
    ``idx == -1`` padding.
    """
    target_vals = np.asarray(target_vals, dtype=np.float64)
    n_take = min(params.max_neighbors, len(cand_vals))
    T = len(target_vals)
    idx = np.full((T, params.max_neighbors), -1, dtype=np.int64)
    dist = np.full((T, params.max_neighbors), np.inf)
    if n_take == 0 or T == 0:
        return idx, dist
    D = np.abs(target_vals[:, None] - cand_vals[None, :])
    D = np.where(D < params.tau_spatial, D, np.inf)
    order = np.argsort(D, axis=1, kind="stable")[:, :n_take]
    d_take = np.take_along_axis(D, order, axis=1)
    ok = np.isfinite(d_take)
    idx[:, :n_take] = np.where(ok, order, -1)
    dist[:, :n_take] = d_take
    return idx, dist


def _consistent_candidates(s_vals, g_vals, params: FusionParams):
    """Flat indices of cells valid in both fields with |S - G| < tau_consistency."""
    ok = np.isfinite(s_vals) & np.isfinite(g_vals)
    flat = np.flatnonzero(ok)
    gap = np.abs(s_vals[flat] - g_vals[flat])
    return flat[gap < params.tau_consistency]


def find_similar_cells(S_i: Field, G_i: Field, target: tuple[int, int],
                       params: FusionParams = FusionParams()) -> NeighborSet:
    """Cells similar to ``target`` on the reference day, with IDW weights."""
    if S_i.spec != G_i.spec:
        raise FusionError("satellite and ground fields are on different grids")
    r, c = target
    if not S_i.mask[r, c]:
        raise FusionError(f"target cell {target} is not valid in the reference satellite field")
    s_flat = S_i.values.reshape(-1)
    cand = _consistent_candidates(s_flat, G_i.values.reshape(-1), params)
    idx, dist = _select_neighbors([S_i.values[r, c]], s_flat[cand], params)
    keep = idx[0] >= 0
    chosen = cand[idx[0][keep]]
    d = dist[0][keep]
    cols = S_i.spec.cols
    cells = np.stack([chosen // cols, chosen % cols], axis=1) if len(chosen) else np.zeros((0, 2), dtype=np.int64)
    w = idw_weights(d, params.idw_epsilon) if len(d) else np.zeros(0)
    return NeighborSet(cells=cells, distances=d, weights=w)


# --------------------------------------------------------------------------
# robust local line


def _wls_line(x, y, u):
    """Row-wise weighted least squares line; rows are independent problems."""
    s0 = u.sum(axis=1)
    xm = (u * x).sum(axis=1) / s0
    ym = (u * y).sum(axis=1) / s0
    dx = x - xm[:, None]
    sxx = (u * dx * dx).sum(axis=1)
    sxy = (u * dx * (y - ym[:, None])).sum(axis=1)
    a = sxy / sxx
    return a, ym - a * xm


def _huber_reweight(r, w, delta):
    ar = np.abs(r)
    return w * np.where(ar <= delta, 1.0, delta / np.maximum(ar, delta))


def huber_irls_batch(x, y, w, delta: float = 1.0, tol: float = 1e-8, max_iter: int = 50):
    """Minimize ``sum_k w_k * huber(y_k - a x_k - b)`` independently per row.

    Zero weights mark padding.  Rows whose positive-weight ``x`` are all equal
    are degenerate: ``a = 0`` and ``b`` is the weighted Huber location of ``y``.
    Returns ``(a, b, degenerate)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    pos = w > 0
    x = np.where(pos, x, 0.0)
    y = np.where(pos, y, 0.0)
    xmax = np.where(pos, x, -np.inf).max(axis=1)
    xmin = np.where(pos, x, np.inf).min(axis=1)
    scale = np.maximum(1.0, np.maximum(np.abs(xmax), np.abs(xmin)))
    degenerate = (xmax - xmin) <= 1e-12 * scale

    B = x.shape[0]
    a = np.zeros(B)
    b = np.zeros(B)
    line = ~degenerate
    if line.any():
        a[line], b[line] = _irls_line(x[line], y[line], w[line], delta, tol, max_iter)
    if degenerate.any():
        b[degenerate] = _irls_location(y[degenerate], w[degenerate], delta, tol, max_iter)
    return a, b, degenerate


def _irls_line(x, y, w, delta, tol, max_iter):
    a, b = _wls_line(x, y, w)
    active = np.arange(len(a))
    for _ in range(max_iter):
        if not len(active):
            break
        xa, ya, wa = x[active], y[active], w[active]
        r = ya - a[active, None] * xa - b[active, None]
        a_new, b_new = _wls_line(xa, ya, _huber_reweight(r, wa, delta))
        step = np.maximum(np.abs(a_new - a[active]), np.abs(b_new - b[active]))
        size = np.maximum(1.0, np.maximum(np.abs(a_new), np.abs(b_new)))
        a[active], b[active] = a_new, b_new
        active = active[step / size >= tol]
    return a, b


def _irls_location(y, w, delta, tol, max_iter):
    m = (w * y).sum(axis=1) / w.sum(axis=1)
    active = np.arange(len(m))
    for _ in range(max_iter):
        if not len(active):
            break
        ya, wa = y[active], w[active]
        u = _huber_reweight(ya - m[active, None], wa, delta)
        m_new = (u * ya).sum(axis=1) / u.sum(axis=1)
        step = np.abs(m_new - m[active]) / np.maximum(1.0, np.abs(m_new))
        m[active] = m_new
        active = active[step >= tol]
    return m


def fit_local_linear(g_i, g_j, w, delta: float = 1.0, min_overlap: int = 3) -> LocalLinearCoeffs:
    """Huber-weighted line through ground pairs ``(g_i[k], g_j[k])``."""
    g_i = np.asarray(g_i, dtype=np.float64)
    g_j = np.asarray(g_j, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if not (g_i.shape == g_j.shape == w.shape) or g_i.ndim != 1:
        raise FusionError(f"mismatched pair lengths {g_i.shape}, {g_j.shape}, {w.shape}")
    if len(g_i) < min_overlap:
        raise InsufficientDataError(f"need at least {min_overlap} ground pairs, got {len(g_i)}")
    if np.any(w < 0) or not np.any(w > 0):
        raise FusionError("weights must be non-negative and not all zero")
    a, b, deg = huber_irls_batch(g_i[None], g_j[None], w[None], delta)
    return LocalLinearCoeffs(float(a[0]), float(b[0]), bool(deg[0]))


# --------------------------------------------------------------------------
# projection and blending


def temporal_project(s_i: float, coeffs: LocalLinearCoeffs) -> float:
    return coeffs.a * s_i + coeffs.b


def neighborhood_estimate(neighbors: NeighborSet, coeffs_per_cell: Sequence[LocalLinearCoeffs],
                          s_i_per_cell) -> float:
    if len(neighbors) == 0:
        raise FusionError("no neighbors: cannot form a neighborhood estimate")
    if len(coeffs_per_cell) != len(neighbors) or len(s_i_per_cell) != len(neighbors):
        raise FusionError("coefficients and satellite values must align with the neighbor set")
    proj = np.array([temporal_project(s, c) for s, c in zip(s_i_per_cell, coeffs_per_cell)])
    return float(np.dot(neighbors.weights, proj))


def temporal_variance(G_p: Field, G_j: Field, t_p: int, t_j: int,
                      min_overlap: int = 3, epsilon: float = 1e-6) -> float:
    """Mean squared ground difference between two days, with a day-gap fallback."""
    if G_p.spec != G_j.spec:
        raise FusionError("ground fields are on different grids")
    return float(_temporal_variance(G_p.values, G_j.values, t_p, t_j, min_overlap, epsilon))


def _temporal_variance(gp, gj, t_p, t_j, min_overlap, epsilon):
    both = np.isfinite(gp) & np.isfinite(gj)
    n = int(both.sum())
    if n < min_overlap:
        return float(abs(t_j - t_p))
    diff = gj[both] - gp[both]
    return max(float(np.mean(diff * diff)), epsilon * epsilon)


def multi_temporal_combine(estimates: Sequence[TemporalEstimate]) -> float:
    """Inverse-variance blend of per-reference-day estimates; stores the weights."""
    if not estimates:
        raise FusionError("no temporal estimates to combine")
    dts = np.array([e.dt for e in estimates], dtype=np.float64)
    if np.any(~(dts > 0)):
        raise FusionError(f"temporal variances must be positive, got {dts}")
    wt = idw_weights(dts, epsilon=0.0) if len(dts) > 1 else np.ones(1)
    for e, v in zip(estimates, wt):
        e.weight = float(v)
    return float(np.dot(wt, [e.estimate for e in estimates]))


# --------------------------------------------------------------------------
# full gap filling


@dataclass
class FusionReport:
    copied: int = 0
    filled: int = 0
    unfilled: int = 0
    params: FusionParams = field(default_factory=FusionParams)
    trace: dict | None = None

    def to_text(self) -> str:
        lines = [f"copied = {self.copied}", f"filled = {self.filled}", f"unfilled = {self.unfilled}"]
        lines += [f"{k} = {v}" for k, v in self.params.to_dict().items()]
        return "\n".join(lines) + "\n"


def _reference_days(valid, times, j, cells, M):
    """Up to M nearest observed days for each cell, ties going to the earlier day.

    ``valid`` is (T, ncell) boolean.  Returns an (len(cells), M) array of time
    positions padded with -1.
    """
    T = valid.shape[0]
    out = np.full((len(cells), M), -1, dtype=np.int64)
    if len(cells) == 0:
        return out
    v = valid[:, cells]
    # scan outward from j until M are found or both ends are exhausted
    found = np.zeros(len(cells), dtype=np.int64)
    lo, hi = j - 1, j + 1
    while (lo >= 0 or hi < T) and (found < M).any():
        dlo = times[j] - times[lo] if lo >= 0 else np.inf
        dhi = times[hi] - times[j] if hi < T else np.inf
        pos = lo if dlo <= dhi else hi
        hit = v[pos] & (found < M)
        rows = np.flatnonzero(hit)
        out[rows, found[rows]] = pos
        found[rows] += 1
        if pos == lo:
            lo -= 1
        else:
            hi += 1
    return out


def _check_stacks(satellite: FieldStack, ground: FieldStack):
    if satellite.spec != ground.spec:
        raise FusionError("satellite and ground stacks are on different grids")
    if len(satellite.times) != len(ground.times) or np.any(satellite.times != ground.times):
        raise FusionError("satellite and ground stacks have different time axes")


def _neighbor_group(i, j, refs, missing, S, G, cand, params):
    """Neighbor sets and fit inputs for all targets of day ``j`` using reference day ``i``."""
    tgt_rows, slot = np.nonzero(refs == i)
    tgt_cells = missing[tgt_rows]
    idx, dist = _select_neighbors(S[i][tgt_cells], S[i][cand], params)
    has = idx >= 0
    n_nb = has.sum(axis=1)
    nb_cells = cand[np.where(has, idx, 0)]
    w = np.where(has, 1.0 / np.maximum(np.where(has, dist, 1.0), params.idw_epsilon), 0.0)
    with np.errstate(invalid="ignore"):
        w = w / w.sum(axis=1, keepdims=True)
    gi = G[i][nb_cells]
    gj = G[j][nb_cells]
    pair_ok = has & np.isfinite(gj)
    local = (n_nb > 0) & (pair_ok.sum(axis=1) >= params.min_overlap)
    proj = (w * np.where(has, S[i][nb_cells], 0.0)).sum(axis=1)
    return dict(ref=int(i), tgt_rows=tgt_rows, slot=slot, has=has, n_nb=n_nb, nb_cells=nb_cells,
                w=w, local=local, proj=proj, x=np.where(pair_ok, gi, 0.0),
                y=np.where(pair_ok, gj, 0.0), fw=np.where(pair_ok, w, 0.0))


def gap_fill(satellite: FieldStack, ground: FieldStack, params: FusionParams = FusionParams(),
             trace: bool = False) -> tuple[FieldStack, FusionReport]:
    """Fill missing satellite cells; observed cells are copied unchanged.

    With ``trace=True`` the report carries, for every filled cell
    ``(t_index, row, col)``, the list of per-reference-day contributions.
    """
    _check_stacks(satellite, ground)
    T = len(satellite)
    rows, cols = satellite.spec.shape
    S = satellite.values.reshape(T, -1)
    G = ground.values.reshape(T, -1)
    valid = np.isfinite(S)
    times = satellite.times
    out = S.copy()
    report = FusionReport(params=params, trace={} if trace else None)
    report.copied = int(valid.sum())

    cand_cache: dict[int, np.ndarray] = {}
    pooled_cache: dict[tuple[int, int], tuple] = {}
    dt_cache: dict[tuple[int, int], float] = {}

    def candidates(i):
        if i not in cand_cache:
            cand_cache[i] = _consistent_candidates(S[i], G[i], params)
        return cand_cache[i]

    def pooled_batch(j, refs_needed):
        """Unweighted robust fits over all co-valid ground cells, batched over reference days."""
        todo = [i for i in refs_needed if (i, j) not in pooled_cache]
        if not todo:
            return
        both = np.isfinite(G[todo]) & np.isfinite(G[j])[None]
        width = max(int(both.sum(axis=1).max()), 1)
        x = np.zeros((len(todo), width))
        y = np.zeros((len(todo), width))
        w = np.zeros((len(todo), width))
        for r, i in enumerate(todo):
            k = int(both[r].sum())
            x[r, :k] = G[i][both[r]]
            y[r, :k] = G[j][both[r]]
            w[r, :k] = 1.0
        enough = both.sum(axis=1) >= params.min_overlap
        if enough.any():
            a, b, _ = huber_irls_batch(x[enough], y[enough], w[enough], params.huber_delta)
        it = iter(zip(a, b)) if enough.any() else iter(())
        for r, i in enumerate(todo):
            pooled_cache[(i, j)] = tuple(map(float, next(it))) if enough[r] else None

    def dt(i, j):
        key = (i, j)
        if key not in dt_cache:
            dt_cache[key] = _temporal_variance(G[i], G[j], int(times[i]), int(times[j]),
                                               params.min_overlap, params.idw_epsilon)
        return dt_cache[key]

    for j in range(T):
        missing = np.flatnonzero(~valid[j])
        if len(missing) == 0:
            continue
        refs = _reference_days(valid, times, j, missing, params.max_reference_times)
        groups = [_neighbor_group(i, j, refs, missing, S, G, candidates(i), params)
                  for i in np.unique(refs[refs >= 0])]
        if groups:
            # one batched robust fit for every (target, reference) pair of this day
            local = np.concatenate([g["local"] for g in groups])
            a = np.full(len(local), np.nan)
            b = np.full(len(local), np.nan)
            if local.any():
                cat = lambda k: np.concatenate([g[k] for g in groups])[local]
                a[local], b[local], _ = huber_irls_batch(cat("x"), cat("y"), cat("fw"), params.huber_delta)
            bounds = np.cumsum([0] + [len(g["local"]) for g in groups])
            pooled_batch(j, [g["ref"] for g in groups if ((g["n_nb"] > 0) & ~g["local"]).any()])
        est = np.full(refs.shape, np.nan)
        dts = np.full(refs.shape, np.nan)
        for g, lo, hi in zip(groups, bounds[:-1], bounds[1:]) if groups else ():
            i = g["ref"]
            ga, gb = a[lo:hi], b[lo:hi]
            fallback = g["n_nb"] > 0
            fallback &= ~g["local"]
            if fallback.any():
                pc = pooled_cache[(i, j)]
                if pc is not None:
                    ga[fallback], gb[fallback] = pc
            ok = np.isfinite(ga)
            e = ga * g["proj"] + gb
            rows_, slot = g["tgt_rows"], g["slot"]
            est[rows_[ok], slot[ok]] = e[ok]
            dts[rows_[ok], slot[ok]] = dt(i, j)
            if trace:
                has, w, nb_cells = g["has"], g["w"], g["nb_cells"]
                for k in np.flatnonzero(ok):
                    cell = int(missing[rows_[k]])
                    key = (j, cell // cols, cell % cols)
                    nbs = [(int(c) // cols, int(c) % cols) for c in nb_cells[k][has[k]]]
                    report.trace.setdefault(key, []).append(dict(
                        reference=int(i), neighbors=nbs, weights=w[k][has[k]].copy(),
                        a=float(ga[k]), b=float(gb[k]), local=bool(g["local"][k]),
                        estimate=float(e[k]), dt=float(dts[rows_[k], slot[k]])))

        have = np.isfinite(est)
        filled = have.any(axis=1)
        inv_dt = np.where(have, 1.0 / np.where(have, dts, 1.0), 0.0)
        wt = inv_dt[filled] / inv_dt[filled].sum(axis=1, keepdims=True)
        out[j, missing[filled]] = (wt * np.where(have[filled], est[filled], 0.0)).sum(axis=1)
        report.filled += int(filled.sum())
        report.unfilled += int((~filled).sum())

    # projections can leave the finite range only through overflow; treat that as unfilled
    bad = ~np.isfinite(out) & ~np.isnan(out)
    if bad.any():
        out[bad] = np.nan
        report.filled -= int(bad.sum())
        report.unfilled += int(bad.sum())
    return FieldStack(satellite.spec, times, out.reshape(T, rows, cols)), report

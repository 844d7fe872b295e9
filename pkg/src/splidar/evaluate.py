"""Cross-correlation baseline, point-cloud metrics and the scaling benchmark."""

from __future__ import annotations

import gc
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import PhotonCube
from .likelihood import LikelihoodModel
from .reconstruct import InitParams, ReconConfig, _detect_peaks, reconstruct, spawn_points


def baseline_xcorr(cube, sensor, K=1):
    """Matched-filter argmax per pixel, no regularisation.

    Every nonempty pixel gets its K strongest correlation peaks; the
    intensity is the photon count under the IRF window divided by the
    IRF mass.
    """
    model = LikelihoodModel(cube, sensor)
    sep = max(1.0, 3 * sensor.irf.rms_width)
    pix, tau = _detect_peaks(model, InitParams(max_returns=K, peak_threshold=-np.inf), sep)
    bins, h, _, in_gate = model.support(pix, tau)
    keys = pix[:, None] * model.n_bins + bins
    E = len(model.z)
    pos = np.searchsorted(model.event_keys, keys)
    posc = np.minimum(pos, max(E - 1, 0))
    hit = in_gate & (h > 0) & (pos < E)
    if E:
        hit &= model.event_keys[posc] == keys
    counts = np.where(hit, model.z[posc] if E else 0.0, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = counts / (model.gain[pix] * h.sum(axis=1))
    r = np.where(np.isfinite(r), r, 0.0)
    return spawn_points(sensor, pix, tau, r)


@dataclass(frozen=True)
class EvalResult:
    recall: float
    false_rate: float
    depth_rmse: float
    intensity_mae: float
    matched: int
    n_est: int
    n_truth: int

    def to_mapping(self):
        return asdict(self)


def _infer_pitch(truth):
    steps = []
    for axis in (0, 1):
        u = np.unique(truth.positions[:, axis])
        d = np.diff(u)
        d = d[d > 1e-12]
        if len(d):
            steps.append(d.min())
    return min(steps) if steps else np.inf


def _columns(positions, pitch):
    if not np.isfinite(pitch):
        return np.zeros(len(positions), np.int64), np.zeros(len(positions), np.int64)
    return (np.floor(positions[:, 0] / pitch).astype(np.int64),
            np.floor(positions[:, 1] / pitch).astype(np.int64))


def match_points(est, truth, tau, pitch):
    """Greedy one-to-one pairs ``(est_idx, truth_idx)`` within ``tau`` per pixel column."""
    ei, ej = _columns(est.positions, pitch)
    ti, tj = _columns(truth.positions, pitch)
    ekey = np.stack([ei, ej], 1)
    tkey = np.stack([ti, tj], 1)
    # integer column ids shared by both clouds
    _, inv = np.unique(np.concatenate([ekey, tkey]), axis=0, return_inverse=True)
    inv = inv.ravel()
    ecol, tcol = inv[:len(est)], inv[len(est):]
    order = np.argsort(ecol, kind="stable")
    sorted_cols = ecol[order]
    lo = np.searchsorted(sorted_cols, tcol, "left")
    hi = np.searchsorted(sorted_cols, tcol, "right")
    n = hi - lo
    t_idx = np.repeat(np.arange(len(truth)), n)
    start = np.repeat(lo - np.cumsum(n) + n, n)
    e_idx = order[np.arange(len(t_idx)) + start] if len(t_idx) else np.zeros(0, np.int64)
    dz = np.abs(est.positions[e_idx, 2] - truth.positions[t_idx, 2])
    ok = dz <= tau
    e_idx, t_idx, dz = e_idx[ok], t_idx[ok], dz[ok]
    # ties broken by coordinates, so the result ignores point order
    ep, tp = est.positions[e_idx], truth.positions[t_idx]
    keys = (ep[:, 2], ep[:, 1], ep[:, 0], tp[:, 2], tp[:, 1], tp[:, 0], dz)
    rank = np.lexsort(keys)
    used_e = np.zeros(len(est), bool)
    used_t = np.zeros(len(truth), bool)
    pairs = []
    for k in rank:
        a, b = e_idx[k], t_idx[k]
        if not used_e[a] and not used_t[b]:
            used_e[a] = used_t[b] = True
            pairs.append((a, b))
    return np.array(pairs, np.int64).reshape(-1, 2)


def evaluate(est, truth, tau=0.04, pitch=None):
    """Recall within ``tau`` metres plus error statistics on the matched pairs.

    Points are compared only inside the same fine pixel column; ``pitch``
    defaults to the grid spacing of ``truth``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if pitch is None:
        pitch = _infer_pitch(truth)
    pairs = match_points(est, truth, tau, pitch)
    m = len(pairs)
    if m:
        dz = est.positions[pairs[:, 0], 2] - truth.positions[pairs[:, 1], 2]
        dr = est.intensities[pairs[:, 0]] - truth.intensities[pairs[:, 1]]
        rmse, mae = float(np.sqrt(np.mean(dz ** 2))), float(np.mean(np.abs(dr)))
    else:
        rmse = mae = 0.0
    return EvalResult(
        recall=m / len(truth) if len(truth) else 0.0,
        false_rate=(len(est) - m) / len(est) if len(est) else 0.0,
        depth_rmse=rmse, intensity_mae=mae, matched=m, n_est=len(est), n_truth=len(truth))


# ---------------------------------------------------------------------------
# Scaling benchmark
# ---------------------------------------------------------------------------


def tile_pixels(cube, sensor, level):
    """Repeat the cube ``level`` times along both pixel axes."""
    if sensor.irf.per_pixel:
        raise ValueError("pixel tiling needs a shared IRF")
    dense = np.tile(cube.to_dense(), (level, level, 1))
    big = PhotonCube.from_dense(dense, cube.bin_width)
    s = replace(sensor, n_rows=sensor.n_rows * level, n_cols=sensor.n_cols * level,
                gain=np.tile(sensor.gain, (level, level)),
                dead_mask=np.tile(sensor.dead_mask, (level, level)))
    return big, s


def add_active_bins(cube, level):
    """Copy every event into ``level - 1`` neighbouring bins (t+1, t-1, t+2, ...).

    The copies sit closer together than the detector's peak separation, so
    they widen existing peaks instead of adding new ones and the number of
    proposed points stays roughly fixed.  Copies falling outside the gate
    are folded back inside; coinciding copies merge into one bin.
    """
    if level <= 1:
        return cube
    T = cube.n_bins
    k = np.arange(1, level)
    offset = np.where(k % 2 == 1, (k + 1) // 2, -(k // 2))
    pix = cube.event_pixels()
    new_bins = cube.bins[:, None] + offset
    new_bins = np.where(new_bins < 0, new_bins + level, new_bins)
    new_bins = np.where(new_bins >= T, new_bins - level, new_bins).ravel()
    extra_pix = np.repeat(pix, level - 1)
    return PhotonCube.from_events(
        cube.n_rows, cube.n_cols, T,
        np.concatenate([pix, extra_pix]), np.concatenate([cube.bins, new_bins]),
        np.concatenate([cube.counts, np.ones(len(new_bins), np.int64)]), cube.bin_width)


def linear_fit(x, y):
    """Least-squares line; returns ``(slope, intercept, r2)``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if len(x) < 2 or np.ptp(x) == 0:
        return 0.0, float(np.mean(y)) if len(y) else 0.0, float("nan")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def _time_once(fn, *args):
    """Wall-clock seconds for one call, with garbage collection paused as timeit does."""
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        t0 = time.perf_counter()
        fn(*args)
        return time.perf_counter() - t0
    finally:
        if enabled:
            gc.enable()


BENCH_COLUMNS = ("axis", "level", "pixels", "active_bins", "seconds")


def bench_scaling(cube, sensor, axis, levels, config=None, iterations=5, repeats=3):
    """Time ``reconstruct`` at a fixed iteration count for each level.

    ``axis="pixels"`` tiles the cube level x level; ``axis="active_bins"``
    multiplies the number of active bins by about ``level``.  Returns the
    rows (best of ``repeats`` timings) and a line fit of seconds against
    the varied quantity.
    """
    if axis not in ("pixels", "active_bins"):
        raise ValueError("axis must be 'pixels' or 'active_bins'")
    config = replace(config or ReconConfig(), max_iters=iterations, stop_tol=0.0)
    cases = []
    for level in levels:
        level = int(level)
        if level < 1:
            raise ValueError("levels must be positive integers")
        if axis == "pixels":
            cases.append((level,) + tile_pixels(cube, sensor, level))
        else:
            cases.append((level, add_active_bins(cube, level), sensor))
    best = np.full(len(cases), np.inf)
    # repeats go round-robin over the levels so slow drift in machine load
    # hits every level alike
    for _ in range(max(1, repeats)):
        for k, (_, c, s) in enumerate(cases):
            best[k] = min(best[k], _time_once(reconstruct, c, s, config))
    rows = [{"axis": axis, "level": level, "pixels": s.n_pixels, "active_bins": c.n_events,
             "seconds": float(t)} for (level, c, s), t in zip(cases, best)]
    x = [r["pixels" if axis == "pixels" else "active_bins"] for r in rows]
    fit = linear_fit(x, [r["seconds"] for r in rows])
    return rows, dict(zip(("slope", "intercept", "r2"), fit))


def upsample_cloud(cloud, coarse, fine):
    """Copy each point of a coarse-grid cloud to the s x s fine cells of its pixel."""
    i, j, t = coarse.to_lidar(cloud.positions, check=False)
    return spawn_points(fine, i * coarse.n_cols + j, t, cloud.intensities)

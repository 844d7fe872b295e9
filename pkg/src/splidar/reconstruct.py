"""Initialisation and the block proximal-gradient (PALM-style) solver.

Each iteration updates depth, intensity and background in that order.  A
block update is a safeguarded gradient step on the Poisson likelihood
followed by that block's denoiser:

* depth: step on t, then APSS projection of the world-space cloud;
* intensity: step on r, then k-NN intensity smoothing, then pruning;
* background: step on b, then identity or FFT low-pass.
"""

from __future__ import annotations

import dataclasses
import math
import re
import time
from dataclasses import dataclass, field

import numpy as np

from .data import BackgroundImage, PointCloud
from .denoise import (ApssParams, SpatialIndex, apss_project, fft_background_denoise,
                      identity_background, knn_intensity_filter, prune)
from .likelihood import LikelihoodModel, SceneState

BACKGROUND_FLOOR = 1e-6


@dataclass(frozen=True)
class InitParams:
    max_returns: int = 2
    peak_threshold: float = 0.5          # photons above background
    min_peak_separation: float | None = None   # bins; default 3 IRF rms widths

    def __post_init__(self):
        if self.max_returns < 1:
            raise ValueError("max_returns must be >= 1")
        if self.min_peak_separation is not None and self.min_peak_separation < 1:
            raise ValueError("min_peak_separation must be >= 1")


@dataclass(frozen=True)
class ReconConfig:
    max_iters: int = 20
    step_depth: float | str = "auto"
    step_intensity: float | str = "auto"
    step_background: float | str = "auto"
    backtrack: float = 0.5
    max_backtracks: int = 6
    apss: ApssParams | None = None        # default radius: 6 fine pixel pitches
    knn_k: int = 8
    knn_radius: float | None = None       # default: APSS kernel radius
    r_min: float = 0.0
    background_mode: str = "identity"     # "identity" or "fft(<cutoff>)"
    init: InitParams = field(default_factory=InitParams)
    stop_tol: float = 1e-4
    max_depth_step: float | None = None   # bins per iteration; default IRF rms width
    workers: int = 1

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must be in (0, 1)")
        for name in ("step_depth", "step_intensity", "step_background"):
            v = getattr(self, name)
            if v != "auto" and not (isinstance(v, (int, float)) and v > 0):
                raise ValueError(f"{name} must be 'auto' or a positive number")
        if self.knn_k < 1 or self.r_min < 0 or self.stop_tol < 0:
            raise ValueError("knn_k >= 1, r_min >= 0 and stop_tol >= 0 are required")
        self.background_cutoff()

    def background_cutoff(self):
        """None for the identity denoiser, else the FFT cutoff."""
        if self.background_mode == "identity":
            return None
        m = re.fullmatch(r"fft\(\s*([0-9.eE+-]+)\s*\)", self.background_mode)
        if not m or not 0 < float(m.group(1)) <= 1:
            raise ValueError(f"bad background_mode {self.background_mode!r}")
        return float(m.group(1))

    def resolved(self, sensor):
        """Fill sensor-dependent defaults."""
        apss = self.apss or ApssParams(6 * sensor.pixel_pitch, projection="ray")
        sep = self.init.min_peak_separation
        if sep is None:
            sep = max(1.0, 3 * sensor.irf.rms_width)
        return dataclasses.replace(
            self, apss=apss,
            knn_radius=self.knn_radius or apss.kernel_radius,
            max_depth_step=self.max_depth_step or max(sensor.irf.rms_width, 0.5),
            init=dataclasses.replace(self.init, min_peak_separation=sep))

    # -- key = value round trip -------------------------------------------------

    def to_mapping(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            elif v is not None:
                out[f.name] = v
        return out

    @classmethod
    def from_mapping(cls, mapping, base=None):
        """Build from ``{"field": value, "apss.kernel_radius": value, ...}``; values may be strings."""
        base = base or cls()
        top, nested = {}, {"apss": {}, "init": {}}
        for key, value in mapping.items():
            head, _, tail = key.partition(".")
            if tail:
                if head not in nested:
                    raise ValueError(f"unknown config key {key!r}")
                nested[head][tail] = value
            else:
                top[key] = value
        kw = {k: _coerce(cls, k, v) for k, v in top.items()}
        if nested["init"]:
            kw["init"] = dataclasses.replace(
                base.init, **{k: _coerce(InitParams, k, v) for k, v in nested["init"].items()})
        if nested["apss"]:
            a = {k: _coerce(ApssParams, k, v) for k, v in nested["apss"].items()}
            kw["apss"] = dataclasses.replace(base.apss, **a) if base.apss else ApssParams(
                **{"projection": "ray", **a})
        return dataclasses.replace(base, **kw)


def _coerce(cls, key, value):
    names = {f.name: f for f in dataclasses.fields(cls)}
    if key not in names:
        raise ValueError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return value
    value = value.strip()
    if value in ("none", "None", ""):
        return None
    default = names[key].default
    if key.startswith("step_"):
        return value if value == "auto" else float(value)
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, str):
        return value
    return float(value)


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def _detect_peaks(model, params, sep):
    """Matched-filter peaks per pixel: (pixel, sub-bin depth) sorted by pixel then rank."""
    T = model.n_bins
    irf = model.irf
    hi = irf.support[1]
    W = irf.support_width_bins
    epix, ekeys, z = model.event_pixel, model.event_keys, model.z
    if len(z) == 0:
        return np.zeros(0, np.int64), np.zeros(0)
    ebin = ekeys - epix * T
    # correlation c(tau) = sum_t z_t h(t - tau) on integer tau around each event
    tau = np.ceil(ebin - hi).astype(np.int64)[:, None] + np.arange(W)
    h, _ = irf.evaluate(ebin[:, None] - tau, epix[:, None])
    ok = (tau >= 0) & (tau < T) & (h > 0)
    keys = (epix[:, None] * T + tau)[ok]
    ukeys, inv = np.unique(keys, return_inverse=True)
    corr = np.bincount(inv, weights=(z[:, None] * h)[ok], minlength=len(ukeys))

    n = len(ukeys)
    left = np.zeros(n)
    right = np.zeros(n)
    has_left = np.zeros(n, bool)
    has_left[1:] = (ukeys[1:] == ukeys[:-1] + 1) & (ukeys[1:] % T != 0)
    left[has_left] = corr[:-1][has_left[1:]]
    has_right = np.zeros(n, bool)
    has_right[:-1] = has_left[1:]
    right[has_right] = corr[1:][has_right[:-1]]
    is_max = (corr >= left) & (corr > right)

    ppix = ukeys[is_max] // T
    ptau = (ukeys[is_max] % T).astype(np.float64)
    c0, cl, cr = corr[is_max], left[is_max], right[is_max]

    # photons above a crude per-pixel background (total / T), via the
    # least-squares amplitude of the IRF at the integer peak
    total = np.bincount(epix, weights=z, minlength=model.n_pixels)
    _, hs, _, _ = model.support(ppix, ptau)
    mass = hs.sum(axis=1)
    energy = np.maximum(np.sum(hs ** 2, axis=1), 1e-300)
    amp = (c0 - total[ppix] / T * mass) * mass / energy

    curv = cl - 2 * c0 + cr
    with np.errstate(invalid="ignore", divide="ignore"):
        shift = np.where(curv < 0, 0.5 * (cl - cr) / curv, 0.0)
    ptau = ptau + np.clip(shift, -0.5, 0.5)
    cand = amp >= params.peak_threshold
    ppix, ptau, amp = ppix[cand], ptau[cand], amp[cand]

    order = np.lexsort((ptau, -amp, ppix))
    ppix, ptau = ppix[order], ptau[order]
    alive = np.ones(len(ppix), bool)
    chosen = []
    for _ in range(params.max_returns):
        idx = np.nonzero(alive)[0]
        if len(idx) == 0:
            break
        _, first = np.unique(ppix[idx], return_index=True)
        sel = idx[first]
        chosen.append(sel)
        alive[sel] = False
        sel_tau = np.full(model.n_pixels, np.nan)
        sel_tau[ppix[sel]] = ptau[sel]
        with np.errstate(invalid="ignore"):
            alive &= ~(np.abs(ptau - sel_tau[ppix]) < sep)
    sel = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, np.int64)
    return ppix[sel], ptau[sel]


def spawn_points(sensor, pix, tau, r):
    """Points at depth ``tau`` (bins) for coarse pixels ``pix``; each covers s*s fine cells."""
    s = sensor.superres
    i, j = pix // sensor.n_cols, pix % sensor.n_cols
    a, c = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    fi = (i[:, None] * s + a.ravel()).ravel()
    fj = (j[:, None] * s + c.ravel()).ravel()
    x, y = sensor.fine_centres(fi, fj)
    z_m = sensor.bins_to_depth(np.repeat(tau, s * s))
    return PointCloud(np.column_stack([x, y, z_m]), np.repeat(r / (s * s), s * s))


def init_matched_filter(cube, sensor, params=None, model=None, min_peak_separation=None):
    """Cross-correlation initialisation: up to K points per pixel plus a background image."""
    params = params or InitParams()
    sep = min_peak_separation or params.min_peak_separation or max(1.0, 3 * sensor.irf.rms_width)
    model = model or LikelihoodModel(cube, sensor)
    T, P = model.n_bins, model.n_pixels
    pix, tau = _detect_peaks(model, params, sep)

    total = np.bincount(model.event_pixel, weights=model.z, minlength=P)
    bins, h, _, in_gate = model.support(pix, tau)
    window = in_gate & (h > 0)
    keys = pix[:, None] * T + bins
    pos = np.searchsorted(model.event_keys, keys)
    posc = np.minimum(pos, max(len(model.z) - 1, 0))
    hit = window & (pos < len(model.z))
    if len(model.z):
        hit &= model.event_keys[posc] == keys
    claimed_events = np.unique(posc[hit])
    claimed = np.bincount(model.event_pixel[claimed_events],
                          weights=model.z[claimed_events], minlength=P)
    b = np.maximum((total - claimed) / T, BACKGROUND_FLOOR)

    counts = np.where(hit, model.z[posc], 0.0).sum(axis=1)
    g = model.gain[pix]
    mass = h.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (counts / g - b[pix] * window.sum(axis=1)) / mass
    keep = np.isfinite(r) & (r > 0)
    pix, tau, r = pix[keep], tau[keep], r[keep]

    cloud = spawn_points(sensor, pix, tau, r)
    bg = BackgroundImage(b.reshape(sensor.n_rows, sensor.n_cols))
    return SceneState(cloud, bg, sensor)


# ---------------------------------------------------------------------------
# PALM iteration
# ---------------------------------------------------------------------------


def _safeguarded_step(evaluate, x, direction, nll0, config, lower=None):
    """Try x - s*direction for s = 1, beta, beta^2, ...; zero step if none helps."""
    s = 1.0
    for _ in range(config.max_backtracks + 1):
        cand = x - s * direction
        if lower is not None:
            cand = np.maximum(cand, lower)
        val = evaluate(cand)
        if val <= nll0:
            return cand, val, s
        s *= config.backtrack
    return x, nll0, 0.0


def _clip_to_frustum(positions, sensor):
    nf_r, nf_c = sensor.fine_shape
    out = positions.copy()
    edge = 1e-9 * sensor.pixel_pitch
    out[:, 0] = np.clip(out[:, 0], 0.0, nf_r * sensor.pixel_pitch - edge)
    out[:, 1] = np.clip(out[:, 1], 0.0, nf_c * sensor.pixel_pitch - edge)
    out[:, 2] = sensor.bins_to_depth(out[:, 2] / sensor.bin_resolution)
    return out


def palm_step(state, cube, config, model=None):
    """One depth -> intensity -> background sweep.  Returns ``(state, diagnostics)``."""
    sensor = state.sensor
    config = config.resolved(sensor)
    model = model or LikelihoodModel(cube, sensor)
    diag = {"timing": {}}
    clock = time.perf_counter

    # -- depth -----------------------------------------------------------------
    t0 = clock()
    pix, t, r, b = state.arrays()
    terms = model.evaluate(pix, t, r, b, grads=True)
    diag["nll_before"] = terms.nll
    g = model.gain[pix]
    if config.step_depth == "auto":
        curv = g * r * sensor.irf.fisher_factor()
        with np.errstate(divide="ignore", invalid="ignore"):
            direction = np.where(curv > 0, terms.grad_t / curv, 0.0)
    else:
        direction = config.step_depth * terms.grad_t
    direction = np.clip(direction, -config.max_depth_step, config.max_depth_step)
    t_new, nll_t, s_t = _safeguarded_step(
        lambda tt: model.evaluate(pix, sensor.clip_to_gate(tt), r, b).nll,
        t, direction, terms.nll, config)
    t_new = sensor.clip_to_gate(t_new)
    diag["nll_depth_step"] = nll_t
    diag["step_depth"] = s_t

    positions = state.cloud.positions.copy()
    positions[:, 2] = sensor.bins_to_depth(t_new)
    flagged = np.zeros(len(positions), bool)
    if len(positions):
        moved, flagged = apss_project(PointCloud(positions, r), config.apss,
                                      return_flags=True, workers=config.workers)
        positions = _clip_to_frustum(moved.positions, sensor)
    diag["isolated"] = int(flagged.sum())
    cloud = PointCloud(positions, r)
    diag["timing"]["depth"] = clock() - t0

    # -- intensity ---------------------------------------------------------------
    t0 = clock()
    pix, t, r, b = SceneState(cloud, state.background, sensor).arrays()
    terms = model.evaluate(pix, t, r, b, grads=True)
    diag["nll_depth"] = terms.nll
    g = model.gain[pix]
    if config.step_intensity == "auto":
        # EM-scaled step: x - (r / (g M)) grad is the Richardson-Lucy update
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(g * terms.mass > 0, r / (g * terms.mass), 0.0)
        direction = scale * terms.grad_r
    else:
        direction = config.step_intensity * terms.grad_r
    r_new, nll_r, s_r = _safeguarded_step(
        lambda rr: model.evaluate(pix, t, rr, b).nll, r, direction, terms.nll, config, lower=0.0)
    diag["nll_intensity_step"] = nll_r
    diag["step_intensity"] = s_r
    cloud = PointCloud(cloud.positions, r_new)
    if len(cloud):
        index = SpatialIndex(cloud.positions, config.knn_radius)
        cloud = knn_intensity_filter(cloud, config.knn_k, index, config.knn_radius)
    n_before = len(cloud)
    cloud = prune(cloud, config.r_min)
    diag["pruned"] = n_before - len(cloud)
    diag["timing"]["intensity"] = clock() - t0

    # -- background --------------------------------------------------------------
    t0 = clock()
    pix, t, r, b = SceneState(cloud, state.background, sensor).arrays()
    terms = model.evaluate(pix, t, r, b, grads=True)
    diag["nll_intensity"] = terms.nll
    if config.step_background == "auto":
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(model.gain > 0, b / (model.gain * model.n_bins), 0.0)
        direction = scale * terms.grad_b
    else:
        direction = config.step_background * terms.grad_b
    b_new, nll_b, s_b = _safeguarded_step(
        lambda bb: model.evaluate(pix, t, r, bb).nll, b, direction, terms.nll, config,
        lower=BACKGROUND_FLOOR)
    diag["nll_background_step"] = nll_b
    diag["step_background"] = s_b
    bg = BackgroundImage(b_new.reshape(state.background.shape))
    cutoff = config.background_cutoff()
    bg = identity_background(bg) if cutoff is None else fft_background_denoise(bg, cutoff)
    bg = BackgroundImage(np.maximum(bg.b, BACKGROUND_FLOOR))
    diag["timing"]["background"] = clock() - t0

    new_state = SceneState(cloud, bg, sensor)
    diag["nll_after"] = model.evaluate(*new_state.arrays()).nll
    diag["n_points"] = len(cloud)
    return new_state, diag


def reconstruct(cube, sensor, config=None, callback=None):
    """Initialise and iterate until ``max_iters`` or relative nll change < ``stop_tol``.

    Returns ``(cloud, background, report)``; ``report["timing"]`` holds wall-clock
    seconds per phase and is the only nondeterministic entry.
    """
    config = (config or ReconConfig()).resolved(sensor)
    model = LikelihoodModel(cube, sensor)
    timing = {"init": 0.0, "depth": 0.0, "intensity": 0.0, "background": 0.0}
    t0 = time.perf_counter()
    state = init_matched_filter(cube, sensor, config.init, model=model)
    timing["init"] = time.perf_counter() - t0
    history = [model.evaluate(*state.arrays()).nll]
    n_init = len(state.cloud)
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        state, diag = palm_step(state, cube, config, model=model)
        for k, v in diag["timing"].items():
            timing[k] += v
        history.append(diag["nll_after"])
        if callback is not None:
            callback(it, state, diag)
        prev, cur = history[-2], history[-1]
        if math.isfinite(prev) and abs(prev - cur) <= config.stop_tol * max(abs(prev), 1e-300):
            converged = True
            break
    report = {
        "iterations": it,
        "converged": converged,
        "final_nll": history[-1],
        "nll_history": history,
        "initial_points": n_init,
        "points": len(state.cloud),
        "timing": timing,
    }
    return state.cloud, state.background, report

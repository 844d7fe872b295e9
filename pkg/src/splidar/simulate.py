"""Forward simulator: parametric scenes, ground truth and Poisson photon cubes.

Counts are drawn with a counter-based generator keyed by
(seed, stream, pixel, bin, draw), so a cube does not depend on the order
in which bins are visited.  Signal and background photons come from
separate streams; their sum is Poisson with the total rate, and the
realized signal-to-background ratio is known exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .data import (SPEED_OF_LIGHT, PhotonCube, PointCloud, SensorModel, gaussian_irf,
                   parse_keyvalue)
from .likelihood import LikelihoodModel

SIGNAL_STREAM = 0
BACKGROUND_STREAM = 1

# ---------------------------------------------------------------------------
# Counter-based random numbers
# ---------------------------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(x):
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def counter_uniform(seed, stream, index, draw):
    """Uniform doubles in (0, 1) that depend only on their four integer keys."""
    index = np.asarray(index).astype(np.uint64)
    draw = np.asarray(draw).astype(np.uint64)
    with np.errstate(over="ignore"):
        x = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLDEN + np.uint64(stream))
        x = _mix(x ^ (index * _GOLDEN))
        x = _mix(x ^ (draw + _GOLDEN))
    return ((x >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def poisson_counter(lam, seed, stream=0, index=None):
    """Poisson draws for rates ``lam``; element k uses counter ``index[k]``.

    Inversion below 10, PTRD transformed rejection (Hormann 1993) above.
    """
    lam = np.asarray(lam, np.float64)
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("rates must be finite and nonnegative")
    flat = lam.ravel()
    index = np.arange(flat.size) if index is None else np.asarray(index).ravel()
    out = np.zeros(flat.size, np.int64)

    small = np.nonzero((flat > 0) & (flat < 10))[0]
    if len(small):
        mu = flat[small]
        u = counter_uniform(seed, stream, index[small], 0)
        p = np.exp(-mu)
        cdf = p.copy()
        k = np.zeros(len(small), np.int64)
        todo = u > cdf
        n = 0
        while np.any(todo) and n < 200:
            n += 1
            p = np.where(todo, p * mu / n, p)
            cdf = np.where(todo, cdf + p, cdf)
            k += todo
            todo &= u > cdf
        out[small] = k

    big = np.nonzero(flat >= 10)[0]
    if len(big):
        out[big] = _ptrd(flat[big], seed, stream, index[big])
    return out.reshape(lam.shape)


def _ptrd(mu, seed, stream, index):
    smu = np.sqrt(mu)
    b = 0.931 + 2.53 * smu
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2)
    out = np.zeros(len(mu), np.int64)
    todo = np.arange(len(mu))
    draw = 1
    while len(todo):
        m, bb, aa = mu[todo], b[todo], a[todo]
        U = counter_uniform(seed, stream, index[todo], draw) - 0.5
        V = counter_uniform(seed, stream, index[todo], draw + 1)
        draw += 2
        us = 0.5 - np.abs(U)
        k = np.floor((2 * aa / us + bb) * U + m + 0.43)
        quick = (us >= 0.07) & (V <= vr[todo])
        reject = (k < 0) | ((us < 0.013) & (V > us))
        with np.errstate(divide="ignore", invalid="ignore"):
            logv = np.log(V * inv_alpha[todo] / (aa / (us * us) + bb))
            slow = logv <= -m + k * np.log(m) - gammaln(k + 1)
        accept = quick | (~reject & slow)
        out[todo[accept]] = k[accept].astype(np.int64)
        todo = todo[~accept]
    return out


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Surface:
    """A plane ``z = depth + slope_x (x - x0) + slope_y (y - y0)`` or an ellipsoidal cap.

    ``kind="cap"`` is a height map ``z = depth - height * sqrt(1 - q)`` with
    ``q = ((x - cx)/rx)^2 + ((y - cy)/ry)^2``, present where ``q < 1``.
    Extent and holes are rectangles ``(x0, x1, y0, y1)`` in metres; a
    periodic hole pattern (``hole_period``, ``hole_size``) models a net.
    """

    kind: str = "plane"
    depth: float = 1.0
    reflectivity: float = 1.0
    slope_x: float = 0.0
    slope_y: float = 0.0
    extent: tuple | None = None
    holes: tuple = ()
    hole_period: float | None = None
    hole_size: float = 0.0
    center: tuple = (0.0, 0.0)
    radii: tuple = (1.0, 1.0)
    height: float = 0.0

    def __post_init__(self):
        if self.kind not in ("plane", "cap"):
            raise ValueError(f"unknown surface kind {self.kind!r}")
        if self.reflectivity < 0:
            raise ValueError("reflectivity must be nonnegative")
        if self.kind == "cap" and min(self.radii) <= 0:
            raise ValueError("cap radii must be positive")

    def sample(self, x, y):
        """Depth at (x, y) and a mask of where the surface exists."""
        if self.kind == "plane":
            ox = self.extent[0] if self.extent else 0.0
            oy = self.extent[2] if self.extent else 0.0
            z = self.depth + self.slope_x * (x - ox) + self.slope_y * (y - oy)
            present = np.ones(np.shape(x), bool)
        else:
            q = ((x - self.center[0]) / self.radii[0]) ** 2 \
                + ((y - self.center[1]) / self.radii[1]) ** 2
            present = q < 1
            z = self.depth - self.height * np.sqrt(np.clip(1 - q, 0, None))
        if self.extent:
            x0, x1, y0, y1 = self.extent
            present &= (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
        for x0, x1, y0, y1 in self.holes:
            present &= ~((x >= x0) & (x < x1) & (y >= y0) & (y < y1))
        if self.hole_period:
            px = np.mod(x, self.hole_period)
            py = np.mod(y, self.hole_period)
            present &= ~((px < self.hole_size) & (py < self.hole_size))
        return z, present


@dataclass(frozen=True)
class SceneSpec:
    surfaces: tuple
    n_rows: int = 64
    n_cols: int = 64
    n_bins: int = 200
    superres: int = 1
    pixel_pitch: float = 0.02        # fine pixel, metres
    bin_resolution: float = 0.01     # metres per bin
    irf_sigma: float = 2.0           # bins
    signal_ppp: float | None = None  # mean signal photons per coarse pixel
    sbr: float | None = None         # total signal / total background
    ambient: float | None = None     # background photons per bin (overrides sbr)
    hot_pixels: tuple = ()           # (i, j, extra photons per bin)
    supersample: int = 4
    min_coverage: float = 0.25

    def __post_init__(self):
        if any(s.reflectivity < 0 for s in self.surfaces):
            raise ValueError("reflectivities must be nonnegative")
        if self.sbr is not None and self.ambient is None:
            if self.sbr <= 0 or not self.signal_ppp:
                raise ValueError("sbr needs a positive signal_ppp, or give ambient")
        if not 0 < self.min_coverage <= 1:
            raise ValueError("min_coverage must be in (0, 1]")

    @property
    def gate(self):
        return self.n_bins * self.bin_resolution

    def sensor(self):
        return SensorModel(self.n_rows, self.n_cols, self.n_bins, gaussian_irf(self.irf_sigma),
                           bin_resolution=self.bin_resolution, pixel_pitch=self.pixel_pitch,
                           superres=self.superres)


_FLOAT_KEYS = ("pixel_pitch", "bin_resolution", "irf_sigma", "signal_ppp", "sbr", "ambient",
               "min_coverage")
_INT_KEYS = ("n_rows", "n_cols", "n_bins", "superres", "supersample")


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def parse_scene(text):
    """Scene spec from key = value text with repeated ``[surface]`` sections."""
    top, sections = parse_keyvalue(text)
    kw = {}
    for key, value in top.items():
        if key in _FLOAT_KEYS:
            kw[key] = float(value)
        elif key in _INT_KEYS:
            kw[key] = int(value)
        elif key == "hot_pixels":
            kw[key] = tuple(tuple(float(v) for v in item.split(":"))
                            for item in value.split(",") if item.strip())
        else:
            raise ValueError(f"unknown scene key {key!r}")
    surfaces = []
    for name, sec in sections:
        if name != "surface":
            raise ValueError(f"unknown section [{name}]")
        s = {}
        for key, value in sec.items():
            if key == "kind":
                s[key] = value
            elif key in ("extent", "center", "radii"):
                s[key] = _floats(value)
            elif key == "holes":
                s[key] = tuple(_floats(h) for h in value.split(";") if h.strip())
            else:
                s[key] = float(value)
        surfaces.append(Surface(**s))
    return SceneSpec(tuple(surfaces), **kw)


def read_scene(path):
    return parse_scene(Path(path).read_text())


def format_scene(spec):
    lines = []
    for f in SceneSpec.__dataclass_fields__:
        v = getattr(spec, f)
        if f in ("surfaces", "hot_pixels") or v is None:
            continue
        lines.append(f"{f} = {v!r}")
    if spec.hot_pixels:
        lines.append("hot_pixels = " + ", ".join(":".join(repr(v) for v in h)
                                                 for h in spec.hot_pixels))
    default = Surface()
    for s in spec.surfaces:
        lines.append("\n[surface]")
        for f in Surface.__dataclass_fields__:
            v = getattr(s, f)
            if v == getattr(default, f) and f != "kind":
                continue
            if f == "holes":
                v = "; ".join(" ".join(repr(c) for c in h) for h in v)
            elif isinstance(v, tuple):
                v = " ".join(repr(c) for c in v)
            elif not isinstance(v, str):
                v = repr(v)
            lines.append(f"{f} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Ground truth and cubes
# ---------------------------------------------------------------------------


def _visible_layers(spec, sensor):
    """Per fine pixel and surface: visible coverage and mean visible depth."""
    nf_r, nf_c = sensor.fine_shape
    n = spec.supersample
    sub = (np.arange(n) + 0.5) / n
    fi, fj = np.meshgrid(np.arange(nf_r), np.arange(nf_c), indexing="ij")
    x = (fi[..., None, None] + sub[:, None]) * sensor.pixel_pitch
    y = (fj[..., None, None] + sub[None, :]) * sensor.pixel_pitch
    x, y = np.broadcast_arrays(x, y)
    S = len(spec.surfaces)
    depth = np.full((S,) + x.shape, np.inf)
    for k, surf in enumerate(spec.surfaces):
        z, present = surf.sample(x, y)
        z = np.broadcast_to(z, x.shape)
        if np.any(present & ((z < 0) | (z >= spec.gate))):
            raise ValueError(f"surface {k} leaves the range gate [0, {spec.gate})")
        depth[k][present] = z[present]
    front = np.argmin(depth, axis=0)
    seen = np.isfinite(np.min(depth, axis=0))
    coverage = np.zeros((S, nf_r, nf_c))
    mean_depth = np.zeros((S, nf_r, nf_c))
    for k in range(S):
        vis = seen & (front == k)
        cnt = vis.sum(axis=(-2, -1))
        coverage[k] = cnt / n ** 2
        with np.errstate(invalid="ignore"):
            mean_depth[k] = np.where(vis, depth[k], 0).sum(axis=(-2, -1)) / np.maximum(cnt, 1)
    return coverage, mean_depth


def scene_points(spec, sensor):
    """All surface patches ``(positions, unit intensities, truth mask)`` on the fine grid."""
    coverage, mean_depth = _visible_layers(spec, sensor)
    refl = np.array([s.reflectivity for s in spec.surfaces])
    k, fi, fj = np.nonzero(coverage > 0)
    x, y = sensor.fine_centres(fi, fj)
    pos = np.column_stack([x, y, mean_depth[k, fi, fj]])
    r = refl[k] * coverage[k, fi, fj]
    truth = coverage[k, fi, fj] >= spec.min_coverage
    return pos, r, truth


@dataclass
class SimReport:
    signal_photons: int
    background_photons: int
    mean_photons_per_pixel: float
    mean_signal_per_pixel: float
    realized_sbr: float
    expected_signal_per_pixel: float
    ambient: float
    truth: PointCloud = field(repr=False)

    def to_mapping(self):
        return {k: v for k, v in self.__dict__.items() if k != "truth"} | {
            "truth_points": len(self.truth)}


def simulate_cube(spec, sensor=None, seed=0):
    """Draw a photon cube for ``spec``; returns ``(cube, SimReport)``."""
    sensor = sensor or spec.sensor()
    pos, r_unit, truth_mask = scene_points(spec, sensor)
    model = LikelihoodModel(None, sensor)
    T, P = sensor.n_bins, sensor.n_pixels
    i, j, t = sensor.to_lidar(pos)
    pix = i * sensor.n_cols + j

    signal_unit = model.dense_rates(pix, t, r_unit, np.zeros(P))
    scale = 1.0
    if spec.signal_ppp is not None:
        total = signal_unit.sum()
        scale = spec.signal_ppp * P / total if total > 0 else 0.0
    signal_rate = signal_unit * scale
    if spec.ambient is not None:
        ambient = spec.ambient
    elif spec.sbr is not None:
        ambient = signal_rate.sum() / (spec.sbr * T * model.gain.sum())
    else:
        ambient = 0.0
    b = np.full((sensor.n_rows, sensor.n_cols), ambient)
    for i, j, extra in spec.hot_pixels:
        b[int(i), int(j)] += extra
    bg_rate = (model.gain * b.ravel())[:, None] * np.ones(T)

    idx = np.arange(P * T)
    sig = poisson_counter(signal_rate, seed, SIGNAL_STREAM, idx)
    bg = poisson_counter(bg_rate, seed, BACKGROUND_STREAM, idx)
    counts = (sig + bg).reshape(sensor.n_rows, sensor.n_cols, T)
    cube = PhotonCube.from_dense(counts, bin_width=2 * sensor.bin_resolution / SPEED_OF_LIGHT)

    n_sig, n_bg = int(sig.sum()), int(bg.sum())
    truth = PointCloud(pos[truth_mask], r_unit[truth_mask] * scale)
    report = SimReport(
        signal_photons=n_sig, background_photons=n_bg,
        mean_photons_per_pixel=(n_sig + n_bg) / P, mean_signal_per_pixel=n_sig / P,
        realized_sbr=n_sig / n_bg if n_bg else float("inf"),
        expected_signal_per_pixel=float(signal_rate.sum() / P), ambient=float(ambient),
        truth=truth)
    return cube, report


# ---------------------------------------------------------------------------
# Operating-condition sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("photons_per_pixel", "sbr", "seeds", "recall", "recall_std", "rmse",
                 "false_rate", "baseline_recall")


def sweep_operating_conditions(spec, ppp_values, sbr_values, config=None, seeds=(0, 1, 2, 3, 4),
                               tau=0.04):
    """Recall / RMSE over a grid of total photons per pixel and SBR.

    A cell (n, s) splits n photons per pixel into n s / (1 + s) signal and
    n / (1 + s) background, so ``s = 0`` is pure background.
    """
    from .evaluate import baseline_xcorr, evaluate
    from .reconstruct import reconstruct

    rows = []
    sensor = spec.sensor()
    for n in ppp_values:
        for s in sbr_values:
            cell = replace(spec, signal_ppp=n * s / (1 + s), sbr=None,
                           ambient=n / ((1 + s) * spec.n_bins))
            rec, rmse, false, base = [], [], [], []
            for seed in seeds:
                cube, rep = simulate_cube(cell, sensor, seed)
                cloud, _, _ = reconstruct(cube, sensor, config)
                res = evaluate(cloud, rep.truth, tau, pitch=sensor.pixel_pitch)
                rec.append(res.recall)
                rmse.append(res.depth_rmse)
                false.append(res.false_rate)
                base.append(evaluate(baseline_xcorr(cube, sensor), rep.truth, tau,
                                     pitch=sensor.pixel_pitch).recall)
            rows.append({"photons_per_pixel": n, "sbr": s, "seeds": len(seeds),
                         "recall": float(np.mean(rec)), "recall_std": float(np.std(rec)),
                         "rmse": float(np.mean(rmse)), "false_rate": float(np.mean(false)),
                         "baseline_recall": float(np.mean(base))})
    return rows


def table_to_csv(rows, columns=None):
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()

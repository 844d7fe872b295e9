"""Poisson negative log-likelihood of a photon cube and its block gradients.

The rate in pixel p and bin t is

    lam[p, t] = g[p] * (sum_{n in p} r_n h(t - t_n) + b[p])

and the objective is sum(lam - z log lam) with log z! dropped.  Only the
bins under each point's IRF support and the active (nonzero) bins are
visited; the sum of lam over the whole gate uses the per-point IRF mass
inside the gate, so zero-count bins never need a log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BackgroundImage, PhotonCube, PointCloud, SensorModel


@dataclass(frozen=True, eq=False)
class SceneState:
    """The unknowns (t, r, b) as a point cloud plus a background image."""

    cloud: PointCloud
    background: BackgroundImage
    sensor: SensorModel

    def __post_init__(self):
        s = self.sensor
        if self.background.shape != (s.n_rows, s.n_cols):
            raise ValueError("background shape does not match the sensor")

    def arrays(self):
        """Flat pixel index, depth (bins), intensity and flat background."""
        i, j, t = self.cloud.lidar_coords(self.sensor)
        return i * self.sensor.n_cols + j, t, self.cloud.intensities, self.background.b.ravel()


@dataclass
class Terms:
    nll: float
    nll_pixel: np.ndarray
    mass: np.ndarray           # per point: IRF mass inside the gate
    grad_t: np.ndarray | None = None
    grad_r: np.ndarray | None = None
    grad_b: np.ndarray | None = None


class LikelihoodModel:
    """Event layout of one (cube, sensor) pair, reused across evaluations."""

    def __init__(self, cube, sensor):
        self.sensor = sensor
        self.n_bins = sensor.n_bins
        self.n_pixels = sensor.n_pixels
        self.gain = sensor.effective_gain()
        if cube is None:
            cube = PhotonCube.empty(sensor.n_rows, sensor.n_cols, sensor.n_bins)
        if cube.shape != (sensor.n_rows, sensor.n_cols, sensor.n_bins):
            raise ValueError(f"cube shape {cube.shape} does not match sensor")
        epix = cube.event_pixels()
        live = self.gain[epix] > 0
        self.event_pixel = epix[live]
        self.event_keys = epix[live] * self.n_bins + cube.bins[live]
        self.z = cube.counts[live].astype(np.float64)
        self.irf = sensor.irf
        self._width = self.irf.support_width_bins
        self._lo = self.irf.support[0]

    def support(self, pix, t):
        """Bins under each point's IRF support: ``(bins, h, h', in_gate)``, each (N, W)."""
        first = np.ceil(t + self._lo).astype(np.int64)
        bins = first[:, None] + np.arange(self._width)
        in_gate = (bins >= 0) & (bins < self.n_bins)
        h, dh = self.irf.evaluate(bins - t[:, None], pix[:, None])
        h = np.where(in_gate, h, 0.0)
        dh = np.where(in_gate, dh, 0.0)
        return bins, h, dh, in_gate

    def evaluate(self, pix, t, r, b, grads=False):
        pix = np.asarray(pix, np.int64)
        t = np.asarray(t, np.float64)
        r = np.asarray(r, np.float64)
        b = np.asarray(b, np.float64).ravel()
        P, E = self.n_pixels, len(self.z)
        g_pt = self.gain[pix]
        bins, h, dh, in_gate = self.support(pix, t)
        mass = h.sum(axis=1)

        keys = pix[:, None] * self.n_bins + bins
        pos = np.searchsorted(self.event_keys, keys)
        posc = np.minimum(pos, max(E - 1, 0))
        hit = in_gate & (pos < E)
        if E:
            hit &= self.event_keys[posc] == keys
        contrib = (g_pt * r)[:, None] * h
        signal = np.bincount(posc[hit], weights=contrib[hit], minlength=E)
        lam = self.gain[self.event_pixel] * b[self.event_pixel] + signal

        with np.errstate(divide="ignore"):
            log_lam = np.log(lam)
        zlog = np.where(self.z > 0, self.z * log_lam, 0.0)
        rate_mass = np.bincount(pix, weights=g_pt * r * mass, minlength=P) \
            + self.gain * self.n_bins * b
        nll_pixel = rate_mass - np.bincount(self.event_pixel, weights=zlog, minlength=P)
        terms = Terms(float(np.sum(nll_pixel)), nll_pixel, mass)
        if not grads:
            return terms

        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = self.z / lam
        # residual factor (1 - z/lam) on every support bin; z = 0 off events
        resid = np.ones_like(h)
        resid[hit] -= ratio[posc[hit]]
        terms.grad_r = g_pt * np.sum(resid * h, axis=1)
        terms.grad_t = -g_pt * r * np.sum(resid * dh, axis=1)
        terms.grad_b = self.gain * (self.n_bins - np.bincount(
            self.event_pixel, weights=ratio, minlength=P))
        return terms

    def dense_rates(self, pix, t, r, b):
        """Full (P, T) rate array; used by the simulator and for checks."""
        pix = np.asarray(pix, np.int64)
        t = np.asarray(t, np.float64)
        b = np.asarray(b, np.float64).ravel()
        lam = np.repeat((self.gain * b)[:, None], self.n_bins, axis=1)
        if len(pix):
            bins, h, _, in_gate = self.support(pix, t)
            contrib = (self.gain[pix] * np.asarray(r, np.float64))[:, None] * h
            keys = (pix[:, None] * self.n_bins + bins)[in_gate]
            flat = lam.reshape(-1)
            flat += np.bincount(keys, weights=contrib[in_gate], minlength=flat.size)
        return lam


def _model(state, cube):
    return LikelihoodModel(cube, state.sensor)


def rate(state, i, j, t):
    """Expected photon count of pixel (i, j) in integer bin ``t``."""
    s = state.sensor
    if not (0 <= i < s.n_rows and 0 <= j < s.n_cols and 0 <= t < s.n_bins):
        raise IndexError(f"({i}, {j}, {t}) outside the cube")
    p = i * s.n_cols + j
    g = s.effective_gain()[p]
    pix, tn, r, b = state.arrays()
    mine = pix == p
    h, _ = s.irf.evaluate(t - tn[mine], pix[mine])
    return float(g * (np.sum(r[mine] * h) + b[p]))


def rate_cube(state):
    """Dense (n_rows, n_cols, n_bins) array of expected counts."""
    s = state.sensor
    lam = LikelihoodModel(None, s).dense_rates(*state.arrays())
    return lam.reshape(s.n_rows, s.n_cols, s.n_bins)


def nll(state, cube):
    """Negative log-likelihood (without the log z! constant); +inf if infeasible."""
    return _model(state, cube).evaluate(*state.arrays()).nll


def grad_depth(state, cube):
    return _model(state, cube).evaluate(*state.arrays(), grads=True).grad_t


def grad_intensity(state, cube):
    return _model(state, cube).evaluate(*state.arrays(), grads=True).grad_r


def grad_background(state, cube):
    """Per-pixel gradient, shaped like the background image."""
    g = _model(state, cube).evaluate(*state.arrays(), grads=True).grad_b
    return g.reshape(state.background.shape)


def outside_gate(state):
    """Points whose whole IRF support misses the gate (their gradients are 0)."""
    _, _, t = state.cloud.lidar_coords(state.sensor, check=False)
    lo, hi = state.sensor.irf.support
    return (t + hi <= 0) | (t + lo >= state.sensor.n_bins - 1)

"""Independent brute-force reference implementations used by the tests."""

import math

import numpy as np

from splidar.data import IRF, BackgroundImage, PhotonCube, PointCloud, SensorModel, gaussian_irf
from splidar.likelihood import LikelihoodModel, SceneState


def dense_rates(state):
    """lam[i, j, t] by looping over pixels and points, one bin at a time."""
    s = state.sensor
    g = np.where(s.dead_mask, 0.0, s.gain)
    i, j, t = state.cloud.lidar_coords(s)
    r = state.cloud.intensities
    lam = np.zeros((s.n_rows, s.n_cols, s.n_bins))
    for a in range(s.n_rows):
        for b in range(s.n_cols):
            mine = (i == a) & (j == b)
            for tb in range(s.n_bins):
                h, _ = s.irf.evaluate(tb - t[mine], a * s.n_cols + b)
                lam[a, b, tb] = g[a, b] * (np.sum(r[mine] * h) + state.background.b[a, b])
    return lam


def dense_nll(state, cube):
    lam = dense_rates(state)
    z = cube.to_dense().astype(float)
    total = 0.0
    for lv, zv in zip(lam.ravel(), z.ravel()):
        if zv > 0:
            if lv <= 0:
                return math.inf
            total += lv - zv * math.log(lv)
        else:
            total += lv
    return total


def random_irf(rng):
    if rng.random() < 0.5:
        return gaussian_irf(rng.uniform(0.6, 3.0), spacing=rng.choice([0.5, 1.0]))
    k = int(rng.integers(1, 9))
    return IRF(rng.random(k) + 0.05, spacing=float(rng.uniform(0.4, 1.6)),
               start=float(-rng.uniform(0, k)))


def random_instance(rng, max_side=8, max_bins=64, max_points=5):
    """Random sensor, scene state and Poisson cube drawn near the model."""
    R = int(rng.integers(1, max_side + 1))
    C = int(rng.integers(1, max_side + 1))
    T = int(rng.integers(8, max_bins + 1))
    dead = rng.random((R, C)) < 0.1
    sensor = SensorModel(R, C, T, random_irf(rng), bin_resolution=float(rng.uniform(0.01, 0.1)),
                         pixel_pitch=float(rng.uniform(0.01, 0.1)),
                         gain=rng.uniform(0.5, 1.5, (R, C)), dead_mask=dead)
    n = rng.integers(0, max_points + 1, size=R * C)
    pix = np.repeat(np.arange(R * C), n)
    t = rng.uniform(0, T, len(pix))
    fi, fj = pix // C, pix % C
    x, y = sensor.fine_centres(fi, fj)
    cloud = PointCloud(np.column_stack([x, y, t * sensor.bin_resolution]),
                       rng.uniform(0.2, 6.0, len(pix)))
    bg = BackgroundImage(rng.uniform(0.02, 1.0, (R, C)))
    state = SceneState(cloud, bg, sensor)
    lam = LikelihoodModel(None, sensor).dense_rates(*state.arrays()).reshape(R, C, T)
    z = rng.poisson(lam * rng.uniform(0.5, 1.5))
    cube = PhotonCube.from_dense(z)
    return state, cube


def brute_knn_mean(positions, values, k, radius):
    out = np.empty(len(values))
    for a in range(len(values)):
        d = np.linalg.norm(positions - positions[a], axis=1)
        order = sorted((d[b], b != a, b) for b in range(len(values)) if d[b] <= radius)
        out[a] = np.mean([values[b] for _, _, b in order[:k]])
    return out


def five_point(f, x, h):
    return (f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)) / (12 * h)


def knot_distance(irf, t, n_bins):
    """Distance from depth ``t`` (bins) to the nearest place where a bin offset hits an IRF knot."""
    u = (np.arange(n_bins) - t - irf.start) / irf.spacing
    return float(np.min(np.abs(u - np.round(u))) * irf.spacing)


def fd_gradients(model, pix, t, r, b, h=1e-3):
    """Five-point finite differences of the per-pixel nll for every parameter.

    A point only touches its own pixel, so the k-th point of every pixel is
    perturbed at once and each pixel's nll read separately.  Depth steps stay
    inside one cubic piece of the IRF.
    """
    gt, gr = np.empty(len(t)), np.empty(len(t))
    slot = np.zeros(len(pix), np.int64)
    for p in np.unique(pix):
        sel = np.flatnonzero(pix == p)
        slot[sel] = np.arange(len(sel))

    def stencil(param, sel, x, step, owner):
        def f(v):
            args = {"t": t, "r": r, "b": b}
            args[param] = args[param].copy()
            args[param][sel] = v
            return model.evaluate(pix, args["t"], args["r"], args["b"]).nll_pixel[owner]
        return five_point(f, x, step)

    for k in range(slot.max() + 1 if len(slot) else 0):
        sel = np.flatnonzero(slot == k)
        ht = np.array([min(h, 0.24 * knot_distance(model.sensor.irf, t[n], model.n_bins))
                       for n in sel])
        owner = pix[sel]
        safe = np.where(ht > 0, ht, h)
        gt[sel] = np.where(ht > 0, stencil("t", sel, t[sel], safe, owner), np.nan)
        gr[sel] = stencil("r", sel, r[sel], h * r[sel], owner)
    every = np.arange(len(b))
    gb = stencil("b", every, b, h * b, every)
    return gt, gr, gb


def rel_err(a, n, floor=1e-3):
    a, n = np.asarray(a, float), np.asarray(n, float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))

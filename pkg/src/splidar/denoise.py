"""Point-cloud and background denoisers used as proximal surrogates.

All point denoisers read an immutable snapshot of the cloud and write each
output point to its own slot, so results do not depend on chunking or on
the number of worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .data import BackgroundImage, PointCloud

@dataclass
class Neighbours:
    """Padded neighbour lists; padding is index -1, distance inf."""

    index: np.ndarray
    distance: np.ndarray
    count: np.ndarray


class SpatialIndex:
    """Fixed-radius and k-nearest neighbour search over a static point set (KD-tree)."""

    def __init__(self, positions, radius):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.radius = float(radius)
        self._tree = cKDTree(self.positions)

    def __len__(self):
        return len(self.positions)

    def _pad(self, q, cand, d, M):
        count = np.bincount(q, minlength=M)
        rank = np.arange(len(q)) - np.repeat(np.cumsum(count) - count, count)
        K = int(count.max()) if M else 0
        index = np.full((M, K), -1, np.int64)
        dist = np.full((M, K), np.inf)
        index[q, rank] = cand
        dist[q, rank] = d
        return Neighbours(index, dist, count)

    def _order(self, q, cand, d, self_index):
        """Sort by query, own point first, distance, then candidate coordinates."""
        key = d if self_index is None else np.where(cand == np.asarray(self_index)[q], -1.0, d)
        p = self.positions[cand]
        return np.lexsort((p[:, 2], p[:, 1], p[:, 0], key, q))

    def query(self, queries, radius=None, max_neighbors=None, self_index=None, ordered=True):
        """Points within ``radius`` (inclusive) of each query.

        Ordered lists put the query's own point (``self_index``) first, then
        sort by distance and break exact ties by coordinates, so the result
        does not depend on point order.  With ``ordered=False`` the lists
        keep a fixed but unsorted order, which is cheaper when only the set
        of neighbours matters.
        """
        radius = self.radius if radius is None else float(radius)
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        M = len(queries)
        if M == 0 or len(self) == 0:
            return Neighbours(np.zeros((M, 0), np.int64), np.zeros((M, 0)),
                              np.zeros(M, np.int64))
        if max_neighbors is not None:
            return self._knn(queries, radius, int(max_neighbors), self_index)
        q, cand, d = self.pairs(queries, radius)
        if ordered:
            order = self._order(q, cand, d, self_index)
            q, cand, d = q[order], cand[order], d[order]
        return self._pad(q, cand, d, M)

    def pairs(self, queries, radius=None):
        """Flat ``(query, point, distance)`` arrays of all pairs within ``radius``, by query."""
        radius = self.radius if radius is None else float(radius)
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(queries) == 0 or len(self) == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        p = cKDTree(queries).sparse_distance_matrix(self._tree, radius, output_type="ndarray")
        order = np.argsort(p["i"], kind="stable")
        return p["i"][order], p["j"][order], p["v"][order]

    def _knn(self, queries, radius, k, self_index):
        M = len(queries)
        bound = np.nextafter(radius, np.inf)       # the tree's bound is strict
        kq = min(k + 4, len(self))
        while True:
            d, cand = self._tree.query(queries, kq, distance_upper_bound=bound)
            d, cand = d.reshape(M, kq), cand.reshape(M, kq)
            # an exact tie at the k-th distance may continue past the last column
            full = np.isfinite(d[:, -1])
            if kq >= len(self) or not np.any(full & (d[:, -1] == d[:, min(k, kq) - 1])):
                break
            kq = min(2 * kq, len(self))
        found = np.isfinite(d)
        q = np.repeat(np.arange(M), found.sum(axis=1))
        cand, d = cand[found], d[found]
        order = self._order(q, cand, d, self_index)
        q, cand, d = q[order], cand[order], d[order]
        nb = self._pad(q, cand, d, M)
        keep = min(k, nb.index.shape[1])
        return Neighbours(nb.index[:, :keep], nb.distance[:, :keep], np.minimum(nb.count, k))


@dataclass(frozen=True)
class ApssParams:
    kernel_radius: float
    min_neighbors: int = 6
    sphere_degeneracy_eps: float = 1e-6
    projection: str = "closest"   # "closest" point, or along the line of sight ("ray")

    def __post_init__(self):
        if self.kernel_radius <= 0:
            raise ValueError("kernel_radius must be positive")
        if self.min_neighbors < 4:
            raise ValueError("min_neighbors must be at least 4")
        if self.projection not in ("closest", "ray"):
            raise ValueError("projection must be 'closest' or 'ray'")


def kernel_weight(d, radius):
    """Compact quartic kernel (1 - (d/radius)^2)^4 on d < radius."""
    x = np.asarray(d, dtype=np.float64) / radius
    return np.where(x < 1.0, (1.0 - x * x) ** 4, 0.0)


def _smaller_root(a, b, c):
    """Root of a s^2 + b s + c = 0 closest to zero; nan when there is none."""
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        den = -b - np.copysign(np.sqrt(disc), b)
        s = np.where(a == 0, -c / b, 2 * c / den)
    return np.where(disc >= 0, s, np.nan)


class _Pairs:
    """Neighbour pairs ``(q, j)`` of one chunk, in local coordinates scaled by R."""

    def __init__(self, points, q, j, d, queries, R):
        self.q, self.j, self.M = q, j, len(queries)
        self.kernel = kernel_weight(d, R)
        self.X = (points[j] - queries[q]) / R
        self.sq = np.sum(self.X * self.X, axis=1)


class _Frame:
    """Kernel-weighted neighbourhood moments, weights normalised per query.

    Per-query sums of per-pair quantities are sparse matrix-vector products.
    """

    def __init__(self, pairs, valid=None):
        self.pairs = pairs
        q, M = pairs.q, pairs.M
        w = pairs.kernel if valid is None else np.where(valid[pairs.j], pairs.kernel, 0.0)
        sw = np.bincount(q, weights=w, minlength=M)
        self.ok = sw > 0
        w = w / np.where(self.ok, sw, 1.0)[q]
        # pairs arrive grouped by query, so the CSR layout is direct
        indptr = np.concatenate([[0], np.cumsum(np.bincount(q, minlength=M))])
        self.W = sparse.csr_matrix((w, np.arange(len(q)), indptr), shape=(M, len(q)))
        X = [np.ascontiguousarray(pairs.X[:, a]) for a in range(3)]
        first = self.sum(X + [X[a] * X[b] for a, b in _UPPER])
        self.mean = first[:, :3]
        outer = np.empty((M, 3, 3))
        for c, (a, b) in enumerate(_UPPER):
            outer[:, a, b] = outer[:, b, a] = first[:, 3 + c]
        self.cov = outer - self.mean[:, :, None] * self.mean[:, None, :]
        evals, evecs = np.linalg.eigh(self.cov)
        self.pca = evecs[:, :, 0]
        # collinear neighbourhoods have no normal direction
        self.ok &= evals[:, 1] > 1e-12 * np.maximum(evals[:, 2], 1e-300)

    def sum(self, columns):
        """Weighted per-query sums of each per-pair vector in ``columns``, as (M, k)."""
        return np.column_stack([self.W @ c for c in columns])


_UPPER = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def _point_normals(frame):
    """Unit normals from the gradient of a Taubin-normalised algebraic sphere.

    The fit minimises sum w u(x)^2 / sum w |grad u(x)|^2; its gradient at the
    query is exact on noiseless spheres and planes.  Falls back to the PCA
    normal when the fit is ambiguous.
    """
    M, mean, pca = frame.pairs.M, frame.mean, frame.pca
    X, sq = frame.pairs.X, frame.pairs.sq
    m = frame.sum([sq] + [X[:, a] * sq for a in range(3)] + [sq * sq])
    msq = m[:, 0]
    # u0 eliminated: residual ul.(x - mean) + uq (|x|^2 - mean |x|^2)
    B = np.zeros((M, 4, 4))
    B[:, :3, :3] = frame.cov
    B[:, :3, 3] = B[:, 3, :3] = m[:, 1:4] - mean * msq[:, None]
    B[:, 3, 3] = m[:, 4] - msq * msq
    E = np.zeros((M, 4, 4))
    E[:, :3, :3] = np.eye(3)
    E[:, :3, 3] = E[:, 3, :3] = 2 * mean
    E[:, 3, 3] = 4 * msq
    L = np.linalg.cholesky(E + 1e-14 * np.eye(4))
    Linv = np.linalg.inv(L)
    mu, vec = np.linalg.eigh(Linv @ B @ np.swapaxes(Linv, 1, 2))
    ul = np.einsum("mji,mj->mi", Linv, vec[:, :, 0])[:, :3]
    n = np.linalg.norm(ul, axis=1)
    ambiguous = (mu[:, 1] <= 1e-12 * np.maximum(mu[:, 3], 1e-300)) | (n == 0)
    normal = np.where(ambiguous[:, None], pca, ul / np.where(n > 0, n, 1.0)[:, None])
    normal *= np.where(np.sum(normal * pca, axis=1) < 0, -1.0, 1.0)[:, None]
    return np.where(frame.ok[:, None], normal, np.nan)


def _apss_fit(frame, normals, qnormals, queries, params):
    """Fit algebraic spheres to neighbour positions and normals, then project."""
    R = params.kernel_radius
    pairs = frame.pairs
    M = pairs.M
    mean = frame.mean
    ok = frame.ok & np.all(np.isfinite(qnormals), axis=1)
    ref = np.where(np.isfinite(qnormals), qnormals, frame.pca)
    N = np.nan_to_num(normals[pairs.j])
    N *= np.where(np.sum(N * ref[pairs.q], axis=1) < 0, -1.0, 1.0)[:, None]

    # closed-form fit: grad u(x_i) ~ n_i in the least-squares sense, sum w u(x_i) = 0
    m = frame.sum([N[:, a] for a in range(3)] + [np.sum(pairs.X * N, axis=1), pairs.sq])
    sn, spn, spp = m[:, :3], m[:, 3], m[:, 4]
    den = spp - np.sum(mean * mean, axis=1)
    ok &= den > 1e-14 * np.maximum(spp, 1e-300)
    with np.errstate(invalid="ignore", divide="ignore"):
        uq = 0.5 * (spn - np.sum(mean * sn, axis=1)) / den
    uq = np.where(ok, uq, 0.0)
    uq = np.where(np.abs(uq) / R < params.sphere_degeneracy_eps, 0.0, uq)   # plane
    ul = sn - 2 * uq[:, None] * mean
    u0 = -np.sum(ul * mean, axis=1) - uq * spp

    grad_norm = np.linalg.norm(ul, axis=1)
    closest_dir = ul / np.where(grad_norm > 0, grad_norm, 1.0)[:, None]
    if params.projection == "ray":
        direction = np.tile([0.0, 0.0, 1.0], (M, 1))
        s = _smaller_root(uq, ul[:, 2], u0)
        miss = ~np.isfinite(s)
        s = np.where(miss, _smaller_root(uq, grad_norm, u0), s)
        direction = np.where(miss[:, None], closest_dir, direction)
    else:
        direction = closest_dir
        s = _smaller_root(uq, grad_norm, u0)
    ok &= np.isfinite(s) & (grad_norm > 0) & (np.abs(s) <= 1.0)
    out = queries + np.where(ok, s, 0.0)[:, None] * direction * R
    return out, ok


def apss_project(cloud, params, index=None, return_flags=False, workers=1, chunk=1024):
    """Project every point onto the algebraic sphere fitted to its neighbourhood.

    A first pass estimates a normal per point; the second fits each
    neighbourhood's positions and normals.  Points with fewer than
    ``min_neighbors`` neighbours (self included) or degenerate
    neighbourhoods are returned unchanged and flagged.
    """
    pts = cloud.positions
    if index is None:
        index = SpatialIndex(pts, params.kernel_radius)
    N = len(pts)
    R = params.kernel_radius
    out = pts.copy()
    normals = np.full((N, 3), np.nan)
    flagged = np.ones(N, bool)

    pairs = {}

    def neighbourhoods(lo):
        hi = min(lo + chunk, N)
        q, j, d = index.pairs(pts[lo:hi], R)
        enough = np.bincount(q, minlength=hi - lo) >= params.min_neighbors
        sel = np.flatnonzero(enough)
        keep = enough[q]
        remap = np.cumsum(enough) - 1
        return sel, _Pairs(index.positions, remap[q[keep]], j[keep], d[keep], pts[lo + sel], R)

    def normal_pass(lo):
        sel, p = pairs[lo] = neighbourhoods(lo)
        if len(sel):
            normals[lo + sel] = _point_normals(_Frame(p))

    def project_pass(lo):
        sel, p = pairs.pop(lo)
        if len(sel):
            f = _Frame(p, np.all(np.isfinite(normals), axis=1))
            proj, good = _apss_fit(f, normals, normals[lo + sel], pts[lo + sel], params)
            out[lo + sel] = proj
            flagged[lo + sel] = ~good

    starts = range(0, N, chunk)
    for work in (normal_pass, project_pass):
        if workers > 1 and N > chunk:
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(work, starts))
        else:
            for lo in starts:
                work(lo)
    result = PointCloud(out, cloud.intensities)
    return (result, flagged) if return_flags else result


def knn_intensity_filter(cloud, k, index=None, radius=None):
    """Replace each intensity by the mean over its k nearest neighbours (self included).

    The search is capped at ``radius`` (default: the index radius); points
    with fewer than k neighbours in range average over those found.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if index is None:
        if radius is None:
            raise ValueError("need an index or a radius")
        index = SpatialIndex(cloud.positions, radius)
    if len(cloud) == 0:
        return cloud
    nb = index.query(cloud.positions, radius, max_neighbors=k, self_index=np.arange(len(cloud)))
    vals = np.where(nb.index >= 0, cloud.intensities[np.maximum(nb.index, 0)], 0.0)
    return PointCloud(cloud.positions, vals.sum(axis=1) / nb.count)


def prune(cloud, r_min):
    """Drop points with intensity below ``r_min``, keeping survivor order."""
    if r_min < 0:
        raise ValueError("r_min must be nonnegative")
    return cloud.select(cloud.intensities >= r_min)


def raised_cosine_mask(shape, cutoff, rolloff=0.5):
    """Radial low-pass in DFT layout; frequency 1 is the corner (0.5, 0.5) cycles/sample."""
    if not 0 < cutoff <= 1:
        raise ValueError("cutoff must be in (0, 1]")
    fx = np.fft.fftfreq(shape[0])[:, None]
    fy = np.fft.fftfreq(shape[1])[None, :]
    nu = np.sqrt(fx ** 2 + fy ** 2) / np.sqrt(0.5)
    edge = cutoff * (1 + rolloff)
    taper = 0.5 * (1 + np.cos(np.pi * (nu - cutoff) / (edge - cutoff)))
    return np.where(nu <= cutoff, 1.0, np.where(nu < edge, taper, 0.0))


def fft_lowpass(image, cutoff, rolloff=0.5):
    """Unclamped FFT low-pass of a 2-D array (linear in ``image``)."""
    image = np.asarray(image, dtype=np.float64)
    mask = raised_cosine_mask(image.shape, cutoff, rolloff)
    return np.real(np.fft.ifft2(np.fft.fft2(image) * mask))


def fft_background_denoise(background, cutoff, rolloff=0.5):
    if min(background.shape) < 2:
        raise ValueError("background must be at least 2x2")
    return BackgroundImage(np.maximum(fft_lowpass(background.b, cutoff, rolloff), 0.0))


def identity_background(background):
    return background

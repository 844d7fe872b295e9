"""Core data model: photon cubes, point clouds, sensor calibration and I/O.

Coordinates: world x maps to lidar rows (i), world y to columns (j) and
world z is the range (depth) in metres.  A point's depth in bin units is
``z / bin_resolution`` and is kept real valued.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

CUBE_MAGIC = b"SPCB"
CUBE_VERSION = 1
_HEADER = struct.Struct("<4sIIIId")


class CubeFormatError(ValueError):
    """Raised for malformed or invalid photon cube files."""


class CalibrationError(ValueError):
    """Raised for malformed calibration files."""


class OutOfRangeError(ValueError):
    """A world point falls outside the sensor frustum or depth gate."""

    def __init__(self, axis, value, lo, hi):
        self.axis = axis
        super().__init__(f"{axis}={value!r} outside [{lo}, {hi})")


# ---------------------------------------------------------------------------
# Instrumental response
# ---------------------------------------------------------------------------


def _pchip_slopes(padded, spacing):
    """Shape-preserving node slopes (Fritsch-Butland) on a uniform grid."""
    delta = np.diff(padded, axis=-1) / spacing
    left, right = delta[..., :-1], delta[..., 1:]
    same_sign = left * right > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        harmonic = np.where(same_sign, 2.0 / (1.0 / left + 1.0 / right), 0.0)
    slopes = np.zeros_like(padded)
    slopes[..., 1:-1] = harmonic
    return slopes


class IRF:
    """Sampled instrumental response h(tau) in bin units.

    Samples sit at ``start + k*spacing``.  The response is padded with a zero
    node on each side and evaluated by cubic Hermite interpolation with
    shape-preserving slopes, so h is C1, nonnegative, exactly zero outside
    ``support`` and integrates to ``spacing * sum(samples)`` (normalised to 1).

    ``samples`` may be 1-D (shared by all pixels) or ``(n_rows, n_cols, K)``.
    """

    def __init__(self, samples, spacing=1.0, start=0.0):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim not in (1, 3) or samples.shape[-1] < 1:
            raise ValueError("IRF samples must have shape (K,) or (rows, cols, K)")
        if spacing <= 0:
            raise ValueError("IRF spacing must be positive")
        if np.any(samples < 0) or not np.all(np.isfinite(samples)):
            raise ValueError("IRF samples must be finite and nonnegative")
        mass = samples.sum(axis=-1, keepdims=True) * spacing
        if np.any(mass <= 0):
            raise ValueError("IRF has zero mass")
        # already-normalised samples are kept bit-exact (calibration round trips)
        self.samples = np.where(np.abs(mass - 1.0) > 1e-12, samples / mass, samples)
        self.spacing = float(spacing)
        self.start = float(start)
        self.per_pixel = samples.ndim == 3
        flat = self.samples.reshape(-1, samples.shape[-1])
        self._nodes = np.pad(flat, ((0, 0), (1, 1)))
        self._slopes = _pchip_slopes(self._nodes, self.spacing)
        self._fisher = None

    @property
    def n_samples(self):
        return self.samples.shape[-1]

    @property
    def derivative_samples(self):
        """h'(tau) at the sample grid (same shape as ``samples``)."""
        d = self._slopes[:, 1:-1]
        return d.reshape(self.samples.shape)

    @property
    def support(self):
        lo = self.start - self.spacing
        return lo, lo + (self.n_samples + 1) * self.spacing

    @property
    def support_width_bins(self):
        """Max number of integer bins that can fall inside the support."""
        lo, hi = self.support
        return int(np.floor(hi - lo)) + 1

    @property
    def rms_width(self):
        tau = self.start + self.spacing * np.arange(self.n_samples)
        w = self.samples.reshape(-1, self.n_samples) * self.spacing
        mean = (w * tau).sum(axis=1)
        var = (w * (tau - mean[:, None]) ** 2).sum(axis=1)
        return float(np.sqrt(var.max()))

    @property
    def peak(self):
        return float(self.samples.max())

    def evaluate(self, tau, pix=None):
        """Return ``(h, h')`` at offsets ``tau`` (bin units).

        ``pix`` gives flat pixel indices (broadcast against ``tau``) and is
        only used for per-pixel responses.
        """
        tau = np.asarray(tau, dtype=np.float64)
        u = (tau - self.start) / self.spacing + 1.0
        k = np.floor(u)
        s = u - k
        k = k.astype(np.int64)
        n_int = self.n_samples + 1
        inside = (k >= 0) & (k < n_int)
        k = np.clip(k, 0, n_int - 1)
        if self.per_pixel:
            row = np.broadcast_to(np.asarray(pix, dtype=np.int64), k.shape)
        else:
            row = 0
        y0 = self._nodes[row, k]
        y1 = self._nodes[row, k + 1]
        m0 = self._slopes[row, k] * self.spacing
        m1 = self._slopes[row, k + 1] * self.spacing
        s2 = s * s
        s3 = s2 * s
        val = (2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * m0 \
            + (3 * s2 - 2 * s3) * y1 + (s3 - s2) * m1
        der = (6 * s2 - 6 * s) * y0 + (3 * s2 - 4 * s + 1) * m0 \
            + (6 * s - 6 * s2) * y1 + (3 * s2 - 2 * s) * m1
        der = der / self.spacing
        return np.where(inside, val, 0.0), np.where(inside, der, 0.0)

    def fisher_factor(self):
        """Upper bound over pixels of the shift information  int h'^2/h."""
        if self._fisher is None:
            lo, hi = self.support
            tau = np.linspace(lo, hi, 64 * (self.n_samples + 2) + 1)
            rows = range(self._nodes.shape[0])
            best = 0.0
            for row in rows:
                h, d = self.evaluate(tau, np.full(tau.shape, row))
                ok = h > 1e-300
                f = np.zeros_like(h)
                f[ok] = d[ok] ** 2 / h[ok]
                best = max(best, float(np.trapezoid(f, tau)))
            self._fisher = best
        return self._fisher

    def __eq__(self, other):
        return (isinstance(other, IRF) and self.spacing == other.spacing
                and self.start == other.start
                and np.array_equal(self.samples, other.samples))


def gaussian_irf(sigma_bins, spacing=1.0, truncate=4.0):
    """Gaussian response of width ``sigma_bins`` sampled on a symmetric grid."""
    half = int(np.ceil(truncate * sigma_bins / spacing))
    tau = spacing * np.arange(-half, half + 1)
    samples = np.exp(-0.5 * (tau / sigma_bins) ** 2)
    return IRF(samples, spacing=spacing, start=float(tau[0]))


# ---------------------------------------------------------------------------
# Sensor geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SensorModel:
    n_rows: int
    n_cols: int
    n_bins: int
    irf: IRF
    bin_resolution: float = 1.0
    pixel_pitch: float = 1.0
    superres: int = 1
    gain: np.ndarray | None = None
    dead_mask: np.ndarray | None = None

    def __post_init__(self):
        if min(self.n_rows, self.n_cols, self.n_bins, self.superres) < 1:
            raise ValueError("sensor dimensions and superres must be positive")
        if self.bin_resolution <= 0 or self.pixel_pitch <= 0:
            raise ValueError("bin_resolution and pixel_pitch must be positive")
        shape = (self.n_rows, self.n_cols)
        gain = np.ones(shape) if self.gain is None else np.asarray(self.gain, dtype=np.float64)
        dead = np.zeros(shape, bool) if self.dead_mask is None else np.asarray(self.dead_mask, bool)
        if gain.shape != shape or dead.shape != shape:
            raise ValueError("gain and dead_mask must have shape (n_rows, n_cols)")
        if np.any(gain < 0):
            raise ValueError("gains must be nonnegative")
        if self.irf.per_pixel and self.irf.samples.shape[:2] != shape:
            raise ValueError("per-pixel IRF does not match the pixel grid")
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "dead_mask", dead)

    @property
    def n_pixels(self):
        return self.n_rows * self.n_cols

    @property
    def fine_shape(self):
        return self.n_rows * self.superres, self.n_cols * self.superres

    def effective_gain(self):
        """Per-pixel gain with dead pixels zeroed, flattened row-major."""
        return np.where(self.dead_mask, 0.0, self.gain).ravel()

    def fine_index(self, positions, check=True):
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        fi = np.floor(positions[:, 0] / self.pixel_pitch).astype(np.int64)
        fj = np.floor(positions[:, 1] / self.pixel_pitch).astype(np.int64)
        if check:
            nf_r, nf_c = self.fine_shape
            _check_axis("x", positions[:, 0], fi, nf_r, self.pixel_pitch)
            _check_axis("y", positions[:, 1], fj, nf_c, self.pixel_pitch)
        return fi, fj

    def to_lidar(self, positions, check=True):
        """Vectorised world -> (i, j, t) mapping; ``t`` is not rounded."""
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        fi, fj = self.fine_index(positions, check=check)
        t = positions[:, 2] / self.bin_resolution
        if check:
            bad = ~((t >= 0) & (t < self.n_bins))
            if np.any(bad):
                k = int(np.argmax(bad))
                raise OutOfRangeError("depth", float(positions[k, 2]), 0.0,
                                      self.n_bins * self.bin_resolution)
        return fi // self.superres, fj // self.superres, t

    def fine_centres(self, fi, fj):
        return ((np.asarray(fi) + 0.5) * self.pixel_pitch,
                (np.asarray(fj) + 0.5) * self.pixel_pitch)

    def clip_to_gate(self, t):
        return np.clip(t, 0.0, np.nextafter(float(self.n_bins), 0.0))

    def bins_to_depth(self, t):
        """Metres for depths in bins, kept strictly inside the gate after rounding."""
        zmax = self.n_bins * self.bin_resolution
        while zmax / self.bin_resolution >= self.n_bins:
            zmax = np.nextafter(zmax, 0.0)
        return np.clip(np.asarray(t, np.float64) * self.bin_resolution, 0.0, zmax)


def _check_axis(name, coord, index, n, pitch):
    bad = (index < 0) | (index >= n) | ~np.isfinite(coord)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise OutOfRangeError(name, float(coord[k]), 0.0, n * pitch)


def map_world_to_lidar(p, sensor):
    """Map one world point (metres) to ``(i, j, t)`` lidar coordinates."""
    i, j, t = sensor.to_lidar(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return int(i[0]), int(j[0]), float(t[0])


# ---------------------------------------------------------------------------
# Photon cube
# ---------------------------------------------------------------------------


class PhotonCube:
    """Sparse per-pixel photon histograms (CSR layout, row-major pixels).

    Only active bins are stored: ``bins[offsets[p]:offsets[p+1]]`` and the
    matching ``counts`` hold the events of flat pixel ``p``.
    """

    def __init__(self, n_rows, n_cols, n_bins, offsets, bins, counts, bin_width=1e-12):
        self.n_rows, self.n_cols, self.n_bins = int(n_rows), int(n_cols), int(n_bins)
        self.bin_width = float(bin_width)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.bins = np.asarray(bins, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        self._validate()
        self.total_photons = int(self.counts.sum())
        for arr in (self.offsets, self.bins, self.counts):
            arr.flags.writeable = False

    def _validate(self):
        if min(self.n_rows, self.n_cols, self.n_bins) < 1:
            raise CubeFormatError("cube dimensions must be positive")
        P = self.n_rows * self.n_cols
        if self.offsets.shape != (P + 1,) or self.offsets[0] != 0:
            raise CubeFormatError("offsets must have n_pixels + 1 entries starting at 0")
        if np.any(np.diff(self.offsets) < 0) or self.offsets[-1] != len(self.bins):
            raise CubeFormatError("offsets are not a valid partition of the events")
        if self.bins.shape != self.counts.shape:
            raise CubeFormatError("bins and counts differ in length")
        pix = self.event_pixels()
        problems = (self.bins < 0) | (self.bins >= self.n_bins) | (self.counts < 1)
        if len(self.bins) > 1:
            same = pix[1:] == pix[:-1]
            problems[1:] |= same & (self.bins[1:] <= self.bins[:-1])
        if np.any(problems):
            p = int(pix[np.argmax(problems)])
            raise CubeFormatError(
                f"invalid events in pixel ({p // self.n_cols}, {p % self.n_cols}): "
                "bins must be strictly increasing and < n_bins, counts >= 1")

    @classmethod
    def from_dense(cls, hist, bin_width=1e-12):
        hist = np.asarray(hist)
        if hist.ndim != 3:
            raise ValueError("dense histogram must be (rows, cols, bins)")
        R, C, T = hist.shape
        flat = hist.reshape(R * C, T)
        pix, bins = np.nonzero(flat)
        offsets = np.zeros(R * C + 1, np.int64)
        np.cumsum(np.bincount(pix, minlength=R * C), out=offsets[1:])
        return cls(R, C, T, offsets, bins, flat[pix, bins], bin_width)

    @classmethod
    def from_events(cls, n_rows, n_cols, n_bins, pixels, bins, counts, bin_width=1e-12):
        """Build from unsorted (flat pixel, bin, count) triples; duplicates add."""
        pixels = np.asarray(pixels, np.int64)
        bins = np.asarray(bins, np.int64)
        counts = np.asarray(counts, np.int64)
        keep = counts > 0
        keys = pixels[keep] * n_bins + bins[keep]
        ukeys, inv = np.unique(keys, return_inverse=True)
        summed = np.bincount(inv, weights=counts[keep], minlength=len(ukeys)).astype(np.int64)
        upix = ukeys // n_bins
        offsets = np.zeros(n_rows * n_cols + 1, np.int64)
        np.cumsum(np.bincount(upix, minlength=n_rows * n_cols), out=offsets[1:])
        return cls(n_rows, n_cols, n_bins, offsets, ukeys % n_bins, summed, bin_width)

    @classmethod
    def empty(cls, n_rows, n_cols, n_bins, bin_width=1e-12):
        return cls(n_rows, n_cols, n_bins, np.zeros(n_rows * n_cols + 1, np.int64),
                   [], [], bin_width)

    @property
    def shape(self):
        return self.n_rows, self.n_cols, self.n_bins

    @property
    def n_pixels(self):
        return self.n_rows * self.n_cols

    @property
    def n_events(self):
        return len(self.bins)

    @property
    def bin_resolution(self):
        """Metres of range per bin (round trip)."""
        return 0.5 * SPEED_OF_LIGHT * self.bin_width

    def event_pixels(self):
        return np.repeat(np.arange(self.n_rows * self.n_cols), np.diff(self.offsets))

    def pixel_events(self, i, j):
        p = i * self.n_cols + j
        a, b = self.offsets[p], self.offsets[p + 1]
        return self.bins[a:b], self.counts[a:b]

    def active_bins(self):
        return np.diff(self.offsets).reshape(self.n_rows, self.n_cols)

    def photons_per_pixel(self):
        return np.bincount(self.event_pixels(), weights=self.counts,
                           minlength=self.n_pixels).reshape(self.n_rows, self.n_cols)

    def to_dense(self):
        out = np.zeros((self.n_pixels, self.n_bins), np.int64)
        out[self.event_pixels(), self.bins] = self.counts
        return out.reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, PhotonCube):
            return NotImplemented
        return (self.shape == other.shape and self.bin_width == other.bin_width
                and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.bins, other.bins)
                and np.array_equal(self.counts, other.counts))

    def __repr__(self):
        return (f"PhotonCube({self.n_rows}x{self.n_cols}x{self.n_bins}, "
                f"events={self.n_events}, photons={self.total_photons})")


def cube_to_bytes(cube):
    P = cube.n_pixels
    per_pixel = np.diff(cube.offsets)
    payload = np.empty(P + 2 * cube.n_events, dtype="<u4")
    head_pos = np.arange(P) + 2 * cube.offsets[:-1]
    payload[head_pos] = per_pixel
    ev_pos = np.repeat(head_pos + 1, per_pixel) + 2 * (np.arange(cube.n_events)
                                                      - np.repeat(cube.offsets[:-1], per_pixel))
    payload[ev_pos] = cube.bins
    payload[ev_pos + 1] = cube.counts
    header = _HEADER.pack(CUBE_MAGIC, CUBE_VERSION, cube.n_rows, cube.n_cols,
                          cube.n_bins, cube.bin_width)
    return header + payload.tobytes()


def cube_from_bytes(data):
    if len(data) < _HEADER.size:
        raise CubeFormatError("truncated header")
    magic, version, R, C, T, width = _HEADER.unpack_from(data, 0)
    if magic != CUBE_MAGIC:
        raise CubeFormatError(f"bad magic {magic!r}")
    if version != CUBE_VERSION:
        raise CubeFormatError(f"unsupported version {version}")
    if (len(data) - _HEADER.size) % 4:
        raise CubeFormatError("payload is not a whole number of u32 words")
    words = np.frombuffer(data, dtype="<u4", offset=_HEADER.size)
    P = R * C
    offsets = np.zeros(P + 1, np.int64)
    heads = np.empty(P, np.int64)
    pos = 0
    n = len(words)
    for p in range(P):
        if pos >= n:
            raise CubeFormatError(f"truncated payload at pixel ({p // C}, {p % C})")
        k = int(words[pos])
        heads[p] = pos
        offsets[p + 1] = offsets[p] + k
        pos += 1 + 2 * k
    if pos != n:
        raise CubeFormatError("truncated payload" if pos > n else "trailing bytes after payload")
    per_pixel = np.diff(offsets)
    ev_pos = np.repeat(heads + 1, per_pixel) + 2 * (np.arange(offsets[-1])
                                                    - np.repeat(offsets[:-1], per_pixel))
    bins = words[ev_pos].astype(np.int64)
    counts = words[ev_pos + 1].astype(np.int64)
    return PhotonCube(R, C, T, offsets, bins, counts, width)


def write_cube(cube, path):
    Path(path).write_bytes(cube_to_bytes(cube))


def read_cube(path):
    return cube_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Point clouds and background
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        r = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        if len(pos) != len(r):
            raise ValueError("positions and intensities differ in length")
        if np.any(r < 0):
            raise ValueError("intensities must be nonnegative")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "intensities", r)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0))

    def __len__(self):
        return len(self.intensities)

    def select(self, mask):
        return PointCloud(self.positions[mask], self.intensities[mask])

    def lidar_coords(self, sensor, check=True):
        """Home pixel ``(i, j)`` and real depth ``t`` of every point."""
        return sensor.to_lidar(self.positions, check=check)

    def __eq__(self, other):
        return (isinstance(other, PointCloud)
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.intensities, other.intensities))


@dataclass(frozen=True, eq=False)
class BackgroundImage:
    b: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.float64)
        if b.ndim != 2:
            raise ValueError("background must be a 2-D image")
        if np.any(b < 0) or not np.all(np.isfinite(b)):
            raise ValueError("background must be finite and nonnegative")
        object.__setattr__(self, "b", b)

    @classmethod
    def constant(cls, n_rows, n_cols, value):
        return cls(np.full((n_rows, n_cols), float(value)))

    @property
    def shape(self):
        return self.b.shape

    def __eq__(self, other):
        return isinstance(other, BackgroundImage) and np.array_equal(self.b, other.b)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_HEADER = ("ply\nformat ascii 1.0\nelement vertex {n}\n"
               "property float x\nproperty float y\nproperty float z\n"
               "property float intensity\nend_header\n")


def write_ply(cloud, path):
    rows = np.column_stack([cloud.positions, cloud.intensities])
    lines = [" ".join(f"{v:.17g}" for v in row) for row in rows]
    text = _PLY_HEADER.format(n=len(cloud)) + "".join(line + "\n" for line in lines)
    Path(path).write_text(text)


def read_ply(path):
    """Read an ASCII PLY with x, y, z and intensity vertex properties."""
    text = Path(path).read_text()
    head, sep, body = text.partition("end_header\n")
    if not sep or not head.startswith("ply"):
        raise CubeFormatError(f"{path}: not an ASCII PLY file")
    n, props = None, []
    for line in head.splitlines():
        parts = line.split()
        if parts[:2] == ["format", "ascii"] or not parts:
            continue
        if parts[0] == "format":
            raise CubeFormatError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[0] == "property" and n is not None:
            props.append(parts[-1])
    if n is None or not {"x", "y", "z"} <= set(props):
        raise CubeFormatError(f"{path}: missing vertex element or xyz properties")
    rows = [line.split() for line in body.splitlines() if line.strip()][:n]
    if len(rows) != n:
        raise CubeFormatError(f"{path}: expected {n} vertices, found {len(rows)}")
    try:
        data = np.array(rows, dtype=np.float64).reshape(n, len(props))
    except ValueError as exc:
        raise CubeFormatError(f"{path}: bad vertex data ({exc})") from exc
    pos = data[:, [props.index(c) for c in "xyz"]]
    r = data[:, props.index("intensity")] if "intensity" in props else np.ones(n)
    return PointCloud(pos, r)


# ---------------------------------------------------------------------------
# Calibration files (key = value)
# ---------------------------------------------------------------------------


def parse_keyvalue(text):
    """Parse ``key = value`` text with optional ``[section]`` headers.

    Returns ``(top, sections)`` where ``sections`` is a list of
    ``(name, dict)`` pairs; repeated section names are kept in order.
    """
    top, sections = {}, []
    current = top
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = {}
            sections.append((line[1:-1].strip(), current))
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        current[key.strip()] = value.strip()
    return top, sections


def write_calibration(sensor, path):
    """Write geometry, IRF, gain map and dead pixels as key = value text."""
    path = Path(path)
    if sensor.irf.per_pixel:
        raise CalibrationError("per-pixel IRFs cannot be stored in a calibration file")
    lines = [
        f"superres = {sensor.superres}",
        f"pixel_pitch = {sensor.pixel_pitch!r}",
        f"bin_resolution = {sensor.bin_resolution!r}",
        f"irf_start = {sensor.irf.start!r}",
        f"irf_spacing = {sensor.irf.spacing!r}",
        "irf = " + ",".join(repr(float(v)) for v in sensor.irf.samples),
    ]
    if np.any(sensor.gain != 1.0):
        gain_path = path.with_suffix(".gain.txt")
        np.savetxt(gain_path, sensor.gain, fmt="%.17g")
        lines.append(f"gain_map = {gain_path.name}")
    dead = np.argwhere(sensor.dead_mask)
    if len(dead):
        lines.append("dead_pixels = " + ", ".join(f"{i}:{j}" for i, j in dead))
    path.write_text("\n".join(lines) + "\n")


def read_calibration(path, n_rows, n_cols, n_bins):
    """Build a SensorModel for a cube of the given size from a calibration file."""
    path = Path(path)
    try:
        top, _ = parse_keyvalue(path.read_text())
        irf = IRF([float(v) for v in top["irf"].split(",")],
                  spacing=float(top.get("irf_spacing", 1.0)),
                  start=float(top.get("irf_start", 0.0)))
        gain = None
        if "gain_map" in top:
            gain = np.loadtxt(path.parent / top["gain_map"], ndmin=2)
        dead = np.zeros((n_rows, n_cols), bool)
        for item in filter(None, (s.strip() for s in top.get("dead_pixels", "").split(","))):
            i, j = item.split(":")
            dead[int(i), int(j)] = True
        return SensorModel(n_rows, n_cols, n_bins, irf,
                           bin_resolution=float(top["bin_resolution"]),
                           pixel_pitch=float(top["pixel_pitch"]),
                           superres=int(top.get("superres", 1)),
                           gain=gain, dead_mask=dead)
    except (KeyError, ValueError, IndexError, OSError) as exc:
        raise CalibrationError(f"{path}: {exc}") from exc

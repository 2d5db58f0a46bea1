"""Log-centric height maps from surface point clouds.

The cloud is split along a segmented centerline, each part is expressed in
cylindrical coordinates around its segment, and a smooth grid ``rho(theta, l)``
is fitted by gradient-regularized least squares.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DegenerateBin, FormatError, InvalidInput

DEFAULT_CENTERLINE_BINS = 50
DEFAULT_LAMBDA = 0.01
DEFAULT_L_SPACING_MM = 10.0
CG_RTOL = 1e-8
CG_MAXITER = 10_000


@dataclass
class Centerline:
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 2:
            raise InvalidInput("a centerline needs at least two 3-D vertices")
        if np.any(np.linalg.norm(np.diff(v, axis=0), axis=1) <= 0):
            raise InvalidInput("centerline segments must have positive length")
        self.vertices = v

    @property
    def n_segments(self):
        return len(self.vertices) - 1

    @property
    def lengths(self):
        return np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)

    @property
    def directions(self):
        d = np.diff(self.vertices, axis=0)
        return d / np.linalg.norm(d, axis=1)[:, None]

    @property
    def length(self):
        return float(self.lengths.sum())


@dataclass
class CylindricalSamples:
    """Parallel arrays of theta (deg, [0, 360)), rho (mm) and l (mm)."""

    theta: np.ndarray
    rho: np.ndarray
    l: np.ndarray

    def __len__(self):
        return len(self.rho)

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        if not parts:
            return cls(np.empty(0), np.empty(0), np.empty(0))
        return cls(np.concatenate([p.theta for p in parts]),
                   np.concatenate([p.rho for p in parts]),
                   np.concatenate([p.l for p in parts]))


@dataclass
class HeightMap:
    """Radial distance sampled on a regular (l, theta) grid.

    ``values[k, j]`` is rho at ``l = k * l_extent / (l_bins - 1)`` and
    ``theta = j * 360 / theta_bins``. Column 0 neighbours the last column.
    """

    values: np.ndarray
    l_extent: float
    lam: float = DEFAULT_LAMBDA
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.size == 0:
            raise InvalidInput("height map values must be a non-empty 2-D grid")

    @property
    def l_bins(self):
        return self.values.shape[0]

    @property
    def theta_bins(self):
        return self.values.shape[1]

    @property
    def dtheta(self):
        return 360.0 / self.theta_bins

    @property
    def dl(self):
        return self.l_extent / max(self.l_bins - 1, 1)

    @property
    def theta(self):
        return np.arange(self.theta_bins) * self.dtheta

    @property
    def l(self):
        return np.arange(self.l_bins) * self.dl

    def mm_per_cell(self):
        """Cell size in mm along (l, theta); theta uses the mean radius."""
        return self.dl, float(np.mean(self.values)) * math.radians(self.dtheta)


def _principal_axis(points):
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    axis = vt[0]
    # fix the sign so the dominant component is positive (log along +z stays +z)
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return centroid, axis


def _simplify(vertices, n_keep):
    """Greedily drop the interior vertex closest to the chord of its neighbours."""
    verts = [np.asarray(v) for v in vertices]
    while len(verts) > n_keep:
        best, best_dev = None, np.inf
        for i in range(1, len(verts) - 1):
            a, b, c = verts[i - 1], verts[i], verts[i + 1]
            chord = c - a
            n = np.linalg.norm(chord)
            dev = np.linalg.norm(np.cross(b - a, chord)) / n if n > 0 else np.linalg.norm(b - a)
            if dev < best_dev:
                best, best_dev = i, dev
        del verts[best]
    return np.array(verts)


def _hat_basis(t, knots_t):
    """Piecewise-linear interpolation weights of ``t`` on the breakpoints ``knots_t``."""
    out = np.zeros((len(t), len(knots_t)))
    seg = np.clip(np.searchsorted(knots_t, t, side="right") - 1, 0, len(knots_t) - 2)
    span = knots_t[seg + 1] - knots_t[seg]
    u = np.where(span > 0, (t - knots_t[seg]) / np.where(span > 0, span, 1.0), 0.0)
    rows = np.arange(len(t))
    out[rows, seg] = 1.0 - u
    out[rows, seg + 1] += u
    return out


def estimate_centerline(cloud, n_segments=1, n_bins=DEFAULT_CENTERLINE_BINS):
    """Centerline polyline with exactly ``n_segments`` segments.

    Points are binned along the principal axis, each bin contributes its
    centroid, and the centroid chain is simplified down to ``n_segments``
    to pick the joints. The end vertices sit at the extreme axial extent of
    the cloud so ``l`` covers the whole log.
    """
    pts = cloud.points
    if len(pts) == 0:
        raise InvalidInput("cannot estimate a centerline from an empty cloud")
    if n_segments < 1:
        raise InvalidInput("n_segments must be >= 1")
    n_bins = max(int(n_bins), n_segments + 1)
    centroid, axis = _principal_axis(pts)
    t = (pts - centroid) @ axis
    t0, t1 = float(t.min()), float(t.max())
    if t1 - t0 <= 0:
        raise DegenerateBin(1, "cloud has zero axial extent; bins 1.. are empty")
    idx = np.minimum(((t - t0) / (t1 - t0) * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise DegenerateBin(int(empty[0]))
    sums = np.stack([np.bincount(idx, weights=pts[:, c], minlength=n_bins) for c in range(3)], axis=1)
    centroids = sums / counts[:, None]
    kept = _simplify(centroids, n_segments + 1)
    # breakpoints come from the simplified chain; the vertices are a
    # count-weighted piecewise-linear fit through all bin centroids, which
    # averages out the sampling noise a single centroid carries
    knots_t = (kept - centroid) @ axis
    knots_t[0], knots_t[-1] = t0, t1
    knots_t = np.maximum.accumulate(knots_t)
    tb = (centroids - centroid) @ axis
    w = np.sqrt(counts.astype(float))[:, None]
    verts, *_ = np.linalg.lstsq(_hat_basis(tb, knots_t) * w, centroids * w, rcond=None)
    return Centerline(verts)


def _rotate_between(v, a, b):
    """Rotate ``v`` by the minimal rotation carrying unit ``a`` onto unit ``b``."""
    k = np.cross(a, b)
    s = np.linalg.norm(k)
    c = float(a @ b)
    if s < 1e-15:
        return v.copy()
    k /= s
    return v * c + np.cross(k, v) * s + k * (k @ v) * (1 - c)


def reference_directions(centerline):
    """Per-segment theta=0 directions, parallel-transported along the chain."""
    dirs = centerline.directions
    refs = np.empty_like(dirs)
    ref = np.array([1.0, 0.0, 0.0])
    e = ref - (ref @ dirs[0]) * dirs[0]
    if np.linalg.norm(e) < 1e-6:
        ref = np.array([0.0, 1.0, 0.0])
        e = ref - (ref @ dirs[0]) * dirs[0]
    refs[0] = e / np.linalg.norm(e)
    for i in range(1, len(dirs)):
        e = _rotate_between(refs[i - 1], dirs[i - 1], dirs[i])
        e -= (e @ dirs[i]) * dirs[i]
        refs[i] = e / np.linalg.norm(e)
    return refs


def assign_segments(points, centerline):
    """Index of the centerline segment owning each point.

    Each interior joint carries the plane bisecting the angle between its two
    segments; a point belongs to the segment after every joint plane it lies
    in front of.
    """
    pts = np.asarray(points, dtype=float)
    n = centerline.n_segments
    seg = np.zeros(len(pts), dtype=np.int64)
    if n == 1:
        return seg
    dirs = centerline.directions
    for i in range(1, n):
        normal = dirs[i - 1] + dirs[i]
        normal /= np.linalg.norm(normal)
        seg += ((pts - centerline.vertices[i]) @ normal >= 0)
    return np.minimum(seg, n - 1)


def split_by_bisecting_planes(cloud, centerline):
    """Partition ``cloud`` into one sub-cloud per centerline segment."""
    seg = assign_segments(cloud.points, centerline)
    return [cloud.subset(np.flatnonzero(seg == i)) for i in range(centerline.n_segments)]


def to_cylindrical(points, start, end, l_offset=0.0, reference=None):
    """Cylindrical coordinates of ``points`` around the segment ``start -> end``.

    ``reference`` is the theta=0 direction (world +x projected onto the
    segment's normal plane when omitted). Points on the axis get rho=0 and
    theta=0.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    start = np.asarray(start, dtype=float)
    axis = np.asarray(end, dtype=float) - start
    length = np.linalg.norm(axis)
    if length <= 0:
        raise InvalidInput("segment must have positive length")
    axis = axis / length
    if reference is None:
        reference = reference_directions(Centerline(np.array([start, start + axis])))[0]
    e1 = np.asarray(reference, dtype=float)
    e1 = e1 - (e1 @ axis) * axis
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    rel = pts - start
    z = rel @ axis
    x = rel @ e1
    y = rel @ e2
    rho = np.hypot(x, y)
    theta = np.degrees(np.arctan2(y, x)) % 360.0
    theta[rho == 0] = 0.0
    # arctan2 can round to exactly 360 after the modulo for tiny negative angles
    theta[theta >= 360.0] = 0.0
    return CylindricalSamples(theta, rho, z + l_offset)


def cloud_to_samples(cloud, centerline):
    """Log-centric samples for the whole cloud under a segmented centerline."""
    if len(cloud) == 0:
        raise InvalidInput("empty point cloud")
    seg = assign_segments(cloud.points, centerline)
    refs = reference_directions(centerline)
    offsets = np.concatenate([[0.0], np.cumsum(centerline.lengths)[:-1]])
    theta = np.empty(len(cloud))
    rho = np.empty(len(cloud))
    l = np.empty(len(cloud))
    for i in range(centerline.n_segments):
        sel = seg == i
        if not sel.any():
            continue
        cs = to_cylindrical(cloud.points[sel], centerline.vertices[i],
                            centerline.vertices[i + 1], offsets[i], refs[i])
        theta[sel], rho[sel], l[sel] = cs.theta, cs.rho, cs.l
    return CylindricalSamples(theta, rho, l)


def _interp_matrix(samples, theta_bins, l_bins, l_extent):
    n = len(samples)
    dtheta = 360.0 / theta_bins
    dl = l_extent / (l_bins - 1)
    u = np.mod(samples.theta, 360.0) / dtheta
    j0 = np.floor(u).astype(np.int64)
    fu = u - j0
    j0 %= theta_bins
    j1 = (j0 + 1) % theta_bins
    v = np.clip(samples.l / dl, 0.0, l_bins - 1)
    k0 = np.minimum(np.floor(v).astype(np.int64), l_bins - 2)
    fv = v - k0
    k1 = k0 + 1
    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([k0 * theta_bins + j0, k0 * theta_bins + j1,
                     k1 * theta_bins + j0, k1 * theta_bins + j1], axis=1).ravel()
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1).ravel()
    return sp.csr_matrix((w, (rows, cols)), shape=(n, theta_bins * l_bins))


def _difference_matrix(theta_bins, l_bins):
    size = theta_bins * l_bins
    idx = np.arange(size).reshape(l_bins, theta_bins)
    right = np.roll(idx, -1, axis=1)
    n_t = size
    d_theta = sp.csr_matrix((np.concatenate([-np.ones(n_t), np.ones(n_t)]),
                             (np.tile(np.arange(n_t), 2), np.concatenate([idx.ravel(), right.ravel()]))),
                            shape=(n_t, size))
    n_l = (l_bins - 1) * theta_bins
    d_l = sp.csr_matrix((np.concatenate([-np.ones(n_l), np.ones(n_l)]),
                         (np.tile(np.arange(n_l), 2), np.concatenate([idx[:-1].ravel(), idx[1:].ravel()]))),
                        shape=(n_l, size))
    return sp.vstack([d_theta, d_l]).tocsr()


def fit_objective(values, samples, lam, l_extent):
    """Data misfit plus ``lam`` times the squared neighbour differences."""
    values = np.asarray(values, dtype=float)
    l_bins, theta_bins = values.shape
    a = _interp_matrix(samples, theta_bins, l_bins, l_extent)
    d = _difference_matrix(theta_bins, l_bins)
    f = values.ravel()
    r = a @ f - samples.rho
    g = d @ f
    return float(r @ r + lam * (g @ g))


def fit_heightmap(samples, theta_bins=360, l_bins=None, lam=DEFAULT_LAMBDA, l_extent=None):
    """Fit a smooth height map to cylindrical samples.

    Minimises ``sum_i (B(theta_i, l_i) - rho_i)^2 + lam * sum ||grad f||^2``
    where ``B`` is bilinear interpolation (circular in theta) and the
    gradient term runs over all neighbouring grid nodes. The normal
    equations are solved by Jacobi-preconditioned conjugate gradients;
    cells without data are filled by the smoothness term alone.
    """
    if len(samples) == 0:
        raise InvalidInput("no samples to fit")
    if l_extent is None:
        l_extent = float(np.max(samples.l))
    if l_extent <= 0:
        raise InvalidInput("l_extent must be positive")
    if l_bins is None:
        l_bins = max(2, math.ceil(l_extent / DEFAULT_L_SPACING_MM))
    if theta_bins < 2 or l_bins < 2:
        raise InvalidInput("theta_bins and l_bins must both be >= 2")
    if lam < 0:
        raise InvalidInput("lam must be >= 0")

    a = _interp_matrix(samples, theta_bins, l_bins, l_extent)
    d = _difference_matrix(theta_bins, l_bins)
    q = (a.T @ a + lam * (d.T @ d)).tocsr()
    rhs = a.T @ samples.rho
    diag = q.diagonal()
    diag[diag <= 0] = 1.0
    precond = sp.diags(1.0 / diag)
    x0 = np.full(q.shape[0], float(np.mean(samples.rho)))
    iters = [0]

    def count(_):
        iters[0] += 1

    x, status = spla.cg(q, rhs, x0=x0, rtol=CG_RTOL, atol=0.0, maxiter=CG_MAXITER,
                        M=precond, callback=count)
    bnorm = np.linalg.norm(rhs)
    rel = np.linalg.norm(q @ x - rhs) / bnorm if bnorm > 0 else 0.0
    info = {"solver": "cg", "iterations": iters[0], "relative_residual": float(rel)}
    if status != 0 or rel > CG_RTOL:
        # CG stalls on poorly conditioned systems (sparse data, tiny lam)
        x = spla.spsolve(q.tocsc(), rhs)
        rel = np.linalg.norm(q @ x - rhs) / bnorm if bnorm > 0 else 0.0
        info.update(solver="direct", relative_residual=float(rel))
    return HeightMap(x.reshape(l_bins, theta_bins), float(l_extent), float(lam), info)


def heightmap_from_cloud(cloud, n_segments=1, theta_bins=360, l_bins=None, lam=DEFAULT_LAMBDA):
    """Full conversion: centerline, cylindrical samples, regularized fit."""
    centerline = estimate_centerline(cloud, n_segments)
    samples = cloud_to_samples(cloud, centerline)
    hmap = fit_heightmap(samples, theta_bins, l_bins, lam, l_extent=centerline.length)
    return hmap, centerline


def write_grid(path, values, l_extent, tag="HMAP"):
    """Write a grid in the ``HMAP v1`` / ``PMAP v1`` text layout."""
    values = np.asarray(values, dtype=float)
    l_bins, theta_bins = values.shape
    with open(path, "w") as fh:
        fh.write(f"{tag} v1\ntheta_bins {theta_bins}\nl_bins {l_bins}\nl_extent_mm {float(l_extent)!r}\n")
        for row in values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_grid(path, tag="HMAP"):
    """Read an ``HMAP v1`` / ``PMAP v1`` grid; returns ``(values, l_extent)``."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0].strip() != f"{tag} v1":
        raise FormatError(f"expected header '{tag} v1'", 1)
    header = {}
    for lineno, key in ((2, "theta_bins"), (3, "l_bins"), (4, "l_extent_mm")):
        if len(lines) < lineno:
            raise FormatError(f"missing '{key}'", lineno)
        tok = lines[lineno - 1].split()
        if len(tok) != 2 or tok[0] != key:
            raise FormatError(f"expected '{key} <value>'", lineno)
        try:
            header[key] = float(tok[1]) if key == "l_extent_mm" else int(tok[1])
        except ValueError:
            raise FormatError(f"bad value for {key}", lineno) from None
    n, m = header["theta_bins"], header["l_bins"]
    rows = [ln for ln in lines[4:] if ln.strip()]
    if len(rows) != m:
        raise FormatError(f"expected {m} data rows, found {len(rows)}", 5)
    values = np.empty((m, n))
    for k, ln in enumerate(rows):
        tok = ln.split(",")
        if len(tok) != n:
            raise FormatError(f"expected {n} values, found {len(tok)}", 5 + k)
        try:
            values[k] = [float(t) for t in tok]
        except ValueError:
            raise FormatError("non-numeric value", 5 + k) from None
    return values, header["l_extent_mm"]


def write_heightmap(hmap, path):
    write_grid(path, hmap.values, hmap.l_extent, "HMAP")


def read_heightmap(path):
    values, l_extent = read_grid(path, "HMAP")
    return HeightMap(values, l_extent)

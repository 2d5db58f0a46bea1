"""Rigid alignment of two scans of one log and nearest-point label transfer."""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import NO_LABEL, PointCloud
from .errors import DegenerateCloud, FormatError, InvalidInput, PreconditionViolation

NORMALIZED_TOL = 1e-6
DEFAULT_CUTOFF_MM = 2.0


@dataclass
class RigidTransform:
    """``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.scale = float(self.scale)
        if not self.scale > 0:
            raise InvalidInput("scale must be positive")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise InvalidInput("rotation must have determinant +1")

    def apply(self, points):
        return self.scale * (np.asarray(points, dtype=float) @ self.rotation.T) + self.translation

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, first):
        """Transform equal to applying ``first`` and then ``self``."""
        return RigidTransform(self.rotation @ first.rotation,
                              self.scale * (self.rotation @ first.translation) + self.translation,
                              self.scale * first.scale)

    def to_text(self):
        nums = list(self.rotation.ravel()) + list(self.translation) + [self.scale]
        return " ".join(repr(float(v)) for v in nums)

    @classmethod
    def from_text(cls, text):
        tok = text.split()
        if len(tok) not in (12, 13):
            raise FormatError(f"expected 12 or 13 numbers, got {len(tok)}", 1)
        try:
            v = [float(t) for t in tok]
        except ValueError:
            raise FormatError("non-numeric transform entry", 1) from None
        return cls(np.array(v[:9]).reshape(3, 3), v[9:12], v[12] if len(v) == 13 else 1.0)


def normalize(cloud):
    """Centre on the centroid and scale so the furthest point is at distance 1."""
    pts = cloud.points
    if len(pts) < 2:
        raise DegenerateCloud("normalization needs at least two points")
    centroid = pts.mean(axis=0)
    radius = np.linalg.norm(pts - centroid, axis=1).max()
    if radius <= 0:
        raise DegenerateCloud("all points are identical")
    s = 1.0 / radius
    tf = RigidTransform(np.eye(3), -s * centroid, s)
    return PointCloud(tf.apply(pts), cloud.labels), tf


def _check_normalized(pts, name):
    c = np.linalg.norm(pts.mean(axis=0))
    r = np.linalg.norm(pts, axis=1).max()
    if c > NORMALIZED_TOL or abs(r - 1.0) > NORMALIZED_TOL:
        raise PreconditionViolation(f"{name} cloud is not normalized (centroid {c:.3g}, radius {r:.6g})")


def best_rigid(src, dst):
    """Least-squares rotation and translation taking ``src`` onto ``dst``."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cd - r @ cs


@dataclass
class IcpResult:
    transform: RigidTransform
    converged: bool
    iterations: int
    mse_history: list


def icp_align(source, target, max_iter=100, convergence_eps=1e-12, reject_worst=False):
    """Point-to-point ICP from ``source`` onto ``target`` (both normalized).

    Every iteration pairs each source point with its nearest target point,
    solves the rigid fit in closed form and re-pairs. It stops once the mean
    squared pairing error improves by less than ``convergence_eps``. With
    ``reject_worst`` the worst 5% of pairs are dropped from each fit.
    """
    src = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=float)
    dst = target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=float)
    _check_normalized(src, "source")
    _check_normalized(dst, "target")
    tree = cKDTree(dst)
    rot, trans = np.eye(3), np.zeros(3)
    cur = src.copy()
    dist, idx = tree.query(cur)
    mse = float(np.mean(dist ** 2))
    history = [mse]
    best = (rot, trans, mse)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        keep = slice(None)
        if reject_worst and len(dist) > 20:
            keep = np.argsort(dist, kind="stable")[: int(np.ceil(0.95 * len(dist)))]
        r, t = best_rigid(cur[keep], dst[idx[keep]])
        rot, trans = r @ rot, r @ trans + t
        cur = src @ rot.T + trans
        dist, idx = tree.query(cur)
        new = float(np.mean(dist ** 2))
        history.append(new)
        if new <= best[2]:
            best = (rot, trans, new)
        if mse - new < convergence_eps:
            converged = True
            break
        mse = new
    r, t, _ = best
    return IcpResult(RigidTransform(_orthonormalize(r), t, 1.0), converged, it, history)


def _orthonormalize(r):
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def register(source, target, max_iter=100, convergence_eps=1e-12, reject_worst=False):
    """Normalize both clouds, run ICP, and return the source->target map in original units."""
    ns, ts = normalize(source)
    nt, tt = normalize(target)
    res = icp_align(ns, nt, max_iter, convergence_eps, reject_worst)
    full = tt.inverse().compose(res.transform.compose(ts))
    return full, res


@dataclass
class LabelTransferResult:
    labels: np.ndarray
    matched_fraction: float
    max_match_distance: float


def transfer_labels(source, target, transform=None, cutoff=DEFAULT_CUTOFF_MM):
    """Give each target point the label of its nearest transformed source point.

    ``transform`` maps source coordinates into the target's original frame;
    points further than ``cutoff`` (target units) stay unlabeled. A target
    point counts as matched when some source point lies within the cutoff.
    """
    if source.labels is None:
        raise InvalidInput("source cloud carries no labels")
    if not cutoff > 0:
        raise InvalidInput("cutoff must be positive")
    transform = transform or RigidTransform()
    moved = transform.apply(source.points)
    dist, idx = cKDTree(moved).query(target.points)
    within = dist <= cutoff
    labels = np.full(len(target), NO_LABEL, dtype=np.int64)
    labels[within] = source.labels[idx[within]]
    frac = float(within.mean()) if len(target) else 0.0
    max_d = float(dist[within].max()) if within.any() else 0.0
    return LabelTransferResult(labels, frac, max_d)

"""Virtual sawing of synthetic logs and arris-knot metrics.

The log is handled in its log-centric frame (straight pith on the z axis).
Each knot is a cone with apex on the pith and axis perpendicular to it, so
its intersection with a long board face (a plane parallel to the pith) is a
conic section. Along each face column the conic cuts a single interval of
``l``, which is rasterised onto the face grid.

Board end faces are not rasterised: only the four long faces of every board
take part in classification.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, PatternDoesNotFit

DEFAULT_CELL_MM = 1.0
DEFAULT_ARRIS_BAND_MM = 2.0
FACE = "face"
EDGE = "edge"
ARRIS = "arris"


@dataclass
class FaceGeometry:
    """One long face of a board: the segment ``start -> end`` extruded along l."""

    board_id: int
    face_id: int
    kind: str  # "wide" or "narrow"
    start: np.ndarray
    end: np.ndarray

    @property
    def length(self):
        return float(np.linalg.norm(self.end - self.start))

    @property
    def direction(self):
        return (self.end - self.start) / self.length


def board_faces(pattern):
    faces = []
    for bid, b in enumerate(pattern.boards):
        c = [np.array(p, dtype=float) for p in b.corners()]
        horiz = "wide" if b.w >= b.h else "narrow"
        vert = "narrow" if b.w >= b.h else "wide"
        for fid, (kind, i, j) in enumerate([(horiz, 0, 1), (vert, 1, 2), (horiz, 2, 3), (vert, 3, 0)]):
            faces.append(FaceGeometry(bid, fid, kind, c[i], c[j]))
    return faces


@dataclass
class FaceConic:
    """Cone/face intersection ``(d0 + s dd)^2 + (l - l0)^2 <= (r0 + s dr)^2``.

    ``s`` runs along the face from its start corner; the inequality holds only
    where the cone's axial coordinate ``t0 + s dt`` lies in ``[0, height]``.
    Expanded it is the conic ``A s^2 + C l^2 + D s + E l + F <= 0``.
    """

    d0: float
    dd: float
    r0: float
    dr: float
    t0: float
    dt: float
    l0: float
    height: float

    @property
    def coefficients(self):
        a = self.dd ** 2 - self.dr ** 2
        d = 2 * (self.d0 * self.dd - self.r0 * self.dr)
        f = self.d0 ** 2 - self.r0 ** 2 + self.l0 ** 2
        return a, 0.0, 1.0, d, -2 * self.l0, f

    def half_height(self, s):
        """Half-length of the occupied l-interval at face coordinate ``s`` (NaN where empty)."""
        s = np.asarray(s, dtype=float)
        t = self.t0 + s * self.dt
        r = self.r0 + s * self.dr
        q = r * r - (self.d0 + s * self.dd) ** 2
        ok = (t >= 0) & (t <= self.height) & (q > 0)
        return np.where(ok, np.sqrt(np.where(ok, q, 0.0)), np.nan)


def _knot_arrays(knots):
    if not knots:
        return {k: np.empty(0) for k in ("theta", "l", "base", "apex", "height", "id")}
    return {
        "theta": np.array([k.theta_pos for k in knots]),
        "l": np.array([k.l_pos for k in knots]),
        "base": np.array([k.base_radius for k in knots]),
        "apex": np.array([k.apex_radius for k in knots]),
        "height": np.array([k.surface_radius for k in knots]),
        "id": np.array([k.id for k in knots], dtype=np.int64),
    }


def face_conic(knot, angle_deg, face):
    """Conic of a single knot on a face after sawing at ``angle_deg``."""
    phi = math.radians(knot.theta_pos - angle_deg)
    a = np.array([math.cos(phi), math.sin(phi)])
    perp = np.array([-a[1], a[0]])
    u = face.direction
    slope = (knot.base_radius - knot.apex_radius) / knot.surface_radius
    t0, dt = float(face.start @ a), float(u @ a)
    return FaceConic(float(face.start @ perp), float(u @ perp),
                     knot.apex_radius + slope * t0, slope * dt, t0, dt,
                     knot.l_pos, knot.surface_radius)


def _column_intervals(face, n_s, cell_s, knots, phi, n_l, cell_l):
    """Occupied l-cell index range per column for every (angle, knot).

    ``phi`` has shape ``(A, K)`` (knot angle minus sawing angle, radians).
    Returns ``lo, hi`` of shape ``(A, K, n_s)``; a column is empty where
    ``hi < lo``.
    """
    s = (np.arange(n_s) + 0.5) * cell_s
    px = face.start[0] + s * face.direction[0]
    py = face.start[1] + s * face.direction[1]
    cos, sin = np.cos(phi)[..., None], np.sin(phi)[..., None]
    t = px * cos + py * sin
    d = -px * sin + py * cos
    slope = ((knots["base"] - knots["apex"]) / knots["height"])[None, :, None]
    r = knots["apex"][None, :, None] + slope * t
    q = r * r - d * d
    ok = (t >= 0) & (t <= knots["height"][None, :, None]) & (q > 0)
    half = np.sqrt(np.where(ok, q, 0.0))
    l0 = knots["l"][None, :, None]
    lo = np.ceil((l0 - half) / cell_l - 0.5).astype(np.int64)
    hi = np.floor((l0 + half) / cell_l - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, n_l - 1)
    hi = np.where(ok, hi, lo - 1)
    return lo, hi


@dataclass
class FaceRaster:
    """Knot occupancy of one long board face.

    Column ``i`` covers ``s`` in ``[i, i+1) * cell_s`` from the face's start
    corner; row ``k`` covers ``l`` in ``[k, k+1) * cell_l``. ``hits`` maps a
    knot id to per-column inclusive ``(lo, hi)`` row ranges.
    """

    geometry: FaceGeometry
    n_s: int
    n_l: int
    cell_s: float
    cell_l: float
    hits: dict = field(default_factory=dict)

    @property
    def board_id(self):
        return self.geometry.board_id

    @property
    def kind(self):
        return self.geometry.kind

    def knot_cells(self, knot_id):
        lo, hi = self.hits[knot_id]
        return int(np.maximum(hi - lo + 1, 0).sum())

    def occupancy(self):
        """Dense ``(n_l, n_s)`` raster of knot ids, -1 where empty (lowest id wins)."""
        out = np.full((self.n_l, self.n_s), -1, dtype=np.int64)
        for kid in sorted(self.hits, reverse=True):
            lo, hi = self.hits[kid]
            for i in np.flatnonzero(hi >= lo):
                out[lo[i]:hi[i] + 1, i] = kid
        return out


@dataclass
class BoardSurfaceGrid:
    angle_deg: float
    faces: list
    knot_l: dict
    cell_mm: float


def _face_grid(face, log_length, cell_mm):
    n_s = max(1, int(round(face.length / cell_mm)))
    n_l = max(1, int(round(log_length / cell_mm)))
    return n_s, face.length / n_s, n_l, log_length / n_l


def check_fit(log, pattern):
    deficit = pattern.max_radius - log.min_radius
    if deficit > 0:
        raise PatternDoesNotFit(deficit)


def virtual_saw(log, pattern, angle_deg, cell_mm=DEFAULT_CELL_MM):
    """Rasterise every knot onto every long board face after rotating by ``-angle_deg``."""
    check_fit(log, pattern)
    knots = _knot_arrays(log.knots)
    phi = np.radians(knots["theta"] - angle_deg)[None, :]
    faces = []
    for face in board_faces(pattern):
        n_s, cell_s, n_l, cell_l = _face_grid(face, log.length, cell_mm)
        raster = FaceRaster(face, n_s, n_l, cell_s, cell_l)
        if len(log.knots):
            lo, hi = _column_intervals(face, n_s, cell_s, knots, phi, n_l, cell_l)
            for j, kid in enumerate(knots["id"]):
                if np.any(hi[0, j] >= lo[0, j]):
                    raster.hits[int(kid)] = (lo[0, j], hi[0, j])
        faces.append(raster)
    return BoardSurfaceGrid(float(angle_deg), faces, {k.id: k.l_pos for k in log.knots}, cell_mm)


@dataclass
class KnotAppearance:
    knot_id: int
    board_id: int
    classification: str
    area_mm2: float
    face_areas: dict
    l_pos: float


def _band_columns(n_s, cell_s, band):
    s = (np.arange(n_s) + 0.5) * cell_s
    return (s <= band) | (s >= n_s * cell_s - band)


def classify_appearances(grid, arris_band_mm=DEFAULT_ARRIS_BAND_MM):
    """One appearance per (knot, board): arris beats edge beats face."""
    acc = {}
    for f in grid.faces:
        band = _band_columns(f.n_s, f.cell_s, arris_band_mm)
        for kid, (lo, hi) in f.hits.items():
            counts = np.maximum(hi - lo + 1, 0)
            if not counts.any():
                continue
            rec = acc.setdefault((kid, f.board_id), {"arris": False, "edge": False, "areas": {}})
            rec["areas"][f.geometry.face_id] = float(counts.sum()) * f.cell_s * f.cell_l
            rec["arris"] |= bool(np.any(counts[band] > 0))
            rec["edge"] |= f.kind == "narrow"
    out = []
    for (kid, bid) in sorted(acc):
        rec = acc[(kid, bid)]
        cls = ARRIS if rec["arris"] else EDGE if rec["edge"] else FACE
        out.append(KnotAppearance(kid, bid, cls, sum(rec["areas"].values()), rec["areas"],
                                  grid.knot_l.get(kid, float("nan"))))
    return out


@dataclass
class SawingReport:
    angle_deg: float
    appearances: list
    arris_count: int
    total_count: int
    arris_area_dm2: float
    per_board: dict

    def to_dict(self):
        return {
            "angle_deg": self.angle_deg,
            "arris_count": self.arris_count,
            "total_count": self.total_count,
            "arris_area_dm2": self.arris_area_dm2,
            "per_board": {str(k): v for k, v in self.per_board.items()},
            "appearances": [
                {"knot_id": a.knot_id, "board_id": a.board_id, "class": a.classification,
                 "area_mm2": a.area_mm2, "l_pos": a.l_pos,
                 "face_areas": {str(k): v for k, v in a.face_areas.items()}}
                for a in self.appearances
            ],
        }


def make_report(angle_deg, appearances):
    per_board = {}
    for a in appearances:
        pb = per_board.setdefault(a.board_id, {"face": 0, "edge": 0, "arris": 0, "arris_area_mm2": 0.0})
        pb[a.classification] += 1
        if a.classification == ARRIS:
            pb["arris_area_mm2"] += a.area_mm2
    arris = [a for a in appearances if a.classification == ARRIS]
    return SawingReport(float(angle_deg), appearances, len(arris), len(appearances),
                        sum(a.area_mm2 for a in arris) / 10_000.0, per_board)


def saw_report(log, pattern, angle_deg, cell_mm=DEFAULT_CELL_MM, arris_band_mm=DEFAULT_ARRIS_BAND_MM):
    grid = virtual_saw(log, pattern, angle_deg, cell_mm)
    return make_report(angle_deg, classify_appearances(grid, arris_band_mm))


@dataclass
class Baseline:
    angles: np.ndarray
    arris_counts: np.ndarray
    arris_areas_dm2: np.ndarray
    total_counts: np.ndarray

    @property
    def mean_count(self):
        return float(self.arris_counts.mean()) if len(self.angles) else 0.0

    @property
    def mean_area_dm2(self):
        return float(self.arris_areas_dm2.mean()) if len(self.angles) else 0.0


def sweep(log, pattern, angles, cell_mm=DEFAULT_CELL_MM, arris_band_mm=DEFAULT_ARRIS_BAND_MM, chunk=45):
    """Arris count, arris area and appearance count for many angles at once.

    Same rasterisation and precedence as :func:`virtual_saw` followed by
    :func:`classify_appearances`, vectorised over angles.
    """
    check_fit(log, pattern)
    angles = np.asarray(angles, dtype=float)
    n_a = len(angles)
    counts = np.zeros(n_a, dtype=np.int64)
    areas = np.zeros(n_a)
    totals = np.zeros(n_a, dtype=np.int64)
    if not log.knots or n_a == 0:
        return Baseline(angles, counts, areas, totals)
    knots = _knot_arrays(log.knots)
    faces = board_faces(pattern)
    n_b = len(pattern.boards)
    n_k = len(log.knots)
    for c0 in range(0, n_a, chunk):
        sl = slice(c0, min(c0 + chunk, n_a))
        phi = np.radians(knots["theta"][None, :] - angles[sl, None])
        shape = (phi.shape[0], n_k, n_b)
        area = np.zeros(shape)
        arris = np.zeros(shape, dtype=bool)
        edge = np.zeros(shape, dtype=bool)
        for f in faces:
            n_s, cell_s, n_l, cell_l = _face_grid(f, log.length, cell_mm)
            lo, hi = _column_intervals(f, n_s, cell_s, knots, phi, n_l, cell_l)
            cnt = np.maximum(hi - lo + 1, 0)
            band = _band_columns(n_s, cell_s, arris_band_mm)
            occ = cnt.sum(axis=2)
            area[:, :, f.board_id] += occ * cell_s * cell_l
            arris[:, :, f.board_id] |= (cnt[:, :, band] > 0).any(axis=2)
            if f.kind == "narrow":
                edge[:, :, f.board_id] |= occ > 0
        present = area > 0
        counts[sl] = (arris & present).sum(axis=(1, 2))
        areas[sl] = np.where(arris & present, area, 0.0).sum(axis=(1, 2)) / 10_000.0
        totals[sl] = present.sum(axis=(1, 2))
    return Baseline(angles, counts, areas, totals)


def all_angle_baseline(log, pattern, step_deg=1.0, cell_mm=DEFAULT_CELL_MM,
                       arris_band_mm=DEFAULT_ARRIS_BAND_MM, period=360.0):
    """Mean arris count and area over a full sweep of sawing angles."""
    n = period / step_deg
    if step_deg <= 0 or abs(n - round(n)) > 1e-9:
        raise InvalidInput(f"step {step_deg} must divide {period}")
    angles = np.arange(int(round(n))) * step_deg
    return sweep(log, pattern, angles, cell_mm, arris_band_mm)


def _pct(change):
    return "undefined" if change is None else f"{100.0 * change:+.1f}%"


def improvement_report(optimized, baseline):
    """Relative change of the optimized sawing against the all-angle means."""
    mean_count = baseline.mean_count
    mean_area = baseline.mean_area_dm2

    def rel(value, mean):
        if mean == 0:
            return 0.0 if value == 0 else None
        return (value - mean) / mean

    count_change = rel(optimized.arris_count, mean_count)
    area_change = rel(optimized.arris_area_dm2, mean_area)
    ratio = optimized.arris_count / optimized.total_count if optimized.total_count else 0.0
    return {
        "angle_deg": optimized.angle_deg,
        "arris_count": optimized.arris_count,
        "total_count": optimized.total_count,
        "arris_area_dm2": optimized.arris_area_dm2,
        "baseline_mean_count": mean_count,
        "baseline_mean_area_dm2": mean_area,
        "count_change": count_change,
        "area_change": area_change,
        "arris_ratio": ratio,
        "count_change_text": _pct(count_change),
        "area_change_text": _pct(area_change),
        "arris_ratio_text": format_ratio(optimized.arris_count, optimized.total_count),
    }


def format_ratio(arris, total):
    """Arris share in the ``20.8% (82 / 394)`` layout."""
    pct = 100.0 * arris / total if total else 0.0
    return f"{pct:.1f}% ({arris:g} / {total:g})"


def write_report_json(report, improvement, path):
    with open(path, "w") as fh:
        json.dump({"report": report.to_dict(), "improvement": improvement}, fh, indent=1, sort_keys=True)


def write_pgm(raster, path):
    """Binary PGM of a face raster: 0 empty, 255 occupied."""
    occ = raster.occupancy()
    img = np.where(occ >= 0, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())

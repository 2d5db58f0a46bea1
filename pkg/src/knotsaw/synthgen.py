"""Seeded synthetic logs with exact knot ground truth.

A log is a tapered cylinder around a (possibly bowed) pith. Knots are right
circular cones with their apex on the pith and their axis perpendicular to
it, grouped in whorls. The surface carries a raised-cosine bump over each
knot's footprint.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .cloud import NO_LABEL, PointCloud
from .detection import KnotDetection, ProbabilityMap
from .errors import FormatError, InvalidParams
from .heightmap import Centerline

PITH_VERTICES = 41


@dataclass
class GenParams:
    length: float = 4000.0
    butt_radius: float = 150.0
    top_radius: float = 120.0
    whorl_spacing_mean: float = 500.0
    knots_per_whorl: tuple = (2, 5)
    knot_base_radius: tuple = (8.0, 20.0)
    bump_height: tuple = (2.0, 5.0)
    surface_noise_sigma: float = 0.0
    points_per_mm2: float = 0.1
    pith_bow: float = 0.0
    seed: int = 0

    def validate(self):
        for name in ("length", "butt_radius", "top_radius", "whorl_spacing_mean", "points_per_mm2"):
            if not getattr(self, name) > 0:
                raise InvalidParams(name, "must be positive")
        if self.surface_noise_sigma < 0:
            raise InvalidParams("surface_noise_sigma", "must be >= 0")
        for name in ("knots_per_whorl", "knot_base_radius", "bump_height"):
            rng = getattr(self, name)
            if len(rng) != 2:
                raise InvalidParams(name, "must be a (low, high) pair")
            if rng[0] > rng[1]:
                raise InvalidParams(name, f"range is inverted ({rng[0]} > {rng[1]})")
            if rng[0] < 0:
                raise InvalidParams(name, "must be non-negative")
        if self.knot_base_radius[0] <= 0:
            raise InvalidParams("knot_base_radius", "must be positive")
        if self.knot_base_radius[1] >= min(self.butt_radius, self.top_radius):
            raise InvalidParams("knot_base_radius", "must be smaller than the log radius")
        if int(self.knots_per_whorl[0]) != self.knots_per_whorl[0] or \
                int(self.knots_per_whorl[1]) != self.knots_per_whorl[1]:
            raise InvalidParams("knots_per_whorl", "must be integers")
        return self

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string key/value pairs; ranges are written ``low,high``."""
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in mapping.items():
            if key not in known:
                continue
            default = known[key].default
            try:
                if isinstance(default, tuple):
                    parts = [p for p in str(raw).replace(",", " ").split()]
                    if len(parts) != 2:
                        raise ValueError("expected two values")
                    conv = int if isinstance(default[0], int) else float
                    kwargs[key] = (conv(parts[0]), conv(parts[1]))
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError as exc:
                raise InvalidParams(key, f"cannot parse {raw!r} ({exc})") from None
        return cls(**kwargs)


@dataclass
class GroundTruthKnot:
    id: int
    l_pos: float
    theta_pos: float
    base_radius: float
    apex_radius: float
    bump_height: float
    surface_radius: float

    @property
    def angular_halfwidth(self):
        return math.degrees(math.asin(min(1.0, self.base_radius / self.surface_radius)))


@dataclass
class VirtualLog:
    length: float
    butt_radius: float
    top_radius: float
    pith: Centerline
    knots: list = field(default_factory=list)
    seed: int = 0

    def radius_at(self, l):
        return self.butt_radius + (self.top_radius - self.butt_radius) * np.asarray(l, dtype=float) / self.length

    @property
    def min_radius(self):
        return min(self.butt_radius, self.top_radius)

    def pith_at(self, l):
        """Pith point at longitudinal position ``l`` (pith vertices are parametrized by z)."""
        v = self.pith.vertices
        l = np.asarray(l, dtype=float)
        return np.stack([np.interp(l, v[:, 2], v[:, 0]), np.interp(l, v[:, 2], v[:, 1]), l], axis=-1)

    def mean_angular_halfwidth(self):
        """Generator-truth angular knot scale in degrees (0 for knot-free logs)."""
        if not self.knots:
            return 0.0
        return float(np.mean([k.angular_halfwidth for k in self.knots]))

    def to_json(self):
        return json.dumps({
            "length": self.length,
            "butt_radius": self.butt_radius,
            "top_radius": self.top_radius,
            "seed": self.seed,
            "pith": self.pith.vertices.tolist(),
            "knots": [asdict(k) for k in self.knots],
        }, indent=1)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
            return cls(float(d["length"]), float(d["butt_radius"]), float(d["top_radius"]),
                       Centerline(np.array(d["pith"], dtype=float)),
                       [GroundTruthKnot(**k) for k in d["knots"]], int(d.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid log JSON: {exc}") from None


def _pith(params):
    z = np.linspace(0.0, params.length, PITH_VERTICES if params.pith_bow else 2)
    u = z / params.length
    x = 4.0 * params.pith_bow * u * (1.0 - u)
    return Centerline(np.column_stack([x, np.zeros_like(z), z]))


def generate_log(params):
    """Place whorled knots on a tapered log; deterministic in ``params.seed``."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    L = params.length
    margin = params.knot_base_radius[1] + 5.0
    spacing = params.whorl_spacing_mean

    def radius(l):
        return params.butt_radius + (params.top_radius - params.butt_radius) * l / L

    knots = []
    pos = max(margin, spacing * rng.uniform(0.3, 0.7))
    while pos <= L - margin:
        k_lo, k_hi = (int(v) for v in params.knots_per_whorl)
        count = int(rng.integers(k_lo, k_hi + 1))
        base_angle = rng.uniform(0.0, 360.0)
        for i in range(count):
            step = 360.0 / count
            theta = (base_angle + i * step + rng.uniform(-0.15, 0.15) * step) % 360.0
            l_pos = float(np.clip(pos + rng.normal(0.0, 15.0), margin, L - margin))
            base_r = rng.uniform(*params.knot_base_radius)
            bump = rng.uniform(*params.bump_height)
            knots.append(GroundTruthKnot(len(knots), l_pos, float(theta), float(base_r), 0.0,
                                         float(bump), float(radius(l_pos))))
        pos += spacing * float(np.clip(rng.normal(1.0, 0.15), 0.5, 1.5))
    return VirtualLog(L, params.butt_radius, params.top_radius, _pith(params), knots, params.seed)


def _angle_diff(a, b):
    d = np.abs(np.asarray(a) - b) % 360.0
    return np.minimum(d, 360.0 - d)


def knot_footprint(knot, theta, l):
    """Normalised footprint distance: < 1 inside the knot's surface ellipse."""
    dt = _angle_diff(theta, knot.theta_pos) / knot.angular_halfwidth
    dl = (np.asarray(l) - knot.l_pos) / knot.base_radius
    return np.sqrt(dt * dt + dl * dl)


def surface_bumps(log, theta, l):
    """Total bump height and dominant knot label at surface positions."""
    theta = np.asarray(theta, dtype=float)
    l = np.asarray(l, dtype=float)
    total = np.zeros_like(theta)
    best = np.zeros_like(theta)
    labels = np.full(theta.shape, NO_LABEL, dtype=np.int64)
    for knot in log.knots:
        near = np.flatnonzero(np.abs(l - knot.l_pos) < knot.base_radius)
        if len(near) == 0:
            continue
        q = knot_footprint(knot, theta[near], l[near])
        inside = q < 1.0
        idx = near[inside]
        b = knot.bump_height * 0.5 * (1.0 + np.cos(np.pi * q[inside]))
        total[idx] += b
        wins = (b > 0.5 * knot.bump_height) & (b > best[idx])
        labels[idx[wins]] = knot.id
        best[idx[wins]] = b[wins]
    return total, labels


def render_point_cloud(log, params):
    """Sample the log surface at ``params.points_per_mm2`` with bumps and noise."""
    params.validate()
    rng = np.random.default_rng([params.seed, 1])
    L = log.length
    r0, r1 = log.butt_radius, log.top_radius
    mean_r = 0.5 * (r0 + r1)
    n = int(round(params.points_per_mm2 * 2.0 * math.pi * mean_r * L))
    # l has density proportional to the local radius r0 + (r1 - r0) l / L
    u = rng.uniform(0.0, 1.0, n)
    slope = (r1 - r0) / L
    if abs(slope) < 1e-15:
        l = u * L
    else:
        total = r0 * L + 0.5 * slope * L * L
        l = (-r0 + np.sqrt(r0 * r0 + 2.0 * slope * u * total)) / slope
        l = np.clip(l, 0.0, L)
    theta = rng.uniform(0.0, 360.0, n)
    rho = log.radius_at(l)
    bumps, labels = surface_bumps(log, theta, l)
    rho = rho + bumps
    if params.surface_noise_sigma > 0:
        rho = rho + rng.normal(0.0, params.surface_noise_sigma, n)
    centre = log.pith_at(l)
    t = np.radians(theta)
    pts = centre + np.column_stack([rho * np.cos(t), rho * np.sin(t), np.zeros(n)])
    return PointCloud(pts, labels)


def ground_truth_mask(log, theta_bins, l_bins, l_extent=None):
    """Rasterised surface footprint of every knot, one detection each."""
    if theta_bins < 2 or l_bins < 2:
        raise InvalidParams("bins", "theta_bins and l_bins must be >= 2")
    l_extent = log.length if l_extent is None else l_extent
    dtheta = 360.0 / theta_bins
    dl = l_extent / (l_bins - 1)
    theta = np.arange(theta_bins) * dtheta
    out = []
    for knot in log.knots:
        k0 = max(0, int(math.floor((knot.l_pos - knot.base_radius) / dl)))
        k1 = min(l_bins - 1, int(math.ceil((knot.l_pos + knot.base_radius) / dl)))
        rows = np.arange(k0, k1 + 1)
        q = knot_footprint(knot, theta[None, :], (rows * dl)[:, None])
        rr, cc = np.nonzero(q <= 1.0)
        if len(rr) == 0:
            # footprint smaller than a cell: keep the nearest node
            cells = [[int(round(knot.l_pos / dl)), int(round(knot.theta_pos / dtheta)) % theta_bins]]
        else:
            cells = np.column_stack([rows[rr], cc])
        out.append(KnotDetection.from_cells(cells, 1.0, (l_bins, theta_bins), l_extent, id=knot.id))
    return out


def ground_truth_pmap(log, theta_bins, l_bins, l_extent=None):
    """Binary probability map of all ground-truth knot footprints."""
    l_extent = log.length if l_extent is None else l_extent
    values = np.zeros((l_bins, theta_bins))
    for det in ground_truth_mask(log, theta_bins, l_bins, l_extent):
        values[det.cells[:, 0], det.cells[:, 1]] = 1.0
    return ProbabilityMap(values, l_extent)


def read_params(path, overrides=None):
    """``key = value`` file (``#`` comments allowed) into :class:`GenParams`."""
    from .config import parse_kv_file

    mapping = parse_kv_file(path) if path else {}
    mapping.update(overrides or {})
    return GenParams.from_mapping(mapping)

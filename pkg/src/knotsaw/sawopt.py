"""Sawing-angle selection by circular cross-correlation.

Board corners become a wrapped Gaussian mixture over the polar angle (the
pattern function); knot probabilities summed along the log become the knot
function. The chosen angle rotates the knots away from the corners by
minimising the correlation of the two.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCorner, FormatError, GridMismatch, InvalidInput

TRUNCATE_SIGMAS = 6.0
SYMMETRY_ORDERS = (4, 2, 1)
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class Board:
    cx: float
    cy: float
    w: float
    h: float

    def corners(self):
        x0, x1 = self.cx - self.w / 2, self.cx + self.w / 2
        y0, y1 = self.cy - self.h / 2, self.cy + self.h / 2
        return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


@dataclass
class SawingPattern:
    boards: list
    name: str = "pattern"

    def __post_init__(self):
        self.boards = [b if isinstance(b, Board) else Board(*b) for b in self.boards]
        for b in self.boards:
            if b.w <= 0 or b.h <= 0:
                raise InvalidInput(f"board {b} must have positive width and height")
        for i, a in enumerate(self.boards):
            for b in self.boards[i + 1:]:
                ox = min(a.cx + a.w / 2, b.cx + b.w / 2) - max(a.cx - a.w / 2, b.cx - b.w / 2)
                oy = min(a.cy + a.h / 2, b.cy + b.h / 2) - max(a.cy - a.h / 2, b.cy - b.h / 2)
                if ox > 1e-9 and oy > 1e-9:
                    raise InvalidInput(f"boards {a} and {b} overlap")

    @property
    def max_radius(self):
        """Largest distance of any board corner from the log centre."""
        return max((math.hypot(x, y) for b in self.boards for x, y in b.corners()), default=0.0)

    def to_json(self):
        return json.dumps({"name": self.name,
                           "boards": [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h} for b in self.boards]},
                          indent=1)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
            boards = [Board(float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"]))
                      for b in d["boards"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid sawing pattern: {exc}") from None
        return cls(boards, d.get("name", "pattern"))


def square_two_board(side=150.0):
    """Two boards of ``side x side/2`` stacked into a centred square cant."""
    h = side / 2
    return SawingPattern([Board(0.0, -h / 2, side, h), Board(0.0, h / 2, side, h)],
                         f"square-two-board-{side:g}")


def read_pattern(path):
    with open(path) as fh:
        return SawingPattern.from_json(fh.read())


def corner_angles(pattern):
    """Polar angle in degrees of every board corner, four per board."""
    out = []
    for b in pattern.boards:
        for x, y in b.corners():
            if x == 0 and y == 0:
                raise DegenerateCorner(f"board {b} has a corner at the log centre")
            out.append(math.degrees(math.atan2(y, x)) % 360.0)
    return out


def symmetry_order(angles, tol=1e-9):
    """Largest k in (4, 2, 1) whose 360/k rotation maps the corner multiset to itself."""
    a = np.mod(np.asarray(angles, dtype=float), 360.0)
    for k in SYMMETRY_ORDERS:
        if k == 1 or len(a) == 0:
            return k
        rot = np.mod(a + 360.0 / k, 360.0)
        diff = np.abs(np.subtract.outer(rot, a)) % 360.0
        diff = np.minimum(diff, 360.0 - diff)
        if _multiset_match(diff <= tol):
            return k
    return 1


def _multiset_match(close):
    used = np.zeros(close.shape[1], dtype=bool)
    for row in close:
        free = np.flatnonzero(row & ~used)
        if len(free) == 0:
            return False
        used[free[0]] = True
    return True


def _grid(delta_theta):
    n = int(round(360.0 / delta_theta))
    if n < 1 or abs(n * delta_theta - 360.0) > 1e-9:
        raise InvalidInput(f"delta_theta {delta_theta} must divide 360")
    return n, np.arange(n) * (360.0 / n)


@dataclass
class PatternFunction:
    samples: np.ndarray
    delta_theta: float
    sigma_deg: float
    corners: list

    @property
    def theta(self):
        return np.arange(len(self.samples)) * self.delta_theta

    @property
    def symmetry_order(self):
        return symmetry_order(self.corners)


@dataclass
class KnotFunction:
    samples: np.ndarray
    delta_theta: float
    normalized: bool = True

    @property
    def theta(self):
        return np.arange(len(self.samples)) * self.delta_theta


def pattern_function(corners, sigma_deg, delta_theta=1.0):
    """Sum of wrapped Gaussian densities centred on each corner angle.

    Each corner contributes at its circular distance from the query angle;
    contributions past six standard deviations are dropped.
    """
    if sigma_deg <= 0:
        raise InvalidInput("sigma_deg must be positive")
    n, theta = _grid(delta_theta)
    out = np.zeros(n)
    norm = 1.0 / (sigma_deg * math.sqrt(2.0 * math.pi))
    for c in corners:
        d = np.abs(theta - c) % 360.0
        d = np.minimum(d, 360.0 - d)
        g = norm * np.exp(-0.5 * (d / sigma_deg) ** 2)
        g[d > TRUNCATE_SIGMAS * sigma_deg] = 0.0
        out += g
    return PatternFunction(out, 360.0 / n, float(sigma_deg), [float(c) % 360.0 for c in corners])


def knot_function(pmap):
    """Column sums of a probability map, scaled to unit integral over theta."""
    values = np.asarray(pmap.values, dtype=float)
    delta = 360.0 / values.shape[1]
    col = values.sum(axis=0)
    total = col.sum()
    if total <= 0:
        return KnotFunction(np.zeros_like(col), delta, False)
    return KnotFunction(col / (total * delta), delta, True)


def _resample_knots(knot_fn, step):
    n, theta = _grid(step)
    src = knot_fn.theta
    samples = np.interp(theta, src, knot_fn.samples, period=360.0)
    total = samples.sum() * step
    if knot_fn.normalized and total > 0:
        samples = samples / total
    return KnotFunction(samples, 360.0 / n, knot_fn.normalized)


@dataclass
class AngleResult:
    angle_deg: float
    objective: float
    objective_curve: np.ndarray
    candidate_angles: np.ndarray
    full_curve: np.ndarray
    full_angles: np.ndarray
    symmetry_period: float


def correlation_curve(knot_samples, pattern_samples, delta):
    """``C[s] = sum_j f_k[j + s] f_p[j] delta`` for every circular shift ``s``."""
    fk = np.asarray(knot_samples, dtype=float)
    fp = np.asarray(pattern_samples, dtype=float)
    n = len(fk)
    out = np.empty(n)
    for s in range(n):
        out[s] = np.dot(np.roll(fk, -s), fp) * delta
    return out


def argmin_with_ties(values, rtol=TIE_RTOL):
    """First index whose value is within ``rtol * max|values|`` of the minimum."""
    values = np.asarray(values, dtype=float)
    lo = values.min()
    tol = rtol * float(np.max(np.abs(values)))
    return int(np.flatnonzero(values <= lo + tol)[0])


def optimize_angle(knot_fn, pattern_fn, step_deg=None):
    """Rotation angle minimising knot/corner correlation.

    Sawing at angle ``a`` moves a knot at ``theta`` to ``theta - a`` relative
    to the pattern, so the objective is ``C(a) = sum f_k(theta + a) f_p(theta)``.
    Only ``a`` in ``[0, 360/k)`` is searched for a k-fold symmetric pattern;
    near-ties resolve to the smallest angle.
    """
    if len(knot_fn.samples) != len(pattern_fn.samples) or \
            abs(knot_fn.delta_theta - pattern_fn.delta_theta) > 1e-12:
        raise GridMismatch(f"knot grid ({len(knot_fn.samples)} @ {knot_fn.delta_theta}) differs "
                           f"from pattern grid ({len(pattern_fn.samples)} @ {pattern_fn.delta_theta})")
    delta = knot_fn.delta_theta
    step = delta if step_deg is None else float(step_deg)
    ratio = delta / step
    if step < delta - 1e-12:
        if abs(ratio - round(ratio)) > 1e-9:
            raise InvalidInput(f"step {step} must divide the grid resolution {delta}")
        knot_fn = _resample_knots(knot_fn, step)
        pattern_fn = pattern_function(pattern_fn.corners, pattern_fn.sigma_deg, step) \
            if pattern_fn.corners else PatternFunction(np.zeros(len(knot_fn.samples)), knot_fn.delta_theta,
                                                       pattern_fn.sigma_deg, [])
        delta = knot_fn.delta_theta
        stride = 1
    else:
        m = step / delta
        if abs(m - round(m)) > 1e-9:
            raise InvalidInput(f"step {step} must be a multiple of the grid resolution {delta}")
        stride = int(round(m))
    full = correlation_curve(knot_fn.samples, pattern_fn.samples, delta)
    full_angles = np.arange(len(full)) * delta
    period = 360.0 / pattern_fn.symmetry_order
    shifts = np.arange(0, len(full), stride)
    shifts = shifts[full_angles[shifts] < period - 1e-9]
    curve = full[shifts]
    best = argmin_with_ties(curve)
    return AngleResult(float(full_angles[shifts[best]]), float(curve[best]), curve,
                       full_angles[shifts], full, full_angles, period)


def write_function_csv(path, theta, values, header="value"):
    with open(path, "w") as fh:
        fh.write(f"theta_deg,{header}\n")
        for t, v in zip(theta, values):
            fh.write(f"{t:.6f},{float(v)!r}\n")


def read_function_csv(path):
    theta, values = [], []
    with open(path) as fh:
        lines = fh.read().splitlines()
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        tok = line.split(",")
        if len(tok) != 2:
            raise FormatError("expected two columns", lineno)
        try:
            theta.append(float(tok[0]))
            values.append(float(tok[1]))
        except ValueError:
            raise FormatError("non-numeric value", lineno) from None
    return np.array(theta), np.array(values)


def read_knot_function(path):
    theta, values = read_function_csv(path)
    if len(theta) < 2:
        raise FormatError("knot function needs at least two samples")
    delta = 360.0 / len(theta)
    return KnotFunction(values, delta, bool(values.sum() > 0))

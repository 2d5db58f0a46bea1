"""Knot detection on height maps and detection-level evaluation.

Probability maps are the seam between detectors and the rest of the
pipeline: the Laplacian-of-Gaussian detector here produces one, and maps
computed elsewhere can be read from ``PMAP v1`` files.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidInput
from .heightmap import read_grid, write_grid

DEFAULT_SIGMA_MM = 10.0
DEFAULT_BINARIZE_AT = 0.25
DEFAULT_MIN_AREA = 4
DEFAULT_IOU = 0.10
DEFAULT_MIN_RESPONSE_MM = 0.25

_FOUR = ndimage.generate_binary_structure(2, 1)


class SigmaTooSmall(UserWarning):
    pass


@dataclass
class ProbabilityMap:
    """Per-cell knot probability on a height-map grid (rows = l, cols = theta)."""

    values: np.ndarray
    l_extent: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.size == 0:
            raise InvalidInput("probability map must be a non-empty 2-D grid")
        self.values = np.clip(v, 0.0, 1.0)

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


@dataclass(eq=False)
class KnotDetection:
    """A connected set of grid cells flagged as one knot.

    ``cells`` is an ``(n, 2)`` array of ``(row, col)`` pairs. For masks that
    wrap around the theta seam the bounding box has ``col0 > col1``.
    """

    cells: np.ndarray
    score: float
    centroid: tuple
    bbox: tuple
    id: int = 0
    log: str = ""
    _keys: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def area(self):
        return len(self.cells)

    @property
    def keys(self):
        if self._keys is None:
            c = np.asarray(self.cells, dtype=np.int64).reshape(-1, 2)
            self._keys = np.unique(c[:, 0] * (1 << 32) + c[:, 1])
        return self._keys

    @classmethod
    def from_cells(cls, cells, score, shape, l_extent, id=0, log=""):
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        if len(cells) == 0:
            raise InvalidInput("a detection needs at least one cell")
        order = np.lexsort((cells[:, 1], cells[:, 0]))
        cells = cells[order]
        l_bins, theta_bins = shape
        dtheta = 360.0 / theta_bins
        dl = l_extent / max(l_bins - 1, 1)
        ang = np.radians(cells[:, 1] * dtheta)
        theta_c = np.degrees(np.arctan2(np.sin(ang).mean(), np.cos(ang).mean())) % 360.0
        l_c = float(cells[:, 0].mean() * dl)
        return cls(cells, float(score), (float(theta_c), l_c),
                   _bbox(cells, theta_bins), id=id, log=log)


def _bbox(cells, theta_bins):
    rows, cols = cells[:, 0], cells[:, 1]
    used = np.zeros(theta_bins, dtype=bool)
    used[cols] = True
    if used.all():
        return int(rows.min()), 0, int(rows.max()), theta_bins - 1
    # the box starts right after the largest run of unused columns
    free = ~used
    best_len, best_end, run = 0, -1, 0
    for j in range(2 * theta_bins):
        if free[j % theta_bins]:
            run += 1
            if run > best_len:
                best_len, best_end = run, j % theta_bins
        else:
            run = 0
    c0 = (best_end + 1) % theta_bins
    c1 = (c0 + theta_bins - best_len - 1) % theta_bins
    return int(rows.min()), int(c0), int(rows.max()), int(c1)


def iou(a, b):
    ka, kb = a.keys, b.keys
    inter = len(np.intersect1d(ka, kb, assume_unique=True))
    union = len(ka) + len(kb) - inter
    return inter / union if union else 0.0


def _odd_pad(values, n):
    """Point-reflect ``n`` rows past each end so a linear taper continues smoothly."""
    if n <= 0:
        return values
    head = 2 * values[:1] - values[n:0:-1]
    tail = 2 * values[-1:] - values[-2:-n - 2:-1]
    return np.concatenate([head, values, tail])


def _gauss_kernels(sigma, truncate=4.0):
    """Smoothing and second-derivative Gaussian taps.

    The truncated second-derivative kernel is corrected to sum to zero, so
    constants and linear ramps give exactly no response.
    """
    r = int(truncate * sigma + 0.5)
    x = np.arange(-r, r + 1, dtype=float)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    g2 = g * (x ** 2 - sigma ** 2) / sigma ** 4
    g2 -= g * g2.sum()
    return g, g2


def laplacian_of_gaussian(values, sigma_cells):
    """Scale-normalized LoG, sigma^2 times the Laplacian, in units of ``values``.

    Theta is padded circularly and l by point reflection.

    Plain mirror padding puts a crease at the log ends whenever the radius
    tapers; point reflection keeps a linear taper linear, so its LoG is zero.
    """
    s_l, s_t = sigma_cells
    values = np.asarray(values, dtype=float)
    g_l, g2_l = _gauss_kernels(s_l)
    g_t, g2_t = _gauss_kernels(s_t)
    n = min(len(g_l) // 2 + 1, values.shape[0] - 1)
    padded = _odd_pad(values, n)
    d_ll = ndimage.correlate1d(padded, g2_l, axis=0, mode="nearest")
    d_ll = ndimage.correlate1d(d_ll, g_t, axis=1, mode="wrap")
    d_tt = ndimage.correlate1d(padded, g_l, axis=0, mode="nearest")
    d_tt = ndimage.correlate1d(d_tt, g2_t, axis=1, mode="wrap")
    out = s_l ** 2 * d_ll + s_t ** 2 * d_tt
    return out[n:n + values.shape[0]]


def log_detect(hmap, sigma_mm=DEFAULT_SIGMA_MM, threshold=0.0, min_response_mm=DEFAULT_MIN_RESPONSE_MM):
    """Blob response of a height map as a probability map.

    The LoG response is negated so protrusions score high, min-max scaled to
    [0, 1] over the map, and values below ``threshold`` are zeroed. When the
    strongest response stays under ``min_response_mm`` (fit noise on a bare
    log, or a perfect cylinder) the map is all zeros.
    """
    if sigma_mm <= 0:
        raise InvalidInput("sigma_mm must be positive")
    dl, dt = hmap.mm_per_cell()
    sigma_cells = [sigma_mm / dl, sigma_mm / dt]
    for i, s in enumerate(sigma_cells):
        if s < 0.99:
            warnings.warn(f"sigma {sigma_mm} mm is below one cell along axis {i}; clamped",
                          SigmaTooSmall, stacklevel=2)
            sigma_cells[i] = 1.0
    resp = -laplacian_of_gaussian(hmap.values, sigma_cells)
    lo, hi = float(resp.min()), float(resp.max())
    scale = float(np.max(np.abs(hmap.values))) or 1.0
    if hi < min_response_mm or hi - lo <= 1e-9 * scale:
        return ProbabilityMap(np.zeros_like(resp), hmap.l_extent)
    p = (resp - lo) / (hi - lo)
    p[p < threshold] = 0.0
    return ProbabilityMap(p, hmap.l_extent)


def extract_detections(pmap, min_area_cells=DEFAULT_MIN_AREA, binarize_at=DEFAULT_BINARIZE_AT):
    """4-connected components of the binarized map, merged across the seam."""
    values = pmap.values
    fg = (values >= binarize_at) & (values > 0)
    labels, n = ndimage.label(fg, structure=_FOUR)
    if n == 0:
        return []
    parent = list(range(n + 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in zip(labels[:, 0], labels[:, -1]):
        if a and b:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(n + 1)])
    merged = roots[labels]
    merged[labels == 0] = 0
    out = []
    flat = merged.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(n + 2))
    for lab in np.unique(roots[1:]):
        idx = order[bounds[lab]:bounds[lab + 1]]
        if len(idx) < min_area_cells:
            continue
        rows, cols = np.divmod(idx, values.shape[1])
        score = float(values.ravel()[idx].max())
        out.append(KnotDetection.from_cells(np.column_stack([rows, cols]), score,
                                            values.shape, pmap.l_extent, id=len(out)))
    return out


@dataclass
class DetectionEvalReport:
    ap: float
    iou_threshold: float
    precision: np.ndarray
    recall: np.ndarray
    matches: list
    n_predictions: int
    n_ground_truth: int
    per_log: dict = field(default_factory=dict)

    @property
    def map(self):
        # single class
        return self.ap


def _match(predictions, ground_truth, iou_threshold):
    """Greedy one-to-one matching; returns per-prediction (score, tp) in rank order."""
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].score)
    taken = set()
    ranked, matches = [], []
    for i in order:
        best, best_iou = None, -1.0
        for g, gt in enumerate(ground_truth):
            if g in taken:
                continue
            v = iou(predictions[i], gt)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = g, v
        if best is not None:
            taken.add(best)
            matches.append((i, best, best_iou))
        ranked.append((predictions[i].score, best is not None))
    return ranked, matches


def average_precision(tp, n_gt):
    """All-point interpolated AP from a rank-ordered TP flag array."""
    tp = np.asarray(tp, dtype=float)
    if n_gt == 0:
        return (1.0 if len(tp) == 0 else 0.0), np.empty(0), np.empty(0)
    if len(tp) == 0:
        return 0.0, np.empty(0), np.empty(0)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    ap = float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))
    return ap, precision, recall


def evaluate_map(predictions, ground_truth, iou_threshold=DEFAULT_IOU):
    """mAP of a single-class detection set against ground-truth masks.

    Both empty gives 1.0; predictions without any ground truth give 0.0.
    """
    return evaluate_many({"": (predictions, ground_truth)}, iou_threshold)


def evaluate_many(per_log, iou_threshold=DEFAULT_IOU):
    """Pool several logs: matching is per log, the PR curve is global."""
    pooled = []
    matches = []
    per_log_ap = {}
    n_gt = n_pred = 0
    for name, (preds, gts) in per_log.items():
        ranked, m = _match(list(preds), list(gts), iou_threshold)
        per_log_ap[name] = average_precision([t for _, t in ranked], len(gts))[0]
        pooled.extend(ranked)
        matches.extend((name, i, g, v) for i, g, v in m)
        n_gt += len(gts)
        n_pred += len(preds)
    order = sorted(range(len(pooled)), key=lambda i: -pooled[i][0])
    ap, precision, recall = average_precision([pooled[i][1] for i in order], n_gt)
    return DetectionEvalReport(ap, iou_threshold, precision, recall, matches,
                               n_pred, n_gt, per_log_ap)


def write_pmap(pmap, path):
    write_grid(path, pmap.values, pmap.l_extent, "PMAP")


def read_pmap(path):
    values, l_extent = read_grid(path, "PMAP")
    return ProbabilityMap(values, l_extent)


CSV_COLUMNS = ["id", "log", "theta_deg", "l_mm", "area_cells", "score", "bbox", "cells"]


def write_detections(detections, path):
    """Detection list as CSV; ``cells`` lists ``row:col`` tokens of the mask."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for d in detections:
            w.writerow([d.id, d.log, f"{d.centroid[0]:.6f}", f"{d.centroid[1]:.6f}", d.area,
                        f"{d.score:.6f}", " ".join(str(v) for v in d.bbox),
                        " ".join(f"{r}:{c}" for r, c in d.cells)])


def read_detections(path):
    """Parse a detection CSV. Without a ``cells`` column the bbox is used as the mask."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            return out
        missing = {"id", "theta_deg", "l_mm", "score", "bbox"} - set(header)
        if missing:
            raise FormatError(f"missing columns: {', '.join(sorted(missing))}", 1)
        col = {h: i for i, h in enumerate(header)}
        for lineno, row in enumerate(reader, 2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                bbox = tuple(int(v) for v in row[col["bbox"]].split())
                if len(bbox) != 4:
                    raise ValueError("bbox needs 4 integers")
                if "cells" in col and row[col["cells"]].strip():
                    cells = np.array([[int(v) for v in tok.split(":")]
                                      for tok in row[col["cells"]].split()], dtype=np.int64)
                else:
                    r0, c0, r1, c1 = bbox
                    cols = np.arange(c0, c1 + 1) if c0 <= c1 else None
                    if cols is None:
                        raise ValueError("wrapped bbox needs an explicit cells column")
                    rr, cc = np.meshgrid(np.arange(r0, r1 + 1), cols, indexing="ij")
                    cells = np.column_stack([rr.ravel(), cc.ravel()])
                det = KnotDetection(cells, float(row[col["score"]]),
                                    (float(row[col["theta_deg"]]), float(row[col["l_mm"]])),
                                    bbox, id=int(row[col["id"]]),
                                    log=row[col["log"]].strip() if "log" in col else "")
            except ValueError as exc:
                raise FormatError(str(exc), lineno) from None
            out.append(det)
    return out


import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from knotsaw import detection as det
from knotsaw import heightmap as hm
from knotsaw.errors import FormatError
from knotsaw.synthgen import ground_truth_mask

from _helpers import hand_case, oracle_map, random_instance, small_log


def bump_map(centers, radius_mm=15.0, height=4.0, r=150.0, theta_bins=360, l_bins=201, l_extent=1000.0):
    th = np.arange(theta_bins) * 360.0 / theta_bins
    ll = np.linspace(0, l_extent, l_bins)
    T, L = np.meshgrid(th, ll)
    v = np.full(T.shape, r)
    for t0, l0 in centers:
        d = (T - t0 + 180.0) % 360.0 - 180.0
        q = np.hypot(np.radians(d) * r, L - l0) / radius_mm
        v += np.where(q < 1, height * 0.5 * (1 + np.cos(np.pi * q)), 0.0)
    return hm.HeightMap(v, l_extent)


class TestLogDetect:
    def test_constant_map(self):
        p = det.log_detect(hm.HeightMap(np.full((40, 90), 120.0), 400.0), 15.0)
        assert np.all(p.values == 0)

    def test_linear_taper_is_flat(self):
        v = np.outer(np.linspace(150, 120, 60), np.ones(90))
        p = det.log_detect(hm.HeightMap(v, 600.0), 15.0)
        assert np.all(p.values == 0)

    def test_single_bump(self):
        h = bump_map([(180.0, 500.0)])
        p = det.log_detect(h, 15.0)
        k, j = np.unravel_index(np.argmax(p.values), p.values.shape)
        assert abs(j - 180) <= 1 and abs(k * h.dl - 500.0) <= h.dl
        dets = det.extract_detections(p, 4, 0.5)
        assert len(dets) == 1
        theta_c, l_c = dets[0].centroid
        assert abs(theta_c - 180.0) <= h.dtheta and abs(l_c - 500.0) <= h.dl

    def test_two_bumps_ninety_apart(self):
        p = det.log_detect(bump_map([(60.0, 500.0), (150.0, 500.0)]), 15.0)
        dets = det.extract_detections(p, 4, 0.5)
        assert len(dets) == 2
        assert sorted(round(d.centroid[0]) for d in dets) == [60, 150]

    def test_theta_shift_equivariance(self):
        h = bump_map([(10.0, 300.0), (200.0, 700.0)], l_bins=101)
        h.values = h.values + np.random.default_rng(0).normal(0, 0.2, h.values.shape)
        a = det.log_detect(h, 12.0).values
        shifted = hm.HeightMap(np.roll(h.values, 37, axis=1), h.l_extent)
        b = det.log_detect(shifted, 12.0).values
        np.testing.assert_array_equal(np.roll(a, 37, axis=1), b)

    def test_sigma_clamp_warns(self):
        h = hm.HeightMap(np.random.default_rng(1).normal(100, 1, (20, 36)), 1900.0)
        with pytest.warns(det.SigmaTooSmall):
            det.log_detect(h, 5.0)

    def test_threshold_zeroes(self):
        p = det.log_detect(bump_map([(90.0, 400.0)]), 15.0, threshold=0.6)
        assert np.all((p.values == 0) | (p.values >= 0.6))


class TestExtract:
    def test_zero_map(self):
        assert det.extract_detections(det.ProbabilityMap(np.zeros((10, 20)), 100.0)) == []

    def test_single_component(self):
        v = np.zeros((20, 30))
        v[5:9, 10:15] = 0.6
        v[7, 12] = 0.9
        dets = det.extract_detections(det.ProbabilityMap(v, 100.0), 5, 0.5)
        assert len(dets) == 1
        assert dets[0].area == 20 and dets[0].score == pytest.approx(0.9)

    def test_small_components_dropped(self):
        v = np.zeros((20, 30))
        v[2, 2:5] = 0.8
        assert det.extract_detections(det.ProbabilityMap(v, 100.0), 4, 0.5) == []

    def test_seam_component_is_one(self):
        v = np.zeros((20, 36))
        v[5:9, 0:3] = 0.8
        v[5:9, 33:36] = 0.8
        dets = det.extract_detections(det.ProbabilityMap(v, 100.0), 4, 0.5)
        assert len(dets) == 1
        assert dets[0].area == 24
        r0, c0, r1, c1 = dets[0].bbox
        assert (c0, c1) == (33, 2)
        assert dets[0].centroid[0] == pytest.approx(355.0)  # circular mean of 330..350 and 0..20

    def test_components_are_four_connected(self):
        v = np.zeros((10, 10))
        v[[2, 3, 4, 5], [2, 3, 4, 5]] = 1.0  # diagonal only
        assert det.extract_detections(det.ProbabilityMap(v, 100.0), 1, 0.5).__len__() == 4


# --- mAP -------------------------------------------------------------------

def test_hand_case():
    preds, gts = hand_case()
    assert det.iou(preds[0], gts[0]) == pytest.approx(0.5)
    assert det.iou(preds[1], gts[1]) == pytest.approx(0.05)
    assert det.iou(preds[2], gts[1]) == pytest.approx(0.3)
    rep = det.evaluate_map(preds, gts, 0.10)
    assert rep.map == pytest.approx(0.5 * 1 + 0.5 * 2 / 3, abs=1e-9)
    assert rep.map == pytest.approx(0.8333, abs=1e-4)


def test_identical_and_empty():
    preds, gts = hand_case()
    assert det.evaluate_map(gts, gts).map == 1.0
    assert det.evaluate_map([], gts).map == 0.0
    assert det.evaluate_map([], []).map == 1.0
    assert det.evaluate_map(preds, []).map == 0.0


def test_map_matches_oracle_randomized():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        preds, gts = random_instance(rng)
        assert abs(det.evaluate_map(preds, gts, 0.1).map - oracle_map(preds, gts, 0.1)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_score_scaling_invariance(seed, c):
    preds, gts = random_instance(np.random.default_rng(seed))
    a = det.evaluate_map(preds, gts)
    scaled = [det.KnotDetection(p.cells, p.score * c, p.centroid, p.bbox) for p in preds]
    b = det.evaluate_map(scaled, gts)
    assert a.map == b.map
    assert [m[:2] for m in a.matches] == [m[:2] for m in b.matches]


def test_duplicate_never_raises_precision():
    preds, gts = hand_case()
    base = det.evaluate_map(preds, gts)
    dup = det.KnotDetection(preds[0].cells, 0.1, preds[0].centroid, preds[0].bbox)
    more = det.evaluate_map(preds + [dup], gts)
    n = len(base.precision)
    assert np.all(more.precision[:n] <= base.precision + 1e-15)
    assert more.precision[-1] <= base.precision[-1]


def test_evaluate_many_pools_counts():
    preds, gts = hand_case()
    rep = det.evaluate_many({"a": (preds, gts), "b": (gts, gts)})
    assert rep.n_ground_truth == 4 and rep.n_predictions == 5
    assert rep.per_log["b"] == 1.0
    assert rep.per_log["a"] == pytest.approx(5 / 6)


# --- file formats ----------------------------------------------------------

def test_detection_csv_round_trip(tmp_path):
    v = np.zeros((20, 36))
    v[5:9, 0:3] = 0.8
    v[5:9, 33:36] = 0.7
    v[12:15, 10:14] = 0.95
    dets = det.extract_detections(det.ProbabilityMap(v, 100.0), 4, 0.5)
    det.write_detections(dets, tmp_path / "d.csv")
    back = det.read_detections(tmp_path / "d.csv")
    assert len(back) == len(dets)
    for a, b in zip(dets, back):
        np.testing.assert_array_equal(a.cells, b.cells)
        assert a.bbox == b.bbox and a.score == pytest.approx(b.score)


def test_detection_csv_bbox_only(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("id,theta_deg,l_mm,area_cells,score,bbox\n0,10,20,6,0.5,1 2 2 4\n")
    (d,) = det.read_detections(p)
    assert d.area == 6


@pytest.mark.parametrize("body, line", [
    ("id,theta_deg,l_mm,score\n", 1),
    ("id,theta_deg,l_mm,area_cells,score,bbox\n0,1,2,3,0.5,1 2 3 4\n1,1,2,3,x,1 2 3 4\n", 3),
    ("id,theta_deg,l_mm,area_cells,score,bbox\n0,1,2,3,0.5\n", 2),
])
def test_detection_csv_errors(tmp_path, body, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(FormatError) as exc:
        det.read_detections(p)
    assert exc.value.line == line


def test_pmap_round_trip(tmp_path):
    p = det.ProbabilityMap(np.random.default_rng(0).uniform(size=(6, 9)), 55.0)
    det.write_pmap(p, tmp_path / "a.pmap")
    back = det.read_pmap(tmp_path / "a.pmap")
    np.testing.assert_array_equal(back.values, p.values)
    with pytest.raises(FormatError):
        hm.read_heightmap(tmp_path / "a.pmap")


def test_pmap_values_clamped():
    p = det.ProbabilityMap(np.array([[-0.5, 0.2], [1.4, 1.0]]), 1.0)
    assert p.values.min() == 0.0 and p.values.max() == 1.0


@pytest.mark.slow
def test_noise_free_count_matches_ground_truth():
    for seed in (0, 1, 2):
        _, log, cloud = small_log(seed, knot_base_radius=(10.0, 20.0))
        h, _ = hm.heightmap_from_cloud(cloud)
        dets = det.extract_detections(det.log_detect(h))
        gts = ground_truth_mask(log, h.theta_bins, h.l_bins, h.l_extent)
        rep = det.evaluate_map(dets, gts)
        assert len(dets) == len(gts)
        assert rep.recall[-1] == 1.0

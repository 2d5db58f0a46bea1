import math

import numpy as np
import pytest

from knotsaw import heightmap as hm
from knotsaw.cloud import PointCloud
from knotsaw.errors import DegenerateBin, FormatError, InvalidInput
from knotsaw.synthgen import GenParams, generate_log, render_point_cloud

from _helpers import cylinder_cloud, samples


class TestCenterline:
    def test_cylinder_axis(self):
        # rings of evenly spaced points: every bin centroid sits on the axis
        th, z = np.meshgrid(np.radians(np.arange(0, 360, 5.0)), np.linspace(0, 4000, 801))
        cloud = PointCloud(np.column_stack([100 * np.cos(th.ravel()), 100 * np.sin(th.ravel()), z.ravel()]))
        cl = hm.estimate_centerline(cloud, 1)
        assert cl.n_segments == 1
        for v in cl.vertices:
            assert math.hypot(v[0], v[1]) <= 0.5
        assert cl.vertices[0][2] == pytest.approx(cloud.points[:, 2].min(), abs=0.5)
        assert cl.vertices[1][2] == pytest.approx(cloud.points[:, 2].max(), abs=0.5)

    def test_bent_log_follows_pith(self):
        p = GenParams(length=4000, butt_radius=150, top_radius=120, knots_per_whorl=(0, 0),
                      pith_bow=60.0, seed=3)
        log = generate_log(p)
        cloud = render_point_cloud(log, p)
        cl = hm.estimate_centerline(cloud, 8)
        assert cl.n_segments == 8
        z = np.linspace(0, p.length, 40001)
        pith = log.pith_at(z)
        dist = [np.min(np.linalg.norm(pith - v, axis=1)) for v in cl.vertices]
        assert max(dist) <= 5.0

    def test_single_point_is_degenerate(self):
        with pytest.raises(DegenerateBin) as exc:
            hm.estimate_centerline(PointCloud(np.array([[1.0, 2.0, 3.0]])), 1)
        assert exc.value.index >= 0

    def test_empty_bin_reports_index(self):
        pts = np.concatenate([cylinder_cloud(length=100, n=2000).points,
                              cylinder_cloud(length=100, n=2000).points + [0, 0, 900]])
        with pytest.raises(DegenerateBin) as exc:
            hm.estimate_centerline(PointCloud(pts), 1)
        assert 0 < exc.value.index < 49

    def test_empty_cloud(self):
        with pytest.raises(InvalidInput):
            hm.estimate_centerline(PointCloud(np.empty((0, 3))), 1)


class TestSplit:
    def test_one_segment_keeps_everything(self):
        cloud = cylinder_cloud(n=500)
        cl = hm.Centerline(np.array([[0, 0, 0], [0, 0, 1000.0]]))
        parts = hm.split_by_bisecting_planes(cloud, cl)
        assert len(parts) == 1
        np.testing.assert_array_equal(parts[0].points, cloud.points)

    def test_straight_two_segments_split_at_joint(self):
        cloud = cylinder_cloud(n=2000)
        cl = hm.Centerline(np.array([[0, 0, 0], [0, 0, 400.0], [0, 0, 1000.0]]))
        lo, hi = hm.split_by_bisecting_planes(cloud, cl)
        assert len(lo) + len(hi) == len(cloud)
        assert lo.points[:, 2].max() < 400.0 <= hi.points[:, 2].min()

    def test_v_shape_matches_nearest_arm(self):
        half = math.radians(5.0)  # 170 degree joint
        d0 = np.array([math.sin(half), 0.0, math.cos(half)])
        d1 = np.array([-math.sin(half), 0.0, math.cos(half)])
        joint = d0 * 1000.0
        verts = np.array([[0, 0, 0], joint, joint + d1 * 1000.0])
        cl = hm.Centerline(verts)
        rng = np.random.default_rng(7)
        pts = []
        for a, d in ((verts[0], d0), (joint, d1)):
            e1 = np.cross(d, [0, 1.0, 0])
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(d, e1)
            s = rng.uniform(50, 950, 400)
            phi = rng.uniform(0, 2 * np.pi, 400)
            r = rng.uniform(0, 30, 400)
            pts.append(a + s[:, None] * d + (r * np.cos(phi))[:, None] * e1 + (r * np.sin(phi))[:, None] * e2)
        pts = np.concatenate(pts)

        def seg_dist(p, a, b):
            t = np.clip((p - a) @ (b - a) / np.dot(b - a, b - a), 0, 1)
            return np.linalg.norm(p - (a + t[:, None] * (b - a)), axis=1)

        nearest = (seg_dist(pts, verts[1], verts[2]) < seg_dist(pts, verts[0], verts[1])).astype(int)
        np.testing.assert_array_equal(hm.assign_segments(pts, cl), nearest)


class TestCylindrical:
    @pytest.mark.parametrize("pt, theta", [((100, 0, 50), 0.0), ((0, 100, 50), 90.0)])
    def test_definition(self, pt, theta):
        cs = hm.to_cylindrical(np.array([pt], float), [0, 0, 0], [0, 0, 1], 7.0, [1, 0, 0])
        assert cs.theta[0] == pytest.approx(theta, abs=1e-12)
        assert cs.rho[0] == pytest.approx(100.0)
        assert cs.l[0] == pytest.approx(57.0)

    def test_point_on_axis(self):
        cs = hm.to_cylindrical(np.array([[0.0, 0.0, 20.0]]), [0, 0, 0], [0, 0, 1], 0.0, [1, 0, 0])
        assert cs.theta[0] == 0.0 and cs.rho[0] == 0.0

    def test_theta_in_range(self):
        pts = np.array([[100.0, -1e-18, 0.0], [-100.0, -1e-12, 0.0]])
        cs = hm.to_cylindrical(pts, [0, 0, 0], [0, 0, 1], 0.0, [1, 0, 0])
        assert np.all((cs.theta >= 0) & (cs.theta < 360))


def _grid_samples(fn, n_theta=720, n_l=300, l_extent=1000.0, jitter=0, seed=0):
    rng = np.random.default_rng(seed)
    th, ll = np.meshgrid(np.arange(n_theta) * 360.0 / n_theta, np.linspace(0, l_extent, n_l))
    th, ll = th.ravel(), ll.ravel()
    if jitter:
        th = (th + rng.uniform(-jitter, jitter, th.size)) % 360.0
    return samples(th, ll, fn(th, ll))


def _bump(theta0, l0, height=5.0, width_mm=25.0, radius=100.0):
    def fn(th, ll):
        d = (th - theta0 + 180.0) % 360.0 - 180.0
        arc = np.radians(d) * radius
        return radius + height * np.exp(-0.5 * (arc ** 2 + (ll - l0) ** 2) / width_mm ** 2)
    return fn


class TestFit:
    def test_perfect_cylinder(self):
        s = _grid_samples(lambda th, ll: np.full_like(th, 100.0), jitter=0.3)
        h = hm.fit_heightmap(s, 360, 100, lam=0.1, l_extent=1000.0)
        assert np.abs(h.values - 100.0).max() <= 1e-4 * 100.0

    def test_bump_localized(self):
        s = _grid_samples(_bump(180.0, 500.0), jitter=0.3)
        h = hm.fit_heightmap(s, 360, 101, lam=0.01, l_extent=1000.0)
        k, j = np.unravel_index(np.argmax(h.values), h.values.shape)
        assert abs(j * h.dtheta - 180.0) <= h.dtheta
        assert abs(k * h.dl - 500.0) <= h.dl
        assert 4.0 <= h.values.max() - 100.0 <= 5.5

    def test_huge_lambda_flattens(self):
        rng = np.random.default_rng(2)
        s = samples(rng.uniform(0, 360, 5000), rng.uniform(0, 1000, 5000), rng.uniform(90, 110, 5000))
        h = hm.fit_heightmap(s, 72, 21, lam=1e9, l_extent=1000.0)
        dev = np.abs(h.values - s.rho.mean()).max()
        assert dev <= 0.01 * np.ptp(s.rho)

    def test_empty_samples(self):
        with pytest.raises(InvalidInput):
            hm.fit_heightmap(samples([], [], []), 36, 10, l_extent=100.0)

    def test_beats_cell_mean_grid(self):
        rng = np.random.default_rng(5)
        n = 20000
        th, ll = rng.uniform(0, 360, n), rng.uniform(0, 1000, n)
        s = samples(th, ll, _bump(40.0, 300.0)(th, ll) + rng.normal(0, 0.3, n))
        h = hm.fit_heightmap(s, 90, 41, lam=0.01, l_extent=1000.0)
        # per-node mean of the samples nearest to each node, empty nodes at the global mean
        j = np.rint(th / 4.0).astype(int) % 90
        k = np.rint(ll / 25.0).astype(int)
        tot = np.zeros((41, 90))
        cnt = np.zeros((41, 90))
        np.add.at(tot, (k, j), s.rho)
        np.add.at(cnt, (k, j), 1)
        mean_grid = np.where(cnt > 0, tot / np.maximum(cnt, 1), s.rho.mean())
        assert hm.fit_objective(h.values, s, 0.01, 1000.0) <= hm.fit_objective(mean_grid, s, 0.01, 1000.0)

    def test_seam_continuity(self):
        s = _grid_samples(_bump(0.0, 500.0, width_mm=15.0), jitter=0.3, seed=4)
        h = hm.fit_heightmap(s, 360, 101, lam=0.01, l_extent=1000.0)
        v = h.values
        seam = np.abs(v[:, 0] - v[:, -1]).max()
        interior = np.abs(np.diff(v, axis=1)).max()
        assert seam <= 2 * interior

    def test_unsampled_cells_filled(self):
        s = samples(np.linspace(0, 90, 200), np.full(200, 50.0), np.full(200, 80.0))
        h = hm.fit_heightmap(s, 36, 11, lam=0.01, l_extent=100.0)
        assert np.all(np.isfinite(h.values))
        assert np.allclose(h.values, 80.0, atol=1e-6)

    def test_deterministic(self):
        s = _grid_samples(_bump(90.0, 200.0), n_theta=200, n_l=100, jitter=0.5, seed=9)
        a = hm.fit_heightmap(s, 120, 41, l_extent=1000.0)
        b = hm.fit_heightmap(s, 120, 41, l_extent=1000.0)
        assert a.values.tobytes() == b.values.tobytes()


def test_rotation_equivariance():
    rng = np.random.default_rng(11)
    n = 40000
    th, ll = rng.uniform(0, 360, n), rng.uniform(0, 1000, n)
    rho = _bump(70.0, 400.0)(th, ll)
    t = np.radians(th)
    cloud = PointCloud(np.column_stack([rho * np.cos(t), rho * np.sin(t), ll]))
    cl = hm.Centerline(np.array([[0, 0, 0], [0, 0, 1000.0]]))
    delta_bins = 12
    a = np.radians(delta_bins * 2.0)
    rot = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    base = hm.fit_heightmap(hm.cloud_to_samples(cloud, cl), 180, 51, l_extent=1000.0)
    moved = hm.fit_heightmap(hm.cloud_to_samples(PointCloud(cloud.points @ rot.T), cl), 180, 51,
                             l_extent=1000.0)
    err = np.abs(np.roll(base.values, delta_bins, axis=1) - moved.values).max()
    assert err <= 1e-3 * rho.mean()


def test_heightmap_from_cloud_cylinder():
    cloud = cylinder_cloud(radius=120, length=800, n=200000, seed=2)
    h, cl = hm.heightmap_from_cloud(cloud, theta_bins=90, l_bins=41)
    assert h.values.shape == (41, 90)
    assert h.l_extent == pytest.approx(800, abs=1.0)
    assert np.abs(h.values - 120).max() < 1.0


def test_hmap_round_trip(tmp_path):
    vals = np.random.default_rng(0).uniform(90, 110, (5, 8))
    h = hm.HeightMap(vals, 123.5)
    hm.write_heightmap(h, tmp_path / "a.hmap")
    back = hm.read_heightmap(tmp_path / "a.hmap")
    np.testing.assert_array_equal(back.values, vals)
    assert back.l_extent == 123.5
    text = (tmp_path / "a.hmap").read_text().splitlines()
    assert text[:3] == ["HMAP v1", "theta_bins 8", "l_bins 5"]


@pytest.mark.parametrize("body, line", [
    ("HMAP v2\n", 1),
    ("HMAP v1\ntheta_bins 2\nl_bins 1\nl_extent_mm 1.0\n1.0\n", 5),
    ("HMAP v1\ntheta_bins 2\nl_bins 2\nl_extent_mm 1.0\n1.0,2.0\n1.0,x\n", 6),
    ("HMAP v1\ntheta_bins two\n", 2),
])
def test_hmap_parse_errors(tmp_path, body, line):
    p = tmp_path / "bad.hmap"
    p.write_text(body)
    with pytest.raises(FormatError) as exc:
        hm.read_heightmap(p)
    assert exc.value.line == line

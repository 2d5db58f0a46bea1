import math

import numpy as np
import pytest

from knotsaw import synthgen as sg
from knotsaw.cloud import NO_LABEL
from knotsaw.errors import FormatError, InvalidParams

from _helpers import straight_log


def whorls(log, gap=150.0):
    """1-D gap clustering of knot positions along the log."""
    order = sorted(log.knots, key=lambda k: k.l_pos)
    groups = [[order[0]]] if order else []
    for a, b in zip(order, order[1:]):
        if b.l_pos - a.l_pos > gap:
            groups.append([])
        groups[-1].append(b)
    return groups


def test_same_seed_identical():
    p = sg.GenParams(seed=42)
    assert sg.generate_log(p).to_json() == sg.generate_log(p).to_json()
    a = sg.render_point_cloud(sg.generate_log(p), p)
    b = sg.render_point_cloud(sg.generate_log(p), p)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_whorl_count_range():
    counts = [len(whorls(sg.generate_log(sg.GenParams(seed=s)))) for s in range(100)]
    assert min(counts) >= 6 and max(counts) <= 10


def test_fixed_knots_per_whorl():
    for s in range(10):
        log = sg.generate_log(sg.GenParams(knots_per_whorl=(3, 3), seed=s))
        assert all(len(w) == 3 for w in whorls(log))


def test_zero_knots():
    log = sg.generate_log(sg.GenParams(knots_per_whorl=(0, 0)))
    assert log.knots == []
    assert log.mean_angular_halfwidth() == 0.0


def test_bare_surface_exact():
    p = sg.GenParams(length=1000, knots_per_whorl=(0, 0), points_per_mm2=0.02, seed=3)
    log = sg.generate_log(p)
    c = sg.render_point_cloud(log, p)
    r = np.hypot(c.points[:, 0], c.points[:, 1])
    assert np.abs(r - log.radius_at(c.points[:, 2])).max() <= 1e-9
    assert np.all(c.labels == NO_LABEL)


def test_single_bump_height():
    log = straight_log([(90.0, 500.0, 15.0)])
    log.knots[0].bump_height = 5.0
    total, labels = sg.surface_bumps(log, np.array([90.0]), np.array([500.0]))
    assert total[0] == pytest.approx(5.0) and labels[0] == 0
    p = sg.GenParams(length=1000, butt_radius=150, top_radius=150, points_per_mm2=2.0, seed=1)
    c = sg.render_point_cloud(log, p)
    excess = np.hypot(c.points[:, 0], c.points[:, 1]) - 150.0
    assert 4.9 <= excess.max() <= 5.0 + 1e-9
    top = np.argmax(excess)
    theta = math.degrees(math.atan2(c.points[top, 1], c.points[top, 0])) % 360
    assert abs(theta - 90.0) < 1.0 and abs(c.points[top, 2] - 500.0) < 3.0


def test_point_density():
    p = sg.GenParams(length=4000, butt_radius=150, top_radius=150, knots_per_whorl=(0, 0),
                     points_per_mm2=0.5, seed=0)
    c = sg.render_point_cloud(sg.generate_log(p), p)
    area = 2 * math.pi * 150 * 4000
    assert abs(len(c) - 0.5 * area) <= 0.05 * 0.5 * area


def test_labels_inside_footprint():
    p = sg.GenParams(length=1500, whorl_spacing_mean=300, surface_noise_sigma=0.5, seed=6)
    log = sg.generate_log(p)
    c = sg.render_point_cloud(log, p)
    th = np.degrees(np.arctan2(c.points[:, 1], c.points[:, 0])) % 360
    for k in log.knots:
        sel = c.labels == k.id
        assert sel.any()
        q = sg.knot_footprint(k, th[sel], c.points[sel, 2])
        # expanded by one noise sigma in both directions
        grow = 1.0 + p.surface_noise_sigma / k.base_radius
        assert q.max() <= grow


def test_ground_truth_mask():
    assert sg.ground_truth_mask(straight_log([]), 360, 101) == []
    (d,) = sg.ground_truth_mask(straight_log([(180.0, 500.0, 12.0)]), 360, 101)
    assert abs(d.centroid[0] - 180.0) <= 1.0 and abs(d.centroid[1] - 500.0) <= 10.0


def test_same_whorl_masks_disjoint():
    r = 150.0
    base = r * math.sin(math.radians(5.0))  # 5 degree halfwidth
    log = straight_log([(100.0, 500.0, base), (130.0, 500.0, base)], radius=r)
    assert log.knots[0].angular_halfwidth == pytest.approx(5.0)
    a, b = sg.ground_truth_mask(log, 360, 201)
    assert not set(map(tuple, a.cells.tolist())) & set(map(tuple, b.cells.tolist()))


def test_ground_truth_pmap_binary():
    log = sg.generate_log(sg.GenParams(length=1500, seed=2))
    pm = sg.ground_truth_pmap(log, 360, 151)
    assert set(np.unique(pm.values)) <= {0.0, 1.0}
    assert pm.values.sum() > 0


@pytest.mark.parametrize("field, value", [
    ("knot_base_radius", (20.0, 8.0)),
    ("bump_height", (5.0, 2.0)),
    ("knots_per_whorl", (4, 1)),
    ("length", -1.0),
    ("points_per_mm2", 0.0),
])
def test_invalid_params_name_the_field(field, value):
    with pytest.raises(InvalidParams) as exc:
        sg.generate_log(sg.GenParams(**{field: value}))
    assert exc.value.param == field


def test_params_from_mapping():
    p = sg.GenParams.from_mapping({"bump_height": "1,3", "seed": "9", "length": "2000", "other": "x"})
    assert p.bump_height == (1.0, 3.0) and p.seed == 9 and p.length == 2000.0
    with pytest.raises(InvalidParams):
        sg.GenParams.from_mapping({"bump_height": "1"})


def test_read_params(tmp_path):
    f = tmp_path / "gen.cfg"
    f.write_text("# synthetic batch\nlength = 2500\nknots_per_whorl = 1, 2\n")
    p = sg.read_params(f, {"seed": "3"})
    assert p.length == 2500.0 and p.knots_per_whorl == (1, 2) and p.seed == 3


def test_log_json_round_trip():
    log = sg.generate_log(sg.GenParams(pith_bow=20.0, seed=5))
    back = sg.VirtualLog.from_json(log.to_json())
    assert back.to_json() == log.to_json()
    with pytest.raises(FormatError):
        sg.VirtualLog.from_json('{"length": 1}')

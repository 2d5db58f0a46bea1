import numpy as np
import pytest

from knotsaw import cloud as cl
from knotsaw.config import load_config, parse_kv_lines
from knotsaw.errors import FormatError, InvalidInput, InvalidParams


def sample_cloud(labels=True):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3)) * 100
    lab = rng.integers(-1, 4, 50) if labels else None
    return cl.PointCloud(pts, lab)


@pytest.mark.parametrize("suffix", [".xyz", ".ply"])
@pytest.mark.parametrize("labels", [True, False])
def test_cloud_round_trip(tmp_path, suffix, labels):
    c = sample_cloud(labels)
    path = tmp_path / f"c{suffix}"
    cl.write_cloud(c, path)
    back = cl.read_cloud(path)
    tol = 1e-6 if suffix == ".xyz" else 1e-4  # XYZ keeps micrometres, PLY stores float32
    np.testing.assert_allclose(back.points, c.points, rtol=tol, atol=tol)
    if labels:
        np.testing.assert_array_equal(back.labels, c.labels)
    else:
        assert back.labels is None


def test_xyz_none_label(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("# comment\n1 2 3 none\n4 5 6 2\n")
    c = cl.read_xyz(p)
    assert c.labels.tolist() == [cl.NO_LABEL, 2]


@pytest.mark.parametrize("body, line", [("1 2\n", 1), ("1 2 3\n4 5 x\n", 2), ("1 2 3\n1 2 3 4\n", 2)])
def test_xyz_errors(tmp_path, body, line):
    p = tmp_path / "bad.xyz"
    p.write_text(body)
    with pytest.raises(FormatError) as exc:
        cl.read_xyz(p)
    assert exc.value.line == line


def test_cloud_validation():
    with pytest.raises(InvalidInput):
        cl.PointCloud(np.zeros((3, 2)))
    with pytest.raises(InvalidInput):
        cl.PointCloud(np.array([[0, 0, np.nan]]))


def test_kv_parsing(tmp_path):
    assert parse_kv_lines(["a = 1  # note", "", "# skip", "b=x y"]) == {"a": "1", "b": "x y"}
    with pytest.raises(FormatError) as exc:
        parse_kv_lines(["a = 1", "oops"])
    assert exc.value.line == 2
    f = tmp_path / "c.cfg"
    f.write_text("sigma_mm = 12\nlam = 0.5\n")
    cfg = load_config(f, ["lam=0.25"])
    assert cfg.get_float("sigma_mm", 0) == 12.0 and cfg.get_float("lam", 0) == 0.25
    assert cfg.get_int("theta_bins", 360) == 360
    with pytest.raises(InvalidParams):
        load_config(None, ["novalue"])
    with pytest.raises(InvalidParams):
        load_config(None, ["theta_bins=abc"]).get_int("theta_bins", 1)

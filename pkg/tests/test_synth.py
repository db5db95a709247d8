import numpy as np
import pytest

from dapnet.pipeline import read_pts, write_pts
from dapnet.synth import CLASSES, SceneSpec, expected_counts, generate, roof_boxes


def test_ground_only_scene():
    spec = SceneSpec(extent=10.0, classes=("ground",), density=4.0, noise=0.05, seed=1)
    cloud = generate(spec)
    assert abs(len(cloud) - 400) <= 4 * np.sqrt(400)
    assert np.all(cloud.labels == 0)
    assert np.all(np.abs(cloud.xyz[:, 2]) <= 3 * spec.noise + 1e-12)
    pad = 3 * spec.noise + 1e-12  # jitter is applied to every coordinate
    assert np.all((cloud.xyz[:, :2] >= -pad) & (cloud.xyz[:, :2] <= 10.0 + pad))


def test_same_seed_same_bytes(tmp_path):
    spec = SceneSpec(extent=20.0, classes=CLASSES, density=1.0, seed=9)
    write_pts(tmp_path / "a.pts", generate(spec))
    write_pts(tmp_path / "b.pts", generate(spec))
    assert (tmp_path / "a.pts").read_bytes() == (tmp_path / "b.pts").read_bytes()
    other = generate(SceneSpec(extent=20.0, classes=CLASSES, density=1.0, seed=10))
    assert not np.array_equal(other.xyz[:10], generate(spec).xyz[:10])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_horizontal_counts_match_expectation(seed):
    spec = SceneSpec(extent=40.0, classes=("ground", "roof"), density=2.0, seed=seed)
    cloud = generate(spec)
    want = expected_counts(spec)
    got = np.bincount(cloud.labels, minlength=2)
    assert abs(got[0] - want["ground"]) <= 0.1 * want["ground"]
    assert abs(got[1] - want["roof"]) <= 0.1 * want["roof"]


def test_roofs_stand_above_the_ground():
    spec = SceneSpec(extent=40.0, classes=("ground", "roof", "tree", "car"), density=2.0, seed=4)
    cloud = generate(spec)
    z = cloud.xyz[:, 2]
    ground, roof = z[cloud.labels == 0], z[cloud.labels == 1]
    assert roof.size and roof.min() > ground.max()
    assert len(roof_boxes(spec)) > 0


def test_labels_follow_class_order_and_signatures():
    spec = SceneSpec(extent=30.0, classes=("tree", "ground"), density=2.0, seed=5)
    cloud = generate(spec)
    assert set(np.unique(cloud.labels)) == {0, 1}
    assert np.all(cloud.return_number <= cloud.num_returns)
    assert cloud.num_returns[cloud.labels == 1].max() == 1
    assert cloud.num_returns[cloud.labels == 0].max() > 1


def test_pts_round_trip(tmp_path):
    cloud = generate(SceneSpec(extent=15.0, density=2.0, seed=6))
    write_pts(tmp_path / "s.pts", cloud)
    back = read_pts(tmp_path / "s.pts")
    assert np.array_equal(back.xyz, cloud.xyz) and np.array_equal(back.labels, cloud.labels)


def test_bad_specs_raise():
    with pytest.raises(ValueError):
        SceneSpec(classes=())
    with pytest.raises(ValueError, match="unknown"):
        SceneSpec(classes=("ground", "lake"))
    with pytest.raises(ValueError):
        SceneSpec(classes=("ground", "ground"))
    with pytest.raises(ValueError):
        SceneSpec(extent=0)

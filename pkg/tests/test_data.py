import numpy as np
import pytest

from ragdp.data import Dataset, generate_dataset, ring_centers


@pytest.mark.parametrize("gen", ["gaussian_ring", "swiss_roll", "checkerboard", "blobs"])
def test_generators_deterministic(gen):
    a = generate_dataset(gen, {}, 300, 4)
    b = generate_dataset(gen, {}, 300, 4)
    assert a.checksum == b.checksum
    assert a.points.shape == (300, 2)
    assert generate_dataset(gen, {}, 300, 5).checksum != a.checksum


def test_ring_labels_stratified():
    d = generate_dataset("gaussian_ring", {"n_modes": 8}, 8000, 0)
    np.testing.assert_array_equal(np.bincount(d.labels), 1000)
    assert d.n_classes == 8


def test_ring_points_near_their_centers():
    d = generate_dataset("gaussian_ring", {"n_modes": 4, "radius": 3.0, "mode_std": 0.1}, 4000, 1)
    centers = ring_centers(4, 3.0)
    for c in range(4):
        pts = d.points[d.labels == c]
        se = 0.1 / np.sqrt(len(pts))
        assert np.all(np.abs(pts.mean(0) - centers[c]) < 5 * se)


def test_private_shift_recovered_from_label_means():
    params = {"n_modes": 8, "radius": 2.0, "mode_std": 0.05}
    shift = {"rotation": 0.3, "translation": [0.5, -0.25]}
    prv = generate_dataset("gaussian_ring", {**params, **shift}, 8000, 2, "prv")
    expected = ring_centers(8, 2.0, 0.3, [0.5, -0.25])
    for c in range(8):
        pts = prv.points[prv.labels == c]
        se = 0.05 / np.sqrt(len(pts))
        assert np.all(np.abs(pts.mean(0) - expected[c]) < 5 * se)


def test_unknown_generator_and_bad_n():
    with pytest.raises(ValueError):
        generate_dataset("moons", {}, 10, 0)
    with pytest.raises(ValueError):
        generate_dataset("blobs", {}, 0, 0)
    with pytest.raises(ValueError):
        generate_dataset("blobs", {}, 10, 0, role="test")


def test_round_trip(tmp_path):
    d = generate_dataset("blobs", {"centers": [[0, 0], [1, 1], [2, 0]]}, 99, 3, "pub_ref")
    digest = d.save(tmp_path / "d.rpds")
    back = Dataset.load(tmp_path / "d.rpds")
    assert digest == back.checksum == d.checksum
    assert back.points.tobytes() == d.points.tobytes()
    assert back.labels.tobytes() == d.labels.tobytes()
    assert (back.role, back.generator, back.seed) == ("pub_ref", "blobs", 3)
    assert back.generator_params == d.generator_params


def test_unlabeled_round_trip():
    d = generate_dataset("swiss_roll", {}, 20, 0, "syn")
    assert d.labels is None and d.n_classes == 0
    back = Dataset.from_bytes(d.to_bytes())
    assert back.labels is None
    assert back.points.tobytes() == d.points.tobytes()


def test_bad_magic_and_roles():
    d = generate_dataset("blobs", {}, 4, 0)
    with pytest.raises(ValueError):
        Dataset.from_bytes(b"XXXX" + d.to_bytes()[4:])
    with pytest.raises(ValueError):
        d.require_role("prv")
    assert d.require_role("pub_pre", "pub_ref") is d
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), [0, 1], "prv", "blobs")
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, -1], "prv", "blobs")

import numpy as np
import pytest

from histostack.features import (
    DEFAULT_EDGENESS_RADIUS,
    FeatureMap,
    OverlapError,
    disk_offsets,
    edgeness_map,
    edgeness_values,
    entropy,
    feature_mse,
    write_feature_pgm,
)
from histostack.image import Image


def brute_force_edgeness(pixels, r_f):
    """Literal double loop over pixels and neighborhood offsets."""
    h, w = pixels.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-r_f + 1, r_f):
                for dx in range(-r_f + 1, r_f):
                    if dy == 0 and dx == 0:
                        continue
                    if dy * dy + dx * dx >= r_f * r_f:
                        continue
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w:
                        acc += abs(float(pixels[y, x]) - float(pixels[ny, nx]))
            out[y, x] = acc
    return out


def test_disk_offsets_counts():
    assert DEFAULT_EDGENESS_RADIUS == 3
    assert len(disk_offsets(1)) == 0
    assert len(disk_offsets(2)) == 8
    assert len(disk_offsets(3)) == 24
    assert (0, 0) not in set(disk_offsets(3))


def test_edgeness_radius_validation():
    with pytest.raises(ValueError):
        edgeness_map(Image([[1, 2]], 255), r_f=0.5)


def test_edgeness_center_spike():
    pixels = np.zeros((3, 3), dtype=np.uint16)
    pixels[1, 1] = 10
    fm = edgeness_map(Image(pixels, 255), r_f=2)
    # center: 8 in-disk neighbours each differ by 10
    assert fm.values[1, 1] == pytest.approx(80.0)
    # corner: only the center pixel is both in-disk and in-bounds
    assert fm.values[0, 0] == pytest.approx(10.0)
    assert fm.radius == 2


def test_edgeness_matches_brute_force():
    rng = np.random.default_rng(21)
    for r_f in (2, 3, 4):
        pixels = rng.integers(0, 256, size=(9, 9), dtype=np.uint16)
        fast = edgeness_values(pixels.astype(np.float64), r_f)
        slow = brute_force_edgeness(pixels, r_f)
        assert np.array_equal(fast, slow)


def test_feature_map_validation():
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((2, 2)) - 1.0, radius=2)
    with pytest.raises(ValueError):
        FeatureMap(np.zeros(4), radius=2)


def test_feature_mse_hand_value():
    a = FeatureMap(np.array([[0.0, 3.0]]), radius=2)
    b = FeatureMap(np.array([[4.0, 0.0]]), radius=2)
    assert feature_mse(a, b) == pytest.approx(12.5)


def test_feature_mse_with_mask():
    a = FeatureMap(np.array([[0.0, 3.0]]), radius=2)
    b = FeatureMap(np.array([[4.0, 0.0]]), radius=2)
    mask = np.array([[True, False]])
    assert feature_mse(a, b, mask=mask) == pytest.approx(16.0)
    with pytest.raises(OverlapError):
        feature_mse(a, b, mask=np.zeros((1, 2), dtype=bool))


def test_feature_mse_mismatch_errors():
    a = FeatureMap(np.zeros((2, 2)), radius=2)
    with pytest.raises(ValueError):
        feature_mse(a, FeatureMap(np.zeros((2, 3)), radius=2))
    with pytest.raises(ValueError):
        feature_mse(a, FeatureMap(np.zeros((2, 2)), radius=3))


def test_entropy_exact_cases():
    assert entropy(Image(np.full((8, 8), 42), 255)) == 0.0
    half = np.zeros((4, 4), dtype=np.uint16)
    half[:2] = 9
    assert entropy(Image(half, 255)) == pytest.approx(1.0, abs=1e-15)
    quarters = np.repeat(np.array([0, 5, 9, 13], dtype=np.uint16), 4).reshape(4, 4)
    assert entropy(Image(quarters, 255)) == pytest.approx(2.0, abs=1e-15)


def test_entropy_is_shuffle_invariant():
    rng = np.random.default_rng(4)
    pixels = rng.integers(0, 32, size=(8, 8), dtype=np.uint16)
    shuffled = pixels.ravel().copy()
    rng.shuffle(shuffled)
    assert entropy(Image(pixels, 255)) == entropy(Image(shuffled.reshape(8, 8), 255))


def test_write_feature_pgm(tmp_path):
    fm = FeatureMap(np.array([[0.0, 50.0], [25.0, 100.0]]), radius=3)
    path = tmp_path / "feat.pgm"
    write_feature_pgm(path, fm)
    from histostack.imageio import read_pgm

    img = read_pgm(path)
    assert img.pixels[1, 1] == 65535
    assert img.pixels[0, 1] == 32768  # rounded half of the range
    sidecar = (tmp_path / "feat.pgm.scale").read_text()
    assert "scale_factor" in sidecar and "radius 3" in sidecar

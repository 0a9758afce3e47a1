import numpy as np
import pytest

from histostack.image import Image
from histostack.standardize import (
    DegenerateHistogramError,
    Histogram,
    LandmarkSet,
    NotBimodalError,
    ScaleConfig,
    StandardScale,
    extended_range,
    extract_landmarks,
    load_scale,
    map_mode_to_scale,
    map_to_standard,
    percentile_nearest_rank,
    save_scale,
    standardize_image,
    train_scale,
)


def image_from_counts(pairs, shape, max_gray=255):
    """Image whose histogram is exactly the given (value, count) pairs."""
    values = np.concatenate(
        [np.full(count, value, dtype=np.uint16) for value, count in pairs]
    )
    assert values.size == shape[0] * shape[1]
    return Image(values.reshape(shape), max_gray)


# 16x16 image: background lobe at 0, foreground triangle peaking at 60,
# a bright tail at 100.  Landmarks are fully hand-computable.
TRIANGLE_60 = [(0, 180), (58, 5), (59, 10), (60, 30), (61, 10), (62, 5), (100, 16)]
TRIANGLE_40 = [(0, 180), (38, 5), (39, 10), (40, 30), (41, 10), (42, 5), (100, 16)]


def test_histogram_validation():
    with pytest.raises(ValueError):
        Histogram(np.array([1, 2, 3]), total=7)
    img = Image([[0, 0, 0, 5]], 255)
    hist = Histogram.from_image(img)
    assert hist.total == 4 and hist.counts[0] == 3 and hist.counts[5] == 1


def test_percentile_nearest_rank():
    hist = Histogram.from_image(Image([[0, 0, 0, 5]], 255))
    assert percentile_nearest_rank(hist, 0.0) == 0
    assert percentile_nearest_rank(hist, 50.0) == 0
    assert percentile_nearest_rank(hist, 75.0) == 0
    assert percentile_nearest_rank(hist, 76.0) == 5
    assert percentile_nearest_rank(hist, 100.0) == 5


def test_landmark_and_scale_validation():
    with pytest.raises(ValueError):
        LandmarkSet(p1=100, p2=180, mu=100, m1=0, m2=255)  # p1 not < mu
    with pytest.raises(ValueError):
        ScaleConfig(s1=10, s2=10)
    with pytest.raises(ValueError):
        ScaleConfig(pc1=50.0, pc2=40.0)
    with pytest.raises(ValueError):
        StandardScale(s1=1, s2=4095, mu_s=4095, pc1=0.0, pc2=99.8)


def test_extract_landmarks_two_value_image():
    half = np.zeros((8, 8), dtype=np.uint16)
    half[:4] = 100
    lm = extract_landmarks(Image(half, 255), ScaleConfig())
    assert (lm.m1, lm.m2) == (0, 100)
    assert lm.p1 == 0 and lm.p2 == 100
    # 5-bin smoothing spreads the 100-lobe down to bin 98, the first argmax
    assert lm.mu == 98


def test_extract_landmarks_triangle_peak():
    img = image_from_counts(TRIANGLE_60, (16, 16))
    lm = extract_landmarks(img, ScaleConfig(s1=0, s2=100, pc1=0.0, pc2=100.0))
    assert lm == LandmarkSet(p1=0, p2=100, mu=60, m1=0, m2=100)


def test_extract_landmarks_failures():
    with pytest.raises(DegenerateHistogramError):
        extract_landmarks(Image(np.full((4, 4), 7), 255), ScaleConfig())
    # only two adjacent gray levels: no interior mode can exist
    binary = np.zeros((4, 4), dtype=np.uint16)
    binary[:2] = 1
    with pytest.raises(NotBimodalError):
        extract_landmarks(Image(binary, 255), ScaleConfig())


def test_map_fixed_points_and_half_up_rounding():
    lm = LandmarkSet(p1=0, p2=200, mu=100, m1=0, m2=200)
    scale = StandardScale(s1=0, s2=101, mu_s=50, pc1=0.0, pc2=100.0)
    assert map_to_standard(lm.p1, lm, scale) == scale.s1
    assert map_to_standard(lm.mu, lm, scale) == scale.mu_s
    assert map_to_standard(lm.p2, lm, scale) == scale.s2
    # lower slope is exactly 0.5: x=1 -> 0.5 and x=5 -> 2.5, both half-up
    assert map_to_standard(1, lm, scale) == 1
    assert map_to_standard(5, lm, scale) == 3


def test_map_is_monotone_and_clamps():
    lm = LandmarkSet(p1=20, p2=180, mu=100, m1=10, m2=220)
    scale = StandardScale(s1=1, s2=4095, mu_s=2048, pc1=0.0, pc2=99.8)
    mapped = [map_to_standard(x, lm, scale) for x in range(lm.m1, lm.m2 + 1)]
    assert all(b >= a for a, b in zip(mapped, mapped[1:]))
    assert map_to_standard(0, lm, scale) == mapped[0]
    assert map_to_standard(255, lm, scale) == mapped[-1]


def test_extended_range_hand_values():
    lm = LandmarkSet(p1=20, p2=180, mu=100, m1=10, m2=220)
    scale = StandardScale(s1=1, s2=4095, mu_s=2048, pc1=0.0, pc2=99.8)
    # both slopes are 2047/80 = 25.5875
    # m1: 2048 - 90*25.5875 = -254.875 -> -255 (half-up)
    # m2: 2048 + 120*25.5875 = 5118.5  -> 5119
    assert extended_range(lm, scale) == (-255, 5119)


def test_train_scale_mean_of_mapped_modes():
    cfg = ScaleConfig(s1=0, s2=100, pc1=0.0, pc2=100.0)
    img_a = image_from_counts(TRIANGLE_60, (16, 16))
    img_b = image_from_counts(TRIANGLE_40, (16, 16))
    assert map_mode_to_scale(extract_landmarks(img_a, cfg), cfg) == pytest.approx(60.0)
    assert map_mode_to_scale(extract_landmarks(img_b, cfg), cfg) == pytest.approx(40.0)
    scale = train_scale([img_a, img_b], cfg)
    assert scale == StandardScale(s1=0, s2=100, mu_s=50, pc1=0.0, pc2=100.0)


def test_train_scale_skips_bad_images():
    cfg = ScaleConfig(s1=0, s2=100, pc1=0.0, pc2=100.0)
    img = image_from_counts(TRIANGLE_60, (16, 16))
    flat = Image(np.full((4, 4), 9), 255)
    assert train_scale([img, flat], cfg) == train_scale([img], cfg)
    with pytest.raises(ValueError):
        train_scale([], cfg)
    with pytest.raises(ValueError):
        train_scale([flat], cfg)


def test_standardize_image_hand_oracle():
    # background at 20 (p1), mode 60, tail to 100; pc1=5 puts p1 above m1=0
    pairs = [(0, 3), (20, 160), (58, 5), (59, 10), (60, 30), (61, 10), (62, 5),
             (100, 33)]
    img = image_from_counts(pairs, (16, 16))
    scale = StandardScale(s1=1, s2=4095, mu_s=2048, pc1=5.0, pc2=99.8)
    lm = extract_landmarks(img, scale)
    assert lm == LandmarkSet(p1=20, p2=100, mu=60, m1=0, m2=100)
    assert extended_range(lm, scale) == (-1022, 4095)
    out = standardize_image(img, scale)
    assert out.max_gray == 4095
    lut = {0: 0, 20: 1, 60: 2048, 100: 4095}  # 0 floored from -1022
    for value, expect in lut.items():
        assert out.pixels[img.pixels == value][0] == expect


def test_standardize_image_range_overflow():
    pairs = [(0, 180), (28, 5), (29, 10), (30, 30), (31, 10), (32, 5),
             (40, 15), (255, 1)]
    img = image_from_counts(pairs, (16, 16))
    # p2 lands one bin above the mode, so the upper slope is huge and the
    # extended maximum overflows 16 bits.
    scale = StandardScale(s1=1, s2=65000, mu_s=32000, pc1=0.0, pc2=90.0)
    with pytest.raises(ValueError, match="16-bit"):
        standardize_image(img, scale)


def test_scale_file_round_trip(tmp_path):
    scale = StandardScale(s1=1, s2=4095, mu_s=1234, pc1=0.0, pc2=99.8)
    path = tmp_path / "scale.txt"
    save_scale(path, scale)
    assert load_scale(path) == scale


def test_scale_file_errors(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("something else\n")
    with pytest.raises(ValueError, match="format tag"):
        load_scale(path)
    scale = StandardScale(s1=1, s2=4095, mu_s=1234, pc1=0.0, pc2=99.8)
    save_scale(path, scale)
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("mu_s")]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="missing key"):
        load_scale(path)

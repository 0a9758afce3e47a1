import math

import numpy as np
import pytest

from histostack.brs import (
    BrsReport,
    NoViableReferenceError,
    SubvolumePartition,
    partition_stack,
    pick_best_reference,
    pick_max_entropy,
    score_candidates,
    select_brs,
    write_brs_csv,
)
from histostack.image import Image
from histostack.register import RegistrationConfig


def textured(side=64, seed=0, shift=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    r = np.hypot(xs - side / 2 - shift, ys - side / 2)
    window = np.clip(1.3 - 1.6 * r / (side / 2), 0.0, 1.0)
    vals = 116 + 60 * np.sin(2 * np.pi * xs / 23) * np.cos(2 * np.pi * ys / 17)
    vals += rng.uniform(-20, 20, size=(side, side))
    vals = 4 + window * np.clip(vals - 4, 0, None)
    return Image(np.clip(np.rint(vals), 0, 255).astype(np.uint16), 255)


def test_partition_examples():
    assert partition_stack(11, 5).boundaries == ((1, 5), (6, 11))
    assert partition_stack(14, 25).boundaries == ((1, 14),)
    assert partition_stack(50, 25).boundaries == ((1, 25), (26, 50))
    # trailing remainder of 13 >= 25/2 keeps its own subvolume...
    assert partition_stack(63, 25).boundaries == ((1, 25), (26, 50), (51, 63))
    # ...but 12 < 25/2 is absorbed into the previous one
    assert partition_stack(62, 25).boundaries == ((1, 25), (26, 62))


def test_partition_validation():
    with pytest.raises(ValueError):
        partition_stack(0, 5)
    with pytest.raises(ValueError):
        partition_stack(10, 1)
    with pytest.raises(ValueError):
        SubvolumePartition(((1, 5), (7, 9)))
    part = partition_stack(11, 5)
    assert part.slice_count == 11
    assert part.sizes == (5, 6)
    assert part.subvolume_of(6) == 1
    with pytest.raises(ValueError):
        part.subvolume_of(12)


def test_pick_max_entropy_center_tiebreak():
    assert pick_max_entropy([1.0, 3.0, 2.0]) == 2
    # ties at 1 and 4 in a 4-slice subvolume: center is 2.5, both are 1.5
    # away, lower index wins
    assert pick_max_entropy([5.0, 1.0, 1.0, 5.0]) == 1
    # ties at 2 and 4 in 5 slices: center 3, equidistant, lower index wins
    assert pick_max_entropy([0.0, 7.0, 1.0, 7.0, 0.0]) == 2
    assert pick_max_entropy([1.0, 7.0, 7.0, 0.0, 0.0]) == 3  # 3 is nearer 3.0


def test_score_candidates_oracle():
    scores = score_candidates(5.0, {1: 100.0, 3: 25.0})
    assert scores[1] == pytest.approx(math.log(0.05))
    assert scores[3] == pytest.approx(math.log(0.2))
    assert pick_best_reference(scores, 3) == 3
    # zero MSE stays finite thanks to the tiny guard
    guarded = score_candidates(5.0, {2: 0.0})
    assert math.isfinite(guarded[2])


def test_select_brs_prefers_low_mse_neighbor():
    base = textured(seed=1)
    # slice 2 has deliberately richer texture -> max entropy target
    rng = np.random.default_rng(2)
    rich = np.clip(
        base.as_float() + rng.integers(0, 40, size=base.pixels.shape), 0, 255
    )
    slices = [
        textured(seed=1, shift=1),
        Image(np.rint(rich).astype(np.uint16), 255),
        textured(seed=1, shift=30),  # heavily displaced -> worse candidate
    ]
    cfg = RegistrationConfig(pyramid_levels=2, r_f=2, max_iterations=10)
    report = select_brs(slices, cfg)
    assert report.j_star == 2
    assert set(report.mse) == {1, 3}
    assert report.chosen == 1  # closer slice registers better
    assert report.mode == "scored"
    # scores derive from the target entropy, identically for all candidates
    e_j = report.entropies[report.j_star - 1]
    for i, mse in report.mse.items():
        assert report.scores[i] == pytest.approx(math.log(e_j / mse))

    by_entropy = select_brs(slices, cfg, mode="max_entropy")
    assert by_entropy.chosen == by_entropy.j_star == 2


def test_select_brs_validation_and_exclusion():
    cfg = RegistrationConfig(pyramid_levels=1, max_iterations=5)
    with pytest.raises(ValueError):
        select_brs([textured()], cfg)
    with pytest.raises(ValueError):
        select_brs([textured(), textured()], cfg, mode="nope")
    # flat candidates all fail registration -> no viable reference
    flat = Image(np.full((64, 64), 7), 255)
    with pytest.raises(NoViableReferenceError):
        select_brs([flat, textured(), flat], cfg)


def test_write_brs_csv(tmp_path):
    part = partition_stack(5, 3)
    reports = [
        BrsReport(2, (1.0, 3.0, 2.0), {1: 10.0, 3: 5.0},
                  score_candidates(3.0, {1: 10.0, 3: 5.0}), 3),
        BrsReport(1, (4.0, 2.0), {2: 8.0}, score_candidates(4.0, {2: 8.0}), 2),
    ]
    path = tmp_path / "brs.csv"
    write_brs_csv(path, reports, part)
    lines = path.read_text().splitlines()
    assert lines[0] == "subvolume,slice,entropy,mse,score,chosen"
    assert len(lines) == 6
    # global slice numbering continues across subvolumes
    assert lines[4].startswith("2,4,")
    # the target row has empty mse/score fields
    row2 = lines[2].split(",")
    assert row2[3] == "" and row2[4] == ""
    chosen_flags = [ln.split(",")[5] for ln in lines[1:]]
    assert chosen_flags == ["0", "0", "1", "0", "1"]
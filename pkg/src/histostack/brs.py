"""Subvolume partitioning and best-reference-slice (BRS) selection.

A stack is cut into contiguous subvolumes; inside each, the slice with the
highest intensity entropy is located, every other slice is affinely
registered to it, and the reference is chosen by maximizing
log(entropy / feature-space MSE).  Because the entropy factor is fixed the
argmax coincides with the minimum-MSE slice; badly distorted slices produce
large MSE and are never picked.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from histostack.features import entropy
from histostack.image import Image
from histostack.register import (
    DegenerateTextureError,
    InsufficientOverlapError,
    RegistrationConfig,
    register_affine,
)

logger = logging.getLogger(__name__)

BRS_MODES = ("scored", "max_entropy")


class NoViableReferenceError(Exception):
    pass


@dataclass(frozen=True)
class SubvolumePartition:
    """Contiguous, ordered, disjoint (start, end) ranges covering 1..M.

    Indices are 1-based and inclusive on both ends.
    """

    boundaries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        prev_end = 0
        for start, end in self.boundaries:
            if start != prev_end + 1 or end < start:
                raise ValueError("subvolumes must be contiguous and ordered")
            prev_end = end

    @property
    def slice_count(self) -> int:
        return self.boundaries[-1][1]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(end - start + 1 for start, end in self.boundaries)

    def subvolume_of(self, index: int) -> int:
        """0-based subvolume position holding 1-based slice ``index``."""
        for k, (start, end) in enumerate(self.boundaries):
            if start <= index <= end:
                return k
        raise ValueError(f"slice index {index} outside partition")


@dataclass(frozen=True)
class BrsReport:
    """Selection evidence for one subvolume.

    All slice indices are 1-based positions *within* the subvolume.
    ``mse`` and ``scores`` have one entry per candidate i != j_star that
    registered successfully.
    """

    j_star: int
    entropies: tuple[float, ...]
    mse: dict[int, float]
    scores: dict[int, float]
    chosen: int
    mode: str = "scored"


def partition_stack(m: int, target_size: int) -> SubvolumePartition:
    """Split 1..m into chunks of target_size; a trailing remainder smaller
    than half a chunk is absorbed into the final chunk."""
    if m < 1:
        raise ValueError("slice count must be >= 1")
    if target_size < 2:
        raise ValueError("target_size must be >= 2")
    bounds = []
    start = 1
    while start <= m:
        bounds.append((start, min(start + target_size - 1, m)))
        start += target_size
    if len(bounds) >= 2:
        last_size = bounds[-1][1] - bounds[-1][0] + 1
        if last_size < target_size / 2:
            merged = (bounds[-2][0], bounds[-1][1])
            bounds = bounds[:-2] + [merged]
    return SubvolumePartition(tuple(bounds))


def _centered_tiebreak(candidates: list[int], n: int) -> int:
    """Pick the candidate nearest the subvolume center, then the lowest."""
    center = (n + 1) / 2.0
    return min(candidates, key=lambda i: (abs(i - center), i))


def pick_max_entropy(entropies) -> int:
    """1-based index of the entropy argmax, center-most on ties."""
    values = list(entropies)
    best = max(values)
    ties = [i + 1 for i, e in enumerate(values) if e == best]
    return _centered_tiebreak(ties, len(values))


def score_candidates(e_j: float, mse: dict[int, float]) -> dict[int, float]:
    """log(E_j / MSE_i) per candidate, computed as a difference of logs so a
    zero MSE or zero entropy stays finite instead of overflowing the ratio."""
    tiny = np.finfo(float).tiny
    return {
        i: math.log(max(e_j, tiny)) - math.log(max(v, tiny)) for i, v in mse.items()
    }


def pick_best_reference(scores: dict[int, float], n: int) -> int:
    best = max(scores.values())
    ties = [i for i, s in scores.items() if s == best]
    return _centered_tiebreak(ties, n)


def select_brs(
    slices: list[Image],
    cfg: RegistrationConfig,
    mode: str = "scored",
    registration_map=map,
) -> BrsReport:
    """Choose the best reference slice of one subvolume.

    ``registration_map`` may be an executor's map to run the candidate
    registrations concurrently; results are consumed in order so the report
    is identical either way.
    """
    if len(slices) < 2:
        raise ValueError("subvolume needs at least 2 slices")
    if mode not in BRS_MODES:
        raise ValueError(f"unknown brs mode {mode!r}")

    entropies = tuple(entropy(img) for img in slices)
    j_star = pick_max_entropy(entropies)
    target = slices[j_star - 1]
    candidates = [i for i in range(1, len(slices) + 1) if i != j_star]

    def _register(i: int):
        try:
            return i, register_affine(slices[i - 1], target, cfg).final_mse
        except (DegenerateTextureError, InsufficientOverlapError) as exc:
            logger.warning("excluding slice %d from BRS candidates: %s", i, exc)
            return i, None

    mse: dict[int, float] = {}
    for i, value in registration_map(_register, candidates):
        if value is not None:
            mse[i] = value
    if not mse:
        raise NoViableReferenceError("no viable reference")

    scores = score_candidates(entropies[j_star - 1], mse)
    if mode == "max_entropy":
        chosen = j_star
    else:
        chosen = pick_best_reference(scores, len(slices))
    return BrsReport(j_star, entropies, mse, scores, chosen, mode)


def write_brs_csv(path, reports: list[BrsReport], partition: SubvolumePartition) -> None:
    """One row per (subvolume, slice) with the selection evidence."""
    lines = ["subvolume,slice,entropy,mse,score,chosen\n"]
    for k, report in enumerate(reports):
        start = partition.boundaries[k][0]
        for local in range(1, len(report.entropies) + 1):
            g = start + local - 1
            mse = report.mse.get(local)
            score = report.scores.get(local)
            lines.append(
                "%d,%d,%s,%s,%s,%d\n"
                % (
                    k + 1,
                    g,
                    repr(report.entropies[local - 1]),
                    "" if mse is None else repr(mse),
                    "" if score is None else repr(score),
                    1 if local == report.chosen else 0,
                )
            )
    with open(path, "w") as fh:
        fh.writelines(lines)

"""Segment-level decisions: voting vectors, negative flags, majority and punishment voting.

Each patch of a segment casts one vote for its argmax class, giving a voting
vector that sums to the patch count PN. Each super classifier additionally
raises a per-patch negative flag when its negative node wins. Punishment voting
scales down the tallies of every super category whose flag count exceeds a
supermajority threshold (strictly greater than PN * 5/8 by default) by a factor
gamma, then takes the argmax. Ties always go to the lowest class index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .classifier import PredictionMatrix
from .dataset import SuperCategoryPartition
from .validation import as_float_array, check_probability_rows


@dataclass(frozen=True)
class PunishmentConfig:
    """Punishment factor and the rational supermajority threshold."""

    gamma: float = 0.25
    threshold_num: int = 5
    threshold_den: int = 8

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.threshold_den < 1 or self.threshold_num < 1:
            raise ValueError("threshold must be a positive fraction")
        if self.threshold_num > self.threshold_den:
            raise ValueError("threshold must not exceed 1")

    @property
    def threshold(self) -> float:
        return self.threshold_num / self.threshold_den

    def triggers(self, flag_count: int, pn: int) -> bool:
        # exact integer comparison for count > PN * num / den
        return flag_count * self.threshold_den > pn * self.threshold_num

    @classmethod
    def parse_threshold(cls, text: str, gamma: float = 0.25) -> "PunishmentConfig":
        """Build a config from a 'num/den' threshold string."""
        parts = text.split("/")
        if len(parts) != 2:
            raise ValueError(f"threshold must look like '5/8', got {text!r}")
        try:
            num, den = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValueError(f"threshold must be an integer fraction, got {text!r}") from None
        return cls(gamma=gamma, threshold_num=num, threshold_den=den)


@dataclass(frozen=True)
class VotingVector:
    """Per-segment vote tallies over the CN classes.

    Entries are non-negative; straight out of ``build_voting_vector`` they are
    integers summing to PN, and only punishment produces fractional values.
    """

    segment_id: str
    votes: np.ndarray
    pn: int

    def __post_init__(self):
        votes = as_float_array(self.votes, "votes", ndim=1)
        if votes.size == 0:
            raise ValueError("votes must be non-empty")
        if votes.min() < 0:
            raise ValueError("votes must be non-negative")
        if self.pn < 1:
            raise ValueError("pn must be at least 1")


@dataclass(frozen=True)
class NegativeFlagVector:
    """Per-patch binary flags of one super classifier for one segment."""

    segment_id: str
    super_id: int
    flags: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags)
        if flags.ndim != 1 or flags.size == 0:
            raise ValueError("flags must be a non-empty 1-d array")
        if not np.all((flags == 0) | (flags == 1)):
            raise ValueError("flags must be 0 or 1")
        if self.super_id < 0:
            raise ValueError("super_id must be non-negative")

    @property
    def pn(self) -> int:
        return self.flags.size

    @property
    def count(self) -> int:
        return int(np.sum(self.flags))


def build_voting_vector(probs, segment_id: str = "") -> VotingVector:
    """Tally one vote per patch for its argmax class (lowest index on ties)."""
    p = check_probability_rows(probs, "probs", tol=1e-6)
    winners = p.argmax(axis=1)
    votes = np.bincount(winners, minlength=p.shape[1]).astype(np.float64)
    return VotingVector(segment_id=segment_id, votes=votes, pn=p.shape[0])


def build_negative_flags(probs, super_id: int, segment_id: str = "") -> NegativeFlagVector:
    """Flag each patch whose argmax lands on the final (negative) node.

    A tie between a member node and the negative node resolves to the member,
    so the flag stays 0.
    """
    p = check_probability_rows(probs, "probs", tol=1e-6)
    if p.shape[1] < 2:
        raise ValueError("a super task needs at least 2 output nodes")
    flags = (p.argmax(axis=1) == p.shape[1] - 1).astype(np.int8)
    return NegativeFlagVector(segment_id=segment_id, super_id=super_id, flags=flags)


def majority_vote(vv: VotingVector) -> int:
    """Argmax of the tallies; the lowest index wins ties."""
    return int(np.argmax(vv.votes))


def _punished_votes(
    vv: VotingVector,
    flags: Sequence[NegativeFlagVector],
    partition: SuperCategoryPartition,
    cfg: PunishmentConfig,
) -> tuple[np.ndarray, tuple[int, ...]]:
    if partition.n_classes != vv.votes.size:
        raise ValueError(
            f"partition covers {partition.n_classes} classes, voting vector has {vv.votes.size}"
        )
    got = sorted(f.super_id for f in flags)
    if got != list(range(partition.n_categories)):
        raise ValueError(
            f"need exactly one flag vector per super id 0..{partition.n_categories - 1}, got {got}"
        )
    for f in flags:
        if f.pn != vv.pn:
            raise ValueError(
                f"flag vector of super {f.super_id} has PN={f.pn}, voting vector has PN={vv.pn}"
            )
    punished = vv.votes.copy()
    punished_ids = []
    by_id = {f.super_id: f for f in flags}
    for j in range(partition.n_categories):
        if cfg.triggers(by_id[j].count, vv.pn):
            members = partition.categories[j].sorted_members
            punished[list(members)] *= cfg.gamma
            punished_ids.append(j)
    return punished, tuple(punished_ids)


def punishment_vote(
    vv: VotingVector,
    flags: Sequence[NegativeFlagVector],
    partition: SuperCategoryPartition,
    cfg: PunishmentConfig | None = None,
) -> int:
    """Punish the categories rejected by a supermajority of flags, then argmax.

    For each super classifier, taken in ascending id order, every tally of its
    member classes is multiplied by gamma when the flag count strictly exceeds
    PN * threshold. The caller's voting vector is never mutated; the scaled
    copy only lives inside the call. Pre-punishment vectors must be integral
    and sum to PN.
    """
    cfg = cfg if cfg is not None else PunishmentConfig()
    votes = vv.votes
    if not np.array_equal(votes, np.rint(votes)):
        raise ValueError("punishment_vote expects integer pre-punishment tallies")
    if int(round(float(votes.sum()))) != vv.pn:
        raise ValueError(f"votes sum to {votes.sum():g}, expected PN={vv.pn}")
    punished, _ = _punished_votes(vv, flags, partition, cfg)
    return int(np.argmax(punished))


@dataclass(frozen=True)
class SegmentDecision:
    segment_id: str
    majority: int
    punishment: int
    punished_supers: tuple[int, ...]


def vote_dataset(
    base: PredictionMatrix,
    supers: Sequence[PredictionMatrix],
    partition: SuperCategoryPartition,
    cfg: PunishmentConfig | None = None,
) -> list[SegmentDecision]:
    """Both voting decisions for every segment of a prediction set.

    ``supers[j]`` must hold the predictions of super classifier ``j`` for the
    same patches as the base matrix; a segment missing from any classifier, or
    covered with a different patch set, is an error.
    """
    cfg = cfg if cfg is not None else PunishmentConfig()
    if len(supers) != partition.n_categories:
        raise ValueError(
            f"got {len(supers)} super prediction sets for {partition.n_categories} categories"
        )
    if base.n_classes != partition.n_classes:
        raise ValueError("base predictions and partition disagree on the class count")
    for j, sp in enumerate(supers):
        expected = partition.categories[j].task_classes
        if sp.n_classes != expected:
            raise ValueError(f"super {j} must have {expected} output nodes, got {sp.n_classes}")

    base_rows = base.segment_rows()
    super_rows = [sp.segment_rows() for sp in supers]
    decisions = []
    for segment in base.segment_order():
        rows = base_rows[segment]
        patch_keys = [base.keys[i][1:] for i in rows]
        vv = build_voting_vector(base.probs[rows], segment_id=segment)
        flags = []
        for j, sp in enumerate(supers):
            if segment not in super_rows[j]:
                raise ValueError(f"super {j} has no predictions for segment {segment!r}")
            srows = super_rows[j][segment]
            if [sp.keys[i][1:] for i in srows] != patch_keys:
                raise ValueError(f"super {j} covers different patches than the base for {segment!r}")
            flags.append(build_negative_flags(sp.probs[srows], super_id=j, segment_id=segment))
        punished, punished_ids = _punished_votes(vv, flags, partition, cfg)
        decisions.append(
            SegmentDecision(
                segment_id=segment,
                majority=majority_vote(vv),
                punishment=int(np.argmax(punished)),
                punished_supers=punished_ids,
            )
        )
    return decisions


def write_decisions(decisions: Sequence[SegmentDecision], path, truths: Mapping[str, int] | None = None) -> None:
    """Decisions file: segment, truth (blank when unknown), both votes, punished ids."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["segment_id", "truth", "majority_decision", "punishment_decision", "punished_flags"]
        )
        for d in decisions:
            truth = "" if truths is None or d.segment_id not in truths else truths[d.segment_id]
            writer.writerow(
                [
                    d.segment_id,
                    truth,
                    d.majority,
                    d.punishment,
                    ";".join(str(j) for j in d.punished_supers),
                ]
            )


def read_decisions(path) -> tuple[list[SegmentDecision], dict[str, int]]:
    """Parse a decisions file; returns the decisions and whatever truths it records."""
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["segment_id", "truth", "majority_decision", "punishment_decision", "punished_flags"]:
        raise ValueError(f"{path}: not a decisions file")
    decisions = []
    truths: dict[str, int] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 columns")
        seg = row[0]
        if row[1].strip():
            truths[seg] = int(row[1])
        punished = tuple(int(p) for p in row[4].split(";") if p.strip())
        decisions.append(
            SegmentDecision(
                segment_id=seg,
                majority=int(row[2]),
                punishment=int(row[3]),
                punished_supers=punished,
            )
        )
    return decisions, truths

"""Synthetic base and super classifiers for desk-scale experiments.

Real segments do not fail independently patch by patch: a hard segment tends to
be consistently mistaken for one specific similar scene. The simulator models
that with two per-segment draws: an accuracy rate from a Beta distribution
whose mean is ``p_base`` (``dispersion`` sets how strongly patches within a
segment correlate), and a single confusion target which is a same-category
sibling with probability ``q`` and an outside class otherwise. Wrong patches
all vote for that target. The marginal per-patch accuracy stays exactly
``p_base``. Super classifiers fire per patch: when the truth lies outside
category j, classifier j's negative node wins with probability ``p_super[j]``;
when the truth is a member, the member node wins with the same probability.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .classifier import PredictionMatrix
from .dataset import SuperCategoryPartition
from .validation import check_seed

PEAK_PROBABILITY = 0.85


@dataclass(frozen=True)
class SimSpec:
    """Parameters of one synthetic experiment."""

    n_classes: int
    partition: SuperCategoryPartition
    n_segments: int
    patches_per_segment: int
    p_base: float
    q: float
    p_super: tuple[float, ...]
    dispersion: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.partition.n_classes != self.n_classes:
            raise ValueError("partition does not cover n_classes classes")
        if self.n_segments < 1 or self.patches_per_segment < 1:
            raise ValueError("n_segments and patches_per_segment must be positive")
        for name, value in (("p_base", self.p_base), ("q", self.q)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if len(self.p_super) != self.partition.n_categories:
            raise ValueError("p_super needs one entry per super category")
        if any(not 0.0 <= p <= 1.0 for p in self.p_super):
            raise ValueError("p_super entries must lie in [0, 1]")
        if self.dispersion <= 0.0:
            raise ValueError("dispersion must be positive")
        check_seed(self.seed)
        if any(p < self.p_base for p in self.p_super):
            warnings.warn(
                "p_super below p_base: super classifiers are meant to beat the base",
                stacklevel=2,
            )


def _peaked_rows(winners: np.ndarray, n_classes: int) -> np.ndarray:
    """Probability rows with the winning class at a fixed peak, rest uniform."""
    n = winners.size
    if n_classes == 1:
        return np.ones((n, 1))
    off = (1.0 - PEAK_PROBABILITY) / (n_classes - 1)
    rows = np.full((n, n_classes), off)
    rows[np.arange(n), winners] = PEAK_PROBABILITY
    return rows


def segment_ids(n_segments: int) -> list[str]:
    return [f"seg_{i:05d}" for i in range(n_segments)]


def simulate_classifiers(spec: SimSpec):
    """Draw one synthetic testing run.

    Returns ``(truths, base, supers)``: the per-segment truth mapping, the base
    classifier's PredictionMatrix over all patches, and one PredictionMatrix
    per super classifier. Deterministic for a given spec.
    """
    rng = np.random.default_rng(spec.seed)
    cn = spec.n_classes
    an = spec.n_segments
    pn = spec.patches_per_segment
    partition = spec.partition

    category_of = np.empty(cn, dtype=np.int64)
    for cat in partition.categories:
        for m in cat.members:
            category_of[m] = cat.id

    truths = np.arange(an) % cn
    ids = segment_ids(an)

    # per-segment accuracy rates with mean p_base
    if spec.p_base >= 1.0:
        rates = np.ones(an)
    elif spec.p_base <= 0.0:
        rates = np.zeros(an)
    else:
        a = spec.p_base * spec.dispersion
        b = (1.0 - spec.p_base) * spec.dispersion
        rates = rng.beta(a, b, size=an)

    # per-segment confusion target: sibling w.p. q, otherwise an outside class
    targets = np.empty(an, dtype=np.int64)
    sibling_pool = [sorted(partition.categories[category_of[t]].members - {t}) for t in range(cn)]
    outside_pool = [
        [c for c in range(cn) if category_of[c] != category_of[t]] for t in range(cn)
    ]
    for i in range(an):
        t = int(truths[i])
        siblings = sibling_pool[t]
        outside = outside_pool[t]
        pick_sibling = bool(siblings) and (rng.random() < spec.q or not outside)
        pool = siblings if pick_sibling else outside
        targets[i] = pool[rng.integers(len(pool))] if pool else t

    correct = rng.random((an, pn)) < rates[:, None]
    predicted = np.where(correct, truths[:, None], targets[:, None])

    keys = tuple((ids[i], 0, p) for i in range(an) for p in range(pn))
    base = PredictionMatrix(keys=keys, probs=_peaked_rows(predicted.ravel(), cn))

    supers = []
    for cat in partition.categories:
        members = cat.sorted_members
        dense = {m: d for d, m in enumerate(members)}
        m_task = cat.task_classes
        negative = m_task - 1
        is_member = category_of[truths] == cat.id
        target_node = np.where(
            is_member, np.array([dense.get(int(t), 0) for t in truths]), negative
        )
        hit = rng.random((an, pn)) < spec.p_super[cat.id]
        # a miss lands uniformly on the other nodes: any other node for member
        # truths, a member node (never the negative) for outside truths
        miss_shift = rng.integers(1, m_task, size=(an, pn))
        miss_member = (target_node[:, None] + miss_shift) % m_task
        miss_outside = rng.integers(0, negative, size=(an, pn)) if negative > 0 else np.zeros((an, pn), dtype=np.int64)
        miss = np.where(is_member[:, None], miss_member, miss_outside)
        winners = np.where(hit, target_node[:, None], miss)
        supers.append(PredictionMatrix(keys=keys, probs=_peaked_rows(winners.ravel(), m_task)))

    truth_map = {ids[i]: int(truths[i]) for i in range(an)}
    return truth_map, base, tuple(supers)

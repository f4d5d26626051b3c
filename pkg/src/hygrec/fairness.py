"""Exposure-based fairness metrics over sets of recommendation lists.

All four metrics are item-side and need no sensitive attributes:
average recommended popularity, Gini coefficient of exposure, KL
divergence of exposure from uniform, and aggregate catalog coverage.
Lower is fairer for the first three; higher coverage is fairer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyLists, EmptyProfile, InvariantViolation, UnknownItem


@dataclass(frozen=True)
class PopularityTable:
    """Item popularity normalized over the catalog (training split only)."""

    popularity: dict  # item id -> share of interactions

    def __post_init__(self):
        total = sum(self.popularity.values())
        if self.popularity and not math.isclose(total, 1.0, abs_tol=1e-9):
            raise InvariantViolation(f"popularity sums to {total}, expected 1")

    def of(self, item) -> float:
        try:
            return self.popularity[item]
        except KeyError:
            raise UnknownItem(f"item {item} not in popularity table") from None

    @staticmethod
    def from_counts(counts: dict, catalog) -> "PopularityTable":
        total = sum(counts.get(i, 0) for i in catalog)
        if total == 0:
            return PopularityTable({i: 0.0 for i in catalog})
        return PopularityTable({i: counts.get(i, 0) / total for i in catalog})


@dataclass(frozen=True)
class ExposureProfile:
    """Item -> appearance count across all top-k lists."""

    counts: dict
    total_slots: int

    def __post_init__(self):
        if sum(self.counts.values()) != self.total_slots:
            raise InvariantViolation("exposure counts do not sum to total slots")

    @staticmethod
    def from_lists(lists, k: int) -> "ExposureProfile":
        counts: dict = {}
        slots = 0
        for rl in lists:
            for item in rl.item_ids[:k]:
                counts[item] = counts.get(item, 0) + 1
                slots += 1
        return ExposureProfile(counts=counts, total_slots=slots)


def avg_popularity_at_k(lists, pop: PopularityTable, k: int) -> float:
    """Mean popularity of every recommended slot up to rank k."""
    values = [pop.of(item) for rl in lists for item in rl.item_ids[:k]]
    if not values:
        raise EmptyLists("no recommendation slots to average")
    return float(np.mean(values))


def gini_at_k(profile: ExposureProfile, catalog_size: int) -> float:
    """Gini coefficient of exposure counts, zeros included for the
    unexposed part of the catalog."""
    if profile.total_slots == 0:
        raise EmptyProfile("exposure profile is empty")
    if len(profile.counts) > catalog_size:
        raise UnknownItem("more exposed items than catalog size")
    x = np.zeros(catalog_size)
    x[: len(profile.counts)] = sorted(profile.counts.values())
    x.sort()
    m = catalog_size
    ranks = np.arange(1, m + 1)
    return float(((2.0 * ranks - m - 1.0) * x).sum() / (m * x.sum()))


def kl_at_k(profile: ExposureProfile, catalog_size: int) -> float:
    """KL divergence (nats) of normalized exposure from uniform."""
    if profile.total_slots == 0:
        raise EmptyProfile("exposure profile is empty")
    u = 1.0 / catalog_size
    kl = 0.0
    for count in profile.counts.values():
        if count:
            p = count / profile.total_slots
            kl += p * math.log(p / u)
    return kl


def difference_at_k(lists, catalog_size: int, k: int) -> float:
    """Aggregate diversity: share of the catalog reached by any list."""
    if not lists:
        raise EmptyLists("no recommendation lists")
    distinct = {item for rl in lists for item in rl.item_ids[:k]}
    if len(distinct) > catalog_size:
        raise UnknownItem("lists reference more items than the catalog holds")
    return len(distinct) / catalog_size


def fairness_report(lists, pop: PopularityTable, catalog_size: int, k_list) -> dict:
    """Flat metric map keyed like ``A@5``; key order follows k_list."""
    report = {}
    for k in k_list:
        profile = ExposureProfile.from_lists(lists, k)
        report[f"A@{k}"] = avg_popularity_at_k(lists, pop, k)
        report[f"G@{k}"] = gini_at_k(profile, catalog_size)
        report[f"L@{k}"] = kl_at_k(profile, catalog_size)
        report[f"D@{k}"] = difference_at_k(lists, catalog_size, k)
    return report

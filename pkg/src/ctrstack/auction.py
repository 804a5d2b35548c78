"""Simplified sponsored-search ad selection: keep the top-k candidates by
expected revenue (bid x CTR), then order them for display by bid."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class AdCandidate:
    ad_id: str
    bid: float
    ctr: float

    def __post_init__(self):
        if self.bid < 0:
            raise ConfigError(f"bid of {self.ad_id!r} must be >= 0")
        if not 0 <= self.ctr <= 1:
            raise ConfigError(f"ctr of {self.ad_id!r} must lie in [0, 1]")

    @property
    def revenue(self) -> float:
        return self.bid * self.ctr


def select_ads(candidates, k: int = 3) -> list[AdCandidate]:
    if k < 1:
        raise ConfigError("k must be >= 1")
    by_revenue = sorted(candidates, key=lambda c: (-c.revenue, -c.bid, c.ad_id))
    survivors = by_revenue[:k]
    return sorted(survivors, key=lambda c: (-c.bid, c.ad_id))


def read_candidates(path: str | Path) -> list[AdCandidate]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            AdCandidate(row["ad_id"], float(row["bid"]), float(row["ctr"]))
            for row in csv.DictReader(fh)
        ]


def write_display(path: str | Path, ads: list[AdCandidate]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "ad_id", "bid", "ctr", "expected_revenue"])
        for rank, ad in enumerate(ads, start=1):
            w.writerow([rank, ad.ad_id, repr(ad.bid), repr(ad.ctr), repr(ad.revenue)])

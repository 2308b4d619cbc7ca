"""Attribute-specific training subsets: keep the top fraction of pairs by score."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .scoring import AttributeScores


@dataclass(frozen=True)
class SubsetIndex:
    attribute: str
    ids: tuple[int, ...]
    ratio: float

    def __contains__(self, pair_id: int) -> bool:
        return pair_id in self.id_set

    @property
    def id_set(self) -> frozenset[int]:
        return frozenset(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


def subset_size(n: int, ratio: float) -> int:
    # guard against 0.7 * 10 == 7.000000000000001
    return min(n, math.ceil(round(ratio * n, 9)))


def build_subset(scores: AttributeScores, ratio: float) -> SubsetIndex:
    """Top ``ceil(ratio * n)`` ids by score; ties go to the smaller id."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    ranked = sorted(scores.scores.items(), key=lambda kv: (-kv[1], kv[0]))
    k = subset_size(len(ranked), ratio)
    return SubsetIndex(scores.attribute, tuple(sorted(pid for pid, _ in ranked[:k])), ratio)


def write_subset(subset: SubsetIndex, path: str | Path, scores_checksum: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# attribute: {subset.attribute}\n")
        fh.write(f"# ratio: {subset.ratio!r}\n")
        fh.write(f"# scores_sha256: {scores_checksum}\n")
        for pid in subset.ids:
            fh.write(f"{pid}\n")


def read_subset(path: str | Path) -> SubsetIndex:
    attribute, ratio, ids = "", 1.0, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                key, value = key.strip(), value.strip()
                if key == "attribute":
                    attribute = value
                elif key == "ratio":
                    ratio = float(value)
                continue
            ids.append(int(line))
    return SubsetIndex(attribute, tuple(sorted(ids)), ratio)

"""Top-k Matcher Module for the Retrosynthesis Engine."""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

DEFAULT_KS = (1, 3, 5, 10)
CENTER_KS = (1, 2, 3, 5)
OVERALL = 'overall'

ReactantSet = Tuple[str, ...]


def class_group(class_id: Optional[int]) -> str:
    """Row label for a reaction class (None means the class is unknown)."""
    return 'unknown' if class_id is None else f'class {class_id}'


def first_hit_rank(predicted: Sequence[ReactantSet], truth: ReactantSet) -> Optional[int]:
    """
    1-based rank of the first prediction equal to the ground truth.

    Args:
        predicted: Ranked reactant sets, best first
        truth: Ground-truth reactant set (sorted canonical strings)

    Returns:
        The rank, or None when the truth is not predicted
    """
    for rank, candidate in enumerate(predicted, start=1):
        if tuple(candidate) == tuple(truth):
            return rank
    return None


@dataclass
class AccuracyTable:
    """Hit counts per k, overall and per reaction class."""
    ks: Tuple[int, ...] = DEFAULT_KS
    hits: Dict[str, Dict[int, int]] = field(default_factory=dict)
    totals: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.ks = tuple(sorted(set(self.ks)))
        if not self.ks or self.ks[0] < 1:
            raise ValueError(f"ks must be positive, got {self.ks}")

    def _ensure(self, group: str) -> None:
        if group not in self.totals:
            self.totals[group] = 0
            self.hits[group] = {k: 0 for k in self.ks}

    def add_hits(self, hits: Mapping[int, bool], class_id: Optional[int] = None) -> None:
        """Record one example given its hit flag at every k."""
        for group in (OVERALL, class_group(class_id)):
            self._ensure(group)
            self.totals[group] += 1
            for k in self.ks:
                self.hits[group][k] += bool(hits[k])

    def add_rank(self, rank: Optional[int], class_id: Optional[int] = None) -> None:
        """Record one example by the rank of its first correct prediction."""
        self.add_hits({k: rank is not None and rank <= k for k in self.ks}, class_id)

    def count(self, group: str = OVERALL) -> int:
        return self.totals.get(group, 0)

    def accuracy(self, k: int, group: str = OVERALL) -> float:
        """Fraction of hits at k; 0.0 for an empty group."""
        total = self.totals.get(group, 0)
        return self.hits[group][k] / total if total else 0.0

    def groups(self) -> List[str]:
        """'overall' first, then classes in numeric order, 'unknown' last."""
        def order(group: str):
            if group == OVERALL:
                return (0, 0)
            if group == 'unknown':
                return (2, 0)
            return (1, int(group.split()[1]))
        return sorted(self.totals, key=order) or [OVERALL]

    def rows(self) -> List[dict]:
        rows = []
        for group in self.groups():
            row = {'group': group, 'count': self.count(group)}
            for k in self.ks:
                row[f'top{k}'] = round(100.0 * self.accuracy(k, group), 4) if self.count(group) else 0.0
                row[f'hits{k}'] = self.hits.get(group, {}).get(k, 0)
            rows.append(row)
        return rows

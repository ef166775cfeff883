"""Ranking metrics: gold rank under a tie rule, Hits@k and MRR."""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

HITS_KS = (1, 3, 5, 10)


class TieRule(str, enum.Enum):
    OPTIMISTIC = "optimistic"
    PESSIMISTIC = "pessimistic"
    EXPECTED_RANDOM = "expected_random"


def rank_of(scores: Mapping[int, float], gold_id: int, tie_rule: TieRule | str = TieRule.EXPECTED_RANDOM) -> float:
    if gold_id not in scores:
        raise KeyError(f"gold entity {gold_id} is not among the scored candidates")
    gold = scores[gold_id]
    vals = np.fromiter((v for k, v in scores.items() if k != gold_id), dtype=np.float64, count=len(scores) - 1)
    return _rank(vals, float(gold), TieRule(tie_rule))


def _rank(others: np.ndarray, gold: float, rule: TieRule) -> float:
    greater = int(np.count_nonzero(others > gold))
    ties = int(np.count_nonzero(others == gold))
    if rule is TieRule.OPTIMISTIC:
        return 1 + greater
    if rule is TieRule.PESSIMISTIC:
        return 1 + greater + ties
    return 1 + greater + ties / 2


def hits_at_k(ranks: Iterable[float], k: int) -> float:
    r = np.asarray(list(ranks), dtype=np.float64)
    if r.size == 0:
        raise ValueError("hits_at_k of an empty rank list")
    if np.any(r < 1):
        raise ValueError("ranks must be >= 1")
    return float(np.count_nonzero(r <= k)) / r.size


def mrr(ranks: Iterable[float]) -> float:
    r = np.asarray(list(ranks), dtype=np.float64)
    if r.size == 0:
        raise ValueError("mrr of an empty rank list")
    if np.any(r < 1):
        raise ValueError("ranks must be >= 1")
    return math.fsum(1.0 / r) / r.size


def random_mrr(n: int) -> float:
    """Expected MRR of a uniformly random ranking over ``n`` candidates: H_n / n."""
    return math.fsum(1.0 / k for k in range(1, n + 1)) / n


@dataclass
class RankingResult:
    ordered: list[tuple[int, float]]  # (entity, score), best first; score ties by ascending id
    gold_id: int
    gold_rank: float
    tie_rule: TieRule = TieRule.EXPECTED_RANDOM

    @classmethod
    def from_scores(cls, ids, scores, gold_id: int, tie_rule: TieRule | str = TieRule.EXPECTED_RANDOM) -> RankingResult:
        ids = np.asarray(ids, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        if ids.size == 0:
            raise ValueError("no candidates to rank")
        order = np.lexsort((ids, -scores))
        ordered = [(int(ids[i]), float(scores[i])) for i in order]
        hit = np.flatnonzero(ids == gold_id)
        if hit.size == 0:
            raise KeyError(f"gold entity {gold_id} is not among the candidates")
        mask = np.ones(ids.size, dtype=bool)
        mask[hit[0]] = False
        rank = _rank(scores[mask], float(scores[hit[0]]), TieRule(tie_rule))
        return cls(ordered, int(gold_id), rank, TieRule(tie_rule))

    @property
    def scores(self) -> dict[int, float]:
        return dict(self.ordered)

    def topk(self, k: int) -> list[tuple[int, float]]:
        return self.ordered[:k]


@dataclass
class MetricsReport:
    hits1: float
    hits3: float
    hits5: float
    hits10: float
    mrr: float
    n: int
    tie_rule: TieRule = TieRule.EXPECTED_RANDOM
    per_setting: dict[str, MetricsReport] = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks, tie_rule: TieRule | str = TieRule.EXPECTED_RANDOM, per_setting=None) -> MetricsReport:
        ranks = list(ranks)
        h = [hits_at_k(ranks, k) for k in HITS_KS]
        return cls(*h, mrr(ranks), len(ranks), TieRule(tie_rule), dict(per_setting or {}))

    def to_json(self) -> dict:
        out = {
            "hits@1": self.hits1,
            "hits@3": self.hits3,
            "hits@5": self.hits5,
            "hits@10": self.hits10,
            "mrr": self.mrr,
            "n": self.n,
            "tie_rule": self.tie_rule.value,
        }
        out["per_setting"] = {k: v.to_json() for k, v in sorted(self.per_setting.items())}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> MetricsReport:
        sub = {k: cls.from_json(v) for k, v in obj.get("per_setting", {}).items()}
        return cls(obj["hits@1"], obj["hits@3"], obj["hits@5"], obj["hits@10"], obj["mrr"], obj["n"], TieRule(obj["tie_rule"]), sub)


def unit_distance(a, b) -> float:
    """Euclidean distance between the L2-normalised versions of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm vector in distance")
    return float(np.linalg.norm(a / na - b / nb))

"""Explicit Abduction-Mapping-Induction reasoner over a trained KGE model.

Abduction scores every candidate relation on the example pair, Mapping puts
the chosen relation (or a softmax mixture of the top-k) into the question
slot, and Induction ranks answer candidates by the resulting triple score.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from .graph import AnalogyInstance, CandidateScope, KnowledgeGraph, candidate_set
from .kge import KgeModel
from .metrics import RankingResult, TieRule


class PolicyMode(str, enum.Enum):
    ARGMAX = "argmax"
    WEIGHTED_TOPK = "weighted_topk"


@dataclass(frozen=True)
class PipelinePolicy:
    mode: PolicyMode = PolicyMode.ARGMAX
    k: int = 1
    temperature: float = 1.0
    all_relations: bool = False  # abduce over every relation instead of the analogy subset

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class AbductionResult:
    ranked: list[tuple[int, float]]  # (relation, score), best first


def _relation_space(kg: KnowledgeGraph, all_relations: bool) -> list[int]:
    return list(range(kg.num_relations)) if all_relations else sorted(kg.analogy_relations)


@torch.no_grad()
def abduce(model: KgeModel, kg: KnowledgeGraph, e_h: int, e_t: int, k: int, all_relations: bool = False) -> AbductionResult:
    rels = _relation_space(kg, all_relations)
    if not 1 <= k <= len(rels):
        raise ValueError(f"k={k} out of range 1..{len(rels)}")
    r = torch.tensor(rels)
    scores = model.score(torch.tensor(e_h), r, torch.tensor(e_t)).double().numpy()
    order = np.lexsort((np.array(rels), -scores))[:k]  # equal scores: lower id first
    return AbductionResult([(rels[i], float(scores[i])) for i in order])


@torch.no_grad()
def induce(
    model: KgeModel,
    kg: KnowledgeGraph,
    e_q: int,
    relation: int | list[tuple[int, float]],
    candidates: list[int],
    gold_id: int | None = None,
    tie_rule: TieRule | str = TieRule.EXPECTED_RANDOM,
) -> RankingResult:
    """Rank ``candidates`` for ``(e_q, relation, ?)``.

    ``relation`` may be a single id or a list of ``(relation, weight)`` whose
    weighted scores are summed.
    """
    if not candidates:
        raise ValueError("empty candidate set")
    mixture = [(relation, 1.0)] if isinstance(relation, (int, np.integer)) else list(relation)
    cand = torch.tensor(candidates)
    total = np.zeros(len(candidates))
    for r, w in mixture:
        total += w * model.score(torch.tensor(e_q), torch.tensor(int(r)), cand).double().numpy()
    gold = candidates[0] if gold_id is None else gold_id
    return RankingResult.from_scores(candidates, total, gold, tie_rule)


def answer_analogy(
    model: KgeModel,
    kg: KnowledgeGraph,
    instance: AnalogyInstance,
    policy: PipelinePolicy = PipelinePolicy(),
    tie_rule: TieRule | str = TieRule.EXPECTED_RANDOM,
    candidates: list[int] | None = None,
) -> RankingResult:
    # only the entity slots are read; instance.relation stays hidden
    e_h, e_t, e_q, e_a = instance.e_h, instance.e_t, instance.e_q, instance.e_a
    candidates = candidates if candidates is not None else candidate_set(kg, CandidateScope.ANALOGY_ONLY)
    k = 1 if policy.mode is PolicyMode.ARGMAX else policy.k
    ab = abduce(model, kg, e_h, e_t, k, policy.all_relations)
    if policy.mode is PolicyMode.ARGMAX:
        mapped: int | list[tuple[int, float]] = ab.ranked[0][0]
    else:
        s = np.array([sc for _, sc in ab.ranked]) / policy.temperature
        w = np.exp(s - s.max())
        w /= w.sum()
        mapped = [(r, float(wi)) for (r, _), wi in zip(ab.ranked, w)]
    return induce(model, kg, e_q, mapped, candidates, gold_id=e_a, tie_rule=tie_rule)


def pipeline_predictor(model: KgeModel, kg: KnowledgeGraph, policy: PipelinePolicy = PipelinePolicy(), tie_rule=TieRule.EXPECTED_RANDOM):
    candidates = candidate_set(kg, CandidateScope.ANALOGY_ONLY)
    return lambda inst: answer_analogy(model, kg, inst, policy, tie_rule, candidates)

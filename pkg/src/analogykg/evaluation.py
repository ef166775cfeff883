"""Model-level evaluation: metric reports, relation awareness, transfer and ablations."""

from __future__ import annotations

import copy
import logging
from collections import defaultdict
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .graph import AnalogyDataset, AnalogyInstance, KnowledgeGraph
from .metrics import MetricsReport, RankingResult, TieRule, unit_distance
from .synth import TransferSplit

log = logging.getLogger(__name__)

Predictor = Callable[[AnalogyInstance], RankingResult]


class EvaluationError(RuntimeError):
    pass


def evaluate_model(
    predictor: Predictor,
    instances: list[AnalogyInstance],
    filter_known_answers: bool = False,
    tie_rule: TieRule | str = TieRule.EXPECTED_RANDOM,
    known: list[AnalogyInstance] | None = None,
) -> MetricsReport:
    """Aggregate Hits@k/MRR over ``instances`` with a per-setting breakdown.

    In filtered mode, other gold answers of the same ``(e_h, e_t, e_q)`` query
    (taken from ``instances`` plus ``known``) are dropped before ranking.
    """
    if not instances:
        raise EvaluationError("nothing to evaluate")
    tie_rule = TieRule(tie_rule)
    answers: dict[tuple[int, int, int], set[int]] = defaultdict(set)
    if filter_known_answers:
        for x in [*instances, *(known or [])]:
            answers[(x.e_h, x.e_t, x.e_q)].add(x.e_a)
    ranks, by_setting = [], defaultdict(list)
    for i, inst in enumerate(instances):
        try:
            res = predictor(inst)
        except Exception as exc:
            raise EvaluationError(f"predictor failed on instance {i}: {exc}") from exc
        rank = _rank_result(res, inst.e_a, tie_rule, answers.get((inst.e_h, inst.e_t, inst.e_q), set()))
        ranks.append(rank)
        by_setting[inst.setting.value].append(rank)
    per = {k: MetricsReport.from_ranks(v, tie_rule) for k, v in by_setting.items()}
    return MetricsReport.from_ranks(ranks, tie_rule, per)


def _rank_result(res: RankingResult, gold: int, tie_rule: TieRule, other_answers: set[int]) -> float:
    drop = other_answers - {gold}
    if not drop and res.tie_rule is tie_rule and res.gold_id == gold:
        return res.gold_rank
    ids = [e for e, _ in res.ordered if e not in drop]
    scores = [s for e, s in res.ordered if e not in drop]
    return RankingResult.from_scores(ids, scores, gold, tie_rule).gold_rank


@torch.no_grad()
def relation_distance(model, kg: KnowledgeGraph, vocab, instances: list[AnalogyInstance]) -> float:
    """Mean distance between the unit-normalised question [R] hidden state (last
    layer) and the unit-normalised embedding of the gold relation token."""
    from .mart.model import collate
    from .mart.prompts import build_analogy_prompt

    if not instances:
        raise EvaluationError("relation_distance needs at least one instance")
    model.eval()
    batch = collate([build_analogy_prompt(x, kg, vocab) for x in instances])
    hidden = model(batch)["r_question_hidden"].double().numpy()
    emb = model.tok_emb.weight.detach().double().numpy()
    dists = [unit_distance(h, emb[vocab.relation_token(x.relation)]) for h, x in zip(hidden, instances)]
    return float(np.mean(dists))


def transfer_evaluate(
    train_fn: Callable[[AnalogyDataset], Predictor],
    train: AnalogyDataset,
    test: AnalogyDataset,
    split: TransferSplit,
    tie_rule: TieRule | str = TieRule.EXPECTED_RANDOM,
) -> MetricsReport:
    """Train on source-relation instances only and score the target-relation ones."""
    if not split.source or not split.target:
        raise EvaluationError("transfer split has an empty side")
    if split.source & split.target:
        raise EvaluationError("source and target relations overlap")
    if not test.test:
        raise EvaluationError("no target-relation instances to evaluate")
    if any(x.relation not in split.source for x in train.all_instances()):
        raise EvaluationError("training data contains a target relation")
    if any(x.relation not in split.target for x in test.test):
        raise EvaluationError("test data contains a source relation")
    predictor = train_fn(train)
    return evaluate_model(predictor, test.test, tie_rule=tie_rule)


# --------------------------------------------------------------------------
# MarT experiment harness (ablation rows and pretrained-vs-scratch transfer)

ABLATIONS = ("full", "no_relaxation", "no_gates", "no_pretrain", "no_example")


@dataclass
class MartRecipe:
    pretrain_epochs: int = 30
    finetune_epochs: int = 80
    pretrain_lr: float = 1e-3
    finetune_lr: float = 1e-3
    lam: float = 0.43
    batch_size: int = 64
    model: dict = field(default_factory=dict)  # MartConfig overrides


def _train_cfg(recipe: MartRecipe, seed: int, pretrain: bool, **flags):
    from .mart.train import MartTrainConfig

    if pretrain:
        return MartTrainConfig(epochs=recipe.pretrain_epochs, learning_rate=recipe.pretrain_lr,
                               batch_size=recipe.batch_size, seed=seed)
    return MartTrainConfig(epochs=recipe.finetune_epochs, learning_rate=recipe.finetune_lr, lam=recipe.lam,
                           batch_size=recipe.batch_size, seed=seed, **flags)


def build_mart(kg, vocab, recipe: MartRecipe, seed: int):
    from .mart.model import MartConfig, image_table
    from .mart.train import new_model

    dv = image_table(kg).shape[1]
    cfg = replace(MartConfig(image_dim=dv), **recipe.model)
    return new_model(kg, vocab, cfg, seed=seed)


def pretrained_mart(kg, vocab, recipe: MartRecipe, seed: int, history: list | None = None):
    from .mart.train import pretrain

    model = build_mart(kg, vocab, recipe, seed)
    return pretrain(model, kg, vocab, _train_cfg(recipe, seed, True), history)


def run_ablation_row(row: str, kg, vocab, dataset: AnalogyDataset, recipe: MartRecipe, seed: int,
                     pretrained=None, history: list | None = None, tie_rule=TieRule.EXPECTED_RANDOM):
    """Fine-tune one ablation row and return ``(model, test MetricsReport)``.

    ``pretrained`` is reused (copied) when given so rows of one seed share the
    same pre-trained start.
    """
    from .mart.train import finetune, mart_predictor

    if row not in ABLATIONS:
        raise ValueError(f"unknown ablation row {row!r}")
    flags = {} if row == "full" else {row: True}
    if row == "no_pretrain":
        model = build_mart(kg, vocab, recipe, seed)
    else:
        model = copy.deepcopy(pretrained) if pretrained is not None else pretrained_mart(kg, vocab, recipe, seed)
    finetune(model, kg, vocab, dataset, _train_cfg(recipe, seed, False, **flags), history)
    report = evaluate_model(mart_predictor(model, kg, vocab, row != "no_example", tie_rule), dataset.test,
                            tie_rule=tie_rule)
    return model, report


def ablation_suite(kg, vocab, dataset: AnalogyDataset, recipe: MartRecipe, seeds, rows=ABLATIONS,
                   tie_rule=TieRule.EXPECTED_RANDOM) -> dict[str, list[MetricsReport]]:
    out: dict[str, list[MetricsReport]] = {r: [] for r in rows}
    for seed in seeds:
        pre = pretrained_mart(kg, vocab, recipe, seed) if any(r != "no_pretrain" for r in rows) else None
        for row in rows:
            _, rep = run_ablation_row(row, kg, vocab, dataset, recipe, seed, pre, tie_rule=tie_rule)
            out[row].append(rep)
            log.info("seed %d %s mrr %.4f", seed, row, rep.mrr)
    return out


def mart_transfer(kg, vocab, train: AnalogyDataset, test: AnalogyDataset, split: TransferSplit,
                  recipe: MartRecipe, seed: int, use_pretrain: bool, pretrained=None,
                  tie_rule=TieRule.EXPECTED_RANDOM) -> MetricsReport:
    """Novel-relation transfer for MarT, with or without background pre-training."""
    from .mart.train import finetune, mart_predictor

    def train_fn(ds: AnalogyDataset):
        if use_pretrain:
            model = copy.deepcopy(pretrained) if pretrained is not None else pretrained_mart(kg, vocab, recipe, seed)
        else:
            model = build_mart(kg, vocab, recipe, seed)
        finetune(model, kg, vocab, ds, _train_cfg(recipe, seed, False))
        return mart_predictor(model, kg, vocab, True, tie_rule)

    return transfer_evaluate(train_fn, train, test, split, tie_rule)

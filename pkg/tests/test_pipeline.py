import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from analogykg.graph import Entity, KnowledgeGraph, Relation, Triple
from analogykg.kge import Backbone, FusionMode, KgeModel, KgeTrainConfig, score_transe, train_kge
from analogykg.metrics import TieRule
from analogykg.pipeline import (
    PipelinePolicy,
    PolicyMode,
    abduce,
    answer_analogy,
    induce,
    pipeline_predictor,
)
from analogykg.synth import SynthConfig, generate_world


def line_kg(n=20, n_rel=3):
    ents = [Entity(i, f"e{i}", "", True) for i in range(n)]
    rels = [Relation(r, f"r{r}", True) for r in range(n_rel)] + [Relation(n_rel, "ctx", False)]
    return KnowledgeGraph(ents, rels, [Triple(0, 0, 1)], {})


def transe_with(kg, ent, rel):
    m = KgeModel(kg, Backbone.TRANSE, dim=ent.shape[1], dtype=torch.float64)
    with torch.no_grad():
        m.entity_emb.copy_(torch.tensor(ent))
        m.relation_emb.copy_(torch.tensor(rel))
    return m


def test_abduce_forced_argmax():
    kg = line_kg(4, 3)
    ent = np.array([[0, 0], [1, 0], [5, 5], [9, 9]], float)
    rel = np.array([[0, 3], [1, 0], [-4, 0], [1, 0]], float)  # r1 fits (0 -> 1) exactly, ctx too
    m = transe_with(kg, ent, rel)
    ab = abduce(m, kg, 0, 1, 1)
    assert ab.ranked[0] == (1, 0.0)
    # full range: all analogy relations, never the context relation
    assert sorted(r for r, _ in abduce(m, kg, 0, 1, 3).ranked) == [0, 1, 2]
    with pytest.raises(ValueError):
        abduce(m, kg, 0, 1, 4)
    assert 3 in {r for r, _ in abduce(m, kg, 0, 1, 4, all_relations=True).ranked}


def test_abduce_ties_pick_lower_id():
    kg = line_kg(4, 3)
    m = transe_with(kg, np.zeros((4, 2)), np.zeros((4, 2)))
    assert [r for r, _ in abduce(m, kg, 0, 1, 3).ranked] == [0, 1, 2]


def test_induce_singleton_and_empty():
    kg = line_kg()
    m = KgeModel(kg, Backbone.ANALOGY, dim=4)
    res = induce(m, kg, 0, 1, [7], gold_id=7)
    assert res.gold_rank == 1
    with pytest.raises(ValueError):
        induce(m, kg, 0, 1, [])


def test_induce_exact_translation_ranked_first():
    kg = line_kg()
    rng = np.random.default_rng(0)
    ent = rng.normal(size=(20, 4))
    rel = rng.normal(size=(4, 4))
    ent[13] = ent[2] + rel[1]
    m = transe_with(kg, ent, rel)
    res = induce(m, kg, 2, 1, list(range(20)), gold_id=13)
    assert res.ordered[0][0] == 13 and res.gold_rank == 1


@pytest.mark.parametrize("backbone", list(Backbone))
def test_induce_equals_brute_force(backbone):
    kg = line_kg()
    m = KgeModel(kg, backbone, dim=6, seed=3, dtype=torch.float64)
    cands = list(range(20))
    res = induce(m, kg, 4, 2, cands, gold_id=9, tie_rule=TieRule.PESSIMISTIC)
    brute = {}
    for c in cands:  # one triple at a time, no batching
        brute[c] = m.score(torch.tensor(4), torch.tensor(2), torch.tensor(c)).item()
    assert res.scores == brute
    assert res.gold_rank == 1 + sum(1 for c in cands if c != 9 and brute[c] >= brute[9])
    if backbone is Backbone.TRANSE:
        e, r = m.entity_emb.detach().numpy(), m.relation_emb.detach().numpy()
        np.testing.assert_allclose([brute[c] for c in cands], [score_transe(e[4], r[2], e[c]) for c in cands], atol=1e-12)


def test_weighted_mixture_sums_scores():
    kg = line_kg()
    m = KgeModel(kg, Backbone.COMPLEX, dim=4, seed=1, dtype=torch.float64)
    cands = list(range(20))
    mix = induce(m, kg, 0, [(0, 0.25), (2, 0.75)], cands, gold_id=5)
    a, b = induce(m, kg, 0, 0, cands, gold_id=5).scores, induce(m, kg, 0, 2, cands, gold_id=5).scores
    for c in cands:
        assert mix.scores[c] == pytest.approx(0.25 * a[c] + 0.75 * b[c], abs=1e-12)


@pytest.fixture(scope="module")
def trained(small_world):
    m = train_kge(small_world.kg, KgeTrainConfig(epochs=30, dim=8), Backbone.ANALOGY, FusionMode.GATED_RSME)
    return small_world, m


@settings(max_examples=20, deadline=None)
@given(st.data())
def test_argmax_equals_weighted_k1(trained, data):
    world, m = trained
    inst = data.draw(st.sampled_from(world.dataset.all_instances()))
    t = data.draw(st.floats(0.1, 10))
    a = answer_analogy(m, world.kg, inst, PipelinePolicy(PolicyMode.ARGMAX))
    b = answer_analogy(m, world.kg, inst, PipelinePolicy(PolicyMode.WEIGHTED_TOPK, k=1, temperature=t))
    assert a.ordered == b.ordered and a.gold_rank == b.gold_rank


@settings(max_examples=20, deadline=None)
@given(st.data())
def test_hidden_relation_is_never_read(trained, data):
    world, m = trained
    inst = data.draw(st.sampled_from(world.dataset.all_instances()))
    other = data.draw(st.integers(-5, 50))
    fake = dataclasses.replace(inst, relation=other)
    for policy in (PipelinePolicy(), PipelinePolicy(PolicyMode.WEIGHTED_TOPK, k=3)):
        assert answer_analogy(m, world.kg, inst, policy).ordered == answer_analogy(m, world.kg, fake, policy).ordered


def test_abduction_accuracy_on_zero_noise_world():
    w = generate_world(SynthConfig(noise_sigma=0.0))
    m = train_kge(w.kg, KgeTrainConfig(), Backbone.TRANSE)
    rng = np.random.default_rng(0)
    planted = [(h, r, t) for r, prs in w.relation_pairs.items() for h, t in prs]
    sample = [planted[i] for i in rng.choice(len(planted), 100, replace=False)]
    hits = 0
    for h, r, t in sample:
        # brute-force oracle: score every relation (analogy and context) one by one
        scores = {q: m.score(torch.tensor(h), torch.tensor(q), torch.tensor(t)).item() for q in range(w.kg.num_relations)}
        best = max(scores, key=lambda q: (scores[q], -q))
        assert abduce(m, w.kg, h, t, 1, all_relations=True).ranked[0][0] == best
        hits += best == r
    assert hits / 100 >= 0.9


def test_policy_validation():
    with pytest.raises(ValueError):
        PipelinePolicy(k=0)
    with pytest.raises(ValueError):
        PipelinePolicy(temperature=0)


def test_predictor_uses_analogy_candidates(trained):
    world, m = trained
    inst = world.dataset.test[0]
    res = pipeline_predictor(m, world.kg)(inst)
    assert sorted(e for e, _ in res.ordered) == sorted(world.kg.analogy_entities)
    assert res.gold_id == inst.e_a

import json

import numpy as np
import pytest

from analogykg.graph import (
    AnalogyDataset,
    AnalogyInstance,
    CandidateScope,
    Entity,
    GraphError,
    KnowledgeGraph,
    ModalityFeatures,
    Relation,
    TaskSetting,
    Triple,
    candidate_set,
    graphs_equal,
    load_dataset,
    load_graph,
    load_instances,
    save_dataset,
    save_graph,
)


def tiny_graph():
    ents = [Entity(0, "a", "alpha one", True), Entity(1, "b", "beta", True), Entity(2, "c", "", False)]
    rels = [Relation(0, "r", True), Relation(1, "s", False)]
    feats = {
        0: ModalityFeatures(np.array([1, 2], np.float32), np.array([[1, 0, 0], [0, 1, 0]], np.float32)),
        1: ModalityFeatures(None, np.array([[0.5, 0.5, 0.5]], np.float32)),
    }
    return KnowledgeGraph(ents, rels, [Triple(0, 0, 1), Triple(1, 1, 2)], feats, 2, 3, 2, ["a", "b", "c"], ["r", "s"])


def test_round_trip_tiny(tmp_path):
    kg = tiny_graph()
    save_graph(kg, tmp_path)
    back = load_graph(tmp_path)
    assert graphs_equal(kg, back)
    assert back.features[1].text is None and back.features[2].images is None
    np.testing.assert_array_equal(back.features[0].mean_image(), [0.5, 0.5, 0.0])


def test_round_trip_synthetic(tmp_path, world):
    save_graph(world.kg, tmp_path)
    save_dataset(world.dataset, tmp_path, world.kg)
    kg = load_graph(tmp_path)
    assert graphs_equal(world.kg, kg)
    assert load_dataset(tmp_path, kg) == world.dataset


def test_graphs_equal_detects_one_bit(tmp_path):
    kg = tiny_graph()
    save_graph(kg, tmp_path)
    other = load_graph(tmp_path)
    img = other.features[0].images
    img.view(np.uint32)[0, 0] ^= 1
    assert not graphs_equal(kg, other)


def _write(tmp_path, name, text):
    (tmp_path / name).write_text(text, encoding="utf-8")


def test_dangling_reference_reports_line(tmp_path):
    save_graph(tiny_graph(), tmp_path)
    with open(tmp_path / "triples.tsv", "a") as fh:
        fh.write("a\tr\tzzz\n")
    with pytest.raises(GraphError, match=r"triples.tsv:3: dangling entity reference 'zzz'"):
        load_graph(tmp_path)


def test_duplicate_triple_reports_both_lines(tmp_path):
    save_graph(tiny_graph(), tmp_path)
    with open(tmp_path / "triples.tsv", "a") as fh:
        fh.write("a\tr\tb\n")
    with pytest.raises(GraphError, match=r"triples.tsv:3: duplicate triple \(first seen on line 1\)"):
        load_graph(tmp_path)


def test_feature_dim_mismatch(tmp_path):
    save_graph(tiny_graph(), tmp_path)
    _write(tmp_path, "graph.json", json.dumps({"text_dim": 5, "image_dim": 3, "max_images": 2}))
    with pytest.raises(GraphError, match="dimension mismatch"):
        load_graph(tmp_path)


def test_missing_directory():
    with pytest.raises(GraphError):
        load_graph("/nonexistent/graph")


def test_instance_file_validation(tmp_path):
    kg = tiny_graph()
    _write(tmp_path, "i.jsonl", json.dumps({"e_h": "a", "e_t": "b", "e_q": "b", "e_a": "a", "relation": "r",
                                            "setting": "blended"}) + "\n")
    [inst] = load_instances(tmp_path / "i.jsonl", kg)
    assert inst == AnalogyInstance(0, 1, 1, 0, 0, TaskSetting.BLENDED)
    _write(tmp_path, "j.jsonl", json.dumps({"e_h": "a", "e_t": "c", "e_q": "b", "e_a": "a", "relation": "r",
                                            "setting": "blended"}) + "\n")
    with pytest.raises(GraphError, match="j.jsonl:1: instance uses a non-analogy entity"):
        load_instances(tmp_path / "j.jsonl", kg)
    _write(tmp_path, "k.jsonl", json.dumps({"e_h": "a", "e_t": "b", "e_q": "b", "e_a": "a", "relation": "s",
                                            "setting": "blended"}) + "\n")
    with pytest.raises(GraphError, match="not an analogy relation"):
        load_instances(tmp_path / "k.jsonl", kg)


def test_leaking_instance_across_splits_is_rejected():
    x = AnalogyInstance(0, 1, 1, 0, 0, TaskSetting.BLENDED)
    with pytest.raises(GraphError):
        AnalogyDataset([x], [], [x]).validate()


def test_candidate_scopes():
    kg = tiny_graph()
    assert candidate_set(kg) == [0, 1]
    assert candidate_set(kg, CandidateScope.ALL_ENTITIES) == [0, 1, 2]


def test_validate_rejects_bad_features():
    kg = tiny_graph()
    kg.features[1].text = np.array([np.nan, 0.0], np.float32)
    with pytest.raises(GraphError):
        kg.validate()

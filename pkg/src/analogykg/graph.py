"""Multimodal knowledge graph, analogy instances and their on-disk formats.

A graph directory holds ``entities.jsonl``, ``relations.jsonl``,
``triples.tsv`` and optionally ``text_features.fmat`` / ``image_features.fmat``
(each with an ``.index.json`` sidecar keyed by the original entity id) and a
``graph.json`` manifest declaring feature dimensions. Analogy splits live next
to it as ``train.jsonl``, ``dev.jsonl`` and ``test.jsonl``.

String ids from the files are remapped to dense integers in file order; the
original keys are kept on the graph (``entity_keys``/``relation_keys``).
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .fmat import read_feature_matrix, write_feature_matrix

SPLITS = ("train", "dev", "test")


class GraphError(ValueError):
    pass


class TaskSetting(str, enum.Enum):
    SINGLE_IMG = "single_img"  # (I_h, I_t) : (T_q, ?)
    SINGLE_TEXT = "single_text"  # (T_h, T_t) : (I_q, ?)
    BLENDED = "blended"  # (I_h, T_t) : (I_q, ?)


class CandidateScope(str, enum.Enum):
    ALL_ENTITIES = "all"
    ANALOGY_ONLY = "analogy"


@dataclass(frozen=True)
class Entity:
    id: int
    name: str
    description: str = ""
    is_analogy: bool = False


@dataclass(frozen=True)
class Relation:
    id: int
    name: str
    is_analogy: bool = False


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass
class ModalityFeatures:
    text: np.ndarray | None = None  # (d_t,)
    images: np.ndarray | None = None  # (k, d_v)

    @property
    def num_images(self) -> int:
        return 0 if self.images is None else int(self.images.shape[0])

    def mean_image(self) -> np.ndarray | None:
        # mean over images; order-independent
        if self.images is None or self.images.shape[0] == 0:
            return None
        return self.images.astype(np.float64).mean(axis=0)


@dataclass(frozen=True)
class AnalogyInstance:
    e_h: int
    e_t: int
    e_q: int
    e_a: int
    relation: int  # hidden; never fed to a model
    setting: TaskSetting

    @property
    def example(self) -> tuple[int, int]:
        return (self.e_h, self.e_t)

    @property
    def question(self) -> tuple[int, int]:
        return (self.e_q, self.e_a)


@dataclass
class AnalogyDataset:
    train: list[AnalogyInstance] = field(default_factory=list)
    dev: list[AnalogyInstance] = field(default_factory=list)
    test: list[AnalogyInstance] = field(default_factory=list)

    def split(self, name: str) -> list[AnalogyInstance]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_instances(self) -> list[AnalogyInstance]:
        return [*self.train, *self.dev, *self.test]

    def validate(self) -> None:
        seen: dict[AnalogyInstance, str] = {}
        for name in SPLITS:
            for inst in self.split(name):
                if inst in seen and seen[inst] != name:
                    raise GraphError(f"instance {inst} appears in both {seen[inst]} and {name}")
                seen[inst] = name


@dataclass
class KnowledgeGraph:
    entities: list[Entity]
    relations: list[Relation]
    triples: list[Triple]
    features: dict[int, ModalityFeatures]
    text_dim: int = 0
    image_dim: int = 0
    max_images: int = 0
    entity_keys: list[str] = field(default_factory=list)
    relation_keys: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.entity_keys:
            self.entity_keys = [str(e.id) for e in self.entities]
        if not self.relation_keys:
            self.relation_keys = [str(r.id) for r in self.relations]
        for e in self.entities:
            self.features.setdefault(e.id, ModalityFeatures())

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @cached_property
    def analogy_entities(self) -> list[int]:
        return [e.id for e in self.entities if e.is_analogy]

    @cached_property
    def analogy_relations(self) -> list[int]:
        return [r.id for r in self.relations if r.is_analogy]

    @cached_property
    def triple_set(self) -> frozenset[Triple]:
        return frozenset(self.triples)

    def validate(self) -> None:
        for i, e in enumerate(self.entities):
            if e.id != i:
                raise GraphError(f"entity ids not dense: position {i} holds id {e.id}")
            if not e.name:
                raise GraphError(f"entity {self.entity_keys[i]!r} has an empty name")
        for i, r in enumerate(self.relations):
            if r.id != i:
                raise GraphError(f"relation ids not dense: position {i} holds id {r.id}")
        ne, nr = self.num_entities, self.num_relations
        seen = set()
        for n, t in enumerate(self.triples):
            if not (0 <= t.head < ne and 0 <= t.tail < ne and 0 <= t.relation < nr):
                raise GraphError(f"triple {n} references an unknown id: {t}")
            if t in seen:
                raise GraphError(f"duplicate triple {n}: {t}")
            seen.add(t)
        for eid, feats in self.features.items():
            if not 0 <= eid < ne:
                raise GraphError(f"features for unknown entity {eid}")
            if feats.text is not None:
                if feats.text.shape != (self.text_dim,) or not np.all(np.isfinite(feats.text)):
                    raise GraphError(f"bad text feature for entity {eid}")
            if feats.images is not None:
                if feats.images.ndim != 2 or feats.images.shape[1] != self.image_dim:
                    raise GraphError(f"bad image features for entity {eid}")
                if self.max_images and feats.images.shape[0] > self.max_images:
                    raise GraphError(f"entity {eid} has more than {self.max_images} images")
                if not np.all(np.isfinite(feats.images)):
                    raise GraphError(f"non-finite image feature for entity {eid}")


def candidate_set(kg: KnowledgeGraph, scope: CandidateScope | str = CandidateScope.ANALOGY_ONLY) -> list[int]:
    scope = CandidateScope(scope)
    if scope is CandidateScope.ANALOGY_ONLY:
        return sorted(kg.analogy_entities)
    return list(range(kg.num_entities))


# --------------------------------------------------------------------------
# persistence


def _read_jsonl(path: Path) -> list[tuple[int, dict]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise GraphError(f"{path.name}:{lineno}: invalid JSON ({exc.msg})") from None
    return rows


def _require(path: Path) -> Path:
    if not path.exists():
        raise GraphError(f"missing file: {path}")
    return path


def load_graph(graph_dir: str | os.PathLike) -> KnowledgeGraph:
    graph_dir = Path(graph_dir)
    if not graph_dir.is_dir():
        raise GraphError(f"missing graph directory: {graph_dir}")

    entities, entity_keys, ent_ids = [], [], {}
    for lineno, obj in _read_jsonl(_require(graph_dir / "entities.jsonl")):
        key = str(obj["id"])
        if key in ent_ids:
            raise GraphError(f"entities.jsonl:{lineno}: duplicate entity id {key!r}")
        ent_ids[key] = len(entities)
        entities.append(
            Entity(len(entities), str(obj.get("name", "")), str(obj.get("description", "")), bool(obj.get("analogy", False)))
        )
        entity_keys.append(key)

    relations, relation_keys, rel_ids = [], [], {}
    for lineno, obj in _read_jsonl(_require(graph_dir / "relations.jsonl")):
        key = str(obj["id"])
        if key in rel_ids:
            raise GraphError(f"relations.jsonl:{lineno}: duplicate relation id {key!r}")
        rel_ids[key] = len(relations)
        relations.append(Relation(len(relations), str(obj.get("name", key)), bool(obj.get("analogy", False))))
        relation_keys.append(key)

    triples, first_seen = [], {}
    with open(_require(graph_dir / "triples.tsv"), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphError(f"triples.tsv:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            for kind, key, table in (("entity", h, ent_ids), ("relation", r, rel_ids), ("entity", t, ent_ids)):
                if key not in table:
                    raise GraphError(f"triples.tsv:{lineno}: dangling {kind} reference {key!r}")
            triple = Triple(ent_ids[h], rel_ids[r], ent_ids[t])
            if triple in first_seen:
                raise GraphError(f"triples.tsv:{lineno}: duplicate triple (first seen on line {first_seen[triple]})")
            first_seen[triple] = lineno
            triples.append(triple)

    manifest = {}
    if (graph_dir / "graph.json").exists():
        manifest = json.loads((graph_dir / "graph.json").read_text(encoding="utf-8"))
    text_dim = int(manifest.get("text_dim", 0))
    image_dim = int(manifest.get("image_dim", 0))
    max_images = int(manifest.get("max_images", 0))

    features = {i: ModalityFeatures() for i in range(len(entities))}
    text_path = graph_dir / "text_features.fmat"
    if text_path.exists():
        mat, index = read_feature_matrix(text_path)
        text_dim = _check_dim("text_features.fmat", mat, text_dim, "text_dim" in manifest)
        for key, row in (index or {}).items():
            eid = _lookup_feature_key(ent_ids, key, "text_features.index.json")
            features[eid].text = _row(mat, int(row), "text_features.fmat")
    image_path = graph_dir / "image_features.fmat"
    if image_path.exists():
        mat, index = read_feature_matrix(image_path)
        image_dim = _check_dim("image_features.fmat", mat, image_dim, "image_dim" in manifest)
        for key, rows in (index or {}).items():
            eid = _lookup_feature_key(ent_ids, key, "image_features.index.json")
            rows = [rows] if isinstance(rows, int) else list(rows)
            features[eid].images = np.stack([_row(mat, int(r), "image_features.fmat") for r in rows]) if rows else None

    kg = KnowledgeGraph(entities, relations, triples, features, text_dim, image_dim, max_images, entity_keys, relation_keys)
    kg.validate()
    return kg


def _check_dim(name: str, mat: np.ndarray, declared: int, has_decl: bool) -> int:
    if has_decl and mat.shape[0] > 0 and mat.shape[1] != declared:
        raise GraphError(f"{name}: dimension mismatch, file has {mat.shape[1]} columns but graph.json declares {declared}")
    return int(mat.shape[1]) if mat.shape[0] > 0 or not has_decl else declared


def _lookup_feature_key(ent_ids: dict, key: str, where: str) -> int:
    if key not in ent_ids:
        raise GraphError(f"{where}: dangling entity reference {key!r}")
    return ent_ids[key]


def _row(mat: np.ndarray, row: int, where: str) -> np.ndarray:
    if not 0 <= row < mat.shape[0]:
        raise GraphError(f"{where}: row {row} out of range (rows={mat.shape[0]})")
    return mat[row].copy()


def save_graph(kg: KnowledgeGraph, graph_dir: str | os.PathLike) -> None:
    graph_dir = Path(graph_dir)
    graph_dir.mkdir(parents=True, exist_ok=True)
    ek, rk = kg.entity_keys, kg.relation_keys
    with open(graph_dir / "entities.jsonl", "w", encoding="utf-8") as fh:
        for e in kg.entities:
            fh.write(json.dumps({"id": ek[e.id], "name": e.name, "description": e.description, "analogy": e.is_analogy}) + "\n")
    with open(graph_dir / "relations.jsonl", "w", encoding="utf-8") as fh:
        for r in kg.relations:
            fh.write(json.dumps({"id": rk[r.id], "name": r.name, "analogy": r.is_analogy}) + "\n")
    with open(graph_dir / "triples.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for t in kg.triples:
            fh.write(f"{ek[t.head]}\t{rk[t.relation]}\t{ek[t.tail]}\n")
    manifest = {"text_dim": kg.text_dim, "image_dim": kg.image_dim, "max_images": kg.max_images}
    (graph_dir / "graph.json").write_text(json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8")
    (graph_dir / "id_map.json").write_text(
        json.dumps({"entities": ek, "relations": rk}) + "\n", encoding="utf-8"
    )

    text_rows, text_index = [], {}
    image_rows, image_index = [], {}
    for e in kg.entities:
        feats = kg.features.get(e.id)
        if feats is None:
            continue
        if feats.text is not None:
            text_index[ek[e.id]] = len(text_rows)
            text_rows.append(feats.text)
        if feats.images is not None and feats.images.shape[0]:
            image_index[ek[e.id]] = list(range(len(image_rows), len(image_rows) + feats.images.shape[0]))
            image_rows.extend(feats.images)
    if text_rows or kg.text_dim:
        mat = np.stack(text_rows) if text_rows else np.zeros((0, kg.text_dim), np.float32)
        write_feature_matrix(mat, text_index, graph_dir / "text_features.fmat")
    if image_rows or kg.image_dim:
        mat = np.stack(image_rows) if image_rows else np.zeros((0, kg.image_dim), np.float32)
        write_feature_matrix(mat, image_index, graph_dir / "image_features.fmat")


def save_instances(instances: list[AnalogyInstance], path: str | os.PathLike, kg: KnowledgeGraph) -> None:
    ek, rk = kg.entity_keys, kg.relation_keys
    with open(path, "w", encoding="utf-8") as fh:
        for x in instances:
            obj = {"e_h": ek[x.e_h], "e_t": ek[x.e_t], "e_q": ek[x.e_q], "e_a": ek[x.e_a],
                   "relation": rk[x.relation], "setting": x.setting.value}
            fh.write(json.dumps(obj) + "\n")


def load_instances(path: str | os.PathLike, kg: KnowledgeGraph) -> list[AnalogyInstance]:
    path = Path(path)
    ent = {k: i for i, k in enumerate(kg.entity_keys)}
    rel = {k: i for i, k in enumerate(kg.relation_keys)}
    analogy_e = set(kg.analogy_entities)
    analogy_r = set(kg.analogy_relations)
    out = []
    for lineno, obj in _read_jsonl(path):
        try:
            ids = [ent[str(obj[k])] for k in ("e_h", "e_t", "e_q", "e_a")]
            r = rel[str(obj["relation"])]
        except KeyError as exc:
            raise GraphError(f"{path.name}:{lineno}: unknown id {exc.args[0]!r}") from None
        if not set(ids) <= analogy_e:
            raise GraphError(f"{path.name}:{lineno}: instance uses a non-analogy entity")
        if r not in analogy_r:
            raise GraphError(f"{path.name}:{lineno}: relation is not an analogy relation")
        if (ids[0], ids[1]) == (ids[2], ids[3]):
            raise GraphError(f"{path.name}:{lineno}: example pair equals question pair")
        out.append(AnalogyInstance(*ids, r, TaskSetting(obj["setting"])))
    return out


def save_dataset(dataset: AnalogyDataset, data_dir: str | os.PathLike, kg: KnowledgeGraph) -> None:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        save_instances(dataset.split(name), data_dir / f"{name}.jsonl", kg)


def load_dataset(data_dir: str | os.PathLike, kg: KnowledgeGraph) -> AnalogyDataset:
    data_dir = Path(data_dir)
    ds = AnalogyDataset(*(load_instances(_require(data_dir / f"{n}.jsonl"), kg) for n in SPLITS))
    ds.validate()
    return ds


def graphs_equal(a: KnowledgeGraph, b: KnowledgeGraph) -> bool:
    """Field-by-field equality, with bit-exact comparison of feature arrays."""
    scalar = ("entities", "relations", "triples", "text_dim", "image_dim", "max_images", "entity_keys", "relation_keys")
    if any(getattr(a, f) != getattr(b, f) for f in scalar):
        return False
    if a.features.keys() != b.features.keys():
        return False
    for eid, fa in a.features.items():
        fb = b.features[eid]
        for x, y in ((fa.text, fb.text), (fa.images, fb.images)):
            if (x is None) != (y is None):
                return False
            if x is not None and (x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes()):
                return False
    return True

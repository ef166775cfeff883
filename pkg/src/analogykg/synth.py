"""Synthetic multimodal KGs with planted additive analogies.

Every entity has a latent vector ``z`` and every analogy relation an offset
``v_r``; a planted pair ``(h, t)`` under ``r`` satisfies ``z_t = z_h + v_r``
before per-entity noise. Entities are organised in clusters: a root ``b``,
singletons ``b + v_r`` and doubletons ``b + v_r + v_s``. A doubleton is the
tail of two pairs (one per relation), so latents and offsets are rounded to a
dyadic grid to keep every path sum exact in floating point.

Text and image features are fixed random linear projections of ``z`` plus
Gaussian noise; raw images never exist.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ._rng import make_rng
from .graph import (
    AnalogyDataset,
    AnalogyInstance,
    Entity,
    GraphError,
    KnowledgeGraph,
    ModalityFeatures,
    Relation,
    TaskSetting,
    Triple,
)

GRID = 256.0  # latents live on multiples of 1/GRID
SETTINGS = (TaskSetting.SINGLE_IMG, TaskSetting.SINGLE_TEXT, TaskSetting.BLENDED)


@dataclass
class SynthConfig:
    num_entities: int = 120
    num_relations: int = 8
    latent_dim: int = 16
    noise_sigma: float = 0.05
    pairs_per_relation: int = 16
    neighbor_triples: int = 24
    num_neighbor_relations: int = 4
    text_dim: int = 32
    image_dim: int = 32
    images_per_entity: int = 2
    instances_per_relation: int | None = 96
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 7

    def validate(self) -> None:
        if self.num_relations < 1:
            raise ValueError("num_relations must be >= 1")
        if self.num_entities < 4 * self.num_relations:
            raise ValueError(f"num_entities ({self.num_entities}) must be >= 4 * num_relations ({4 * self.num_relations})")
        if self.pairs_per_relation < 4:
            raise ValueError("pairs_per_relation must be >= 4 (two pairs per category)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.latent_dim < 1 or self.text_dim < 1 or self.image_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.images_per_entity < 1:
            raise ValueError("images_per_entity must be >= 1")
        if self.neighbor_triples < 0 or (self.neighbor_triples and self.num_neighbor_relations < 1):
            raise ValueError("neighbor triples need at least one neighbor relation")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError("split_fractions must be three non-negative numbers summing to 1")
        if self.instances_per_relation is not None and self.instances_per_relation < 1:
            raise ValueError("instances_per_relation must be positive")


@dataclass
class SyntheticWorld:
    kg: KnowledgeGraph
    dataset: AnalogyDataset
    latents: np.ndarray  # (N_e, latent_dim), noisy
    offsets: np.ndarray  # (N_r, latent_dim); zero rows for non-analogy relations
    relation_pairs: dict[int, list[tuple[int, int]]]
    config: SynthConfig = field(default_factory=SynthConfig)


def _grid(x: np.ndarray) -> np.ndarray:
    return np.round(x * GRID) / GRID


def _plant_pairs(cfg: SynthConfig, rng: np.random.Generator):
    """Return clean latents for analogy entities and the planted pairs per relation."""
    R, D = cfg.num_relations, cfg.latent_dim
    offsets = _grid(rng.normal(0.0, 1.0, size=(R, D)))
    latents: list[np.ndarray] = []
    pairs: dict[int, list[tuple[int, int]]] = {r: [] for r in range(R)}
    remaining = {r: cfg.pairs_per_relation for r in range(R)}

    def new_entity(z):
        latents.append(z)
        if len(latents) > cfg.num_entities:
            raise ValueError(
                f"num_entities={cfg.num_entities} too small to plant {cfg.pairs_per_relation} pairs "
                f"for {R} relations"
            )
        return len(latents) - 1

    while any(remaining.values()):
        root_z = _grid(rng.normal(0.0, 1.0, size=D))
        root = new_entity(root_z)
        single = {}
        for r in rng.permutation(R):
            r = int(r)
            if remaining[r] > 0:
                single[r] = new_entity(root_z + offsets[r])
                pairs[r].append((root, single[r]))
                remaining[r] -= 1
        combos = list(itertools.combinations(sorted(single), 2))
        for i in rng.permutation(len(combos)):
            r, s = combos[int(i)]
            if remaining[r] > 0 and remaining[s] > 0:
                both = new_entity(root_z + offsets[r] + offsets[s])
                pairs[r].append((single[s], both))
                pairs[s].append((single[r], both))
                remaining[r] -= 1
                remaining[s] -= 1
    return np.array(latents), offsets, pairs


def sample_analogy_instances(
    kg: KnowledgeGraph,
    relation_pairs: dict[int, list[tuple[int, int]]],
    seed: int,
    per_relation: int | None = None,
) -> list[AnalogyInstance]:
    """Build instances whose example and question pairs come from different
    halves ("categories") of a relation's pair list; settings are dealt evenly."""
    rng = make_rng(seed, 11)
    out: list[tuple[int, int, int, int, int]] = []
    for r in sorted(relation_pairs):
        prs = list(dict.fromkeys(relation_pairs[r]))
        if len(prs) < 4:
            raise GraphError(f"relation {r} has {len(prs)} distinct pairs; at least 4 are needed")
        perm = rng.permutation(len(prs))
        half = len(prs) // 2
        cat_a = [prs[i] for i in perm[:half]]
        cat_b = [prs[i] for i in perm[half:]]
        combos = [(ex, q) for ex in cat_a for q in cat_b] + [(ex, q) for ex in cat_b for q in cat_a]
        if per_relation is not None and per_relation < len(combos):
            pick = np.sort(rng.choice(len(combos), size=per_relation, replace=False))
            combos = [combos[i] for i in pick]
        out.extend((ex[0], ex[1], q[0], q[1], r) for ex, q in combos)
    order = rng.permutation(len(out))
    return [AnalogyInstance(*out[j], SETTINGS[k % 3]) for k, j in enumerate(order)]


def _split(instances: list[AnalogyInstance], fractions, rng) -> AnalogyDataset:
    order = rng.permutation(len(instances))
    n = len(instances)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    pick = [instances[i] for i in order]
    return AnalogyDataset(pick[:n_train], pick[n_train : n_train + n_dev], pick[n_train + n_dev :])


def generate_world(cfg: SynthConfig) -> SyntheticWorld:
    cfg.validate()
    rng = make_rng(cfg.seed, 1)
    clean, offsets, pairs = _plant_pairs(cfg, rng)
    D = cfg.latent_dim
    n_planted = clean.shape[0]
    extra = _grid(rng.normal(0.0, 1.0, size=(cfg.num_entities - n_planted, D)))
    clean = np.concatenate([clean, extra]) if len(extra) else clean

    # context relations attach one fresh filler entity per neighbor triple
    n_ctx = cfg.num_neighbor_relations if cfg.neighbor_triples else 0
    ctx_offsets = _grid(rng.normal(0.0, 1.0, size=(n_ctx, D)))
    ctx_triples, filler_z = [], []
    for k in range(cfg.neighbor_triples):
        e = int(rng.integers(cfg.num_entities))
        c = int(rng.integers(n_ctx))
        filler_z.append(clean[e] + ctx_offsets[c])
        ctx_triples.append((e, cfg.num_relations + c, cfg.num_entities + k))
    if filler_z:
        clean = np.concatenate([clean, np.array(filler_z)])

    n_total = clean.shape[0]
    noise_rng = make_rng(cfg.seed, 2)
    latents = clean + noise_rng.normal(0.0, cfg.noise_sigma, size=clean.shape) if cfg.noise_sigma > 0 else clean.copy()

    proj_rng = make_rng(cfg.seed, 3)
    a_text = proj_rng.normal(0.0, 1.0 / np.sqrt(D), size=(cfg.text_dim, D))
    a_img = proj_rng.normal(0.0, 1.0 / np.sqrt(D), size=(cfg.image_dim, D))
    feat_rng = make_rng(cfg.seed, 4)
    features = {}
    for e in range(n_total):
        text = a_text @ latents[e] + feat_rng.normal(0.0, cfg.noise_sigma, size=cfg.text_dim) * (cfg.noise_sigma > 0)
        imgs = latents[e] @ a_img.T + feat_rng.normal(0.0, cfg.noise_sigma, size=(cfg.images_per_entity, cfg.image_dim)) * (
            cfg.noise_sigma > 0
        )
        features[e] = ModalityFeatures(text.astype(np.float32), np.atleast_2d(imgs).astype(np.float32))

    entities = [Entity(i, f"ent_{i:03d}", f"ent_{i:03d}", True) for i in range(cfg.num_entities)]
    entities += [Entity(cfg.num_entities + k, f"fill_{k:03d}", f"fill_{k:03d}", False) for k in range(cfg.neighbor_triples)]
    relations = [Relation(r, f"rel_{r}", True) for r in range(cfg.num_relations)]
    relations += [Relation(cfg.num_relations + c, f"ctx_{c}", False) for c in range(n_ctx)]
    triples = [Triple(h, r, t) for r in sorted(pairs) for h, t in pairs[r]]
    triples += [Triple(*t) for t in ctx_triples]
    kg = KnowledgeGraph(
        entities,
        relations,
        triples,
        features,
        text_dim=cfg.text_dim,
        image_dim=cfg.image_dim,
        max_images=cfg.images_per_entity,
        entity_keys=[e.name for e in entities],
        relation_keys=[r.name for r in relations],
    )
    kg.validate()

    instances = sample_analogy_instances(kg, pairs, cfg.seed, cfg.instances_per_relation)
    dataset = _split(instances, cfg.split_fractions, make_rng(cfg.seed, 5))
    all_offsets = np.concatenate([offsets, ctx_offsets]) if n_ctx else offsets
    return SyntheticWorld(kg, dataset, latents, all_offsets, pairs, cfg)


def generate_synthetic(cfg: SynthConfig) -> tuple[KnowledgeGraph, AnalogyDataset]:
    world = generate_world(cfg)
    return world.kg, world.dataset


def latent_oracle_accuracy(world: SyntheticWorld, instances: list[AnalogyInstance], from_example: bool = False) -> float:
    """Fraction of instances solved by nearest neighbour (over analogy entities)
    on ``z_q + v_r``, or on ``z_q + z_t - z_h`` when ``from_example`` is set."""
    cand = np.array(world.kg.analogy_entities)
    z = world.latents[cand]
    hits = 0
    for x in instances:
        shift = world.latents[x.e_t] - world.latents[x.e_h] if from_example else world.offsets[x.relation]
        target = world.latents[x.e_q] + shift
        best = cand[int(np.argmin(np.linalg.norm(z - target, axis=1)))]
        hits += int(best == x.e_a)
    return hits / max(len(instances), 1)


@dataclass
class TransferSplit:
    source: frozenset[int]
    target: frozenset[int]


def split_transfer(
    dataset: AnalogyDataset, relations: list[int], target_fraction: float, seed: int
) -> tuple[AnalogyDataset, AnalogyDataset, TransferSplit]:
    """Partition analogy relations into source/target and route instances.

    Source instances keep their split in the returned training dataset; every
    target instance goes to the ``test`` split of the second dataset.
    """
    rels = sorted(set(relations))
    if len(rels) < 2:
        raise ValueError("need at least two analogy relations for a transfer split")
    if not 0.0 < target_fraction < 1.0:
        raise ValueError("target_fraction must lie in (0, 1)")
    n_target = int(round(target_fraction * len(rels)))
    if n_target == 0 or n_target == len(rels):
        raise ValueError(f"target_fraction={target_fraction} leaves one side empty for {len(rels)} relations")
    perm = make_rng(seed, 21).permutation(len(rels))
    target = frozenset(rels[i] for i in perm[:n_target])
    source = frozenset(rels) - target
    train = AnalogyDataset(
        [x for x in dataset.train if x.relation in source],
        [x for x in dataset.dev if x.relation in source],
        [x for x in dataset.test if x.relation in source],
    )
    test = AnalogyDataset([], [], [x for x in dataset.all_instances() if x.relation in target])
    return train, test, TransferSplit(source, target)


def setting_counts(instances: list[AnalogyInstance]) -> Counter:
    return Counter(x.setting for x in instances)

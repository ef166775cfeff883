"""KG embedding backbones (TransE, ComplEx, ANALOGY) with multimodal fusion.

Scores are "higher is more plausible". ComplEx vectors of real dimension ``d``
hold ``d/2`` complex numbers as ``[real | imag]``. An ANALOGY relation is a
block-diagonal matrix: ``m`` leading scalar blocks followed by 2x2 blocks
``[[a, -b], [b, a]]`` on consecutive dimension pairs, so any two relation
matrices commute.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._rng import make_rng
from .fmat import read_feature_matrix, write_feature_matrix
from .graph import KnowledgeGraph, Triple

log = logging.getLogger(__name__)


class Backbone(str, enum.Enum):
    TRANSE = "transe"
    COMPLEX = "complex"
    ANALOGY = "analogy"


class FusionMode(str, enum.Enum):
    STRUCTURE_ONLY = "structure"
    DUAL_IKRL = "ikrl"
    AUTOENCODER_TRANSAE = "transae"
    GATED_RSME = "rsme"


class CorruptMode(str, enum.Enum):
    HEAD = "head"
    TAIL = "tail"
    BOTH = "both"


class KgeError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# scoring functions (numpy / torch agnostic where possible)


def _check_dims(*xs):
    shapes = {np.shape(x)[-1] for x in xs}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {[np.shape(x) for x in xs]}")


def score_transe(h, r, t) -> float:
    _check_dims(h, r, t)
    return -float(np.linalg.norm(np.asarray(h, float) + np.asarray(r, float) - np.asarray(t, float)))


def score_complex(h, r, t) -> float:
    """``Re(sum_k h_k r_k conj(t_k))`` for complex vectors."""
    _check_dims(h, r, t)
    return float(np.real(np.sum(np.asarray(h) * np.asarray(r) * np.conj(np.asarray(t)))))


def analogy_matrix(params, scalar_blocks: int = 0) -> np.ndarray:
    """Dense block-diagonal relation matrix from a length-``d`` parameter vector.

    ``params[:m]`` are scalar blocks; the remaining ``d - m`` entries hold the
    2x2 blocks as ``[a_1..a_k, b_1..b_k]``.
    """
    p = np.asarray(params, dtype=np.float64)
    d, m = p.shape[-1], scalar_blocks
    if (d - m) % 2:
        raise ValueError(f"d - scalar_blocks must be even, got d={d}, m={m}")
    k = (d - m) // 2
    B = np.zeros((d, d))
    B[np.arange(m), np.arange(m)] = p[:m]
    a, b = p[m : m + k], p[m + k :]
    i = m + 2 * np.arange(k)
    B[i, i] = a
    B[i + 1, i + 1] = a
    B[i, i + 1] = -b
    B[i + 1, i] = b
    return B


def compose_analogy(p, q, scalar_blocks: int = 0) -> np.ndarray:
    """Parameters of ``analogy_matrix(p) @ analogy_matrix(q)``.

    Blockwise: scalars multiply, and 2x2 blocks compose like complex numbers
    ``(a1 + i b1)(a2 + i b2)``. Every formula is symmetric in ``p``/``q`` using
    only commutative float ops, so ``compose(p, q) == compose(q, p)`` bit for bit.
    """
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    m = scalar_blocks
    k = (p.shape[-1] - m) // 2
    a1, b1 = p[m : m + k], p[m + k :]
    a2, b2 = q[m : m + k], q[m + k :]
    return np.concatenate([p[:m] * q[:m], a1 * a2 - b1 * b2, a1 * b2 + b1 * a2])


def check_analogy_matrix(B, scalar_blocks: int = 0) -> None:
    B = np.asarray(B)
    d, m = B.shape[0], scalar_blocks
    if B.shape != (d, d) or (d - m) % 2:
        raise ValueError(f"malformed ANALOGY matrix shape {B.shape} for {m} scalar blocks")
    mask = np.zeros_like(B, dtype=bool)
    mask[np.arange(m), np.arange(m)] = True
    for i in range(m, d, 2):
        mask[i : i + 2, i : i + 2] = True
        blk = B[i : i + 2, i : i + 2]
        if blk[0, 0] != blk[1, 1] or blk[0, 1] != -blk[1, 0]:
            raise ValueError(f"malformed 2x2 block at dims {i}:{i + 2}: {blk.tolist()}")
    if np.any(B[~mask] != 0):
        raise ValueError("non-zero entry outside the block diagonal")


def score_analogy(h, B_r, t, scalar_blocks: int = 0) -> float:
    check_analogy_matrix(B_r, scalar_blocks)
    _check_dims(h, B_r, t)
    return float(np.asarray(h, float) @ np.asarray(B_r, float) @ np.asarray(t, float))


# torch batched versions; inputs (..., d)


def _transe(h, r, t):
    return -torch.linalg.vector_norm(h + r - t, dim=-1)


def _complex(h, r, t):
    k = h.shape[-1] // 2
    hr, hi = h[..., :k], h[..., k:]
    rr, ri = r[..., :k], r[..., k:]
    tr, ti = t[..., :k], t[..., k:]
    # Re(h * r * conj(t))
    return ((hr * rr - hi * ri) * tr + (hr * ri + hi * rr) * ti).sum(-1)


def _analogy(h, r, t, m: int):
    k = (h.shape[-1] - m) // 2
    s = (h[..., :m] * r[..., :m] * t[..., :m]).sum(-1)
    a, b = r[..., m : m + k], r[..., m + k :]
    h1, h2 = h[..., m::2], h[..., m + 1 :: 2]
    t1, t2 = t[..., m::2], t[..., m + 1 :: 2]
    return s + (a * (h1 * t1 + h2 * t2) + b * (h2 * t1 - h1 * t2)).sum(-1)


# --------------------------------------------------------------------------
# model


@dataclass
class KgeTrainConfig:
    epochs: int = 300
    learning_rate: float = 5e-2
    batch_size: int = 1000
    negatives_per_positive: int = 1
    margin: float = 1.0
    optimizer: str = "adagrad"
    dim: int = 32
    scalar_blocks: int = 0
    recon_weight: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.negatives_per_positive < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and negatives_per_positive >= 1 required")
        if self.learning_rate < 0 or self.margin <= 0:
            raise ValueError("learning_rate must be >= 0 and margin > 0")
        if self.optimizer not in ("sgd", "adagrad"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dim < 2 or self.dim % 2:
            raise ValueError("dim must be an even integer >= 2")


class KgeModel(nn.Module):
    def __init__(
        self,
        kg: KnowledgeGraph,
        backbone: Backbone | str = Backbone.TRANSE,
        fusion: FusionMode | str = FusionMode.STRUCTURE_ONLY,
        dim: int = 32,
        scalar_blocks: int = 0,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.backbone = Backbone(backbone)
        self.fusion = FusionMode(fusion)
        self.dim = dim
        self.scalar_blocks = scalar_blocks if self.backbone is Backbone.ANALOGY else 0
        self.seed = seed
        self.epoch = 0
        if (dim - self.scalar_blocks) % 2:
            raise ValueError("dim - scalar_blocks must be even")
        ne, nr = kg.num_entities, kg.num_relations
        rng = make_rng(seed, 31)
        bound = 6.0 / math.sqrt(dim)

        def uniform(*shape):
            return torch.tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype)

        ent = uniform(ne, dim)
        if self.backbone is Backbone.TRANSE:
            ent = ent / torch.linalg.vector_norm(ent, dim=1, keepdim=True)
        self.entity_emb = nn.Parameter(ent)
        self.relation_emb = nn.Parameter(uniform(nr, dim))

        # modality buffers: mean image and text per entity, with presence masks
        img, img_mask, txt, txt_mask = _feature_tables(kg, dtype)
        self.register_buffer("image_feats", img)
        self.register_buffer("image_mask", img_mask)
        self.register_buffer("text_feats", txt)
        self.register_buffer("text_mask", txt_mask)
        dv, dt = img.shape[1], txt.shape[1]
        if self.fusion is not FusionMode.STRUCTURE_ONLY:
            self.missing_image = nn.Parameter(torch.zeros(dv, dtype=dtype))
        if self.fusion in (FusionMode.DUAL_IKRL, FusionMode.GATED_RSME):
            self.image_proj = nn.Parameter(torch.tensor(rng.normal(0, 1 / math.sqrt(max(dv, 1)), size=(dim, dv)), dtype=dtype))
        if self.fusion is FusionMode.GATED_RSME:
            self.gate_raw = nn.Parameter(torch.zeros(nr, dtype=dtype))
        if self.fusion is FusionMode.AUTOENCODER_TRANSAE:
            self.missing_text = nn.Parameter(torch.zeros(dt, dtype=dtype))
            din = dt + dv
            self.enc_w = nn.Parameter(torch.tensor(rng.normal(0, 1 / math.sqrt(din), size=(dim, din)), dtype=dtype))
            self.enc_b = nn.Parameter(torch.zeros(dim, dtype=dtype))
            self.dec_w = nn.Parameter(torch.tensor(rng.normal(0, 1 / math.sqrt(dim), size=(din, dim)), dtype=dtype))
            self.dec_b = nn.Parameter(torch.zeros(din, dtype=dtype))

    # ---- fusion

    def _image(self, e):
        m = self.image_mask[e].unsqueeze(-1)
        return m * self.image_feats[e] + (1 - m) * self.missing_image

    def _ae_input(self, e):
        mt = self.text_mask[e].unsqueeze(-1)
        txt = mt * self.text_feats[e] + (1 - mt) * self.missing_text
        return torch.cat([txt, self._image(e)], dim=-1)

    def views(self, e: torch.Tensor, r: torch.Tensor | None = None) -> torch.Tensor:
        """Entity representations with a view axis: ``(..., V, d)``.

        DualIkrl has two views (structural, image); the others have one. The
        RSME gate is per relation, so ``r`` is required in that mode.
        """
        if self.fusion is FusionMode.STRUCTURE_ONLY:
            return self.entity_emb[e].unsqueeze(-2)
        if self.fusion is FusionMode.DUAL_IKRL:
            img = self._image(e) @ self.image_proj.T
            return torch.stack([self.entity_emb[e], img], dim=-2)
        if self.fusion is FusionMode.AUTOENCODER_TRANSAE:
            return (self._ae_input(e) @ self.enc_w.T + self.enc_b).unsqueeze(-2)
        if r is None:
            raise ValueError("GatedRsme fusion needs the relation to apply its gate")
        g = torch.sigmoid(self.gate_raw[r]).unsqueeze(-1)
        return (self.entity_emb[e] + g * (self._image(e) @ self.image_proj.T)).unsqueeze(-2)

    def reconstruction_loss(self, e: torch.Tensor) -> torch.Tensor:
        x = self._ae_input(e)
        hid = x @ self.enc_w.T + self.enc_b
        return ((hid @ self.dec_w.T + self.dec_b - x) ** 2).mean()

    def _raw(self, h, r, t):
        if self.backbone is Backbone.TRANSE:
            return _transe(h, r, t)
        if self.backbone is Backbone.COMPLEX:
            return _complex(h, r, t)
        return _analogy(h, r, t, self.scalar_blocks)

    def score(self, h: torch.Tensor, r: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Batched triple scores; ids broadcast against each other."""
        h, r, t = torch.broadcast_tensors(h, r, t)
        hv = self.views(h, r)  # (..., V, d)
        tv = self.views(t, r)
        rv = self.relation_emb[r].unsqueeze(-2).unsqueeze(-2)
        # all view pairs: (..., V, V)
        s = self._raw(hv.unsqueeze(-2), rv, tv.unsqueeze(-3))
        return s.mean(dim=(-1, -2))

    def relation_matrix(self, r: int) -> np.ndarray:
        if self.backbone is not Backbone.ANALOGY:
            raise ValueError("relation matrices exist only for the ANALOGY backbone")
        return analogy_matrix(self.relation_emb[r].detach().cpu().numpy(), self.scalar_blocks)

    @torch.no_grad()
    def normalize_entities(self) -> None:
        # only rows that drifted off the unit sphere; keeps lr=0 a no-op
        if self.backbone is Backbone.TRANSE:
            w = self.entity_emb
            n = torch.linalg.vector_norm(w, dim=1, keepdim=True)
            off = (n - 1).abs() > 1e-6
            w.copy_(torch.where(off, w / n, w))


def _feature_tables(kg: KnowledgeGraph, dtype):
    ne = kg.num_entities
    dv, dt = max(kg.image_dim, 1), max(kg.text_dim, 1)
    img = np.zeros((ne, dv))
    txt = np.zeros((ne, dt))
    img_mask = np.zeros(ne)
    txt_mask = np.zeros(ne)
    for e in range(ne):
        f = kg.features.get(e)
        if f is None:
            continue
        mi = f.mean_image()
        if mi is not None:
            img[e], img_mask[e] = mi, 1.0
        if f.text is not None:
            txt[e], txt_mask[e] = f.text, 1.0
    t = lambda a: torch.tensor(a, dtype=dtype)  # noqa: E731
    return t(img), t(img_mask), t(txt), t(txt_mask)


def fuse_entity(model: KgeModel, kg: KnowledgeGraph, e: int, relation: int | None = None) -> np.ndarray:
    """Fused representation of one entity: ``(d,)``, or ``(2, d)`` for DualIkrl."""
    if not 0 <= e < kg.num_entities:
        raise KeyError(f"unknown entity {e}")
    if model.fusion is not FusionMode.STRUCTURE_ONLY and not hasattr(model, "missing_image"):
        raise KgeError("fusion needs a missing-modality vector")
    with torch.no_grad():
        r = None if relation is None else torch.tensor(relation)
        v = model.views(torch.tensor(e), r).cpu().numpy()
    return v[0] if v.shape[0] == 1 else v


# --------------------------------------------------------------------------
# negative sampling and losses


def negative_sample(
    triple: Triple, kg: KnowledgeGraph, count: int, mode: CorruptMode | str = CorruptMode.BOTH, seed: int = 0
) -> list[Triple]:
    """``count`` distinct corrupted triples, none of which is a true triple in ``kg``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    mode = CorruptMode(mode)
    h, r, t = triple
    pool = []
    if mode in (CorruptMode.HEAD, CorruptMode.BOTH):
        pool += [Triple(e, r, t) for e in range(kg.num_entities)]
    if mode in (CorruptMode.TAIL, CorruptMode.BOTH):
        pool += [Triple(h, r, e) for e in range(kg.num_entities)]
    known = kg.triple_set
    pool = [x for x in dict.fromkeys(pool) if x not in known and x != triple]
    if len(pool) < count:
        raise KgeError(f"only {len(pool)} valid negatives for {triple}, {count} requested")
    pick = make_rng(seed, 41, h, r, t).choice(len(pool), size=count, replace=False)
    return [pool[i] for i in sorted(pick)]


def _batch_negatives(pos: np.ndarray, n_ent: int, k: int, known: frozenset, rng: np.random.Generator) -> np.ndarray:
    """Filtered corruption for a batch: ``(B, k, 3)``; head or tail chosen per draw."""
    B = pos.shape[0]
    neg = np.repeat(pos[:, None, :], k, axis=1)
    todo = np.ones((B, k), dtype=bool)
    for _ in range(100):
        idx = np.argwhere(todo)
        if idx.size == 0:
            return neg
        side = np.where(rng.random(len(idx)) < 0.5, 0, 2)
        ents = rng.integers(0, n_ent, size=len(idx))
        for (b, j), s, e in zip(idx, side, ents):
            cand = pos[b].copy()
            cand[s] = e
            if (int(cand[0]), int(cand[1]), int(cand[2])) not in known:
                neg[b, j] = cand
                todo[b, j] = False
    raise KgeError("could not draw filtered negatives; graph too dense")


def margin_loss(pos_score: torch.Tensor, neg_score: torch.Tensor, margin: float) -> torch.Tensor:
    """``max(0, margin - s(pos) + s(neg))`` averaged; ``neg_score`` is ``(B, k)``."""
    return F.relu(margin - pos_score.unsqueeze(-1) + neg_score).mean()


def logistic_loss(pos_score: torch.Tensor, neg_score: torch.Tensor) -> torch.Tensor:
    """``log(1 + exp(-y s))`` with y=+1 for positives and -1 for negatives."""
    return torch.cat([F.softplus(-pos_score).reshape(-1), F.softplus(neg_score).reshape(-1)]).mean()


def kge_loss(model: KgeModel, pos: torch.Tensor, neg: torch.Tensor, cfg: KgeTrainConfig) -> torch.Tensor:
    ps = model.score(pos[:, 0], pos[:, 1], pos[:, 2])
    ns = model.score(neg[..., 0], neg[..., 1], neg[..., 2])
    if model.backbone is Backbone.COMPLEX:
        loss = logistic_loss(ps, ns)
    else:
        loss = margin_loss(ps, ns, cfg.margin)
    if model.fusion is FusionMode.AUTOENCODER_TRANSAE:
        ents = torch.cat([pos[:, 0], pos[:, 2], neg[..., 0].reshape(-1), neg[..., 2].reshape(-1)]).unique()
        loss = loss + cfg.recon_weight * model.reconstruction_loss(ents)
    return loss


def train_kge(
    kg: KnowledgeGraph,
    cfg: KgeTrainConfig,
    backbone: Backbone | str = Backbone.TRANSE,
    fusion: FusionMode | str = FusionMode.STRUCTURE_ONLY,
    history: list | None = None,
    model: KgeModel | None = None,
) -> KgeModel:
    """Train on all triples of ``kg``; per-epoch mean losses are appended to ``history``."""
    cfg.validate()
    if model is None:
        model = KgeModel(kg, backbone, fusion, cfg.dim, cfg.scalar_blocks, cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=cfg.learning_rate)
    else:
        opt = torch.optim.Adagrad(params, lr=cfg.learning_rate)
    triples = np.array(kg.triples, dtype=np.int64).reshape(-1, 3)
    known = kg.triple_set
    rng = make_rng(cfg.seed, 42)
    history = history if history is not None else []
    for epoch in range(1, cfg.epochs + 1):
        model.normalize_entities()
        order = rng.permutation(len(triples))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            pos_np = triples[order[start : start + cfg.batch_size]]
            neg_np = _batch_negatives(pos_np, kg.num_entities, cfg.negatives_per_positive, known, rng)
            pos, neg = torch.from_numpy(pos_np), torch.from_numpy(neg_np)
            loss = kge_loss(model, pos, neg, cfg)
            if not torch.isfinite(loss):
                raise KgeError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(pos_np)
            count += len(pos_np)
        model.epoch = epoch
        history.append(total / max(count, 1))
        if epoch == 1 or epoch % 50 == 0:
            log.info("kge epoch %d loss %.5f", epoch, history[-1])
    return model


# --------------------------------------------------------------------------
# checkpoints


def save_kge(model: KgeModel, out_dir: str | os.PathLike) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy()
        write_feature_matrix(arr.reshape(1, -1) if arr.ndim < 2 else arr, None, out_dir / f"{name}.fmat")
        names.append([name, list(arr.shape)])
    manifest = {
        "backbone": model.backbone.value,
        "fusion": model.fusion.value,
        "dims": {"dim": model.dim, "scalar_blocks": model.scalar_blocks, "entities": model.entity_emb.shape[0],
                 "relations": model.relation_emb.shape[0]},
        "seed": model.seed,
        "epoch": model.epoch,
        "parameters": names,
    }
    (out_dir / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_kge(ckpt_dir: str | os.PathLike, kg: KnowledgeGraph) -> KgeModel:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "model.json").read_text(encoding="utf-8"))
    dims = manifest["dims"]
    if dims["entities"] != kg.num_entities or dims["relations"] != kg.num_relations:
        raise KgeError("checkpoint does not match the graph's entity/relation counts")
    model = KgeModel(kg, manifest["backbone"], manifest["fusion"], dims["dim"], dims["scalar_blocks"], manifest["seed"])
    with torch.no_grad():
        for name, shape in manifest["parameters"]:
            mat, _ = read_feature_matrix(ckpt_dir / f"{name}.fmat", with_index=False)
            getattr(model, name).copy_(torch.from_numpy(mat.reshape(shape)))
    model.epoch = manifest["epoch"]
    return model


def config_dict(cfg: KgeTrainConfig) -> dict:
    return asdict(cfg)

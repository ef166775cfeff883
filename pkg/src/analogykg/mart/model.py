"""Small post-LN transformer with segment-gated self-attention.

Per head, the scaled scores ``P = Q K^T / sqrt(d/H)`` are split into blocks by
the example/question segments. The example->question block is multiplied by
``g_EA`` and the question->example block by ``g_AE``; both gates are
``sigmoid`` of an unconstrained per-(layer, head) parameter. With
``gate_mode="post_softmax"`` the same gate matrix multiplies the attention
probabilities instead (no renormalisation).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .prompts import EXAMPLE, QUESTION, PromptSequence, Vocabulary, check_segments

PAD_SEGMENT = -1


@dataclass
class MartConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 4
    max_len: int = 128
    image_dim: int = 32
    gate_mode: str = "pre_softmax"
    init_std: float = 0.02
    dropout: float = 0.0  # embeddings, attention probabilities and sub-layer outputs; off in eval mode

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.gate_mode not in ("pre_softmax", "post_softmax"):
            raise ValueError(f"unknown gate_mode {self.gate_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def gate_matrix(segments: torch.Tensor, g_ea: torch.Tensor, g_ae: torch.Tensor) -> torch.Tensor:
    """``G`` broadcast to ``(B, H, S, S)``: 1 on intra-segment blocks, ``g_EA`` on
    example-query/question-key entries, ``g_AE`` on question-query/example-key."""
    q = segments.unsqueeze(-1)
    k = segments.unsqueeze(-2)
    ea = ((q == EXAMPLE) & (k == QUESTION)).unsqueeze(1).to(g_ea.dtype)
    ae = ((q == QUESTION) & (k == EXAMPLE)).unsqueeze(1).to(g_ae.dtype)
    g_ea = g_ea.reshape(1, -1, 1, 1)
    g_ae = g_ae.reshape(1, -1, 1, 1)
    return 1 + (g_ea - 1) * ea + (g_ae - 1) * ae


def gated_attention(
    x: torch.Tensor,
    layer: "MartLayer",
    segments: torch.Tensor,
    g_ea: torch.Tensor | float | None,
    g_ae: torch.Tensor | float | None,
    pad_mask: torch.Tensor | None = None,
    gate_mode: str = "pre_softmax",
) -> torch.Tensor:
    """Attention sub-layer with residual and layer norm.

    ``x`` is ``(B, S, d)`` (or ``(S, d)``); ``segments`` holds EXAMPLE/QUESTION
    labels (PAD_SEGMENT for padding). Passing ``None`` for both gates gives
    plain ungated attention.
    """
    squeeze = x.dim() == 2
    if squeeze:
        check_segments(segments.tolist())
        x, segments = x.unsqueeze(0), segments.unsqueeze(0)
        if pad_mask is not None:
            pad_mask = pad_mask.unsqueeze(0)
    B, S, d = x.shape
    H = layer.heads
    dh = d // H

    def split(t):
        return t.reshape(B, S, H, dh).transpose(1, 2)

    q, k, v = split(layer.wq(x)), split(layer.wk(x)), split(layer.wv(x))
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    gates = None
    if g_ea is not None or g_ae is not None:
        one = torch.ones(H, dtype=x.dtype)
        g_ea = one if g_ea is None else torch.as_tensor(g_ea, dtype=x.dtype).expand(H)
        g_ae = one if g_ae is None else torch.as_tensor(g_ae, dtype=x.dtype).expand(H)
        gates = gate_matrix(segments, g_ea, g_ae)
    if gates is not None and gate_mode == "pre_softmax":
        scores = scores * gates
    if pad_mask is not None:
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
    probs = torch.softmax(scores, dim=-1)
    if gates is not None and gate_mode == "post_softmax":
        probs = probs * gates
    probs = F.dropout(probs, layer.dropout, layer.training)
    ctx = (probs @ v).transpose(1, 2).reshape(B, S, d)
    out = layer.ln1(x + F.dropout(layer.wo(ctx), layer.dropout, layer.training))
    return out.squeeze(0) if squeeze else out


class MartLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.dropout = dropout
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)
        self.ln1 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ffn_mult * dim)
        self.ff2 = nn.Linear(ffn_mult * dim, dim)
        self.ln2 = nn.LayerNorm(dim)

    def forward(self, x, segments, g_ea, g_ae, pad_mask=None, gate_mode="pre_softmax"):
        h = gated_attention(x, self, segments, g_ea, g_ae, pad_mask, gate_mode)
        return self.ln2(h + F.dropout(self.ff2(F.gelu(self.ff1(h))), self.dropout, self.training))


@dataclass
class Batch:
    ids: torch.Tensor  # (B, S)
    segments: torch.Tensor  # (B, S), PAD_SEGMENT on padding
    pad_mask: torch.Tensor  # (B, S) True on padding
    image_entities: torch.Tensor  # (B, S) entity id whose image is added, -1 for none
    mask_pos: torch.Tensor  # (B,)
    labels: torch.Tensor  # (B,), -1 if unknown
    r_example: torch.Tensor  # (B,), -1 if absent
    r_question: torch.Tensor
    head_pos: torch.Tensor
    query_pos: torch.Tensor

    def __len__(self) -> int:
        return self.ids.shape[0]


def collate(prompts: list[PromptSequence], pad_id: int = 0) -> Batch:
    B = len(prompts)
    S = max(len(p) for p in prompts)
    ids = torch.full((B, S), pad_id, dtype=torch.long)
    seg = torch.full((B, S), PAD_SEGMENT, dtype=torch.long)
    img = torch.full((B, S), -1, dtype=torch.long)
    for i, p in enumerate(prompts):
        n = len(p)
        ids[i, :n] = torch.tensor(p.token_ids)
        seg[i, :n] = torch.tensor(p.segments)
        for pos, e in p.image_slots:
            img[i, pos] = e

    def vec(attr):
        return torch.tensor([-1 if getattr(p, attr) is None else getattr(p, attr) for p in prompts], dtype=torch.long)

    return Batch(ids, seg, seg == PAD_SEGMENT, img, vec("mask_position"), vec("label"), vec("r_example"),
                 vec("r_question"), vec("head_position"), vec("query_position"))


class MartModel(nn.Module):
    def __init__(self, vocab: Vocabulary, image_table: np.ndarray, cfg: MartConfig | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        """``image_table`` is ``(N_e, d_v)`` mean image features with NaN rows for
        entities without images; those fall back to the learned missing vector."""
        super().__init__()
        cfg = cfg or MartConfig(image_dim=image_table.shape[1])
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.vocab_size = len(vocab)
        self.vocab_digest = vocab.digest()
        d = cfg.dim
        self.tok_emb = nn.Embedding(len(vocab), d)
        self.pos_emb = nn.Embedding(cfg.max_len, d)
        self.seg_emb = nn.Embedding(2, d)
        self.emb_ln = nn.LayerNorm(d)
        self.image_proj = nn.Linear(cfg.image_dim, d)
        self.missing_image = nn.Parameter(torch.zeros(cfg.image_dim))
        self.layers = nn.ModuleList(MartLayer(d, cfg.heads, cfg.ffn_mult, cfg.dropout) for _ in range(cfg.layers))
        self.gate_raw_ea = nn.Parameter(torch.zeros(cfg.layers, cfg.heads))
        self.gate_raw_ae = nn.Parameter(torch.zeros(cfg.layers, cfg.heads))
        self.mlm_dense = nn.Linear(d, d)
        self.mlm_ln = nn.LayerNorm(d)
        self.mlm_bias = nn.Parameter(torch.zeros(len(vocab)))
        present = ~np.isnan(image_table).any(axis=1)
        self.register_buffer("image_table", torch.tensor(np.nan_to_num(image_table), dtype=dtype))
        self.register_buffer("image_present", torch.tensor(present))
        self.gates_enabled = True
        self._init(seed)
        self.to(dtype)

    def _init(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        std = self.cfg.init_std
        for name, p in self.named_parameters():
            parts = name.split(".")
            owner = parts[-2] if len(parts) > 1 else ""
            if name.startswith("gate_raw") or name in ("missing_image", "mlm_bias"):
                nn.init.zeros_(p)
            elif "ln" in owner:
                nn.init.ones_(p) if name.endswith("weight") else nn.init.zeros_(p)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
            else:
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=g) * std)

    # ---- gates

    def gates(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Effective ``(g_EA, g_AE)``, each ``(L, H)``; all ones when gates are disabled."""
        if not self.gates_enabled:
            return torch.ones_like(self.gate_raw_ea), torch.ones_like(self.gate_raw_ae)
        return torch.sigmoid(self.gate_raw_ea), torch.sigmoid(self.gate_raw_ae)

    def set_gates_enabled(self, enabled: bool) -> None:
        # disabled == gates frozen at exactly 1
        self.gates_enabled = enabled
        self.gate_raw_ea.requires_grad_(enabled)
        self.gate_raw_ae.requires_grad_(enabled)

    # ---- forward

    def embed(self, batch: Batch) -> torch.Tensor:
        B, S = batch.ids.shape
        x = self.tok_emb(batch.ids) + self.pos_emb(torch.arange(S)).unsqueeze(0)
        x = x + self.seg_emb(batch.segments.clamp(min=0))
        has_img = batch.image_entities >= 0
        if bool(has_img.any()):
            ents = batch.image_entities.clamp(min=0)
            present = self.image_present[ents].unsqueeze(-1)
            feats = torch.where(present, self.image_table[ents], self.missing_image)
            x = x + has_img.unsqueeze(-1) * self.image_proj(feats)
        return F.dropout(self.emb_ln(x), self.cfg.dropout, self.training)

    def encode(self, batch: Batch) -> torch.Tensor:
        x = self.embed(batch)
        g_ea, g_ae = self.gates()
        for i, layer in enumerate(self.layers):
            if self.gates_enabled:
                x = layer(x, batch.segments, g_ea[i], g_ae[i], batch.pad_mask, self.cfg.gate_mode)
            else:
                x = layer(x, batch.segments, None, None, batch.pad_mask, self.cfg.gate_mode)
        return x

    def mlm_transform(self, h: torch.Tensor) -> torch.Tensor:
        return self.mlm_ln(F.gelu(self.mlm_dense(h)))

    def logits(self, t: torch.Tensor, token_slice: slice | None = None) -> torch.Tensor:
        """Tied-weight MLM logits, optionally restricted to a contiguous token slice."""
        if token_slice is None:
            return t @ self.tok_emb.weight.T + self.mlm_bias
        return t @ self.tok_emb.weight[token_slice].T + self.mlm_bias[token_slice]

    def forward(self, batch: Batch, token_slice: slice | None = None) -> dict[str, torch.Tensor]:
        hidden = self.encode(batch)
        rows = torch.arange(len(batch))

        def at(pos):
            return hidden[rows, pos.clamp(min=0)]

        mask_t = self.mlm_transform(at(batch.mask_pos))
        out = {
            "hidden": hidden,
            "logits": self.logits(mask_t, token_slice),
            "r_question_hidden": at(batch.r_question),
            "h_query": at(batch.query_pos),
        }
        out["hR_question"] = self.mlm_transform(at(batch.r_question))
        if bool((batch.r_example >= 0).all()):
            out["hR_example"] = self.mlm_transform(at(batch.r_example))
            out["h_head"] = at(batch.head_pos)
        return out

    def manifest(self) -> dict:
        return {"config": asdict(self.cfg), "vocab_size": self.vocab_size, "vocab_hash": self.vocab_digest,
                "seed": self.seed, "gates_enabled": self.gates_enabled}


def image_table(kg, image_dim: int | None = None) -> np.ndarray:
    dv = image_dim or max(kg.image_dim, 1)
    table = np.full((kg.num_entities, dv), np.nan)
    for e in range(kg.num_entities):
        m = kg.features[e].mean_image()
        if m is not None:
            table[e] = m
    return table


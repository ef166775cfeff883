"""Token vocabulary and prompt templates for the end-to-end model.

Analogy prompt (blended setting)::

    [CLS] e_h [R] T_t e_t [SEP] || e_q [R] [MASK] [SEP]

The left run is the example segment, the right run the question segment.
Image features are not tokens: an image slot adds the projected feature to
the embedding at its entity's position (I_h at e_h, I_q at e_q, ...).
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .._rng import make_rng
from ..graph import AnalogyInstance, KnowledgeGraph, TaskSetting, Triple

PAD, CLS, SEP, MASK, REL = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[R]"
SPECIALS = (PAD, CLS, SEP, MASK, REL)

EXAMPLE, QUESTION = 0, 1


class MaskTarget(str, enum.Enum):
    TAIL = "tail"
    RELATION = "relation"


class PromptError(ValueError):
    pass


class Vocabulary:
    """Specials, then relation tokens, then entity tokens (analogy entities first,
    so the answer candidates form one contiguous slice), then description words."""

    def __init__(self, kg: KnowledgeGraph, max_desc_tokens: int = 8):
        self.tokens: list[str] = list(SPECIALS)
        self.relation_offset = len(self.tokens)
        self.tokens += [f"<rel:{k}>" for k in kg.relation_keys]
        self.entity_offset = len(self.tokens)
        analogy = sorted(kg.analogy_entities)
        rest = sorted(set(range(kg.num_entities)) - set(analogy))
        self.entity_order = analogy + rest
        self.tokens += [f"<ent:{kg.entity_keys[e]}>" for e in self.entity_order]
        self._entity_token = np.empty(kg.num_entities, dtype=np.int64)
        self._entity_token[self.entity_order] = self.entity_offset + np.arange(kg.num_entities)
        self.num_analogy = len(analogy)
        self.num_entities = kg.num_entities
        self.num_relations = kg.num_relations

        words = sorted({w for e in kg.entities for w in e.description.split()})
        self.word_offset = len(self.tokens)
        self.word_id = {w: self.word_offset + i for i, w in enumerate(words)}
        self.tokens += words
        self.descriptions = {
            e.id: [self.word_id[w] for w in e.description.split()[:max_desc_tokens]] for e in kg.entities
        }
        self.max_desc_tokens = max_desc_tokens
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def special(self, name: str) -> int:
        return self.index[name]

    def entity_token(self, e: int) -> int:
        return int(self._entity_token[e])

    def token_entity(self, tok: int) -> int:
        return self.entity_order[tok - self.entity_offset]

    def relation_token(self, r: int) -> int:
        return self.relation_offset + r

    @property
    def relation_slice(self) -> slice:
        return slice(self.relation_offset, self.relation_offset + self.num_relations)

    @property
    def entity_slice(self) -> slice:
        return slice(self.entity_offset, self.entity_offset + self.num_entities)

    @property
    def analogy_slice(self) -> slice:
        return slice(self.entity_offset, self.entity_offset + self.num_analogy)

    @property
    def analogy_entities(self) -> list[int]:
        return self.entity_order[: self.num_analogy]

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.tokens).encode("utf-8")).hexdigest()


@dataclass
class PromptSequence:
    token_ids: list[int]
    segments: list[int]
    image_slots: list[tuple[int, int]]  # (position, entity whose mean image is added)
    mask_position: int
    setting: TaskSetting | None = None
    label: int | None = None  # gold token id at the mask
    r_example: int | None = None  # position of [R] in the example segment
    r_question: int | None = None
    head_position: int | None = None  # e_h token position
    query_position: int | None = None  # e_q token position
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.token_ids)

    def validate(self) -> None:
        if len(self.segments) != len(self.token_ids):
            raise PromptError("segment labels and tokens differ in length")
        check_segments(self.segments)


def check_segments(segments) -> None:
    """Example run then question run (either may be empty), nothing else."""
    seg = list(segments)
    if any(s not in (EXAMPLE, QUESTION) for s in seg):
        raise PromptError(f"unknown segment label in {seg}")
    if any(a == QUESTION and b == EXAMPLE for a, b in zip(seg, seg[1:])):
        raise PromptError("segments must form an example run followed by a question run")


def build_analogy_prompt(
    instance: AnalogyInstance, kg: KnowledgeGraph, vocab: Vocabulary, with_example: bool = True
) -> PromptSequence:
    """Prompt for one analogy instance; reads only the entity slots and setting."""
    e_h, e_t, e_q = instance.e_h, instance.e_t, instance.e_q
    setting = TaskSetting(instance.setting)
    desc = vocab.descriptions
    cls, sep, msk, rel = (vocab.special(s) for s in (CLS, SEP, MASK, REL))
    toks, segs, slots = [], [], []
    pos = {}

    def put(tok, seg, role=None):
        if role:
            pos[role] = len(toks)
        toks.append(tok)
        segs.append(seg)

    if with_example:
        put(cls, EXAMPLE)
        if setting is TaskSetting.SINGLE_TEXT:
            for w in desc[e_h]:
                put(w, EXAMPLE)
        put(vocab.entity_token(e_h), EXAMPLE, "e_h")
        put(rel, EXAMPLE, "r_e")
        if setting is not TaskSetting.SINGLE_IMG:
            for w in desc[e_t]:
                put(w, EXAMPLE)
        put(vocab.entity_token(e_t), EXAMPLE, "e_t")
        put(sep, EXAMPLE)
        if setting is not TaskSetting.SINGLE_TEXT:
            slots.append((pos["e_h"], e_h))
        if setting is TaskSetting.SINGLE_IMG:
            slots.append((pos["e_t"], e_t))
    else:
        put(cls, QUESTION)
    if setting is TaskSetting.SINGLE_IMG:
        for w in desc[e_q]:
            put(w, QUESTION)
    put(vocab.entity_token(e_q), QUESTION, "e_q")
    put(rel, QUESTION, "r_q")
    put(msk, QUESTION, "mask")
    put(sep, QUESTION)
    if setting is not TaskSetting.SINGLE_IMG:
        slots.append((pos["e_q"], e_q))

    p = PromptSequence(
        toks,
        segs,
        slots,
        pos["mask"],
        setting,
        label=vocab.entity_token(instance.e_a),
        r_example=pos.get("r_e"),
        r_question=pos["r_q"],
        head_position=pos.get("e_h"),
        query_position=pos["e_q"],
    )
    p.validate()
    return p


def build_pretrain_prompt(
    triple: Triple, kg: KnowledgeGraph, vocab: Vocabulary, mask_target: MaskTarget | str, seed: int
) -> PromptSequence:
    """``[CLS] e_h r [MASK] [SEP]`` (tail) or ``[CLS] e_h [MASK] e_t [SEP]`` (relation).

    Each visible entity slot is shown either with its image or with its
    description tokens, drawn from ``seed``.
    """
    mask_target = MaskTarget(mask_target)
    h, r, t = triple
    rng = make_rng(seed, 61, h, r, t)
    cls, sep, msk = (vocab.special(s) for s in (CLS, SEP, MASK))
    toks, slots = [cls], []

    def entity(e):
        if rng.random() < 0.5:
            slots.append((len(toks), e))
        else:
            toks.extend(vocab.descriptions[e])
        toks.append(vocab.entity_token(e))

    entity(h)
    if mask_target is MaskTarget.TAIL:
        toks.append(vocab.relation_token(r))
        mask_pos = len(toks)
        toks.append(msk)
        label = vocab.entity_token(t)
    else:
        mask_pos = len(toks)
        toks.append(msk)
        entity(t)
        label = vocab.relation_token(r)
    toks.append(sep)
    return PromptSequence(toks, [EXAMPLE] * len(toks), slots, mask_pos, None, label, meta={"target": mask_target.value})

"""Relaxation loss, masked-entity loss and their interpolation.

The relaxation term pulls the two [R] representations together and pushes
the head and query entity representations apart::

    l_rel = 1 - cos(hR_example, hR_question) + max(0, cos(h_head, h_query))
    total = lam * l_rel + (1 - lam) * l_mem
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

_EPS = 1e-12


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm vector in relaxation loss")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def relaxation_loss(hR_example, hR_question, h_head, h_query) -> float:
    a = [np.asarray(v, dtype=np.float64) for v in (hR_example, hR_question, h_head, h_query)]
    return 1.0 - _cos(a[0], a[1]) + max(0.0, _cos(a[2], a[3]))


def mem_loss(logits, gold: int, candidates) -> float:
    """Cross-entropy of ``gold`` over ``candidates``; ``logits`` align with ``candidates``."""
    candidates = list(candidates)
    if gold not in candidates:
        raise ValueError(f"gold {gold} not among candidates")
    z = np.asarray(logits, dtype=np.float64)
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    return float(lse - z[candidates.index(gold)])


def total_loss(l_rel: float, l_mem: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1]")
    return lam * l_rel + (1 - lam) * l_mem


@dataclass(frozen=True)
class LossBreakdown:
    l_rel: float
    l_mem: float
    lam: float
    total: float

    @classmethod
    def of(cls, l_rel: float, l_mem: float, lam: float) -> LossBreakdown:
        return cls(l_rel, l_mem, lam, total_loss(l_rel, l_mem, lam))


# batched torch versions used in training


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.vector_norm(a, dim=-1).clamp_min(_EPS)
    nb = torch.linalg.vector_norm(b, dim=-1).clamp_min(_EPS)
    return (a * b).sum(-1) / (na * nb)


def relaxation_loss_t(hR_example, hR_question, h_head, h_query) -> torch.Tensor:
    """Per-example relaxation loss, shape ``(B,)``."""
    return 1 - cosine(hR_example, hR_question) + F.relu(cosine(h_head, h_query))


def mem_loss_t(logits: torch.Tensor, gold_index: torch.Tensor) -> torch.Tensor:
    """Per-example cross-entropy over the given logit slice, shape ``(B,)``."""
    return F.cross_entropy(logits, gold_index, reduction="none")

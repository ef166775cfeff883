"""Pre-training on the background graph, analogy fine-tuning, prediction and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .._rng import make_rng, torch_generator
from ..fmat import read_feature_matrix, write_feature_matrix
from ..graph import AnalogyDataset, AnalogyInstance, KnowledgeGraph
from ..metrics import RankingResult, TieRule, mrr
from .losses import mem_loss_t, relaxation_loss_t
from .model import Batch, MartConfig, MartModel, collate, image_table
from .prompts import REL, MaskTarget, Vocabulary, build_analogy_prompt, build_pretrain_prompt

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class MartTrainConfig:
    epochs: int = 40
    learning_rate: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.01
    adam_epsilon: float = 1e-8
    lam: float = 0.43
    mix_ratio: float = 0.5  # share of tail (vs relation) masks in pre-training
    warmup_fraction: float = 0.1  # linear warm-up then linear decay to 0 over all steps
    seed: int = 0
    no_relaxation: bool = False
    no_gates: bool = False
    no_pretrain: bool = False
    no_example: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs >= 0, batch_size >= 1, learning_rate >= 0 required")

    @property
    def effective_lambda(self) -> float:
        # the relaxation term needs an example [R]
        return 0.0 if self.no_relaxation or self.no_example else self.lam


def new_model(kg: KnowledgeGraph, vocab: Vocabulary, cfg: MartConfig | None = None, seed: int = 0,
              dtype: torch.dtype = torch.float32) -> MartModel:
    table = image_table(kg)
    cfg = cfg or MartConfig(image_dim=table.shape[1])
    return MartModel(vocab, table, cfg, seed=seed, dtype=dtype)


def _optimizer(model: MartModel, cfg: MartTrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.learning_rate, eps=cfg.adam_epsilon, weight_decay=cfg.weight_decay)


def _schedule(opt: torch.optim.Optimizer, cfg: MartTrainConfig, steps_per_epoch: int):
    total = max(cfg.epochs * steps_per_epoch, 1)
    warm = int(cfg.warmup_fraction * total)

    def factor(step: int) -> float:
        if step < warm:
            return (step + 1) / warm
        return max(0.0, (total - step) / max(total - warm, 1))

    return torch.optim.lr_scheduler.LambdaLR(opt, factor)


def _seed_dropout(seed: int, stream: int) -> None:
    # dropout draws from torch's global generator; pin it per training stage
    torch.manual_seed(int(make_rng(seed, stream).integers(2**62)))


def _batches(n: int, size: int, gen: torch.Generator | None):
    order = torch.randperm(n, generator=gen) if gen is not None else torch.arange(n)
    for start in range(0, n, size):
        yield order[start : start + size].tolist()


def _check_vocab(model: MartModel, vocab: Vocabulary) -> None:
    if model.vocab_digest != vocab.digest() or model.vocab_size != len(vocab):
        raise TrainingError("model vocabulary does not match the dataset graph")


# --------------------------------------------------------------------------
# pre-training


def pretrain_prompts(kg: KnowledgeGraph, vocab: Vocabulary, mix_ratio: float, seed: int) -> list:
    rng = make_rng(seed, 71)
    out = []
    for t in kg.triples:
        target = MaskTarget.TAIL if rng.random() < mix_ratio else MaskTarget.RELATION
        out.append(build_pretrain_prompt(t, kg, vocab, target, int(rng.integers(2**62))))
    return out


def _pretrain_loss(model: MartModel, vocab: Vocabulary, batch: Batch, is_tail: torch.Tensor) -> torch.Tensor:
    out = model(batch)
    logits = out["logits"]
    ent, rel = vocab.entity_slice, vocab.relation_slice
    loss = logits.new_zeros(())
    if bool(is_tail.any()):
        lg = logits[is_tail, ent]
        loss = loss + mem_loss_t(lg, batch.labels[is_tail] - ent.start).sum()
    if bool((~is_tail).any()):
        lg = logits[~is_tail, rel]
        loss = loss + mem_loss_t(lg, batch.labels[~is_tail] - rel.start).sum()
    return loss / len(batch)


@torch.no_grad()
def probe_entity_mrr(model: MartModel, kg: KnowledgeGraph, vocab: Vocabulary, seed: int = 0) -> float:
    """Tail-prediction MRR over all entities on the training triples themselves."""
    model.eval()
    prompts = [build_pretrain_prompt(t, kg, vocab, MaskTarget.TAIL, seed) for t in kg.triples]
    ranks = []
    for idx in _batches(len(prompts), 256, None):
        b = collate([prompts[i] for i in idx])
        logits = model(b, vocab.entity_slice)["logits"].double()
        gold = logits.gather(1, (b.labels - vocab.entity_offset).unsqueeze(1))
        greater = (logits > gold).sum(1).double()
        ties = (logits == gold).sum(1).double() - 1
        ranks.extend((1 + greater + ties / 2).tolist())
    return mrr(ranks)


def pretrain(model: MartModel, kg: KnowledgeGraph, vocab: Vocabulary, cfg: MartTrainConfig,
             history: list | None = None) -> MartModel:
    """Mixed masked-tail / masked-relation prediction over every triple (cross-entropy only)."""
    cfg.validate()
    _check_vocab(model, vocab)
    history = history if history is not None else []
    opt = _optimizer(model, cfg)
    sched = _schedule(opt, cfg, -(-len(kg.triples) // cfg.batch_size))
    gen = torch_generator(cfg.seed, 72)
    _seed_dropout(cfg.seed, 75)
    history.append({"epoch": 0, "loss": None, "probe_mrr": probe_entity_mrr(model, kg, vocab, cfg.seed)})
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        prompts = pretrain_prompts(kg, vocab, cfg.mix_ratio, cfg.seed * 1000003 + epoch)
        tail = torch.tensor([p.meta["target"] == MaskTarget.TAIL.value for p in prompts])
        total, n = 0.0, 0
        for idx in _batches(len(prompts), cfg.batch_size, gen):
            b = collate([prompts[i] for i in idx])
            loss = _pretrain_loss(model, vocab, b, tail[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite pre-training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
            n += len(idx)
        history.append({"epoch": epoch, "loss": total / max(n, 1), "probe_mrr": probe_entity_mrr(model, kg, vocab, cfg.seed)})
        log.debug("pretrain epoch %d loss %.4f probe %.4f", epoch, history[-1]["loss"], history[-1]["probe_mrr"])
    model.eval()
    return model


# --------------------------------------------------------------------------
# fine-tuning


def init_relation_token(model: MartModel, vocab: Vocabulary) -> None:
    """Set the [R] embedding to the mean of the relation-token embeddings."""
    with torch.no_grad():
        w = model.tok_emb.weight
        w[vocab.special(REL)] = w[vocab.relation_slice].mean(0)


def batch_losses(model: MartModel, vocab: Vocabulary, batch: Batch, lam: float) -> dict[str, torch.Tensor]:
    out = model(batch, vocab.analogy_slice)
    l_mem = mem_loss_t(out["logits"], batch.labels - vocab.entity_offset).mean()
    if "hR_example" in out:
        l_rel = relaxation_loss_t(out["hR_example"], out["hR_question"], out["h_head"], out["h_query"]).mean()
    else:
        l_rel = l_mem.new_zeros(())
    return {"l_rel": l_rel, "l_mem": l_mem, "total": lam * l_rel + (1 - lam) * l_mem}


def finetune(model: MartModel, kg: KnowledgeGraph, vocab: Vocabulary, dataset: AnalogyDataset,
             cfg: MartTrainConfig, history: list | None = None) -> MartModel:
    """Optimise the interpolated loss on ``dataset.train``; keeps the best dev-MRR state.

    Ablations: ``no_relaxation`` sets lambda to 0, ``no_gates`` freezes gates at
    1, ``no_example`` drops the example segment. ``no_pretrain`` is honoured by
    the caller, which passes a freshly initialised model.
    """
    cfg.validate()
    _check_vocab(model, vocab)
    history = history if history is not None else []
    model.set_gates_enabled(not cfg.no_gates)
    init_relation_token(model, vocab)
    lam = cfg.effective_lambda
    with_example = not cfg.no_example
    prompts = [build_analogy_prompt(x, kg, vocab, with_example) for x in dataset.train]
    opt = _optimizer(model, cfg)
    sched = _schedule(opt, cfg, -(-len(prompts) // cfg.batch_size))
    gen = torch_generator(cfg.seed, 73)
    _seed_dropout(cfg.seed, 76)
    dev = dataset.dev
    best_state, best_mrr = copy.deepcopy(model.state_dict()), -1.0
    if dev:
        best_mrr = mrr(r.gold_rank for r in rank_instances(model, kg, vocab, dev, with_example))
        history.append({"epoch": 0, "dev_mrr": best_mrr})
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        sums = {"l_rel": 0.0, "l_mem": 0.0, "total": 0.0}
        n = 0
        for idx in _batches(len(prompts), cfg.batch_size, gen):
            b = collate([prompts[i] for i in idx])
            losses = batch_losses(model, vocab, b, lam)
            if not torch.isfinite(losses["total"]):
                raise TrainingError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            sched.step()
            for k in sums:
                sums[k] += losses[k].item() * len(idx)
            n += len(idx)
        entry = {"epoch": epoch, **{k: v / max(n, 1) for k, v in sums.items()}, "lambda": lam}
        if dev:
            entry["dev_mrr"] = mrr(r.gold_rank for r in rank_instances(model, kg, vocab, dev, with_example))
            if entry["dev_mrr"] > best_mrr:
                best_mrr, best_state = entry["dev_mrr"], copy.deepcopy(model.state_dict())
        history.append(entry)
        log.debug("finetune epoch %d %s", epoch, entry)
    if dev:
        model.load_state_dict(best_state)
    model.eval()
    return model


# --------------------------------------------------------------------------
# prediction


@torch.no_grad()
def rank_instances(model: MartModel, kg: KnowledgeGraph, vocab: Vocabulary, instances: list[AnalogyInstance],
                   with_example: bool = True, tie_rule: TieRule | str = TieRule.EXPECTED_RANDOM,
                   batch_size: int = 256) -> list[RankingResult]:
    model.eval()
    cands = np.array(vocab.analogy_entities)
    out = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start : start + batch_size]
        b = collate([build_analogy_prompt(x, kg, vocab, with_example) for x in chunk])
        logits = model(b, vocab.analogy_slice)["logits"].double().numpy()
        for x, lg in zip(chunk, logits):
            out.append(RankingResult.from_scores(cands, lg, x.e_a, tie_rule))
    return out


def predict_answer(model: MartModel, instance: AnalogyInstance, kg: KnowledgeGraph, vocab: Vocabulary,
                   with_example: bool = True, tie_rule: TieRule | str = TieRule.EXPECTED_RANDOM) -> RankingResult:
    """Rank the analogy entities for the [MASK] of one instance."""
    return rank_instances(model, kg, vocab, [instance], with_example, tie_rule)[0]


def mart_predictor(model: MartModel, kg: KnowledgeGraph, vocab: Vocabulary, with_example: bool = True,
                   tie_rule: TieRule | str = TieRule.EXPECTED_RANDOM):
    return lambda inst: predict_answer(model, inst, kg, vocab, with_example, tie_rule)


# --------------------------------------------------------------------------
# checkpoints


def save_mart(model: MartModel, out_dir: str | os.PathLike, lam: float | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = []
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy()
        write_feature_matrix(arr.reshape(1, -1) if arr.ndim < 2 else arr, None, out_dir / f"{name}.fmat")
        params.append([name, list(arr.shape)])
    g_ea, g_ae = model.gates()
    manifest = {
        "dims": asdict(model.cfg),
        "layers": model.cfg.layers,
        "heads": model.cfg.heads,
        "lambda": lam,
        "gates": {"g_ea": g_ea.detach().tolist(), "g_ae": g_ae.detach().tolist(), "enabled": model.gates_enabled},
        "vocab_hash": model.vocab_digest,
        "vocab_size": model.vocab_size,
        "seed": model.seed,
        "parameters": params,
    }
    (out_dir / "mart.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_mart(ckpt_dir: str | os.PathLike, kg: KnowledgeGraph, vocab: Vocabulary) -> MartModel:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "mart.json").read_text(encoding="utf-8"))
    if manifest["vocab_hash"] != vocab.digest():
        raise TrainingError("checkpoint vocabulary does not match the graph")
    model = new_model(kg, vocab, MartConfig(**manifest["dims"]), seed=manifest["seed"])
    with torch.no_grad():
        for name, shape in manifest["parameters"]:
            mat, _ = read_feature_matrix(ckpt_dir / f"{name}.fmat", with_index=False)
            model.get_parameter(name).copy_(torch.from_numpy(mat.reshape(shape)))
    model.set_gates_enabled(manifest["gates"]["enabled"])
    model.eval()
    return model


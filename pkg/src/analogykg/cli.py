"""Command-line entry point: ``analogykg <command> [options]``.

Every command except ``gen`` writes into a fresh run directory
``<out>/<command>-<timestamp>-<seed>`` holding ``config.json`` (the resolved
configuration), ``log.jsonl`` (per-epoch records) and ``metrics.json``.
``<out>/LATEST`` names the most recent run. Failures print an error JSON and
exit non-zero.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .graph import (
    AnalogyDataset,
    GraphError,
    load_dataset,
    load_graph,
    save_dataset,
    save_graph,
    save_instances,
)
from .kge import Backbone, FusionMode, KgeError, KgeTrainConfig, load_kge, save_kge, train_kge
from .metrics import MetricsReport, TieRule
from .pipeline import PipelinePolicy, PolicyMode, pipeline_predictor
from .synth import SynthConfig, generate_synthetic, split_transfer

log = logging.getLogger("analogykg")

COMMANDS = ("gen", "pretrain-kge", "pretrain-mart", "finetune", "eval", "predict", "transfer", "ablate")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    data: str | None = None  # dataset directory written by ``gen``
    checkpoint: str | None = None  # checkpoint dir, or a run dir containing ``checkpoint/``
    model: str = "mart"  # "mart" or "pipeline"
    split: str = "test"
    seed: int = 0
    seeds: list[int] | None = None  # ablate: seeds to average over (default [seed])
    tie_rule: str = TieRule.EXPECTED_RANDOM.value
    filtered: bool = False
    top_k: int = 10  # predict: candidates written per instance
    # synthetic data
    synth: dict = field(default_factory=dict)
    # pipeline
    backbone: str = Backbone.ANALOGY.value
    fusion: str = FusionMode.STRUCTURE_ONLY.value
    kge: dict = field(default_factory=dict)
    policy: str = PolicyMode.ARGMAX.value
    policy_k: int = 1
    # MarT
    mart: dict = field(default_factory=dict)  # architecture overrides
    pretrain_epochs: int = 30
    finetune_epochs: int = 80
    pretrain_lr: float = 1e-3
    learning_rate: float = 1e-3
    batch_size: int = 64
    lam: float = 0.43
    no_relaxation: bool = False
    no_gates: bool = False
    no_pretrain: bool = False
    no_example: bool = False
    # transfer
    transfer_fraction: float = 0.25

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise CliError("invalid_config", f"unknown config keys: {unknown}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            TieRule(self.tie_rule)
            Backbone(self.backbone)
            FusionMode(self.fusion)
            PolicyMode(self.policy)
            _strict(SynthConfig, self.synth)
            _strict(KgeTrainConfig, self.kge)
            from .mart.model import MartConfig

            _strict(MartConfig, self.mart)
        except (ValueError, TypeError) as exc:
            raise CliError("invalid_config", str(exc)) from exc
        if self.model not in ("mart", "pipeline"):
            raise CliError("invalid_config", f"model must be 'mart' or 'pipeline', got {self.model!r}")
        if self.split not in ("train", "dev", "test"):
            raise CliError("invalid_config", f"unknown split {self.split!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise CliError("invalid_config", "lam must lie in [0, 1]")
        if not 0.0 < self.transfer_fraction < 1.0:
            raise CliError("invalid_config", "transfer_fraction must lie in (0, 1)")
        if self.seed < 0 or (self.seeds is not None and (not self.seeds or min(self.seeds) < 0)):
            raise CliError("invalid_config", "seeds must be non-negative")

    def recipe(self) -> ev.MartRecipe:
        return ev.MartRecipe(self.pretrain_epochs, self.finetune_epochs, self.pretrain_lr, self.learning_rate,
                             self.lam, self.batch_size, dict(self.mart))

    def train_flags(self) -> dict:
        return {k: getattr(self, k) for k in ("no_relaxation", "no_gates", "no_pretrain", "no_example")}


def _strict(cls, overrides: dict):
    if not isinstance(overrides, dict):
        raise ValueError(f"{cls.__name__} overrides must be an object")
    names = {f.name for f in fields(cls)}
    bad = sorted(set(overrides) - names)
    if bad:
        raise ValueError(f"unknown {cls.__name__} keys: {bad}")
    obj = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


# --------------------------------------------------------------------------
# run directories


class Run:
    def __init__(self, out: Path, command: str, cfg: RunConfig):
        stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S%f")
        self.dir = out / f"{command}-{stamp}-{cfg.seed}"
        self.dir.mkdir(parents=True, exist_ok=False)
        (out / "LATEST").write_text(self.dir.name + "\n", encoding="utf-8")
        _write_json(self.dir / "config.json", {"command": command, **asdict(cfg)})
        self._log = (self.dir / "log.jsonl").open("a", encoding="utf-8")

    def log(self, record: dict) -> None:
        self._log.write(json.dumps(record, sort_keys=True) + "\n")
        self._log.flush()

    def close(self) -> None:
        self._log.close()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# inputs


def _load_data(cfg: RunConfig):
    if not cfg.data:
        raise CliError("missing_input", "no dataset directory given (--data or config key 'data')")
    path = Path(cfg.data)
    if not path.is_dir():
        raise CliError("missing_input", f"dataset directory {path} does not exist")
    try:
        kg = load_graph(path)
        ds = load_dataset(path, kg)
    except FileNotFoundError as exc:
        raise CliError("missing_input", str(exc)) from exc
    except GraphError as exc:
        raise CliError("invalid_input", str(exc)) from exc
    return kg, ds


def _checkpoint_dir(cfg: RunConfig) -> tuple[Path, str]:
    """Resolve the checkpoint and tell whether it is a MarT or a KGE one."""
    if not cfg.checkpoint:
        raise CliError("missing_checkpoint", "no checkpoint given (--checkpoint or config key 'checkpoint')")
    base = Path(cfg.checkpoint)
    for cand in (base, base / "checkpoint"):
        if (cand / "mart.json").is_file():
            return cand, "mart"
        if (cand / "model.json").is_file():
            return cand, "pipeline"
    raise CliError("missing_checkpoint", f"no checkpoint manifest under {base}")


def _load_model(cfg: RunConfig, kg):
    path, kind = _checkpoint_dir(cfg)
    if kind == "mart":
        from .mart.prompts import Vocabulary
        from .mart.train import TrainingError, load_mart

        vocab = Vocabulary(kg)
        try:
            return kind, load_mart(path, kg, vocab), vocab
        except TrainingError as exc:
            raise CliError("checkpoint_mismatch", str(exc)) from exc
    try:
        return kind, load_kge(path, kg), None
    except KgeError as exc:
        raise CliError("checkpoint_mismatch", str(exc)) from exc


def _predictor(kind, model, kg, vocab, cfg: RunConfig):
    tie = TieRule(cfg.tie_rule)
    if kind == "mart":
        from .mart.train import mart_predictor

        return mart_predictor(model, kg, vocab, not cfg.no_example, tie)
    policy = PipelinePolicy(PolicyMode(cfg.policy), cfg.policy_k)
    return pipeline_predictor(model, kg, policy, tie)


def _evaluate(predictor, ds: AnalogyDataset, cfg: RunConfig) -> MetricsReport:
    instances = ds.split(cfg.split)
    return ev.evaluate_model(predictor, instances, cfg.filtered, cfg.tie_rule, known=ds.all_instances())


# --------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, out: Path) -> dict:
    synth = _strict(SynthConfig, {"seed": cfg.seed, **cfg.synth})
    kg, ds = generate_synthetic(synth)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(kg, out)
    save_dataset(ds, out, kg)
    _write_json(out / "config.json", {"command": "gen", **asdict(cfg), "synth_resolved": asdict(synth)})
    return {"entities": kg.num_entities, "relations": kg.num_relations, "triples": len(kg.triples),
            "train": len(ds.train), "dev": len(ds.dev), "test": len(ds.test)}


def _train_kge(cfg: RunConfig, kg, run: Run):
    kcfg = _strict(KgeTrainConfig, {"seed": cfg.seed, **cfg.kge})
    hist: list[float] = []
    model = train_kge(kg, kcfg, cfg.backbone, cfg.fusion, hist)
    for i, loss in enumerate(hist, 1):
        run.log({"epoch": i, "loss": loss})
    return model


def cmd_pretrain_kge(cfg: RunConfig, run: Run) -> dict:
    kg, ds = _load_data(cfg)
    model = _train_kge(cfg, kg, run)
    save_kge(model, run.dir / "checkpoint")
    return _evaluate(_predictor("pipeline", model, kg, None, cfg), ds, cfg).to_json()


def cmd_pretrain_mart(cfg: RunConfig, run: Run) -> dict:
    from .mart.prompts import Vocabulary
    from .mart.train import save_mart

    kg, _ = _load_data(cfg)
    vocab = Vocabulary(kg)
    hist: list[dict] = []
    model = ev.pretrained_mart(kg, vocab, cfg.recipe(), cfg.seed, hist)
    for rec in hist:
        run.log(rec)
    save_mart(model, run.dir / "checkpoint")
    return {"probe_mrr_initial": hist[0]["probe_mrr"], "probe_mrr_final": hist[-1]["probe_mrr"]}


def cmd_finetune(cfg: RunConfig, run: Run) -> dict:
    from .mart.prompts import Vocabulary
    from .mart.train import finetune, load_mart, save_mart

    kg, ds = _load_data(cfg)
    vocab = Vocabulary(kg)
    recipe = cfg.recipe()
    if cfg.no_pretrain:
        model = ev.build_mart(kg, vocab, recipe, cfg.seed)
    elif cfg.checkpoint:
        path, kind = _checkpoint_dir(cfg)
        if kind != "mart":
            raise CliError("checkpoint_mismatch", "finetune needs a MarT checkpoint")
        model = load_mart(path, kg, vocab)
    else:
        hist: list[dict] = []
        model = ev.pretrained_mart(kg, vocab, recipe, cfg.seed, hist)
        for rec in hist:
            run.log({"stage": "pretrain", **rec})
    hist = []
    tcfg = ev._train_cfg(recipe, cfg.seed, False, **cfg.train_flags())
    finetune(model, kg, vocab, ds, tcfg, hist)
    for rec in hist:
        run.log({"stage": "finetune", **rec})
    save_mart(model, run.dir / "checkpoint", tcfg.effective_lambda)
    report = _evaluate(_predictor("mart", model, kg, vocab, cfg), ds, cfg).to_json()
    if not cfg.no_example:
        report["relation_distance"] = ev.relation_distance(model, kg, vocab, ds.split(cfg.split))
    return report


def cmd_eval(cfg: RunConfig, run: Run) -> dict:
    kg, ds = _load_data(cfg)
    kind, model, vocab = _load_model(cfg, kg)
    report = _evaluate(_predictor(kind, model, kg, vocab, cfg), ds, cfg).to_json()
    if kind == "mart" and not cfg.no_example:
        report["relation_distance"] = ev.relation_distance(model, kg, vocab, ds.split(cfg.split))
    return report


def cmd_predict(cfg: RunConfig, run: Run) -> dict:
    kg, ds = _load_data(cfg)
    kind, model, vocab = _load_model(cfg, kg)
    predict = _predictor(kind, model, kg, vocab, cfg)
    instances = ds.split(cfg.split)
    key = kg.entity_keys
    with (run.dir / "predictions.jsonl").open("w", encoding="utf-8") as fh:
        for inst in instances:
            res = predict(inst)
            rec = {
                "instance": {"e_h": key[inst.e_h], "e_t": key[inst.e_t], "e_q": key[inst.e_q], "e_a": key[inst.e_a],
                             "setting": inst.setting.value},
                "topk": [[key[e], float(s)] for e, s in res.topk(cfg.top_k)],
                "goldRank": res.gold_rank,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return {"predictions": len(instances), "file": "predictions.jsonl"}


def cmd_transfer(cfg: RunConfig, run: Run) -> dict:
    kg, ds = _load_data(cfg)
    rels = sorted(kg.analogy_relations)
    try:
        train_ds, test_ds, split = split_transfer(ds, rels, cfg.transfer_fraction, cfg.seed)
    except ValueError as exc:
        raise CliError("invalid_config", str(exc)) from exc
    save_instances(test_ds.test, run.dir / "target.jsonl", kg)
    tie = TieRule(cfg.tie_rule)
    out = {"source_relations": sorted(kg.relation_keys[r] for r in split.source),
           "target_relations": sorted(kg.relation_keys[r] for r in split.target)}
    if cfg.model == "pipeline":
        def train_fn(_train):
            # the KGE backbone never sees analogy instances, only the graph
            return _predictor("pipeline", _train_kge(cfg, kg, run), kg, None, cfg)

        out["pipeline"] = ev.transfer_evaluate(train_fn, train_ds, test_ds, split, tie).to_json()
        return out
    from .mart.prompts import Vocabulary

    vocab = Vocabulary(kg)
    recipe = cfg.recipe()
    out["pretrained"] = ev.mart_transfer(kg, vocab, train_ds, test_ds, split, recipe, cfg.seed, True,
                                         tie_rule=tie).to_json()
    out["scratch"] = ev.mart_transfer(kg, vocab, train_ds, test_ds, split, recipe, cfg.seed, False,
                                      tie_rule=tie).to_json()
    return out


def cmd_ablate(cfg: RunConfig, run: Run) -> dict:
    from .mart.prompts import Vocabulary
    from .mart.train import save_mart

    kg, ds = _load_data(cfg)
    vocab = Vocabulary(kg)
    recipe = cfg.recipe()
    seeds = cfg.seeds or [cfg.seed]
    reports: dict[str, list[MetricsReport]] = {r: [] for r in ev.ABLATIONS}
    tie = TieRule(cfg.tie_rule)
    for seed in seeds:
        pre = ev.pretrained_mart(kg, vocab, recipe, seed)
        for row in ev.ABLATIONS:
            hist: list[dict] = []
            model, rep = ev.run_ablation_row(row, kg, vocab, ds, recipe, seed, pre, hist, tie)
            for rec in hist:
                run.log({"row": row, "seed": seed, **rec})
            reports[row].append(rep)
            if row == "full" and seed == seeds[0]:
                save_mart(model, run.dir / "checkpoint", recipe.lam)
    summary = {}
    for row, reps in reports.items():
        body = {"seeds": seeds, "mean_mrr": float(np.mean([r.mrr for r in reps])),
                "per_seed": [r.to_json() for r in reps]}
        _write_json(run.dir / "metrics" / f"{row}.json", body)
        summary[row] = body["mean_mrr"]
    return {"mean_mrr": summary}


HANDLERS = {
    "pretrain-kge": cmd_pretrain_kge,
    "pretrain-mart": cmd_pretrain_mart,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "transfer": cmd_transfer,
    "ablate": cmd_ablate,
}


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="analogykg", description="Analogical reasoning over multimodal knowledge graphs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON config file; command-line flags override its keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=None, help="output root (gen: dataset directory)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="checkpoint or run directory")
    p.add_argument("--model", choices=("mart", "pipeline"))
    p.add_argument("--backbone", choices=[b.value for b in Backbone])
    p.add_argument("--fusion", choices=[f.value for f in FusionMode])
    p.add_argument("--split", choices=("train", "dev", "test"))
    p.add_argument("--tie-rule", dest="tie_rule", choices=[t.value for t in TieRule])
    p.add_argument("--filtered", action="store_true", default=None)
    p.add_argument("--lam", type=float)
    p.add_argument("--transfer-fraction", dest="transfer_fraction", type=float)
    for flag in ("relaxation", "gates", "pretrain", "example"):
        p.add_argument(f"--no-{flag}", dest=f"no_{flag}", action="store_true", default=None)
    p.add_argument("--json", action="store_true", help="print metrics JSON to stdout")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


OVERRIDABLE = ("seed", "data", "checkpoint", "model", "backbone", "fusion", "split", "tie_rule", "filtered", "lam",
               "transfer_fraction", "no_relaxation", "no_gates", "no_pretrain", "no_example")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise CliError("missing_input", f"config file {args.config} not found") from exc
        except json.JSONDecodeError as exc:
            raise CliError("invalid_config", f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise CliError("invalid_config", "config must be a JSON object")
    raw = copy.deepcopy(raw)
    for key in OVERRIDABLE:
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:
        raise CliError("invalid_config", str(exc)) from exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    run = None
    try:
        cfg = resolve_config(args)
        if args.command == "gen":
            if args.out is None:
                raise CliError("invalid_config", "gen needs --out <dataset dir>")
            result = cmd_gen(cfg, args.out)
        else:
            out = args.out if args.out is not None else Path("runs")
            if args.command in ("eval", "predict"):
                _checkpoint_dir(cfg)  # fail before creating a run directory
            run = Run(out, args.command, cfg)
            try:
                result = HANDLERS[args.command](cfg, run)
            finally:
                run.close()
            _write_json(run.dir / "metrics.json", result)
    except CliError as exc:
        return _fail(exc.code, str(exc), run)
    except (KgeError, FloatingPointError) as exc:
        return _fail("training_divergence", str(exc), run)
    except Exception as exc:  # noqa: BLE001 - surface anything else as JSON too
        from .mart.train import TrainingError

        code = "training_divergence" if isinstance(exc, TrainingError) else "internal_error"
        return _fail(code, f"{type(exc).__name__}: {exc}", run)
    if args.json:
        print(json.dumps(result, sort_keys=True))
    elif run is not None:
        print(run.dir)
    return 0


def _fail(code: str, message: str, run: Run | None) -> int:
    payload = {"error": code, "message": message}
    if run is not None:
        _write_json(run.dir / "error.json", payload)
    print(json.dumps(payload, sort_keys=True))
    return 2


if __name__ == "__main__":
    sys.exit(main())

"""Pre-train Model-S, run baselines and pruning variants, evaluate per domain group."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..domains import SPURIOUS_INDEX, Pool, domain_stream, make_pool
from ..metrics import aggregate, evaluate_case, macro_f1
from ..nets import Model, build_model, first_layer_fanout, load_checkpoint, save_checkpoint
from ..prune import alive_summary, fine_tune, run_schedule
from ..seeding import derive_seed
from ..training import predict, train
from .config import ExperimentConfig, ExperimentError

log = logging.getLogger(__name__)

EVAL_GROUPS = ("merge", "unseen")


@dataclass
class SeedData:
    """Materialized pools for one seed: train/val/test per domain id."""

    train: dict
    val: dict
    test: dict

    def merged_val(self, cfg: ExperimentConfig) -> list:
        return [self.val[d.domain_id] for g in ("source", "invasion") for d in cfg.domains.get(g, ())]


def build_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    sizes = {"train": cfg.data.train, "val": cfg.data.val, "test": cfg.data.test}
    out = {split: {} for split in sizes}
    for g in ("source", "invasion", "unseen"):
        for spec in cfg.domains.get(g, ()):
            splits = ("test",) if g == "unseen" else tuple(sizes)
            for split in splits:
                out[split][spec.domain_id] = make_pool(spec, sizes[split], derive_seed(seed, split, spec.domain_id),
                                                       cfg.image_size)
    return SeedData(**out)


def score_pools(cfg: ExperimentConfig, model: Model, pools: list[Pool]) -> tuple[dict, list]:
    """Aggregate plus per-case metrics. A case is one domain (vector) or one image (nucleus)."""
    cases = []
    if cfg.task == "vector":
        for pool in pools:
            pred = predict(model, pool.x).argmax(axis=1)
            p, r, f = macro_f1(pool.y, pred)
            cases.append({"domain": pool.spec.domain_id, "accuracy": float((pred == pool.y).mean()),
                          "cls_p": p, "cls_r": r, "cls_f1": f})
        keys = ("accuracy", "cls_p", "cls_r", "cls_f1")
        agg = {k: float(np.mean([c[k] for c in cases])) for k in keys}
        agg["cases"] = len(cases)
        return agg, cases
    ev = cfg.eval
    reports = []
    for pool in pools:
        out = predict(model, pool.x)
        for i, (maps, anns) in enumerate(zip(out, pool.annotations)):
            rep = evaluate_case(maps[:-1], anns, ev.radius, ev.threshold, ev.nms_radius, ev.border)
            reports.append(rep)
            cases.append({"domain": pool.spec.domain_id, "index": i, **rep.as_dict()})
    return aggregate(reports), cases


def validation_score(cfg: ExperimentConfig, pools: list[Pool]):
    """Selection metric: accuracy (vector) or mean of detection and classification F1."""
    def fn(model):
        agg, _ = score_pools(cfg, model, pools)
        if cfg.task == "vector":
            return agg["accuracy"]
        return 0.5 * (agg["det_f1"] + agg["cls_f1"])
    return fn


def _stream(cfg, data: SeedData, seed, tag, merged=True):
    src = [data.train[d.domain_id] for d in cfg.domains["source"]]
    inv = [data.train[d.domain_id] for d in cfg.domains.get("invasion", ())] if merged else []
    return domain_stream(src, inv, cfg.batch_size, cfg.schedule.ratio, derive_seed(seed, "stream", tag),
                         cfg.image_size)


@dataclass
class RunRecord:
    method: str
    seed: int
    config_hash: str
    logs: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    model: Model | None = None

    def key(self) -> tuple:
        return (self.method, self.seed)


def pretrain(cfg: ExperimentConfig, seed: int, data: SeedData | None = None,
             out: Path | None = None) -> tuple[Model, list]:
    """Train Model-S on the source domains only; selection on source validation."""
    data = data or build_data(cfg, seed)
    model = build_model(cfg.model_config(seed))
    src_val = [data.val[d.domain_id] for d in cfg.domains["source"]]
    history = train(model, _stream(cfg, data, seed, "pretrain", merged=False), cfg.pretrain,
                    validation_score(cfg, src_val))
    log.info("seed %d: pretrain done after %d epochs, source val %.4f", seed, len(history) - 1,
             max(h["val"] for h in history))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model_s.ckpt", model, {"phase": "pretrain", "seed": seed, "history": history})
    return model, history


def _copy(model: Model) -> Model:
    clone = build_model(model.config)
    clone.registry.restore(model.registry.snapshot())
    clone.registry.mask[...] = model.registry.mask
    return clone


def run_method(cfg: ExperimentConfig, method: str, seed: int, model_s: Model,
               data: SeedData | None = None) -> RunRecord:
    """ERM from random init; ERM-F and ours-* start from Model-S.

    ERM-F and ours-* draw their fine-tune batches from the same stream, so the
    prune schedule is the only difference between them.
    """
    data = data or build_data(cfg, seed)
    val = validation_score(cfg, data.merged_val(cfg))
    rec = RunRecord(method, seed, cfg.hash())
    if method == "erm":
        model = build_model(cfg.model_config(seed))
        rec.logs["train"] = train(model, _stream(cfg, data, seed, "erm"), cfg.train, val)
    else:
        model = _copy(model_s)
        if method.startswith("ours-"):
            scoped = replace(cfg.schedule, scope=method.split("-", 1)[1])
            steps = run_schedule(model, scoped, _stream(cfg, data, seed, "prune"))
            rec.logs["prune"] = [s.to_dict() for s in steps]
            rec.logs["pruned_val"] = val(model)
        rec.logs["fine_tune"] = fine_tune(model, _stream(cfg, data, seed, "fine-tune"), cfg.train, val)
    rec.model = model
    return rec


def spurious_mass(model: Model) -> float:
    """Sum of |w| over alive first-layer weights leaving the planted coordinate."""
    idx = first_layer_fanout(model, SPURIOUS_INDEX)
    reg = model.registry
    return float(np.abs(reg.flat[idx][reg.mask[idx]]).sum())


def evaluate(cfg: ExperimentConfig, rec: RunRecord, data: SeedData | None = None) -> RunRecord:
    """Fill ``rec.metrics`` for the merge (source + invasion) and unseen groups."""
    if rec.model is None:
        raise ExperimentError(f"{rec.method} seed {rec.seed}: no model to evaluate (missing checkpoint)")
    data = data or build_data(cfg, rec.seed)
    groups = {
        "merge": [data.test[d.domain_id] for g in ("source", "invasion") for d in cfg.domains.get(g, ())],
        "unseen": [data.test[d.domain_id] for d in cfg.domains.get("unseen", ())],
    }
    for name, pools in groups.items():
        if pools:
            agg, cases = score_pools(cfg, rec.model, pools)
            rec.metrics[name] = {"aggregate": agg, "cases": cases}
    if rec.method.startswith("ours-"):
        rec.logs["alive"] = alive_summary(rec.model.registry)
    if cfg.task == "vector":
        rec.logs["spurious_mass"] = spurious_mass(rec.model)
    return rec


def checkpoint_path(out: Path, method: str, seed: int) -> Path:
    return Path(out) / f"seed-{seed}" / f"{method}.ckpt"


def save_record(out: Path, rec: RunRecord) -> None:
    path = checkpoint_path(out, rec.method, rec.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, rec.model, {"method": rec.method, "seed": rec.seed,
                                      "config_hash": rec.config_hash, "logs": rec.logs})


def load_record(out: Path, method: str, seed: int) -> RunRecord:
    path = checkpoint_path(out, method, seed)
    if not path.is_file():
        raise ExperimentError(f"missing checkpoint {path}")
    model, extra = load_checkpoint(path)
    logs = {k: v for k, v in extra.get("logs", {}).items() if k not in ("alive", "spurious_mass")}
    return RunRecord(extra["method"], extra["seed"], extra["config_hash"], logs, {}, model)


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> list[RunRecord]:
    """Every (seed, method) pair; Model-S is trained once per seed and shared."""
    records = []
    for seed in cfg.seeds:
        data = build_data(cfg, seed)
        seed_dir = None if out is None else Path(out) / f"seed-{seed}"
        model_s, history = pretrain(cfg, seed, data, seed_dir)
        for method in cfg.methods:
            rec = run_method(cfg, method, seed, model_s, data)
            rec.logs["pretrain"] = history
            evaluate(cfg, rec, data)
            if out is not None:
                save_record(out, rec)
            records.append(rec)
            log.info("seed %d %s: %s", seed, method,
                     {g: m["aggregate"] for g, m in rec.metrics.items()})
    return records

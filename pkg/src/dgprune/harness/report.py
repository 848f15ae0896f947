"""Deterministic JSON/CSV/markdown serialization of run records."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, ExperimentError

DETECTION_COLUMNS = ("det_p", "det_r", "det_f1", "dist_mu", "dist_sigma")
CLASSIFICATION_COLUMNS = ("cls_p", "cls_r", "cls_f1")
VECTOR_COLUMNS = ("accuracy", "cls_p", "cls_r", "cls_f1")


def record_hash(config_hash: str, method: str, seed: int) -> str:
    return hashlib.sha256(f"{config_hash}:{method}:{seed}".encode()).hexdigest()


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def record_dict(rec) -> dict:
    return _clean({
        "record_hash": record_hash(rec.config_hash, rec.method, rec.seed),
        "config_hash": rec.config_hash,
        "method": rec.method,
        "seed": rec.seed,
        "logs": rec.logs,
        "metrics": rec.metrics,
    })


def experiment_document(cfg: ExperimentConfig, records) -> dict:
    recs = sorted((record_dict(r) for r in records), key=lambda d: d["record_hash"])
    echo = cfg.to_dict()
    echo.pop("out")  # where the files land is not an input
    return {"config": _clean(echo), "config_hash": cfg.hash(), "records": recs}


def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def metric_rows(doc: dict) -> list[dict]:
    """One row per method x seed x group x metric, in a fixed order."""
    rows = []
    for r in sorted(doc["records"], key=lambda d: (d["method"], d["seed"])):
        for group in sorted(r["metrics"]):
            agg = r["metrics"][group]["aggregate"]
            for metric in sorted(agg):
                rows.append({"method": r["method"], "seed": r["seed"], "group": group,
                             "metric": metric, "value": agg[metric]})
    return rows


def _csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def write_reports(cfg: ExperimentConfig, records, out) -> dict:
    """Write ``report.json`` and ``report.csv``; returns their paths."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    doc = experiment_document(cfg, records)
    paths = {"json": out / "report.json", "csv": out / "report.csv"}
    paths["json"].write_text(dumps(doc))
    paths["csv"].write_text(_csv(metric_rows(doc), ("method", "seed", "group", "metric", "value")))
    return paths


def load_document(path) -> dict:
    return json.loads(Path(path).read_text())


def compare(docs) -> list[dict]:
    """Mean and std over seeds per method x group x metric.

    ``std`` is the sample standard deviation (0 for a single seed).
    """
    cells = defaultdict(list)
    metric_sets = {}
    records = sorted((r for d in docs for r in d["records"]), key=lambda r: r["record_hash"])
    if not records:
        raise ExperimentError("nothing to compare: no records")
    for r in records:
        for group, m in r["metrics"].items():
            keys = tuple(sorted(m["aggregate"]))
            prev = metric_sets.setdefault(group, keys)
            if prev != keys:
                raise ExperimentError(f"inconsistent metric sets in group {group!r}: {prev} vs {keys}")
            for k, v in m["aggregate"].items():
                cells[(r["method"], group, k)].append(v)
    rows = []
    for (method, group, metric), vals in sorted(cells.items()):
        arr = np.array([np.nan if v is None else v for v in vals], dtype=float)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        rows.append({"method": method, "group": group, "metric": metric, "n": len(arr),
                     "mean": float(arr.mean()), "std": std})
    return rows


def comparison_markdown(rows: list[dict]) -> str:
    """Method rows, one column block per group, ``mean ± std`` cells."""
    table = {(r["method"], r["group"], r["metric"]): r for r in rows}
    groups = sorted({r["group"] for r in rows})
    metrics_present = {r["metric"] for r in rows}
    if "det_f1" in metrics_present:
        columns = DETECTION_COLUMNS + CLASSIFICATION_COLUMNS
    else:
        columns = VECTOR_COLUMNS
    head = ["method"] + [f"{g} {c}" for g in groups for c in columns]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for method in sorted({r["method"] for r in rows}):
        cells = [method]
        for g in groups:
            for c in columns:
                r = table.get((method, g, c))
                cells.append("" if r is None else f"{r['mean']:.4f} ± {r['std']:.4f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_comparison(docs, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = compare(docs)
    paths = {"csv": out / "comparison.csv", "md": out / "comparison.md"}
    paths["csv"].write_text(_csv(rows, ("method", "group", "metric", "n", "mean", "std")))
    paths["md"].write_text(comparison_markdown(rows))
    return paths


"""Report figures: alive fractions, training curves, method comparison."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PNG_META = {"Software": None}  # keeps the files free of version strings


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_META)
    plt.close(fig)
    return path


def plot_alive_fractions(doc: dict, out: Path) -> list[Path]:
    """Per-tag and per-layer surviving fraction for every ours-* record (first seed)."""
    seen, paths = set(), []
    for r in sorted(doc["records"], key=lambda d: (d["method"], d["seed"])):
        alive = r["logs"].get("alive")
        if not alive or r["method"] in seen:
            continue
        seen.add(r["method"])
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2), gridspec_kw={"width_ratios": [1, 2.5]})
        tags = sorted(alive["fraction"])
        ax1.bar(tags, [alive["fraction"][t] for t in tags], color="0.4")
        ax1.set_ylim(0, 1.05)
        ax1.set_ylabel("surviving fraction")
        layers = list(alive["layers"])
        ax2.bar(range(len(layers)), [alive["layers"][k] for k in layers], color="0.6")
        ax2.set_xticks(range(len(layers)), layers, rotation=60, ha="right", fontsize=7)
        ax2.set_ylim(0, 1.05)
        fig.suptitle(f"{r['method']} (seed {r['seed']})", fontsize=9)
        paths.append(_save(fig, out / f"alive_{r['method']}.png"))
    return paths


def plot_curves(doc: dict, out: Path) -> Path:
    """Validation score per epoch, one panel per phase."""
    phases = ("pretrain", "train", "fine_tune")
    fig, axes = plt.subplots(1, len(phases), figsize=(10, 3), sharey=True)
    for ax, phase in zip(axes, phases):
        for r in sorted(doc["records"], key=lambda d: (d["method"], d["seed"])):
            hist = r["logs"].get(phase)
            if not hist or (phase == "pretrain" and r["method"] != doc["records"][0]["method"]):
                continue
            ax.plot([h["epoch"] for h in hist], [h["val"] for h in hist], lw=0.8,
                    label=f"{r['method']} s{r['seed']}" if phase != "pretrain" else f"s{r['seed']}")
        ax.set_title(phase, fontsize=9)
        ax.set_xlabel("epoch")
        if ax.lines:
            ax.legend(fontsize=6)
    axes[0].set_ylabel("validation score")
    return _save(fig, out / "curves.png")


def plot_comparison(rows: list[dict], out: Path) -> Path:
    """Bar chart of mean ± std per method for each group's headline metrics."""
    metrics = [m for m in ("det_f1", "cls_f1", "accuracy") if any(r["metric"] == m for r in rows)]
    groups = sorted({r["group"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    table = {(r["method"], r["group"], r["metric"]): r for r in rows}
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3), squeeze=False)
    width = 0.8 / max(len(methods), 1)
    for ax, metric in zip(axes[0], metrics):
        for i, method in enumerate(methods):
            cells = [table.get((method, g, metric)) for g in groups]
            ax.bar([j + i * width for j in range(len(groups))],
                   [c["mean"] if c else 0.0 for c in cells], width,
                   yerr=[c["std"] if c else 0.0 for c in cells], label=method, capsize=2)
        ax.set_xticks([j + width * (len(methods) - 1) / 2 for j in range(len(groups))], groups)
        ax.set_title(metric, fontsize=9)
        ax.set_ylim(0, 1.05)
    axes[0][0].legend(fontsize=7)
    return _save(fig, out / "comparison.png")


def render_all(doc: dict, rows: list[dict] | None, out) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = plot_alive_fractions(doc, out) + [plot_curves(doc, out)]
    if rows:
        paths.append(plot_comparison(rows, out))
    return paths

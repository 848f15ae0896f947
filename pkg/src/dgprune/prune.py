"""Domain-merging prune/reset/fine-tune search for a domain-agnostic subnetwork.

Starting from a model converged on one source domain (Model-S), the
training data switches to merged source + invasion batches. Parameters whose
gradients on the merged data are largest in magnitude are treated as
domain-specific and pruned; survivors are rewound to Model-S. After ``n``
such steps the pruned model (Model-M) is fine-tuned on the merged domains
with its mask frozen.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from .nets import TAGS, Model, ParamRegistry
from .training import TrainConfig, loss_and_grad, train

ACCUMULATION_MODES = ("sum-abs", "abs-sum")
SCOPES = ("all", "encoder", "decoder")


class ScheduleError(ValueError):
    pass


@dataclass
class PruneSchedule:
    """``p`` is the total fraction to prune over ``n`` steps.

    Each step removes ``r = 1 - (1 - p) ** (1 / n)`` of the parameters still
    alive in scope, unless ``r_override`` fixes ``r`` directly. ``k`` merged
    batches are accumulated per step; ``ratio`` is source:invasion per batch.
    """

    p: float = 0.2
    n: int = 4
    k: int = 8
    scope: str = "all"
    ratio: tuple = (1, 1)
    accumulation: str = "sum-abs"
    r_override: float | None = None

    def __post_init__(self):
        self.ratio = tuple(int(v) for v in self.ratio)
        if not 0.0 < self.p < 1.0:
            raise ScheduleError(f"p must lie in (0, 1), got {self.p}")
        if self.n < 1 or self.k < 1:
            raise ScheduleError("n and k must be >= 1")
        if self.scope not in SCOPES:
            raise ScheduleError(f"scope must be one of {SCOPES}")
        if self.accumulation not in ACCUMULATION_MODES:
            raise ScheduleError(f"accumulation must be one of {ACCUMULATION_MODES}")
        if not 0.0 < self.r < 1.0:
            raise ScheduleError(f"per-step fraction must lie in (0, 1), got {self.r}")

    @property
    def r(self) -> float:
        if self.r_override is not None:
            return float(self.r_override)
        return 1.0 - (1.0 - self.p) ** (1.0 / self.n)

    @property
    def target_survival(self) -> float:
        return (1.0 - self.r) ** self.n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = list(self.ratio)
        d["r"] = self.r
        return d


# pruning ratio 1e-4 and 4 prune-reset iterations, as reported for the Ki67 runs
PAPER_SCHEDULE = dict(p=1e-4, n=4)
# PACS runs mix source and invasion 1:2
PACS_RATIO = (1, 2)


class PruneMask:
    """Alive bits of a registry. Bits only ever go from alive to pruned."""

    def __init__(self, registry: ParamRegistry):
        self.registry = registry

    @property
    def bits(self) -> np.ndarray:
        return self.registry.mask

    def alive_counts(self) -> dict[str, int]:
        return self.registry.alive_counts()

    def prune(self, indices: np.ndarray) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        if not self.bits[indices].all():
            raise ScheduleError("attempted to prune an already pruned parameter")
        self.bits[indices] = False


@dataclass
class GradProfile:
    values: np.ndarray
    batches: int
    threshold: float | None = None
    mean_loss: float = float("nan")


def collect_gradients(model: Model, batches: Sequence, accumulation: str = "sum-abs",
                      loss_fn=None) -> GradProfile:
    """Accumulate per-parameter gradient magnitudes over merged batches.

    ``sum-abs`` sums ``|g|`` batch by batch; ``abs-sum`` takes ``|sum g|``.
    Pruned entries read 0. Parameters are left untouched.
    """
    batches = list(batches)
    if not batches:
        raise ScheduleError("collect_gradients needs at least one batch")
    if accumulation not in ACCUMULATION_MODES:
        raise ScheduleError(f"unknown accumulation mode {accumulation!r}")
    reg = model.registry
    acc = np.zeros(len(reg))
    losses = []
    for b in batches:  # fixed order keeps the reduction deterministic
        losses.append(loss_and_grad(model, b.x, b.y, loss_fn))
        g = reg.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient while collecting the prune profile")
        acc += np.abs(g) if accumulation == "sum-abs" else g
    if accumulation == "abs-sum":
        acc = np.abs(acc)
    acc[~reg.mask] = 0.0
    reg.zero_grad()
    return GradProfile(acc, len(batches), mean_loss=float(np.mean(losses)))


def compute_threshold(profile: GradProfile, r: float, scope_indices: np.ndarray,
                      mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Pick the ``round(r * alive)`` largest-magnitude alive parameters in scope.

    Ties go to the lower flat index first. Returns ``(c_p, pruned)`` where
    ``c_p`` is the largest surviving magnitude, so survivors satisfy
    ``|g| <= c_p``.
    """
    scope_indices = np.asarray(scope_indices, dtype=np.int64)
    alive = scope_indices[mask[scope_indices]]
    want = r * len(alive)
    if want < 1:
        raise ScheduleError(f"prune step would be empty (r={r:g} of {len(alive)} alive parameters)")
    m = math.floor(want + 0.5)
    if m >= len(alive):
        raise ScheduleError("prune step would remove every parameter in scope")
    vals = profile.values[alive]
    order = np.lexsort((alive, -vals))
    pruned = np.sort(alive[order[:m]])
    c_p = float(vals[order[m]])
    profile.threshold = c_p
    return c_p, pruned


def prune_and_reset(model: Model, pruned: np.ndarray, snapshot: np.ndarray) -> None:
    """Mask ``pruned`` and rewind every survivor to ``snapshot`` bit-exactly."""
    reg = model.registry
    snapshot = np.asarray(snapshot)
    if snapshot.shape != reg.flat.shape:
        raise ValueError(f"snapshot has {snapshot.size} values, model has {len(reg)}")
    PruneMask(reg).prune(pruned)
    reg.flat[...] = np.where(reg.mask, snapshot, 0.0)


@dataclass
class PruneStep:
    step: int
    scope: str
    c_p: float
    pruned: int
    alive: dict
    merged_loss: float

    def to_dict(self) -> dict:
        return asdict(self)


def run_schedule(model: Model, schedule: PruneSchedule, stream: Iterator,
                 snapshot: np.ndarray | None = None, loss_fn=None,
                 on_step=None) -> list[PruneStep]:
    """Turn Model-S into Model-M in place; returns one log record per step.

    ``snapshot`` defaults to the model's current parameters, which must be
    the source-converged weights. ``on_step(record, model)`` runs after each
    prune/reset.
    """
    reg = model.registry
    snapshot = reg.snapshot() if snapshot is None else np.asarray(snapshot).copy()
    scope_idx = reg.scope_indices(schedule.scope)
    if len(scope_idx) == 0:
        raise ScheduleError(f"scope {schedule.scope!r} selects no parameters in this model")
    steps = []
    for step in range(1, schedule.n + 1):
        batches = [next(stream) for _ in range(schedule.k)]
        profile = collect_gradients(model, batches, schedule.accumulation, loss_fn)
        c_p, pruned = compute_threshold(profile, schedule.r, scope_idx, reg.mask)
        prune_and_reset(model, pruned, snapshot)
        reg.check_partition()
        steps.append(PruneStep(step, schedule.scope, c_p, len(pruned), reg.alive_counts(), profile.mean_loss))
        if on_step is not None:
            on_step(steps[-1], model)
    return steps


def fine_tune(model: Model, stream: Iterator, cfg: TrainConfig, validate=None) -> list[dict]:
    """Fine-tune survivors with a fresh optimizer; pruned entries stay 0."""
    if stream is None:
        raise ScheduleError("fine_tune needs a merged-domain stream")
    reg = model.registry
    mask_before = reg.mask.copy()
    history = train(model, stream, cfg, validate, mask=reg.mask)
    assert np.array_equal(mask_before, reg.mask)
    assert not reg.flat[~reg.mask].any()
    return history


def alive_summary(registry: ParamRegistry) -> dict:
    return {
        "alive": registry.alive_counts(),
        "total": registry.counts(),
        "fraction": registry.alive_fractions(),
        "layers": registry.layer_alive_fractions(),
    }


__all__ = [
    "ACCUMULATION_MODES",
    "GradProfile",
    "PAPER_SCHEDULE",
    "PACS_RATIO",
    "PruneMask",
    "PruneSchedule",
    "PruneStep",
    "ScheduleError",
    "TAGS",
    "alive_summary",
    "collect_gradients",
    "compute_threshold",
    "fine_tune",
    "prune_and_reset",
    "run_schedule",
]

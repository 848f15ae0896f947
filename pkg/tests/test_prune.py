import math
from types import SimpleNamespace

import numpy as np
import pytest

from dgprune import autodiff as ad
from dgprune.domains import DomainSpec, domain_stream
from dgprune.nets import ModelConfig, ParamRegistry, build_model
from dgprune.prune import (
    GradProfile,
    PruneSchedule,
    ScheduleError,
    collect_gradients,
    compute_threshold,
    fine_tune,
    prune_and_reset,
    run_schedule,
)
from dgprune.training import TrainConfig, task_loss

from oracles import central_differences, rel_error, top_m_by_sort


def quadratic_model(w0, w1):
    reg = ParamRegistry([("w", "encoder", (2,))])
    reg.flat[:] = [w0, w1]
    return SimpleNamespace(registry=reg)


def quadratic_loss(model, x, y):
    # C = (w0 - x0)^2 + 3 (w1 - x1)^2
    w = model.registry.params[0]
    d = ad.sub(w, ad.Tensor(x))
    return ad.total(ad.mul(ad.mul(d, d), ad.Tensor(np.array([1.0, 3.0]))))


def batch(x, y=None):
    return SimpleNamespace(x=np.asarray(x, dtype=float), y=y)


def vector_specs():
    src = DomainSpec("src", "vector", (0, 1, 2), spurious_rho=0.95, n_classes=3, n_features=3)
    inv = DomainSpec("inv", "vector", (0, 1, 2), rotation_deg=15, n_classes=3, n_features=3)
    return src, inv


def test_profile_matches_analytic_gradient():
    m = quadratic_model(1.0, -2.0)
    prof = collect_gradients(m, [batch([0.5, 1.0])], loss_fn=quadratic_loss)
    np.testing.assert_array_equal(prof.values, [abs(2 * (1.0 - 0.5)), abs(6 * (-2.0 - 1.0))])
    np.testing.assert_array_equal(m.registry.flat, [1.0, -2.0])


def test_doubling_identical_batches_doubles_profile():
    m = quadratic_model(0.3, 0.7)
    one = collect_gradients(m, [batch([1.0, 2.0])], loss_fn=quadratic_loss).values
    two = collect_gradients(m, [batch([1.0, 2.0])] * 2, loss_fn=quadratic_loss).values
    np.testing.assert_array_equal(two, 2 * one)


def test_accumulation_modes_differ_on_cancelling_gradients():
    m = quadratic_model(0.0, 0.0)
    bs = [batch([1.0, 1.0]), batch([-1.0, -1.0])]
    assert collect_gradients(m, bs, "sum-abs", quadratic_loss).values.tolist() == [4.0, 12.0]
    assert collect_gradients(m, bs, "abs-sum", quadratic_loss).values.tolist() == [0.0, 0.0]


def test_pruned_entry_reads_zero():
    m = quadratic_model(1.0, 1.0)
    m.registry.mask[1] = False
    prof = collect_gradients(m, [batch([0.0, 0.0])], loss_fn=quadratic_loss)
    assert prof.values[1] == 0.0 and prof.values[0] == 2.0


def test_empty_batch_list():
    with pytest.raises(ScheduleError):
        collect_gradients(quadratic_model(0, 0), [], loss_fn=quadratic_loss)


def test_threshold_top_one_of_four():
    prof = GradProfile(np.array([0.1, 0.5, 0.3, 0.9]), 1)
    c_p, pruned = compute_threshold(prof, 0.25, np.arange(4), np.ones(4, bool))
    assert pruned.tolist() == [3] and c_p == 0.5


def test_threshold_ties_prune_lower_index_first():
    prof = GradProfile(np.full(4, 0.7), 1)
    _, pruned = compute_threshold(prof, 0.5, np.arange(4), np.ones(4, bool))
    assert pruned.tolist() == [0, 1]


def test_threshold_matches_full_sort():
    rng = np.random.default_rng(0)
    for _ in range(20):
        vals = rng.random(1000)
        mask = np.ones(1000, bool)
        _, pruned = compute_threshold(GradProfile(vals, 1), 0.1, np.arange(1000), mask)
        assert pruned.tolist() == top_m_by_sort(vals, range(1000), 100)


def test_threshold_respects_mask_and_scope():
    vals = np.array([9.0, 8.0, 7.0, 6.0, 5.0, 4.0])
    mask = np.array([False, True, True, True, True, True])
    c_p, pruned = compute_threshold(GradProfile(vals, 1), 0.5, np.array([0, 1, 2, 3]), mask)
    # alive in scope: 1, 2, 3 -> round(1.5) = 2 pruned
    assert pruned.tolist() == [1, 2] and c_p == 6.0


def test_threshold_empty_step_is_an_error():
    with pytest.raises(ScheduleError, match="empty"):
        compute_threshold(GradProfile(np.ones(10), 1), 0.05, np.arange(10), np.ones(10, bool))


def test_prune_and_reset_contract():
    model = build_model(ModelConfig("mlp", (3,), [4], 2, seed=1))
    reg = model.registry
    snap = reg.snapshot()
    reg.flat += 1.0
    prune_and_reset(model, np.array([0, 5, 7]), snap)
    assert not reg.mask[[0, 5, 7]].any()
    assert (reg.flat[[0, 5, 7]] == 0).all()
    assert reg.flat[reg.mask].tobytes() == snap[reg.mask].tobytes()
    with pytest.raises(ScheduleError):
        prune_and_reset(model, np.array([5]), snap)
    with pytest.raises(ValueError):
        prune_and_reset(model, np.array([1]), snap[:-1])


def test_schedule_fraction_derivation():
    s = PruneSchedule(p=0.3, n=4)
    assert abs(s.target_survival - 0.7) < 1e-6
    assert PruneSchedule(p=0.3, n=4, r_override=0.2).r == 0.2


@pytest.mark.parametrize("kw", [dict(p=0.0), dict(p=1.0), dict(n=0), dict(k=0), dict(scope="head"),
                                dict(accumulation="max")])
def test_invalid_schedule(kw):
    with pytest.raises(ScheduleError):
        PruneSchedule(**kw)


def test_paper_ratio_is_too_small_for_a_desk_model():
    model = build_model(ModelConfig("mlp", (3,), [4], 3, seed=0))
    stream = domain_stream(vector_specs()[:1], vector_specs()[1:], 4, seed=0)
    with pytest.raises(ScheduleError, match="empty"):
        run_schedule(model, PruneSchedule(p=1e-4, n=4, k=1), stream)


def _schedule_run(scope="all", p=0.4, n=4, channels=None):
    if channels:
        model = build_model(ModelConfig("encdec", (3, 32, 32), channels, 2, seed=0))
        src = DomainSpec("a", "nucleus", (0, 1), n_classes=2)
        inv = DomainSpec("b", "nucleus", (0, 1), n_classes=2, hue=(0.08, 0.02, -0.08))
    else:
        model = build_model(ModelConfig("mlp", (8,), [16, 16], 3, seed=0))
        src = DomainSpec("src", "vector", (0, 1, 2), spurious_rho=0.95, n_classes=3)
        inv = DomainSpec("inv", "vector", (0, 1, 2), rotation_deg=15, n_classes=3)
    stream = domain_stream([src], [inv], 4, seed=1)
    return model, PruneSchedule(p=p, n=n, k=2, scope=scope), stream


def test_schedule_step_invariants():
    model, sched, stream = _schedule_run()
    reg = model.registry
    snap = reg.snapshot()
    total = len(reg)
    seen = {"alive": total, "mask": reg.mask.copy()}

    def check(rec, m):
        expected_drop = math.floor(sched.r * seen["alive"] + 0.5)
        alive = int(reg.mask.sum())
        assert seen["alive"] - alive == expected_drop == rec.pruned
        assert not (reg.mask & ~seen["mask"]).any()  # monotone
        assert reg.flat[reg.mask].tobytes() == snap[reg.mask].tobytes()
        assert not reg.flat[~reg.mask].any()
        seen["alive"], seen["mask"] = alive, reg.mask.copy()

    log = run_schedule(model, sched, stream, on_step=check)
    assert [r.step for r in log] == [1, 2, 3, 4]
    assert abs(reg.mask.sum() - (1 - sched.p) * total) <= sched.n


def test_single_step_schedule_is_one_shot_pruning():
    model, _, stream = _schedule_run()
    probe_model, _, probe_stream = _schedule_run()
    sched = PruneSchedule(p=0.25, n=1, k=2)
    prof = collect_gradients(probe_model, [next(probe_stream) for _ in range(2)])
    m = math.floor(0.25 * len(prof.values) + 0.5)
    run_schedule(model, sched, stream)
    assert np.flatnonzero(~model.registry.mask).tolist() == top_m_by_sort(prof.values, range(len(prof.values)), m)


@pytest.mark.parametrize("scope", ["encoder", "decoder"])
def test_scope_isolation(scope):
    model, sched, stream = _schedule_run(scope=scope, p=0.3, n=2, channels=[2, 4])
    reg = model.registry
    before = reg.snapshot()
    outside = reg.tags != scope
    log = run_schedule(model, sched, stream)
    assert reg.mask[outside].all()
    assert reg.flat[outside].tobytes() == before[outside].tobytes()
    for rec in log:
        for tag, count in rec.alive.items():
            if tag != scope:
                assert count == reg.counts()[tag]


def test_empty_scope_is_rejected():
    model, _, stream = _schedule_run()
    with pytest.raises(ScheduleError):
        run_schedule(model, PruneSchedule(scope="decoder"), stream)


def test_twenty_parameter_model_matches_exhaustive_oracle():
    cfg = ModelConfig("mlp", (3,), [3], 2, seed=7)
    assert len(build_model(cfg).registry) == 20
    specs = [DomainSpec("s", "vector", (0, 1), spurious_rho=0.9, n_classes=2, n_features=3),
             DomainSpec("i", "vector", (0, 1), rotation_deg=20, n_classes=2, n_features=3)]
    sched = PruneSchedule(p=0.5, n=4, k=3)

    model = build_model(cfg)
    got = []
    run_schedule(model, sched, domain_stream(specs[:1], specs[1:], 4, seed=2),
                 on_step=lambda rec, m: got.append(np.flatnonzero(~m.registry.mask).tolist()))

    oracle = build_model(cfg)
    reg = oracle.registry
    snap = reg.snapshot()
    stream = domain_stream(specs[:1], specs[1:], 4, seed=2)
    mask = np.ones(20, bool)
    expected = []
    for _ in range(sched.n):
        batches = [next(stream) for _ in range(sched.k)]
        prof = collect_gradients(oracle, batches).values
        fd = np.zeros(20)
        for b in batches:
            fd += np.abs(central_differences(lambda: task_loss(oracle, oracle(b.x), b.y).item(), [reg.flat])[0])
        # FD cannot reproduce exact ties (softmax bias grads are +/- each other), so it checks values only
        assert rel_error(prof, np.where(mask, fd, 0.0)) < 1e-6
        alive = [i for i in range(20) if mask[i]]
        m = math.floor(sched.r * len(alive) + 0.5)
        mask[top_m_by_sort(prof, alive, m)] = False
        reg.flat[:] = np.where(mask, snap, 0.0)
        reg.mask[:] = mask
        expected.append(np.flatnonzero(~mask).tolist())
    assert got == expected


def _fine_tune_setup():
    model, sched, stream = _schedule_run(p=0.5, n=2)
    run_schedule(model, sched, stream)
    return model, stream


def test_fine_tune_zero_epochs_is_identity():
    model, stream = _fine_tune_setup()
    before = model.registry.snapshot()
    fine_tune(model, stream, TrainConfig(max_epochs=0))
    assert model.registry.flat.tobytes() == before.tobytes()


def test_fine_tune_keeps_pruned_weights_at_zero():
    model, stream = _fine_tune_setup()
    reg = model.registry
    mask = reg.mask.copy()
    before = reg.snapshot()
    fine_tune(model, stream, TrainConfig(max_epochs=3, steps_per_epoch=5, lr=1e-2))
    np.testing.assert_array_equal(reg.mask, mask)
    assert not reg.flat[~mask].any()
    assert (reg.flat[mask] != before[mask]).any()


def test_fine_tune_needs_stream():
    model, _ = _fine_tune_setup()
    with pytest.raises(ScheduleError):
        fine_tune(model, None, TrainConfig())

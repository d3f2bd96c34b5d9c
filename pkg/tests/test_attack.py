import numpy as np
import pytest

from glitchsim.attack import (
    AttackPlan,
    PlannedGlitch,
    plan_injections,
    run_attack_trial,
    run_campaign,
    run_precise_trial,
    run_random_baseline,
    _parity_reduce,
)
from glitchsim.bits import Granularity
from glitchsim.device import ExecutionSchedule, FaultParams, build_schedule, ideal_profile
from glitchsim.engine import ElementAddr, forward
from glitchsim.io_formats import Dataset, synth_dataset
from glitchsim.presets import dense_model, lenet5_mini
from glitchsim.sensitivity import CandidateTarget, TargetSet

from test_device import flat_profile, params


def element_targets(*addrs, n_max=None):
    targets = tuple(
        CandidateTarget(ElementAddr(*a), Granularity.ELEMENT) for a in addrs
    )
    return TargetSet(targets=targets, n_max=n_max or max(len(targets), 1))


def ten_window_schedule(cost=2.0):
    return ExecutionSchedule(
        layer_starts=(0.0, cost * 10), costs=(cost,), counts=(10,), frequency=1000.0
    )


def test_plan_midpoint_minus_half_duration():
    sched = ten_window_schedule()  # element 5 runs in [10, 12)
    plan = plan_injections(sched, element_targets((0, 5)), params(v_l=700.0, t_d=2.0))
    assert plan.glitches == (PlannedGlitch(element_targets((0, 5)).targets, 10.0),)


def test_plan_orders_disjoint_attempts():
    sched = ten_window_schedule()
    plan = plan_injections(
        sched, element_targets((0, 8), (0, 1)), params(v_l=700.0, t_d=2.0)
    )
    assert [g.t_w for g in plan.glitches] == [2.0, 16.0]
    assert len(plan.glitches) == 2


def test_plan_merges_overlapping_windows():
    sched = ten_window_schedule()
    plan = plan_injections(
        sched, element_targets((0, 5), (0, 6)), params(v_l=700.0, t_d=3.0)
    )
    assert len(plan.glitches) == 1
    assert plan.glitches[0].t_w == 9.5
    assert len(plan.glitches[0].targets) == 2


def test_plan_clamps_to_zero():
    sched = ten_window_schedule()
    plan = plan_injections(sched, element_targets((0, 0)), params(v_l=700.0, t_d=4.0))
    assert plan.glitches[0].t_w == 0.0


def test_plan_rejects_unknown_target():
    sched = ten_window_schedule()
    with pytest.raises(ValueError):
        plan_injections(sched, element_targets((3, 0)), params(v_l=700.0))


def test_parity_reduce_cancels_pairs():
    a, b = (ElementAddr(0, 1), 4), (ElementAddr(0, 2), 7)
    assert _parity_reduce([a, b, a]) == [b]
    assert _parity_reduce([a, a]) == []
    assert _parity_reduce([a, b]) == [a, b]


@pytest.fixture(scope="module")
def mini_setup():
    model = lenet5_mini(seed=3)
    profile = flat_profile()
    schedule = build_schedule(model, profile, 1000.0)
    x = np.random.default_rng(4).random(196, dtype=np.float32)
    return model, profile, schedule, x


def test_safe_params_complete_with_baseline(mini_setup):
    model, profile, schedule, x = mini_setup
    plan = plan_injections(schedule, element_targets((9, 1), (7, 5)), params(v_l=500.0))
    base = forward(model, x, 2).predicted_class
    for i in range(20):
        r = run_attack_trial(
            model, x, 2, "nontargeted", plan, profile, params(v_l=500.0),
            np.random.SeedSequence(i),
        )
        assert r.status == "completed"
        assert r.final_class == base
        assert all(a.outcome.kind == "no_effect" for a in r.attempts)


def test_trial_final_class_matches_direct_forward(mini_setup):
    model, profile, schedule, x = mini_setup
    pr = params(v_l=330.0, t_d=2.0)
    plan = plan_injections(schedule, element_targets((9, 0), (9, 3), (7, 10)), pr)
    hits = 0
    for i in range(30):
        r = run_attack_trial(
            model, x, 2, "nontargeted", plan, profile, pr, np.random.SeedSequence(i)
        )
        assert r.status == "completed"  # crash/noresp disabled in flat profile
        positions = [p for a in r.attempts for p in a.outcome.positions]
        replay = forward(model, x, 2, plan=_parity_reduce(positions))
        assert replay.predicted_class == r.final_class
        hits += bool(positions)
    assert hits > 0


def test_trial_reproducible(mini_setup):
    model, profile, schedule, x = mini_setup
    pr = params(v_l=330.0)
    plan = plan_injections(schedule, element_targets((9, 0), (0, 50)), pr)
    a = run_attack_trial(model, x, 2, "nontargeted", plan, profile, pr, np.random.SeedSequence(5))
    b = run_attack_trial(model, x, 2, "nontargeted", plan, profile, pr, np.random.SeedSequence(5))
    assert a == b


def test_empty_target_set_keeps_baseline(mini_setup):
    model, profile, schedule, x = mini_setup
    plan = plan_injections(
        schedule, TargetSet(targets=(), n_max=5), params(v_l=330.0)
    )
    r = run_attack_trial(
        model, x, 2, "nontargeted", plan, profile, params(v_l=330.0),
        np.random.SeedSequence(0),
    )
    assert r.status == "completed"
    assert r.final_class == r.baseline_class
    assert r.attempts == ()


def test_crash_aborts_trial(mini_setup):
    model, _, schedule, x = mini_setup
    crashy = flat_profile(
        crash_rate=500.0, crash_threshold=0.5, crash_width=0.1, noresp_threshold=0.4
    )
    pr = params(v_l=300.0, v_g=700.0)  # excursion (700-300)/65 = 6.2
    plan = plan_injections(schedule, element_targets((9, 0), (9, 5)), pr)
    r = run_attack_trial(model, x, 2, "nontargeted", plan, crashy, pr, np.random.SeedSequence(1))
    assert r.status == "crash"
    assert r.final_class is None
    assert len(r.attempts) == 1  # aborted at the first crashing attempt


def test_attempt_streams_are_outcome_independent(mini_setup):
    # stream-splitting construction: attempt i's outcome depends only on the
    # trial seed and its position, never on what attempt i-1 rolled
    model, profile, schedule, x = mini_setup
    pr = params(v_l=330.0)
    plan = plan_injections(schedule, element_targets((9, 0), (7, 10)), pr)
    seq = np.random.SeedSequence(42)
    trial = run_attack_trial(model, x, 2, "nontargeted", plan, profile, pr, seq)
    streams = np.random.SeedSequence(42).spawn(len(plan.glitches) + 1)
    from glitchsim.device import sample_glitch_outcome

    replay = sample_glitch_outcome(
        profile, pr, schedule, np.random.default_rng(streams[2]),
        glitch_start=plan.glitches[1].t_w, jitter=0.0,
    )
    assert trial.attempts[1].outcome == replay


def test_precise_trial_flips_exact_bit(mini_setup):
    model, _, _, x = mini_setup
    base = forward(model, x, 2)
    k = int(np.argmax(base.logits))
    target = TargetSet(
        targets=(CandidateTarget(ElementAddr(9, k), Granularity.BIT, 31),), n_max=1
    )
    r = run_precise_trial(model, x, 2, target, np.random.default_rng(0))
    expected = forward(model, x, 2, plan=[(ElementAddr(9, k), 31)])
    assert r.final_class == expected.predicted_class


@pytest.fixture(scope="module")
def blob_world():
    # linearly separable blobs and a dense model trained by construction:
    # weights equal the class means, so the model is near-perfect
    dataset = synth_dataset(4, 60, 24, seed=9, mean_scale=3.0, noise=0.4)
    rng = np.random.default_rng(9)
    means = rng.standard_normal((4, 24))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= 3.0
    from glitchsim.engine import Dense, Model

    model = Model(
        input_shape=(24,),
        layers=(
            Dense(
                in_features=24,
                out_features=4,
                weights=means.astype(np.float32),
                bias=np.zeros(4, dtype=np.float32),
            ),
        ),
    )
    return model, dataset


def test_campaign_bookkeeping_and_reproducibility(blob_world):
    model, dataset = blob_world
    profile = ideal_profile()
    pr = FaultParams(
        f_c=3600, v_c=1100, f_g=1000, v_g=840, f_h=1235, v_l=770, t_w=0.0, t_d=1.0
    )
    kwargs = dict(
        mode="nontargeted", selection="dependent", injection="device",
        n=2, trials=60, pool=30, sample_size=8, seed=42,
    )
    a = run_campaign(model, dataset, profile, pr, **kwargs)
    b = run_campaign(model, dataset, profile, pr, **kwargs)
    assert a.check_counts()
    assert a.trials == 60
    assert a.records == b.records
    assert a.degradation == b.degradation
    assert a.confusion.sum() == a.completed


def test_campaign_random_selection_and_baseline(blob_world):
    model, dataset = blob_world
    profile = ideal_profile()
    pr = FaultParams(
        f_c=3600, v_c=1100, f_g=1000, v_g=840, f_h=1235, v_l=770, t_w=0.0, t_d=1.0
    )
    rnd = run_campaign(
        model, dataset, profile, pr,
        mode="nontargeted", selection="random_elements", injection="device",
        n=2, trials=40, pool=20, sample_size=8, seed=1,
    )
    assert rnd.check_counts()
    base = run_random_baseline(
        model, dataset, profile, pr,
        attempts=3, trials=40, pool=20, sample_size=8, seed=1,
    )
    assert base.check_counts()
    assert 0.0 <= base.crash_rate <= 1.0


def test_campaign_targeted_mode(blob_world):
    model, dataset = blob_world
    profile = ideal_profile()
    pr = FaultParams(
        f_c=3600, v_c=1100, f_g=1000, v_g=840, f_h=1235, v_l=720, t_w=0.0, t_d=1.0
    )
    rep = run_campaign(
        model, dataset, profile, pr,
        mode="targeted", target_class=2, selection="dependent", injection="device",
        n=2, trials=45, pool=30, sample_size=8, seed=7,
    )
    assert rep.check_counts()
    assert rep.targeted_success is not None
    assert all(
        r["true_label"] != 2 for r in rep.records
    )  # diagonal excluded by construction


def test_campaign_precise_injection(blob_world):
    model, dataset = blob_world
    profile = ideal_profile()
    pr = FaultParams(
        f_c=3600, v_c=1100, f_g=1000, v_g=840, f_h=1235, v_l=770, t_w=0.0, t_d=1.0
    )
    rep = run_campaign(
        model, dataset, profile, pr,
        mode="nontargeted", selection="dependent", injection="precise",
        granularity="bit", n=3, trials=30, pool=15, sample_size=8, seed=3,
    )
    assert rep.completed == rep.trials  # no device, no crashes

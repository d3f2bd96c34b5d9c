import numpy as np
import pytest

from glitchsim.device import (
    DeviceProfile,
    FaultParams,
    build_schedule,
    calibrate_sweep,
    default_fault_params,
    default_profile,
    ideal_profile,
    sample_glitch_outcome,
    safe_boundary_voltage,
    stress,
)
from glitchsim.engine import ElementAddr, enumerate_elements
from glitchsim.presets import dense_model, lenet5_mini


def flat_profile(**overrides) -> DeviceProfile:
    """Constant boundary at 400 mV; crash/noresp off unless overridden."""
    fields = dict(
        ref_pairs=((1000.0, 700.0),),
        boundary_a=400.0,
        boundary_b=0.0,
        sigma=50.0,
        v_scale=65.0,
        f_scale=117.5,
        noresp_threshold=2.4,
        noresp_width=0.25,
        noresp_rate=0.0,
        crash_threshold=2.6,
        crash_width=0.25,
        crash_rate=0.0,
        fault_coeff=1.0,
        cost_per_mac=0.05,
        ref_frequency=1000.0,
        jitter=0.0,
    )
    fields.update(overrides)
    return DeviceProfile(**fields)


def params(v_l, f_h=1200.0, t_d=2.0, t_w=0.0, f_g=1000.0, v_g=700.0):
    return FaultParams(
        f_c=3600.0, v_c=1100.0, f_g=f_g, v_g=v_g, f_h=f_h, v_l=v_l, t_w=t_w, t_d=t_d
    )


def test_boundary_constant_when_slope_zero():
    p = flat_profile()
    for f in (100.0, 1000.0, 3000.0):
        assert safe_boundary_voltage(p, f) == 400.0


def test_boundary_below_reference_pairs():
    p = default_profile()
    for f, v in p.ref_pairs:
        assert safe_boundary_voltage(p, f) <= v


def test_boundary_monotone_in_frequency():
    p = default_profile()
    freqs = np.linspace(100, 2000, 25)
    vals = [safe_boundary_voltage(p, f) for f in freqs]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_stress_zero_at_and_above_boundary():
    p = flat_profile()
    assert stress(p, params(v_l=400.0)) == 0.0
    assert stress(p, params(v_l=900.0)) == 0.0


def test_stress_unit_one_sigma_below_boundary():
    p = flat_profile()
    assert stress(p, params(v_l=350.0)) == 1.0


def test_insufficient_baseline_voltage_rejected():
    p = default_profile()
    with pytest.raises(ValueError):
        stress(p, params(v_l=700.0, f_g=1000.0, v_g=600.0))  # below boundary(1000)=750


def test_fault_params_validation():
    with pytest.raises(ValueError):
        FaultParams(f_c=0, v_c=1, f_g=1, v_g=1, f_h=1, v_l=1, t_w=0, t_d=1)
    with pytest.raises(ValueError):
        params(v_l=700.0, t_w=-1.0)
    params(v_l=700.0, t_w=0.0)  # zero wait is legal


@pytest.fixture(scope="module")
def mini_schedule():
    return build_schedule(lenet5_mini(seed=3), flat_profile(), 1000.0)


def test_safe_pair_never_faults(mini_schedule):
    p = flat_profile()
    rng = np.random.default_rng(0)
    safe = params(v_l=400.0)
    for _ in range(2000):
        assert sample_glitch_outcome(p, safe, mini_schedule, rng).kind == "no_effect"


def test_glitch_after_inference_end_is_no_effect(mini_schedule):
    p = flat_profile()
    rng = np.random.default_rng(1)
    late = params(v_l=300.0, t_w=mini_schedule.total_duration + 5.0)
    for _ in range(50):
        assert sample_glitch_outcome(p, late, mini_schedule, rng).kind == "no_effect"


def test_poisson_fault_count_mean(mini_schedule):
    p = flat_profile()
    pr = params(v_l=325.0, t_d=2.0)  # stress 1.5, lambda = 3.0
    lam = p.fault_coeff * stress(p, pr) * pr.t_d
    rng = np.random.default_rng(2)
    counts = []
    for _ in range(20_000):
        out = sample_glitch_outcome(p, pr, mini_schedule, rng, glitch_start=10.0)
        counts.append(out.count)
    counts = np.array(counts)
    se = counts.std(ddof=1) / np.sqrt(len(counts))
    assert abs(counts.mean() - lam) <= 3 * se


def test_mean_bits_monotone_in_duration_and_stress(mini_schedule):
    p = flat_profile()
    rng = np.random.default_rng(3)

    def mean_bits(v_l, t_d):
        pr = params(v_l=v_l, t_d=t_d)
        return np.mean(
            [
                sample_glitch_outcome(p, pr, mini_schedule, rng, glitch_start=10.0).count
                for _ in range(10_000)
            ]
        )

    by_duration = [mean_bits(350.0, t) for t in (1.0, 2.0, 3.0)]
    assert by_duration[0] < by_duration[1] < by_duration[2]
    by_stress = [mean_bits(v, 2.0) for v in (375.0, 350.0, 325.0)]
    assert by_stress[0] < by_stress[1] < by_stress[2]


def test_cpu_genes_are_inert(mini_schedule):
    p = flat_profile()
    seq = np.random.SeedSequence(77)
    a = [
        sample_glitch_outcome(
            p, params(v_l=330.0), mini_schedule, np.random.default_rng(s), glitch_start=5.0
        )
        for s in seq.spawn(40)
    ]
    seq = np.random.SeedSequence(77)
    pr2 = FaultParams(
        f_c=111.0, v_c=5.0, f_g=1000.0, v_g=700.0, f_h=1200.0, v_l=330.0, t_w=0.0, t_d=2.0
    )
    b = [
        sample_glitch_outcome(p, pr2, mini_schedule, np.random.default_rng(s), glitch_start=5.0)
        for s in seq.spawn(40)
    ]
    assert a == b


def test_reproducible_outcomes(mini_schedule):
    p = flat_profile(crash_rate=1.0, noresp_rate=0.3)
    pr = params(v_l=320.0, v_g=700.0)
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(99)
        runs.append(
            [sample_glitch_outcome(p, pr, mini_schedule, rng, glitch_start=3.0) for _ in range(50)]
        )
    assert runs[0] == runs[1]


def test_schedule_duration_halves_when_frequency_doubles():
    model = lenet5_mini(seed=3)
    p = flat_profile()
    s1 = build_schedule(model, p, 1000.0)
    s2 = build_schedule(model, p, 2000.0)
    assert s2.total_duration == s1.total_duration / 2.0
    for j in range(len(s1.costs)):
        assert s2.costs[j] == s1.costs[j] / 2.0


def test_schedule_dense_example():
    model = dense_model(4, 10, seed=0)
    p = flat_profile()
    s = build_schedule(model, p, 500.0)  # scale = 2
    assert s.counts == (10,)
    assert s.costs[0] == 4 * 0.05 * 2.0
    assert s.total_duration == 10 * s.costs[0]
    assert s.window(ElementAddr(0, 0)) == (0.0, s.costs[0])


def test_schedule_total_matches_mac_formula():
    model = lenet5_mini(seed=3)
    p = flat_profile()
    s = build_schedule(model, p, 1000.0)
    # independent op-count oracle per layer kind
    ops = (
        784 * (1 * 3 * 3) + 784 * 1 + 196 * 4 + 392 * (4 * 3 * 3) + 392 * 1
        + 72 * 4 + 72 * 1 + 32 * 72 + 32 * 1 + 10 * 32
    )
    assert s.total_duration == pytest.approx(ops * 0.05, rel=1e-12)


def test_schedule_windows_tile_exactly(mini_schedule):
    model = lenet5_mini(seed=3)
    prev_end = 0.0
    for addr in enumerate_elements(model):
        ws, we = mini_schedule.window(addr)
        assert ws == prev_end
        assert we > ws
        prev_end = we
    assert prev_end == mini_schedule.total_duration


def test_ranges_in_matches_bruteforce(mini_schedule):
    model = lenet5_mini(seed=3)
    addrs = enumerate_elements(model)
    rng = np.random.default_rng(5)
    for _ in range(40):
        t0 = float(rng.uniform(-5, mini_schedule.total_duration + 5))
        t1 = t0 + float(rng.uniform(0, 30))
        got = {
            ElementAddr(j, k)
            for j, lo, hi in mini_schedule.ranges_in(t0, t1)
            for k in range(lo, hi)
        }
        expected = set()
        for addr in addrs:
            ws, we = mini_schedule.window(addr)
            if ws < t1 and we > t0:
                expected.add(addr)
        assert got == expected


def test_sweep_all_safe_grid(mini_schedule):
    p = flat_profile()
    rows = calibrate_sweep(p, mini_schedule, [500.0, 600.0], [1100.0, 1300.0], 2.0, 200)
    for r in rows:
        assert r.rate_no_effect == 1.0
        assert r.mean_bits == 0.0


def test_sweep_rates_partition(mini_schedule):
    p = default_profile()
    rows = calibrate_sweep(
        p, mini_schedule, [650.0, 710.0], [1235.0], 2.0, 500,
        base_params=default_fault_params(),
    )
    for r in rows:
        total = r.rate_no_effect + r.rate_fault + r.rate_crash + r.rate_noresp
        assert total == pytest.approx(1.0, abs=1e-9)


def test_sweep_deterministic(mini_schedule):
    p = default_profile()
    a = calibrate_sweep(p, mini_schedule, [700.0], [1235.0], 2.0, 300, seed=5)
    b = calibrate_sweep(p, mini_schedule, [700.0], [1235.0], 2.0, 300, seed=5)
    assert a == b


def test_profile_invariants_enforced():
    with pytest.raises(ValueError):
        flat_profile(boundary_b=-0.1)
    with pytest.raises(ValueError):
        flat_profile(ref_pairs=((1000.0, 300.0),))  # reference below boundary
    with pytest.raises(ValueError):
        flat_profile(noresp_threshold=3.0)  # above crash threshold
    with pytest.raises(ValueError):
        flat_profile(sigma=0.0)


def test_ideal_profile_never_crashes(mini_schedule):
    p = ideal_profile()
    pr = params(v_l=500.0, f_h=1400.0, v_g=840.0)  # deep stress
    rng = np.random.default_rng(8)
    kinds = {
        sample_glitch_outcome(p, pr, mini_schedule, rng, glitch_start=5.0).kind
        for _ in range(500)
    }
    assert "crash" not in kinds and "no_response" not in kinds

"""Parametric stand-in for GPU DVFS glitch physics.

Two scalars drive a glitch's fate:

* fault stress s = max(0, (V_min(F_h) - V_l) / sigma), the normalized deficit
  of the glitch voltage below the safe boundary V_min(F) = a + b*F. s == 0
  means the pair is safe and the glitch deterministically does nothing.
* operating-point excursion d = max((V_G - V_l)/v_scale, (F_h - F_G)/f_scale)
  (each term clamped at 0), how far a single axis was yanked from the
  baseline. Crash and no-response are logistic hazards in d integrated over
  the hold duration; this is what makes pure undervolting or pure
  overclocking crash-prone while a combined moderate push mostly faults.

Surviving glitches draw a Poisson(c * s * T_d) fault count; fault positions
land uniformly on elements whose execution windows overlap the glitch
interval, with a uniform bit position in the 32-bit word.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .engine import ElementAddr, Model


@dataclass(frozen=True)
class FaultParams:
    """The attack parameter tuple: CPU/GPU baselines, glitch pair, timing."""

    f_c: float  # CPU frequency, MHz (inert; carried for fidelity)
    v_c: float  # CPU voltage, mV (inert)
    f_g: float  # GPU baseline/restore frequency, MHz
    v_g: float  # GPU baseline/restore voltage, mV
    f_h: float  # glitch frequency, MHz
    v_l: float  # glitch voltage, mV
    t_w: float  # wait time, ms; in campaigns: offset added to planned starts
    t_d: float  # glitch hold duration, ms

    def __post_init__(self):
        for name in ("f_c", "v_c", "f_g", "v_g", "f_h", "v_l", "t_d"):
            if getattr(self, name) <= 0:
                raise ValueError(f"FaultParams.{name} must be strictly positive")
        if self.t_w < 0:
            raise ValueError("FaultParams.t_w must be >= 0")


@dataclass(frozen=True)
class DeviceProfile:
    ref_pairs: tuple[tuple[float, float], ...]  # reference (F, V) points
    boundary_a: float  # V_min(F) intercept, mV
    boundary_b: float  # V_min(F) slope, mV/MHz
    sigma: float  # fault stress scale, mV
    v_scale: float  # voltage excursion scale, mV
    f_scale: float  # frequency excursion scale, MHz
    noresp_threshold: float
    noresp_width: float
    noresp_rate: float  # hazard per ms at full logistic
    crash_threshold: float
    crash_width: float
    crash_rate: float
    fault_coeff: float  # bits per unit stress per ms
    cost_per_mac: float  # ms per multiply-accumulate at ref_frequency
    ref_frequency: float  # MHz
    jitter: float  # schedule shift half-width, ms
    seed: int = 0

    def __post_init__(self):
        if self.boundary_b < 0:
            raise ValueError("boundary slope must be >= 0")
        for f, v in self.ref_pairs:
            if self.boundary_a + self.boundary_b * f > v:
                raise ValueError(
                    f"boundary voltage exceeds reference voltage at F={f}"
                )
        for name in ("sigma", "v_scale", "f_scale", "cost_per_mac", "ref_frequency"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DeviceProfile.{name} must be strictly positive")
        for name in ("noresp_rate", "crash_rate", "fault_coeff", "jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"DeviceProfile.{name} must be >= 0")
        if not 0 < self.noresp_threshold <= self.crash_threshold:
            raise ValueError("need 0 < noresp_threshold <= crash_threshold")


def default_profile() -> DeviceProfile:
    """Calibrated default: the (V_l=710 mV, F offset=235 MHz) cell is the best
    single-bit-fault cell of the default sweep grid, pure undervolt / pure
    overclock corridors crash or hang at high ratio, and T_d of 1-3 ms yields
    a mean of about one faulted bit."""
    return DeviceProfile(
        ref_pairs=((600, 720), (800, 780), (1000, 840), (1200, 900), (1400, 960)),
        boundary_a=450.0,
        boundary_b=0.3,
        sigma=50.0,
        v_scale=65.0,
        f_scale=117.5,
        noresp_threshold=2.4,
        noresp_width=0.25,
        noresp_rate=0.35,
        crash_threshold=2.6,
        crash_width=0.25,
        crash_rate=1.2,
        fault_coeff=0.2262,
        cost_per_mac=0.05,
        ref_frequency=1000.0,
        jitter=0.5,
    )


def ideal_profile() -> DeviceProfile:
    """Near-ideal attacker conditions: no crashes or hangs, no timing jitter,
    a slower device (wider element windows, so planned glitches land on their
    targets), and one expected faulted bit per unit stress-ms."""
    return replace(
        default_profile(),
        noresp_rate=0.0,
        crash_rate=0.0,
        fault_coeff=1.0,
        cost_per_mac=0.2,
        jitter=0.0,
    )


def default_fault_params() -> FaultParams:
    return FaultParams(
        f_c=3600.0, v_c=1100.0, f_g=1000.0, v_g=840.0,
        f_h=1235.0, v_l=710.0, t_w=0.0, t_d=2.0,
    )


def ideal_fault_params() -> FaultParams:
    # stress just above 1 at T_d=1 with the ideal profile's fault_coeff=1:
    # about one single-bit fault per attempt
    return replace(default_fault_params(), v_l=770.0, t_d=1.0)


DEFAULT_V_GRID = (630.0, 670.0, 710.0, 750.0, 790.0, 840.0)
DEFAULT_F_OFFSETS = (0.0, 60.0, 235.0, 335.0, 460.0)


def safe_boundary_voltage(profile: DeviceProfile, f: float) -> float:
    """Lowest safe voltage for frequency f (mV); linear in f."""
    if f <= 0:
        raise ValueError("frequency must be strictly positive")
    return profile.boundary_a + profile.boundary_b * f


def check_params(profile: DeviceProfile, params: FaultParams) -> None:
    if params.v_g < safe_boundary_voltage(profile, params.f_g):
        raise ValueError(
            f"V_G={params.v_g} mV cannot sustain F_G={params.f_g} MHz "
            f"(boundary {safe_boundary_voltage(profile, params.f_g)} mV)"
        )


def stress(profile: DeviceProfile, params: FaultParams) -> float:
    """Normalized deficit of the glitch voltage below the safe boundary."""
    check_params(profile, params)
    return max(0.0, (safe_boundary_voltage(profile, params.f_h) - params.v_l) / profile.sigma)


def excursion(profile: DeviceProfile, params: FaultParams) -> float:
    ev = max(0.0, params.v_g - params.v_l) / profile.v_scale
    ef = max(0.0, params.f_h - params.f_g) / profile.f_scale
    return max(ev, ef)


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _hazard_prob(rate: float, t_d: float, drive: float, threshold: float, width: float) -> float:
    return 1.0 - math.exp(-rate * t_d * _logistic((drive - threshold) / width))


def crash_probability(profile: DeviceProfile, params: FaultParams) -> float:
    d = excursion(profile, params)
    return _hazard_prob(profile.crash_rate, params.t_d, d, profile.crash_threshold, profile.crash_width)


def noresp_probability(profile: DeviceProfile, params: FaultParams) -> float:
    d = excursion(profile, params)
    return _hazard_prob(profile.noresp_rate, params.t_d, d, profile.noresp_threshold, profile.noresp_width)


@dataclass(frozen=True)
class GlitchOutcome:
    kind: str  # no_effect | faults | crash | no_response
    positions: tuple[tuple[ElementAddr, int], ...] = ()

    def __post_init__(self):
        if self.kind not in ("no_effect", "faults", "crash", "no_response"):
            raise ValueError(f"unknown outcome kind {self.kind!r}")
        if self.kind == "faults" and not self.positions:
            raise ValueError("faults outcome needs at least one position")
        if self.kind != "faults" and self.positions:
            raise ValueError("only faults outcomes carry positions")

    @property
    def count(self) -> int:
        return len(self.positions)


NO_EFFECT = GlitchOutcome("no_effect")
CRASH = GlitchOutcome("crash")
NO_RESPONSE = GlitchOutcome("no_response")


@dataclass(frozen=True)
class ExecutionSchedule:
    """Per-element compute windows: layer j's element k runs in
    [start[j] + k*cost[j], start[j] + (k+1)*cost[j]). Windows tile
    [0, total) in enumerate_elements order."""

    layer_starts: tuple[float, ...]  # length L+1, cumulative
    costs: tuple[float, ...]  # per-element window length per layer
    counts: tuple[int, ...]
    frequency: float

    @property
    def total_duration(self) -> float:
        return self.layer_starts[-1]

    def window(self, addr: ElementAddr) -> tuple[float, float]:
        j, k = addr
        if not 0 <= j < len(self.counts) or not 0 <= k < self.counts[j]:
            raise KeyError(f"element {addr} not in schedule")
        s = self.layer_starts[j]
        return (s + k * self.costs[j], s + (k + 1) * self.costs[j])

    def ranges_in(self, t0: float, t1: float) -> list[tuple[int, int, int]]:
        """(layer, k_lo, k_hi_exclusive) ranges of elements whose windows
        intersect [t0, t1)."""
        if t1 <= t0:
            return []
        out = []
        for j, n in enumerate(self.counts):
            if n == 0:
                continue
            s, e, c = self.layer_starts[j], self.layer_starts[j + 1], self.costs[j]
            if e <= t0 or s >= t1:
                continue
            lo = int((t0 - s) / c) if t0 > s else 0
            lo = min(max(lo, 0), n - 1)
            # adjust against the exact overlap predicate: end > t0, start < t1
            while lo > 0 and s + lo * c > t0:
                lo -= 1
            while lo < n and s + (lo + 1) * c <= t0:
                lo += 1
            hi = int((t1 - s) / c) + 1 if t1 < e else n
            hi = min(max(hi, lo), n)
            while hi > lo and s + (hi - 1) * c >= t1:
                hi -= 1
            while hi < n and s + hi * c < t1:
                hi += 1
            if hi > lo:
                out.append((j, lo, hi))
        return out


def build_schedule(model: Model, profile: DeviceProfile, f: float) -> ExecutionSchedule:
    """Execution timeline of the model at GPU frequency f (MHz)."""
    if f <= 0:
        raise ValueError("frequency must be strictly positive")
    scale = profile.ref_frequency / f
    starts = [0.0]
    costs = []
    counts = []
    for layer, n in zip(model.layers, model.element_counts):
        c = (layer.ops_per_element * profile.cost_per_mac) * scale
        costs.append(c)
        counts.append(n)
        starts.append(starts[-1] + n * c)
    return ExecutionSchedule(
        layer_starts=tuple(starts), costs=tuple(costs), counts=tuple(counts), frequency=f
    )


def sample_glitch_outcome(
    profile: DeviceProfile,
    params: FaultParams,
    schedule: ExecutionSchedule,
    rng: np.random.Generator,
    glitch_start: float | None = None,
    jitter: float = 0.0,
) -> GlitchOutcome:
    """One glitch against one (jitter-shifted) execution of the schedule.

    Draw order (fixed for reproducibility): crash gate, no-response gate,
    Poisson fault count, element indices, bit positions.
    """
    s = stress(profile, params)
    if s == 0.0:
        return NO_EFFECT
    if rng.random() < crash_probability(profile, params):
        return CRASH
    if rng.random() < noresp_probability(profile, params):
        return NO_RESPONSE
    k = int(rng.poisson(profile.fault_coeff * s * params.t_d))
    if k == 0:
        return NO_EFFECT
    start = params.t_w if glitch_start is None else glitch_start
    # schedule shifted by +jitter == glitch shifted by -jitter
    ranges = schedule.ranges_in(start - jitter, start + params.t_d - jitter)
    total = sum(hi - lo for _, lo, hi in ranges)
    if total == 0:
        return NO_EFFECT
    picks = rng.integers(0, total, size=k)
    bits = rng.integers(0, 32, size=k)
    positions = []
    for pick, bit in zip(picks, bits):
        idx = int(pick)
        for j, lo, hi in ranges:
            span = hi - lo
            if idx < span:
                positions.append((ElementAddr(j, lo + idx), int(bit)))
                break
            idx -= span
    return GlitchOutcome("faults", positions=tuple(positions))


class CellStats(NamedTuple):
    v_l: float
    f_h: float
    rate_no_effect: float
    rate_fault: float
    rate_crash: float
    rate_noresp: float
    mean_bits: float
    rate_single_bit: float


def calibrate_sweep(
    profile: DeviceProfile,
    schedule: ExecutionSchedule,
    v_grid,
    f_grid,
    t_d: float,
    trials: int,
    seed: int = 0,
    base_params: FaultParams | None = None,
) -> list[CellStats]:
    """Empirical outcome rates per (V_l, F_h) cell; glitch starts are drawn
    uniformly over the schedule. Deterministic for a fixed seed."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    v_grid = list(v_grid)
    f_grid = list(f_grid)
    if not v_grid or not f_grid:
        raise ValueError("grids must be non-empty")
    base = base_params or default_fault_params()
    rows = []
    total_t = schedule.total_duration
    for ci, (v_l, f_h) in enumerate((v, f) for v in v_grid for f in f_grid):
        params = replace(base, v_l=v_l, f_h=f_h, t_d=t_d)
        rng = np.random.default_rng(np.random.SeedSequence([seed, ci]))
        tally = {"no_effect": 0, "faults": 0, "crash": 0, "no_response": 0}
        bits = 0
        singles = 0
        for _ in range(trials):
            t_w = rng.uniform(0.0, total_t)
            out = sample_glitch_outcome(profile, params, schedule, rng, glitch_start=t_w)
            tally[out.kind] += 1
            bits += out.count
            singles += out.count == 1
        rows.append(
            CellStats(
                v_l=v_l,
                f_h=f_h,
                rate_no_effect=tally["no_effect"] / trials,
                rate_fault=tally["faults"] / trials,
                rate_crash=tally["crash"] / trials,
                rate_noresp=tally["no_response"] / trials,
                mean_bits=bits / trials,
                rate_single_bit=singles / trials,
            )
        )
    return rows

"""The four-step attacker cycle against the simulated device: plan glitch
timings for a target set, run wait/glitch/recover cycles during a simulated
inference, and aggregate campaign statistics.

A trial's faults are collected across its attempts (XOR parity: an even
number of hits on the same (element, bit) cancels) and applied to the
in-flight feature maps of one forward pass. Crash or no-response aborts the
trial; such trials are excluded from accuracy and reported as rates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import sensitivity as sens
from .bits import Granularity, bits_of
from .device import (
    DeviceProfile,
    ExecutionSchedule,
    FaultParams,
    sample_glitch_outcome,
)
from .engine import ElementAddr, Model, forward
from .io_formats import Dataset
from .sensitivity import CandidateTarget, LossMap, TargetSet


class PlannedGlitch(NamedTuple):
    targets: tuple[CandidateTarget, ...]
    t_w: float


@dataclass(frozen=True)
class AttackPlan:
    glitches: tuple[PlannedGlitch, ...]
    schedule: ExecutionSchedule


@dataclass(frozen=True)
class InjectionAttempt:
    targets: tuple[CandidateTarget, ...]
    planned_t_w: float
    params: FaultParams
    outcome: object  # GlitchOutcome
    on_target: bool


@dataclass(frozen=True)
class TrialResult:
    input_id: int
    true_label: int
    mode: str  # nontargeted | targeted
    target_class: int | None
    attempts: tuple[InjectionAttempt, ...]
    status: str  # completed | crash | no_response
    baseline_class: int
    final_class: int | None


def plan_injections(
    schedule: ExecutionSchedule, targets: TargetSet, params: FaultParams
) -> AttackPlan:
    """Glitch start per target: the target window's midpoint minus T_d/2,
    clamped to >= 0; attempts sorted by start; overlapping planned glitch
    intervals merge into one attempt covering all their targets."""
    planned = []
    for target in targets.targets:
        try:
            ws, we = schedule.window(target.addr)
        except KeyError as e:
            raise ValueError(f"target {target.addr} has no schedule window") from e
        t_w = max(0.0, (ws + we) / 2.0 - params.t_d / 2.0)
        planned.append((t_w, target))
    planned.sort(key=lambda p: p[0])
    merged: list[PlannedGlitch] = []
    for t_w, target in planned:
        if merged and t_w < merged[-1].t_w + params.t_d:
            last = merged[-1]
            merged[-1] = PlannedGlitch(last.targets + (target,), last.t_w)
        else:
            merged.append(PlannedGlitch((target,), t_w))
    return AttackPlan(glitches=tuple(merged), schedule=schedule)


def _parity_reduce(positions) -> list[tuple[ElementAddr, int]]:
    counts: dict[tuple[ElementAddr, int], int] = {}
    order = []
    for pos in positions:
        if pos not in counts:
            order.append(pos)
            counts[pos] = 0
        counts[pos] += 1
    return [pos for pos in order if counts[pos] % 2 == 1]


def run_attack_trial(
    model: Model,
    x: np.ndarray,
    t: int,
    mode: str,
    plan: AttackPlan,
    profile: DeviceProfile,
    params: FaultParams,
    rng_seq: np.random.SeedSequence,
    input_id: int = 0,
    target_class: int | None = None,
    baseline_class: int | None = None,
) -> TrialResult:
    """One wait/glitch/recover cycle per planned attempt, oldest first.

    Preparation re-seeds the trial's jitter draw (the only persistent state);
    recovery to (F_G, V_G) after each attempt is implicit: attempts draw from
    independent spawned RNG streams, so no attempt influences the next.
    """
    if baseline_class is None:
        baseline_class = forward(model, x, t).predicted_class
    streams = rng_seq.spawn(len(plan.glitches) + 1)
    prep_rng = np.random.default_rng(streams[0])
    jitter = (
        prep_rng.uniform(-profile.jitter, profile.jitter) if profile.jitter > 0 else 0.0
    )
    attempts = []
    status = "completed"
    positions: list[tuple[ElementAddr, int]] = []
    for i, glitch in enumerate(plan.glitches):
        rng = np.random.default_rng(streams[i + 1])
        start = glitch.t_w + params.t_w
        outcome = sample_glitch_outcome(
            profile, params, plan.schedule, rng, glitch_start=start, jitter=jitter
        )
        planned_addrs = {g.addr for g in glitch.targets}
        hit = any(addr in planned_addrs for addr, _ in outcome.positions)
        attempts.append(
            InjectionAttempt(
                targets=glitch.targets,
                planned_t_w=glitch.t_w,
                params=params,
                outcome=outcome,
                on_target=hit,
            )
        )
        if outcome.kind == "crash":
            status = "crash"
            break
        if outcome.kind == "no_response":
            status = "no_response"
            break
        positions.extend(outcome.positions)
    final_class = None
    if status == "completed":
        entries = _parity_reduce(positions)
        final_class = forward(model, x, t, plan=entries).predicted_class
    return TrialResult(
        input_id=input_id,
        true_label=t,
        mode=mode,
        target_class=target_class,
        attempts=tuple(attempts),
        status=status,
        baseline_class=baseline_class,
        final_class=final_class,
    )


def run_precise_trial(
    model: Model,
    x: np.ndarray,
    t: int,
    targets: TargetSet,
    rng: np.random.Generator,
    input_id: int = 0,
    mode: str = "nontargeted",
    target_class: int | None = None,
    baseline_class: int | None = None,
) -> TrialResult:
    """Device-free simulation: flip one random bit inside each target's bit
    set (the exact bit for BIT targets), then run one forward pass."""
    if baseline_class is None:
        baseline_class = forward(model, x, t).predicted_class
    entries = []
    for target in targets.targets:
        choices = bits_of(target.granularity, target.anchor_bit)
        bit = choices[int(rng.integers(0, len(choices)))] if len(choices) > 1 else choices[0]
        entries.append((target.addr, bit))
    final = forward(model, x, t, plan=_parity_reduce(entries))
    return TrialResult(
        input_id=input_id,
        true_label=t,
        mode=mode,
        target_class=target_class,
        attempts=(),
        status="completed",
        baseline_class=baseline_class,
        final_class=final.predicted_class,
    )


@dataclass
class CampaignReport:
    trials: int
    completed: int
    crashes: int
    no_responses: int
    baseline_accuracy: float  # over the trial stream, percent
    attacked_accuracy: float  # over completed trials, percent
    degradation: float  # percentage points
    crash_rate: float
    noresp_rate: float
    confusion: np.ndarray  # (C, C) true x predicted, completed trials
    targeted_success: float | None
    records: list[dict]

    def check_counts(self) -> bool:
        return self.completed + self.crashes + self.no_responses == self.trials


def _random_element_targets(
    model: Model, n: int, rng: np.random.Generator
) -> TargetSet:
    counts = model.element_counts
    total = sum(counts)
    flat = rng.choice(total, size=min(n, total), replace=False)
    offsets = np.cumsum([0] + list(counts))
    targets = []
    for f in sorted(int(v) for v in flat):
        j = int(np.searchsorted(offsets, f, side="right")) - 1
        targets.append(
            CandidateTarget(ElementAddr(j, f - int(offsets[j])), Granularity.ELEMENT)
        )
    return TargetSet(targets=tuple(targets), n_max=n)


def _record(result: TrialResult) -> dict:
    return {
        "input_id": result.input_id,
        "true_label": result.true_label,
        "mode": result.mode,
        "target_class": result.target_class,
        "status": result.status,
        "baseline_class": result.baseline_class,
        "final_class": result.final_class,
        "attempts": [
            {
                "t_w": a.planned_t_w,
                "outcome": a.outcome.kind,
                "bits": a.outcome.count,
                "on_target": a.on_target,
            }
            for a in result.attempts
        ],
    }


def run_campaign(
    model: Model,
    dataset: Dataset,
    profile: DeviceProfile,
    params: FaultParams,
    *,
    mode: str = "nontargeted",
    target_class: int | None = None,
    selection: str = "dependent",  # dependent | independent | random_elements
    injection: str = "device",  # device | precise
    granularity: str = "element",
    n: int = 10,
    trials: int = 1000,
    pool: int = 100,
    sample_size: int = 32,
    seed: int = 0,
    schedule: ExecutionSchedule | None = None,
    loss_maps: dict[int, LossMap] | None = None,
    targets: TargetSet | None = None,
    jobs: int = 1,
) -> CampaignReport:
    """Select targets, plan, and run `trials` attack trials over the dataset.

    The search sample is dataset[:sample_size]; the evaluation pool is the
    next `pool` items; trial i attacks pool item i mod pool. With
    precomputed loss maps (keyed by pool index) the dependent search reuses
    them; an explicit `targets` set skips selection entirely. jobs > 1
    spreads trials over processes; records come back in trial order either
    way, so results are independent of scheduling.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if mode == "targeted" and target_class is None:
        raise ValueError("targeted mode needs a target class")
    from .device import build_schedule  # local to avoid import cycle risk

    if schedule is None:
        schedule = build_schedule(model, profile, params.f_g)
    pool_x = dataset.x[sample_size : sample_size + pool]
    pool_y = dataset.labels[sample_size : sample_size + pool]
    if mode == "targeted":
        keep = pool_y != target_class
        pool_x, pool_y = pool_x[keep], pool_y[keep]
    if len(pool_x) == 0:
        raise ValueError("evaluation pool is empty; dataset too small for sample+pool")
    n_pool = len(pool_x)

    baseline_classes = [
        forward(model, pool_x[i], int(pool_y[i])).predicted_class
        for i in range(n_pool)
    ]

    root = np.random.SeedSequence(seed)
    search_rng = np.random.default_rng(root.spawn(1)[0])
    attack_target = target_class if mode == "targeted" else None

    shared_targets: TargetSet | None = targets
    if targets is None and selection == "independent":
        sample = [
            (dataset.x[i], int(dataset.labels[i]))
            for i in range(min(sample_size, len(dataset)))
        ]
        shared_targets = sens.input_independent_search(
            model, sample, n, granularity, attack_target
        )

    used = sorted({i % n_pool for i in range(min(trials, n_pool))})
    per_input_targets: dict[int, TargetSet] = {}
    if shared_targets is None:
        if selection == "dependent":
            maps = dict(loss_maps) if loss_maps else {}
            missing = [i for i in used if i not in maps]
            if missing:
                fresh = sens.batch_loss_maps(
                    model, [pool_x[i] for i in missing], jobs=jobs
                )
                maps.update(dict(zip(missing, fresh)))
            for i in used:
                grads = sens.gradient_map(maps[i], int(pool_y[i]), attack_target)
                table = sens.table_from_gradients(grads, granularity)
                per_input_targets[i] = sens.get_top_set(table, n)
        elif selection == "random_elements":
            for i in used:
                per_input_targets[i] = _random_element_targets(model, n, search_rng)
        else:
            raise ValueError(f"unknown selection {selection!r}")

    def targets_for(idx: int) -> TargetSet:
        return shared_targets if shared_targets is not None else per_input_targets[idx]

    plans = {i: plan_injections(schedule, targets_for(i), params) for i in used}
    trial_seqs = root.spawn(trials + 1)[1:]
    block = _TrialBlock(
        model=model, pool_x=pool_x, pool_y=pool_y,
        baseline_classes=baseline_classes, plans=plans,
        targets={i: targets_for(i) for i in used},
        mode=mode, target_class=target_class, injection=injection,
        profile=profile, params=params,
    )
    if jobs <= 1 or trials < 4:
        results = block.run(list(range(trials)), trial_seqs)
    else:
        from concurrent.futures import ProcessPoolExecutor

        chunks = np.array_split(np.arange(trials), jobs)
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(
                ex.map(
                    _run_block,
                    [
                        (block, [int(i) for i in chunk], [trial_seqs[i] for i in chunk])
                        for chunk in chunks
                        if len(chunk)
                    ],
                )
            )
        results = [r for part in parts for r in part]
    return summarize(results, model.class_count, baseline_classes, pool_y)


@dataclass(frozen=True)
class _TrialBlock:
    model: Model
    pool_x: np.ndarray
    pool_y: np.ndarray
    baseline_classes: list
    plans: dict
    targets: dict
    mode: str
    target_class: int | None
    injection: str
    profile: DeviceProfile
    params: FaultParams

    def run(self, indices, seqs) -> list[TrialResult]:
        out = []
        n_pool = len(self.pool_x)
        for i, seq in zip(indices, seqs):
            idx = i % n_pool
            x, y = self.pool_x[idx], int(self.pool_y[idx])
            if self.injection == "precise":
                out.append(
                    run_precise_trial(
                        self.model, x, y, self.targets[idx],
                        np.random.default_rng(seq),
                        input_id=idx, mode=self.mode,
                        target_class=self.target_class,
                        baseline_class=self.baseline_classes[idx],
                    )
                )
            else:
                out.append(
                    run_attack_trial(
                        self.model, x, y, self.mode, self.plans[idx],
                        self.profile, self.params, seq,
                        input_id=idx, target_class=self.target_class,
                        baseline_class=self.baseline_classes[idx],
                    )
                )
        return out


def _run_block(args) -> list[TrialResult]:
    block, indices, seqs = args
    return block.run(indices, seqs)


def run_random_baseline(
    model: Model,
    dataset: Dataset,
    profile: DeviceProfile,
    params: FaultParams,
    *,
    attempts: int = 10,
    trials: int = 1000,
    pool: int = 100,
    sample_size: int = 32,
    seed: int = 0,
    v_range: tuple[float, float] = (550.0, 1100.0),
    f_range: tuple[float, float] = (1000.0, 1500.0),
    t_d_range: tuple[float, float] = (1.0, 4.0),
    schedule: ExecutionSchedule | None = None,
) -> CampaignReport:
    """Uncontrolled random fault injection: every attempt draws a uniform
    glitch start over the whole inference and uniform legal (V_l, F_h, T_d)."""
    from .device import build_schedule

    if schedule is None:
        schedule = build_schedule(model, profile, params.f_g)
    pool_x = dataset.x[sample_size : sample_size + pool]
    pool_y = dataset.labels[sample_size : sample_size + pool]
    if len(pool_x) == 0:
        raise ValueError("evaluation pool is empty")
    baseline_classes = [
        forward(model, pool_x[i], int(pool_y[i])).predicted_class
        for i in range(len(pool_x))
    ]
    root = np.random.SeedSequence(seed)
    trial_seqs = root.spawn(trials)
    results = []
    total_t = schedule.total_duration
    for i in range(trials):
        idx = i % len(pool_x)
        x, y = pool_x[idx], int(pool_y[idx])
        streams = trial_seqs[i].spawn(attempts + 1)
        draw_rng = np.random.default_rng(streams[0])
        status = "completed"
        attempt_records = []
        positions: list[tuple[ElementAddr, int]] = []
        for a in range(attempts):
            t_w = float(draw_rng.uniform(0.0, total_t))
            p = replace(
                params,
                v_l=float(draw_rng.uniform(*v_range)),
                f_h=float(draw_rng.uniform(*f_range)),
                t_d=float(draw_rng.uniform(*t_d_range)),
                t_w=0.0,
            )
            rng = np.random.default_rng(streams[a + 1])
            jitter = (
                rng.uniform(-profile.jitter, profile.jitter)
                if profile.jitter > 0
                else 0.0
            )
            outcome = sample_glitch_outcome(
                profile, p, schedule, rng, glitch_start=t_w, jitter=jitter
            )
            attempt_records.append(
                InjectionAttempt(
                    targets=(), planned_t_w=t_w, params=p, outcome=outcome,
                    on_target=False,
                )
            )
            if outcome.kind == "crash":
                status = "crash"
                break
            if outcome.kind == "no_response":
                status = "no_response"
                break
            positions.extend(outcome.positions)
        final_class = None
        if status == "completed":
            final_class = forward(
                model, x, y, plan=_parity_reduce(positions)
            ).predicted_class
        results.append(
            TrialResult(
                input_id=idx, true_label=y, mode="nontargeted", target_class=None,
                attempts=tuple(attempt_records), status=status,
                baseline_class=baseline_classes[idx], final_class=final_class,
            )
        )
    return summarize(results, model.class_count, baseline_classes, pool_y)


def summarize(
    results: Sequence[TrialResult],
    class_count: int,
    baseline_classes: Sequence[int],
    pool_labels,
) -> CampaignReport:
    trials = len(results)
    completed = [r for r in results if r.status == "completed"]
    crashes = sum(r.status == "crash" for r in results)
    norsps = sum(r.status == "no_response" for r in results)
    base_hits = sum(r.baseline_class == r.true_label for r in results)
    baseline_acc = 100.0 * base_hits / trials
    if completed:
        attacked_acc = 100.0 * sum(
            r.final_class == r.true_label for r in completed
        ) / len(completed)
    else:
        attacked_acc = baseline_acc  # no surviving evidence of degradation
    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    for r in completed:
        if r.final_class >= 0:  # invalid-class outputs stay out of the matrix
            confusion[r.true_label, r.final_class] += 1
    eligible = [
        r
        for r in completed
        if r.target_class is not None
        and r.baseline_class == r.true_label
        and r.true_label != r.target_class
    ]
    targeted_success = (
        100.0 * sum(r.final_class == r.target_class for r in eligible) / len(eligible)
        if eligible
        else None
    )
    return CampaignReport(
        trials=trials,
        completed=len(completed),
        crashes=crashes,
        no_responses=norsps,
        baseline_accuracy=baseline_acc,
        attacked_accuracy=attacked_acc,
        degradation=baseline_acc - attacked_acc,
        crash_rate=crashes / trials,
        noresp_rate=norsps / trials,
        confusion=confusion,
        targeted_success=targeted_success,
        records=[_record(r) for r in results],
    )

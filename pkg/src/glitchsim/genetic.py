"""Genetic refinement of the fault-injection parameters (F_h, V_l, T_W, T_d)
with accuracy degradation as the fitness.

Tournament selection (size 2) with a diversity rule: a seed value selected
more than 20 times is no longer eligible and the tournament's lower-fitness
contender is taken instead. The single best seed of each generation is
copied unmodified into the next (elitism), which makes the best-so-far
trace monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .attack import AttackPlan, run_attack_trial
from .device import DeviceProfile, FaultParams
from .engine import Model
from .io_formats import Dataset


class Seed(NamedTuple):
    f_h: float  # MHz
    v_l: float  # mV
    t_w: float  # ms, offset added to planned glitch starts
    t_d: float  # ms


MUTATION_STEPS = (1.0, 10.0, 1.0, 1.0)  # MHz, mV, ms, ms
MUTATION_PROB = 0.005
MAX_SELECTIONS = 20


@dataclass(frozen=True)
class GeneRanges:
    f_h: tuple[float, float] = (1000.0, 1500.0)
    v_l: tuple[float, float] = (550.0, 1100.0)
    t_w: tuple[float, float] = (0.0, 10.0)
    t_d: tuple[float, float] = (1.0, 6.0)

    def clamp(self, seed: Seed) -> Seed:
        spans = (self.f_h, self.v_l, self.t_w, self.t_d)
        return Seed(*(min(max(g, lo), hi) for g, (lo, hi) in zip(seed, spans)))

    def contains(self, seed: Seed) -> bool:
        spans = (self.f_h, self.v_l, self.t_w, self.t_d)
        return all(lo <= g <= hi for g, (lo, hi) in zip(seed, spans))


def crossover(
    a: Seed, b: Seed, rng: np.random.Generator, ranges: GeneRanges = GeneRanges()
) -> tuple[Seed, Seed]:
    """Exchange a random contiguous gene range between the two seeds."""
    lo = int(rng.integers(0, 5))
    hi = int(rng.integers(0, 5))
    if lo > hi:
        lo, hi = hi, lo
    ga, gb = list(a), list(b)
    ga[lo:hi], gb[lo:hi] = gb[lo:hi], ga[lo:hi]
    return ranges.clamp(Seed(*ga)), ranges.clamp(Seed(*gb))


def mutate(
    s: Seed, rng: np.random.Generator, ranges: GeneRanges = GeneRanges()
) -> Seed:
    """Each gene independently moves one step up or down with p=0.5%."""
    genes = list(s)
    for i, step in enumerate(MUTATION_STEPS):
        if rng.random() < MUTATION_PROB:
            genes[i] += step if rng.random() < 0.5 else -step
    return ranges.clamp(Seed(*genes))


@dataclass
class FitnessContext:
    model: Model
    dataset: Dataset  # evaluation pool (x, labels)
    plan: AttackPlan  # planned with the base parameters
    profile: DeviceProfile
    base_params: FaultParams
    trials: int
    baseline_accuracy: float  # percent, over the trial stream
    baseline_classes: Sequence[int]


def fitness(seed: Seed, ctx: FitnessContext, eval_seed: int) -> float:
    """Accuracy degradation (percentage points) of a short campaign with the
    seed's genes substituted into the fault parameters.

    Crashed / no-response trials deliver no wrong answer and count as
    non-degrading (a parameter set that mostly kills the device scores
    poorly; accuracy-over-survivors would reward it through survivor bias).
    Reproducible for a fixed eval_seed."""
    params = replace(
        ctx.base_params, f_h=seed.f_h, v_l=seed.v_l, t_w=seed.t_w, t_d=seed.t_d
    )
    n_pool = len(ctx.dataset)
    seqs = np.random.SeedSequence(eval_seed).spawn(ctx.trials)
    delivered_wrong = 0
    for i in range(ctx.trials):
        idx = i % n_pool
        result = run_attack_trial(
            ctx.model,
            ctx.dataset.x[idx],
            int(ctx.dataset.labels[idx]),
            "nontargeted",
            ctx.plan,
            ctx.profile,
            params,
            seqs[i],
            input_id=idx,
            baseline_class=int(ctx.baseline_classes[idx]),
        )
        if result.status == "completed" and result.final_class != result.true_label:
            delivered_wrong += 1
    attacked = 100.0 * (ctx.trials - delivered_wrong) / ctx.trials
    return ctx.baseline_accuracy - attacked


@dataclass
class Population:
    seeds: list[Seed]
    fitness_cache: dict = field(default_factory=dict)  # (seed, eval_seed) -> float
    selection_counts: dict = field(default_factory=dict)  # seed -> int
    best_seed: Seed | None = None
    best_fitness: float = float("-inf")


class GenerationStats(NamedTuple):
    generation: int
    best_fitness: float
    mean_fitness: float
    best_so_far: float
    best_seed: Seed


def initial_population(
    center: Seed,
    size: int,
    rng: np.random.Generator,
    ranges: GeneRanges = GeneRanges(),
    spreads: tuple[float, float, float, float] = (60.0, 60.0, 2.0, 1.0),
) -> list[Seed]:
    """Rough parameters plus uniform perturbations; the center survives as
    seed 0."""
    seeds = [ranges.clamp(center)]
    for _ in range(size - 1):
        genes = [
            g + float(rng.uniform(-sp, sp)) for g, sp in zip(center, spreads)
        ]
        seeds.append(ranges.clamp(Seed(*genes)))
    return seeds


def _select(
    pop: Population, fits: list[float], rng: np.random.Generator
) -> Seed:
    i = int(rng.integers(0, len(pop.seeds)))
    j = int(rng.integers(0, len(pop.seeds)))
    if fits[i] >= fits[j]:
        win, lose = pop.seeds[i], pop.seeds[j]
    else:
        win, lose = pop.seeds[j], pop.seeds[i]
    counts = pop.selection_counts
    chosen = None
    if counts.get(win, 0) <= MAX_SELECTIONS:
        chosen = win
    elif counts.get(lose, 0) <= MAX_SELECTIONS:
        chosen = lose
    else:
        eligible = [s for s in pop.seeds if counts.get(s, 0) <= MAX_SELECTIONS]
        if eligible:
            chosen = min(eligible, key=lambda s: counts.get(s, 0))
        else:  # every value exhausted: fresh epoch
            counts.clear()
            chosen = win
    counts[chosen] = counts.get(chosen, 0) + 1
    return chosen


def refine_parameters(
    initial: Sequence[Seed],
    ctx: FitnessContext,
    budget: int,
    rng: np.random.Generator,
    ranges: GeneRanges = GeneRanges(),
    target_fitness: float | None = None,
) -> tuple[Seed, list[GenerationStats], Population]:
    """Evolve for up to `budget` generations (or until target_fitness);
    returns the best-so-far seed, the per-generation trace, and the final
    population state."""
    if not initial:
        raise ValueError("initial population must be non-empty")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    size = len(initial)
    pop = Population(seeds=[ranges.clamp(s) for s in initial])
    trace: list[GenerationStats] = []
    for gen in range(budget):
        eval_seed = int(rng.integers(0, 2**31 - 1))
        fits = []
        for s in pop.seeds:
            key = (s, eval_seed)
            if key not in pop.fitness_cache:
                pop.fitness_cache[key] = fitness(s, ctx, eval_seed)
            fits.append(pop.fitness_cache[key])
        gen_best = int(np.argmax(fits))
        if fits[gen_best] > pop.best_fitness:
            pop.best_fitness = fits[gen_best]
            pop.best_seed = pop.seeds[gen_best]
        trace.append(
            GenerationStats(
                generation=gen,
                best_fitness=fits[gen_best],
                mean_fitness=float(np.mean(fits)),
                best_so_far=pop.best_fitness,
                best_seed=pop.best_seed,
            )
        )
        if target_fitness is not None and pop.best_fitness >= target_fitness:
            break
        if gen == budget - 1:
            break
        next_seeds = [pop.seeds[gen_best]]  # elite, unmodified
        while len(next_seeds) < size:
            p1 = _select(pop, fits, rng)
            p2 = _select(pop, fits, rng)
            c1, c2 = crossover(p1, p2, rng, ranges)
            next_seeds.append(mutate(c1, rng, ranges))
            if len(next_seeds) < size:
                next_seeds.append(mutate(c2, rng, ranges))
        pop.seeds = next_seeds
    return pop.best_seed, trace, pop

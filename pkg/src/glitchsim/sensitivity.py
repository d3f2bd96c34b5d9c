"""Bit-gradient sensitivity search: per-target sensitivity values and
input-dependent / input-independent top-N target selection.

The bit gradient of a (element, bit) pair is the finite loss difference
between a forward pass with that single bit flipped and the clean pass.
A target's sensitivity S is the mean of its bits' gradients; negative
sensitivities are discarded at selection time.

Averaging arithmetic (pinned so the decomposition identity
32*S_element == 8*S_exponent + 23*S_mantissa + sign_gradient is exact in
float64): part sums use np.sum over ascending bit order, part S divides by
the part size, and S_element = (8*S_exp + 23*S_man + g_sign)/32 evaluated
left to right. Multiplying/dividing by the power-of-two group sizes is
exact in IEEE-754.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .bits import Granularity
from .engine import (
    ElementAddr,
    Model,
    check_addr,
    final_loss_vector,
    forward,
    run_layers,
    resume_layers,
)

SELECTION_MODES = ("element", "part", "exponent", "mantissa", "bit")


class CandidateTarget(NamedTuple):
    addr: ElementAddr
    granularity: Granularity
    anchor_bit: int | None = None


@dataclass(frozen=True)
class SensitivityTable:
    mode: str
    entries: tuple[tuple[CandidateTarget, float], ...]
    model_digest: str


@dataclass(frozen=True)
class TargetSet:
    targets: tuple[CandidateTarget, ...]
    n_max: int

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if len(self.targets) > self.n_max:
            raise ValueError("more targets than n_max")

    def __len__(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class LossMap:
    """Per-class losses for every single-bit flip of every feature-map element.

    losses[j][k, b, c] is the loss against class c after flipping bit b of
    element k in layer j's output; baseline[c] is the clean-pass loss.
    """

    baseline: np.ndarray  # (C,) float64
    losses: tuple[np.ndarray, ...]  # per layer (count_j, 32, C) float64
    model_digest: str = ""


def bit_gradient(
    model: Model, x: np.ndarray, t: int, addr: ElementAddr, loc: int
) -> float:
    """Loss(single flip at (addr, loc)) - loss(clean pass).

    Positive means the flip increases the loss against label t.
    """
    check_addr(model, addr)
    base = forward(model, x, t).loss_value
    flipped = forward(model, x, t, plan=[(addr, loc)]).loss_value
    return flipped - base


def class_loss_map(model: Model, x: np.ndarray, digest: str = "") -> LossMap:
    """Flip every bit of every element once, recording per-class losses.

    One pass serves every label, every targeted objective, and every
    granularity. Suffix layers are recomputed from the cached clean prefix;
    this is bit-identical to a full forward with the same single flip.
    """
    x = np.ascontiguousarray(x, dtype=np.float32).reshape(model.input_shape)
    outputs = run_layers(model, x)
    baseline = final_loss_vector(model, outputs[-1])
    n_classes = model.class_count
    last = len(model.layers) - 1
    masks = [np.uint32(1 << b) for b in range(32)]
    per_layer = []
    for j, out in enumerate(outputs):
        n = out.size
        arr = np.empty((n, 32, n_classes))
        work = out.copy()
        u = work.reshape(-1).view(np.uint32)
        for k in range(n):
            for b in range(32):
                u[k] ^= masks[b]
                final = work if j == last else resume_layers(model, work, j)
                arr[k, b] = final_loss_vector(model, final)
                u[k] ^= masks[b]
        per_layer.append(arr)
    return LossMap(baseline=baseline, losses=tuple(per_layer), model_digest=digest)


def _map_worker(args):
    model, x, digest = args
    return class_loss_map(model, x, digest)


def batch_loss_maps(
    model: Model, inputs: Sequence[np.ndarray], jobs: int = 1, digest: str = ""
) -> list[LossMap]:
    """Loss maps for many inputs; order follows the input order."""
    if jobs <= 1 or len(inputs) <= 1:
        return [class_loss_map(model, x, digest) for x in inputs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_map_worker, [(model, x, digest) for x in inputs]))


def gradient_map(loss_map: LossMap, label: int, target_class: int | None = None):
    """Per-layer (count, 32) float64 gradient arrays.

    Non-targeted: gradient = loss_to_label(flip) - loss_to_label(clean).
    Targeted toward t*: gradient = loss_to_t*(clean) - loss_to_t*(flip),
    so flips that pull the output toward t* rank highest.
    """
    if target_class is None:
        return [arr[:, :, label] - loss_map.baseline[label] for arr in loss_map.losses]
    return [loss_map.baseline[target_class] - arr[:, :, target_class] for arr in loss_map.losses]


def table_from_gradients(
    grads: list[np.ndarray], mode: str | Granularity, model_digest: str = ""
) -> SensitivityTable:
    mode = mode.value if isinstance(mode, Granularity) else mode
    if mode not in SELECTION_MODES:
        raise ValueError(f"selection mode {mode!r} not one of {SELECTION_MODES}")
    entries: list[tuple[CandidateTarget, float]] = []
    for j, g in enumerate(grads):
        man = g[:, 0:23].sum(axis=1) / 23.0
        exp = g[:, 23:31].sum(axis=1) / 8.0
        sign = g[:, 31]
        if mode == "element":
            s_el = (8.0 * exp + 23.0 * man + sign) / 32.0
            entries.extend(
                (CandidateTarget(ElementAddr(j, k), Granularity.ELEMENT), float(s_el[k]))
                for k in range(g.shape[0])
            )
        elif mode == "exponent":
            entries.extend(
                (CandidateTarget(ElementAddr(j, k), Granularity.EXPONENT), float(exp[k]))
                for k in range(g.shape[0])
            )
        elif mode == "mantissa":
            entries.extend(
                (CandidateTarget(ElementAddr(j, k), Granularity.MANTISSA), float(man[k]))
                for k in range(g.shape[0])
            )
        elif mode == "part":
            for k in range(g.shape[0]):
                addr = ElementAddr(j, k)
                entries.append((CandidateTarget(addr, Granularity.EXPONENT), float(exp[k])))
                entries.append((CandidateTarget(addr, Granularity.MANTISSA), float(man[k])))
        else:  # bit
            for k in range(g.shape[0]):
                addr = ElementAddr(j, k)
                entries.extend(
                    (CandidateTarget(addr, Granularity.BIT, b), float(g[k, b]))
                    for b in range(32)
                )
    return SensitivityTable(mode=mode, entries=tuple(entries), model_digest=model_digest)


def evaluate_sensitivity(
    model: Model,
    x: np.ndarray,
    t: int,
    granularity: str | Granularity = Granularity.ELEMENT,
    target_class: int | None = None,
) -> SensitivityTable:
    """Sensitivity of every candidate target at the given granularity."""
    loss_map = class_loss_map(model, x)
    grads = gradient_map(loss_map, t, target_class)
    return table_from_gradients(grads, granularity)


def get_top_set(table: SensitivityTable, n: int) -> TargetSet:
    """Top-n candidates with strictly positive S, descending, stable ties."""
    if n < 1:
        raise ValueError("n must be >= 1")
    positive = [(t, s) for t, s in table.entries if s > 0.0]
    positive.sort(key=lambda e: -e[1])  # stable: equal S keep table order
    return TargetSet(targets=tuple(t for t, _ in positive[:n]), n_max=n)


def accumulate_tables(tables: Sequence[SensitivityTable]) -> SensitivityTable:
    """Entrywise sum of per-input tables, in the given order."""
    if not tables:
        raise ValueError("need at least one table")
    first = tables[0]
    targets = [t for t, _ in first.entries]
    total = [s for _, s in first.entries]
    for table in tables[1:]:
        if [t for t, _ in table.entries] != targets:
            raise ValueError("tables cover different candidate targets")
        for i, (_, s) in enumerate(table.entries):
            total[i] = total[i] + s
    return SensitivityTable(
        mode=first.mode,
        entries=tuple(zip(targets, total)),
        model_digest=first.model_digest,
    )


def input_dependent_search(
    model: Model,
    x: np.ndarray,
    t: int,
    n: int,
    granularity: str | Granularity = Granularity.ELEMENT,
    target_class: int | None = None,
) -> TargetSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    return get_top_set(evaluate_sensitivity(model, x, t, granularity, target_class), n)


def input_independent_search(
    model: Model,
    sample: Sequence[tuple[np.ndarray, int]],
    n: int,
    granularity: str | Granularity = Granularity.ELEMENT,
    target_class: int | None = None,
) -> TargetSet:
    """Accumulate sensitivity over a dataset sample, then select top-n.

    Deterministic for a fixed sample order; a single-input sample matches
    input_dependent_search on that input exactly.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not len(sample):
        raise ValueError("sample must be non-empty")
    tables = [
        evaluate_sensitivity(model, x, t, granularity, target_class)
        for x, t in sample
    ]
    return get_top_set(accumulate_tables(tables), n)

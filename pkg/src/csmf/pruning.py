"""Magnitude pruning (cumulative-percentile and fixed-ratio) and the stage
commit that turns a pruning decision into lifecycle states."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LifecycleError
from .stagenet import (
    ZERO_LOCKED,
    ParameterStore,
    Stage,
    frozen,
    trainable,
)


@dataclass
class PruneDecision:
    pruned: np.ndarray  # bool, aligned with the input magnitudes
    tau: float
    total: float
    threshold: float

    @property
    def n_pruned(self) -> int:
        return int(self.pruned.sum())

    @property
    def retained(self) -> np.ndarray:
        return ~self.pruned


def _check_magnitudes(magnitudes) -> np.ndarray:
    m = np.asarray(magnitudes, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(m)) or np.any(m < 0):
        raise ConfigError("magnitudes must be finite and nonnegative")
    return m


def cpp_select(magnitudes, tau: float) -> PruneDecision:
    """Cumulative-percentile pruning of one group.

    Magnitudes are visited in ascending order (ties by original index); an
    entry is pruned when the running sum up to and including it is at most
    ``tau`` times the group total.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    m = _check_magnitudes(magnitudes)
    pruned = np.zeros(m.size, dtype=bool)
    if m.size == 0:
        return PruneDecision(pruned, tau, 0.0, 0.0)
    order = np.argsort(m, kind="stable")
    cums = np.cumsum(m[order])
    total = float(cums[-1])
    threshold = total * tau
    if total == 0.0:
        pruned[order[1:]] = True
        return PruneDecision(pruned, tau, total, threshold)
    pruned[order[cums <= threshold]] = True
    return PruneDecision(pruned, tau, total, threshold)


def fixed_ratio_select(magnitudes, ratio: float) -> PruneDecision:
    """Prune the ``floor(ratio * n)`` smallest magnitudes."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"ratio must lie in [0, 1), got {ratio}")
    m = _check_magnitudes(magnitudes)
    k = math.floor(ratio * m.size)
    order = np.argsort(m, kind="stable")
    pruned = np.zeros(m.size, dtype=bool)
    pruned[order[:k]] = True
    total = float(m.sum())
    thr = float(m[order[k - 1]]) if k else 0.0
    return PruneDecision(pruned, ratio, total, thr)


@dataclass
class GroupReport:
    group: str
    size: int
    frozen: int
    zero_locked: int
    handed_off: int
    total_mass: float
    threshold: float
    pruned_mass: float

    @property
    def pruned_fraction(self) -> float:
        return (self.zero_locked + self.handed_off) / self.size if self.size else 0.0


@dataclass
class TransitionReport:
    stage: str
    method: str
    value: float
    groups: list[GroupReport] = field(default_factory=list)

    def totals(self) -> dict[str, int]:
        keys = ("size", "frozen", "zero_locked", "handed_off")
        return {k: sum(getattr(g, k) for g in self.groups) for k in keys}

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "method": self.method,
            "value": self.value,
            "totals": self.totals(),
            "groups": [g.__dict__ | {"pruned_fraction": g.pruned_fraction} for g in self.groups],
        }


def commit_stage(
    store: ParameterStore,
    stage,
    method: str = "cpp",
    value: float = 0.75,
    structure: bool = True,
) -> TransitionReport:
    """Prune every group's ``Trainable(stage)`` entries and change their states.

    Retained entries become ``Frozen(stage)``.  Pruned entries are zeroed;
    with ``structure`` on, those writing into the stage's own block become
    ``ZeroLocked`` and the rest are handed to ``Trainable(stage + 1)``.
    With ``structure`` off every pruned entry is handed off.
    """
    stage = Stage.parse(stage)
    if stage == Stage.R:
        raise LifecycleError("the conversion stage is committed by freezing, not pruning")
    if stage in store.committed:
        raise LifecycleError(f"stage {stage.name} was already committed")
    if method == "cpp":
        select = cpp_select
    elif method == "fixed":
        select = fixed_ratio_select
    else:
        raise ConfigError(f"unknown pruning method {method!r}")
    code = trainable(stage)
    if store.count(code) == 0:
        raise LifecycleError(f"no Trainable({stage.name}) parameters to commit")
    report = TransitionReport(stage.name, method, value)
    for group, params in store.groups().items():
        masks = [p.state == code for p in params]
        mags = np.concatenate([np.abs(p.value[m]) for p, m in zip(params, masks)])
        if mags.size == 0:
            continue
        decision = select(mags, value)
        n_locked = n_handoff = 0
        pos = 0
        for p, m in zip(params, masks):
            idx = np.flatnonzero(m.reshape(-1))
            cut = decision.pruned[pos:pos + idx.size]
            pos += idx.size
            flat_state = p.state.reshape(-1)
            flat_value = p.value.reshape(-1)
            flat_target = p.target.reshape(-1)
            keep = idx[~cut]
            drop = idx[cut]
            flat_state[keep] = frozen(stage)
            flat_value[drop] = 0.0
            if structure:
                own = flat_target[drop] == stage
                flat_state[drop[own]] = ZERO_LOCKED
                flat_state[drop[~own]] = trainable(stage + 1)
                n_locked += int(own.sum())
                n_handoff += int((~own).sum())
            else:
                flat_state[drop] = trainable(stage + 1)
                n_handoff += drop.size
        report.groups.append(GroupReport(
            group=group,
            size=int(mags.size),
            frozen=int(decision.retained.sum()),
            zero_locked=n_locked,
            handed_off=n_handoff,
            total_mass=float(mags.sum()),
            threshold=float(decision.threshold),
            pruned_mass=float(mags[decision.pruned].sum()),
        ))
    store.committed.add(stage)
    return report


def freeze_stage(store: ParameterStore, stage) -> int:
    """Freeze every ``Trainable(stage)`` entry without pruning; returns the count."""
    stage = Stage.parse(stage)
    n = 0
    for p in store:
        m = p.state == trainable(stage)
        p.state[m] = frozen(stage)
        n += int(m.sum())
    return n

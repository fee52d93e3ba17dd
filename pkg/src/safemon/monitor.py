"""Runtime safety monitors backed by a precomputed safety table.

A monitor maps the state estimator's output at time ``t``, together with the
control command about to be applied, to the precomputed worst-case
probability of staying safe for the next ``horizon`` steps.  Three variants:

* point: look up the cell of the point estimate;
* distribution: mass-weighted average of the lookup over the estimated
  state distribution's support;
* true-state: the point lookup fed ground truth (diagnostics only).

All monitors are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .abstraction import AbstractSystem, Grid
from .model_check import SafetyTable

NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class EstimatedStateDistribution:
    """Finite categorical distribution over concrete (continuous) states."""

    support: tuple[tuple[tuple[float, ...], float], ...]

    def __init__(self, entries: Sequence[tuple[Sequence[float], float]]):
        support = tuple((tuple(float(x) for x in s), float(p)) for s, p in entries)
        if not support:
            raise ValueError("empty state distribution")
        object.__setattr__(self, "support", support)

    def total(self) -> float:
        return sum(p for _, p in self.support)


def joint_from_independent(
    per_dim: Sequence[Sequence[tuple[float, float]]],
    top_k: int = 400,
) -> EstimatedStateDistribution:
    """Joint distribution as the independent product of per-dimension supports.

    The product support can be large, so it is truncated to the ``top_k``
    heaviest joint atoms (which in practice retain essentially all mass) and
    renormalized.
    """
    values = [np.array([v for v, _ in dim]) for dim in per_dim]
    probs = [np.array([p for _, p in dim]) for dim in per_dim]
    joint = probs[0]
    for q in probs[1:]:
        joint = np.multiply.outer(joint, q)
    flat = joint.ravel()
    if flat.size > top_k:
        keep = np.sort(np.argpartition(flat, -top_k)[-top_k:])
    else:
        keep = np.arange(flat.size)
    mass = flat[keep]
    mass = mass / mass.sum()
    coords = np.unravel_index(keep, joint.shape)
    entries = []
    for j in range(keep.size):
        state = tuple(float(values[d][coords[d][j]]) for d in range(len(per_dim)))
        entries.append((state, float(mass[j])))
    return EstimatedStateDistribution(entries)


@dataclass(frozen=True)
class SafetyEstimate:
    value: float
    variant: str
    timestep: int | None = None
    clamped: bool = False

    def __post_init__(self):
        # weighted sums of values equal to 1.0 may overshoot by an ulp
        if not (-1e-9 <= self.value <= 1.0 + 1e-9):
            raise ValueError(f"safety estimate {self.value!r} outside [0, 1]")
        object.__setattr__(self, "value", min(max(self.value, 0.0), 1.0))


@dataclass(frozen=True)
class MonitorContext:
    """Safety table plus the geometry needed to turn concrete states into rows.

    ``table_by_state[s]`` caches the table value of abstract state ``s`` under
    its own embedded action, which is the only action the composed system
    makes available in ``s``; monitors encode the runtime command into the
    config portion of the state index.
    """

    table: SafetyTable
    system: AbstractSystem

    @property
    def grid(self) -> Grid:
        return self.system.grid

    def __post_init__(self):
        flat = np.full(self.table.n_states, np.nan)
        for (s, a), v in self.table.entries.items():
            _, cfg = self.system.decode_state(s)
            if cfg != a:
                raise ValueError("table action disagrees with the state's embedded config")
            flat[s] = v
        if np.isnan(flat).any():
            raise ValueError("safety table does not cover every abstract state")
        object.__setattr__(self, "_flat", flat)

    def encode_action(self, requests: Sequence[int], fill: int | None) -> int:
        return self.system.controller.config_index(requests, fill)

    def lookup(self, state: Sequence[float], config_index: int) -> tuple[float, bool]:
        cell, inside = self.grid.locate(state)
        sid = self.system.state_index(cell, config_index)
        return float(self._flat[sid]), not inside

    def lookup_many(self, states: np.ndarray, config_index: int) -> tuple[np.ndarray, bool]:
        counts = self.grid.counts
        idx = np.zeros(states.shape[0], dtype=np.int64)
        inside = np.ones(states.shape[0], dtype=bool)
        for d, (lo, hi, w, n) in enumerate(
            zip(self.grid.lower, self.grid.upper, self.grid.width, counts)
        ):
            x = states[:, d]
            inside &= (x >= lo) & (x < hi)
            k = np.clip(np.floor((x - lo) / w).astype(np.int64), 0, n - 1)
            idx = idx * n + k
        idx = idx * self.system.n_configs + config_index
        return self._flat[idx], not bool(inside.all())


def monitor_point(
    ctx: MonitorContext,
    estimate: Sequence[float],
    requests: Sequence[int],
    fill: int | None,
    timestep: int | None = None,
) -> SafetyEstimate:
    """Table lookup at the cell of the point estimate.

    Out-of-grid estimates clamp to the boundary cell (which the abstraction
    marks unsafe, so clamping errs toward pessimism) and are flagged.
    """
    cfg = ctx.encode_action(requests, fill)
    value, clamped = ctx.lookup(estimate, cfg)
    return SafetyEstimate(value=value, variant="point", timestep=timestep, clamped=clamped)


def monitor_distribution(
    ctx: MonitorContext,
    dist: EstimatedStateDistribution,
    requests: Sequence[int],
    fill: int | None,
    timestep: int | None = None,
) -> SafetyEstimate:
    """Mass-weighted table lookup over the estimated state distribution."""
    total = dist.total()
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"state distribution mass {total!r} is not 1 within {NORMALIZATION_TOL}")
    cfg = ctx.encode_action(requests, fill)
    states = np.array([s for s, _ in dist.support], dtype=np.float64)
    mass = np.array([p for _, p in dist.support], dtype=np.float64)
    values, clamped = ctx.lookup_many(states, cfg)
    return SafetyEstimate(
        value=float(np.dot(mass, values)),
        variant="distribution",
        timestep=timestep,
        clamped=clamped,
    )


def monitor_true(
    ctx: MonitorContext,
    state: Sequence[float],
    requests: Sequence[int],
    fill: int | None,
    timestep: int | None = None,
) -> SafetyEstimate:
    """Point lookup fed the simulator's ground-truth state (for comparison)."""
    cfg = ctx.encode_action(requests, fill)
    value, clamped = ctx.lookup(state, cfg)
    return SafetyEstimate(value=value, variant="true-state", timestep=timestep, clamped=clamped)

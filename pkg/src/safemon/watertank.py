"""Simulated tank farm: dynamics, noisy sensing, grid Bayes filter, controller.

``J`` tanks drain at a constant rate; a central arbiter routes a single
inflow to at most one tank per step.  Each tank has a noisy level sensor
(Gaussian noise plus occasional saturated outlier readings) and a discrete
Bayesian filter tracking a categorical belief over its level.  Local
controllers request filling with hysteresis between a lower and an upper
threshold; the arbiter fills the lowest-estimate requester, flipping a fair
coin on ties.

Everything here is deterministic given a seed: each trial owns its own RNG
stream, and randomness is drawn in a fixed per-step order (sensor readings
tank by tank, then the arbiter's tie coin if needed).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .abstraction import ErrorModel, Grid, IntervalDynamics

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TankParams:
    """Physical and sensing parameters of the tank farm.

    ``horizon`` is the length (in steps) of the safety window used both for
    trace labeling and for the bounded-time model check.
    """

    n_tanks: int = 2
    size: float = 100.0
    inflow: float = 13.5
    outflow: float = 4.3
    lower_threshold: float = 10.0
    upper_threshold: float = 90.0
    # Sensor defaults are calibrated so the closed loop fails in roughly a
    # tenth of mid-range trials; the exact Bayes filter shrugs off smaller
    # noise and the study needs a meaningful failure population.
    sensor_sigma: float = 12.0
    outlier_prob: float = 0.05
    horizon: int = 10
    # "all_in_range": every tank must stay inside (0, size) (default);
    # "any_in_range": safe while at least one tank is in range.
    safety_rule: str = "all_in_range"

    def __post_init__(self):
        if self.n_tanks < 1:
            raise ValueError("need at least one tank")
        if not (0.0 < self.lower_threshold < self.upper_threshold < self.size):
            raise ValueError("thresholds must satisfy 0 < LT < UT < size")
        if not (self.inflow > self.outflow > 0.0):
            raise ValueError("need inflow > outflow > 0")
        if not (self.sensor_sigma > 0.0):
            raise ValueError("sensor sigma must be positive")
        if not (0.0 <= self.outlier_prob < 1.0):
            raise ValueError("outlier probability must lie in [0, 1)")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if self.safety_rule not in ("all_in_range", "any_in_range"):
            raise ValueError(f"unknown safety rule {self.safety_rule!r}")

    def violated(self, breach: Sequence[bool]) -> bool:
        if self.safety_rule == "all_in_range":
            return any(breach)
        return all(breach)

    def net_flow(self, tank: int, fill: int | None) -> float:
        return (self.inflow - self.outflow) if fill == tank else -self.outflow


@dataclass(frozen=True)
class SystemState:
    """True levels plus the latched controller configuration."""

    levels: tuple[float, ...]
    requests: tuple[int, ...]
    fill: int | None

    def __post_init__(self):
        if self.fill is not None and not self.requests[self.fill]:
            raise ValueError("fill must target a requesting tank")


def step_dynamics(
    params: TankParams, state: SystemState, fill: int | None
) -> tuple[SystemState, tuple[bool, ...]]:
    """One dynamics step: the filled tank gains inflow-outflow, others drain.

    Returns the post-step state (levels clamped to [0, size]) and a per-tank
    breach flag set when the pre-clamp level left the open interval
    (0, size), i.e. the tank ran empty or overflowed.
    """
    raw = [w + params.net_flow(i, fill) for i, w in enumerate(state.levels)]
    breach = tuple(not (0.0 < w < params.size) for w in raw)
    clamped = tuple(min(max(w, 0.0), params.size) for w in raw)
    return SystemState(levels=clamped, requests=state.requests, fill=state.fill), breach


def sense(params: TankParams, level: float, rng: np.random.Generator) -> float:
    """Noisy level reading: saturated outlier with probability ``outlier_prob``,
    otherwise the level plus Gaussian noise, clamped to [0, size]."""
    if rng.random() < params.outlier_prob:
        return 0.0 if rng.random() < 0.5 else params.size
    reading = level + rng.normal(0.0, params.sensor_sigma)
    return min(max(reading, 0.0), params.size)


# -- discrete Bayes filter ------------------------------------------------------


@dataclass(frozen=True)
class TankBelief:
    """Categorical belief over one tank's level.

    Support values start on the integer level grid and are shifted by the
    exact net flow on every predict step, so the filter carries the true
    sub-unit offset instead of rounding it away; clamping at the physical
    range merges mass into the boundary value.
    """

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.probs.shape or self.values.ndim != 1:
            raise ValueError("belief arrays must be parallel 1-D")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError("belief probabilities must sum to 1")

    @property
    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    def as_pairs(self) -> list[tuple[float, float]]:
        return [(float(v), float(p)) for v, p in zip(self.values, self.probs)]


def uniform_belief(params: TankParams) -> TankBelief:
    n_levels = int(round(params.size)) + 1
    if abs(params.size - round(params.size)) > 1e-9:
        raise ValueError("integer level grid requires an integer tank size")
    values = np.arange(n_levels, dtype=np.float64)
    return TankBelief(values=values, probs=np.full(n_levels, 1.0 / n_levels))


def reading_likelihood(params: TankParams, reading: float, values: np.ndarray) -> np.ndarray:
    """Likelihood of ``reading`` for each candidate level.

    Saturated readings (exactly 0 or size) mix the outlier mass with the
    clamped Gaussian tail mass; interior readings use the Gaussian density,
    rescaled by its maximum so the update stays finite for tiny sigmas.
    """
    op, sigma = params.outlier_prob, params.sensor_sigma
    if reading <= 0.0 or reading >= params.size:
        edge = 0.0 if reading <= 0.0 else params.size
        tail = ndtr((edge - values) / sigma) if edge == 0.0 else ndtr((values - edge) / sigma)
        return 0.5 * op + (1.0 - op) * tail
    loglik = -0.5 * ((reading - values) / sigma) ** 2
    return (1.0 - op) * np.exp(loglik - loglik.max())


def measurement_update(params: TankParams, belief: TankBelief, reading: float) -> TankBelief:
    """Bayes rule on the belief grid; a degenerate posterior falls back to the prior."""
    post = belief.probs * reading_likelihood(params, reading, belief.values)
    total = float(post.sum())
    if total <= 0.0 or not math.isfinite(total):
        log.warning("degenerate posterior for reading %.3f; keeping prior", reading)
        return belief
    return TankBelief(values=belief.values, probs=post / total)


def predict(params: TankParams, belief: TankBelief, net_flow: float) -> TankBelief:
    """Deterministic shift of the support by the known net flow.

    Values leaving [0, size] clamp to the boundary, where their mass piles up.
    """
    shifted = np.clip(belief.values + net_flow, 0.0, params.size)
    uniq, inverse = np.unique(shifted, return_inverse=True)
    if uniq.size == shifted.size:
        return TankBelief(values=shifted, probs=belief.probs)
    merged = np.zeros(uniq.size)
    np.add.at(merged, inverse, belief.probs)
    return TankBelief(values=uniq, probs=merged)


@dataclass(frozen=True)
class FilterState:
    """Per-tank beliefs; the point estimate is the per-tank posterior mean."""

    beliefs: tuple[TankBelief, ...]

    @property
    def means(self) -> tuple[float, ...]:
        return tuple(b.mean for b in self.beliefs)


def filter_update(
    params: TankParams, fs: FilterState, readings: Sequence[float], fill: int | None
) -> FilterState:
    """Full filter step: measurement update on every tank, then predict with
    the net flow implied by the taken fill command."""
    measured = [measurement_update(params, b, y) for b, y in zip(fs.beliefs, readings)]
    predicted = [predict(params, b, params.net_flow(i, fill)) for i, b in enumerate(measured)]
    return FilterState(beliefs=tuple(predicted))


# -- controller -----------------------------------------------------------------


def hysteresis_requests(
    params: TankParams, estimates: Sequence[float], prev_requests: Sequence[int]
) -> tuple[int, ...]:
    out = []
    for est, prev in zip(estimates, prev_requests):
        if est < params.lower_threshold:
            out.append(1)
        elif est >= params.upper_threshold:
            out.append(0)
        else:
            out.append(int(prev))
    return tuple(out)


def control(
    params: TankParams,
    estimates: Sequence[float],
    prev_requests: Sequence[int],
    rng: np.random.Generator,
) -> tuple[tuple[int, ...], int | None]:
    """Request latching plus central arbitration.

    The fill goes to the requesting tank with the lowest estimate; exact ties
    are broken by a fair draw (the only RNG consumption in this function).
    """
    requests = hysteresis_requests(params, estimates, prev_requests)
    requesters = [i for i, r in enumerate(requests) if r]
    if not requesters:
        return requests, None
    low = min(estimates[i] for i in requesters)
    tied = [i for i in requesters if estimates[i] == low]
    fill = tied[0] if len(tied) == 1 else tied[int(rng.integers(len(tied)))]
    return requests, fill


# -- abstraction-facing pieces ----------------------------------------------------


def default_grid(params: TankParams, width: float = 1.0) -> Grid:
    """Level grid with cells centered on the integer levels 0 .. size.

    Cell ``k`` covers ``[k - width/2, k + width/2)``, so cell midpoints
    coincide with the filter's integer level grid, and the two boundary
    cells contain the empty (0) and full (size) levels.
    """
    n = params.n_tanks
    lo = -0.5 * width
    hi = params.size + 0.5 * width
    return Grid(lower=[lo] * n, upper=[hi] * n, width=[width] * n)


def tank_interval_dynamics(params: TankParams) -> IntervalDynamics:
    """Exact successor boxes for the affine tank dynamics (box plus net flow)."""

    def successor_box(lo, hi, fill):
        shift = [params.net_flow(i, fill) for i in range(len(lo))]
        return (
            tuple(l + s for l, s in zip(lo, shift)),
            tuple(h + s for h, s in zip(hi, shift)),
        )

    return IntervalDynamics(successor_box=successor_box)


@dataclass(frozen=True)
class ThresholdArbiter:
    """Controller logic exposed to the abstraction builder.

    Enumerates every consistent configuration (request bits, fill command):
    the idle configuration plus, for every nonempty request pattern, one
    configuration per requesting tank that may hold the fill.  For two tanks
    that is five configurations.
    """

    params: TankParams
    configs: tuple[tuple[tuple[int, ...], int | None], ...] = field(init=False)

    def __post_init__(self):
        configs: list[tuple[tuple[int, ...], int | None]] = []
        n = self.params.n_tanks
        for bits in range(2**n):
            req = tuple((bits >> i) & 1 for i in range(n))
            if not any(req):
                configs.append((req, None))
            else:
                for i in range(n):
                    if req[i]:
                        configs.append((req, i))
        object.__setattr__(self, "configs", tuple(configs))

    def config_index(self, requests: Sequence[int], fill: int | None) -> int:
        return self.configs.index((tuple(int(r) for r in requests), fill))

    def fill_of(self, config_index: int) -> int | None:
        return self.configs[config_index][1]

    def requests_of(self, config_index: int) -> tuple[int, ...]:
        return self.configs[config_index][0]

    def action_name(self, config_index: int) -> str:
        req, fill = self.configs[config_index]
        fill_s = "none" if fill is None else str(fill)
        return "req" + "".join(str(r) for r in req) + "_fill" + fill_s

    def config_distribution(
        self,
        perceived: Sequence[tuple[np.ndarray, np.ndarray]],
        requests: tuple[int, ...],
    ) -> list[tuple[int, float]]:
        """Distribution over next configurations given per-tank perceived atoms.

        Perceived values drive the hysteresis thresholds; when several tanks
        request, the fill goes to the lowest perceived value, ties splitting
        their mass evenly, which is the enumerated form of the tie coin.
        """
        p = self.params
        n = p.n_tanks
        vals = [np.asarray(perceived[d][0], dtype=np.float64) for d in range(n)]
        probs = [np.asarray(perceived[d][1], dtype=np.float64) for d in range(n)]
        req_next = [
            np.where(v < p.lower_threshold, 1, np.where(v >= p.upper_threshold, 0, requests[d]))
            for d, v in enumerate(vals)
        ]
        joint = probs[0]
        for q in probs[1:]:
            joint = np.multiply.outer(joint, q)
        mesh_v = np.meshgrid(*vals, indexing="ij")
        mesh_r = np.meshgrid(*req_next, indexing="ij")
        masked = np.stack([np.where(r == 1, v, np.inf) for v, r in zip(mesh_v, mesh_r)])
        lowest = masked.min(axis=0)
        any_req = np.isfinite(lowest)
        tied = np.where(any_req, (masked == lowest).sum(axis=0), 1)

        out: list[tuple[int, float]] = []
        for idx, (req, fill) in enumerate(self.configs):
            sel = np.ones(joint.shape, dtype=bool)
            for d in range(n):
                sel &= mesh_r[d] == req[d]
            if fill is None:
                mass = float(joint[sel].sum())
            else:
                sel &= masked[fill] == lowest
                mass = float((joint[sel] / tied[sel]).sum())
            if mass > 0.0:
                out.append((idx, mass))
        return out


def estimation_errors(traces: Sequence["TrialTrace"], tank: int) -> np.ndarray:
    """Pooled per-step estimation errors (true level minus filter mean) of one tank."""
    errs = []
    for trace in traces:
        for step in trace.steps:
            errs.append(step.levels[tank] - step.means[tank])
    return np.array(errs)


def tank_error_models(
    traces: Sequence["TrialTrace"], params: TankParams, bin_width: float = 1.0
) -> tuple[ErrorModel, ...]:
    from .abstraction import estimate_error_model

    return tuple(
        estimate_error_model(estimation_errors(traces, i), bin_width)
        for i in range(params.n_tanks)
    )


# -- trial simulation -------------------------------------------------------------


@dataclass(frozen=True)
class TrialStep:
    """One recorded timestep (the filter state is post-measurement)."""

    t: int
    levels: tuple[float, ...]
    readings: tuple[float, ...]
    means: tuple[float, ...]
    filter_state: FilterState
    requests: tuple[int, ...]
    fill: int | None


@dataclass(frozen=True)
class TrialTrace:
    """Recorded closed-loop trial.

    ``breach_step`` is the step index at which a tank first left (0, size),
    or None; recording stops at the breach.  ``labels[t]`` is 1 when no
    breach occurs in steps ``t+1 .. t+horizon``, 0 when one does, and None
    when the window runs past the observed end of a safe trial.
    """

    steps: tuple[TrialStep, ...]
    breach_step: int | None
    horizon: int
    seed: object

    @property
    def labels(self) -> tuple[int | None, ...]:
        out: list[int | None] = []
        for step in self.steps:
            if self.breach_step is not None:
                out.append(0 if self.breach_step <= step.t + self.horizon else 1)
            else:
                observed = len(self.steps)  # dynamics ran after the last row
                out.append(1 if step.t + self.horizon <= observed else None)
        return tuple(out)


def run_trial(
    params: TankParams,
    initial_levels: Sequence[float],
    seed,
    length: int,
) -> TrialTrace:
    """Simulate one seeded closed-loop trial.

    Per-step order: sense every tank, filter measurement update, control on
    the filter means, record, then dynamics and filter predict with the taken
    fill.  A breach ends the trial (states past a breach are not physical).
    """
    rng = np.random.default_rng(seed)
    levels = tuple(float(w) for w in initial_levels)
    if len(levels) != params.n_tanks:
        raise ValueError("initial levels must match the tank count")
    requests: tuple[int, ...] = (0,) * params.n_tanks
    beliefs = tuple(uniform_belief(params) for _ in range(params.n_tanks))
    steps: list[TrialStep] = []
    breach_step: int | None = None

    for t in range(length):
        readings = tuple(sense(params, w, rng) for w in levels)
        beliefs = tuple(
            measurement_update(params, b, y) for b, y in zip(beliefs, readings)
        )
        fs = FilterState(beliefs=beliefs)
        means = fs.means
        requests, fill = control(params, means, requests, rng)
        steps.append(
            TrialStep(
                t=t,
                levels=levels,
                readings=readings,
                means=means,
                filter_state=fs,
                requests=requests,
                fill=fill,
            )
        )
        state = SystemState(levels=levels, requests=requests, fill=fill)
        new_state, breach = step_dynamics(params, state, fill)
        if params.violated(breach):
            breach_step = t + 1
            break
        levels = new_state.levels
        beliefs = tuple(
            predict(params, b, params.net_flow(i, fill)) for i, b in enumerate(beliefs)
        )
    return TrialTrace(
        steps=tuple(steps), breach_step=breach_step, horizon=params.horizon, seed=seed
    )


def trial_seed(master_seed: int, trial_index: int) -> tuple[int, int]:
    """Per-trial RNG stream key: trials are independent, never share a generator."""
    return (int(master_seed), int(trial_index))


# -- trace export -----------------------------------------------------------------


def estimator_records(
    traces: Sequence[TrialTrace], cell_width: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Calibration records for the filter itself.

    Every belief atom at every recorded step is one record: the atom's
    probability is a prediction that the true level lies within half a cell
    width of the atom's value.  Pooled over tanks, steps, and trials.
    """
    estimates: list[np.ndarray] = []
    outcomes: list[np.ndarray] = []
    half = 0.5 * cell_width
    for trace in traces:
        for step in trace.steps:
            for i, belief in enumerate(step.filter_state.beliefs):
                truth = step.levels[i]
                estimates.append(belief.probs)
                outcomes.append((belief.values - half <= truth) & (truth < belief.values + half))
    if not estimates:
        raise ValueError("no recorded steps")
    return np.concatenate(estimates), np.concatenate(outcomes)


def write_trace_csv(
    trace: TrialTrace,
    path: str | Path,
    monitors: Mapping[str, Sequence[float]] | None = None,
    comment: str | None = None,
) -> None:
    """Per-trial CSV: one row per recorded step, optional monitor columns."""
    n = len(trace.steps[0].levels) if trace.steps else 0
    cols = ["timestep"]
    cols += [f"true_w{i + 1}" for i in range(n)]
    cols += [f"reading{i + 1}" for i in range(n)]
    cols += [f"estimate{i + 1}" for i in range(n)]
    cols += [f"request{i + 1}" for i in range(n)]
    cols += ["fill", "label"]
    names = sorted(monitors) if monitors else []
    cols += names
    labels = trace.labels
    lines = [] if comment is None else [f"# {comment}"]
    lines.append(",".join(cols))
    for step in trace.steps:
        row = [str(step.t)]
        row += [f"{w:.17g}" for w in step.levels]
        row += [f"{y:.17g}" for y in step.readings]
        row += [f"{m:.17g}" for m in step.means]
        row += [str(r) for r in step.requests]
        row.append("" if step.fill is None else str(step.fill))
        lab = labels[step.t]
        row.append("" if lab is None else str(lab))
        for name in names:
            row.append(f"{monitors[name][step.t]:.17g}")
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

"""Interval abstraction of a sensed and controlled dynamical system.

The continuous state space is partitioned into equal hyperrectangular cells.
Dynamics are overapproximated per cell and action by a sound successor box:
the abstract cell transitions nondeterministically to every cell the box
overlaps.  Estimation error is modeled as a categorical distribution over
fixed-width error bins, estimated from recorded simulation traces.  The
composed abstract system interleaves, within one time step, the probabilistic
perception/estimation error, the (deterministic up to tie coins) controller
decision, and the nondeterministic interval step, producing one probabilistic
automaton whose states carry the grid cell of every dimension plus the
controller configuration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import product as iterproduct
from typing import Callable, Protocol, Sequence

import numpy as np

from .pa import CategoricalDistribution, ProbabilisticAutomaton, Transition

log = logging.getLogger(__name__)

EDGE_TOL = 1e-9
"""Zero-measure overlaps (box edge exactly on a cell edge) are not successors."""


@dataclass(frozen=True)
class Grid:
    """Axis-aligned partition into equal half-open cells, lower-inclusive.

    Per dimension: cell ``k`` covers ``[lower + k*width, lower + (k+1)*width)``.
    ``upper - lower`` must be an integer multiple of ``width``.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    width: tuple[float, ...]

    def __init__(self, lower: Sequence[float], upper: Sequence[float], width: Sequence[float]):
        lower = tuple(float(x) for x in lower)
        upper = tuple(float(x) for x in upper)
        width = tuple(float(x) for x in width)
        if not (len(lower) == len(upper) == len(width)):
            raise ValueError("grid dimension mismatch")
        for lo, hi, w in zip(lower, upper, width):
            if not (w > 0.0):
                raise ValueError("cell width must be positive")
            if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
                raise ValueError("grid bounds must be finite with upper > lower")
            cells = (hi - lo) / w
            if abs(cells - round(cells)) > 1e-9:
                raise ValueError("(upper - lower) must be an integer multiple of width")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "width", width)

    @property
    def ndim(self) -> int:
        return len(self.lower)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(
            int(round((hi - lo) / w)) for lo, hi, w in zip(self.lower, self.upper, self.width)
        )

    def locate(self, x: Sequence[float]) -> tuple[tuple[int, ...], bool]:
        """Cell of a concrete point; out-of-grid coordinates clamp to the edge.

        Returns (cell, in_bounds).  The partition rule is lower-inclusive, so
        a point exactly on a cell boundary belongs to the upper cell.
        """
        cell = []
        inside = True
        for xi, lo, hi, w, n in zip(x, self.lower, self.upper, self.width, self.counts):
            if xi < lo or xi >= hi:
                inside = False
            k = int(math.floor((xi - lo) / w))
            cell.append(min(max(k, 0), n - 1))
        return tuple(cell), inside

    def cell_box(self, cell: Sequence[int]) -> tuple[tuple[float, ...], tuple[float, ...]]:
        lo = tuple(l + k * w for l, k, w in zip(self.lower, cell, self.width))
        hi = tuple(l + (k + 1) * w for l, k, w in zip(self.lower, cell, self.width))
        return lo, hi

    def midpoint(self, cell: Sequence[int]) -> tuple[float, ...]:
        return tuple(l + (k + 0.5) * w for l, k, w in zip(self.lower, cell, self.width))

    def overlapping_cells_1d(self, dim: int, lo: float, hi: float) -> tuple[list[int], bool]:
        """Cells of one dimension overlapped by the half-open interval [lo, hi).

        A box escaping the grid is clipped to the boundary cell on that side
        and flagged; callers must not treat the clip as silent.
        """
        glo, w, n = self.lower[dim], self.width[dim], self.counts[dim]
        ghi = self.upper[dim]
        if hi <= lo:
            raise ValueError("empty successor interval")
        escaped = lo < glo - EDGE_TOL or hi > ghi + EDGE_TOL
        k_first = int(math.floor((lo - glo) / w + EDGE_TOL))
        k_last = int(math.ceil((hi - glo) / w - EDGE_TOL)) - 1
        k_first = min(max(k_first, 0), n - 1)
        k_last = min(max(k_last, 0), n - 1)
        return list(range(k_first, k_last + 1)), escaped


@dataclass(frozen=True)
class IntervalDynamics:
    """Sound one-step successor boxes: box(cell) under an action.

    ``successor_box(lo, hi, action)`` must return a hyperrectangle containing
    ``f(x, action)`` for every ``x`` in ``[lo, hi)``.  Soundness is the
    caller's obligation (for affine dynamics the exact image is a box).
    """

    successor_box: Callable[[tuple[float, ...], tuple[float, ...], object], tuple[tuple[float, ...], tuple[float, ...]]]


def successor_cells(
    grid: Grid, dyn: IntervalDynamics, cell: Sequence[int], action
) -> tuple[list[tuple[int, ...]], bool]:
    """All cells overlapping the successor box of ``cell`` under ``action``."""
    lo, hi = grid.cell_box(cell)
    box_lo, box_hi = dyn.successor_box(lo, hi, action)
    per_dim = []
    escaped = False
    for d in range(grid.ndim):
        ks, esc = grid.overlapping_cells_1d(d, box_lo[d], box_hi[d])
        per_dim.append(ks)
        escaped = escaped or esc
    return [tuple(c) for c in iterproduct(*per_dim)], escaped


def abstract_dynamics(
    grid: Grid, dyn: IntervalDynamics, actions: Sequence[str]
) -> ProbabilisticAutomaton:
    """PA fragment of the dynamics alone: nondeterministic cell-to-cell moves.

    For each cell and action there is one transition per overlapping
    successor cell, each carrying a point distribution; the branching here is
    nondeterminism, not probability.  Successor boxes escaping the grid are
    clipped to the boundary cells (and logged), which is conservative when
    the caller marks those cells unsafe.
    """
    counts = grid.counts
    n_states = int(np.prod(counts))

    def flat(cell: tuple[int, ...]) -> int:
        idx = 0
        for k, n in zip(cell, counts):
            idx = idx * n + k
        return idx

    transitions = []
    escapes = 0
    for cell in iterproduct(*[range(n) for n in counts]):
        src = flat(cell)
        for a_idx, action in enumerate(actions):
            succs, escaped = successor_cells(grid, dyn, cell, action)
            escapes += escaped
            for succ in succs:
                transitions.append(
                    Transition(src, a_idx, CategoricalDistribution([(flat(succ), 1.0)]))
                )
    if escapes:
        log.warning("%d (cell, action) successor boxes escaped the grid and were clipped", escapes)
    names = tuple(
        "c" + "_".join(str(k) for k in cell)
        for cell in iterproduct(*[range(n) for n in counts])
    )
    return ProbabilisticAutomaton(
        n_states=n_states,
        alphabet=tuple(actions),
        transitions=tuple(transitions),
        state_names=names,
    )


# -- estimation-error model ----------------------------------------------------


@dataclass(frozen=True)
class ErrorBin:
    lo: float
    hi: float
    prob: float

    @property
    def center(self) -> float:
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class ErrorModel:
    """Categorical model of one scalar estimation-error dimension.

    Bins are disjoint, ordered, centered on integer multiples of the bin
    width (bin ``k`` covers ``[(k-0.5)w, (k+0.5)w)``), and their
    probabilities sum to one.  Empty bins are not stored.
    """

    bins: tuple[ErrorBin, ...]
    bin_width: float
    n_samples: int

    def __post_init__(self):
        if not self.bins:
            raise ValueError("error model has no bins")
        total = sum(b.prob for b in self.bins)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"error bin probabilities sum to {total!r}, not 1")
        for prev, cur in zip(self.bins, self.bins[1:]):
            if cur.lo < prev.hi - 1e-12:
                raise ValueError("error bins overlap or are out of order")

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        """Bin centers and probabilities as arrays."""
        return (
            np.array([b.center for b in self.bins]),
            np.array([b.prob for b in self.bins]),
        )

    def to_dict(self) -> dict:
        return {
            "bin_width": self.bin_width,
            "n_samples": self.n_samples,
            "bins": [[b.lo, b.hi, b.prob] for b in self.bins],
        }

    @staticmethod
    def from_dict(d: dict) -> "ErrorModel":
        return ErrorModel(
            bins=tuple(ErrorBin(lo, hi, p) for lo, hi, p in d["bins"]),
            bin_width=float(d["bin_width"]),
            n_samples=int(d["n_samples"]),
        )


def estimate_error_model(errors, bin_width: float) -> ErrorModel:
    """Histogram of observed estimation errors, normalized to a categorical model.

    ``errors`` are the raw differences (true state minus estimate) pooled
    over whatever timesteps and trials the caller recorded.  Bin ``k`` covers
    ``[(k-0.5)w, (k+0.5)w)``; empty bins are dropped.
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("no error samples")
    if not (bin_width > 0.0):
        raise ValueError("bin width must be positive")
    idx = np.floor(e / bin_width + 0.5).astype(np.int64)
    ks, counts = np.unique(idx, return_counts=True)
    bins = tuple(
        ErrorBin((k - 0.5) * bin_width, (k + 0.5) * bin_width, c / e.size)
        for k, c in zip(ks.tolist(), counts.tolist())
    )
    return ErrorModel(bins=bins, bin_width=float(bin_width), n_samples=int(e.size))


# -- composed abstract system ---------------------------------------------------


class ControllerLogic(Protocol):
    """Controller seen by the abstraction.

    ``configs`` enumerates every consistent controller configuration (request
    bits plus the fill choice); ``fill_of``/``requests_of`` project a config;
    ``config_distribution`` returns the distribution of the next config given
    the perceived-state atoms of each dimension and the latched request bits.
    """

    @property
    def configs(self) -> tuple: ...

    def fill_of(self, config_index: int): ...

    def requests_of(self, config_index: int) -> tuple[int, ...]: ...

    def config_distribution(
        self,
        perceived: Sequence[tuple[np.ndarray, np.ndarray]],
        requests: tuple[int, ...],
    ) -> list[tuple[int, float]]: ...

    def action_name(self, config_index: int) -> str: ...


@dataclass(frozen=True)
class AbstractSystem:
    """Composed abstract model plus the bookkeeping to index its states.

    State id layout: cells are flattened row-major over the grid dimensions,
    then the controller config index is appended as the fastest-varying
    digit: ``id = flat(cells) * n_configs + config``.

    ``pa`` may be None when the system is reconstructed from a safety table's
    sidecar purely for monitoring; the indexing then still works, only
    operations touching the automaton itself are unavailable.
    """

    pa: ProbabilisticAutomaton | None
    grid: Grid
    controller: ControllerLogic
    unsafe_cells_per_dim: tuple[tuple[int, ...], ...]

    @property
    def n_configs(self) -> int:
        return len(self.controller.configs)

    def state_index(self, cells: Sequence[int], config_index: int) -> int:
        counts = self.grid.counts
        idx = 0
        for k, n in zip(cells, counts):
            if not (0 <= k < n):
                raise ValueError(f"cell index {k} out of range")
            idx = idx * n + k
        return idx * self.n_configs + config_index

    def decode_state(self, state_id: int) -> tuple[tuple[int, ...], int]:
        counts = self.grid.counts
        config = state_id % self.n_configs
        rest = state_id // self.n_configs
        cells = []
        for n in reversed(counts):
            cells.append(rest % n)
            rest //= n
        return tuple(reversed(cells)), config

    def unsafe_state_ids(self) -> list[int]:
        if self.pa is None:
            raise ValueError("automaton not materialized in this AbstractSystem")
        return sorted(self.pa.states_with_label("unsafe"))


def _perceived_atoms(
    grid: Grid, dim: int, cell: int, error_model: ErrorModel, clamp_lo: float, clamp_hi: float
) -> tuple[np.ndarray, np.ndarray]:
    """Perceived-level atoms for one dimension: cell midpoint plus error bin center.

    Values are clamped to the physical range (sensor saturation); duplicates
    created by clamping are merged.
    """
    mid = grid.midpoint([0] * dim + [cell] + [0] * (grid.ndim - dim - 1))[dim]
    centers, probs = error_model.support()
    values = np.clip(mid + centers, clamp_lo, clamp_hi)
    uniq, inverse = np.unique(values, return_inverse=True)
    merged = np.zeros(uniq.size)
    np.add.at(merged, inverse, probs)
    return uniq, merged


def build_abstract_system(
    grid: Grid,
    dyn: IntervalDynamics,
    error_models: Sequence[ErrorModel],
    controller: ControllerLogic,
    physical_range: tuple[float, float],
    unsafe_when: str = "any_dim",
) -> AbstractSystem:
    """Compose error model, controller, and interval dynamics into one PA.

    States are ``(cell per dimension, controller config)``; the config of a
    state is the command about to be applied.  From each state the abstract
    step is: take the nondeterministic interval step of the dynamics under
    the state's fill command (one transition per successor cell combination,
    all labeled with the state's config), then, probabilistically inside each
    transition, perceive the successor cell's midpoint corrupted by an error
    bin, run the controller on the perceived values with the latched request
    bits, and land in the successor cells paired with the resulting config.
    Only controller-consistent (state, action) combinations exist because the
    action label always equals the state's own config.

    Successor boxes escaping the grid clip to the boundary cells, which are
    labeled ``"unsafe"`` (they contain the out-of-range concrete states), so
    clipping is conservative rather than silent.  ``unsafe_when`` selects
    whether a state is unsafe when any dimension sits in a boundary cell
    (default) or only when all of them do.
    """
    if len(error_models) != grid.ndim:
        raise ValueError("need one error model per grid dimension")
    if unsafe_when not in ("any_dim", "all_dims"):
        raise ValueError(f"unknown unsafe_when {unsafe_when!r}")
    counts = grid.counts
    n_configs = len(controller.configs)
    clamp_lo, clamp_hi = physical_range

    # Perceived atoms per (dimension, cell).
    atoms = [
        [_perceived_atoms(grid, d, c, error_models[d], clamp_lo, clamp_hi) for c in range(counts[d])]
        for d in range(grid.ndim)
    ]

    # Next-config distributions per (successor cells, latched requests).
    config_dist_cache: dict[tuple, list[tuple[int, float]]] = {}

    def config_dist(cells: tuple[int, ...], requests: tuple[int, ...]):
        key = (cells, requests)
        got = config_dist_cache.get(key)
        if got is None:
            perceived = [atoms[d][cells[d]] for d in range(grid.ndim)]
            got = controller.config_distribution(perceived, requests)
            config_dist_cache[key] = got
        return got

    # Dynamics successors per (cell vector, fill command); fill commands are
    # the distinct projections of the configs.
    fill_values = []
    for k in range(n_configs):
        f = controller.fill_of(k)
        if f not in fill_values:
            fill_values.append(f)
    succ_cache: dict[tuple, list[tuple[int, ...]]] = {}
    escapes = 0

    def successors(cells: tuple[int, ...], fill) -> list[tuple[int, ...]]:
        nonlocal escapes
        key = (cells, fill)
        got = succ_cache.get(key)
        if got is None:
            got, escaped = successor_cells(grid, dyn, cells, fill)
            escapes += escaped
            succ_cache[key] = got
        return got

    def flat(cells: tuple[int, ...]) -> int:
        idx = 0
        for k, n in zip(cells, counts):
            idx = idx * n + k
        return idx

    n_states = int(np.prod(counts)) * n_configs
    transitions = []
    for cells in iterproduct(*[range(n) for n in counts]):
        base = flat(cells) * n_configs
        for k in range(n_configs):
            src = base + k
            requests = controller.requests_of(k)
            fill = controller.fill_of(k)
            for succ in successors(cells, fill):
                succ_base = flat(succ) * n_configs
                dist = CategoricalDistribution(
                    [(succ_base + k2, p) for k2, p in config_dist(succ, requests)]
                )
                transitions.append(Transition(src, k, dist))
    if escapes:
        log.warning("%d successor boxes escaped the grid and were clipped", escapes)

    # Boundary cells contain out-of-range concrete states: label them unsafe.
    unsafe_per_dim = tuple((0, counts[d] - 1) for d in range(grid.ndim))
    combine = any if unsafe_when == "any_dim" else all
    labels: dict[int, frozenset[str]] = {}
    for cells in iterproduct(*[range(n) for n in counts]):
        if combine(cells[d] in unsafe_per_dim[d] for d in range(grid.ndim)):
            base = flat(cells) * n_configs
            for k in range(n_configs):
                labels[base + k] = frozenset({"unsafe"})

    alphabet = tuple(controller.action_name(k) for k in range(n_configs))
    pa = ProbabilisticAutomaton(
        n_states=n_states,
        alphabet=alphabet,
        transitions=tuple(transitions),
        labels=labels,
    )
    return AbstractSystem(
        pa=pa, grid=grid, controller=controller, unsafe_cells_per_dim=unsafe_per_dim
    )

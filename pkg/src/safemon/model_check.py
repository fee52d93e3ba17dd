"""Bounded-time safety probabilities for probabilistic automata.

Computes, for every state and every available action of a PA, the worst-case
(or best-case) probability of avoiding a set of unsafe states for ``T`` steps,
optimizing over all schedulers.  The recursion is exact backward value
iteration over the fixed horizon:

    V_0(s)     = 0 if s unsafe else 1
    V_{k+1}(s) = 0                               if s unsafe
               = 1                               if s is terminal
               = opt over transitions (s, a, mu) of sum_s' mu(s') * V_k(s')

with ``opt`` being ``min`` or ``max``.  The per-(state, action) table entry
forces the first step through that action (optimizing among the transitions
that carry it) and continues opt-free by ``V_{T-1}``; this is the quantity a
runtime monitor looks up when the next control action is already known.

Because the horizon is fixed, ``T`` dense sweeps are exact: no fixpoint
threshold is involved, and step-dependent optimal choices are captured by the
per-sweep optimization.  Identical inputs yield bit-identical tables (the
summation order inside every transition is fixed by the distribution's sorted
support).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .pa import ProbabilisticAutomaton

MAX_HORIZON = 1_000_000
BRUTE_FORCE_LIMIT = 1_000_000
"""Abort brute-force enumeration beyond this many scheduler/path combinations."""


@dataclass(frozen=True)
class BoundedSafetyQuery:
    """Avoid ``unsafe`` for ``horizon`` steps; optimize schedulers per ``mode``."""

    unsafe: frozenset[int]
    horizon: int
    mode: str = "min"

    def __init__(self, unsafe: Iterable[int], horizon: int, mode: str = "min"):
        if mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
        if horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if horizon > MAX_HORIZON:
            raise ValueError(f"horizon {horizon} exceeds {MAX_HORIZON}")
        object.__setattr__(self, "unsafe", frozenset(int(s) for s in unsafe))
        object.__setattr__(self, "horizon", int(horizon))
        object.__setattr__(self, "mode", mode)

    def validate_against(self, pa: ProbabilisticAutomaton) -> None:
        bad = [s for s in self.unsafe if not (0 <= s < pa.n_states)]
        if bad:
            raise ValueError(f"unsafe set references unknown states {sorted(bad)}")


@dataclass(frozen=True)
class SafetyTable:
    """Safety probability for every (state, available action) pair.

    ``entries[(state, action)]`` is the probability of staying safe for
    ``horizon`` steps when the first step is forced through ``action``,
    under the ``mode``-optimal scheduler thereafter.  Unsafe states map to
    exactly 0 for every action.  ``meta`` carries arbitrary sidecar data
    (grid geometry, action encodings) needed to map concrete states to rows.
    """

    entries: dict[tuple[int, int], float]
    horizon: int
    mode: str
    n_states: int
    n_actions: int
    meta: dict = field(default_factory=dict)

    def value(self, state: int, action: int) -> float:
        return self.entries[(state, action)]


def check_bounded_safety(pa: ProbabilisticAutomaton, query: BoundedSafetyQuery) -> SafetyTable:
    """Backward value iteration over the full PA; one sweep per horizon step.

    Runs in O(horizon * total distribution support) using flat arrays, so the
    state count only matters through the transition structure.  All states
    are evaluated simultaneously; no per-initial-state re-run is needed.
    """
    query.validate_against(pa)
    n = pa.n_states
    unsafe_mask = np.zeros(n, dtype=bool)
    unsafe_mask[list(query.unsafe)] = True

    # Flatten transitions once: per transition, a contiguous slice of
    # (target, probability) entries; summation order is the distribution's
    # sorted support, fixed regardless of any outer parallel partitioning.
    srcs = np.array([t.source for t in pa.transitions], dtype=np.int64)
    acts = np.array([t.action for t in pa.transitions], dtype=np.int64)
    seg_starts = []
    flat_dst: list[int] = []
    flat_p: list[float] = []
    for t in pa.transitions:
        seg_starts.append(len(flat_dst))
        for s, p in t.dist.support:
            flat_dst.append(s)
            flat_p.append(p)
    starts = np.array(seg_starts, dtype=np.int64)
    dst = np.array(flat_dst, dtype=np.int64)
    prob = np.array(flat_p, dtype=np.float64)

    has_out = np.zeros(n, dtype=bool)
    if len(srcs):
        has_out[srcs] = True
    terminal_safe = ~has_out & ~unsafe_mask

    minimize = query.mode == "min"
    fill = np.inf if minimize else -np.inf
    reduce_at = np.minimum.at if minimize else np.maximum.at

    def sweep(values: np.ndarray) -> np.ndarray:
        nxt = np.full(n, fill, dtype=np.float64)
        if len(srcs):
            tvals = np.add.reduceat(prob * values[dst], starts)
            reduce_at(nxt, srcs, tvals)
        nxt[terminal_safe] = 1.0
        nxt[~has_out & unsafe_mask] = 0.0
        nxt[unsafe_mask] = 0.0
        return nxt

    values = np.where(unsafe_mask, 0.0, 1.0)
    for _ in range(max(query.horizon - 1, 0)):
        values = sweep(values)
    # values now holds V_{T-1} (or V_0 when T <= 1).

    entries: dict[tuple[int, int], float] = {}
    if query.horizon == 0:
        for s in range(n):
            for a in pa.available_actions(s):
                entries[(s, a)] = 0.0 if unsafe_mask[s] else 1.0
    else:
        if len(srcs):
            tvals = np.add.reduceat(prob * values[dst], starts)
        opt = min if minimize else max
        for i in range(len(srcs)):
            key = (int(srcs[i]), int(acts[i]))
            v = 0.0 if unsafe_mask[key[0]] else float(tvals[i])
            entries[key] = v if key not in entries else opt(entries[key], v)
    return SafetyTable(
        entries=entries,
        horizon=query.horizon,
        mode=query.mode,
        n_states=n,
        n_actions=len(pa.alphabet),
    )


def brute_force_safety(
    pa: ProbabilisticAutomaton,
    query: BoundedSafetyQuery,
    initial: int,
    limit: int = BRUTE_FORCE_LIMIT,
) -> float:
    """Exact optimum by explicit enumeration of per-step scheduler choices.

    Test oracle, deliberately independent of the value-iteration arrays: at
    every step it forms the cartesian product of transition choices for all
    states currently carrying probability mass, propagates path probabilities
    forward for each combination, and optimizes over the resulting scheduler
    tree.  Mass entering an unsafe state is lost; mass parked in safe
    terminal states survives to the end.

    Raises:
        ValueError: if the enumeration would exceed ``limit`` combinations.
    """
    query.validate_against(pa)
    if not (0 <= initial < pa.n_states):
        raise ValueError(f"initial state {initial} out of range")
    minimize = query.mode == "min"
    opt = min if minimize else max
    by_src: dict[int, list] = {}
    for t in pa.transitions:
        by_src.setdefault(t.source, []).append(t)

    visited = 0

    def explore(mass: dict[int, float], safe_bank: float, steps_left: int) -> float:
        nonlocal visited
        if not mass or steps_left == 0:
            return safe_bank + sum(mass.values())
        movers = sorted(s for s in mass if by_src.get(s))
        parked = sum(p for s, p in mass.items() if not by_src.get(s))
        if not movers:
            return safe_bank + parked
        best: float | None = None
        choice_lists = [by_src[s] for s in movers]
        idx = [0] * len(movers)
        while True:
            visited += 1
            if visited > limit:
                raise ValueError(f"brute force enumeration exceeded {limit} combinations")
            nxt: dict[int, float] = {}
            for s, k in zip(movers, idx):
                t = by_src[s][k]
                for s2, p in t.dist.support:
                    if s2 not in query.unsafe:
                        nxt[s2] = nxt.get(s2, 0.0) + mass[s] * p
            val = explore(nxt, safe_bank + parked, steps_left - 1)
            best = val if best is None else opt(best, val)
            # odometer over the per-state choice lists
            pos = 0
            while pos < len(movers):
                idx[pos] += 1
                if idx[pos] < len(choice_lists[pos]):
                    break
                idx[pos] = 0
                pos += 1
            if pos == len(movers):
                break
        return best if best is not None else safe_bank + parked

    if initial in query.unsafe:
        return 0.0
    return explore({initial: 1.0}, 0.0, query.horizon)


# -- serialization ------------------------------------------------------------

CSV_HEADER = "state_index,action_index,probability"


def save_table(table: SafetyTable, csv_path: str | Path, meta_path: str | Path | None = None) -> None:
    """Write the table as CSV plus a JSON sidecar.

    Probabilities are printed with 17 significant digits, which round-trips
    float64 exactly; rows are sorted by (state, action) so identical tables
    serialize to identical bytes.
    """
    csv_path = Path(csv_path)
    lines = [CSV_HEADER]
    for (s, a) in sorted(table.entries):
        lines.append(f"{s},{a},{table.entries[(s, a)]:.17g}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    sidecar = {
        "format": "safemon-safety-table-v1",
        "horizon": table.horizon,
        "mode": table.mode,
        "n_states": table.n_states,
        "n_actions": table.n_actions,
        "n_entries": len(table.entries),
        "meta": table.meta,
    }
    if meta_path is None:
        meta_path = csv_path.with_suffix(".meta.json")
    Path(meta_path).write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_table(csv_path: str | Path, meta_path: str | Path | None = None) -> SafetyTable:
    """Inverse of :func:`save_table`; bit-exact for probabilities."""
    csv_path = Path(csv_path)
    if meta_path is None:
        meta_path = csv_path.with_suffix(".meta.json")
    sidecar = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    entries: dict[tuple[int, int], float] = {}
    lines = csv_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected table header in {csv_path}")
    for line in lines[1:]:
        if not line:
            continue
        s, a, p = line.split(",")
        entries[(int(s), int(a))] = float(p)
    if len(entries) != sidecar["n_entries"]:
        raise ValueError("table row count disagrees with sidecar")
    return SafetyTable(
        entries=entries,
        horizon=int(sidecar["horizon"]),
        mode=sidecar["mode"],
        n_states=int(sidecar["n_states"]),
        n_actions=int(sidecar["n_actions"]),
        meta=sidecar.get("meta", {}),
    )

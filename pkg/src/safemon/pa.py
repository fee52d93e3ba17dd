"""Probabilistic automata: categorical distributions, transitions, parallel composition.

A probabilistic automaton (PA) couples nondeterministic choice with
probabilistic branching: in a state, one of the available transitions
``(state, action, distribution)`` is chosen nondeterministically, then the
successor is drawn from the transition's distribution.  This is the
reward-free core of a Markov decision process and is the modeling substrate
for the bounded-time safety engine in :mod:`safemon.model_check`.

States are dense integers so that downstream value iteration can index flat
arrays; optional human-readable names are kept in a side table.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

PROB_SUM_TOL = 1e-9
"""Tolerance for a distribution's probabilities summing to one."""

MASS_FLOOR = 1e-12
"""Entries below this mass are dropped and the distribution renormalized."""


@dataclass(frozen=True)
class CategoricalDistribution:
    """Finite distribution over hashable state keys (dense ints inside a PA).

    Entries with mass below ``MASS_FLOOR`` are dropped and the remainder
    renormalized; duplicates are rejected.  The support is stored sorted by
    key so iteration order, and therefore every downstream summation order,
    is deterministic.
    """

    support: tuple[tuple[Hashable, float], ...]

    def __init__(self, entries: Iterable[tuple[Hashable, float]] | Mapping[Hashable, float]):
        if isinstance(entries, Mapping):
            entries = entries.items()
        items = [(s, float(p)) for s, p in entries]
        keys = [s for s, _ in items]
        if len(keys) != len(set(keys)):
            raise ValueError("duplicate state in distribution support")
        if any(p < 0.0 for _, p in items):
            raise ValueError("negative probability in distribution")
        kept = [(s, p) for s, p in items if p >= MASS_FLOOR]
        if not kept:
            raise ValueError("distribution has no mass above the floor")
        total = sum(p for _, p in kept)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"distribution mass {total!r} is not 1 within 1e-6")
        if abs(total - 1.0) > PROB_SUM_TOL:
            kept = [(s, p / total) for s, p in kept]
        kept.sort(key=lambda e: _sort_key(e[0]))
        object.__setattr__(self, "support", tuple(kept))

    def __call__(self, state: Hashable) -> float:
        for s, p in self.support:
            if s == state:
                return p
        return 0.0

    def states(self) -> tuple[Hashable, ...]:
        return tuple(s for s, _ in self.support)

    def total(self) -> float:
        return sum(p for _, p in self.support)

    def is_point(self) -> bool:
        return len(self.support) == 1

    def map_states(self, rename) -> "CategoricalDistribution":
        """Return the same distribution with every state key passed through ``rename``."""
        return CategoricalDistribution([(rename(s), p) for s, p in self.support])


def _sort_key(state: Hashable):
    # Mixed int/tuple supports occur transiently during composition.
    return (repr(type(state)), state if isinstance(state, (int, float, str, tuple)) else repr(state))


def make_point_distribution(state: Hashable) -> CategoricalDistribution:
    """Distribution with all mass on ``state``."""
    return CategoricalDistribution([(state, 1.0)])


def product_distribution(
    d1: CategoricalDistribution, d2: CategoricalDistribution
) -> CategoricalDistribution:
    """Product distribution over pairs: mass of ``(s1, s2)`` is ``d1(s1) * d2(s2)``."""
    return CategoricalDistribution(
        [((s1, s2), p1 * p2) for s1, p1 in d1.support for s2, p2 in d2.support]
    )


@dataclass(frozen=True)
class Transition:
    """One probabilistic transition ``source --action--> distribution``."""

    source: int
    action: int
    dist: CategoricalDistribution


@dataclass(frozen=True)
class ProbabilisticAutomaton:
    """Finite PA with dense integer states.

    Attributes:
        n_states: number of states; valid ids are ``0 .. n_states - 1``.
        alphabet: action labels; a transition's ``action`` indexes this tuple.
        transitions: all transitions, in a fixed (construction) order.
        labels: per-state sets of atomic propositions.
        initial: optional initial state id.
        state_names: optional side table of display names.
        state_pairs: set by :func:`parallel_compose`, records for each composed
            state the pair of component state ids it stands for.
    """

    n_states: int
    alphabet: tuple[str, ...]
    transitions: tuple[Transition, ...]
    labels: dict[int, frozenset[str]] = field(default_factory=dict)
    initial: int | None = None
    state_names: tuple[str, ...] | None = None
    state_pairs: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.n_states <= 0:
            raise ValueError("automaton needs at least one state")
        if self.initial is not None and not (0 <= self.initial < self.n_states):
            raise ValueError(f"initial state {self.initial} out of range")
        if self.state_names is not None and len(self.state_names) != self.n_states:
            raise ValueError("state_names length mismatch")
        action_range = range(len(self.alphabet))
        for t in self.transitions:
            if not (0 <= t.source < self.n_states):
                raise ValueError(f"transition source {t.source} out of range")
            if t.action not in action_range:
                raise ValueError(f"transition action {t.action} not in alphabet")
            for s, _ in t.dist.support:
                if not (isinstance(s, int) and 0 <= s < self.n_states):
                    raise ValueError(f"transition target {s!r} out of range")
        for s in self.labels:
            if not (0 <= s < self.n_states):
                raise ValueError(f"labeled state {s} out of range")

    # -- queries ------------------------------------------------------------

    def transitions_from(self, state: int) -> list[Transition]:
        return [t for t in self.transitions if t.source == state]

    def available_actions(self, state: int) -> list[int]:
        seen: list[int] = []
        for t in self.transitions:
            if t.source == state and t.action not in seen:
                seen.append(t.action)
        return seen

    def is_terminal(self, state: int) -> bool:
        return all(t.source != state for t in self.transitions)

    def label_of(self, state: int) -> frozenset[str]:
        return self.labels.get(state, frozenset())

    def states_with_label(self, ap: str) -> set[int]:
        return {s for s, aps in self.labels.items() if ap in aps}

    def name_of(self, state: int) -> str:
        if self.state_names is not None:
            return self.state_names[state]
        return str(state)

    def renumbered(self, perm: Sequence[int]) -> "ProbabilisticAutomaton":
        """Return an isomorphic PA where old state ``s`` becomes ``perm[s]``.

        ``perm`` must be a permutation of ``0 .. n_states - 1``.
        """
        if sorted(perm) != list(range(self.n_states)):
            raise ValueError("perm is not a permutation of the state ids")
        names = None
        if self.state_names is not None:
            names = [""] * self.n_states
            for old, new in enumerate(perm):
                names[new] = self.state_names[old]
            names = tuple(names)
        return ProbabilisticAutomaton(
            n_states=self.n_states,
            alphabet=self.alphabet,
            transitions=tuple(
                Transition(perm[t.source], t.action, t.dist.map_states(lambda s: perm[s]))
                for t in self.transitions
            ),
            labels={perm[s]: aps for s, aps in self.labels.items()},
            initial=None if self.initial is None else perm[self.initial],
            state_names=names,
        )


def parallel_compose(
    m1: ProbabilisticAutomaton, m2: ProbabilisticAutomaton
) -> ProbabilisticAutomaton:
    """Parallel composition of two PAs.

    Shared actions synchronize (both components move, successor distribution
    is the product); actions private to one component interleave, the other
    component idling with a point distribution on its current state.  Labels
    of a composed state are the union of the component labels.

    When both components have an initial state, the product is pruned to the
    states reachable from the initial pair.  Otherwise the full product is
    kept, because callers that omit initial states want every combination
    available as a potential start.
    """
    shared = set(m1.alphabet) & set(m2.alphabet)
    alphabet = tuple(m1.alphabet) + tuple(a for a in m2.alphabet if a not in shared)
    a1_index = {a: i for i, a in enumerate(m1.alphabet)}
    a2_index = {a: i for i, a in enumerate(m2.alphabet)}
    out_index = {a: i for i, a in enumerate(alphabet)}

    by_src_1: dict[int, list[Transition]] = {}
    for t in m1.transitions:
        by_src_1.setdefault(t.source, []).append(t)
    by_src_2: dict[int, list[Transition]] = {}
    for t in m2.transitions:
        by_src_2.setdefault(t.source, []).append(t)

    def pair_moves(s1: int, s2: int) -> list[tuple[str, CategoricalDistribution]]:
        moves: list[tuple[str, CategoricalDistribution]] = []
        for a in alphabet:
            in1, in2 = a in a1_index, a in a2_index
            t1s = [t for t in by_src_1.get(s1, []) if in1 and t.action == a1_index[a]]
            t2s = [t for t in by_src_2.get(s2, []) if in2 and t.action == a2_index[a]]
            if in1 and in2:
                for t1 in t1s:
                    for t2 in t2s:
                        moves.append((a, product_distribution(t1.dist, t2.dist)))
            elif in1:
                for t1 in t1s:
                    moves.append((a, product_distribution(t1.dist, make_point_distribution(s2))))
            else:
                for t2 in t2s:
                    moves.append((a, product_distribution(make_point_distribution(s1), t2.dist)))
        return moves

    prune = m1.initial is not None and m2.initial is not None
    if prune:
        start = (m1.initial, m2.initial)
        seen = {start}
        queue = deque([start])
        while queue:
            s1, s2 = queue.popleft()
            for _, dist in pair_moves(s1, s2):
                for pair, _ in dist.support:
                    if pair not in seen:
                        seen.add(pair)
                        queue.append(pair)
        pairs = sorted(seen)
    else:
        pairs = [(s1, s2) for s1 in range(m1.n_states) for s2 in range(m2.n_states)]

    index = {pair: i for i, pair in enumerate(pairs)}
    transitions = []
    for pair in pairs:
        src = index[pair]
        for a, dist in pair_moves(*pair):
            transitions.append(Transition(src, out_index[a], dist.map_states(index.__getitem__)))

    labels = {}
    for pair in pairs:
        aps = m1.label_of(pair[0]) | m2.label_of(pair[1])
        if aps:
            labels[index[pair]] = aps
    names = tuple(f"({m1.name_of(s1)},{m2.name_of(s2)})" for s1, s2 in pairs)
    initial = index[(m1.initial, m2.initial)] if prune else None
    return ProbabilisticAutomaton(
        n_states=len(pairs),
        alphabet=alphabet,
        transitions=tuple(transitions),
        labels=labels,
        initial=initial,
        state_names=names,
        state_pairs=tuple(pairs),
    )


# -- textual dump (golden-test format) ---------------------------------------


def dump_transitions(pa: ProbabilisticAutomaton) -> str:
    """One transition per line: ``src action prob:dst [prob:dst ...]``.

    Probabilities are printed with 17 significant digits so the dump is
    bit-stable across runs and round-trips exactly.
    """
    lines = []
    for t in sorted(pa.transitions, key=lambda t: (t.source, t.action)):
        branches = " ".join(f"{p:.17g}:{s}" for s, p in t.dist.support)
        lines.append(f"{t.source} {pa.alphabet[t.action]} {branches}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_transitions(
    text: str,
    n_states: int | None = None,
    labels: Mapping[int, Iterable[str]] | None = None,
    initial: int | None = None,
) -> ProbabilisticAutomaton:
    """Inverse of :func:`dump_transitions` (state count inferred if omitted)."""
    transitions = []
    alphabet: list[str] = []
    max_state = -1
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        src_s, action, *branches = line.split()
        src = int(src_s)
        if action not in alphabet:
            alphabet.append(action)
        entries = []
        for b in branches:
            p_s, dst_s = b.split(":")
            entries.append((int(dst_s), float(p_s)))
        max_state = max([max_state, src] + [s for s, _ in entries])
        transitions.append(Transition(src, alphabet.index(action), CategoricalDistribution(entries)))
    count = n_states if n_states is not None else max_state + 1
    label_map = (
        {s: frozenset(aps) for s, aps in labels.items()} if labels is not None else {}
    )
    return ProbabilisticAutomaton(
        n_states=count,
        alphabet=tuple(alphabet),
        transitions=tuple(transitions),
        labels=label_map,
        initial=initial,
    )

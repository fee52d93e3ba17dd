"""Shared test utilities: random PA generation and isomorphism checks."""

from __future__ import annotations

import numpy as np

from safemon.pa import (
    CategoricalDistribution,
    ProbabilisticAutomaton,
    Transition,
)


def random_pa(
    rng: np.random.Generator,
    max_states: int = 6,
    max_actions: int = 2,
    max_transitions_per_state: int = 2,
    max_support: int = 3,
    terminal_prob: float = 0.15,
    with_initial: bool = False,
) -> ProbabilisticAutomaton:
    """Small random PA with exactly representable probabilities.

    Distribution weights are integer ratios so that sums hit 1.0 without
    renormalization noise.
    """
    n = int(rng.integers(2, max_states + 1))
    n_actions = int(rng.integers(1, max_actions + 1))
    transitions = []
    for s in range(n):
        if rng.random() < terminal_prob:
            continue
        for _ in range(int(rng.integers(1, max_transitions_per_state + 1))):
            a = int(rng.integers(n_actions))
            k = int(rng.integers(1, max_support + 1))
            targets = rng.choice(n, size=min(k, n), replace=False)
            weights = rng.integers(1, 5, size=len(targets)).astype(float)
            weights /= weights.sum()
            transitions.append(
                Transition(
                    s,
                    a,
                    CategoricalDistribution(
                        [(int(t), float(w)) for t, w in zip(targets, weights)]
                    ),
                )
            )
    return ProbabilisticAutomaton(
        n_states=n,
        alphabet=tuple(f"a{i}" for i in range(n_actions)),
        transitions=tuple(transitions),
        initial=0 if with_initial else None,
    )


def assert_isomorphic(
    m1: ProbabilisticAutomaton,
    m2: ProbabilisticAutomaton,
    mapping: dict[int, int],
) -> None:
    """Check that ``mapping`` (m1 state -> m2 state) is a PA isomorphism."""
    assert m1.n_states == m2.n_states == len(mapping)
    assert sorted(mapping.values()) == list(range(m2.n_states))
    assert set(m1.alphabet) == set(m2.alphabet)
    act_map = {i: m2.alphabet.index(a) for i, a in enumerate(m1.alphabet)}

    def canon(pa, trans, state_map, action_map):
        key = []
        for t in trans:
            support = tuple(sorted((state_map(s), round(p, 12)) for s, p in t.dist.support))
            key.append((state_map(t.source), action_map(t.action), support))
        return sorted(key)

    k1 = canon(m1, m1.transitions, lambda s: mapping[s], lambda a: act_map[a])
    k2 = canon(m2, m2.transitions, lambda s: s, lambda a: a)
    assert k1 == k2, "transition structures differ under the mapping"
    for s in range(m1.n_states):
        assert m1.label_of(s) == m2.label_of(mapping[s])

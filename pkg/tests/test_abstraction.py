import numpy as np
import pytest

from safemon.abstraction import (
    ErrorBin,
    ErrorModel,
    Grid,
    IntervalDynamics,
    abstract_dynamics,
    build_abstract_system,
    estimate_error_model,
    successor_cells,
)
from safemon.watertank import TankParams, ThresholdArbiter, default_grid, tank_interval_dynamics


def shift_dynamics(delta):
    return IntervalDynamics(
        successor_box=lambda lo, hi, action: (
            tuple(x + delta for x in lo),
            tuple(x + delta for x in hi),
        )
    )


class TestGrid:
    def test_validation(self):
        with pytest.raises(ValueError):
            Grid(lower=[0.0], upper=[10.0], width=[3.0])  # not an integer multiple
        with pytest.raises(ValueError):
            Grid(lower=[0.0], upper=[10.0], width=[-1.0])

    def test_locate_lower_inclusive(self):
        g = Grid(lower=[0.0], upper=[4.0], width=[1.0])
        assert g.locate([2.0]) == ((2,), True)   # boundary point joins the upper cell
        assert g.locate([1.999999])[0] == (1,)
        assert g.locate([-0.5]) == ((0,), False)
        assert g.locate([4.0]) == ((3,), False)

    def test_partition_covers_every_inbounds_point(self):
        g = Grid(lower=[-0.5, -0.5], upper=[3.5, 3.5], width=[1.0, 1.0])
        rng = np.random.default_rng(0)
        for _ in range(500):
            x = rng.uniform(-0.5, 3.4999, size=2)
            cell, inside = g.locate(x)
            assert inside
            lo, hi = g.cell_box(cell)
            assert all(l <= xi < h for l, xi, h in zip(lo, x, hi))

    def test_midpoints(self):
        g = Grid(lower=[-0.5], upper=[2.5], width=[1.0])
        assert g.midpoint([0]) == (0.0,)
        assert g.midpoint([2]) == (2.0,)


class TestAbstractDynamics:
    def test_identity_self_loops(self):
        g = Grid(lower=[0.0], upper=[4.0], width=[1.0])
        pa = abstract_dynamics(g, shift_dynamics(0.0), actions=["u"])
        for t in pa.transitions:
            assert t.dist.states() == (t.source,)
        assert len(pa.transitions) == 4

    def test_half_cell_shift_two_successors(self):
        g = Grid(lower=[0.0], upper=[5.0], width=[1.0])
        pa = abstract_dynamics(g, shift_dynamics(1.5), actions=["u"])
        (t,) = [t for t in pa.transitions if t.source == 0 and t.dist.states() == (1,)]
        succs = sorted(s for tr in pa.transitions if tr.source == 0 for s in tr.dist.states())
        assert succs == [1, 2]  # box [1.5, 2.5) overlaps cells [1,2) and [2,3)

    def test_tank_fill_shift(self):
        # cell [50, 51), fill this tank with inflow 13.5 and outflow 4.3:
        # successor box [59.2, 60.2) overlaps cells 59 and 60
        g = Grid(lower=[0.0], upper=[101.0], width=[1.0])
        params = TankParams()
        dyn = tank_interval_dynamics(params)
        succs, escaped = successor_cells(g, dyn, (50,), 0)
        assert [c[0] for c in succs] == [59, 60]
        assert not escaped

    def test_escape_clips_to_boundary(self):
        g = Grid(lower=[0.0], upper=[3.0], width=[1.0])
        succs, escaped = successor_cells(g, shift_dynamics(-5.0), (0,), None)
        assert succs == [(0,)]
        assert escaped
        succs, escaped = successor_cells(g, shift_dynamics(+7.0), (2,), None)
        assert succs == [(2,)]
        assert escaped


class TestErrorModel:
    def test_all_zero_errors_single_bin(self):
        m = estimate_error_model(np.zeros(50), bin_width=1.0)
        assert len(m.bins) == 1
        b = m.bins[0]
        assert (b.lo, b.hi, b.prob) == (-0.5, 0.5, 1.0)

    def test_counting_three_bins(self):
        errors = [-1.5, -1.5, 0.5, 0.5, 0.5, 2.5, 2.5]
        m = estimate_error_model(errors, bin_width=1.0)
        assert [b.prob for b in m.bins] == pytest.approx([2 / 7, 3 / 7, 2 / 7])
        assert [(b.lo, b.hi) for b in m.bins] == [(-1.5, -0.5), (0.5, 1.5), (2.5, 3.5)]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            estimate_error_model([], 1.0)

    def test_bin_probabilities_sum_to_one(self):
        rng = np.random.default_rng(1)
        m = estimate_error_model(rng.normal(0, 3, size=1000), bin_width=0.5)
        assert sum(b.prob for b in m.bins) == pytest.approx(1.0, abs=1e-9)

    def test_roundtrip_dict(self):
        m = estimate_error_model([-1.5, 0.5, 0.5], 1.0)
        assert ErrorModel.from_dict(m.to_dict()) == m


def point_error_model():
    return ErrorModel(bins=(ErrorBin(-0.5, 0.5, 1.0),), bin_width=1.0, n_samples=1)


def tiny_params():
    return TankParams(
        n_tanks=2,
        size=10.0,
        inflow=3.5,
        outflow=1.3,
        lower_threshold=2.0,
        upper_threshold=8.0,
        sensor_sigma=1.0,
        outlier_prob=0.0,
        horizon=3,
    )


class TestBuildAbstractSystem:
    def test_state_count_and_layout(self):
        params = tiny_params()
        grid = default_grid(params)
        arbiter = ThresholdArbiter(params)
        system = build_abstract_system(
            grid,
            tank_interval_dynamics(params),
            [point_error_model()] * 2,
            arbiter,
            physical_range=(0.0, params.size),
        )
        n_cells = int(round(params.size)) + 1
        assert system.pa.n_states == n_cells * n_cells * 5
        for sid in (0, 17, system.pa.n_states - 1):
            cells, cfg = system.decode_state(sid)
            assert system.state_index(cells, cfg) == sid

    def test_deterministic_chain_with_point_error(self):
        # zero error and a one-cell successor: the composed automaton is a
        # deterministic chain (single transition, point distribution).
        params = tiny_params()
        grid = default_grid(params)
        arbiter = ThresholdArbiter(params)
        dyn = IntervalDynamics(
            successor_box=lambda lo, hi, fill: (lo, hi)  # frozen levels
        )
        system = build_abstract_system(
            grid, dyn, [point_error_model()] * 2, arbiter, physical_range=(0.0, params.size)
        )
        mid_cells = (5, 5)
        idle = arbiter.config_index((0, 0), None)
        sid = system.state_index(mid_cells, idle)
        trans = system.pa.transitions_from(sid)
        assert len(trans) == 1
        assert trans[0].dist.is_point()
        # perceived levels equal the midpoints (5, 5), inside the hysteresis
        # band, so the idle configuration persists
        assert trans[0].dist.states() == (sid,)

    def test_transition_distributions_normalized(self):
        params = tiny_params()
        grid = default_grid(params)
        arbiter = ThresholdArbiter(params)
        system = build_abstract_system(
            grid,
            tank_interval_dynamics(params),
            [point_error_model()] * 2,
            arbiter,
            physical_range=(0.0, params.size),
        )
        for t in system.pa.transitions[:200]:
            assert t.dist.total() == pytest.approx(1.0, abs=1e-9)

    def test_boundary_cells_labeled_unsafe(self):
        params = tiny_params()
        grid = default_grid(params)
        arbiter = ThresholdArbiter(params)
        system = build_abstract_system(
            grid,
            tank_interval_dynamics(params),
            [point_error_model()] * 2,
            arbiter,
            physical_range=(0.0, params.size),
        )
        n = grid.counts[0]
        unsafe = system.pa.states_with_label("unsafe")
        cells_last = n - 1
        for cfg in range(5):
            assert system.state_index((0, 3), cfg) in unsafe
            assert system.state_index((3, cells_last), cfg) in unsafe
            assert system.state_index((4, 4), cfg) not in unsafe

    def test_coin_flip_on_equal_low_cells(self):
        # both tanks below the lower threshold with identical perceived
        # levels: the arbiter's next config splits evenly between filling
        # tank 1 and tank 2
        params = tiny_params()
        grid = default_grid(params)
        arbiter = ThresholdArbiter(params)
        atoms = [(np.array([1.0]), np.array([1.0]))] * 2  # perceived exactly 1.0 < LT
        dist = dict(arbiter.config_distribution(atoms, (0, 0)))
        fill1 = arbiter.config_index((1, 1), 0)
        fill2 = arbiter.config_index((1, 1), 1)
        assert dist == {fill1: 0.5, fill2: 0.5}

    def test_config_distribution_masses_sum_to_one(self):
        params = tiny_params()
        arbiter = ThresholdArbiter(params)
        rng = np.random.default_rng(2)
        for _ in range(25):
            atoms = []
            for _ in range(2):
                k = int(rng.integers(1, 6))
                vals = np.sort(rng.uniform(0, params.size, size=k))
                probs = rng.integers(1, 4, size=k).astype(float)
                probs /= probs.sum()
                atoms.append((vals, probs))
            req = (int(rng.integers(2)), int(rng.integers(2)))
            dist = arbiter.config_distribution(atoms, req)
            assert sum(p for _, p in dist) == pytest.approx(1.0, abs=1e-9)

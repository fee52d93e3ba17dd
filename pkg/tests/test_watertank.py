import numpy as np
import pytest
from scipy.special import ndtr

from safemon.watertank import (
    FilterState,
    SystemState,
    TankBelief,
    TankParams,
    control,
    estimation_errors,
    filter_update,
    measurement_update,
    predict,
    run_trial,
    sense,
    step_dynamics,
    trial_seed,
    uniform_belief,
    write_trace_csv,
)


def params(**overrides):
    return TankParams(**overrides)


def point_belief(level, params_):
    base = uniform_belief(params_)
    values = np.array([float(level)])
    return TankBelief(values=values, probs=np.array([1.0]))


class TestParams:
    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            TankParams(lower_threshold=90.0, upper_threshold=10.0)
        with pytest.raises(ValueError):
            TankParams(inflow=1.0, outflow=2.0)

    def test_net_flow(self):
        p = params()
        assert p.net_flow(0, 0) == pytest.approx(9.2)
        assert p.net_flow(1, 0) == pytest.approx(-4.3)
        assert p.net_flow(0, None) == pytest.approx(-4.3)


class TestDynamics:
    def test_fill_one_tank(self):
        p = params()
        s = SystemState(levels=(50.0, 50.0), requests=(1, 0), fill=0)
        new, breach = step_dynamics(p, s, fill=0)
        assert new.levels == pytest.approx((59.2, 45.7))
        assert breach == (False, False)

    def test_underflow_breach(self):
        p = params()
        s = SystemState(levels=(3.0, 50.0), requests=(0, 0), fill=None)
        new, breach = step_dynamics(p, s, fill=None)
        assert breach == (True, False)
        assert new.levels[0] == 0.0  # clamped

    def test_overflow_breach(self):
        p = params()
        s = SystemState(levels=(95.0, 50.0), requests=(1, 0), fill=0)
        _, breach = step_dynamics(p, s, fill=0)
        assert breach == (True, False)  # 95 + 9.2 = 104.2 > 100

    def test_fill_must_target_requester(self):
        with pytest.raises(ValueError):
            SystemState(levels=(50.0, 50.0), requests=(0, 0), fill=0)


class TestSense:
    def test_no_noise_returns_level(self):
        p = params(sensor_sigma=1e-12, outlier_prob=0.0)
        rng = np.random.default_rng(0)
        assert sense(p, 42.0, rng) == pytest.approx(42.0, abs=1e-9)

    def test_always_outlier(self):
        p = params(outlier_prob=0.999999999)
        rng = np.random.default_rng(1)
        readings = {sense(p, 50.0, rng) for _ in range(100)}
        assert readings <= {0.0, 100.0}
        assert len(readings) == 2

    def test_monte_carlo_mean(self):
        # closed form: 0.9 * 50 + 0.1 * (0 + 100) / 2 = 50
        p = params(sensor_sigma=5.0, outlier_prob=0.1)
        rng = np.random.default_rng(2)
        n = 100_000
        vals = np.array([sense(p, 50.0, rng) for _ in range(n)])
        se = vals.std() / np.sqrt(n)
        assert abs(vals.mean() - 50.0) < 4 * se + 1e-9


class TestFilter:
    def test_exact_shift_keeps_point_mass(self):
        # point mass at 50, near-exact reading 50, no fill: the predict step
        # shifts the support by the net flow, landing the mass at 45.7
        p = params(sensor_sigma=1e-6, outlier_prob=0.0)
        fs = FilterState(beliefs=(point_belief(50.0, p),))
        fs2 = filter_update(p, fs, readings=[50.0], fill=None)
        belief = fs2.beliefs[0]
        assert belief.values.tolist() == [45.7]
        assert belief.probs.tolist() == [1.0]

    def test_uniform_prior_saturated_reading_gives_tail_weights(self):
        p = params(sensor_sigma=5.0, outlier_prob=0.0)
        belief = uniform_belief(p)
        post = measurement_update(p, belief, 0.0)
        expect = ndtr((0.0 - belief.values) / p.sensor_sigma)
        expect = expect / expect.sum()
        assert post.probs == pytest.approx(expect, abs=1e-12)

    def test_update_normalized(self):
        p = params()
        rng = np.random.default_rng(3)
        belief = uniform_belief(p)
        for _ in range(20):
            reading = float(rng.uniform(0, 100))
            belief = measurement_update(p, belief, reading)
            assert float(belief.probs.sum()) == pytest.approx(1.0, abs=1e-9)
            belief = predict(p, belief, p.net_flow(0, None if rng.random() < 0.5 else 0))
            assert float(belief.probs.sum()) == pytest.approx(1.0, abs=1e-9)

    def test_degenerate_posterior_falls_back_to_prior(self, caplog):
        # reading 0 is impossible under a tiny-sigma no-outlier model when
        # the belief sits far away
        p = params(sensor_sigma=1e-9, outlier_prob=0.0)
        belief = point_belief(80.0, p)
        with caplog.at_level("WARNING", logger="safemon.watertank"):
            post = measurement_update(p, belief, 0.0)
        assert post.probs.tolist() == [1.0]
        assert any("degenerate" in r.message for r in caplog.records)

    def test_boundary_mass_accumulates(self):
        p = params()
        belief = TankBelief(values=np.array([1.0, 2.0, 50.0]), probs=np.array([0.25, 0.25, 0.5]))
        shifted = predict(p, belief, -4.3)
        assert shifted.values.tolist() == [0.0, 45.7]
        assert shifted.probs.tolist() == [0.5, 0.5]


class TestControl:
    def test_request_below_lower_threshold(self):
        p = params()
        rng = np.random.default_rng(4)
        requests, fill = control(p, (5.0, 50.0), (0, 0), rng)
        assert requests == (1, 0)
        assert fill == 0

    def test_hysteresis_latches_until_upper_threshold(self):
        p = params()
        rng = np.random.default_rng(5)
        requests, fill = control(p, (50.0, 50.0), (1, 0), rng)
        assert requests == (1, 0)
        assert fill == 0
        requests, fill = control(p, (90.0, 50.0), (1, 0), rng)
        assert requests == (0, 0)
        assert fill is None

    def test_tie_is_a_fair_coin(self):
        p = params()
        rng = np.random.default_rng(6)
        picks = [control(p, (5.0, 5.0), (0, 0), rng)[1] for _ in range(10_000)]
        frac = np.mean([f == 0 for f in picks])
        assert abs(frac - 0.5) < 0.02

    def test_lowest_requester_wins(self):
        p = params()
        rng = np.random.default_rng(7)
        requests, fill = control(p, (8.0, 3.0), (0, 0), rng)
        assert requests == (1, 1)
        assert fill == 1


class TestRunTrial:
    def test_deterministic_given_seed(self):
        p = params()
        t1 = run_trial(p, (50.0, 50.0), trial_seed(123, 0), length=30)
        t2 = run_trial(p, (50.0, 50.0), trial_seed(123, 0), length=30)
        assert len(t1.steps) == len(t2.steps)
        for a, b in zip(t1.steps, t2.steps):
            assert a.levels == b.levels
            assert a.readings == b.readings
            assert a.means == b.means
            assert (a.requests, a.fill) == (b.requests, b.fill)

    def test_distinct_seeds_differ(self):
        p = params()
        t1 = run_trial(p, (50.0, 50.0), trial_seed(123, 0), length=10)
        t2 = run_trial(p, (50.0, 50.0), trial_seed(123, 1), length=10)
        assert any(a.readings != b.readings for a, b in zip(t1.steps, t2.steps))

    def test_noiseless_start_mid_is_safe_for_50_steps(self):
        p = params(sensor_sigma=1e-6, outlier_prob=0.0)
        trace = run_trial(p, (50.0, 50.0), trial_seed(0, 0), length=50)
        assert trace.breach_step is None
        assert len(trace.steps) == 50
        assert all(lab == 1 for lab in trace.labels[:40])
        assert all(lab is None for lab in trace.labels[41:])

    def test_noiseless_estimate_tracks_truth_within_one_cell(self):
        p = params(sensor_sigma=1e-6, outlier_prob=0.0)
        trace = run_trial(p, (47.3, 52.9), trial_seed(1, 0), length=50)
        for step in trace.steps:
            for i in range(2):
                assert abs(step.means[i] - step.levels[i]) <= 1.0

    def test_labels_around_breach(self):
        p = params()
        # start both tanks just above empty: breach comes fast
        trace = run_trial(p, (6.0, 6.5), trial_seed(2, 3), length=50)
        if trace.breach_step is None:
            pytest.skip("no breach for this seed")
        b = trace.breach_step
        for step in trace.steps:
            expect = 0 if b <= step.t + p.horizon else 1
            assert trace.labels[step.t] == expect

    def test_estimation_errors_shape(self):
        p = params()
        traces = [run_trial(p, (50.0, 50.0), trial_seed(9, k), 20) for k in range(3)]
        errs = estimation_errors(traces, 0)
        assert errs.shape[0] == sum(len(t.steps) for t in traces)


class TestTraceCsv:
    def test_csv_layout(self, tmp_path):
        p = params()
        trace = run_trial(p, (50.0, 50.0), trial_seed(11, 0), length=5)
        path = tmp_path / "trial.csv"
        write_trace_csv(trace, path, monitors={"mon_point": [0.5] * 5, "mon_dist": [0.6] * 5})
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        assert header[0] == "timestep"
        assert "mon_dist" in header and "mon_point" in header
        assert len(lines) == 1 + len(trace.steps)

    def test_csv_deterministic(self, tmp_path):
        p = params()
        trace = run_trial(p, (50.0, 50.0), trial_seed(11, 0), length=5)
        write_trace_csv(trace, tmp_path / "a.csv")
        write_trace_csv(trace, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

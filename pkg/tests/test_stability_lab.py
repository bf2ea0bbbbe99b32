"""
Tests for measure tilts, perturbation schedules and the stability experiments
"""

import json
import math

import numpy as np
import pytest

from dual_solver import solve_dual
from errors import InputError, TiltTooLargeError, NumericError
from stability_lab import (
    PerturbationSchedule, load_schedule, tilt_measure, deflator_measure_change, measure_change_checks,
    uiz_diagnostic, fit_decay_rate, run_static, run_dynamic, shadow_stability, MeasureTilt,
)


def schedule_for(spec, n_steps):
    return PerturbationSchedule(x=1.0, y=1.0, spec=spec, a=0.2, b=0.2, kappa=0.5, theta=0.3, n_steps=n_steps)


class TestMeasureTilt:
    """Exponential tilts of the conditional weights"""

    def test_one_period_tilt(self, one_period):
        tilt = tilt_measure(one_period.tree, 0.5 * math.log(1.5))
        assert np.allclose(tilt.tree.cond_prob[1:], [0.6, 0.4])
        assert np.allclose(tilt.terminal, [1.2, 0.8])
        assert tilt.density[0] == pytest.approx(1.0)
        assert tilt.tv == pytest.approx(0.1)

    def test_zero_tilt_is_identity(self, binomial_market):
        tilt = tilt_measure(binomial_market.tree, 0.0)
        assert np.all(tilt.density == 1.0)
        assert tilt.tv == 0.0

    def test_per_node_tilts(self, binomial_market):
        tree = binomial_market.tree
        theta = np.zeros(tree.non_leaves.size)
        theta[0] = 0.4
        tilt = tilt_measure(tree, theta)
        assert np.allclose(tilt.density[tree.level(1)], [1 + np.tanh(0.4), 1 - np.tanh(0.4)])
        # deeper nodes are not tilted
        assert np.allclose(tilt.tree.cond_prob[tree.level(2)], 0.5)

    def test_density_is_martingale(self, three_period_market):
        tree = three_period_market.tree
        tilt = tilt_measure(tree, 0.7)
        assert tree.expect_leaves(tilt.terminal) == pytest.approx(1.0)

    def test_tilt_too_large(self, one_period):
        with pytest.raises(TiltTooLargeError):
            tilt_measure(one_period.tree, 50.0)

    def test_tv_halves_along_schedule(self, three_period_market):
        tvs = [tilt_measure(three_period_market.tree, 0.3 * 0.5 ** n).tv for n in range(8)]
        ratios = np.array(tvs[1:]) / np.array(tvs[:-1])
        assert np.all(np.abs(ratios / 0.5 - 1.0) <= 0.1)
        assert fit_decay_rate(tvs) == pytest.approx(0.5, abs=0.05)


class TestMeasureChange:
    """Deflators moved between equivalent measures"""

    def test_identity_tilt(self, binomial_market, log_spec):
        d = solve_dual(binomial_market, log_spec, 1.0).deflator
        tilt = tilt_measure(binomial_market.tree, 0.0)
        moved = deflator_measure_change(binomial_market, d, tilt)
        assert np.array_equal(moved.y0, d.y0)
        assert np.array_equal(moved.y1, d.y1)

    def test_tilted_optimum_is_base_deflator(self, binomial_market, crra_spec):
        tilt = tilt_measure(binomial_market.tree, 0.25)
        tilted = binomial_market.with_tree(tilt.tree)
        dual = solve_dual(tilted, crra_spec, 1.1)
        result = measure_change_checks(binomial_market, dual, tilt)
        assert result["cps"]["feasible"]
        assert result["deflator"]["passed"]
        assert result["round_trip"] <= 1e-14

    def test_vanishing_density(self, binomial_market, log_spec):
        d = solve_dual(binomial_market, log_spec, 1.0).deflator
        tree = binomial_market.tree
        broken = MeasureTilt(np.zeros(tree.size), tree, 1.0)
        with pytest.raises(NumericError):
            deflator_measure_change(binomial_market, d, broken, "to_tilted")

    def test_unknown_direction(self, binomial_market, log_spec):
        d = solve_dual(binomial_market, log_spec, 1.0).deflator
        with pytest.raises(InputError):
            deflator_measure_change(binomial_market, d, tilt_measure(binomial_market.tree, 0.0), "sideways")


class TestSchedule:
    """Geometric perturbation schedules"""

    def test_sequences(self):
        schedule = PerturbationSchedule(x=2.0, y=1.0, a=0.2, b=-0.1, kappa=0.5, theta=0.4, n_steps=5)
        assert schedule.x_n(0) == pytest.approx(2.4)
        assert schedule.y_n(1) == pytest.approx(0.95)
        assert schedule.theta_n(2) == pytest.approx(0.1)
        assert schedule.utility(0).gamma == pytest.approx(1.5)

    def test_rejects_bad_rate(self):
        with pytest.raises(InputError):
            PerturbationSchedule(rate=1.0)

    def test_load_json_and_toml(self, tmp_path):
        data = {"x": 1.0, "y": 0.5, "utility": "crra:2", "a": 0.2, "b": 0.2, "kappa": 0.5, "theta": 0.3, "N": 12}
        json_path = tmp_path / "schedule.json"
        json_path.write_text(json.dumps(data))
        toml_path = tmp_path / "schedule.toml"
        toml_path.write_text('x = 1.0\ny = 0.5\nutility = "crra:2"\na = 0.2\nb = 0.2\nkappa = 0.5\ntheta = 0.3\nN = 12\n')
        assert load_schedule(str(json_path)) == load_schedule(str(toml_path))
        assert load_schedule(str(json_path)).n_steps == 12

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "schedule.json"
        path.write_text(json.dumps({"x": 1.0, "steps": 3}))
        with pytest.raises(InputError, match="steps"):
            load_schedule(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_schedule(str(tmp_path / "nothing.json"))


class TestUizDiagnostic:
    """Uniform integrability surrogate"""

    def test_zero_when_dual_stays_above_threshold(self, one_period, log_spec):
        dual = solve_dual(one_period, log_spec, 1.0)
        schedule = PerturbationSchedule(n_steps=4)
        result = uiz_diagnostic(one_period, schedule, dual.price_system.z0, 1.0)
        assert result["sup"] == 0.0
        assert result["finite"]

    def test_finite_on_tilted_schedule(self, binomial_market, log_spec):
        dual = solve_dual(binomial_market, log_spec, 1.0)
        schedule = schedule_for(log_spec, n_steps=6)
        result = uiz_diagnostic(binomial_market, schedule, dual.price_system.z0, 8.0)
        assert result["finite"]
        assert len(result["values"]) == 6


class TestFitDecayRate:
    def test_geometric(self):
        assert fit_decay_rate([0.3 * 0.5 ** n for n in range(10)]) == pytest.approx(0.5)

    def test_below_floor(self):
        assert fit_decay_rate([1e-12, 1e-13, 0.0]) is None


class TestStaticStability:
    """Value, derivative and optimizer convergence"""

    def test_ten_step_schedule(self, three_period_market, log_spec):
        schedule = schedule_for(log_spec, n_steps=10)
        report = run_static(three_period_market, schedule, parallel=2)
        failed = [c.to_dict() for c in report.checks if not c.passed]
        assert report.passed, failed
        assert len(report.rows) == 10
        assert {c.name for c in report.checks} >= {"err_u", "err_v", "err_du", "err_dv", "dist_g", "dist_h",
                                                   "tv_halving"}
        assert report.rates["tv"] == pytest.approx(0.5, abs=0.05)

    def test_short_schedule_only_checks_tv(self, binomial_market, log_spec):
        report = run_static(binomial_market, schedule_for(log_spec, n_steps=3))
        assert [c.name for c in report.checks] == ["tv_halving"]
        assert report.rows[0]["x_n"] == pytest.approx(1.2)


class TestDynamicStability:
    """Averaged optimal dual processes"""

    def test_limit_is_optimal(self, binomial_market, log_spec):
        schedule = schedule_for(log_spec, n_steps=24)
        result = run_dynamic(binomial_market, schedule, parallel=2)
        checks = {c.name: c for c in result["checks"]}
        assert checks["limit_is_deflator"].passed
        assert checks["limit_dual_value"].passed
        assert checks["measure_change_round_trip"].passed
        assert checks["measure_change_feasible"].passed
        assert len(result["rows"]) == 24

    def test_unknown_averaging(self, binomial_market, log_spec):
        with pytest.raises(InputError):
            run_dynamic(binomial_market, schedule_for(log_spec, n_steps=2), cesaro="median")

    @pytest.mark.slow
    def test_shadow_of_limit(self, binomial_market, log_spec):
        schedule = schedule_for(log_spec, n_steps=24)
        result = shadow_stability(binomial_market, schedule, parallel=2)
        assert result["pass"], [c.to_dict() for c in result["checks"]]
        assert result["x"] == pytest.approx(1.0, rel=1e-6)

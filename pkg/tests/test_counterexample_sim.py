"""
Tests for the path simulation of a market with two dual optimizers
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from counterexample_sim import (
    CxConfig, LevelTables, simulate_hat, decompose_potential, perturb, build_market, run_counterexample,
    verify_nonuniqueness, merton_fraction, statistics_table, path_dump, UPPER, LOWER, CAP,
)
from errors import ConfigError

SMALL = dict(m=10, depth=20_000, paths=2_000, chunk=500, block=256, seed=3, grid_points=11)


@pytest.fixture(scope="module")
def small_run():
    return run_counterexample(CxConfig(**SMALL))


class TestCxConfig:
    """Parameter validation and lattice constants"""

    @pytest.mark.parametrize("overrides", [
        {"lam": 0.6}, {"lam": 0.0}, {"delta": -0.01}, {"delta": 0.2}, {"eps_low": 1.5}, {"paths": 0},
        {"grid_points": 1},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            CxConfig(**overrides)

    def test_lattice(self):
        cfg = CxConfig()
        assert cfg.barrier == pytest.approx(1.8)
        assert cfg.m_hat == pytest.approx(1.0 / 1.8)
        assert cfg.watch_level == -30
        assert cfg.low_level < cfg.watch_level < 0

    def test_inverse_price_is_martingale(self):
        cfg = CxConfig()
        h, p = cfg.step, cfg.up_probability
        assert p * math.exp(-h) + (1.0 - p) * math.exp(h) == pytest.approx(1.0, abs=1e-15)
        assert p > 0.5

    def test_level_tables_are_exact_at_barrier(self):
        cfg = CxConfig()
        tables = LevelTables(cfg)
        assert tables.S(cfg.m) == 1.8
        assert tables.Z(cfg.m) == cfg.m_hat
        assert tables.P(cfg.m) == 0.0
        assert tables.Z(0) == 1.0
        assert tables.P(0) == pytest.approx(0.4444, abs=1e-4)

    def test_log_optimal_fraction_is_buy_and_hold(self):
        assert merton_fraction(CxConfig()) == pytest.approx(1.0, rel=1e-9)


class TestSimulation:
    """Stopped walks"""

    def test_every_path_is_classified(self):
        ens = simulate_hat(CxConfig(**SMALL))
        assert ens.size == SMALL["paths"]
        assert set(np.unique(ens.side)) <= {UPPER, LOWER, CAP}
        upper = ens.side == UPPER
        assert np.all(ens.final_level[upper] == SMALL["m"])
        assert np.all(ens.absorb_step[upper] <= SMALL["depth"])
        fractions = ens.findings["upper_fraction"] + ens.findings["lower_fraction"] + ens.findings["cap_fraction"]
        assert fractions == pytest.approx(1.0)

    def test_watch_passage_bookkeeping(self):
        cfg = CxConfig(**SMALL)
        ens = simulate_hat(cfg)
        hit = ens.hit_watch
        assert np.all(ens.post_min[hit] <= cfg.watch_level)
        assert np.all(ens.pre_min[hit] > cfg.watch_level)
        assert np.all(ens.pre_min[~hit] > cfg.watch_level)
        assert np.all(ens.pre_max <= cfg.m)

    def test_grid_starts_at_zero_level(self):
        ens = simulate_hat(CxConfig(**SMALL))
        assert np.all(ens.grid_levels[:, 0] == 0)
        upper = ens.side == UPPER
        assert np.all(ens.grid_levels[upper, -1] == SMALL["m"])

    def test_worker_count_does_not_change_paths(self):
        one = simulate_hat(CxConfig(**SMALL))
        two = simulate_hat(CxConfig(**{**SMALL, "parallel": 2}))
        assert np.array_equal(one.side, two.side)
        assert np.array_equal(one.absorb_step, two.absorb_step)
        assert np.array_equal(one.grid_levels, two.grid_levels)

    def test_seed_changes_paths(self):
        one = simulate_hat(CxConfig(**SMALL))
        other = simulate_hat(CxConfig(**{**SMALL, "seed": 4}))
        assert not np.array_equal(one.absorb_step, other.absorb_step)


class TestStages:
    """Potential, coin and market construction"""

    def test_stages_fill_in_lazily(self):
        ens = simulate_hat(CxConfig(**SMALL))
        staged = build_market(ens)
        assert staged.potential is not None
        assert staged.coin is not None
        assert staged.market["containment_violations"] == 0

    def test_coin_values(self):
        ens = perturb(decompose_potential(simulate_hat(CxConfig(**SMALL))))
        assert set(np.round(np.unique(ens.coin), 12)) <= {0.95, 1.05}
        assert ens.findings["ratio_violations"] == 0

    def test_potential_passage_probability(self):
        ens = decompose_potential(simulate_hat(CxConfig(**SMALL)))
        pot = ens.potential
        assert pot["p_hat_0"] == pytest.approx(pot["p_hat_0_closed_form"], abs=1e-12)
        assert abs(pot["sigma_probability"] - pot["sigma_probability_exact"]) <= 4 * pot["sigma_se"]
        assert pot["upper_potential_max"] == 0.0


class TestReport:
    """Exact constants on a small ensemble"""

    def test_exact_values(self, small_run):
        report, _ = small_run
        values = report.values
        assert values["p_hat_0"] == pytest.approx(0.8 / 1.8, abs=1e-12)
        assert values["dual_optimizer"] == pytest.approx(1.0 / 1.8, abs=1e-15)
        assert values["dual_optimizer_error"] <= 1e-12
        assert values["s0"] == pytest.approx(1.0, abs=1e-12)
        assert values["s1_error"] <= 1e-12
        assert values["ratio_violations"] == 0
        assert values["containment_violations"] == 0

    def test_deviation_matches_passage(self, small_run):
        report, ens = small_run
        assert report.values["deviation_fraction"] == pytest.approx(float(ens.hit_watch.mean()))

    def test_exact_checks_pass(self, small_run):
        report, _ = small_run
        checks = {c.name: c for c in report.checks}
        for name in ("p_hat_0_exact", "dual_optimizer_exact", "first_order_condition", "initial_price",
                     "terminal_price", "ratio_violations", "containment_violations", "absorbed_mass"):
            assert checks[name].passed, checks[name].to_dict()

    def test_martingale_checks_are_reported(self, small_run):
        report, _ = small_run
        names = {c.name for c in report.checks}
        assert {"inverse_price_martingale", "perturbed_dual_martingale"} <= names
        assert report.values["inverse_price_max_z"] >= 0.0

    def test_drifting_price_fails_inverse_martingale(self, small_run):
        _, ens = small_run
        cfg = ens.config
        shifted = np.clip(ens.grid_levels + 2, cfg.low_level, cfg.m)
        report = verify_nonuniqueness(replace(ens, grid_levels=shifted))
        checks = {c.name: c for c in report.checks}
        assert not checks["inverse_price_martingale"].passed
        assert not report.passed

    def test_biased_coin_fails_perturbed_martingale(self, small_run):
        _, ens = small_run
        # every watched path switches to the perturbed candidate at time zero with f = 1.5
        corrupted = replace(ens, coin=np.full(ens.size, 1.5), watch_step=np.where(ens.hit_watch, 0, -1))
        report = verify_nonuniqueness(corrupted)
        checks = {c.name: c for c in report.checks}
        assert not checks["perturbed_dual_martingale"].passed
        assert report.values["perturbed_dual_max_z"] > 3.0

    def test_without_coin_the_optimizers_agree(self):
        report, _ = run_counterexample(CxConfig(**{**SMALL, "delta": 0.0, "paths": 500}))
        assert report.values["deviation_fraction"] == 0.0

    def test_tables(self, small_run):
        _, ens = small_run
        rows = statistics_table(ens)
        assert len(rows) == SMALL["grid_points"]
        assert rows[0]["mean_z_hat"] == pytest.approx(1.0)
        assert rows[0]["mean_price"] == pytest.approx(1.0)
        dump = path_dump(ens, 3)
        assert len(dump) == 3 * SMALL["grid_points"]
        assert {"path", "t", "s_hat", "s_check", "price"} == set(dump[0])


@pytest.mark.slow
class TestAcceptance:
    """Full-size run with the reference constants"""

    def test_reference_run(self):
        report, _ = run_counterexample(CxConfig(lam=0.1, delta=0.05, m=40, paths=100_000, eps_low=1e-3, parallel=4))
        values = report.values
        assert report.passed, [c.to_dict() for c in report.checks if not c.passed]
        assert values["p_hat_0"] == pytest.approx(0.4444, abs=1e-4)
        assert values["dual_optimizer"] == pytest.approx(0.5556, abs=1e-4)
        assert abs(values["sigma_probability"] - 0.4444) <= 3 * values["sigma_se"]
        assert values["lower_fraction"] + values["cap_fraction"] < 2e-2

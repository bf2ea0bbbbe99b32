"""
Monte-Carlo reconstruction of a frictional market with two distinct dual
optimizers and two distinct shadow prices under log utility.

ln N is a lattice random walk with step h = ln(2(1-lambda))/m whose
up-probability makes 1/N a martingale. N is stopped at the upper barrier
2(1-lambda), at a small lower level, or at a depth cap. Paths are never
stored in full: each path keeps its absorption data, the first passage to
the watch level where the potential reaches one, the level ranges visited
before and after that passage, and its level on a normalized time grid.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from config import DEPTH_CAP_WARNING, DEFAULT_SEED
from errors import ConfigError, ConstructionError
from reports import CheckResult, all_passed

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

UPPER = 1
CAP = 0
LOWER = -1

SE_MULTIPLE = 3.0
EXACT_TOL = 1e-12
ABSORBED_MASS_LIMIT = 2e-2
_BIG = np.iinfo(np.int32).max
_SMALL = np.iinfo(np.int32).min


@dataclass(frozen=True)
class CxConfig:
    lam: float = 0.1
    delta: float = 0.05
    m: int = 40
    depth: int = 250_000
    eps_low: float = 1e-3
    paths: int = 100_000
    seed: int = DEFAULT_SEED
    grid_points: int = 51
    chunk: int = 10_000
    block: int = 512
    parallel: int = 1

    def __post_init__(self):
        if not 0.0 < self.lam < 0.5:
            raise ConfigError(f"lambda must lie in (0, 1/2), got {self.lam}")
        if self.delta < 0:
            raise ConfigError(f"delta must be non-negative, got {self.delta}")
        if not (1.0 - self.lam) * (1.0 + self.delta) < 1.0 - self.delta:
            raise ConfigError("need (1 - lambda)(1 + delta) < 1 - delta")
        if not 0.0 < self.eps_low < 1.0:
            raise ConfigError(f"lower level must lie in (0, 1), got {self.eps_low}")
        for name in ("m", "depth", "paths", "grid_points", "chunk", "block", "parallel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.grid_points < 2:
            raise ConfigError("grid needs at least two points")

    @property
    def barrier(self):
        return 2.0 * (1.0 - self.lam)

    @property
    def step(self):
        return math.log(self.barrier) / self.m

    @property
    def up_probability(self):
        h = self.step
        p = (math.exp(h) - 1.0) / (math.exp(h) - math.exp(-h))
        if not 0.0 < p < 1.0:
            raise ConfigError(f"walk probability {p} outside (0, 1)")
        return p

    @property
    def low_level(self):
        return math.floor(math.log(self.eps_low) / self.step)

    @property
    def m_hat(self):
        return 1.0 / self.barrier

    @property
    def watch_level(self):
        """Lattice level nearest to where the potential equals one."""
        return int(round(-math.log(1.0 + self.m_hat) / self.step))

    def to_dict(self):
        return {
            "lambda": self.lam, "delta": self.delta, "m": self.m, "depth": self.depth,
            "eps_low": self.eps_low, "paths": self.paths, "seed": self.seed,
            "grid_points": self.grid_points, "chunk": self.chunk, "block": self.block,
        }


class LevelTables:
    """Closed-form processes indexed by lattice level k in [low, m]."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.low = cfg.low_level
        k = np.arange(self.low, cfg.m + 1)
        h = cfg.step
        self.s_hat = np.exp(k * h)
        self.z_hat = np.exp(-k * h)
        # exact values at the upper barrier
        self.s_hat[-1] = cfg.barrier
        self.z_hat[-1] = cfg.m_hat
        self.p_hat = self.z_hat - cfg.m_hat
        self.p_hat[-1] = 0.0

    def index(self, level):
        return np.asarray(level) - self.low

    def Z(self, level):
        return self.z_hat[self.index(level)]

    def S(self, level):
        return self.s_hat[self.index(level)]

    def P(self, level):
        return self.p_hat[self.index(level)]


@dataclass(frozen=True)
class PathEnsemble:
    config: CxConfig
    absorb_step: np.ndarray
    side: np.ndarray
    final_level: np.ndarray
    watch_step: np.ndarray
    pre_min: np.ndarray
    pre_max: np.ndarray
    post_min: np.ndarray
    post_max: np.ndarray
    grid_steps: np.ndarray
    grid_levels: np.ndarray
    coin_seeds: list
    potential: Optional[dict] = None
    coin: Optional[np.ndarray] = None
    market: Optional[dict] = None
    findings: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.side.size

    @property
    def tables(self):
        return LevelTables(self.config)

    @property
    def hit_watch(self):
        return self.watch_step >= 0

    def grid_time(self):
        return self.grid_steps / self.config.depth


def _simulate_chunk(cfg, walk_seed, n, grid_steps):
    rng = np.random.default_rng(walk_seed)
    p = cfg.up_probability
    top, low, watch = cfg.m, cfg.low_level, cfg.watch_level
    level = np.zeros(n, dtype=np.int32)
    absorb_step = np.full(n, cfg.depth, dtype=np.int64)
    side = np.full(n, CAP, dtype=np.int8)
    watch_step = np.full(n, -1, dtype=np.int64)
    pre_min = np.zeros(n, dtype=np.int32)
    pre_max = np.zeros(n, dtype=np.int32)
    post_min = np.full(n, _BIG, dtype=np.int32)
    post_max = np.full(n, _SMALL, dtype=np.int32)
    grid = np.zeros((n, grid_steps.size), dtype=np.int32)
    active = np.arange(n)
    step = 0
    while active.size and step < cfg.depth:
        width = min(cfg.block, cfg.depth - step)
        moves = np.where(rng.random((active.size, width)) < p, 1, -1).astype(np.int32)
        path = level[active, None] + np.cumsum(moves, axis=1, dtype=np.int32)
        hit = (path >= top) | (path <= low)
        done = hit.any(axis=1)
        end = np.where(done, hit.argmax(axis=1), width - 1)
        cols = np.arange(width)
        valid = cols[None, :] <= end[:, None]
        # freeze absorbed paths at their absorption level
        path = np.where(valid, path, path[np.arange(active.size), end][:, None])

        seen = watch_step[active] >= 0
        crossing = (path <= watch) & valid
        new = ~seen & crossing.any(axis=1)
        start = np.where(seen, 0, np.where(new, crossing.argmax(axis=1), width))
        pre = valid & (cols[None, :] < start[:, None])
        post = valid & (cols[None, :] >= start[:, None])
        pre_min[active] = np.minimum(pre_min[active], np.where(pre, path, _BIG).min(axis=1))
        pre_max[active] = np.maximum(pre_max[active], np.where(pre, path, _SMALL).max(axis=1))
        post_min[active] = np.minimum(post_min[active], np.where(post, path, _BIG).min(axis=1))
        post_max[active] = np.maximum(post_max[active], np.where(post, path, _SMALL).max(axis=1))
        watch_step[active[new]] = step + start[new] + 1

        in_block = (grid_steps > step) & (grid_steps <= step + width)
        for j in np.flatnonzero(in_block):
            grid[active, j] = path[:, grid_steps[j] - step - 1]

        final = path[np.arange(active.size), end]
        level[active] = final
        ended = active[done]
        absorb_step[ended] = step + end[done] + 1
        side[ended] = np.where(final[done] >= top, UPPER, LOWER)
        active = active[~done]
        step += width

    # grid points after absorption keep the absorbed level
    for j in np.flatnonzero(grid_steps > 0):
        late = absorb_step < grid_steps[j]
        grid[late, j] = level[late]
    return {
        "absorb_step": absorb_step, "side": side, "final_level": level, "watch_step": watch_step,
        "pre_min": pre_min, "pre_max": pre_max, "post_min": post_min, "post_max": post_max,
        "grid_levels": grid,
    }


def simulate_hat(cfg):
    """
    Simulate the stopped walk for every path.

    Chunks of paths own child seeds of one SeedSequence, so results do not
    depend on the number of workers.
    """
    root = np.random.SeedSequence(cfg.seed)
    sizes = [min(cfg.chunk, cfg.paths - i) for i in range(0, cfg.paths, cfg.chunk)]
    children = root.spawn(len(sizes))
    walk_seeds, coin_seeds = [], []
    for child in children:
        walk, coin = child.spawn(2)
        walk_seeds.append(walk)
        coin_seeds.append(coin)
    grid_steps = np.round(np.linspace(0, cfg.depth, cfg.grid_points)).astype(np.int64)
    logger.info(f"Simulating {cfg.paths} paths in {len(sizes)} chunks (h={cfg.step:.6g}, p={cfg.up_probability:.6g})")
    with ThreadPoolExecutor(max_workers=cfg.parallel) as pool:
        parts = list(pool.map(lambda args: _simulate_chunk(cfg, args[0], args[1], grid_steps),
                              zip(walk_seeds, sizes)))
    joined = {key: np.concatenate([part[key] for part in parts]) for key in parts[0]}
    ens = PathEnsemble(config=cfg, grid_steps=grid_steps, coin_seeds=list(zip(coin_seeds, sizes)), **joined)
    upper = float(np.mean(ens.side == UPPER))
    cap = float(np.mean(ens.side == CAP))
    if cap > DEPTH_CAP_WARNING:
        logger.warning(f"Depth cap absorbed {cap:.2e} of the paths (threshold {DEPTH_CAP_WARNING:.0e})")
    barrier_error = abs(ens.tables.S(cfg.m) - cfg.barrier)
    means, inverse_z = inverse_price_zscores(ens)
    findings = {
        "upper_fraction": upper,
        "lower_fraction": float(np.mean(ens.side == LOWER)),
        "cap_fraction": cap,
        "up_probability": cfg.up_probability,
        "step": cfg.step,
        "barrier_error": barrier_error,
        "inverse_price_means": means.tolist(),
        "inverse_price_z": inverse_z,
    }
    return replace(ens, findings=findings)


def _zscores(means, errors, target):
    errors = np.asarray(errors, dtype=float)
    diff = np.abs(np.asarray(means) - target)
    return np.where(errors > 0, diff / np.where(errors > 0, errors, 1.0),
                    np.where(diff > EXACT_TOL, np.inf, 0.0)).tolist()


def _grid_zscores(values):
    means = values.mean(axis=0)
    errors = values.std(axis=0, ddof=1) / math.sqrt(values.shape[0])
    return means, _zscores(means, errors, 1.0)


def inverse_price_zscores(ens):
    """Grid means of 1/S_hat and their distances from 1 in standard errors."""
    return _grid_zscores(ens.tables.Z(ens.grid_levels))


def perturbed_dual_zscores(ens):
    """Grid means of the perturbed dual candidate and their distances from 1 in standard errors."""
    return _grid_zscores(_grid_duals(ens)[1])


def decompose_potential(ens):
    """Constant martingale part, the potential and the watch-level passage estimate."""
    cfg = ens.config
    tables = ens.tables
    hit = ens.hit_watch
    estimate = float(hit.mean())
    se = math.sqrt(max(estimate * (1.0 - estimate), 1e-300) / ens.size)
    p0 = float(tables.P(0))
    potential = {
        "m_hat": cfg.m_hat,
        "p_hat_0": p0,
        "p_hat_0_closed_form": (1.0 - 2.0 * cfg.lam) / (2.0 * (1.0 - cfg.lam)),
        "watch_level": cfg.watch_level,
        "p_hat_at_watch": float(tables.P(cfg.watch_level)),
        "sigma_probability_exact": p0 / float(tables.P(cfg.watch_level)),
        "sigma_probability": estimate,
        "sigma_se": se,
        "upper_potential_max": float(np.abs(tables.P(ens.final_level[ens.side == UPPER])).max(initial=0.0)),
    }
    return replace(ens, potential=potential)


def perturb(ens):
    """
    Draw the coin f = 1 +/- delta at the watch passage and check the ratio
    bound of the perturbed shadow price on every visited level.

    Raises:
        ConstructionError: the ratio bound fails anywhere
    """
    if ens.potential is None:
        ens = decompose_potential(ens)
    cfg = ens.config
    coins = []
    for seed, n in ens.coin_seeds:
        heads = np.random.default_rng(seed).random(n) < 0.5
        coins.append(np.where(heads, 1.0 + cfg.delta, 1.0 - cfg.delta))
    f = np.concatenate(coins)
    ens = replace(ens, coin=f)
    ratio_lo, ratio_hi = _post_ratio_range(ens)
    lo_bound = 1.0 / (1.0 + cfg.delta)
    hi_bound = 1.0 / (1.0 - cfg.delta)
    band = EXACT_TOL
    bad = (ratio_lo < lo_bound - band) | (ratio_hi > hi_bound + band)
    violations = int(bad.sum())
    if violations:
        raise ConstructionError(f"perturbed shadow price leaves its ratio band on {violations} paths")
    means, check_z = perturbed_dual_zscores(ens)
    findings = dict(ens.findings)
    findings.update({
        "ratio_violations": violations,
        "ratio_range": [float(ratio_lo.min()), float(ratio_hi.max())],
        "perturbed_dual_means": means.tolist(),
        "perturbed_dual_z": check_z,
    })
    return replace(ens, findings=findings)


def _post_ratio_range(ens):
    """Extremes of S_check / S_hat over the levels each path visits after the watch passage."""
    tables = ens.tables
    m_hat = ens.config.m_hat
    hit = ens.hit_watch
    f = ens.coin
    lo = np.ones(ens.size)
    hi = np.ones(ens.size)
    if hit.any():
        ratios = []
        for bound in (ens.post_min[hit], ens.post_max[hit]):
            z = tables.Z(bound)
            ratios.append(z / (m_hat + f[hit] * tables.P(bound)))
        # the ratio is monotone in the level, so the visited extremes bound it
        lo[hit] = np.minimum(np.minimum(*ratios), 1.0)
        hi[hit] = np.maximum(np.maximum(*ratios), 1.0)
    return lo, hi


def _grid_duals(ens):
    """Z_hat and the perturbed Z_check on the normalized grid."""
    tables = ens.tables
    levels = ens.grid_levels
    z_hat = tables.Z(levels)
    after = ens.hit_watch[:, None] & (ens.grid_steps[None, :] >= ens.watch_step[:, None])
    f = ens.coin[:, None]
    z_check = np.where(after, ens.config.m_hat + f * tables.P(levels), z_hat)
    return z_hat, z_check


def build_market(ens):
    """
    Interpolated ask price S = (1-t) max(S_hat, S_check) + t min(S_hat, S_check)/(1-lambda).

    Raises:
        ConfigError: max exceeds min/(1-lambda) somewhere
    """
    if ens.coin is None:
        ens = perturb(ens)
    cfg = ens.config
    lam = cfg.lam
    z_hat, z_check = _grid_duals(ens)
    s_hat, s_check = 1.0 / z_hat, 1.0 / z_check
    low_m = np.maximum(s_hat, s_check)
    high_m = np.minimum(s_hat, s_check) / (1.0 - lam)
    if np.any(low_m > high_m * (1.0 + EXACT_TOL)):
        raise ConfigError("delta too large: price bounds cross")
    t = ens.grid_time()[None, :]
    price = (1.0 - t) * low_m + t * high_m
    bid = (1.0 - lam) * price
    tol = EXACT_TOL * price
    grid_violations = int(np.sum((s_hat > price + tol) | (s_hat < bid - tol) |
                                 (s_check > price + tol) | (s_check < bid - tol)))
    # containment holds for every t once max <= min/(1-lambda), so the visited extremes decide it
    ratio_lo, ratio_hi = _post_ratio_range(ens)
    level_violations = int(np.sum((ratio_lo < (1.0 - lam) * (1.0 - EXACT_TOL)) |
                                  (ratio_hi > (1.0 + EXACT_TOL) / (1.0 - lam))))
    upper = ens.side == UPPER
    market = {
        "s0": float(price[:, 0].max()),
        "s0_min": float(price[:, 0].min()),
        "s1_upper_max_error": float(np.abs(price[upper, -1] - 2.0).max(initial=0.0)),
        "containment_violations": grid_violations + level_violations,
        "price": price,
        "s_hat": s_hat,
        "s_check": s_check,
    }
    return replace(ens, market=market)


@dataclass
class CxReport:
    values: dict
    checks: list

    @property
    def passed(self):
        return all_passed(self.checks)

    def to_dict(self):
        return {**self.values, "checks": [c.to_dict() for c in self.checks], "pass": self.passed}


def merton_fraction(cfg):
    """One-step log-optimal stock fraction under the walk of S_hat."""
    h = cfg.step
    p = cfg.up_probability
    r_up, r_down = math.exp(h) - 1.0, math.exp(-h) - 1.0
    return -(p * r_up + (1.0 - p) * r_down) / (r_up * r_down)


def verify_nonuniqueness(ens, x=1.0):
    """Both dual candidates induce the same terminal dual optimizer but differ as processes."""
    if ens.market is None:
        ens = build_market(ens)
    cfg = ens.config
    tables = ens.tables
    pot = ens.potential
    n = ens.size
    upper = ens.side == UPPER
    y = 1.0 / x
    h_exact = 1.0 / cfg.barrier

    z_hat_T = tables.Z(ens.final_level)
    z_check_T = np.where(ens.hit_watch, cfg.m_hat + ens.coin * tables.P(ens.final_level), z_hat_T)
    h_err = max(float(np.abs(z_hat_T[upper] - h_exact).max(initial=0.0)),
                float(np.abs(z_check_T[upper] - h_exact).max(initial=0.0)))
    wealth = cfg.barrier * x
    foc = abs(1.0 / wealth - y * h_exact) / (y * h_exact)

    deviation = np.zeros(n, dtype=bool)
    if cfg.delta > 0:
        post_hit = ens.hit_watch
        gap = np.abs(ens.coin[post_hit] - 1.0) * np.maximum(np.abs(tables.P(ens.post_min[post_hit])),
                                                            np.abs(tables.P(ens.post_max[post_hit])))
        deviation[post_hit] = gap > 0
    deviation_fraction = float(deviation.mean())
    target = pot["p_hat_0_closed_form"]
    se = pot["sigma_se"]

    inverse_z = float(max(inverse_price_zscores(ens)[1]))
    check_z = float(max(perturbed_dual_zscores(ens)[1]))
    mean_z = float(z_hat_T.mean())
    se_z = float(z_hat_T.std(ddof=1) / math.sqrt(n))
    q = float(upper.mean())
    lower_mass = float(z_hat_T[ens.side == LOWER].sum() / n)
    cap_mass = float(z_hat_T[ens.side == CAP].sum() / n)
    absorbed = float(np.mean(ens.side != UPPER))

    hold_log = math.log(x) + math.log(cfg.barrier)
    liq = x * (1.0 - cfg.lam) * ens.market["price"]
    values = {
        "config": cfg.to_dict(),
        "x": x,
        "p_hat_0": pot["p_hat_0"],
        "sigma_probability": pot["sigma_probability"],
        "sigma_se": se,
        "sigma_probability_exact": pot["sigma_probability_exact"],
        "watch_level": pot["watch_level"],
        "p_hat_at_watch": pot["p_hat_at_watch"],
        "upper_fraction": ens.findings["upper_fraction"],
        "lower_fraction": ens.findings["lower_fraction"],
        "cap_fraction": ens.findings["cap_fraction"],
        "dual_optimizer": h_exact,
        "dual_optimizer_error": h_err,
        "terminal_mean": mean_z,
        "terminal_mean_se": se_z,
        "terminal_decomposition": {"upper": q * cfg.m_hat, "lower": lower_mass, "cap": cap_mass},
        "s0": ens.market["s0"],
        "s1_error": ens.market["s1_upper_max_error"],
        "ratio_violations": ens.findings["ratio_violations"],
        "containment_violations": ens.market["containment_violations"],
        "deviation_fraction": deviation_fraction,
        "buy_hold_sell_log_utility": hold_log,
        "buy_hold_sell_min_liquidation": float(liq.min()),
        "merton_fraction": merton_fraction(cfg),
        "inverse_price_max_z": inverse_z,
        "perturbed_dual_max_z": check_z,
    }
    checks = [
        CheckResult("p_hat_0_exact", abs(pot["p_hat_0"] - target), EXACT_TOL),
        CheckResult("sigma_probability", abs(pot["sigma_probability"] - target), SE_MULTIPLE * se),
        CheckResult("dual_optimizer_exact", h_err, EXACT_TOL),
        CheckResult("first_order_condition", foc, EXACT_TOL),
        CheckResult("initial_price", abs(ens.market["s0"] - 1.0) + abs(ens.market["s0_min"] - 1.0), EXACT_TOL),
        CheckResult("terminal_price", ens.market["s1_upper_max_error"], EXACT_TOL),
        CheckResult("ratio_violations", float(ens.findings["ratio_violations"]), 0.0),
        CheckResult("containment_violations", float(ens.market["containment_violations"]), 0.0),
        CheckResult("absorbed_mass", absorbed, ABSORBED_MASS_LIMIT),
        CheckResult("terminal_martingale", abs(mean_z - 1.0), SE_MULTIPLE * se_z + EXACT_TOL),
        CheckResult("inverse_price_martingale", inverse_z, SE_MULTIPLE),
        CheckResult("perturbed_dual_martingale", check_z, SE_MULTIPLE),
    ]
    if cfg.delta > 0:
        checks.append(CheckResult("deviation_fraction", abs(deviation_fraction - target), SE_MULTIPLE * se))
    else:
        checks.append(CheckResult("deviation_fraction", deviation_fraction, 0.0))
    logger.info(f"Counterexample: sigma {pot['sigma_probability']:.4f} +/- {se:.4f}, "
                f"deviation {deviation_fraction:.4f}, absorbed mass {absorbed:.2e}")
    return CxReport(values, checks)


def run_counterexample(cfg, x=1.0):
    """All stages in order; returns (report, ensemble)."""
    ens = simulate_hat(cfg)
    ens = decompose_potential(ens)
    ens = perturb(ens)
    ens = build_market(ens)
    return verify_nonuniqueness(ens, x), ens


def statistics_table(ens):
    """Per-grid-time means of the two dual candidates and the ask price."""
    z_hat, z_check = _grid_duals(ens)
    rows = []
    for j, t in enumerate(ens.grid_time()):
        rows.append({
            "t": float(t),
            "step": int(ens.grid_steps[j]),
            "mean_z_hat": float(z_hat[:, j].mean()),
            "mean_z_check": float(z_check[:, j].mean()),
            "mean_price": float(ens.market["price"][:, j].mean()) if ens.market else None,
            "absorbed_upper": float(np.mean((ens.side == UPPER) & (ens.absorb_step <= ens.grid_steps[j]))),
        })
    return rows


def path_dump(ens, limit):
    """Grid values of the first `limit` paths as flat rows."""
    rows = []
    market = ens.market
    for i in range(min(limit, ens.size)):
        for j, t in enumerate(ens.grid_time()):
            rows.append({
                "path": i,
                "t": float(t),
                "s_hat": float(market["s_hat"][i, j]),
                "s_check": float(market["s_check"][i, j]),
                "price": float(market["price"][i, j]),
            })
    return rows

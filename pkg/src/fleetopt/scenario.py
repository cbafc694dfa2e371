"""Scenario configuration: one JSON document driving a whole run.

Keys starting with "_" are ignored everywhere (comment convention). Every
validation error names the offending key path so a bad config is a one-line
fix, and the CLI maps ConfigError to its own exit code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .design_space import DesignSpace, default_space, reduced_space
from .device_world import FleetConfig
from .proxy_reuse import BisectionSettings
from .search import SearchParams
from .surrogate import TrainingSettings


class ConfigError(ValueError):
    pass


def _get(section: dict, key: str, kind, default, path: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    value = section.get(key, default)
    if value is None:
        return None
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ConfigError(f"{path}.{key}: expected {kind.__name__}, got {value!r}")
    return value


@dataclass(frozen=True)
class OptimizeSettings:
    latency_percentile: float = 40.0
    energy_percentile: float | None = None
    monotonicity_threshold: float = 0.9
    probe_count: int = 20
    mu: float = 1e-4
    exploration_rounds: int = 0
    explore_size: int = 0
    optimizer_hidden: tuple[int, ...] = (64, 64)
    optimizer_epochs: int = 2000

    def __post_init__(self):
        if not 0 < self.latency_percentile < 100:
            raise ConfigError("optimize.latency_percentile: must be in (0, 100)")
        if self.energy_percentile is not None and not 0 < self.energy_percentile < 100:
            raise ConfigError("optimize.energy_percentile: must be in (0, 100)")


@dataclass(frozen=True)
class Scenario:
    seed: int
    approach: str = "proxy"
    space: DesignSpace = field(default_factory=default_space)
    fleet: FleetConfig = FleetConfig()
    samples_per_device: int = 500
    hidden: tuple[int, ...] = (64, 64)
    hyper: TrainingSettings = TrainingSettings()
    search: SearchParams = SearchParams()
    granularity: float = 0.001
    delta_fraction: float = 0.02
    lambda_count: int = 4
    lambda_max: float = 1.0
    optimize: OptimizeSettings = OptimizeSettings()

    def __post_init__(self):
        if self.approach not in ("proxy", "amortized"):
            raise ConfigError(f"approach: must be 'proxy' or 'amortized', got {self.approach!r}")
        if self.samples_per_device < 2:
            raise ConfigError("predictor.samples_per_device: must be >= 2")

    def bisection_settings(self, bound: float) -> BisectionSettings:
        return BisectionSettings(
            delta=self.delta_fraction * bound, granularity=self.granularity
        )


def _parse_space(raw, path: str) -> DesignSpace:
    if raw is None or raw == "default":
        return default_space()
    if raw == "reduced":
        return reduced_space()
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected 'default', 'reduced' or an object")
    try:
        return DesignSpace(
            num_stages=raw.get("num_stages", 2),
            depth_choices=tuple(raw.get("depth_choices", (1, 2))),
            width_choices=tuple(raw.get("width_choices", (0.5, 1.0))),
            kernel_choices=tuple(raw.get("kernel_choices", (3, 5))),
            bits_choices=tuple(raw.get("bits_choices", (8, 32))),
        )
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None


def scenario_from_dict(raw: dict) -> Scenario:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected an object")
    if "seed" not in raw:
        raise ConfigError("seed: required")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed: expected integer, got {seed!r}")

    fleet_raw = raw.get("fleet", {})
    try:
        fleet = FleetConfig(
            n_training=_get(fleet_raw, "n_training", int, 8, "fleet"),
            n_synthetic=_get(fleet_raw, "n_synthetic", int, 16, "fleet"),
            n_holdout_monotone=_get(fleet_raw, "n_holdout_monotone", int, 8, "fleet"),
            n_holdout_adversarial=_get(fleet_raw, "n_holdout_adversarial", int, 4, "fleet"),
        )
    except ValueError as e:
        raise ConfigError(f"fleet: {e}") from None

    pred = raw.get("predictor", {})
    hidden = pred.get("hidden", [64, 64]) if isinstance(pred, dict) else [64, 64]
    if not isinstance(hidden, list) or not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError("predictor.hidden: expected a list of positive integers")
    try:
        hyper = TrainingSettings(
            learning_rate=_get(pred, "learning_rate", float, 1e-2, "predictor"),
            momentum=_get(pred, "momentum", float, 0.9, "predictor"),
            epochs=_get(pred, "epochs", int, 2000, "predictor"),
            batch_size=_get(pred, "batch_size", int, 32, "predictor"),
        )
    except ValueError as e:
        raise ConfigError(f"predictor: {e}") from None

    sea = raw.get("search", {})
    try:
        search = SearchParams(
            population=_get(sea, "population", int, 32, "search"),
            generations=_get(sea, "generations", int, 30, "search"),
            mutation_rate=_get(sea, "mutation_rate", float, 0.1, "search"),
            elite_fraction=_get(sea, "elite_fraction", float, 0.25, "search"),
            seed=seed,
        )
    except ValueError as e:
        raise ConfigError(f"search: {e}") from None

    bis = raw.get("bisection", {})
    lam = raw.get("lambda_grid", {})
    opt = raw.get("optimize", {})
    opt_hidden = opt.get("optimizer_hidden", [64, 64]) if isinstance(opt, dict) else [64, 64]
    if not isinstance(opt_hidden, list) or not all(
        isinstance(h, int) and h > 0 for h in opt_hidden
    ):
        raise ConfigError("optimize.optimizer_hidden: expected a list of positive integers")
    energy_pct = _get(opt, "energy_percentile", float, None, "optimize")
    try:
        optimize = OptimizeSettings(
            latency_percentile=_get(opt, "latency_percentile", float, 40.0, "optimize"),
            energy_percentile=energy_pct,
            monotonicity_threshold=_get(opt, "monotonicity_threshold", float, 0.9, "optimize"),
            probe_count=_get(opt, "probe_count", int, 20, "optimize"),
            mu=_get(opt, "mu", float, 1e-4, "optimize"),
            exploration_rounds=_get(opt, "exploration_rounds", int, 0, "optimize"),
            explore_size=_get(opt, "explore_size", int, 0, "optimize"),
            optimizer_hidden=tuple(opt_hidden),
            optimizer_epochs=_get(opt, "optimizer_epochs", int, 2000, "optimize"),
        )
    except ValueError as e:
        raise ConfigError(f"optimize: {e}") from None

    try:
        return Scenario(
            seed=seed,
            approach=_get(raw, "approach", str, "proxy", "top level"),
            space=_parse_space(raw.get("space"), "space"),
            fleet=fleet,
            samples_per_device=_get(pred, "samples_per_device", int, 500, "predictor"),
            hidden=tuple(hidden),
            hyper=hyper,
            search=search,
            granularity=_get(bis, "granularity", float, 0.001, "bisection"),
            delta_fraction=_get(bis, "delta_fraction", float, 0.02, "bisection"),
            lambda_count=_get(lam, "count_per_axis", int, 4, "lambda_grid"),
            lambda_max=_get(lam, "max_lambda", float, 1.0, "lambda_grid"),
            optimize=optimize,
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_scenario(path, seed_override: int | None = None) -> Scenario:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if seed_override is not None:
        raw["seed"] = seed_override
    return scenario_from_dict(raw)

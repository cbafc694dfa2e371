"""Reusing a proxy device's predictors on new devices.

The core move: a constrained problem on a new device d is solved through the
*proxy's* latency predictor by bisecting a single weight t in

    g(x; t) = -(1 - t) * acc(x) + t * latency_proxy(x) / s_L

against true measurements of the current candidate on d. Inner solves touch
only predictors; the target device is charged one latency measurement per
bisection iteration, at most ceil(log2(1/granularity + 1)) total. A rank
correlation check decides whether a proxy is usable for a given target at all,
and a pool of proxies turns that check into a reuse-or-train-new policy.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .design_space import DesignPoint, DesignSpace, encode, sample_uniform
from .device_world import DeviceFeatures, Oracle
from .search import SearchParams, evolutionary_search
from .surrogate import MlpRegressor, device_embedding


class UndefinedCorrelationError(ValueError):
    """Rank correlation is undefined when either input is constant."""


def _average_ranks(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """1 - 6*sum(d^2)/(n(n^2-1)) over average ranks; ties get averaged ranks."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"inputs must be equal-length vectors, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 3:
        raise ValueError(f"need at least 3 points, got {n}")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedCorrelationError("rank correlation undefined for constant input")
    d = _average_ranks(a) - _average_ranks(b)
    return float(1.0 - 6.0 * (d @ d) / (n * (n * n - 1.0)))


@dataclass(frozen=True)
class BisectionSettings:
    """delta is the absolute latency half-band around the bound; granularity
    quantizes t; max_iterate defaults to ceil(log2(1/granularity + 1)), the
    number of halvings that exhausts the quantized grid."""

    delta: float
    granularity: float = 0.001
    max_iterate: int | None = None

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not 0.0 < self.granularity < 1.0:
            raise ValueError("granularity must be in (0, 1)")
        if self.max_iterate is None:
            object.__setattr__(
                self, "max_iterate", math.ceil(math.log2(1.0 / self.granularity + 1.0))
            )
        if self.max_iterate < 1:
            raise ValueError("max_iterate must be >= 1")

    @classmethod
    def for_bound(cls, bound: float, granularity: float = 0.001) -> "BisectionSettings":
        """Default band: 2% of the bound."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return cls(delta=0.02 * bound, granularity=granularity)


class TCache:
    """t -> inner-solution cache, keyed on t quantized to the granularity."""

    def __init__(self, granularity: float = 0.001):
        if not 0.0 < granularity < 1.0:
            raise ValueError("granularity must be in (0, 1)")
        self.granularity = granularity
        self._entries: dict[int, DesignPoint] = {}

    def _key(self, t: float) -> int:
        return int(round(t / self.granularity))

    def quantize(self, t: float) -> float:
        return self._key(t) * self.granularity

    def get(self, t: float) -> DesignPoint | None:
        return self._entries.get(self._key(t))

    def put(self, t: float, x: DesignPoint) -> None:
        self._entries[self._key(t)] = x

    def __len__(self) -> int:
        return len(self._entries)


def proxy_objective(
    x: DesignPoint,
    t: float,
    acc_model: MlpRegressor,
    lat_model: MlpRegressor,
    space: DesignSpace,
) -> float:
    """-(1-t)*acc + t*latency/s_L on the proxy's predictors; t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    enc = encode(x, space)
    acc = acc_model.predict(enc)
    lat = lat_model.predict(enc) / lat_model.objective_scale
    return -(1.0 - t) * acc + t * lat


def _derived_seed(base_seed: int, *salt: int) -> int:
    return int(np.random.SeedSequence([base_seed, *salt]).generate_state(1, np.uint64)[0])


def solve_inner(
    t: float,
    cache: TCache,
    space: DesignSpace,
    params: SearchParams,
    acc_model: MlpRegressor,
    lat_model: MlpRegressor,
    minimizer=None,
) -> DesignPoint:
    """Cached argmin of the proxy objective at quantized t; predictor-only, so
    repeated calls cost nothing and never touch any device."""
    hit = cache.get(t)
    if hit is not None:
        return hit
    tq = cache.quantize(t)

    def objective(x: DesignPoint) -> float:
        return proxy_objective(x, tq, acc_model, lat_model, space)

    if minimizer is not None:
        x = minimizer(objective)
    else:
        seeded = dataclasses.replace(params, seed=_derived_seed(params.seed, cache._key(t)))
        x = evolutionary_search(objective, space, seeded)
    cache.put(t, x)
    return x


@dataclass(frozen=True)
class BisectionResult:
    design: DesignPoint
    t_star: float
    measurements: int
    feasible: bool
    latency: float
    trace: tuple[dict, ...]


def bisection_optimize(
    target: DeviceFeatures,
    bound: float,
    settings: BisectionSettings,
    cache: TCache,
    acc_model: MlpRegressor,
    lat_model: MlpRegressor,
    oracle: Oracle,
    space: DesignSpace,
    params: SearchParams,
    minimizer=None,
) -> BisectionResult:
    """Bisection on t against true target latency of the inner solution.

    Each iteration measures the current candidate once on the target (memoized
    per quantized t, so the charge count never exceeds max_iterate). Raising t
    when the candidate is too slow trades accuracy for speed; the reported
    design is the fastest-feasible iterate with the smallest t, i.e. maximum
    accuracy weight among iterates within the band. If nothing satisfied the
    bound the last iterate comes back flagged infeasible.
    """
    if bound <= 0:
        raise ValueError("bound must be positive")
    t_min, t_max = 0.0, 1.0
    measured: dict[int, tuple[DesignPoint, float]] = {}
    trace: list[dict] = []
    best: tuple[float, DesignPoint, float] | None = None  # (t, design, latency)
    last: tuple[float, DesignPoint, float] | None = None
    measurements = 0
    for iteration in range(settings.max_iterate):
        t = (t_min + t_max) / 2.0
        key = cache._key(t)
        if key in measured:
            x, lat = measured[key]
        else:
            x = solve_inner(t, cache, space, params, acc_model, lat_model, minimizer)
            lat = oracle.latency(x, target)
            measurements += 1
            measured[key] = (x, lat)
        tq = cache.quantize(t)
        last = (tq, x, lat)
        if lat >= bound + settings.delta:
            verdict = "raise_t"
            t_min = t
        elif lat <= bound - settings.delta:
            verdict = "lower_t"
            t_max = t
        else:
            verdict = "within_band"
        if lat <= bound + settings.delta and (best is None or tq < best[0]):
            best = (tq, x, lat)
        trace.append(
            {"iteration": iteration, "t": tq, "measured_latency": lat,
             "bound": bound, "verdict": verdict}
        )
        if verdict == "within_band":
            break
    assert last is not None
    chosen = best if best is not None else last
    return BisectionResult(
        design=chosen[1],
        t_star=chosen[0],
        measurements=measurements,
        feasible=best is not None,
        latency=chosen[2],
        trace=tuple(trace),
    )


def objective_2d(
    x: DesignPoint,
    t1: float,
    t2: float,
    acc_model: MlpRegressor,
    lat_model: MlpRegressor,
    energy_model: MlpRegressor,
    space: DesignSpace,
) -> float:
    """Two-weight extension: -(1-t1-t2)*acc + t1*latency/s_L + t2*energy/s_E,
    on the simplex t1, t2 >= 0, t1 + t2 <= 1."""
    if t1 < 0 or t2 < 0 or t1 + t2 > 1.0 + 1e-12:
        raise ValueError(f"(t1, t2) must lie in the simplex, got ({t1}, {t2})")
    enc = encode(x, space)
    acc = acc_model.predict(enc)
    lat = lat_model.predict(enc) / lat_model.objective_scale
    en = energy_model.predict(enc) / energy_model.objective_scale
    return -(1.0 - t1 - t2) * acc + t1 * lat + t2 * en


@dataclass(frozen=True)
class Grid2dResult:
    design: DesignPoint
    t: tuple[float, float]
    measurements: int
    feasible: bool
    latency: float
    energy: float
    trace: tuple[dict, ...]


def grid_optimize_2d(
    target: DeviceFeatures,
    latency_bound: float,
    energy_bound: float,
    settings: BisectionSettings,
    acc_model: MlpRegressor,
    lat_model: MlpRegressor,
    energy_model: MlpRegressor,
    oracle: Oracle,
    space: DesignSpace,
    params: SearchParams,
    minimizer=None,
    levels: int = 3,
    grid_n: int = 8,
    measure_cap: int = 6,
) -> Grid2dResult:
    """Coarse-to-fine sweep of the (t1, t2) simplex for two simultaneous bounds.

    Each level solves the inner problem on a lattice (grid_n divisions at the
    top, refined 4x around the incumbent), measures up to measure_cap new
    candidate designs on the target (both metrics), and calibrates predicted
    metrics against those measurements to rank the rest. Returns the measured
    feasible design with maximum predicted accuracy, else the least-violating
    measured design flagged infeasible.
    """
    if latency_bound <= 0 or energy_bound <= 0:
        raise ValueError("bounds must be positive")
    g = settings.granularity

    def q(t: float) -> float:
        return round(t / g) * g

    cache: dict[tuple[int, int], DesignPoint] = {}

    def inner(t1: float, t2: float) -> DesignPoint:
        key = (int(round(t1 / g)), int(round(t2 / g)))
        if key not in cache:
            def objective(x: DesignPoint) -> float:
                return objective_2d(x, q(t1), q(t2), acc_model, lat_model, energy_model, space)

            if minimizer is not None:
                cache[key] = minimizer(objective)
            else:
                seeded = dataclasses.replace(params, seed=_derived_seed(params.seed, *key))
                cache[key] = evolutionary_search(objective, space, seeded)
        return cache[key]

    measured: dict[tuple[int, ...], tuple[float, float]] = {}  # idx -> (lat, en)
    design_pt: dict[tuple[int, ...], tuple[float, float]] = {}  # idx -> first grid point
    pred_cache: dict[tuple[int, ...], tuple[float, float, float]] = {}
    measurements = 0
    trace: list[dict] = []

    def predicted(x: DesignPoint) -> tuple[float, float, float]:
        idx = space.indices_of(x)
        if idx not in pred_cache:
            enc = encode(x, space)
            pred_cache[idx] = (
                acc_model.predict(enc),
                lat_model.predict(enc),
                energy_model.predict(enc),
            )
        return pred_cache[idx]

    s_lat, s_en = 1.0, 1.0

    def recalibrate() -> tuple[float, float]:
        if not measured:
            return 1.0, 1.0
        ratios_l, ratios_e = [], []
        for idx, (lat, en) in measured.items():
            _, pl, pe = pred_cache[idx]
            if pl > 0:
                ratios_l.append(lat / pl)
            if pe > 0:
                ratios_e.append(en / pe)
        return (
            float(np.median(ratios_l)) if ratios_l else 1.0,
            float(np.median(ratios_e)) if ratios_e else 1.0,
        )

    spacing = 1.0 / grid_n
    center = (0.0, 0.0)
    lattice = [
        (q(i * spacing), q(j * spacing))
        for i in range(grid_n + 1)
        for j in range(grid_n + 1)
        if i + j <= grid_n
    ]
    for level in range(levels):
        level_pairs: list[tuple[tuple[float, float], DesignPoint]] = []
        for pt in lattice:
            x = inner(*pt)
            idx = space.indices_of(x)
            design_pt.setdefault(idx, pt)
            level_pairs.append((pt, x))
        # rank unmeasured candidates by calibrated distance to the feasibility
        # boundary and spend the level's measurement budget there
        candidates: dict[tuple[int, ...], DesignPoint] = {}
        for _, x in level_pairs:
            idx = space.indices_of(x)
            if idx not in measured and idx not in candidates:
                candidates[idx] = x

        def boundary_score(idx_x):
            idx, x = idx_x
            _, pl, pe = predicted(x)
            ratio = max(pl * s_lat / latency_bound, pe * s_en / energy_bound)
            return (abs(ratio - 1.0), idx)

        for idx, x in sorted(candidates.items(), key=boundary_score)[:measure_cap]:
            lat = oracle.latency(x, target)
            en = oracle.energy(x, target)
            measurements += 2
            measured[idx] = (lat, en)
            predicted(x)
            s_lat, s_en = recalibrate()
            trace.append(
                {"level": level, "t1": design_pt[idx][0], "t2": design_pt[idx][1],
                 "latency": lat, "energy": en,
                 "feasible": lat <= latency_bound and en <= energy_bound}
            )
        if level == levels - 1:
            break
        # refine around the best measured point of this level
        def level_rank(pair):
            pt, x = pair
            idx = space.indices_of(x)
            if idx not in measured:
                return (2, 0.0, 0.0, pt, idx)
            lat, en = measured[idx]
            feasible = lat <= latency_bound and en <= energy_bound
            pa = predicted(x)[0]
            return (0 if feasible else 1,
                    -pa if feasible else max(lat / latency_bound, en / energy_bound),
                    pt[0] + pt[1], pt, idx)

        ranked = sorted(level_pairs, key=level_rank)
        center = ranked[0][0]
        spacing /= 4.0
        pts = set()
        for i in range(grid_n + 1):
            for j in range(grid_n + 1):
                t1 = center[0] + (i - grid_n // 2) * spacing
                t2 = center[1] + (j - grid_n // 2) * spacing
                if t1 < 0 or t2 < 0 or t1 + t2 > 1.0:
                    continue
                pts.add((q(t1), q(t2)))
        lattice = sorted(pts)

    best = None  # (-pred_acc, idx)
    worst = None  # (violation, -pred_acc, idx)
    for idx, (lat, en) in measured.items():
        pa = pred_cache[idx][0]
        if lat <= latency_bound and en <= energy_bound:
            rank = (-pa, idx)
            if best is None or rank < best[0]:
                best = (rank, idx, lat, en)
        violation = max(lat / latency_bound, en / energy_bound)
        rank_v = (violation, -pa, idx)
        if worst is None or rank_v < worst[0]:
            worst = (rank_v, idx, lat, en)
    feasible = best is not None
    _, idx, lat, en = best if feasible else worst
    return Grid2dResult(
        design=space.design_at(idx),
        t=design_pt[idx],
        measurements=measurements,
        feasible=feasible,
        latency=lat,
        energy=en,
        trace=tuple(trace),
    )


@dataclass(frozen=True)
class MonotonicityReport:
    rho: float
    monotone: bool
    probe_count: int


def check_monotonicity(
    proxy_pred: MlpRegressor,
    target: DeviceFeatures,
    probe_count: int,
    threshold: float,
    oracle: Oracle,
    rng: np.random.Generator,
) -> MonotonicityReport:
    """Does the proxy's latency predictor rank designs the way the target does?

    Costs probe_count true latency measurements on the target; predictor calls
    are free. Monotone verdict iff Spearman rho >= threshold.
    """
    if probe_count < 10:
        raise ValueError(f"probe_count must be >= 10, got {probe_count}")
    designs = [sample_uniform(oracle.space, rng) for _ in range(probe_count)]
    enc = np.stack([encode(x, oracle.space) for x in designs])
    predicted_lat = proxy_pred.predict_batch(enc)
    actual = np.array([oracle.latency(x, target) for x in designs])
    rho = spearman(predicted_lat, actual)
    return MonotonicityReport(rho=rho, monotone=rho >= threshold, probe_count=probe_count)


@dataclass
class ProxyEntry:
    device: DeviceFeatures
    accuracy_model: MlpRegressor
    latency_model: MlpRegressor
    energy_model: MlpRegressor | None
    cache: TCache


@dataclass
class ProxyPool:
    entries: list[ProxyEntry] = field(default_factory=list)

    def add(self, entry: ProxyEntry) -> None:
        if any(e.device.device_id == entry.device.device_id for e in self.entries):
            raise ValueError(f"pool already has proxy {entry.device.device_id}")
        self.entries.append(entry)


def match_proxy(
    pool: ProxyPool,
    target: DeviceFeatures,
    threshold: float,
    oracle: Oracle,
    rng: np.random.Generator,
    probe_count: int = 20,
    trials: list | None = None,
) -> ProxyEntry | None:
    """Nearest-first scan of the pool; a candidate is accepted only if its
    latency predictor passes the rank-correlation gate against the target.
    Returns None when nothing passes; the caller then trains a fresh proxy.
    With trials a list, (proxy id, rho, verdict) is appended per candidate.
    """
    if not pool.entries:
        return None
    rows = np.stack([device_embedding(e.device) for e in pool.entries] + [device_embedding(target)])
    std = rows.std(axis=0)
    scale = np.where(std < 1e-12, 1.0, std)
    normed = (rows - rows.mean(axis=0)) / scale
    target_row = normed[-1]
    dists = np.linalg.norm(normed[:-1] - target_row, axis=1)
    order = sorted(range(len(pool.entries)), key=lambda i: (dists[i], i))
    for i in order:
        entry = pool.entries[i]
        report = check_monotonicity(
            entry.latency_model, target, probe_count, threshold, oracle, rng
        )
        if trials is not None:
            trials.append((entry.device.device_id, report.rho, report.monotone))
        if report.monotone:
            return entry
    return None

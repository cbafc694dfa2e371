"""Amortized design optimization: a network from (device, weights) to a design.

Method 1 imitates a search algorithm on labeled (input, argmin) pairs; Method 2
never sees labels and instead minimizes the predicted objective directly,
backpropagating through the frozen performance predictors into the optimizer's
own weights. Training happens on the continuous encoding relaxation (the
predictors accept any point of the unit cube); decoding to a discrete design
happens only at inference. The output layer is logistic, so every inference is
decodable by construction.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .design_space import DesignPoint, DesignSpace, decode, encode
from .device_world import DeviceFeatures, Oracle
from .nn import DenseNet, MomentumSgd
from .search import ConstraintSpec, SearchParams, evolutionary_search
from .surrogate import (
    MlpRegressor,
    TradeoffWeights,
    TrainingSettings,
    device_embedding,
    predicted_objective,
)


class MissingLabelsError(ValueError):
    """Method 1 requires labels; the training set has none."""


def build_lambda_grid(count_per_axis: int, max_lambda: float) -> list[TradeoffWeights]:
    """Per-axis {0} plus count-1 decade-spaced values ending at max_lambda,
    crossed over both axes; (0, 0) always comes first. count 1 gives just (0, 0)."""
    if count_per_axis < 1:
        raise ValueError("count_per_axis must be >= 1")
    if max_lambda <= 0:
        raise ValueError("max_lambda must be positive")
    if count_per_axis == 1:
        axis = [0.0]
    else:
        axis = [0.0] + [
            max_lambda * 10.0 ** (i - (count_per_axis - 2)) for i in range(count_per_axis - 1)
        ]
    return [TradeoffWeights(l1, l2) for l1 in axis for l2 in axis]


def optimizer_input(d: DeviceFeatures, lam: TradeoffWeights) -> np.ndarray:
    return np.concatenate([device_embedding(d), lam.as_array()])


@dataclass
class OptimizerTrainingSet:
    inputs: list[tuple[DeviceFeatures, TradeoffWeights]]
    labels: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.inputs):
            raise ValueError(
                f"{len(self.labels)} labels for {len(self.inputs)} inputs"
            )


@dataclass
class OptimizerNetwork:
    """x_hat(d, lambda): normalized (device embedding, lambda) in, encoding out."""

    net: DenseNet
    in_mean: np.ndarray
    in_scale: np.ndarray
    final_loss: float = float("nan")
    loss_curve: list[float] = field(default_factory=list, repr=False)

    @property
    def encoding_width(self) -> int:
        return self.net.output_dim

    def infer_encoding(self, d: DeviceFeatures, lam: TradeoffWeights) -> np.ndarray:
        x = (optimizer_input(d, lam) - self.in_mean) / self.in_scale
        return self.net.forward(x[None, :])[0]

    def weight_norm_sq(self) -> float:
        theta = self.net.parameter_vector()
        return float(theta @ theta)

    def to_dict(self) -> dict:
        return {
            "kind": "optimizer",
            "layer_sizes": self.net.layer_sizes,
            "output_activation": self.net.output_activation,
            "input_layout": {"device_features": int(self.in_mean.size - 2), "lambdas": 2},
            "weights": [W.tolist() for W in self.net.weights],
            "biases": [b.tolist() for b in self.net.biases],
            "in_mean": self.in_mean.tolist(),
            "in_scale": self.in_scale.tolist(),
            "final_loss": self.final_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerNetwork":
        net = object.__new__(DenseNet)
        net.layer_sizes = list(d["layer_sizes"])
        net.output_activation = d["output_activation"]
        net.weights = [np.array(W, dtype=float) for W in d["weights"]]
        net.biases = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(
            net=net,
            in_mean=np.array(d["in_mean"], dtype=float),
            in_scale=np.array(d["in_scale"], dtype=float),
            final_loss=float(d["final_loss"]),
        )


def save_optimizer(net: OptimizerNetwork, path) -> None:
    with open(path, "w") as f:
        json.dump(net.to_dict(), f)


def load_optimizer(path) -> OptimizerNetwork:
    with open(path) as f:
        return OptimizerNetwork.from_dict(json.load(f))


def generate_labels_method1(
    devices: list[DeviceFeatures],
    lambdas: list[TradeoffWeights],
    acc_model: MlpRegressor,
    energy_model: MlpRegressor,
    latency_model: MlpRegressor,
    space: DesignSpace,
    params: SearchParams,
    minimizer=None,
) -> OptimizerTrainingSet:
    """Search-generated supervision: argmin of the predicted objective for every
    (device, lambda) pair, stored as encodings. Predictor-only; the ledger never
    moves here."""
    inputs: list[tuple[DeviceFeatures, TradeoffWeights]] = []
    labels: list[np.ndarray] = []
    pair_index = 0
    for d in devices:
        for lam in lambdas:
            def objective(x: DesignPoint) -> float:
                return predicted_objective(
                    encode(x, space), d, lam, acc_model, energy_model, latency_model
                )

            if minimizer is not None:
                best = minimizer(objective)
            else:
                seeded = SearchParams(
                    population=params.population,
                    generations=params.generations,
                    mutation_rate=params.mutation_rate,
                    elite_fraction=params.elite_fraction,
                    seed=int(
                        np.random.SeedSequence([params.seed, pair_index]).generate_state(
                            1, np.uint64
                        )[0]
                    ),
                )
                best = evolutionary_search(objective, space, seeded)
            inputs.append((d, lam))
            labels.append(encode(best, space))
            pair_index += 1
    return OptimizerTrainingSet(inputs=inputs, labels=labels)


def _input_matrix(inputs: list[tuple[DeviceFeatures, TradeoffWeights]]):
    X = np.stack([optimizer_input(d, lam) for d, lam in inputs])
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    scale = np.where(std < 1e-12, 1.0, std)
    return X, mean, scale


def train_method1(
    training_set: OptimizerTrainingSet,
    layer_sizes: tuple[int, ...],
    hyper: TrainingSettings,
    mu: float,
    rng: np.random.Generator,
) -> OptimizerNetwork:
    """Supervised: mean squared encoding error plus mu * ||theta||^2."""
    if training_set.labels is None:
        raise MissingLabelsError("method 1 training set has no labels")
    if not training_set.inputs:
        raise ValueError("empty training set")
    X, mean, scale = _input_matrix(training_set.inputs)
    Xn = (X - mean) / scale
    Y = np.stack(training_set.labels)
    n = Xn.shape[0]
    net = DenseNet([Xn.shape[1], *layer_sizes, Y.shape[1]], rng, output_activation="logistic")
    opt = MomentumSgd(net, hyper.learning_rate, hyper.momentum)
    batch = min(hyper.batch_size, n)
    curve: list[float] = []
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            pred, cache = net.forward_cached(Xn[idx])
            err = pred - Y[idx]
            sq_sum += float(np.sum(err * err))
            wg, bg, _ = net.backward(cache, 2.0 * err / idx.size)
            if mu > 0:
                for i in range(len(wg)):
                    wg[i] += 2.0 * mu * net.weights[i]
                    bg[i] += 2.0 * mu * net.biases[i]
            opt.step(net, wg, bg)
        reg = mu * float(sum(np.sum(W * W) for W in net.weights) + sum(b @ b for b in net.biases))
        curve.append(sq_sum / n + reg)
    return OptimizerNetwork(
        net=net, in_mean=mean, in_scale=scale, final_loss=curve[-1], loss_curve=curve
    )


def _require_device_aware(energy_model: MlpRegressor, latency_model: MlpRegressor) -> None:
    for m in (energy_model, latency_model):
        if not m.takes_device:
            raise ValueError(
                f"method 2 needs device-aware {m.metric or 'metric'} predictors"
            )


def amortized_batch_gradient(
    net: DenseNet,
    Xn: np.ndarray,
    embeddings: np.ndarray,
    lams: np.ndarray,
    acc_model: MlpRegressor,
    energy_model: MlpRegressor,
    latency_model: MlpRegressor,
):
    """Mean predicted objective of the batch and its gradient w.r.t. the
    optimizer's parameters, with predictor weights held fixed.

    The chain: optimizer forward gives x_hat per row; each predictor yields its
    value and d(value)/d(x_hat); the combined upstream gradient runs back
    through the optimizer. Returns (mean f_hat, weight grads, bias grads).
    """
    b = Xn.shape[0]
    xhat, cache = net.forward_cached(Xn)
    acc_vals, d_acc = acc_model.batch_value_and_input_grad(xhat, -np.ones(b) / b)
    dev_inputs = np.hstack([xhat, embeddings])
    s_e = energy_model.objective_scale
    s_l = latency_model.objective_scale
    en_vals, d_en = energy_model.batch_value_and_input_grad(dev_inputs, lams[:, 0] / (s_e * b))
    lat_vals, d_lat = latency_model.batch_value_and_input_grad(dev_inputs, lams[:, 1] / (s_l * b))
    width = xhat.shape[1]
    grad_xhat = d_acc + d_en[:, :width] + d_lat[:, :width]
    f_mean = float(
        np.mean(-acc_vals + lams[:, 0] * en_vals / s_e + lams[:, 1] * lat_vals / s_l)
    )
    wg, bg, _ = net.backward(cache, grad_xhat)
    return f_mean, wg, bg


def _amortized_objective(net, Xn, embeddings, lams, acc_model, energy_model,
                         latency_model, mu: float) -> float:
    """Exact training objective of a candidate net over the full input set."""
    xhat = net.forward(Xn)
    acc = acc_model.predict_batch(xhat)
    dev_inputs = np.hstack([xhat, embeddings])
    en = energy_model.predict_batch(dev_inputs) / energy_model.objective_scale
    lat = latency_model.predict_batch(dev_inputs) / latency_model.objective_scale
    f = float(np.mean(-acc + lams[:, 0] * en + lams[:, 1] * lat))
    reg = mu * float(sum(np.sum(W * W) for W in net.weights) + sum(b @ b for b in net.biases))
    return f + reg


def _train_method2_once(Xn, embeddings, lams, layer_sizes, hyper, mu,
                        acc_model, energy_model, latency_model,
                        rng: np.random.Generator):
    n = Xn.shape[0]
    width = acc_model.input_dim
    net = DenseNet([Xn.shape[1], *layer_sizes, width], rng, output_activation="logistic")
    opt = MomentumSgd(net, hyper.learning_rate, hyper.momentum)
    batch = min(hyper.batch_size, n)
    curve: list[float] = []
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        f_sum = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            f_mean, wg, bg = amortized_batch_gradient(
                net, Xn[idx], embeddings[idx], lams[idx],
                acc_model, energy_model, latency_model,
            )
            f_sum += f_mean * idx.size
            if mu > 0:
                for i in range(len(wg)):
                    wg[i] += 2.0 * mu * net.weights[i]
                    bg[i] += 2.0 * mu * net.biases[i]
            opt.step(net, wg, bg)
        reg = mu * float(sum(np.sum(W * W) for W in net.weights) + sum(b @ b for b in net.biases))
        curve.append(f_sum / n + reg)
    return net, curve


def train_method2(
    inputs: list[tuple[DeviceFeatures, TradeoffWeights]],
    acc_model: MlpRegressor,
    energy_model: MlpRegressor,
    latency_model: MlpRegressor,
    layer_sizes: tuple[int, ...],
    hyper: TrainingSettings,
    mu: float,
    rng: np.random.Generator,
    restarts: int = 3,
) -> OptimizerNetwork:
    """Unsupervised: minimize mean f_hat(x_hat(d, lambda); d, lambda) + mu*||theta||^2
    through the frozen predictors. Predictor parameters are never written.

    The logistic output head can saturate from a bad init and freeze part of
    the encoding, so `restarts` independent inits are trained and the one with
    the lowest exact training objective is kept (single net, no ensembling).
    """
    if not inputs:
        raise ValueError("empty training set")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    _require_device_aware(energy_model, latency_model)
    X, mean, scale = _input_matrix(inputs)
    Xn = (X - mean) / scale
    embeddings = np.stack([device_embedding(d) for d, _ in inputs])
    lams = np.stack([lam.as_array() for _, lam in inputs])
    start_seeds = rng.integers(0, 2**63, size=restarts)
    best = None
    for seed in start_seeds:
        net, curve = _train_method2_once(
            Xn, embeddings, lams, layer_sizes, hyper, mu,
            acc_model, energy_model, latency_model,
            np.random.default_rng(int(seed)),
        )
        score = _amortized_objective(net, Xn, embeddings, lams, acc_model,
                                     energy_model, latency_model, mu)
        if best is None or score < best[0]:
            best = (score, net, curve)
    _, net, curve = best
    return OptimizerNetwork(
        net=net, in_mean=mean, in_scale=scale, final_loss=curve[-1], loss_curve=curve
    )


def infer_design(
    net: OptimizerNetwork,
    d: DeviceFeatures,
    lam: TradeoffWeights,
    space: DesignSpace,
) -> DesignPoint:
    """One forward pass plus decode; no measurements, no search."""
    return decode(net.infer_encoding(d, lam), space)


@dataclass(frozen=True)
class SweepResult:
    design: DesignPoint
    weights: TradeoffWeights
    feasible: bool  # under *predicted* metrics
    predicted_accuracy: float
    predicted_latency: float | None
    predicted_energy: float | None
    validation: dict[str, float]  # oracle measurements of the chosen design
    rows: tuple[dict, ...]


def constraint_sweep(
    net: OptimizerNetwork,
    d: DeviceFeatures,
    constraints: ConstraintSpec,
    acc_model: MlpRegressor,
    energy_model: MlpRegressor,
    latency_model: MlpRegressor,
    lambda_grid: list[TradeoffWeights],
    space: DesignSpace,
    oracle: Oracle,
) -> SweepResult:
    """Pick lambda for a hard-constrained problem by sweeping inferences.

    Feasibility along the grid is judged by the device-aware predictors alone;
    the oracle is touched only to validate the final choice, one measurement
    per active bound (so <= 2). With no bounds at all there is nothing to
    check and the (0, 0) inference is returned directly.
    """
    _require_device_aware(energy_model, latency_model)

    def predict_metrics(x: DesignPoint):
        enc = encode(x, space)
        emb = device_embedding(d)
        dev_in = np.concatenate([enc, emb])
        return (
            acc_model.predict(enc),
            latency_model.predict(dev_in),
            energy_model.predict(dev_in),
        )

    if not constraints.active:
        lam0 = TradeoffWeights(0.0, 0.0)
        x = infer_design(net, d, lam0, space)
        pa, pl, pe = predict_metrics(x)
        row = {"lambda1": 0.0, "lambda2": 0.0, "predicted_feasible": True,
               "predicted_accuracy": pa, "chosen": True}
        return SweepResult(
            design=x, weights=lam0, feasible=True, predicted_accuracy=pa,
            predicted_latency=pl, predicted_energy=pe, validation={}, rows=(row,),
        )

    rows: list[dict] = []
    best = None  # (-pred_acc, position)
    worst = None  # (violation, -pred_acc, position)
    results = []
    for pos, lam in enumerate(lambda_grid):
        x = infer_design(net, d, lam, space)
        pa, pl, pe = predict_metrics(x)
        feasible = True
        violation = 0.0
        if constraints.latency_bound is not None:
            feasible &= pl <= constraints.latency_bound
            violation += max(0.0, pl / constraints.latency_bound - 1.0)
        if constraints.energy_bound is not None:
            feasible &= pe <= constraints.energy_bound
            violation += max(0.0, pe / constraints.energy_bound - 1.0)
        results.append((lam, x, pa, pl, pe, feasible))
        rows.append(
            {"lambda1": lam.lambda1, "lambda2": lam.lambda2,
             "predicted_feasible": feasible, "predicted_accuracy": pa, "chosen": False}
        )
        if feasible and (best is None or (-pa, pos) < best[0]):
            best = ((-pa, pos), pos)
        if worst is None or (violation, -pa, pos) < worst[0]:
            worst = ((violation, -pa, pos), pos)

    feasible_found = best is not None
    pos = best[1] if feasible_found else worst[1]
    lam, x, pa, pl, pe, _ = results[pos]
    rows[pos]["chosen"] = True
    validation: dict[str, float] = {}
    if constraints.latency_bound is not None:
        validation["latency"] = oracle.latency(x, d)
    if constraints.energy_bound is not None:
        validation["energy"] = oracle.energy(x, d)
    return SweepResult(
        design=x, weights=lam, feasible=feasible_found, predicted_accuracy=pa,
        predicted_latency=pl, predicted_energy=pe, validation=validation,
        rows=tuple(rows),
    )


def fine_tune(
    seed_design: DesignPoint,
    d: DeviceFeatures | None,
    lam: TradeoffWeights,
    acc_model: MlpRegressor,
    energy_model: MlpRegressor,
    latency_model: MlpRegressor,
    space: DesignSpace,
    radius: int,
    budget: int = 512,
) -> DesignPoint:
    """Exhaustive local search on f_hat within a Hamming ball around the seed.

    Candidates are enumerated radius-first in lexicographic order and cut off
    at budget evaluations (the seed counts); the result is never worse than
    the seed under f_hat.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if budget < 1:
        raise ValueError("budget must be >= 1")

    def value(x: DesignPoint):
        return predicted_objective(
            encode(x, space), d, lam, acc_model, energy_model, latency_model
        )

    seed_idx = space.indices_of(seed_design)
    axes = space._axes()
    best = ((value(seed_design), seed_idx), seed_design)
    spent = 1
    for r in range(1, radius + 1):
        if spent >= budget:
            break
        for positions in itertools.combinations(range(len(axes)), r):
            if spent >= budget:
                break
            alt_lists = [
                [k for k in range(len(axes[p])) if k != seed_idx[p]] for p in positions
            ]
            for replacement in itertools.product(*alt_lists):
                if spent >= budget:
                    break
                idx = list(seed_idx)
                for p, k in zip(positions, replacement):
                    idx[p] = k
                x = space.design_at(idx)
                spent += 1
                rank = (value(x), tuple(idx))
                if rank < best[0]:
                    best = (rank, x)
    return best[1]

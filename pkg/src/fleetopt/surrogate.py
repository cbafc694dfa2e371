"""Performance predictors and the predicted objective.

Three regressor roles share one MLP type: an accuracy predictor over encoded
designs, device-specific latency/energy predictors (proxy workflows), and
device-aware predictors whose input is the encoded design concatenated with a
log-scaled device feature vector. The predicted objective combines them as

    f_hat(x; d, lambda) = -acc(x) + lambda1 * energy / s_E + lambda2 * latency / s_L

where s_E, s_L are the medians of each predictor's training labels, so lambda
components are dimensionless and a single lambda grid serves every device.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .design_space import (
    DesignPoint,
    DesignSpace,
    DimensionMismatchError,
    encode,
    sample_uniform,
)
from .device_world import DeviceFeatures, Oracle
from .nn import DenseNet, MomentumSgd

METRICS = ("latency", "energy")


class InsufficientDataError(ValueError):
    """Too few samples or devices to fit the requested predictor."""


@dataclass(frozen=True)
class TradeoffWeights:
    """Scalarization weights: lambda1 scales energy, lambda2 scales latency."""

    lambda1: float
    lambda2: float

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"weights must be non-negative, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.lambda1, self.lambda2])


@dataclass(frozen=True)
class TrainingSettings:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    epochs: int = 2000
    batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


DEFAULT_HIDDEN = (64, 64)


def device_embedding(d: DeviceFeatures) -> np.ndarray:
    """Log-scaled device coefficients; the generator draws them log-uniformly,
    so this is the space where distances and normalization behave."""
    return np.log(d.feature_vector())


@dataclass
class MlpRegressor:
    """A trained scalar regressor with affine input/output normalizers.

    takes_device marks device-aware models (input = design encoding + device
    embedding); objective_scale is the label median used to normalize this
    metric's term inside the predicted objective.
    """

    net: DenseNet
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_mean: float
    out_scale: float
    metric: str = ""
    device_tag: str = ""
    takes_device: bool = False
    objective_scale: float = 1.0
    constant_warning: bool = False
    final_loss: float = float("nan")
    loss_curve: list[float] = field(default_factory=list, repr=False)

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    def _normalize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.in_mean) / self.in_scale

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise DimensionMismatchError(
                f"{self.metric or 'model'}: expected {self.input_dim} features, got {X.shape[1]}"
            )
        raw = self.net.forward(self._normalize(X))[:, 0]
        return self.out_mean + self.out_scale * raw

    def predict(self, x: np.ndarray) -> float:
        return float(self.predict_batch(np.atleast_2d(x))[0])

    def gradient_wrt_input(self, x: np.ndarray) -> np.ndarray:
        """Analytic d(predict)/d(input) at one input, normalizers included."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.input_dim:
            raise DimensionMismatchError(
                f"expected {self.input_dim} features, got {x.size}"
            )
        g = self.net.input_gradient(self._normalize(x[None, :])[0])
        return self.out_scale * g / self.in_scale

    def batch_value_and_input_grad(self, X: np.ndarray, out_coeff: np.ndarray):
        """Predictions plus d(sum_i out_coeff[i] * predict_i)/dX in one pass.

        The workhorse for training through a frozen predictor: out_coeff folds
        whatever weight the outer loss puts on each row's prediction.
        """
        X = np.asarray(X, dtype=float)
        out_coeff = np.asarray(out_coeff, dtype=float).reshape(-1, 1)
        Xn = self._normalize(X)
        raw, cache = self.net.forward_cached(Xn)
        values = self.out_mean + self.out_scale * raw[:, 0]
        _, _, grad_in = self.net.backward(cache, out_coeff * self.out_scale)
        return values, grad_in / self.in_scale

    def parameter_vector(self) -> np.ndarray:
        return self.net.parameter_vector()

    def to_dict(self) -> dict:
        return {
            "layer_sizes": self.net.layer_sizes,
            "output_activation": self.net.output_activation,
            "weights": [W.tolist() for W in self.net.weights],
            "biases": [b.tolist() for b in self.net.biases],
            "in_mean": self.in_mean.tolist(),
            "in_scale": self.in_scale.tolist(),
            "out_mean": self.out_mean,
            "out_scale": self.out_scale,
            "metric": self.metric,
            "device_tag": self.device_tag,
            "takes_device": self.takes_device,
            "objective_scale": self.objective_scale,
            "constant_warning": self.constant_warning,
            "final_loss": self.final_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpRegressor":
        net = object.__new__(DenseNet)
        net.layer_sizes = list(d["layer_sizes"])
        net.output_activation = d["output_activation"]
        net.weights = [np.array(W, dtype=float) for W in d["weights"]]
        net.biases = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(
            net=net,
            in_mean=np.array(d["in_mean"], dtype=float),
            in_scale=np.array(d["in_scale"], dtype=float),
            out_mean=float(d["out_mean"]),
            out_scale=float(d["out_scale"]),
            metric=d["metric"],
            device_tag=d["device_tag"],
            takes_device=d["takes_device"],
            objective_scale=float(d["objective_scale"]),
            constant_warning=d["constant_warning"],
            final_loss=float(d["final_loss"]),
        )


def save_model(model: MlpRegressor, path) -> None:
    with open(path, "w") as f:
        json.dump(model.to_dict(), f)


def load_model(path) -> MlpRegressor:
    with open(path) as f:
        return MlpRegressor.from_dict(json.load(f))


def fit(
    inputs: np.ndarray,
    labels: np.ndarray,
    layer_sizes: tuple[int, ...],
    hyper: TrainingSettings,
    rng: np.random.Generator,
    *,
    metric: str = "",
    device_tag: str = "",
    takes_device: bool = False,
    objective_scale: float | None = None,
) -> MlpRegressor:
    """Mini-batch SGD with momentum on standardized data, fixed epoch budget.

    layer_sizes are the hidden widths. Zero-variance labels short-circuit to a
    constant predictor with constant_warning set (loss is exactly 0 there).
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(labels, dtype=float).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs vs {y.shape[0]} labels")
    if X.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {X.shape[0]}")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValueError("non-finite training data")

    in_mean = X.mean(axis=0)
    in_std = X.std(axis=0)
    in_scale = np.where(in_std < 1e-12, 1.0, in_std)
    out_mean = float(y.mean())
    out_std = float(y.std())

    net = DenseNet([X.shape[1], *layer_sizes, 1], rng)
    scale = 1.0 if objective_scale is None else float(objective_scale)

    if out_std < 1e-12:
        # Nothing to learn; zero the output layer so the head is exactly the mean.
        net.weights[-1][:] = 0.0
        net.biases[-1][:] = 0.0
        return MlpRegressor(
            net=net,
            in_mean=in_mean,
            in_scale=in_scale,
            out_mean=out_mean,
            out_scale=1.0,
            metric=metric,
            device_tag=device_tag,
            takes_device=takes_device,
            objective_scale=scale,
            constant_warning=True,
            final_loss=0.0,
            loss_curve=[0.0],
        )

    Xn = (X - in_mean) / in_scale
    yn = (y - out_mean) / out_std
    n = X.shape[0]
    batch = min(hyper.batch_size, n)
    opt = MomentumSgd(net, hyper.learning_rate, hyper.momentum)
    curve: list[float] = []
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            xb, yb = Xn[idx], yn[idx]
            pred, cache = net.forward_cached(xb)
            err = pred[:, 0] - yb
            sq_sum += float(err @ err)
            grad_out = (2.0 * err / idx.size)[:, None]
            wg, bg, _ = net.backward(cache, grad_out)
            opt.step(net, wg, bg)
        curve.append(sq_sum / n)

    return MlpRegressor(
        net=net,
        in_mean=in_mean,
        in_scale=in_scale,
        out_mean=out_mean,
        out_scale=out_std,
        metric=metric,
        device_tag=device_tag,
        takes_device=takes_device,
        objective_scale=scale,
        constant_warning=False,
        final_loss=curve[-1],
        loss_curve=curve,
    )


def _sample_designs(space: DesignSpace, n: int, rng: np.random.Generator) -> list[DesignPoint]:
    return [sample_uniform(space, rng) for _ in range(n)]


def train_accuracy_predictor(
    space: DesignSpace,
    n_samples: int,
    oracle: Oracle,
    rng: np.random.Generator,
    hyper: TrainingSettings = TrainingSettings(),
    layer_sizes: tuple[int, ...] = DEFAULT_HIDDEN,
) -> MlpRegressor:
    """Accuracy over encoded designs only; accuracy is device-independent so the
    input never includes device features."""
    if n_samples < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n_samples}")
    designs = _sample_designs(space, n_samples, rng)
    X = np.stack([encode(x, space) for x in designs])
    y = np.array([oracle.accuracy(x) for x in designs])
    return fit(
        X, y, layer_sizes, hyper, rng,
        metric="accuracy", device_tag="", takes_device=False, objective_scale=1.0,
    )


def train_device_specific_predictor(
    metric: str,
    d0: DeviceFeatures,
    n_samples: int,
    oracle: Oracle,
    rng: np.random.Generator,
    hyper: TrainingSettings = TrainingSettings(),
    layer_sizes: tuple[int, ...] = DEFAULT_HIDDEN,
) -> MlpRegressor:
    """Latency or energy on one fixed device (the proxy workflow)."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    if n_samples < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n_samples}")
    measure = oracle.latency if metric == "latency" else oracle.energy
    designs = _sample_designs(oracle.space, n_samples, rng)
    X = np.stack([encode(x, oracle.space) for x in designs])
    y = np.array([measure(x, d0) for x in designs])
    return fit(
        X, y, layer_sizes, hyper, rng,
        metric=metric, device_tag=d0.device_id, takes_device=False,
        objective_scale=float(np.median(y)),
    )


def train_device_aware_predictor(
    metric: str,
    devices: list[DeviceFeatures],
    designs_per_device: int,
    oracle: Oracle,
    rng: np.random.Generator,
    hyper: TrainingSettings = TrainingSettings(),
    layer_sizes: tuple[int, ...] = DEFAULT_HIDDEN,
) -> MlpRegressor:
    """Latency or energy as a function of (design, device): one shared design
    set measured on every device."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    if len(devices) < 2:
        raise InsufficientDataError(
            f"device-aware training needs >= 2 devices, got {len(devices)}"
        )
    designs = _sample_designs(oracle.space, designs_per_device, rng)
    encodings = [encode(x, oracle.space) for x in designs]
    measure = oracle.latency if metric == "latency" else oracle.energy
    rows, labels = [], []
    for d in devices:
        emb = device_embedding(d)
        for enc, x in zip(encodings, designs):
            rows.append(np.concatenate([enc, emb]))
            labels.append(measure(x, d))
    X = np.stack(rows)
    y = np.array(labels)
    return fit(
        X, y, layer_sizes, hyper, rng,
        metric=metric, device_tag="fleet", takes_device=True,
        objective_scale=float(np.median(y)),
    )


def model_input(model: MlpRegressor, x_enc: np.ndarray, d: DeviceFeatures | None) -> np.ndarray:
    if model.takes_device:
        if d is None:
            raise ValueError(f"{model.metric} predictor is device-aware; a device is required")
        return np.concatenate([x_enc, device_embedding(d)])
    return np.asarray(x_enc, dtype=float)


def predicted_objective(
    x_enc: np.ndarray,
    d: DeviceFeatures | None,
    lam: TradeoffWeights,
    acc_model: MlpRegressor,
    energy_model: MlpRegressor,
    latency_model: MlpRegressor,
) -> float:
    """f_hat at a continuous encoding; works with device-specific or device-aware
    metric predictors (d is ignored by the former)."""
    a = acc_model.predict(model_input(acc_model, x_enc, d))
    e = energy_model.predict(model_input(energy_model, x_enc, d))
    l = latency_model.predict(model_input(latency_model, x_enc, d))
    return (
        -a
        + lam.lambda1 * (e / energy_model.objective_scale)
        + lam.lambda2 * (l / latency_model.objective_scale)
    )


@dataclass
class PredictorBundle:
    """Stage-1 output: the three predictors plus the archive of measured
    training data, kept so later exploration rounds can refit from scratch."""

    accuracy: MlpRegressor
    energy: MlpRegressor
    latency: MlpRegressor
    devices: tuple[DeviceFeatures, ...]
    designs: list[DesignPoint]
    acc_labels: np.ndarray
    energy_labels: np.ndarray  # (n_designs, n_devices)
    latency_labels: np.ndarray
    layer_sizes: tuple[int, ...]
    hyper: TrainingSettings

    def models(self) -> tuple[MlpRegressor, MlpRegressor, MlpRegressor]:
        return self.accuracy, self.energy, self.latency


def _fit_bundle_models(
    space: DesignSpace,
    devices: tuple[DeviceFeatures, ...],
    designs: list[DesignPoint],
    acc_labels: np.ndarray,
    energy_labels: np.ndarray,
    latency_labels: np.ndarray,
    layer_sizes: tuple[int, ...],
    hyper: TrainingSettings,
    rng: np.random.Generator,
) -> tuple[MlpRegressor, MlpRegressor, MlpRegressor]:
    encodings = [encode(x, space) for x in designs]
    X_acc = np.stack(encodings)
    acc = fit(
        X_acc, acc_labels, layer_sizes, hyper, rng,
        metric="accuracy", takes_device=False, objective_scale=1.0,
    )
    rows = []
    for d in devices:
        emb = device_embedding(d)
        for enc in encodings:
            rows.append(np.concatenate([enc, emb]))
    X_dev = np.stack(rows)
    # column-major flatten matches the row construction order (device outer)
    y_en = energy_labels.T.reshape(-1)
    y_lat = latency_labels.T.reshape(-1)
    energy = fit(
        X_dev, y_en, layer_sizes, hyper, rng,
        metric="energy", device_tag="fleet", takes_device=True,
        objective_scale=float(np.median(y_en)),
    )
    latency = fit(
        X_dev, y_lat, layer_sizes, hyper, rng,
        metric="latency", device_tag="fleet", takes_device=True,
        objective_scale=float(np.median(y_lat)),
    )
    return acc, energy, latency


def _measure_block(
    designs: list[DesignPoint],
    devices: tuple[DeviceFeatures, ...],
    oracle: Oracle,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    acc = np.array([oracle.accuracy(x) for x in designs])
    en = np.array([[oracle.energy(x, d) for d in devices] for x in designs])
    lat = np.array([[oracle.latency(x, d) for d in devices] for x in designs])
    return acc, en.reshape(len(designs), len(devices)), lat.reshape(len(designs), len(devices))


def train_stage1(
    space: DesignSpace,
    devices: list[DeviceFeatures],
    designs_per_device: int,
    oracle: Oracle,
    rng: np.random.Generator,
    hyper: TrainingSettings = TrainingSettings(),
    layer_sizes: tuple[int, ...] = DEFAULT_HIDDEN,
) -> PredictorBundle:
    """Initial predictor training: one shared design set, measured for accuracy
    once and for both metrics on every real training device."""
    if len(devices) < 2:
        raise InsufficientDataError(
            f"device-aware training needs >= 2 devices, got {len(devices)}"
        )
    if designs_per_device < 2:
        raise InsufficientDataError("need at least 2 designs")
    devices = tuple(devices)
    designs = _sample_designs(space, designs_per_device, rng)
    acc_labels, energy_labels, latency_labels = _measure_block(designs, devices, oracle)
    acc, energy, latency = _fit_bundle_models(
        space, devices, designs, acc_labels, energy_labels, latency_labels,
        layer_sizes, hyper, rng,
    )
    return PredictorBundle(
        accuracy=acc, energy=energy, latency=latency,
        devices=devices, designs=list(designs),
        acc_labels=acc_labels, energy_labels=energy_labels, latency_labels=latency_labels,
        layer_sizes=tuple(layer_sizes), hyper=hyper,
    )


def iterative_fit(
    bundle: PredictorBundle,
    exploration_rounds: int,
    explore_size: int,
    oracle: Oracle,
    rng: np.random.Generator,
) -> PredictorBundle:
    """Exploration loop: each round samples explore_size fresh designs uniformly,
    measures them on all real training devices, appends to the archive, refits.

    rounds = 0 returns the bundle unchanged. Ledger growth per round is exactly
    explore_size accuracy + explore_size * n_devices each of latency and energy.
    """
    if exploration_rounds < 0:
        raise ValueError("exploration_rounds must be >= 0")
    if exploration_rounds == 0:
        return bundle
    space = oracle.space
    designs = list(bundle.designs)
    acc_labels = bundle.acc_labels
    energy_labels = bundle.energy_labels
    latency_labels = bundle.latency_labels
    models = bundle.models()
    for _ in range(exploration_rounds):
        explore = _sample_designs(space, explore_size, rng)
        acc_new, en_new, lat_new = _measure_block(explore, bundle.devices, oracle)
        designs.extend(explore)
        acc_labels = np.concatenate([acc_labels, acc_new])
        energy_labels = np.vstack([energy_labels, en_new])
        latency_labels = np.vstack([latency_labels, lat_new])
        models = _fit_bundle_models(
            space, bundle.devices, designs, acc_labels, energy_labels, latency_labels,
            bundle.layer_sizes, bundle.hyper, rng,
        )
    acc, energy, latency = models
    return dataclasses.replace(
        bundle,
        accuracy=acc, energy=energy, latency=latency,
        designs=designs, acc_labels=acc_labels,
        energy_labels=energy_labels, latency_labels=latency_labels,
    )

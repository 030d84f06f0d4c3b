"""1D convolutional classifier for one-hot byte sequences, written against numpy.

Architecture: three blocks of Conv1D -> BatchNorm -> ReLU -> Dropout with
same-padding and stride 1, then Flatten -> Dense(2) -> Softmax. There is no
pooling. Training is mini-batch SGD with momentum on a class-weighted
cross-entropy where benign samples carry the penalizing factor.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable
from urllib.parse import quote, unquote

import numpy as np
from loguru import logger
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from ropscan.schemas import Classification, ModelConfig, TrainConfig
from ropscan.services.encoding import Dataset, Label, N_SYMBOLS, onehot_codes, pad_codes

MODEL_MAGIC = "ROPNN-MODEL"
MODEL_VERSION = "v1"
PROB_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
N_CLASSES = 2


class ModelFormatError(ValueError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


# --- layers -----------------------------------------------------------------


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out[i, o] = sum_j sum_c x[i - j + m//2, c] * w[o, j, c] + b[o], zero outside the sequence.

    `x` is (L, C) or (B, L, C); `w` is (out, m, C).
    """
    single = x.ndim == 2
    if single:
        x = x[None]
    _, length, channels = x.shape
    if w.shape[2] != channels:
        raise ValueError(f"input has {channels} channels, kernel expects {w.shape[2]}")
    half = w.shape[1] // 2
    xp = np.pad(x, ((0, 0), (half, half), (0, 0)))
    wf = w[:, ::-1, :]
    out = np.broadcast_to(b, x.shape[:2] + (w.shape[0],)).copy()
    for t in range(w.shape[1]):
        out += xp[:, t:t + length, :] @ wf[:, t, :].T
    return out[0] if single else out


class Layer:
    name: str = ""

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv1D(Layer):
    def __init__(self, name, in_channels, out_channels, kernel_size, rng=None):
        super().__init__(name)
        if kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        shape = (out_channels, kernel_size, in_channels)
        std = math.sqrt(2.0 / (kernel_size * in_channels))
        self.params["W"] = rng.normal(0.0, std, shape) if rng is not None else np.zeros(shape)
        self.params["b"] = np.zeros(out_channels)
        self.needs_input_grad = True

    def forward(self, x, train):
        self._x = x
        return conv1d_forward(x, self.params["W"], self.params["b"])

    def backward(self, dout):
        x, w = self._x, self.params["W"]
        length, k = x.shape[1], w.shape[1]
        half = k // 2
        xp = np.pad(x, ((0, 0), (half, half), (0, 0)))
        wf = w[:, ::-1, :]
        dwf = np.empty_like(w)
        dxp = np.zeros_like(xp) if self.needs_input_grad else None
        for t in range(k):
            dwf[:, t, :] = np.tensordot(dout, xp[:, t:t + length, :], axes=([0, 1], [0, 1]))
            if dxp is not None:
                dxp[:, t:t + length, :] += dout @ wf[:, t, :]
        self.grads["W"] = dwf[:, ::-1, :].copy()
        self.grads["b"] = dout.sum(axis=(0, 1))
        return dxp[:, half:half + length, :] if dxp is not None else None


class BatchNorm(Layer):
    """Per-channel normalisation over the batch and sequence axes."""

    def __init__(self, name, channels, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__(name)
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x, train):
        if train:
            mu = x.mean(axis=(0, 1))
            var = x.var(axis=(0, 1))
            n = x.shape[0] * x.shape[1]
            m = self.momentum
            self.buffers["running_mean"] *= 1 - m
            self.buffers["running_mean"] += m * mu
            self.buffers["running_var"] *= 1 - m
            self.buffers["running_var"] += m * var * n / max(n - 1, 1)
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv, train)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dout):
        xhat, inv, train = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dout * xhat).sum(axis=(0, 1))
        self.grads["beta"] = dout.sum(axis=(0, 1))
        dxhat = dout * gamma
        if not train:
            return dxhat * inv
        n = dout.shape[0] * dout.shape[1]
        return (inv / n) * (
            n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1))
        )


class ReLU(Layer):
    def forward(self, x, train):
        mask = x > 0
        self._mask = mask
        return x * mask

    def backward(self, dout):
        return dout * self._mask


class Dropout(Layer):
    """Inverted dropout; `fixed_mask` replaces the random draw when set."""

    def __init__(self, name, p, rng=None):
        super().__init__(name)
        self.p = p
        self.rng = rng
        self.fixed_mask: np.ndarray | None = None
        self._scale = None

    def forward(self, x, train):
        if not train or self.p == 0:
            self._scale = None
            return x
        if self.fixed_mask is not None:
            keep = self.fixed_mask
        else:
            keep = self.rng.random(x.shape) >= self.p
        scale = keep / (1.0 - self.p)
        self._scale = scale
        return x * scale

    def backward(self, dout):
        return dout if self._scale is None else dout * self._scale


class Flatten(Layer):
    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    def __init__(self, name, in_features, out_features, rng=None):
        super().__init__(name)
        shape = (in_features, out_features)
        std = math.sqrt(1.0 / in_features)
        self.params["W"] = rng.normal(0.0, std, shape) if rng is not None else np.zeros(shape)
        self.params["b"] = np.zeros(out_features)

    def forward(self, x, train):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads["W"] = self._x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sample_weights(labels: np.ndarray, penalizing_factor: float) -> np.ndarray:
    return np.where(np.asarray(labels) == Label.BENIGN, float(penalizing_factor), 1.0)


def weighted_cross_entropy(probs: np.ndarray, labels: np.ndarray, penalizing_factor: float) -> float:
    """Mean over the batch of -w * log p[true class]; benign samples weigh `penalizing_factor`."""
    labels = np.asarray(labels)
    picked = np.clip(probs[np.arange(len(labels)), labels], PROB_EPS, 1.0)
    return float(np.mean(sample_weights(labels, penalizing_factor) * -np.log(picked)))


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray, penalizing_factor: float) -> np.ndarray:
    """d(loss)/d(logits) for softmax followed by the weighted cross-entropy."""
    labels = np.asarray(labels)
    target = np.zeros_like(probs)
    target[np.arange(len(labels)), labels] = 1.0
    w = sample_weights(labels, penalizing_factor)[:, None]
    return w * (probs - target) / len(labels)


# --- model ------------------------------------------------------------------


class CnnModel:
    def __init__(
        self,
        n_max: int,
        model_config: ModelConfig | None = None,
        train_config: TrainConfig | None = None,
        program: str = "",
        snapshot_id: str = "",
    ):
        if n_max < 1:
            raise ValueError("n_max must be >= 1")
        self.n_max = n_max
        self.model_config = model_config or ModelConfig()
        self.train_config = train_config or TrainConfig()
        self.program = program
        self.snapshot_id = snapshot_id
        self.epochs_trained = 0
        self.rng = np.random.default_rng(self.train_config.seed)

        self.layers: list[Layer] = []
        in_channels = N_SYMBOLS
        for i, (filters, kernel) in enumerate(zip(self.model_config.filters, self.model_config.kernels), start=1):
            self.layers += [
                Conv1D(f"conv{i}", in_channels, filters, kernel, self.rng),
                BatchNorm(f"bn{i}", filters),
                ReLU(f"relu{i}"),
                Dropout(f"drop{i}", self.train_config.dropout, self.rng),
            ]
            in_channels = filters
        self.layers += [Flatten("flatten"), Dense("dense", n_max * in_channels, N_CLASSES, self.rng)]
        self.layers[0].needs_input_grad = False
        self.velocity = {name: np.zeros_like(p) for name, p in self.parameters()}
        # lowest monitored loss so far and the weights that reached it; survive save/load
        self.best_loss = math.inf
        self.best_epoch = 0
        self.since_best = 0
        self.best_state: dict[str, np.ndarray] | None = None

    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers] + ["softmax"]

    def parameters(self):
        for layer in self.layers:
            for key, value in layer.params.items():
                yield f"{layer.name}.{key}", value

    def gradients(self):
        for layer in self.layers:
            for key in layer.params:
                yield f"{layer.name}.{key}", layer.grads[key]

    def buffers(self):
        for layer in self.layers:
            for key, value in layer.buffers.items():
                yield f"{layer.name}.{key}", value

    def state(self) -> dict[str, np.ndarray]:
        return {**dict(self.parameters()), **dict(self.buffers())}

    def remember_best(self, loss: float) -> None:
        self.best_loss, self.best_epoch, self.since_best = loss, self.epochs_trained, 0
        self.best_state = {name: arr.copy() for name, arr in self.state().items()}

    def restore_best(self) -> bool:
        """Load the best weights back; False when the current ones already are the best."""
        if self.best_state is None or self.since_best == 0:
            return False
        for name, arr in self.state().items():
            arr[...] = self.best_state[name]
        self.since_best = 0
        return True

    def set_dropout(self, p: float) -> None:
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.p = p

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """(B, n_max, 256) one-hot batch -> (B, 2) class probabilities."""
        if x.ndim != 3 or x.shape[1:] != (self.n_max, N_SYMBOLS):
            raise ValueError(f"expected a (B, {self.n_max}, {N_SYMBOLS}) batch, got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, train)
        if not np.isfinite(x).all():
            raise NonFiniteError("non-finite logits")
        return softmax(x)

    def backward(self, dlogits: np.ndarray) -> None:
        grad = dlogits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)

    def sgd_step(self, learning_rate: float, momentum: float) -> None:
        for (name, param), (_, grad) in zip(self.parameters(), self.gradients()):
            v = self.velocity[name]
            v *= momentum
            v -= learning_rate * grad
            param += v


def forward(model: CnnModel, batch: np.ndarray, mode: str = "infer") -> np.ndarray:
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    return model.forward(batch, train=mode == "train")


def loss(probs: np.ndarray, labels: np.ndarray, penalizing_factor: float) -> float:
    return weighted_cross_entropy(probs, labels, penalizing_factor)


# --- training ---------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float | None = None
    val_accuracy: float | None = None

    @property
    def monitored_loss(self) -> float:
        return self.val_loss if self.val_loss is not None else self.train_loss


@dataclass
class TrainingHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    stopped_early: bool = False

    def epochs_to_convergence(self, tolerance: float = 0.01) -> int:
        """First epoch whose monitored loss is within `tolerance` of the run's minimum."""
        if not self.epochs:
            return 0
        losses = [e.monitored_loss for e in self.epochs]
        best = min(losses)
        for stats, value in zip(self.epochs, losses):
            if value <= best + tolerance * abs(best):
                return stats.epoch
        return self.epochs[-1].epoch


def _validation_split(dataset: Dataset, config: TrainConfig):
    if config.validation_fraction == 0:
        return dataset, None
    try:
        train_idx, val_idx = train_test_split(
            np.arange(len(dataset)),
            test_size=config.validation_fraction,
            stratify=dataset.labels,
            random_state=config.seed,
        )
    except ValueError as e:
        logger.debug("No validation split ({}); early stopping watches the training loss", e)
        return dataset, None
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(val_idx))


def evaluate_loss(model: CnnModel, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """(weighted loss, accuracy) in inference mode."""
    _, probs = predict(model, dataset, batch_size)
    preds = probs.argmax(axis=1)
    return (
        weighted_cross_entropy(probs, dataset.labels, model.train_config.penalizing_factor),
        float((preds == dataset.labels).mean()),
    )


def train(
    model: CnnModel,
    dataset: Dataset,
    config: TrainConfig | None = None,
    validation: Dataset | None = None,
    epochs: int | None = None,
    progress: bool = False,
) -> TrainingHistory:
    """Train in place. `config` replaces the model's training settings; `epochs` caps this call."""
    if config is not None:
        model.train_config = config
        model.set_dropout(config.dropout)
    config = model.train_config
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if dataset.n_max != model.n_max:
        raise ValueError(f"dataset n_max {dataset.n_max} does not match model n_max {model.n_max}")
    counts = dataset.class_counts
    if not all(counts.values()):
        raise ValueError(f"both classes must be present, got {counts}")
    if validation is None:
        dataset, validation = _validation_split(dataset, config)

    history = TrainingHistory()
    n = len(dataset)
    n_epochs = config.max_epochs if epochs is None else epochs
    for _ in tqdm(range(n_epochs), desc="train", unit="epoch", disable=not progress):
        epoch = model.epochs_trained + 1
        order = model.rng.permutation(n)
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            labels = dataset.labels[idx]
            try:
                probs = model.forward(dataset.onehot(idx), train=True)
            except NonFiniteError:
                raise TrainingDivergedError(epoch, b, math.nan) from None
            batch_loss = weighted_cross_entropy(probs, labels, config.penalizing_factor)
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, b, batch_loss)
            model.backward(cross_entropy_grad(probs, labels, config.penalizing_factor))
            model.sgd_step(config.learning_rate, config.momentum)
            total_loss += batch_loss * len(idx)
            correct += int((probs.argmax(axis=1) == labels).sum())
        model.epochs_trained = epoch

        stats = EpochStats(epoch, total_loss / n, correct / n)
        if validation is not None and len(validation):
            try:
                stats.val_loss, stats.val_accuracy = evaluate_loss(model, validation)
            except NonFiniteError:
                raise TrainingDivergedError(epoch, -1, math.nan) from None
        history.epochs.append(stats)
        logger.debug(
            "epoch {} loss={:.5f} acc={:.4f} val_loss={} val_acc={}",
            epoch, stats.train_loss, stats.train_accuracy, stats.val_loss, stats.val_accuracy,
        )

        if stats.monitored_loss < model.best_loss:
            model.remember_best(stats.monitored_loss)
        else:
            model.since_best += 1
            if model.since_best >= config.patience:
                history.stopped_early = True
                logger.info("Early stop after epoch {} ({} epochs without improvement)", epoch, model.since_best)
                break

    finished = history.stopped_early or model.epochs_trained >= config.max_epochs
    if finished and model.restore_best():
        logger.info("Restored weights from epoch {} (monitored loss {:.5f})", model.best_epoch, model.best_loss)
    return history


# --- inference --------------------------------------------------------------


def predict(model: CnnModel, dataset: Dataset, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Labels and (N, 2) probabilities for every sample, inference mode."""
    if dataset.n_max != model.n_max:
        raise ValueError(f"dataset n_max {dataset.n_max} does not match model n_max {model.n_max}")
    chunks = [
        model.forward(dataset.onehot(np.arange(start, min(start + batch_size, len(dataset)))))
        for start in range(0, len(dataset), batch_size)
    ]
    probs = np.concatenate(chunks) if chunks else np.zeros((0, N_CLASSES))
    return probs.argmax(axis=1), probs


def classify_many(model: CnnModel, chains: list[bytes]) -> list[Classification]:
    if not chains:
        return []
    codes = np.stack([pad_codes(c, model.n_max)[0] for c in chains])
    probs = model.forward(onehot_codes(codes))
    out = []
    for p in probs:
        label = Label(int(p.argmax()))
        out.append(Classification(label=label.name, probability=float(p[label]), p_real=float(p[Label.REAL])))
    return out


def classify(model: CnnModel, chain_bytes: bytes) -> Classification:
    return classify_many(model, [chain_bytes])[0]


# --- gradient checking ------------------------------------------------------


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar `f()` with respect to `x`, perturbed in place."""
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        up = f()
        x[i] = orig - step
        down = f()
        x[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))


# --- serialization ----------------------------------------------------------


def _config_line(model: CnnModel) -> str:
    tc, mc = model.train_config, model.model_config
    state = json.dumps(model.rng.bit_generator.state, separators=(",", ":"), sort_keys=True)
    pairs = {
        "n_max": model.n_max,
        "lr": repr(tc.learning_rate),
        "momentum": repr(tc.momentum),
        "batch": tc.batch_size,
        "factor": repr(tc.penalizing_factor),
        "seed": tc.seed,
        "dropout": repr(tc.dropout),
        "max_epochs": tc.max_epochs,
        "patience": tc.patience,
        "validation_fraction": repr(tc.validation_fraction),
        "kernels": ",".join(map(str, mc.kernels)),
        "filters": ",".join(map(str, mc.filters)),
        "program": quote(model.program, safe=""),
        "snapshot_id": quote(model.snapshot_id, safe=""),
        "epochs_trained": model.epochs_trained,
        "best_loss": repr(model.best_loss),
        "best_epoch": model.best_epoch,
        "since_best": model.since_best,
        "rng_state": state,
    }
    return " ".join(f"{k}={v}" for k, v in pairs.items())


def _tensor_lines(name: str, arr: np.ndarray) -> list[str]:
    return [
        f"tensor {name} {' '.join(map(str, arr.shape))}",
        " ".join(repr(v) for v in arr.ravel().tolist()),
    ]


def dumps_model(model: CnnModel) -> str:
    lines = [f"{MODEL_MAGIC} {MODEL_VERSION}", _config_line(model)]
    for name, arr in model.parameters():
        lines += _tensor_lines(name, arr)
    for name, arr in model.buffers():
        lines += _tensor_lines(name, arr)
    for name, arr in model.velocity.items():
        lines += _tensor_lines(f"velocity.{name}", arr)
    for name, arr in (model.best_state or {}).items():
        lines += _tensor_lines(f"best.{name}", arr)
    return "\n".join(lines) + "\n"


def save_model(model: CnnModel, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def _parse_config(line: str) -> dict[str, str]:
    pairs = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ModelFormatError(f"config token {token!r} is not key=value")
        pairs[key] = value
    return pairs


def loads_model(text: str) -> CnnModel:
    lines = text.splitlines()
    if not lines or lines[0].split(" ")[0] != MODEL_MAGIC:
        raise ModelFormatError("not a model file")
    if lines[0] != f"{MODEL_MAGIC} {MODEL_VERSION}":
        raise ModelVersionError(f"unsupported model header {lines[0]!r}")
    if len(lines) < 2:
        raise ModelFormatError("missing config line")
    cfg = _parse_config(lines[1])
    try:
        model_config = ModelConfig(
            filters=tuple(int(v) for v in cfg["filters"].split(",")),
            kernels=tuple(int(v) for v in cfg["kernels"].split(",")),
        )
        train_config = TrainConfig(
            learning_rate=float(cfg["lr"]),
            momentum=float(cfg["momentum"]),
            batch_size=int(cfg["batch"]),
            penalizing_factor=float(cfg["factor"]),
            seed=int(cfg["seed"]),
            dropout=float(cfg.get("dropout", "0.5")),
            max_epochs=int(cfg.get("max_epochs", "100")),
            patience=int(cfg.get("patience", "10")),
            validation_fraction=float(cfg.get("validation_fraction", "0.1")),
        )
        model = CnnModel(
            int(cfg["n_max"]), model_config, train_config,
            program=unquote(cfg.get("program", "")),
            snapshot_id=unquote(cfg.get("snapshot_id", "")),
        )
        model.epochs_trained = int(cfg.get("epochs_trained", "0"))
        model.best_loss = float(cfg.get("best_loss", "inf"))
        model.best_epoch = int(cfg.get("best_epoch", "0"))
        model.since_best = int(cfg.get("since_best", "0"))
        if "rng_state" in cfg:
            model.rng.bit_generator.state = json.loads(cfg["rng_state"])
    except (KeyError, ValueError) as e:
        raise ModelFormatError(f"bad config line: {e}") from e

    targets = dict(model.parameters())
    targets.update(model.buffers())
    targets.update({f"velocity.{k}": v for k, v in model.velocity.items()})
    best = {f"best.{k}": np.zeros_like(v) for k, v in model.state().items()}
    targets.update(best)
    seen = set()
    pos = 2
    while pos < len(lines):
        head = lines[pos].split()
        if not head:
            pos += 1
            continue
        if head[0] != "tensor" or len(head) < 2 or pos + 1 >= len(lines):
            raise ModelFormatError(f"line {pos + 1}: expected a tensor header")
        name, dims = head[1], tuple(int(d) for d in head[2:])
        if name not in targets:
            raise ModelFormatError(f"line {pos + 1}: unknown tensor {name}")
        if dims != targets[name].shape:
            raise ModelFormatError(f"line {pos + 1}: {name} has shape {dims}, expected {targets[name].shape}")
        values = np.array([float(v) for v in lines[pos + 1].split()], dtype=np.float64)
        if values.size != targets[name].size:
            raise ModelFormatError(f"line {pos + 2}: {name} has {values.size} values")
        targets[name][...] = values.reshape(dims)
        seen.add(name)
        pos += 2
    # the best-weights snapshot is all or nothing
    required = set(targets) - (set(best) if seen.isdisjoint(best) else set())
    missing = required - seen
    if missing:
        raise ModelFormatError(f"missing tensors: {', '.join(sorted(missing))}")
    if not seen.isdisjoint(best):
        model.best_state = {name.removeprefix("best."): arr for name, arr in best.items()}
    return model


def load_model(path: str | Path) -> CnnModel:
    path = Path(path)
    model = loads_model(path.read_text(encoding="utf-8"))
    logger.debug("Loaded model {} (n_max={}, {} epochs)", path, model.n_max, model.epochs_trained)
    return model

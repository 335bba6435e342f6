"""From-scratch feed-forward classifier on top of frozen embeddings.

Everything here is plain numpy: He-uniform init, hidden blocks of
linear -> batch norm -> ReLU -> inverted dropout, a final linear layer,
softmax cross-entropy with full backprop through the batch statistics,
Adam updates with bias correction, global-norm gradient clipping and
early stopping on a validation F1 score. All randomness flows from
explicit integer seeds.
"""
from __future__ import annotations

import copy
import json
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    BatchTooSmallError,
    DegenerateLayerError,
    NonFiniteLossError,
    ShapeMismatchError,
)
from .metrics import f1_score

logger = logging.getLogger(__name__)

# Allowed values for each architecture/optimization field; random search
# draws uniformly from these.
HIDDEN_LAYER_CHOICES = (1, 2, 3, 4)
FIRST_LAYER_CHOICES = (1024, 768, 512, 256, 128)
DROPOUT_CHOICES = (0.0, 0.4, 0.7)
BATCH_NORM_CHOICES = (True, False)
LAYER_RATIO_CHOICES = (0.5, 1.0)
LEARNING_RATE_CHOICES = (0.00005, 0.0001, 0.0002, 0.0004, 0.0008, 0.001)
BATCH_SIZE_CHOICES = (64, 128, 256, 512)

SEARCH_SPACE = {
    "hidden_layers": HIDDEN_LAYER_CHOICES,
    "first_layer_size": FIRST_LAYER_CHOICES,
    "dropout_rate": DROPOUT_CHOICES,
    "with_batch_norm": BATCH_NORM_CHOICES,
    "layer_ratio": LAYER_RATIO_CHOICES,
    "learning_rate": LEARNING_RATE_CHOICES,
    "batch_size": BATCH_SIZE_CHOICES,
}

GRAD_CLIP_NORM = 5.0
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"MLPC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    """Architecture and optimization settings for one classifier."""

    hidden_layers: int = 1
    first_layer_size: int = 128
    dropout_rate: float = 0.0
    with_batch_norm: bool = True
    layer_ratio: float = 1.0
    learning_rate: float = 0.001
    batch_size: int = 64

    def hidden_sizes(self) -> list[int]:
        return [
            int(round(self.first_layer_size * self.layer_ratio**i))
            for i in range(self.hidden_layers)
        ]

    def validate(self, strict: bool = True) -> None:
        """Check field values; ``strict`` enforces the search-space sets."""
        if strict:
            for name, choices in SEARCH_SPACE.items():
                value = getattr(self, name)
                if value not in choices:
                    raise ValueError(
                        f"{name}={value!r} is not one of the allowed values {choices}"
                    )
        if self.hidden_layers < 1:
            raise ValueError("hidden_layers must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.learning_rate <= 0.0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")

    def to_dict(self) -> dict:
        return {
            "hidden_layers": self.hidden_layers,
            "first_layer_size": self.first_layer_size,
            "dropout_rate": self.dropout_rate,
            "with_batch_norm": self.with_batch_norm,
            "layer_ratio": self.layer_ratio,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MlpConfig":
        return cls(
            hidden_layers=int(obj["hidden_layers"]),
            first_layer_size=int(obj["first_layer_size"]),
            dropout_rate=float(obj["dropout_rate"]),
            with_batch_norm=bool(obj["with_batch_norm"]),
            layer_ratio=float(obj["layer_ratio"]),
            learning_rate=float(obj["learning_rate"]),
            batch_size=int(obj["batch_size"]),
        )


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    @property
    def has_bn(self) -> bool:
        return self.gamma is not None


@dataclass
class MlpModel:
    input_dim: int
    num_classes: int
    config: MlpConfig
    seed: int
    layers: list[Layer] = field(default_factory=list)
    classes: list[str] = field(default_factory=list)

    def parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            yield f"layers.{i}.W", layer.W
            yield f"layers.{i}.b", layer.b
            if layer.has_bn:
                yield f"layers.{i}.gamma", layer.gamma
                yield f"layers.{i}.beta", layer.beta

    def get_parameter(self, name: str) -> np.ndarray:
        parts = name.split(".")
        return getattr(self.layers[int(parts[1])], parts[2])

    def clone(self) -> "MlpModel":
        return copy.deepcopy(self)


def build_mlp(
    config: MlpConfig, input_dim: int, num_classes: int, seed: int,
    classes: Sequence[str] | None = None,
) -> MlpModel:
    """Construct a model with He-uniform weights drawn from ``seed``.

    Hidden widths follow first_layer_size * layer_ratio**i; a derived width
    below 2 is rejected. Batch-norm scale starts at 1, shift at 0, and the
    running statistics at (0, 1). Biases start at 0.
    """
    config.validate(strict=False)
    sizes = config.hidden_sizes()
    if any(s < 2 for s in sizes):
        raise DegenerateLayerError(f"derived hidden sizes {sizes} contain width < 2")
    if input_dim < 1 or num_classes < 2:
        raise DegenerateLayerError(
            f"need input_dim >= 1 and num_classes >= 2, got {input_dim}, {num_classes}"
        )
    rng = np.random.default_rng(seed)
    dims = [input_dim] + sizes + [num_classes]
    layers: list[Layer] = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        is_hidden = i < len(sizes)
        if is_hidden and config.with_batch_norm:
            layers.append(Layer(
                W=W, b=b,
                gamma=np.ones(fan_out), beta=np.zeros(fan_out),
                running_mean=np.zeros(fan_out), running_var=np.ones(fan_out),
            ))
        else:
            layers.append(Layer(W=W, b=b))
    return MlpModel(
        input_dim=input_dim, num_classes=num_classes, config=config,
        seed=seed, layers=layers, classes=list(classes or []),
    )


def _forward_cached(
    model: MlpModel,
    x: np.ndarray,
    mode: str,
    rng: np.random.Generator | None,
    update_stats: bool,
) -> tuple[np.ndarray, list[dict]]:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeMismatchError(
            f"expected input of shape (n, {model.input_dim}), got {x.shape}"
        )
    train = mode == "train"
    dropout = model.config.dropout_rate
    if train and dropout > 0.0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")
    a = x
    caches: list[dict] = []
    n_hidden = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        z = a @ layer.W + layer.b
        cache: dict = {"a_in": a, "z": z}
        if i == n_hidden:
            caches.append(cache)
            a = z
            break
        if layer.has_bn:
            if train:
                if z.shape[0] < 2:
                    raise BatchTooSmallError(
                        "batch normalization needs at least 2 rows in train mode"
                    )
                mu = z.mean(axis=0)
                var = z.var(axis=0)  # biased, matches the backward pass
                if update_stats:
                    layer.running_mean *= 1.0 - BN_MOMENTUM
                    layer.running_mean += BN_MOMENTUM * mu
                    layer.running_var *= 1.0 - BN_MOMENTUM
                    layer.running_var += BN_MOMENTUM * var
            else:
                mu = layer.running_mean
                var = layer.running_var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv_std
            h = layer.gamma * xhat + layer.beta
            cache.update({"mu": mu, "var": var, "inv_std": inv_std, "xhat": xhat})
        else:
            h = z
        relu_mask = h > 0.0
        a = h * relu_mask
        cache["relu_mask"] = relu_mask
        if train and dropout > 0.0:
            keep = rng.random(a.shape) >= dropout
            a = a * keep / (1.0 - dropout)  # inverted scaling keeps eval unscaled
            cache["drop_mask"] = keep
        caches.append(cache)
    return a, caches


def forward(
    model: MlpModel,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Logits for a batch; train mode uses batch statistics and dropout."""
    logits, _ = _forward_cached(model, x, mode, rng, update_stats=(mode == "train"))
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    n = logits.shape[0]
    if n == 0:
        return float("nan")
    probs = softmax(logits)
    picked = probs[np.arange(n), y]
    return float(-np.log(np.clip(picked, 1e-300, None)).mean())


def _as_class_indices(y: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:  # one-hot rows
        y = y.argmax(axis=1)
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ShapeMismatchError(
            f"labels outside [0, {num_classes}): {y.min()}..{y.max()}"
        )
    return y


def loss_and_gradients(
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator | None = None,
    update_stats: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy and its gradients for one train batch.

    The backward pass differentiates through the batch-norm batch statistics
    (mean and biased variance), so gradients match a finite-difference probe
    of the same train-mode loss.
    """
    y = _as_class_indices(y, model.num_classes)
    logits, caches = _forward_cached(model, x, "train", rng, update_stats=update_stats)
    n = logits.shape[0]
    probs = softmax(logits)
    loss = float(-np.log(np.clip(probs[np.arange(n), y], 1e-300, None)).mean())
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"loss is {loss} on batch of {n}")

    grads: dict[str, np.ndarray] = {}
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    dropout = model.config.dropout_rate
    last = len(model.layers) - 1
    da = dlogits
    for i in range(last, -1, -1):
        layer = model.layers[i]
        cache = caches[i]
        if i == last:
            dz = da
        else:
            if "drop_mask" in cache:
                da = da * cache["drop_mask"] / (1.0 - dropout)
            dh = da * cache["relu_mask"]
            if layer.has_bn:
                xhat, inv_std = cache["xhat"], cache["inv_std"]
                m = dh.shape[0]
                grads[f"layers.{i}.gamma"] = (dh * xhat).sum(axis=0)
                grads[f"layers.{i}.beta"] = dh.sum(axis=0)
                dxhat = dh * layer.gamma
                # backprop through mu and the biased batch variance
                dvar = (dxhat * (cache["z"] - cache["mu"])).sum(axis=0) * (
                    -0.5
                ) * inv_std**3
                dmu = -(dxhat.sum(axis=0)) * inv_std + dvar * (
                    -2.0 / m
                ) * (cache["z"] - cache["mu"]).sum(axis=0)
                dz = (
                    dxhat * inv_std
                    + dvar * 2.0 * (cache["z"] - cache["mu"]) / m
                    + dmu / m
                )
            else:
                dz = dh
        grads[f"layers.{i}.W"] = cache["a_in"].T @ dz
        grads[f"layers.{i}.b"] = dz.sum(axis=0)
        da = dz @ layer.W.T
    return loss, grads


def clip_gradients(
    grads: dict[str, np.ndarray], max_norm: float = GRAD_CLIP_NORM
) -> tuple[dict[str, np.ndarray], float, bool]:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return grads, total, False
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total, True


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(model: MlpModel) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(p) for name, p in model.parameters()},
        v={name: np.zeros_like(p) for name, p in model.parameters()},
    )


def optimizer_step(
    model: MlpModel,
    grads: dict[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One Adam update with bias correction, applied in place."""
    state.t += 1
    t = state.t
    for name, _ in model.parameters():
        if name not in grads:
            raise ShapeMismatchError(f"missing gradient for {name}")
    for name, grad in grads.items():
        param = model.get_parameter(name)
        if grad.shape != param.shape:
            raise ShapeMismatchError(
                f"gradient shape {grad.shape} != parameter shape {param.shape} for {name}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad**2
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        param -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainReport:
    epochs_run: int = 0
    stopped_early: bool = False
    best_epoch: int = 0
    best_val_f1: float = 0.0
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    clip_events: int = 0

    def to_dict(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
            "best_epoch": self.best_epoch,
            "best_val_f1": self.best_val_f1,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_f1": self.val_f1,
            "clip_events": self.clip_events,
        }


def predict(model: MlpModel, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    """Class indices for rows of ``x`` (eval mode, ties to lowest index)."""
    outputs = []
    for start in range(0, len(x), batch_size):
        logits = forward(model, x[start : start + batch_size], mode="eval")
        outputs.append(logits.argmax(axis=1))
    return np.concatenate(outputs) if outputs else np.empty(0, dtype=np.int64)


def train(
    model: MlpModel,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray],
    patience: int = 5,
    max_epochs: int = 100,
    seed: int = 0,
    averaging: str = "macro",
) -> tuple[MlpModel, TrainReport]:
    """Mini-batch Adam training with early stopping on validation F1.

    Epochs iterate seeded shuffles of the training set in batches of
    ``config.batch_size``; a trailing batch of one row is skipped when batch
    norm is active since it cannot be normalized. Training stops once the
    validation F1 has failed to improve for more than ``patience``
    consecutive epochs (patience 0 stops at the first non-improving epoch),
    and the returned model is the snapshot from the best epoch.
    """
    x_train, y_train = train_data
    x_val, y_val = val_data
    y_train = _as_class_indices(np.asarray(y_train), model.num_classes)
    y_val = _as_class_indices(np.asarray(y_val), model.num_classes)
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)

    rng = np.random.default_rng(seed)
    state = init_adam(model)
    report = TrainReport()
    best_model = model.clone()
    best_f1 = -np.inf
    bad_epochs = 0
    batch_size = model.config.batch_size
    lr = model.config.learning_rate
    skip_singletons = model.config.with_batch_norm

    for epoch in range(1, max_epochs + 1):
        perm = rng.permutation(len(x_train))
        epoch_loss = 0.0
        seen = 0
        for start in range(0, len(perm), batch_size):
            idx = perm[start : start + batch_size]
            if skip_singletons and idx.size == 1:
                continue
            loss, grads = loss_and_gradients(model, x_train[idx], y_train[idx], rng=rng)
            grads, _, clipped = clip_gradients(grads)
            if clipped:
                report.clip_events += 1
            optimizer_step(model, grads, state, lr)
            epoch_loss += loss * idx.size
            seen += idx.size
        report.train_loss.append(epoch_loss / seen if seen else float("nan"))
        val_logits = forward(model, x_val, mode="eval")
        report.val_loss.append(cross_entropy(val_logits, y_val))
        val_pred = val_logits.argmax(axis=1)
        f1 = f1_score(y_val, val_pred, model.num_classes, average=averaging)
        report.val_f1.append(f1)
        report.epochs_run = epoch
        if f1 > best_f1:
            best_f1 = f1
            best_model = model.clone()
            report.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > patience:
                report.stopped_early = True
                break
    report.best_val_f1 = float(best_f1) if np.isfinite(best_f1) else 0.0
    return best_model, report


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(model: MlpModel, path: str | Path) -> None:
    """Write the model to the binary checkpoint format.

    Layout: magic, version, a length-prefixed JSON header (config, seed,
    dimensions, class names, tensor manifest), the tensors as little-endian
    float64, and a trailing SHA-256 of everything before it.
    """
    tensors: list[tuple[str, np.ndarray]] = []
    for i, layer in enumerate(model.layers):
        tensors.append((f"layers.{i}.W", layer.W))
        tensors.append((f"layers.{i}.b", layer.b))
        if layer.has_bn:
            tensors.append((f"layers.{i}.gamma", layer.gamma))
            tensors.append((f"layers.{i}.beta", layer.beta))
            tensors.append((f"layers.{i}.running_mean", layer.running_mean))
            tensors.append((f"layers.{i}.running_var", layer.running_var))
    header = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "classes": model.classes,
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", CHECKPOINT_VERSION)
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    for _, arr in tensors:
        body += np.asarray(arr, dtype="<f8").tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    Path(path).write_bytes(bytes(body) + digest)


def load_checkpoint(path: str | Path) -> MlpModel:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"checkpoint {path} failed its checksum")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", body, off)
    off += 4
    header = json.loads(body[off : off + header_len].decode("utf-8"))
    off += header_len
    config = MlpConfig.from_dict(header["config"])
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=off)
        off += 8 * size
        arrays[name] = arr.reshape(shape).astype(np.float64)
    n_layers = 1 + max(int(k.split(".")[1]) for k in arrays)
    layers = []
    for i in range(n_layers):
        layers.append(Layer(
            W=arrays[f"layers.{i}.W"].copy(),
            b=arrays[f"layers.{i}.b"].copy(),
            gamma=arrays.get(f"layers.{i}.gamma", None),
            beta=arrays.get(f"layers.{i}.beta", None),
            running_mean=arrays.get(f"layers.{i}.running_mean", None),
            running_var=arrays.get(f"layers.{i}.running_var", None),
        ))
    for layer in layers:
        for attr in ("gamma", "beta", "running_mean", "running_var"):
            value = getattr(layer, attr)
            if value is not None:
                setattr(layer, attr, value.copy())
    return MlpModel(
        input_dim=int(header["input_dim"]),
        num_classes=int(header["num_classes"]),
        config=config,
        seed=int(header["seed"]),
        layers=layers,
        classes=list(header.get("classes", [])),
    )

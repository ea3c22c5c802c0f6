"""MAP training with an L2 penalty, and the binary checkpoint container.

Checkpoint layout (all integers little-endian)::

    magic        9 bytes  b"PROJPOST1"
    version      u32      1 = parameters, 2 = sample set
    json_len     u32
    descriptor   json_len bytes of UTF-8 JSON (architecture, plus metadata in v2)
    P            u64
    k            u64      version 2 only
    payload      k*P float64 (k = 1 for version 1)
    crc32        u32      of the payload bytes
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataflow import Dataset
from .errors import CheckpointError, ConfigError, TrainingDiverged, UnsupportedVersionError
from .netcore import MLP, ArchitectureSpec, LossKind, loss_output_grad, loss_value

MAGIC = b"PROJPOST1"
PARAMS_VERSION = 1
SAMPLES_VERSION = 2


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ConfigError("need epochs >= 0, batch_size >= 1, weight_decay >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"malformed train config: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    theta: np.ndarray
    # entry 0 is the objective at initialisation, entry e the objective after epoch e
    loss_trace: list[float] = field(default_factory=list)


def default_loss(dataset: Dataset) -> LossKind:
    return LossKind.MSE if dataset.kind == "regression" else LossKind.CROSS_ENTROPY


def objective(net: MLP, theta, dataset: Dataset, kind: LossKind, weight_decay: float) -> float:
    """Mean loss plus ``weight_decay / 2 * ||theta||^2 / N``."""
    losses = loss_value(kind, net.forward(theta, dataset.inputs), dataset.targets)
    N = len(dataset)
    return float(np.mean(losses) + 0.5 * weight_decay * np.dot(theta, theta) / N)


def _check_kind(dataset: Dataset, kind: LossKind):
    expected = default_loss(dataset)
    if kind is not expected:
        raise ConfigError(f"{dataset.kind} dataset needs loss {expected.value}, got {kind.value}")


def train_map(net: MLP, theta_init, dataset: Dataset, loss_kind, config: TrainConfig) -> TrainResult:
    """Minibatch SGD/Adam on the penalised mean loss. Deterministic in ``config.seed``."""
    kind = LossKind(loss_kind)
    _check_kind(dataset, kind)
    theta = np.array(theta_init, dtype=np.float64)
    N = len(dataset)
    rng = np.random.default_rng(config.seed)
    trace = [objective(net, theta, dataset, kind, config.weight_decay)]
    m = np.zeros_like(theta)
    s = np.zeros_like(theta)
    step = 0
    with np.errstate(over="ignore", invalid="ignore"):
        # divergence is reported below as TrainingDiverged instead of as warnings
        for epoch in range(config.epochs):
            theta, m, s, step = _epoch(net, theta, dataset, kind, config, rng.permutation(N), m, s, step)
            loss = objective(net, theta, dataset, kind, config.weight_decay)
            if not np.isfinite(loss) or not np.all(np.isfinite(theta)):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch + 1} (lr={config.learning_rate})")
            trace.append(loss)
    return TrainResult(theta, trace)


def _epoch(net: MLP, theta, dataset: Dataset, kind: LossKind, config: TrainConfig, order, m, s, step):
    """One pass over the data in ``order``; returns the updated optimiser state."""
    N = len(dataset)
    for start in range(0, N, config.batch_size):
        idx = order[start:start + config.batch_size]
        X, T = dataset.inputs[idx], dataset.targets[idx]
        G = loss_output_grad(kind, net.forward(theta, X), T)
        grad = net.vjp(theta, X, G) / len(idx) + config.weight_decay * theta / N
        step += 1
        if config.optimizer == "adam":
            m = config.beta1 * m + (1 - config.beta1) * grad
            s = config.beta2 * s + (1 - config.beta2) * grad * grad
            m_hat = m / (1 - config.beta1**step)
            s_hat = s / (1 - config.beta2**step)
            theta = theta - config.learning_rate * m_hat / (np.sqrt(s_hat) + config.eps)
        else:
            m = config.momentum * m + grad
            theta = theta - config.learning_rate * m
    return theta, m, s, step


def accuracy(net: MLP, theta, dataset: Dataset) -> float:
    pred = np.argmax(net.forward(theta, dataset.inputs), axis=1)
    return float(np.mean(pred == dataset.targets))


# -- checkpoint container ---------------------------------------------------------


def _write(path, version: int, descriptor: dict, payload: np.ndarray, k: int | None) -> None:
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(payload, dtype="<f8")
    P = payload.shape[-1]
    body = payload.tobytes()
    parts = [MAGIC, struct.pack("<II", version, len(desc)), desc, struct.pack("<Q", P)]
    if k is not None:
        parts.append(struct.pack("<Q", k))
    parts += [body, struct.pack("<I", zlib.crc32(body))]
    Path(path).write_bytes(b"".join(parts))


def _read(path, expected_version: int) -> tuple[dict, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if data[:9] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    try:
        version, jlen = struct.unpack_from("<II", data, 9)
        if version not in (PARAMS_VERSION, SAMPLES_VERSION):
            raise UnsupportedVersionError(f"{path}: unsupported container version {version}")
        if version != expected_version:
            raise CheckpointError(f"{path}: expected container version {expected_version}, found {version}")
        pos = 17
        descriptor = json.loads(data[pos:pos + jlen].decode("utf-8"))
        pos += jlen
        (P,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        k = 1
        if version == SAMPLES_VERSION:
            (k,) = struct.unpack_from("<Q", data, pos)
            pos += 8
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    nbytes = 8 * k * P
    body = data[pos:pos + nbytes]
    if len(body) != nbytes or len(data) != pos + nbytes + 4:
        raise CheckpointError(f"{path}: payload length does not match header")
    (crc,) = struct.unpack_from("<I", data, pos + nbytes)
    if crc != zlib.crc32(body):
        raise CheckpointError(f"{path}: CRC mismatch")
    arch = descriptor.get("arch", descriptor)
    if ArchitectureSpec.from_dict(arch).n_params != P:
        raise CheckpointError(f"{path}: P={P} does not match the architecture")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(k, P)
    return descriptor, values


def save_checkpoint(path, arch: ArchitectureSpec, theta) -> None:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (arch.n_params,):
        raise CheckpointError(f"theta has shape {theta.shape}, architecture needs ({arch.n_params},)")
    _write(path, PARAMS_VERSION, arch.to_dict(), theta, None)


def load_checkpoint(path) -> tuple[ArchitectureSpec, np.ndarray]:
    descriptor, values = _read(path, PARAMS_VERSION)
    return ArchitectureSpec.from_dict(descriptor), values[0]


def save_sample_file(path, arch: ArchitectureSpec, samples, meta: dict) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != arch.n_params:
        raise CheckpointError(f"samples must be (k, {arch.n_params}), got {samples.shape}")
    _write(path, SAMPLES_VERSION, {"arch": arch.to_dict(), "meta": meta}, samples, samples.shape[0])


def load_sample_file(path) -> tuple[ArchitectureSpec, np.ndarray, dict]:
    descriptor, values = _read(path, SAMPLES_VERSION)
    if "arch" not in descriptor:
        raise CheckpointError(f"{path}: sample file lacks an architecture descriptor")
    return ArchitectureSpec.from_dict(descriptor["arch"]), values, descriptor.get("meta", {})

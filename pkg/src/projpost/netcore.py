"""Small feedforward networks with exact forward- and reverse-mode derivatives.

Parameters live in one flat float64 vector. Each layer stores its weight
matrix ``W`` (shape ``out x in``, row-major) followed by its bias (if any).
All methods are pure functions of their arguments, so a network can be
shared across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigError, OracleBudgetError, ShapeError

ACTIVATIONS = ("tanh", "relu", "identity")
DENSE_BUDGET = 10**7


class LossKind(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class ArchitectureSpec:
    """Shape of a multilayer perceptron.

    ``activation`` and ``bias`` may be given once for all layers or per
    layer; they are normalised to tuples. The output layer is always linear.
    """

    input_dim: int
    hidden_widths: tuple[int, ...] = ()
    output_dim: int = 1
    activation: str | tuple[str, ...] = "tanh"
    bias: bool | tuple[bool, ...] = True

    def __post_init__(self):
        hidden = tuple(int(h) for h in self.hidden_widths)
        object.__setattr__(self, "hidden_widths", hidden)
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in hidden):
            raise ConfigError(f"all layer widths must be positive, got {self.dims}")

        act = self.activation
        if isinstance(act, str):
            act = (act,) * len(hidden)
        act = tuple(act)
        if len(act) != len(hidden):
            raise ConfigError(f"need {len(hidden)} activations, got {len(act)}")
        bad = [a for a in act if a not in ACTIVATIONS]
        if bad:
            raise ConfigError(f"unknown activation(s) {bad}; choose from {ACTIVATIONS}")
        object.__setattr__(self, "activation", act)

        bias = self.bias
        if isinstance(bias, (bool, np.bool_)):
            bias = (bool(bias),) * self.n_layers
        bias = tuple(bool(b) for b in bias)
        if len(bias) != self.n_layers:
            raise ConfigError(f"need {self.n_layers} bias flags, got {len(bias)}")
        object.__setattr__(self, "bias", bias)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum(d[l] * d[l + 1] + (d[l + 1] if self.bias[l] else 0) for l in range(self.n_layers))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": list(self.activation),
            "bias": list(self.bias),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        try:
            return cls(
                input_dim=int(d["input_dim"]),
                hidden_widths=tuple(d.get("hidden_widths", ())),
                output_dim=int(d["output_dim"]),
                activation=d.get("activation", "tanh") if isinstance(d.get("activation", "tanh"), str)
                else tuple(d["activation"]),
                bias=d.get("bias", True) if isinstance(d.get("bias", True), bool) else tuple(d["bias"]),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed architecture: {exc}") from exc


@dataclass(frozen=True)
class LayerSlice:
    """Location of one layer's parameters inside the flat vector."""

    w_start: int
    w_shape: tuple[int, int]
    b_start: int | None

    @property
    def w_stop(self) -> int:
        return self.w_start + self.w_shape[0] * self.w_shape[1]


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_deriv(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        # subgradient at exactly 0 is 0
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


@dataclass(frozen=True)
class MLP:
    """Fully connected network ``f(theta, x)`` defined by an :class:`ArchitectureSpec`.

    Inputs may be a single vector of length ``I`` or a batch ``(n, I)``;
    outputs follow the same convention.
    """

    spec: ArchitectureSpec
    offsets: tuple[LayerSlice, ...] = field(init=False)

    def __post_init__(self):
        d = self.spec.dims
        pos = 0
        table = []
        for l in range(self.spec.n_layers):
            w_shape = (d[l + 1], d[l])
            w_start = pos
            pos += w_shape[0] * w_shape[1]
            b_start = None
            if self.spec.bias[l]:
                b_start = pos
                pos += d[l + 1]
            table.append(LayerSlice(w_start, w_shape, b_start))
        object.__setattr__(self, "offsets", tuple(table))

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    # -- parameter handling -------------------------------------------------

    def init_params(self, seed: int) -> np.ndarray:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
        rng = np.random.default_rng(seed)
        theta = np.empty(self.n_params)
        for sl in self.offsets:
            scale = 1.0 / math.sqrt(sl.w_shape[1])
            theta[sl.w_start:sl.w_stop] = rng.uniform(-scale, scale, sl.w_stop - sl.w_start)
            if sl.b_start is not None:
                out = sl.w_shape[0]
                theta[sl.b_start:sl.b_start + out] = rng.uniform(-scale, scale, out)
        return theta

    def unpack(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray | None]]:
        """Views ``(W, b)`` per layer into ``theta``."""
        theta = self._check_theta(theta)
        layers = []
        for sl in self.offsets:
            W = theta[sl.w_start:sl.w_stop].reshape(sl.w_shape)
            b = None if sl.b_start is None else theta[sl.b_start:sl.b_start + sl.w_shape[0]]
            layers.append((W, b))
        return layers

    def _check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"parameter vector must have shape ({self.n_params},), got {theta.shape}")
        return theta

    def _check_x(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ShapeError(f"input must have trailing dimension {self.input_dim}, got {x.shape}")
        return X, single

    # -- evaluation -----------------------------------------------------------

    def _trace(self, layers, X):
        """Forward pass keeping layer inputs and pre-activations."""
        inputs, pre = [], []
        a = X
        last = len(layers) - 1
        for l, (W, b) in enumerate(layers):
            inputs.append(a)
            z = a @ W.T
            if b is not None:
                z = z + b
            pre.append(z)
            a = z if l == last else _act(self.spec.activation[l], z)
        return inputs, pre, a

    def forward(self, theta, x) -> np.ndarray:
        layers = self.unpack(theta)
        X, single = self._check_x(x)
        out = self._trace(layers, X)[2]
        return out[0] if single else out

    def jvp(self, theta, x, v) -> np.ndarray:
        """Forward-mode product ``J_theta(x) v``; batched over rows of ``x``."""
        layers = self.unpack(theta)
        tangents = self.unpack(self._check_theta(v))
        X, single = self._check_x(x)
        a, da = X, None
        last = len(layers) - 1
        for l, ((W, b), (dW, db)) in enumerate(zip(layers, tangents)):
            z = a @ W.T
            dz = a @ dW.T
            if da is not None:
                dz = dz + da @ W.T
            if b is not None:
                z = z + b
                dz = dz + db
            if l == last:
                a, da = z, dz
            else:
                kind = self.spec.activation[l]
                a = _act(kind, z)
                da = _act_deriv(kind, z, a) * dz
        return da[0] if single else da

    def vjp(self, theta, x, u) -> np.ndarray:
        """Reverse-mode product ``J_theta(x)^T u``.

        For a batch ``x`` of shape ``(n, I)`` the cotangent ``u`` has shape
        ``(n, O)`` and the per-datum contributions are summed.
        """
        layers = self.unpack(theta)
        X, single = self._check_x(x)
        U = np.asarray(u, dtype=np.float64)
        U = U[None, :] if single and U.ndim == 1 else U
        if U.shape != (X.shape[0], self.output_dim):
            raise ShapeError(f"cotangent must have shape {(X.shape[0], self.output_dim)}, got {np.shape(u)}")
        inputs, pre, _ = self._trace(layers, X)
        grad = np.zeros(self.n_params)
        g = U
        for l in range(len(layers) - 1, -1, -1):
            sl = self.offsets[l]
            W, b = layers[l]
            grad[sl.w_start:sl.w_stop] = (g.T @ inputs[l]).ravel()
            if b is not None:
                grad[sl.b_start:sl.b_start + sl.w_shape[0]] = g.sum(axis=0)
            if l > 0:
                kind = self.spec.activation[l - 1]
                g = (g @ W) * _act_deriv(kind, pre[l - 1], inputs[l])
        return grad

    def dense_jacobian(self, theta, x, budget: int = DENSE_BUDGET) -> np.ndarray:
        """Materialise ``J_theta(x)`` (``O x P``) row by row from :meth:`vjp`."""
        O, P = self.output_dim, self.n_params
        if O * P > budget:
            raise OracleBudgetError(f"dense Jacobian needs {O * P} entries, budget is {budget}")
        X, single = self._check_x(x)
        if not single:
            raise ShapeError("dense_jacobian takes a single input vector")
        eye = np.eye(O)
        return np.stack([self.vjp(theta, X[0], eye[o]) for o in range(O)])

    def linearized_predict(self, theta_map, theta, x) -> np.ndarray:
        """First-order Taylor expansion of the network around ``theta_map``."""
        delta = self._check_theta(theta) - self._check_theta(theta_map)
        return self.forward(theta_map, x) + self.jvp(theta_map, x, delta)

    def loss_grad_params(self, theta, x, target, kind: LossKind | str) -> np.ndarray:
        """Gradient of the loss with respect to the parameters.

        For a batch, the per-datum gradients are summed.
        """
        y = self.forward(theta, x)
        return self.vjp(theta, x, loss_output_grad(kind, y, target))


def build_network(spec: ArchitectureSpec, init_seed: int) -> tuple[MLP, np.ndarray]:
    net = MLP(spec)
    return net, net.init_params(init_seed)


# -- losses -------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))


def _class_index(target, n_classes: int) -> np.ndarray:
    t = np.asarray(target)
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.equal(np.mod(t, 1), 0)):
            raise ShapeError(f"class targets must be integers, got {target!r}")
        t = t.astype(np.int64)
    if np.any(t < 0) or np.any(t >= n_classes):
        raise ShapeError(f"class index out of range [0, {n_classes}): {target!r}")
    return t


def loss_value(kind: LossKind | str, y, target) -> np.ndarray | float:
    """Per-datum loss. ``y`` is ``(O,)`` or ``(n, O)``.

    MSE is ``0.5 * ||y - t||^2``; cross-entropy is ``-log softmax(y)[t]``.
    """
    kind = LossKind(kind)
    y = np.asarray(y, dtype=np.float64)
    if kind is LossKind.MSE:
        t = np.asarray(target, dtype=np.float64)
        if t.shape != y.shape:
            raise ShapeError(f"target shape {t.shape} does not match output shape {y.shape}")
        return 0.5 * np.sum((y - t) ** 2, axis=-1)
    t = _class_index(target, y.shape[-1])
    logp = log_softmax(y)
    if y.ndim == 1:
        return float(-logp[t])
    return -logp[np.arange(y.shape[0]), t]


def loss_output_grad(kind: LossKind | str, y, target) -> np.ndarray:
    """Gradient of the per-datum loss with respect to the network output."""
    kind = LossKind(kind)
    y = np.asarray(y, dtype=np.float64)
    if kind is LossKind.MSE:
        t = np.asarray(target, dtype=np.float64)
        if t.shape != y.shape:
            raise ShapeError(f"target shape {t.shape} does not match output shape {y.shape}")
        return y - t
    t = _class_index(target, y.shape[-1])
    g = softmax(y)
    if y.ndim == 1:
        g[t] -= 1.0
    else:
        g[np.arange(y.shape[0]), t] -= 1.0
    return g


def per_datum_loss_grads(net: MLP, theta, X, targets, kind: LossKind | str) -> np.ndarray:
    """Rows of the stacked loss Jacobian, one ``vjp`` per datum (``n x P``)."""
    X = np.asarray(X, dtype=np.float64)
    Y = net.forward(theta, X)
    G = loss_output_grad(kind, Y, targets)
    return np.stack([net.vjp(theta, X[n], G[n]) for n in range(X.shape[0])])


def stacked_jacobian(net: MLP, theta, X: Sequence, budget: int = DENSE_BUDGET) -> np.ndarray:
    """Dataset Jacobian ``[J(x_1); ...; J(x_N)]`` of shape ``(N*O, P)``."""
    X = np.asarray(X, dtype=np.float64)
    rows = X.shape[0] * net.output_dim
    if rows * net.n_params > budget:
        raise OracleBudgetError(f"stacked Jacobian needs {rows * net.n_params} entries, budget is {budget}")
    return np.concatenate([net.dense_jacobian(theta, x, budget) for x in X], axis=0)

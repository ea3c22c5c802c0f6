"""Matrix-free projection onto the kernel of a stacked Jacobian.

The row matrix ``M`` (output Jacobians or per-datum loss gradients) is split
into row blocks ``M_b``. For each block we factor the small Gram matrix
``M_b M_b^T`` once; projecting onto ``ker(M_b)`` then costs one forward and
one reverse product. Cycling through the block projections converges to the
projection onto the intersection of the block kernels, which is ``ker(M)``.

Dense SVD projectors are provided as oracles for small problems.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .dataflow import Dataset, partition
from .errors import ConfigError, NumericError, OracleBudgetError, ShapeError
from .netcore import DENSE_BUDGET, MLP, loss_output_grad

RANK_TOL = 1e-10
DEFAULT_T_MAX = 1000
DEFAULT_BATCH = 16

OUTPUT_JACOBIAN = "output_jacobian"
LOSS_GRADIENT = "loss_gradient"
MODES = (OUTPUT_JACOBIAN, LOSS_GRADIENT)


class RowBlock(Protocol):
    n_rows: int
    n_params: int

    def apply(self, v: np.ndarray) -> np.ndarray: ...

    def apply_transpose(self, u: np.ndarray) -> np.ndarray: ...

    def datum_of_row(self, i: int) -> int: ...


class JacobianBlock:
    """Rows are all output rows of ``J(x_n)`` for the data in the batch.

    ``sqrt_hessian`` (an ``O x O`` matrix ``L``) replaces each datum's rows
    by ``L J(x_n)``. It defaults to ``None``, i.e. an identity likelihood
    Hessian.
    """

    mode = OUTPUT_JACOBIAN

    def __init__(self, net: MLP, theta, inputs, indices=None, sqrt_hessian=None):
        self.net = net
        self.theta = np.asarray(theta, dtype=np.float64)
        self.inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        self.indices = np.arange(len(self.inputs)) if indices is None else np.asarray(indices)
        self.sqrt_hessian = None if sqrt_hessian is None else np.asarray(sqrt_hessian, dtype=np.float64)
        self.n_params = net.n_params
        self.n_rows = self.inputs.shape[0] * net.output_dim

    def apply(self, v):
        out = self.net.jvp(self.theta, self.inputs, v)
        if self.sqrt_hessian is not None:
            out = out @ self.sqrt_hessian.T
        return out.ravel()

    def apply_transpose(self, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.n_rows,):
            raise ShapeError(f"expected vector of length {self.n_rows}, got {u.shape}")
        U = u.reshape(self.inputs.shape[0], self.net.output_dim)
        if self.sqrt_hessian is not None:
            U = U @ self.sqrt_hessian
        return self.net.vjp(self.theta, self.inputs, U)

    def datum_of_row(self, i):
        return int(self.indices[i // self.net.output_dim])


class LossGradientBlock:
    """Rows are the per-datum loss gradients ``J(x_n)^T grad_y l(f(x_n), y_n)``."""

    mode = LOSS_GRADIENT

    def __init__(self, net: MLP, theta, inputs, targets, loss_kind, indices=None):
        self.net = net
        self.theta = np.asarray(theta, dtype=np.float64)
        self.inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        self.indices = np.arange(len(self.inputs)) if indices is None else np.asarray(indices)
        outputs = net.forward(self.theta, self.inputs)
        # n x O weights that collapse each datum's Jacobian into one row
        self.output_grads = loss_output_grad(loss_kind, outputs, targets)
        self.n_params = net.n_params
        self.n_rows = self.inputs.shape[0]

    def apply(self, v):
        return np.sum(self.net.jvp(self.theta, self.inputs, v) * self.output_grads, axis=1)

    def apply_transpose(self, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.n_rows,):
            raise ShapeError(f"expected vector of length {self.n_rows}, got {u.shape}")
        return self.net.vjp(self.theta, self.inputs, u[:, None] * self.output_grads)

    def datum_of_row(self, i):
        return int(self.indices[i])


class MatrixBlock:
    """Explicit row matrix. Used for cached rows and synthetic fixtures."""

    mode = "matrix"

    def __init__(self, rows, indices=None, rows_per_datum: int = 1):
        self.rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        self.n_rows, self.n_params = self.rows.shape
        self.rows_per_datum = rows_per_datum
        self.indices = np.arange(self.n_rows // rows_per_datum) if indices is None else np.asarray(indices)

    def apply(self, v):
        return self.rows @ v

    def apply_transpose(self, u):
        return self.rows.T @ u

    def datum_of_row(self, i):
        return int(self.indices[i // self.rows_per_datum])


def block_apply(block: RowBlock, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (block.n_params,):
        raise ShapeError(f"expected vector of length {block.n_params}, got {v.shape}")
    return block.apply(v)


def block_apply_transpose(block: RowBlock, u) -> np.ndarray:
    return block.apply_transpose(np.asarray(u, dtype=np.float64))


def materialize_rows(block: RowBlock) -> np.ndarray:
    """Row matrix of a block, one transpose product per row."""
    eye = np.eye(block.n_rows)
    return np.stack([block.apply_transpose(eye[i]) for i in range(block.n_rows)])


def cache_rows(block: RowBlock) -> MatrixBlock:
    if isinstance(block, MatrixBlock):
        return block
    per = block.n_rows // max(len(block.indices), 1)
    return MatrixBlock(materialize_rows(block), block.indices, rows_per_datum=max(per, 1))


# -- Gram factorisation ---------------------------------------------------------


@dataclass(frozen=True)
class GramFactor:
    """Eigendecomposition of ``M_b M_b^T`` with tolerance-truncated pseudo-inverse."""

    gram: np.ndarray
    eigenvalues: np.ndarray  # nonincreasing
    eigenvectors: np.ndarray
    rank_tol: float
    effective_rank: int

    def pinv_apply(self, u: np.ndarray) -> np.ndarray:
        k = self.effective_rank
        V = self.eigenvectors[:, :k]
        return V @ ((V.T @ u) / self.eigenvalues[:k])


def factor_gram(gram: np.ndarray, rank_tol: float = RANK_TOL) -> GramFactor:
    gram = 0.5 * (gram + gram.T)
    w, V = np.linalg.eigh(gram)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    lam_max = w[0] if w.size else 0.0
    if lam_max > 0 and w[-1] < -rank_tol * lam_max:
        raise NumericError(f"Gram matrix has eigenvalue {w[-1]:.3e} < 0 (max {lam_max:.3e})")
    rank = int(np.sum(w > rank_tol * lam_max)) if lam_max > 0 else 0
    return GramFactor(gram, w, V, rank_tol, rank)


def build_gram(block: RowBlock, rank_tol: float = RANK_TOL) -> GramFactor:
    """Assemble and factor the Gram matrix of a block.

    Matrix blocks use their stored rows. Other blocks stream: row ``i`` is
    formed by a transpose product and immediately pushed through ``apply`` to
    give column ``i`` of the Gram matrix, so only one parameter-length row is
    held at a time.
    """
    r = block.n_rows
    if isinstance(block, MatrixBlock):
        rows = block.rows
        bad = ~np.all(np.isfinite(rows), axis=1)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise NumericError(f"non-finite Jacobian row for datum {block.datum_of_row(i)}")
        gram = rows @ rows.T
    else:
        gram = np.empty((r, r))
        e = np.zeros(r)
        for i in range(r):
            e[i] = 1.0
            row = block.apply_transpose(e)
            e[i] = 0.0
            if not np.all(np.isfinite(row)):
                raise NumericError(f"non-finite Jacobian row for datum {block.datum_of_row(i)}")
            gram[:, i] = block.apply(row)
    return factor_gram(gram, rank_tol)


def block_kernel_project(block: RowBlock, factor: GramFactor, v) -> np.ndarray:
    """``v - M^T (M M^T)^+ M v``: orthogonal projection onto ``ker(M_b)``."""
    v = np.asarray(v, dtype=np.float64)
    if factor.effective_rank == 0:
        return v.copy()
    return v - block.apply_transpose(factor.pinv_apply(block.apply(v)))


# -- alternating projections ------------------------------------------------------


@dataclass
class RateEstimate:
    """Per-sweep residual norms and the fitted geometric rate.

    Without a reference the residual of sweep ``t`` is the displacement
    ``||v_t - v_{t-1}||``; with one it is ``||v_t - reference||``.
    """

    residuals: list[float]
    c_hat: float
    sweeps: int
    converged_at: int | None = None

    def to_dict(self) -> dict:
        return {"residuals": self.residuals, "c_hat": self.c_hat, "sweeps": self.sweeps,
                "converged_at": self.converged_at}


def fit_rate(residuals: Sequence[float], floor: float = 1e-13) -> float:
    """Geometric rate from a log-linear fit of the residual trace.

    Entries at or below ``floor`` times the first residual are treated as
    converged and excluded. If fewer than two entries remain the sequence
    converged immediately and the rate is 0.
    """
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0 or r[0] <= 0:
        return 0.0
    keep = r > floor * r[0]
    n = int(np.argmin(keep)) if not np.all(keep) else r.size
    if n < 2:
        return 0.0
    t = np.arange(n, dtype=np.float64)
    slope = np.polyfit(t, np.log(r[:n]), 1)[0]
    return float(min(max(math.exp(slope), 0.0), 1.0))


@dataclass
class KernelProjector:
    """Composition of per-block kernel projections, repeated ``t_max`` times.

    One sweep applies ``(I - P_1)(I - P_2) ... (I - P_B)`` to a vector, so the
    last block acts first.
    """

    blocks: list
    factors: list[GramFactor]
    t_max: int = DEFAULT_T_MAX
    residual_tol: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.t_max < 1:
            raise ConfigError("t_max must be at least 1")
        if len(self.blocks) != len(self.factors) or not self.blocks:
            raise ConfigError("need one Gram factor per block and at least one block")
        self.n_params = self.blocks[0].n_params

    def sweep(self, v) -> np.ndarray:
        w = np.asarray(v, dtype=np.float64)
        for block, factor in zip(reversed(self.blocks), reversed(self.factors)):
            w = block_kernel_project(block, factor, w)
        return w

    def project(self, v, t_max: int | None = None, reference=None) -> tuple[np.ndarray, RateEstimate]:
        """Run the sweeps and return the result with its residual trace.

        Stops early once the relative displacement falls below
        ``residual_tol`` (if set).
        """
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise ShapeError(f"expected vector of length {self.n_params}, got {v.shape}")
        t_max = self.t_max if t_max is None else t_max
        v0_norm = float(np.linalg.norm(v))
        residuals = []
        converged_at = None
        w = v
        for t in range(1, t_max + 1):
            w_next = self.sweep(w)
            step = float(np.linalg.norm(w_next - w))
            w = w_next
            residuals.append(step if reference is None else float(np.linalg.norm(w - reference)))
            if converged_at is None and step <= 1e-15 * v0_norm:
                # sweep t changed nothing, so the iterate was final after sweep t - 1
                converged_at = t - 1
            if step == 0.0:
                break
            if self.residual_tol is not None and v0_norm > 0 and step / v0_norm < self.residual_tol:
                converged_at = t if converged_at is None else converged_at
                break
        return w, RateEstimate(residuals, fit_rate(residuals), len(residuals), converged_at)

    def apply(self, v) -> np.ndarray:
        return self.project(v)[0]

    def project_many(self, V, threads: int = 1) -> np.ndarray:
        """Project each row of ``V`` independently; results do not depend on ``threads``."""
        V = np.atleast_2d(np.asarray(V, dtype=np.float64))
        if threads <= 1 or V.shape[0] == 1:
            return np.stack([self.apply(v) for v in V])
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.stack(list(pool.map(self.apply, V)))


def dataset_blocks(net: MLP, theta, dataset: Dataset, mode: str, batch_size: int = DEFAULT_BATCH,
                   seed: int = 0, loss_kind=None, order=None) -> list:
    """One row block per batch of a seeded partition of the dataset."""
    if mode not in MODES:
        raise ConfigError(f"projector mode must be one of {MODES}, got {mode!r}")
    parts = partition(dataset, batch_size, seed).index_lists
    if order is not None:
        parts = [parts[i] for i in order]
    blocks = []
    for idx in parts:
        X = dataset.inputs[idx]
        if mode == OUTPUT_JACOBIAN:
            blocks.append(JacobianBlock(net, theta, X, idx))
        else:
            if loss_kind is None:
                raise ConfigError("loss_gradient mode needs a loss kind")
            blocks.append(LossGradientBlock(net, theta, X, dataset.targets[idx], loss_kind, idx))
    return blocks


def build_projector(net: MLP, theta, dataset: Dataset, mode: str = OUTPUT_JACOBIAN,
                    batch_size: int = DEFAULT_BATCH, seed: int = 0, t_max: int = DEFAULT_T_MAX,
                    residual_tol: float | None = None, rank_tol: float = RANK_TOL,
                    loss_kind=None, cache: bool = False, order=None) -> KernelProjector:
    blocks = dataset_blocks(net, theta, dataset, mode, batch_size, seed, loss_kind, order)
    if cache:
        blocks = [cache_rows(b) for b in blocks]
    factors = [build_gram(b, rank_tol) for b in blocks]
    meta = {"mode": mode, "batch_size": batch_size, "t_max": t_max, "partition_seed": seed,
            "rank_tol": rank_tol, "n_blocks": len(blocks)}
    return KernelProjector(blocks, factors, t_max, residual_tol, meta)


def projector_from_matrices(row_blocks: Sequence, t_max: int = DEFAULT_T_MAX,
                            residual_tol: float | None = None, rank_tol: float = RANK_TOL) -> KernelProjector:
    blocks = [MatrixBlock(rows) for rows in row_blocks]
    factors = [build_gram(b, rank_tol) for b in blocks]
    return KernelProjector(blocks, factors, t_max, residual_tol, {"mode": "matrix", "t_max": t_max})


# -- dense oracles ----------------------------------------------------------------


@dataclass(frozen=True)
class DenseProjector:
    """Orthonormal kernel basis ``U`` of an explicit row matrix.

    The rank tolerance is relative to the largest singular value. With
    ``gram_matched=True`` it is applied to squared singular values instead,
    the spectrum a Gram pseudo-inverse truncates, so the kernel matches the
    one a single-block solver sees on ill-conditioned rows.
    """

    basis: np.ndarray  # P x R
    singular_values: np.ndarray

    @classmethod
    def from_rows(cls, rows, rank_tol: float = RANK_TOL, gram_matched: bool = False) -> "DenseProjector":
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        _, s, Vt = np.linalg.svd(rows, full_matrices=True)
        s_max = s[0] if s.size else 0.0
        cut = math.sqrt(rank_tol) if gram_matched else rank_tol
        rank = int(np.sum(s > cut * s_max)) if s_max > 0 else 0
        return cls(Vt[rank:].T.copy(), s)

    @property
    def n_params(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.n_params - self.basis.shape[1]

    @property
    def trace(self) -> int:
        return self.basis.shape[1]

    def apply(self, v) -> np.ndarray:
        U = self.basis
        return U @ (U.T @ np.asarray(v, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        return self.basis @ self.basis.T


def dense_rows(net: MLP, theta, dataset: Dataset, mode: str = OUTPUT_JACOBIAN, loss_kind=None,
               budget: int = DENSE_BUDGET) -> np.ndarray:
    """Fully materialised row matrix (``N*O x P`` or ``N x P``)."""
    N, P = len(dataset), net.n_params
    n_rows = N * net.output_dim if mode == OUTPUT_JACOBIAN else N
    if n_rows * P > budget:
        raise OracleBudgetError(f"dense row matrix needs {n_rows * P} entries, budget is {budget}")
    if mode == OUTPUT_JACOBIAN:
        return np.concatenate([net.dense_jacobian(theta, x, budget) for x in dataset.inputs])
    if loss_kind is None:
        raise ConfigError("loss_gradient mode needs a loss kind")
    G = loss_output_grad(loss_kind, net.forward(theta, dataset.inputs), dataset.targets)
    return np.stack([net.vjp(theta, dataset.inputs[n], G[n]) for n in range(N)])


def dense_kernel_projector(net: MLP, theta, dataset: Dataset, mode: str = OUTPUT_JACOBIAN,
                           loss_kind=None, rank_tol: float = RANK_TOL,
                           budget: int = DENSE_BUDGET) -> DenseProjector:
    return DenseProjector.from_rows(dense_rows(net, theta, dataset, mode, loss_kind, budget), rank_tol)


def kernel_containment_check(net: MLP, theta, dataset: Dataset, loss_kind, n_vectors: int = 50,
                             seed: int = 0, rank_tol: float = RANK_TOL, reverse: bool = False) -> float:
    """Largest ``||J^L v|| / ||v||`` over random vectors from the output-Jacobian kernel.

    With ``reverse=True`` the roles swap: vectors come from the loss-gradient
    kernel and the output Jacobian is applied (mutual containment for ``O = 1``).
    """
    J = dense_rows(net, theta, dataset, OUTPUT_JACOBIAN)
    JL = dense_rows(net, theta, dataset, LOSS_GRADIENT, loss_kind)
    source, target = (JL, J) if reverse else (J, JL)
    U = DenseProjector.from_rows(source, rank_tol).basis
    if U.shape[1] == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_vectors):
        v = U @ rng.standard_normal(U.shape[1])
        norm = np.linalg.norm(v)
        if norm == 0:
            continue
        worst = max(worst, float(np.linalg.norm(target @ v) / norm))
    return worst

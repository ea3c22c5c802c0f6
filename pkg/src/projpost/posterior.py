"""Approximate posteriors around a MAP estimate, their predictives, and
dense checks of the variance and covariance bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .dataflow import Dataset
from .errors import ConfigError, EstimationError, OracleBudgetError
from .netcore import MLP, loss_value, softmax, stacked_jacobian
from .projector import RANK_TOL, KernelProjector

DENSE_P_BUDGET = 2000
DEFAULT_SAMPLES = 30


class PosteriorKind(str, Enum):
    PROJECTED = "projected"
    LOSS_PROJECTED = "loss_projected"
    LLA_DENSE = "lla_dense"
    DIAG_LAPLACE = "diag_laplace"
    MAP_DELTA = "map_delta"


# kinds whose predictive is the linearised network; the rest use the network itself
LINEARIZED_KINDS = (PosteriorKind.PROJECTED, PosteriorKind.LLA_DENSE)


@dataclass
class SampleSet:
    samples: np.ndarray  # k x P
    alpha: float
    kind: PosteriorKind
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = PosteriorKind(self.kind)
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[0] < 1 or not np.all(np.isfinite(self.samples)):
            raise EstimationError("sample set must hold at least one finite sample")

    @property
    def k(self) -> int:
        return self.samples.shape[0]

    def to_meta(self) -> dict:
        return {"alpha": self.alpha, "kind": self.kind.value, "seed": self.seed, **self.meta}


def _check_alpha(alpha: float):
    if not (alpha > 0 and math.isfinite(alpha)):
        raise ConfigError(f"prior precision must be positive and finite, got {alpha}")


def _sample_kernel(theta_map, projector: KernelProjector, alpha, k, seed, kind, threads):
    _check_alpha(alpha)
    if k < 1:
        raise ConfigError("need at least one sample")
    theta_map = np.asarray(theta_map, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # project standard normal draws, then scale: the projection is linear
    Z = rng.standard_normal((k, theta_map.shape[0]))
    projected = projector.project_many(Z, threads=threads)
    samples = theta_map + projected / math.sqrt(alpha)
    meta = {key: projector.meta[key] for key in ("mode", "t_max", "batch_size") if key in projector.meta}
    return SampleSet(samples, float(alpha), kind, seed, meta)


def sample_projected(theta_map, projector: KernelProjector, alpha: float, k: int = DEFAULT_SAMPLES,
                     seed: int = 0, threads: int = 1) -> SampleSet:
    """Draw ``theta_map + Pi eps`` with ``eps ~ N(0, I / alpha)`` and ``Pi`` the kernel projector."""
    return _sample_kernel(theta_map, projector, alpha, k, seed, PosteriorKind.PROJECTED, threads)


def sample_loss_projected(theta_map, loss_projector: KernelProjector, alpha: float, k: int = DEFAULT_SAMPLES,
                          seed: int = 0, threads: int = 1) -> SampleSet:
    """As :func:`sample_projected`, with a projector built from loss-gradient blocks."""
    return _sample_kernel(theta_map, loss_projector, alpha, k, seed, PosteriorKind.LOSS_PROJECTED, threads)


def map_delta(theta_map, k: int = 1) -> SampleSet:
    theta_map = np.asarray(theta_map, dtype=np.float64)
    return SampleSet(np.tile(theta_map, (k, 1)), math.inf, PosteriorKind.MAP_DELTA, 0)


# -- prior precision ------------------------------------------------------------------


class AlphaConvention(str, Enum):
    RANK_OVER_NORM = "rank_over_norm"
    NORM_OVER_RANK = "norm_over_rank"


@dataclass(frozen=True)
class AlphaEstimate:
    alpha_star: float
    rank_over_norm: float
    norm_over_rank: float
    trace_estimate: float  # estimate of tr(kernel projector)
    rank_estimate: float
    probes: int
    convention: AlphaConvention

    def to_dict(self) -> dict:
        return {"alpha_star": self.alpha_star, "rank_over_norm": self.rank_over_norm,
                "norm_over_rank": self.norm_over_rank, "trace_estimate": self.trace_estimate,
                "rank_estimate": self.rank_estimate, "probes": self.probes,
                "convention": self.convention.value}


def alpha_from_trace(theta_map, kernel_trace: float, convention=AlphaConvention.RANK_OVER_NORM,
                     probes: int = 0) -> AlphaEstimate:
    """Closed-form prior precision from ``tr(Pi)``, the kernel dimension.

    Maximising ``-alpha ||theta||^2 / 2 + (P - tr(Pi)) / 2 * log(alpha)``
    gives ``(P - tr(Pi)) / ||theta||^2`` (``rank_over_norm``). The reciprocal
    form is reported as ``norm_over_rank``.
    """
    theta_map = np.asarray(theta_map, dtype=np.float64)
    convention = AlphaConvention(convention)
    rank = theta_map.shape[0] - kernel_trace
    sq_norm = float(np.dot(theta_map, theta_map))
    if rank <= 0:
        raise EstimationError(f"estimated GGN rank {rank:.4g} is not positive")
    if sq_norm == 0:
        raise EstimationError("MAP parameters have zero norm")
    a_ron = rank / sq_norm
    a_pp = sq_norm / rank
    chosen = a_ron if convention is AlphaConvention.RANK_OVER_NORM else a_pp
    return AlphaEstimate(chosen, a_ron, a_pp, float(kernel_trace), float(rank), probes, convention)


def hutchinson_trace(projector, dim: int, probes: int, seed: int = 0) -> float:
    """Mean of ``z^T Pi z`` over Rademacher probes ``z``."""
    if probes < 1:
        raise ConfigError("need at least one probe")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(probes):
        z = rng.choice((-1.0, 1.0), size=dim)
        total += float(np.dot(z, projector.apply(z)))
    return total / probes


def optimal_alpha(theta_map, projector, probes: int = 256, seed: int = 0,
                  convention=AlphaConvention.RANK_OVER_NORM) -> AlphaEstimate:
    theta_map = np.asarray(theta_map, dtype=np.float64)
    trace = hutchinson_trace(projector, theta_map.shape[0], probes, seed)
    return alpha_from_trace(theta_map, trace, convention, probes)


# -- dense baselines ---------------------------------------------------------------


def _dense_jacobian(net: MLP, theta_map, dataset: Dataset, budget: int) -> np.ndarray:
    if net.n_params > budget:
        raise OracleBudgetError(f"P={net.n_params} exceeds the dense budget {budget}")
    return stacked_jacobian(net, theta_map, dataset.inputs)


@dataclass
class DenseLLA:
    """``N(theta_map, (alpha I + J^T J)^{-1})`` held as an eigendecomposition."""

    theta_map: np.ndarray
    alpha: float
    ggn_eigenvalues: np.ndarray
    ggn_eigenvectors: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        V = self.ggn_eigenvectors
        return (V / (self.ggn_eigenvalues + self.alpha)) @ V.T

    def sample(self, k: int = DEFAULT_SAMPLES, seed: int = 0) -> SampleSet:
        rng = np.random.default_rng(seed)
        Z = rng.standard_normal((k, self.theta_map.shape[0]))
        scale = 1.0 / np.sqrt(self.ggn_eigenvalues + self.alpha)
        samples = self.theta_map + (Z * scale) @ self.ggn_eigenvectors.T
        return SampleSet(samples, self.alpha, PosteriorKind.LLA_DENSE, seed)


def lla_dense_posterior(net: MLP, theta_map, dataset: Dataset, alpha: float,
                        budget: int = DENSE_P_BUDGET) -> DenseLLA:
    _check_alpha(alpha)
    J = _dense_jacobian(net, theta_map, dataset, budget)
    w, V = np.linalg.eigh(J.T @ J)
    return DenseLLA(np.asarray(theta_map, dtype=np.float64), float(alpha), np.clip(w, 0.0, None), V)


@dataclass
class DiagLaplace:
    theta_map: np.ndarray
    alpha: float
    precision: np.ndarray

    def sample(self, k: int = DEFAULT_SAMPLES, seed: int = 0) -> SampleSet:
        rng = np.random.default_rng(seed)
        Z = rng.standard_normal((k, self.theta_map.shape[0]))
        return SampleSet(self.theta_map + Z / np.sqrt(self.precision), self.alpha,
                         PosteriorKind.DIAG_LAPLACE, seed)


def diag_laplace(net: MLP, theta_map, dataset: Dataset, alpha: float) -> DiagLaplace:
    """Precision ``alpha + sum_n sum_o J[n, o, p]^2`` from ``N*O`` reverse products."""
    _check_alpha(alpha)
    diag = np.zeros(net.n_params)
    for x in dataset.inputs:
        diag += np.sum(net.dense_jacobian(theta_map, x) ** 2, axis=0)
    return DiagLaplace(np.asarray(theta_map, dtype=np.float64), float(alpha), alpha + diag)


# -- predictives ---------------------------------------------------------------------


@dataclass
class Predictive:
    """Per-input predictive statistics.

    ``mean`` holds outputs (regression) or mean softmax probabilities
    (classification); ``variance`` is the per-dimension variance of the raw
    outputs or logits across samples.
    """

    mean: np.ndarray
    variance: np.ndarray
    mean_outputs: np.ndarray

    @property
    def trace_variance(self) -> np.ndarray:
        return np.sum(self.variance, axis=-1)


def _all_equal(samples: np.ndarray) -> bool:
    return bool(np.all(samples == samples[0]))


def _sample_outputs(net: MLP, theta_map, samples: np.ndarray, X: np.ndarray, linearized: bool) -> np.ndarray:
    if linearized:
        base = net.forward(theta_map, X)
        return np.stack([base + net.jvp(theta_map, X, s - theta_map) for s in samples])
    return np.stack([net.forward(s, X) for s in samples])


def _summarise(outputs: np.ndarray, task: str) -> Predictive:
    """``outputs`` is ``k x n x O``."""
    k = outputs.shape[0]
    mean_out = np.mean(outputs, axis=0)
    var = np.var(outputs, axis=0, ddof=1) if k > 1 else np.zeros_like(mean_out)
    if task == "classification":
        mean = np.mean(softmax(outputs), axis=0)
    else:
        mean = mean_out
    return Predictive(mean, var, mean_out)


def predict(net: MLP, theta_map, sample_set: SampleSet, x, task: str = "regression",
            linearized: bool | None = None) -> Predictive:
    """Monte-Carlo predictive over a sample set at one input or a batch.

    The linearised network is used for projected and dense-LLA samples and the
    network itself otherwise, unless ``linearized`` says otherwise. Sample
    sets whose samples are all identical are evaluated once, so a MAP delta
    reproduces the MAP predictor exactly.
    """
    if task not in ("regression", "classification"):
        raise ConfigError(f"task must be regression or classification, got {task!r}")
    theta_map = np.asarray(theta_map, dtype=np.float64)
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = X[None, :] if single else X
    if linearized is None:
        linearized = sample_set.kind in LINEARIZED_KINDS
    samples = sample_set.samples
    if _all_equal(samples):
        outputs = _sample_outputs(net, theta_map, samples[:1], X, linearized)
        mean = softmax(outputs[0]) if task == "classification" else outputs[0]
        pred = Predictive(mean, np.zeros_like(outputs[0]), outputs[0])
    else:
        pred = _summarise(_sample_outputs(net, theta_map, samples, X, linearized), task)
    if single:
        return Predictive(pred.mean[0], pred.variance[0], pred.mean_outputs[0])
    return pred


def predictive_linearized(net: MLP, theta_map, sample_set: SampleSet, x):
    """Mean, per-dimension variance and trace variance of the linearised outputs."""
    p = predict(net, theta_map, sample_set, x, "regression", linearized=True)
    return p.mean, p.variance, p.trace_variance


def predictive_mc(net: MLP, sample_set: SampleSet, x, task: str = "regression"):
    """Mean prediction and per-dimension output variance of the network itself."""
    theta_ref = sample_set.samples[0]
    p = predict(net, theta_ref, sample_set, x, task, linearized=False)
    return p.mean, p.variance


def ood_score(logit_variances) -> float:
    return float(np.max(logit_variances))


def map_confidence_score(logits) -> float:
    """``1 - max softmax``: larger means less confident (more likely OOD)."""
    return float(1.0 - np.max(softmax(np.asarray(logits, dtype=np.float64))))


# -- dense bound checks ----------------------------------------------------------------


@dataclass
class BoundsReport:
    variances: np.ndarray
    variances_via_svd: np.ndarray
    gamma: float
    lam: float
    lower: float
    upper: float
    ok: bool

    def to_dict(self) -> dict:
        return {"variances": self.variances.tolist(), "gamma": self.gamma, "lambda": self.lam,
                "lower": self.lower, "upper": self.upper, "ok": self.ok}


def lla_variance_bounds_check(net: MLP, theta_map, dataset: Dataset, alpha: float,
                              budget: int = DENSE_P_BUDGET, slack: float = 1e-8) -> BoundsReport:
    """Exact linearised LLA variance at every training point against its spectral bounds.

    ``gamma`` is the smallest of the ``N*O`` singular values of the dataset
    Jacobian, counting zeros when the Jacobian has fewer than ``N*O``
    nonzero singular values; ``lam`` is the largest.
    """
    _check_alpha(alpha)
    J = _dense_jacobian(net, theta_map, dataset, budget)
    O = net.output_dim
    NO, P = J.shape
    w, V = np.linalg.eigh(J.T @ J)
    cov = (V / (np.clip(w, 0, None) + alpha)) @ V.T
    variances = np.array([np.trace(J[n * O:(n + 1) * O] @ cov @ J[n * O:(n + 1) * O].T)
                          for n in range(NO // O)])

    Wl, s, _ = np.linalg.svd(J, full_matrices=True)
    sigma = np.zeros(NO)
    sigma[:s.size] = s
    # var_n = sum_i sum_j sigma_j^2 / (sigma_j^2 + alpha) * W[(n, i), j]^2
    shrink = sigma**2 / (sigma**2 + alpha)
    via_svd = np.array([np.sum((Wl[n * O:(n + 1) * O] ** 2) @ shrink) for n in range(NO // O)])

    gamma, lam = float(sigma.min()), float(sigma.max())
    lower = O * gamma**2 / (gamma**2 + alpha)
    upper = O * lam**2 / (lam**2 + alpha)
    ok = bool(np.all(variances >= lower - slack) and np.all(variances <= upper + slack))
    return BoundsReport(variances, via_svd, gamma, lam, lower, upper, ok)


@dataclass
class ErrorBoundReport:
    spectral_diff: float
    tau: float
    rank: int
    wasserstein_sq: float
    spectral_bound: float
    wasserstein_bound: float
    ok: bool

    def to_dict(self) -> dict:
        return {"spectral_diff": self.spectral_diff, "tau": self.tau, "rank": self.rank,
                "wasserstein_sq": self.wasserstein_sq, "spectral_bound": self.spectral_bound,
                "wasserstein_bound": self.wasserstein_bound, "ok": self.ok}


def _psd_sqrt(A: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def gaussian_w2_sq(mean1, cov1, mean2, cov2) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    root2 = _psd_sqrt(cov2)
    cross = _psd_sqrt(root2 @ cov1 @ root2)
    d = np.asarray(mean1) - np.asarray(mean2)
    return float(d @ d + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))


def covariance_error_check(net: MLP, theta_map, dataset: Dataset, alpha: float,
                           budget: int = DENSE_P_BUDGET, slack: float = 1e-8,
                           rank_tol: float = RANK_TOL) -> ErrorBoundReport:
    """Distance between the LLA covariance and the scaled kernel projector."""
    _check_alpha(alpha)
    J = _dense_jacobian(net, theta_map, dataset, budget)
    return covariance_error_from_ggn(J.T @ J, alpha, slack, rank_tol)


def covariance_error_from_ggn(ggn: np.ndarray, alpha: float, slack: float = 1e-8,
                              rank_tol: float = RANK_TOL) -> ErrorBoundReport:
    P = ggn.shape[0]
    w, V = np.linalg.eigh(0.5 * (ggn + ggn.T))
    w_max = max(float(w.max()), 0.0)
    nonzero = w > rank_tol * w_max if w_max > 0 else np.zeros(P, dtype=bool)
    rank = int(nonzero.sum())
    tau = float(w[nonzero].min()) if rank else math.inf
    lla_cov = (V / (np.clip(w, 0, None) + alpha)) @ V.T
    Vk = V[:, nonzero]
    kernel = np.eye(P) - Vk @ Vk.T
    proj_cov = kernel / alpha
    spectral = float(np.linalg.norm(lla_cov - proj_cov, 2))
    w2 = max(gaussian_w2_sq(np.zeros(P), lla_cov, np.zeros(P), proj_cov), 0.0)
    spectral_bound = 1.0 / (tau + alpha)
    w2_bound = rank / (tau + alpha)
    ok = spectral <= spectral_bound + slack and w2 <= w2_bound + slack
    return ErrorBoundReport(spectral, tau, rank, w2, spectral_bound, w2_bound, bool(ok))


def augmented_rank_gain(net: MLP, theta_map, dataset: Dataset, x_test, rank_tol: float = RANK_TOL) -> tuple[int, int]:
    """Ranks of ``J J^T`` without and with the rows of ``J(x_test)`` appended."""
    J = stacked_jacobian(net, theta_map, dataset.inputs)
    J_aug = np.concatenate([J, net.dense_jacobian(theta_map, np.asarray(x_test, dtype=np.float64))])

    def rank(A):
        s = np.linalg.svd(A, compute_uv=False)
        return int(np.sum(s > rank_tol * s[0])) if s.size and s[0] > 0 else 0

    return rank(J), rank(J_aug)


# -- loss preservation ----------------------------------------------------------------


@dataclass
class LossPreservation:
    scales: np.ndarray
    deltas: np.ndarray
    slope: float


def loss_preservation_check(net: MLP, theta_map, loss_projector: KernelProjector, dataset: Dataset,
                            scales=(1e-1, 1e-2, 1e-3, 1e-4), loss_kind=None, seed: int = 0,
                            direction: str = "kernel") -> LossPreservation:
    """Slope of ``log max_n |l(theta_map + s d) - l(theta_map)|`` against ``log s``.

    ``d`` is a unit vector in the loss-gradient kernel (``direction="kernel"``)
    or in its orthogonal complement (``direction="rowspace"``, the control).
    """
    if loss_kind is None:
        loss_kind = "mse" if dataset.kind == "regression" else "cross_entropy"
    if direction not in ("kernel", "rowspace"):
        raise ConfigError(f"direction must be 'kernel' or 'rowspace', got {direction!r}")
    theta_map = np.asarray(theta_map, dtype=np.float64)
    z = np.random.default_rng(seed).standard_normal(theta_map.shape[0])
    pz = loss_projector.apply(z)
    d = pz if direction == "kernel" else z - pz
    d = d / np.linalg.norm(d)
    base = loss_value(loss_kind, net.forward(theta_map, dataset.inputs), dataset.targets)
    scales = np.asarray(scales, dtype=np.float64)
    deltas = np.array([
        np.max(np.abs(loss_value(loss_kind, net.forward(theta_map + s * d, dataset.inputs), dataset.targets) - base))
        for s in scales
    ])
    slope = float(np.polyfit(np.log(scales), np.log(deltas), 1)[0])
    return LossPreservation(scales, deltas, slope)

"""Acceptance gate: one test (or group of tests) per numbered criterion.

Each check prints ``criterion N PASS|FAIL: ...`` and the terminal summary
lists every criterion once. Run ``pytest tests/test_acceptance.py -s`` to see
the lines inline.
"""

import json
import math
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from projpost.cli import main
from projpost.dataflow import Dataset, gen_ood_blob, gen_two_moons, idx_dataset, write_idx
from projpost.metrics import auroc, classification_metrics
from projpost.netcore import ArchitectureSpec, build_network, softmax
from projpost.posterior import (
    augmented_rank_gain,
    covariance_error_check,
    hutchinson_trace,
    lla_variance_bounds_check,
    loss_preservation_check,
    map_delta,
    optimal_alpha,
    predict,
    predictive_linearized,
    sample_projected,
)
from projpost.projector import (
    LOSS_GRADIENT,
    build_projector,
    dense_kernel_projector,
    kernel_containment_check,
    projector_from_matrices,
)
from projpost.trainer import TrainConfig, accuracy, train_map

from conftest import linear_net

ALPHAS = (0.1, 1.0, 10.0)
SVG_NS = "{http://www.w3.org/2000/svg}"


def monotone(residuals, rel=1e-9):
    return all(b <= a * (1 + rel) for a, b in zip(residuals, residuals[1:]))


@pytest.fixture(scope="module")
def moons_samples(moons_fit):
    """Converged projected samples on the two-moons fit (one block holding all 40 points)."""
    net, theta, ds = moons_fit
    proj = build_projector(net, theta, ds, batch_size=len(ds), t_max=5)
    return sample_projected(theta, proj, 1.0, k=30, seed=0)


@pytest.fixture(scope="module")
def digits(tmp_path_factory):
    """sklearn's 8x8 digits written as IDX files and read back: 1000 train, 797 test."""
    load_digits = pytest.importorskip("sklearn.datasets").load_digits
    raw = load_digits()
    images = np.rint(raw.images * 255.0 / 16.0).astype(np.uint8)
    root = tmp_path_factory.mktemp("digits")
    write_idx(root / "images.idx", images)
    write_idx(root / "labels.idx", raw.target.astype(np.uint8))
    train = idx_dataset(root / "images.idx", root / "labels.idx", limit=1000, name="digits")
    test = idx_dataset(root / "images.idx", root / "labels.idx", offset=1000, name="digits")
    return train, test


def test_c01_autodiff(gate):
    with gate(1, "autodiff adjoint identity and finite-difference Jacobian"):
        net, _ = build_network(ArchitectureSpec(2, (8,), 3, "tanh"), 0)
        rng = np.random.default_rng(0)
        h = 1e-5
        for _ in range(100):
            theta = rng.standard_normal(net.n_params)
            x = rng.standard_normal(2)
            u, v = rng.standard_normal(3), rng.standard_normal(net.n_params)
            jv = net.jvp(theta, x, v)
            assert abs(u @ jv - net.vjp(theta, x, u) @ v) <= 1e-10
            fd = (net.forward(theta + h * v, x) - net.forward(theta - h * v, x)) / (2 * h)
            assert np.linalg.norm(jv - fd) <= 1e-6 * np.linalg.norm(jv)


def test_c02_oracle_equivalence(gate, tiny_mlp):
    with gate(2, "alternating projections match the dense SVD kernel projector"):
        net, theta, ds = tiny_mlp
        assert 150 <= net.n_params <= 250 and len(ds) == 32 and net.output_dim == 2
        start = time.perf_counter()
        proj = build_projector(net, theta, ds, batch_size=4, t_max=200, cache=True)
        dense = dense_kernel_projector(net, theta, ds)
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = rng.standard_normal(net.n_params)
            ref = dense.apply(v)
            w, rate = proj.project(v, reference=ref)
            assert np.linalg.norm(w - ref) <= 1e-4 * np.linalg.norm(v)
            assert monotone(rate.residuals)
        assert time.perf_counter() - start < 10.0


def test_c03_analytic_rate(gate):
    with gate(3, "45-degree rate 1/2 and orthogonal blocks in one sweep"):
        line_a = np.array([[1.0, 0.0]])
        line_b = np.array([[1.0, 1.0]]) / math.sqrt(2.0)
        _, rate = projector_from_matrices([line_a, line_b], t_max=40).project(np.array([0.0, 1.0]),
                                                                              reference=np.zeros(2))
        assert abs(rate.c_hat - 0.5) <= 0.02
        e1, e2 = np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]])
        w, rate = projector_from_matrices([e1, e2], t_max=10).project(np.ones(3))
        assert np.array_equal(w, [0.0, 0.0, 1.0]) and rate.converged_at == 1


def test_c04_training_functions_preserved(gate, moons_fit, moons_samples):
    with gate(4, "projected samples keep the training-set predictions of the MAP"):
        net, theta, ds = moons_fit
        f_map = net.forward(theta, ds.inputs)
        scale = float(np.mean(np.abs(f_map))) + 1.0
        _, _, tv = predictive_linearized(net, theta, moons_samples, ds.inputs)
        assert tv.max() <= 1e-8 * scale**2
        labels = np.argmax(f_map, axis=1)
        for s in moons_samples.samples:
            f_lin = f_map + net.jvp(theta, ds.inputs, s - theta)
            assert np.array_equal(np.argmax(f_lin, axis=1), labels)
        pred = predict(net, theta, moons_samples, ds.inputs, "classification")
        assert np.array_equal(np.argmax(pred.mean, axis=1), labels)


def test_c05_gap_variance(gate, toy_fit):
    with gate(5, "gap-midpoint variance dominates train variance; augmented rank grows"):
        net, theta, ds = toy_fit
        proj = build_projector(net, theta, ds, batch_size=16, t_max=1000, cache=True)
        ss = sample_projected(theta, proj, 1.0, k=10, seed=0)
        _, _, tv_train = predictive_linearized(net, theta, ss, ds.inputs)
        _, _, tv_gap = predictive_linearized(net, theta, ss, np.array([0.0]))
        assert tv_gap > 1e3 * tv_train.max()
        r, r_aug = augmented_rank_gain(net, theta, ds, np.array([0.0]))
        assert r_aug > r


@pytest.mark.parametrize("alpha", ALPHAS)
def test_c06_lla_variance_bounds(gate, tiny_mlp, moons_fit, alpha):
    with gate(6, f"LLA train variances inside spectral bounds, alpha={alpha}"):
        for net, theta, ds in (tiny_mlp, moons_fit):
            assert net.n_params <= 500
            rep = lla_variance_bounds_check(net, theta, ds, alpha, slack=1e-8)
            assert rep.ok and np.all(rep.variances > 0)


@pytest.mark.parametrize("alpha", ALPHAS)
def test_c07_covariance_error(gate, tiny_mlp, moons_fit, alpha):
    with gate(7, f"LLA vs projected covariance: spectral and W2 bounds, alpha={alpha}"):
        for net, theta, ds in (tiny_mlp, moons_fit):
            rep = covariance_error_check(net, theta, ds, alpha, slack=1e-8)
            assert rep.spectral_diff <= rep.spectral_bound + 1e-8
            assert rep.wasserstein_sq <= rep.wasserstein_bound + 1e-8


def test_c08_prior_precision(gate, tiny_mlp):
    with gate(8, "Hutchinson rank within 5% of dense rank; both alpha conventions on the linear fixture"):
        net, theta, ds = tiny_mlp
        proj = build_projector(net, theta, ds, batch_size=4, t_max=200, cache=True)
        exact_rank = dense_kernel_projector(net, theta, ds).rank
        rank_est = net.n_params - hutchinson_trace(proj, net.n_params, 256, seed=0)
        assert abs(rank_est - exact_rank) <= 0.05 * exact_rank

        lin, _ = linear_net()
        lin_ds = Dataset(np.array([[1.0, 0.0]]), np.array([0.0]), "regression")
        lin_proj = build_projector(lin, np.array([3.0, 4.0]), lin_ds, batch_size=1, t_max=1)
        est = optimal_alpha(np.array([3.0, 4.0]), lin_proj, probes=64, seed=0)
        assert math.isclose(est.rank_over_norm, 0.04, rel_tol=1e-12)
        assert math.isclose(est.norm_over_rank, 25.0, rel_tol=1e-12)
        assert est.alpha_star == est.rank_over_norm


def test_c09_kernel_containment(gate, moons_fit, toy_fit):
    with gate(9, "output-Jacobian kernel inside loss-gradient kernel; mutual for one output"):
        net, theta, ds = moons_fit
        assert kernel_containment_check(net, theta, ds, "cross_entropy", n_vectors=50) <= 1e-8
        net, theta, ds = toy_fit
        assert kernel_containment_check(net, theta, ds, "mse", n_vectors=50) <= 1e-8
        assert kernel_containment_check(net, theta, ds, "mse", n_vectors=50, reverse=True) <= 1e-8


def test_c10_loss_preservation(gate, toy_fit):
    with gate(10, "loss change is second order along the loss kernel, first order across it"):
        net, theta, ds = toy_fit
        proj = build_projector(net, theta, ds, mode=LOSS_GRADIENT, batch_size=len(ds), t_max=3, loss_kind="mse")
        scales = (1e-1, 1e-2, 1e-3, 1e-4)
        assert 1.9 <= loss_preservation_check(net, theta, proj, ds, scales).slope <= 2.1
        assert 0.9 <= loss_preservation_check(net, theta, proj, ds, scales, direction="rowspace").slope <= 1.1


def _sweep_seconds(width: int, ds: Dataset, repeats: int = 7) -> tuple[float, int]:
    net, theta = build_network(ArchitectureSpec(10, (width, width), 2, "tanh"), 0)
    proj = build_projector(net, theta, ds, batch_size=16, t_max=1)
    v = np.random.default_rng(0).standard_normal(net.n_params)
    proj.sweep(v)
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter()
        proj.sweep(v)
        best = min(best, time.perf_counter() - start)
    return best, net.n_params


def test_c11_complexity(gate):
    with gate(11, "sweep time roughly linear in P; loss-gradient Gram is S x S"):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.standard_normal((64, 10)), rng.standard_normal((64, 2)), "regression")
        t_small, p_small = _sweep_seconds(64, ds)
        t_large, p_large = _sweep_seconds(128, ds)
        assert 3.5 <= p_large / p_small <= 4.0
        assert t_large <= 6.0 * t_small
        net, theta = build_network(ArchitectureSpec(10, (16,), 2, "tanh"), 0)
        proj = build_projector(net, theta, ds, mode=LOSS_GRADIENT, batch_size=16, loss_kind="mse")
        assert all(f.gram.shape == (16, 16) for f in proj.factors)


def _accuracy_pattern(net, theta, train, test, ss):
    for split in (train, test):
        map_probs = softmax(net.forward(theta, split.inputs))
        plain = classification_metrics(map_probs, split.targets)
        delta = predict(net, theta, map_delta(theta, 3), split.inputs, "classification")
        assert classification_metrics(delta.mean, split.targets) == plain
        post = classification_metrics(predict(net, theta, ss, split.inputs, "classification").mean, split.targets)
        if split is train:
            assert post.accuracy == plain.accuracy
        else:
            assert abs(post.accuracy - plain.accuracy) <= 0.005 + 1e-12


def test_c12_accuracy_two_moons(gate, moons_fit, moons_samples):
    with gate(12, "projected accuracy equals MAP on train, within 0.5% on test (two-moons)"):
        net, theta, ds = moons_fit
        _accuracy_pattern(net, theta, ds, gen_two_moons(200, 0.1, 1), moons_samples)


def test_c12_accuracy_digits(gate, digits):
    with gate(12, "projected accuracy equals MAP on train, within 0.5% on test (1000 digit images)"):
        train, test = digits
        net, theta0 = build_network(ArchitectureSpec(64, (16,), 10, "relu"), 0)
        cfg = TrainConfig(epochs=60, batch_size=32, learning_rate=3e-3)
        theta = train_map(net, theta0, train, "cross_entropy", cfg).theta
        assert accuracy(net, theta, train) > 0.95
        proj = build_projector(net, theta, train, batch_size=50, t_max=50, cache=True)
        est = optimal_alpha(theta, proj, probes=8, seed=0)
        ss = sample_projected(theta, proj, est.alpha_star, k=10, seed=0)
        _accuracy_pattern(net, theta, train, test, ss)


def test_c13_ood(gate, moons_fit, moons_samples):
    with gate(13, "OOD AUROC >= 0.9 against a far blob; 0.5 +- 0.02 on matched distributions"):
        net, theta, ds = moons_fit

        def scores(X):
            return predict(net, theta, moons_samples, X, "classification").variance.max(axis=1)

        s_in = scores(gen_two_moons(200, 0.1, 1).inputs)
        s_far = scores(gen_ood_blob(200, (10.0, 10.0), 1.0, 2).inputs)
        assert auroc(s_in, s_far) >= 0.9
        assert auroc(s_in, s_in) == 0.5
        a = scores(gen_two_moons(4000, 0.1, 3).inputs)
        b = scores(gen_two_moons(4000, 0.1, 4).inputs)
        assert abs(auroc(a, b) - 0.5) <= 0.02


TOY_RUN = {
    "dataset": {"name": "toy_regression", "n_per_cluster": 20, "noise_sd": 0.05, "seed": 0},
    "architecture": {"input_dim": 1, "hidden_widths": [10, 10], "output_dim": 1, "activation": "tanh"},
    "train": {"epochs": 2000, "batch_size": 16, "learning_rate": 0.01},
    "projector": {"batch_size": 16, "t_max": 1000, "cache_rows": True},
    "posterior": {"k": 10, "probes": 16},
}


def _cli(tmp_path, cfg, *commands, ckpt=None, samples=None):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    ckpt = ckpt or tmp_path / "checkpoint.bin"
    samples = samples or tmp_path / "samples.bin"
    for cmd in commands:
        args = [cmd, "--config", str(path), "--out", str(tmp_path), "--checkpoint", str(ckpt)]
        if cmd in ("eval", "ood", "plot"):
            args += ["--samples", str(samples)]
        assert main(args) == 0, cmd


def _band(svg_path):
    meta = json.loads(ET.parse(svg_path).getroot().find(SVG_NS + "metadata").text)
    return np.array(meta["grid"]), 4 * np.array(meta["sd"]), 4 * np.array(meta["train_sd"])


def test_c14_band_plot(gate, tmp_path):
    with gate(14, "plotted band widest in the gap; diagonal Laplace keeps a band on training inputs"):
        _cli(tmp_path, TOY_RUN, "train", "sample", "plot")
        grid, width, train_width = _band(tmp_path / "plot.svg")
        mid = int(np.argmin(np.abs(grid)))
        assert grid[mid] == 0.0 and np.all(width[mid] > train_width)

        diag = tmp_path / "diag"
        diag.mkdir()
        cfg = {**TOY_RUN, "posterior": {"kind": "diag_laplace", "alpha": 1.0, "k": 10, "probes": 0}}
        _cli(diag, cfg, "sample", "plot", ckpt=tmp_path / "checkpoint.bin")
        _, _, diag_train_width = _band(diag / "plot.svg")
        assert np.all(diag_train_width > 0)


MOONS_RUN = {
    "dataset": {"name": "two_moons", "n": 40, "noise_sd": 0.1, "seed": 0},
    "test_dataset": {"name": "two_moons", "n": 200, "noise_sd": 0.1, "seed": 1},
    "architecture": {"input_dim": 2, "hidden_widths": [16, 16], "output_dim": 2, "activation": "relu"},
    "train": {"epochs": 300, "batch_size": 32},
    "projector": {"batch_size": 16, "t_max": 200},
    "posterior": {"k": 10, "probes": 32},
    "ood": {"in": "test", "out": {"name": "ood_blob", "n": 200, "center": [10.0, 10.0], "sd": 1.0, "seed": 2}},
    "diagnose": {"mode": "model", "n_vectors": 2},
}


def test_c15_determinism(gate, tmp_path):
    with gate(15, "repeated full pipeline runs give byte-identical artifacts"):
        runs = []
        for name in ("a", "b"):
            moons, toy = tmp_path / name / "moons", tmp_path / name / "toy"
            moons.mkdir(parents=True)
            toy.mkdir()
            _cli(moons, MOONS_RUN, "train", "sample", "eval", "ood", "diagnose")
            _cli(toy, {**TOY_RUN, "train": {**TOY_RUN["train"], "epochs": 300}}, "train", "sample", "plot")
            runs.append({p.relative_to(tmp_path / name): p.read_bytes()
                         for p in sorted((tmp_path / name).rglob("*")) if p.is_file()})
        assert len(runs[0]) == 14 and runs[0].keys() == runs[1].keys()
        for key in runs[0]:
            assert runs[0][key] == runs[1][key], key

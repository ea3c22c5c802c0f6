"""Command-line driver: train, sample, eval, ood, diagnose, plot.

Every subcommand reads one JSON config, writes its artifact into ``--out``
(default: the config's ``out_dir``) and exits with 0 on success, 2 on a
config or input error and 3 on a numeric failure. JSON artifacts embed the
resolved config (minus ``out_dir``) and ``schema_version``.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import dataflow
from .dataflow import Dataset
from .errors import ConfigError, NumericError, OracleBudgetError, ProjPostError
from .metrics import DEFAULT_BINS, auroc, classification_metrics, regression_band_stats
from .netcore import DENSE_BUDGET, MLP, ArchitectureSpec, softmax
from .posterior import (
    AlphaConvention,
    PosteriorKind,
    SampleSet,
    diag_laplace,
    lla_dense_posterior,
    map_delta,
    map_confidence_score,
    optimal_alpha,
    predict,
    sample_loss_projected,
    sample_projected,
)
from .projector import (
    DEFAULT_BATCH,
    DEFAULT_T_MAX,
    LOSS_GRADIENT,
    MODES,
    OUTPUT_JACOBIAN,
    RANK_TOL,
    DenseProjector,
    build_projector,
    dense_rows,
    projector_from_matrices,
)
from .trainer import (
    TrainConfig,
    accuracy,
    default_loss,
    load_checkpoint,
    load_sample_file,
    save_checkpoint,
    save_sample_file,
    train_map,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
PLOT_GRID = (-1.5, 1.5, 201)
HIST_BINS = 20

DEFAULTS = {
    "architecture": {"activation": "tanh", "bias": True, "init_seed": 0},
    "train": TrainConfig().to_dict(),
    "projector": {"mode": OUTPUT_JACOBIAN, "batch_size": DEFAULT_BATCH, "t_max": DEFAULT_T_MAX,
                  "residual_tol": None, "rank_tol": RANK_TOL, "partition_seed": 0, "cache_rows": False},
    "posterior": {"kind": "projected", "alpha": "auto", "k": 30, "seed": 0,
                  "alpha_convention": AlphaConvention.RANK_OVER_NORM.value, "probes": 256, "probe_seed": 0},
    "metrics": {"bins": DEFAULT_BINS},
    "diagnose": {"mode": "model", "n_vectors": 5, "seed": 0},
    "ood": {"in": "train", "out": None},
    "test_dataset": None,
}

GENERATORS = {
    "toy_regression": (dataflow.gen_toy_regression, ("n_per_cluster", "noise_sd", "seed")),
    "two_moons": (dataflow.gen_two_moons, ("n", "noise_sd", "seed")),
    "ood_blob": (dataflow.gen_ood_blob, ("n", "center", "sd", "seed", "n_classes")),
}


# -- config ----------------------------------------------------------------------------


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _check_dataset_spec(spec, where: str):
    if not isinstance(spec, dict) or "name" not in spec:
        raise ConfigError(f"{where} needs a dataset object with a 'name'")
    name = spec["name"]
    if name in GENERATORS:
        return
    paths = {"idx": ("images", "labels"), "csv": ("path",)}.get(name)
    if paths is None:
        raise ConfigError(f"{where}: unknown dataset {name!r}")
    for key in paths:
        if key not in spec:
            raise ConfigError(f"{where}: {name} dataset needs {key!r}")
        if not Path(spec[key]).is_file():
            raise ConfigError(f"{where}: file not found: {spec[key]}")


def resolve_config(raw: dict, seed_override: int | None = None, stage: str | None = None) -> dict:
    """Fill defaults, check referenced files and apply the ``--seed`` override to ``stage``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key in ("dataset", "architecture"):
        if key not in raw:
            raise ConfigError(f"config lacks the {key!r} section")
    cfg = _merge(DEFAULTS, raw)
    _check_dataset_spec(cfg["dataset"], "dataset")
    if cfg["test_dataset"] is not None:
        _check_dataset_spec(cfg["test_dataset"], "test_dataset")
    if isinstance(cfg["ood"]["out"], dict):
        _check_dataset_spec(cfg["ood"]["out"], "ood.out")
    if isinstance(cfg["ood"]["in"], dict):
        _check_dataset_spec(cfg["ood"]["in"], "ood.in")
    if cfg["projector"]["mode"] not in MODES:
        raise ConfigError(f"projector.mode must be one of {MODES}")
    PosteriorKind(cfg["posterior"]["kind"])
    AlphaConvention(cfg["posterior"]["alpha_convention"])
    alpha = cfg["posterior"]["alpha"]
    if alpha != "auto" and not (isinstance(alpha, (int, float)) and alpha > 0):
        raise ConfigError("posterior.alpha must be 'auto' or a positive number")
    if seed_override is not None:
        section = {"train": "train", "sample": "posterior", "diagnose": "diagnose"}.get(stage)
        if section is not None:
            cfg[section]["seed"] = int(seed_override)
    return cfg


def _public_config(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k != "out_dir"}


def _build_dataset(spec: dict) -> Dataset:
    spec = dict(spec)
    name = spec.pop("name")
    degrees = spec.pop("rotate_degrees", 0)
    if name in GENERATORS:
        fn, allowed = GENERATORS[name]
        unknown = set(spec) - set(allowed)
        if unknown:
            raise ConfigError(f"{name}: unknown parameters {sorted(unknown)}")
        try:
            ds = fn(**spec)
        except TypeError as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    elif name == "idx":
        ds = dataflow.idx_dataset(spec["images"], spec["labels"], spec.get("limit"), spec.get("offset", 0),
                                  spec.get("n_classes", 10), spec.get("label", "idx"))
    else:
        ds = dataflow.load_csv(spec["path"], spec["input_dim"], spec["output_dim"], spec["kind"])
    return dataflow.rotate_square_images(ds, degrees) if degrees else ds


def _dataset_for_role(cfg: dict, role) -> Dataset:
    if isinstance(role, dict):
        return _build_dataset(role)
    if role == "train":
        return _build_dataset(cfg["dataset"])
    if role == "test":
        if cfg["test_dataset"] is None:
            raise ConfigError("split 'test' needs a test_dataset section")
        return _build_dataset(cfg["test_dataset"])
    raise ConfigError(f"unknown dataset role {role!r}")


def _arch(cfg: dict) -> ArchitectureSpec:
    a = {k: v for k, v in cfg["architecture"].items() if k != "init_seed"}
    return ArchitectureSpec.from_dict(a)


def _load_model(cfg: dict, checkpoint) -> tuple[MLP, np.ndarray]:
    arch, theta = load_checkpoint(checkpoint)
    if arch != _arch(cfg):
        raise ConfigError("checkpoint architecture does not match the config")
    return MLP(arch), theta


def _load_samples(path, arch: ArchitectureSpec) -> SampleSet:
    s_arch, samples, meta = load_sample_file(path)
    if s_arch != arch:
        raise ConfigError("sample file architecture does not match the checkpoint")
    try:
        alpha = meta.get("alpha")
        return SampleSet(samples, math.inf if alpha is None else alpha, meta["kind"], meta.get("seed", 0), meta)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed sample metadata ({exc})") from exc


# -- output --------------------------------------------------------------------------


def _finite_or_none(x):
    return x if isinstance(x, str) or x is None or math.isfinite(x) else None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _finite_or_none(float(obj))
    return obj


def _dump(payload: dict, cfg: dict) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "config": _public_config(cfg), **payload}
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _out_dir(args, cfg: dict) -> Path:
    out = args.out if args.out is not None else cfg.get("out_dir")
    if out is None:
        raise ConfigError("no output directory: pass --out or set out_dir")
    return Path(out)


def _write_outputs(out: Path, files: dict):
    """Write all artifacts at the end so a failed run leaves nothing behind."""
    out.mkdir(parents=True, exist_ok=True)
    for name, content in files.items():
        path = out / name if not isinstance(name, Path) else name
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content, encoding="utf-8")


# -- subcommands ---------------------------------------------------------------------


def cmd_train(cfg: dict, args) -> None:
    out = _out_dir(args, cfg)
    arch = _arch(cfg)
    dataset = _build_dataset(cfg["dataset"])
    tcfg = TrainConfig.from_dict(cfg["train"])
    net = MLP(arch)
    theta0 = net.init_params(int(cfg["architecture"]["init_seed"]))
    result = train_map(net, theta0, dataset, default_loss(dataset), tcfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    log = {"loss_trace": result.loss_trace, "initial_loss": result.loss_trace[0],
           "final_loss": result.loss_trace[-1], "n_params": net.n_params, "epochs": tcfg.epochs}
    if dataset.kind == "classification":
        log["train_accuracy"] = accuracy(net, result.theta, dataset)
    _write_outputs(out, {"train_log.json": _dump(log, cfg)})
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, arch, result.theta)


def _kernel_projector(cfg: dict, net: MLP, theta, dataset: Dataset, mode: str):
    p = cfg["projector"]
    return build_projector(net, theta, dataset, mode=mode, batch_size=p["batch_size"], seed=p["partition_seed"],
                           t_max=p["t_max"], residual_tol=p["residual_tol"], rank_tol=p["rank_tol"],
                           loss_kind=default_loss(dataset), cache=p["cache_rows"])


def cmd_sample(cfg: dict, args) -> None:
    out = _out_dir(args, cfg)
    net, theta = _load_model(cfg, _require(args.checkpoint, "--checkpoint"))
    dataset = _build_dataset(cfg["dataset"])
    post = cfg["posterior"]
    kind = PosteriorKind(post["kind"])
    k, seed = int(post["k"]), int(post["seed"])
    report = {"kind": kind.value, "k": k}

    projector = None
    if kind in (PosteriorKind.PROJECTED, PosteriorKind.LOSS_PROJECTED):
        mode = LOSS_GRADIENT if kind is PosteriorKind.LOSS_PROJECTED else cfg["projector"]["mode"]
        projector = _kernel_projector(cfg, net, theta, dataset, mode)
    estimate = None
    if kind is not PosteriorKind.MAP_DELTA and (post["alpha"] == "auto" or post["probes"] > 0):
        if projector is None:
            projector = _kernel_projector(cfg, net, theta, dataset, cfg["projector"]["mode"])
        estimate = optimal_alpha(theta, projector, post["probes"], post["probe_seed"], post["alpha_convention"])
        report.update(estimate.to_dict())
        report["hutchinson_trace"] = estimate.trace_estimate

    if kind is PosteriorKind.MAP_DELTA:
        alpha = math.inf
        report["alpha_source"] = "none"
    elif post["alpha"] == "auto":
        alpha = estimate.alpha_star
        report["alpha_source"] = "auto"
    else:
        alpha = float(post["alpha"])
        report["alpha_source"] = "override"
    report["alpha_used"] = alpha

    if kind is PosteriorKind.PROJECTED:
        ss = sample_projected(theta, projector, alpha, k, seed, threads=args.threads)
    elif kind is PosteriorKind.LOSS_PROJECTED:
        ss = sample_loss_projected(theta, projector, alpha, k, seed, threads=args.threads)
    elif kind is PosteriorKind.LLA_DENSE:
        ss = lla_dense_posterior(net, theta, dataset, alpha).sample(k, seed)
    elif kind is PosteriorKind.DIAG_LAPLACE:
        ss = diag_laplace(net, theta, dataset, alpha).sample(k, seed)
    else:
        ss = map_delta(theta, k)

    meta = _jsonable(ss.to_meta())
    path = Path(args.samples) if args.samples else out / "samples.bin"
    _write_outputs(out, {"alpha_report.json": _dump(report, cfg)})
    path.parent.mkdir(parents=True, exist_ok=True)
    save_sample_file(path, net.spec, ss.samples, meta)


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"this subcommand needs {flag}")
    return value


def _variance_summary(tv: np.ndarray) -> dict:
    return {"max": float(tv.max()), "mean": math.fsum(tv) / tv.size, "min": float(tv.min())}


def _split_metrics(net: MLP, theta, ss: SampleSet, dataset: Dataset, bins: int) -> tuple[dict, dict, np.ndarray]:
    """Metrics of the sampled predictive and of the plain MAP predictor."""
    if dataset.kind == "classification":
        pred = predict(net, theta, ss, dataset.inputs, "classification")
        post = classification_metrics(pred.mean, dataset.targets, bins).to_dict()
        plain = classification_metrics(softmax(net.forward(theta, dataset.inputs)), dataset.targets, bins).to_dict()
    else:
        pred = predict(net, theta, ss, dataset.inputs, "regression")
        rmse, sd = regression_band_stats(pred.mean, pred.trace_variance, dataset.targets)
        post = {"rmse": rmse, "mean_sd": sd, "n": len(dataset)}
        map_out = net.forward(theta, dataset.inputs)
        rmse0, _ = regression_band_stats(map_out, np.zeros(map_out.size), dataset.targets)
        plain = {"rmse": rmse0, "mean_sd": 0.0, "n": len(dataset)}
    return post, plain, pred.trace_variance


def cmd_eval(cfg: dict, args) -> None:
    out = _out_dir(args, cfg)
    net, theta = _load_model(cfg, _require(args.checkpoint, "--checkpoint"))
    ss = _load_samples(_require(args.samples, "--samples"), net.spec)
    dataset = _dataset_for_role(cfg, args.split)
    post, plain, tv = _split_metrics(net, theta, ss, dataset, cfg["metrics"]["bins"])
    report = {"split": args.split, "kind": ss.kind.value, "k": ss.k, "metrics": post, "map_metrics": plain,
              "trace_variance": _variance_summary(tv)}
    _write_outputs(out, {"metrics.json": _dump(report, cfg)})


def _ood_scores(net: MLP, theta, ss: SampleSet, X) -> tuple[np.ndarray, str]:
    if ss.kind is PosteriorKind.MAP_DELTA:
        logits = net.forward(theta, X)
        return np.array([map_confidence_score(row) for row in logits]), "one_minus_max_softmax"
    pred = predict(net, theta, ss, X, "classification")
    return pred.variance.max(axis=1), "max_logit_variance"


def _histogram(scores: np.ndarray, edges: np.ndarray) -> dict:
    counts, _ = np.histogram(scores, bins=edges)
    return {"counts": counts.tolist(), "edges": edges.tolist()}


def cmd_ood(cfg: dict, args) -> None:
    out = _out_dir(args, cfg)
    net, theta = _load_model(cfg, _require(args.checkpoint, "--checkpoint"))
    ss = _load_samples(_require(args.samples, "--samples"), net.spec)
    if cfg["ood"]["out"] is None:
        raise ConfigError("ood needs an 'ood.out' dataset")
    ds_in = _dataset_for_role(cfg, cfg["ood"]["in"])
    ds_out = _dataset_for_role(cfg, cfg["ood"]["out"])
    s_in, score = _ood_scores(net, theta, ss, ds_in.inputs)
    s_out, _ = _ood_scores(net, theta, ss, ds_out.inputs)
    lo, hi = float(min(s_in.min(), s_out.min())), float(max(s_in.max(), s_out.max()))
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, HIST_BINS + 1)
    report = {"auroc": auroc(s_in, s_out), "score": score, "kind": ss.kind.value,
              "in": {"name": ds_in.name, "n": len(ds_in), "histogram": _histogram(s_in, edges)},
              "out": {"name": ds_out.name, "n": len(ds_out), "histogram": _histogram(s_out, edges)}}
    _write_outputs(out, {"ood.json": _dump(report, cfg)})


SYNTHETIC_BLOCKS = {
    # two coordinate blocks in R^3: orthogonal row spaces, kernel spanned by e3
    "orthogonal": ([np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]])], np.ones(3)),
    # two lines at 45 degrees in R^2: trivial kernel, rate cos^2(pi/4) = 1/2
    "angle45": ([np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]) / math.sqrt(2.0)], np.array([0.0, 1.0])),
}


def cmd_diagnose(cfg: dict, args) -> None:
    out = _out_dir(args, cfg)
    diag, p = cfg["diagnose"], cfg["projector"]
    mode = diag["mode"]
    rng = np.random.default_rng(diag["seed"])
    if mode in SYNTHETIC_BLOCKS:
        rows, v = SYNTHETIC_BLOCKS[mode]
        projector = projector_from_matrices(rows, t_max=p["t_max"], residual_tol=p["residual_tol"],
                                            rank_tol=p["rank_tol"])
        oracle = DenseProjector.from_rows(np.concatenate(rows), p["rank_tol"])
        vectors = [v]
    elif mode == "model":
        net, theta = _load_model(cfg, _require(args.checkpoint, "--checkpoint"))
        dataset = _build_dataset(cfg["dataset"])
        projector = _kernel_projector(cfg, net, theta, dataset, p["mode"])
        try:
            rows = dense_rows(net, theta, dataset, p["mode"], budget=DENSE_BUDGET)
            oracle = DenseProjector.from_rows(rows, p["rank_tol"], gram_matched=True)
        except OracleBudgetError:
            oracle = None
        vectors = list(rng.standard_normal((diag["n_vectors"], net.n_params)))
    else:
        raise ConfigError(f"diagnose.mode must be 'model', 'orthogonal' or 'angle45', got {mode!r}")

    runs = []
    for v in vectors:
        reference = oracle.apply(v) if oracle is not None else None
        w, rate = projector.project(v, reference=reference)
        run = rate.to_dict()
        run["residual_kind"] = "oracle_distance" if reference is not None else "displacement"
        if reference is not None:
            run["oracle_discrepancy"] = float(np.linalg.norm(w - reference) / max(np.linalg.norm(v), 1e-300))
        runs.append(run)
    c_hats = [r["c_hat"] for r in runs]
    report = {"mode": mode, "runs": runs, "c_hat": float(np.median(c_hats)),
              "oracle": None if oracle is None else {"rank": oracle.rank, "kernel_dim": oracle.trace},
              "max_oracle_discrepancy": max((r.get("oracle_discrepancy", -1.0) for r in runs), default=None)
              if oracle is not None else None}
    _write_outputs(out, {"diagnose.json": _dump(report, cfg)})


def _fmt(x: float) -> str:
    return f"{x:.3f}"


def render_band_svg(grid, mean, sd, train_x, train_y, train_sd, title: str = "") -> str:
    """SVG of the mean curve, the mean +- 2 sd band and the training points.

    The exact plotted numbers are embedded as JSON in ``<metadata>``.
    """
    W, H, pad = 640, 400, 40
    grid, mean, sd = (np.asarray(a, dtype=np.float64) for a in (grid, mean, sd))
    lower, upper = mean - 2 * sd, mean + 2 * sd
    ys = np.concatenate([lower, upper, np.asarray(train_y, dtype=np.float64)])
    y_lo, y_hi = float(ys.min()), float(ys.max())
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    x_lo, x_hi = float(grid[0]), float(grid[-1])

    def px(x):
        return pad + (np.asarray(x) - x_lo) / (x_hi - x_lo) * (W - 2 * pad)

    def py(y):
        return H - pad - (np.asarray(y) - y_lo) / (y_hi - y_lo) * (H - 2 * pad)

    def path(xs, ys_):
        pts = [f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px(xs), py(ys_))]
        return "M" + " L".join(pts)

    band = path(np.concatenate([grid, grid[::-1]]), np.concatenate([upper, lower[::-1]])) + " Z"
    meta = json.dumps({"grid": grid.tolist(), "mean": mean.tolist(), "sd": sd.tolist(),
                       "train_x": np.asarray(train_x).tolist(), "train_sd": np.asarray(train_sd).tolist()},
                      sort_keys=True)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<title>{escape(title)}</title>",
        f"<metadata>{escape(meta)}</metadata>",
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<path id="band" d="{band}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>',
        f'<path id="upper" d="{path(grid, upper)}" fill="none" stroke="#3182bd" stroke-width="0.5"/>',
        f'<path id="lower" d="{path(grid, lower)}" fill="none" stroke="#3182bd" stroke-width="0.5"/>',
        f'<path id="mean" d="{path(grid, mean)}" fill="none" stroke="#08519c" stroke-width="1.5"/>',
    ]
    for x, y in zip(px(train_x), py(train_y)):
        lines.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="2.5" fill="black"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_plot(cfg: dict, args) -> None:
    out = _out_dir(args, cfg)
    net, theta = _load_model(cfg, _require(args.checkpoint, "--checkpoint"))
    ss = _load_samples(_require(args.samples, "--samples"), net.spec)
    dataset = _build_dataset(cfg["dataset"])
    if net.input_dim != 1 or net.output_dim != 1 or dataset.kind != "regression":
        raise ConfigError("plot needs a 1-D regression model and dataset")
    lo, hi, n = PLOT_GRID
    grid = np.linspace(lo, hi, n)
    on_grid = predict(net, theta, ss, grid[:, None], "regression")
    on_train = predict(net, theta, ss, dataset.inputs, "regression")
    svg = render_band_svg(grid, on_grid.mean[:, 0], np.sqrt(on_grid.variance[:, 0]),
                          dataset.inputs[:, 0], dataset.targets[:, 0], np.sqrt(on_train.variance[:, 0]),
                          title=f"{ss.kind.value} predictive, k={ss.k}")
    _write_outputs(out, {"plot.svg": svg})


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "ood": cmd_ood,
            "diagnose": cmd_diagnose, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="projpost", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--checkpoint", help="parameter checkpoint (written by train, read by the rest)")
        p.add_argument("--samples", help="sample file (written by sample, read by eval/ood/plot)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for projection")
        p.add_argument("--seed", type=int, help="override the seed of this stage")
        if name == "eval":
            p.add_argument("--split", choices=("train", "test"), default="train")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg = resolve_config(raw, args.seed, args.command)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        COMMANDS[args.command](cfg, args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ProjPostError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

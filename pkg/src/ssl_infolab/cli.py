"""Command-line entry point and experiment orchestration.

Subcommands: entropy, train, bound, validate-gaussianity, pairwise-dist,
gmm-collapse, compare, track-entropy.  Every subcommand exits 0 on success
and writes a machine-readable error JSON to stderr on failure.  Exit codes:
0 ok, 2 config error, 3 numerical failure, 4 acceptance-check failure.

Outputs are deterministic given the config and seed: no timestamps, floats
serialized with shortest round-trip repr, JSON keys sorted.  Multi-seed
comparisons may fan out across worker processes (capped by the
SSL_INFOLAB_THREADS environment variable) and are joined in seed order.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ssl_infolab.config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    parse_config,
    serialize_config,
    with_objective,
)
from ssl_infolab.datagen import (
    load_pairs_csv,
    load_points_csv,
    random_prototype_dataset,
    save_points_csv,
    two_moons,
)
from ssl_infolab.entropy import mc_entropy, moment_upper_bound, pairwise_bound
from ssl_infolab.gaussians import GaussianMixture
from ssl_infolab.genbound import BoundInputs, evaluate_bound, make_ensemble
from ssl_infolab.losses import OBJECTIVE_NAMES
from ssl_infolab.network import PwaNetwork, init_network
from ssl_infolab.stats import (
    GmmLabState,
    NumericalAbort,
    gaussianity_sweep,
    gmm_collapse_run,
    pairwise_distance_histogram,
)
from ssl_infolab.trainer import (
    PairDataset,
    TrainingAborted,
    linear_probe,
    pairs_from_points,
    pairs_from_prototypes,
    train_ssl,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_ACCEPTANCE = 4


class AcceptanceCheckFailure(RuntimeError):
    pass


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": {"kind": kind, "message": message}},
                                sort_keys=True) + "\n")


def derive_seeds(global_seed: int, index: int, n: int) -> list[int]:
    """Deterministic child seeds for run ``index`` of an experiment."""
    ss = np.random.SeedSequence(entropy=int(global_seed), spawn_key=(int(index),))
    return [int(v) for v in ss.generate_state(n, dtype=np.uint64) >> np.uint64(1)]


# ---------------------------------------------------------------------------
# Data and model assembly from a config.
# ---------------------------------------------------------------------------

def build_points(cfg: ExperimentConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    d = cfg.data
    if d.kind == "two_moons":
        pts, labels = two_moons(d.n, d.noise, seed)
        return d.input_scale * pts, labels
    if d.kind == "csv":
        pts, labels = load_points_csv(d.path)
        return d.input_scale * pts, labels
    ds = random_prototype_dataset(d.n_prototypes, d.dim, seed, rank=d.rank,
                                  n_classes=d.n_classes,
                                  separation_floor=d.separation_floor,
                                  noise_scale=d.noise_scale, spread=d.spread)
    from ssl_infolab.datagen import sample_pairs
    x, _, labels = sample_pairs(ds, d.n, seed)
    return x, labels


def build_pairs(cfg: ExperimentConfig, seed: int) -> PairDataset:
    d = cfg.data
    if d.kind == "prototypes":
        ds = random_prototype_dataset(d.n_prototypes, d.dim, seed, rank=d.rank,
                                      n_classes=d.n_classes,
                                      separation_floor=d.separation_floor,
                                      noise_scale=d.noise_scale, spread=d.spread)
        return pairs_from_prototypes(ds, d.n, seed, probe_size=cfg.train.probe_batch_size)
    pts, labels = build_points(cfg, seed)
    return pairs_from_points(pts, labels, d.view_noise, seed,
                             probe_size=cfg.train.probe_batch_size)


def build_network(cfg: ExperimentConfig, input_dim: int, seed: int) -> PwaNetwork:
    return init_network(cfg.network.dims(input_dim), cfg.network.activation,
                        seed=seed, leaky_slope=cfg.network.leaky_slope)


def run_one_training(cfg: ExperimentConfig, objective_name: str, index: int):
    """One seeded end-to-end run: data, net, SSL training, linear probe."""
    data_seed, net_seed, train_seed, probe_tr_seed, probe_te_seed = \
        derive_seeds(cfg.seed, index, 5)
    pairs = build_pairs(cfg, data_seed)
    net = build_network(cfg, pairs.dim, net_seed)
    import dataclasses
    tcfg = dataclasses.replace(cfg.train, seed=train_seed)
    trained, trace = train_ssl(net, pairs, objective_name, cfg.objective, tcfg)
    probe_train = build_points(cfg, probe_tr_seed)
    probe_test = build_points(cfg, probe_te_seed)
    accuracy = linear_probe(trained, probe_train[0], probe_train[1],
                            probe_test[0], probe_test[1], ridge=cfg.bound.ridge)
    return trained, trace, accuracy


def _write_run_outputs(run_dir: Path, trained: PwaNetwork, trace, report: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    trace.write_csv(run_dir / "trace.csv")
    (run_dir / "checkpoint.json").write_text(trained.to_json())
    (run_dir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Comparison and entropy tracking.
# ---------------------------------------------------------------------------

@dataclass
class ComparisonTable:
    """Per-method linear-probe accuracy, mean and spread over seeds."""

    rows: list  # (method, mean_accuracy, std_accuracy, n_seeds)

    def csv_text(self) -> str:
        lines = ["method,mean_accuracy,std_accuracy,n_seeds"]
        for method, mean, std, n in self.rows:
            lines.append(f"{method},{mean!r},{std!r},{n}")
        return "\n".join(lines) + "\n"

    def mean_of(self, method: str) -> float:
        for row in self.rows:
            if row[0] == method:
                return row[1]
        raise KeyError(method)


def _compare_worker(args: tuple) -> tuple:
    cfg_text, method, index, out_dir = args
    cfg = parse_config(cfg_text)
    try:
        trained, trace, accuracy = run_one_training(cfg, method, index)
    except TrainingAborted as exc:
        return (method, index, None, f"aborted at step {exc.step}")
    if out_dir:
        run_dir = Path(out_dir) / f"compare-{method}" / str(index)
        _write_run_outputs(run_dir, trained, trace,
                           {"method": method, "seed_index": index, "accuracy": accuracy})
    return (method, index, accuracy, "")


def _pmap(fn, items):
    threads = int(os.environ.get("SSL_INFOLAB_THREADS", "1"))
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_comparison(cfg: ExperimentConfig, methods: list, n_seeds: int,
                   out_dir: str = "") -> ComparisonTable:
    """Train each method over the same seeded data, probe, and tabulate."""
    if n_seeds < 3:
        raise ConfigError("comparison tables need n_seeds >= 3")
    unknown = [m for m in methods if m not in OBJECTIVE_NAMES]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}")
    cfg_text = serialize_config(cfg)
    jobs = [(cfg_text, m, i, out_dir) for m in methods for i in range(n_seeds)]
    results = _pmap(_compare_worker, jobs)
    rows = []
    for method in methods:
        accs = [acc for (m, _i, acc, _msg) in results if m == method and acc is not None]
        failed = sum(1 for (m, _i, acc, _msg) in results if m == method and acc is None)
        if failed:
            # Any aborted run poisons the row; the table is still emitted.
            rows.append((method + ":failed", float("nan"), float("nan"), len(accs)))
            sys.stderr.write(f"warning: {failed} {method} run(s) aborted\n")
        else:
            rows.append((method, float(np.mean(accs)), float(np.std(accs)), len(accs)))
    return ComparisonTable(rows)


def run_entropy_tracking(cfg: ExperimentConfig, methods: list, n_steps: int,
                         out_dir: str) -> dict:
    """One trace per method on identical data and seeds, stopped at n_steps."""
    import dataclasses
    paths = {}
    for method in methods:
        if method not in OBJECTIVE_NAMES:
            raise ConfigError(f"unknown method {method!r}")
        data_seed, net_seed, train_seed = derive_seeds(cfg.seed, 0, 3)
        pairs = build_pairs(cfg, data_seed)
        net = build_network(cfg, pairs.dim, net_seed)
        cadence = max(1, n_steps // 20) if n_steps > 0 else 1
        tcfg = dataclasses.replace(cfg.train, seed=train_seed, max_steps=n_steps,
                                   diagnostics_every=cadence)
        trained, trace = train_ssl(net, pairs, method, cfg.objective, tcfg)
        run_dir = Path(out_dir) / f"track-entropy-{method}" / str(cfg.seed)
        _write_run_outputs(run_dir, trained, trace,
                           {"method": method, "n_steps": n_steps, "seed": cfg.seed})
        paths[method] = str(run_dir / "trace.csv")
    return paths


# ---------------------------------------------------------------------------
# Subcommand implementations.
# ---------------------------------------------------------------------------

def _cmd_entropy(args) -> int:
    mix = GaussianMixture.from_json(Path(args.mixture).read_text())
    rows = ["estimator,value_nats,std_error,n_samples"]
    mc = mc_entropy(mix, args.n, args.seed)
    rows.append(f"monte_carlo,{mc.value!r},{mc.std_error!r},{mc.n_samples}")
    mom = moment_upper_bound(mix)
    rows.append(f"moment_upper,{mom.value!r},,")
    for side in ("lower", "upper"):
        est = pairwise_bound(mix, side)
        rows.append(f"pairwise_{side},{est.value!r},,")
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_config(args.config, dict(args.set or {}))
    out = Path(args.out or cfg.out_dir)
    trained, trace, accuracy = run_one_training(cfg, cfg.objective_name, 0)
    run_dir = out / "train" / str(cfg.seed)
    _write_run_outputs(run_dir, trained, trace,
                       {"objective": cfg.objective_name, "seed": cfg.seed,
                        "accuracy": accuracy,
                        "final_step": int(trace.records[-1].step)})
    sys.stdout.write(str(run_dir) + "\n")
    return EXIT_OK


def _cmd_bound(args) -> int:
    lx, ly = load_points_csv(args.labeled)
    ux, ux2, uy = load_pairs_csv(args.unlabeled_pairs)
    net = PwaNetwork.from_json(Path(args.checkpoint).read_text())
    test_x = test_y = None
    if args.test:
        test_x, test_y = load_points_csv(args.test)
    ensemble, provenance = make_ensemble(net, size=args.ensemble_size, seed=args.seed)
    inputs = BoundInputs(labeled_x=lx, labeled_y=ly, unlabeled_x=ux, unlabeled_x2=ux2,
                         unlabeled_y=uy, encoder=net, delta=args.delta,
                         ensemble=tuple(ensemble), test_x=test_x, test_y=test_y,
                         n_sign_draws=args.n_sign_draws, seed=args.seed)
    report = evaluate_bound(inputs, provenance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bound_report.json").write_text(report.to_json() + "\n")
    (out / "bound_summary.csv").write_text(
        report.csv_header() + "\n" + report.csv_line() + "\n")
    sys.stdout.write(str(out / "bound_report.json") + "\n")
    return EXIT_OK


def _cmd_validate_gaussianity(args) -> int:
    cfg = load_config(args.config, dict(args.set or {}))
    grid = [float(tok) for tok in args.noise_grid.split(",") if tok.strip()]
    d = cfg.data
    ds = random_prototype_dataset(d.n_prototypes, d.dim, cfg.seed, rank=d.rank,
                                  n_classes=d.n_classes,
                                  separation_floor=d.separation_floor,
                                  noise_scale=d.noise_scale, spread=d.spread)
    if args.checkpoint:
        net = PwaNetwork.from_json(Path(args.checkpoint).read_text())
    else:
        net = build_network(cfg, d.dim, derive_seeds(cfg.seed, 0, 2)[1])
    reports = gaussianity_sweep(net, ds, grid, n_per_point=args.n_per_point,
                                seed=cfg.seed)
    lines = ["noise_scale,p_value,prototype,reject_at_99,degenerate"]
    for r in reports:
        lines.append(f"{r.noise_scale!r},{r.omnibus_p!r},{r.prototype_index},"
                     f"{int(r.reject_at_99)},{int(r.degenerate)}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_pairwise_dist(args) -> int:
    pts, _labels = load_points_csv(args.points)
    counts, edges, dmin, dmed = pairwise_distance_histogram(pts, args.bins)
    lines = ["bin_left,count"]
    for left, c in zip(edges[:-1], counts):
        lines.append(f"{float(left)!r},{int(c)}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("\n".join(lines) + "\n")
    summary = {"min_distance": dmin, "median_distance": dmed,
               "n_pairs": int(np.sum(counts))}
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, sort_keys=True) + "\n")
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_gmm_collapse(args) -> int:
    cfg = load_config(args.config, dict(args.set or {}))
    pts, _labels = build_points(cfg, derive_seeds(cfg.seed, 0, 1)[0])
    lab = GmmLabState(inputs=pts, n_centroids=args.n_centroids,
                      lr_inputs=args.lr_inputs, lr_params=args.lr_params,
                      cov_mode=args.mode, sigma_fixed=args.sigma_fixed)
    trace = gmm_collapse_run(lab, args.steps, cfg.seed)
    lines = ["step,entropy,mean_log_likelihood"]
    for rec in trace:
        lines.append(f"{rec.step},{rec.centroid_entropy!r},{rec.mean_log_likelihood!r}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_compare(args) -> int:
    cfg = load_config(args.config, dict(args.set or {}))
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    out = Path(args.out or cfg.out_dir)
    table = run_comparison(cfg, methods, args.n_seeds, str(out))
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.csv").write_text(table.csv_text())
    sys.stdout.write(table.csv_text())
    if args.assert_order:
        left, right = [s.strip() for s in args.assert_order.split(">=")]
        if not table.mean_of(left) >= table.mean_of(right):
            raise AcceptanceCheckFailure(
                f"ordering {left} >= {right} violated: "
                f"{table.mean_of(left):.4f} < {table.mean_of(right):.4f}")
    return EXIT_OK


def _cmd_track_entropy(args) -> int:
    cfg = load_config(args.config, dict(args.set or {}))
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    out = args.out or cfg.out_dir
    paths = run_entropy_tracking(cfg, methods, args.n_steps, out)
    sys.stdout.write(json.dumps(paths, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_make_data(args) -> int:
    cfg = load_config(args.config, dict(args.set or {}))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    if args.pairs:
        from ssl_infolab.datagen import save_pairs_csv
        pairs = build_pairs(cfg, cfg.seed)
        save_pairs_csv(args.out, pairs.x, pairs.x_prime, pairs.labels)
    else:
        pts, labels = build_points(cfg, cfg.seed)
        save_points_csv(args.out, pts, labels)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing.
# ---------------------------------------------------------------------------

class _KeyValue(argparse.Action):
    def __call__(self, parser, namespace, value, option_string=None):
        if "=" not in value:
            raise argparse.ArgumentError(self, f"expected section.key=value, got {value!r}")
        key, val = value.split("=", 1)
        items = getattr(namespace, self.dest) or []
        items.append((key, val))
        setattr(namespace, self.dest, items)


def _add_config_args(p):
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--set", action=_KeyValue, metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable; wins over the file)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssl-infolab",
                                     description="entropy-regularized SSL laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("entropy", help="estimate mixture entropy from a JSON mixture")
    p.add_argument("--mixture", required=True)
    p.add_argument("--n", type=int, default=100000, help="Monte-Carlo sample count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="", help="CSV path (default: stdout)")
    p.set_defaults(fn=_cmd_entropy)

    p = sub.add_parser("train", help="SSL pre-training run")
    _add_config_args(p)
    p.add_argument("--out", default="", help="output directory (default: config out_dir)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("bound", help="evaluate the generalization bound")
    p.add_argument("--labeled", required=True, help="labeled points CSV")
    p.add_argument("--unlabeled-pairs", required=True, help="view-pair CSV")
    p.add_argument("--checkpoint", required=True, help="network checkpoint JSON")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--test", default="", help="held-out labeled CSV for measured loss")
    p.add_argument("--ensemble-size", type=int, default=8)
    p.add_argument("--n-sign-draws", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bound_out")
    p.set_defaults(fn=_cmd_bound)

    p = sub.add_parser("validate-gaussianity", help="normality sweep over input noise")
    _add_config_args(p)
    p.add_argument("--noise-grid", required=True, help="comma-separated sigma grid")
    p.add_argument("--n-per-point", type=int, default=512)
    p.add_argument("--checkpoint", default="", help="optional trained network JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_validate_gaussianity)

    p = sub.add_parser("pairwise-dist", help="pairwise-distance histogram of a point set")
    p.add_argument("--points", required=True, help="points CSV")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", default="")
    p.set_defaults(fn=_cmd_pairwise_dist)

    p = sub.add_parser("gmm-collapse", help="GMM collapse laboratory run")
    _add_config_args(p)
    p.add_argument("--mode", choices=("full", "fixed_small"), default="full")
    p.add_argument("--lr-inputs", type=float, default=0.0)
    p.add_argument("--lr-params", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--n-centroids", type=int, default=8)
    p.add_argument("--sigma-fixed", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gmm_collapse)

    p = sub.add_parser("compare", help="multi-seed method comparison table")
    _add_config_args(p)
    p.add_argument("--methods", required=True, help="comma-separated objective names")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--out", default="")
    p.add_argument("--assert-order", default="",
                   help="'A>=B' fails with exit code 4 if mean acc of A < B")
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("track-entropy", help="per-method entropy traces on shared data")
    _add_config_args(p)
    p.add_argument("--methods", required=True)
    p.add_argument("--n-steps", type=int, required=True)
    p.add_argument("--out", default="")
    p.set_defaults(fn=_cmd_track_entropy)

    p = sub.add_parser("make-data", help="materialize the configured dataset as CSV")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", action="store_true", help="emit view pairs instead of points")
    p.set_defaults(fn=_cmd_make_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        _emit_error("config", str(exc))
        return EXIT_CONFIG
    except AcceptanceCheckFailure as exc:
        _emit_error("acceptance", str(exc))
        return EXIT_ACCEPTANCE
    except (TrainingAborted, NumericalAbort, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        _emit_error("numerical", str(exc))
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        _emit_error("config", str(exc))
        return EXIT_CONFIG
    except (ValueError, KeyError) as exc:
        _emit_error("config", str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

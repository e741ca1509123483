"""Optimization loop joining the network, the SSL losses, and the data
generators: SSL pre-training with per-step entropy diagnostics, plus the
frozen-encoder linear probe.

Training is deterministic given the config seed: batching, initialization,
and every diagnostic are driven by explicit generators, and batch reductions
happen in fixed order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ssl_infolab import autodiff as ad
from ssl_infolab.autodiff import Tape
from ssl_infolab.datagen import PrototypeDataset, gaussian_view_pairs, sample_pairs
from ssl_infolab.entropy import logdet_batch_entropy, pairwise_batch_entropy
from ssl_infolab.genbound import min_norm_probe
from ssl_infolab.losses import SslObjectiveConfig, objective_graph
from ssl_infolab.network import (
    PwaNetwork,
    forward_batch,
    forward_batch_op,
    network_params,
    params_to_network,
    region_matrix_op,
)

OPTIMIZERS = ("sgd", "sgd_momentum", "adam")


class TrainingAborted(RuntimeError):
    """Non-finite loss; carries the failing step and the last good network."""

    def __init__(self, step: int, checkpoint: PwaNetwork, trace: "TrainTrace"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.checkpoint = checkpoint
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"             # sgd | sgd_momentum | adam
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    diagnostics_every: int = 50
    probe_batch_size: int = 1024
    max_steps: Optional[int] = None     # stop after this many updates if set

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


@dataclass
class TraceRecord:
    step: int
    loss: float
    terms: dict
    embedding_std: np.ndarray
    logdet_entropy: float
    pairwise_entropy: float
    wall_time: float


@dataclass
class TrainTrace:
    """Per-logged-step diagnostics; steps strictly increase.

    ``wall_time`` stays in memory only: emitted CSVs must be byte-identical
    across reruns of the same seed, so the timing column is not serialized.
    """

    records: list = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("trace steps must be strictly increasing")
        self.records.append(rec)

    @property
    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.records])

    def _term_keys(self) -> list[str]:
        keys = set()
        for r in self.records:
            keys.update(r.terms)
        return sorted(keys)

    def csv_header(self) -> list[str]:
        k = self.records[0].embedding_std.shape[0]
        return (["step", "loss"] + [f"term_{t}" for t in self._term_keys()]
                + [f"std_{j}" for j in range(k)] + ["logdet_entropy", "pairwise_entropy"])

    def csv_rows(self) -> list[list[str]]:
        term_keys = self._term_keys()
        rows = []
        for r in self.records:
            row = [str(r.step), repr(r.loss)]
            row += [repr(r.terms[t]) if t in r.terms else "" for t in term_keys]
            row += [repr(float(v)) for v in r.embedding_std]
            row += [repr(r.logdet_entropy), repr(r.pairwise_entropy)]
            rows.append(row)
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(self.csv_header()) + "\n")
            for row in self.csv_rows():
                fh.write(",".join(row) + "\n")


@dataclass(frozen=True)
class PairDataset:
    """View-pair pool for SSL training plus a fixed held-out probe batch."""

    x: np.ndarray                 # (M, D)
    x_prime: np.ndarray           # (M, D)
    labels: np.ndarray            # (M,)
    probe_x: np.ndarray           # (P, D), untouched by training batches
    input_cov_factors: Optional[np.ndarray] = None   # (M, D, D) for info_objective

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.x.shape[0]


def pairs_from_prototypes(ds: PrototypeDataset, n_pairs: int, seed: int,
                          probe_size: int = 1024) -> PairDataset:
    s_train, s_probe = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(s_train)
    idx = rng.integers(0, ds.n_prototypes, size=n_pairs)
    factors = ds.noise_scale * ds.tangent_factors[idx]
    eps = rng.standard_normal((2, n_pairs, ds.dim))
    base = ds.prototypes[idx]
    x = base + np.einsum("nij,nj->ni", factors, eps[0])
    xp = base + np.einsum("nij,nj->ni", factors, eps[1])
    probe_seed = int(np.random.default_rng(s_probe).integers(2 ** 62))
    probe_x, _, _ = sample_pairs(ds, probe_size, probe_seed)
    return PairDataset(x, xp, ds.labels[idx], probe_x=probe_x, input_cov_factors=factors)


def pairs_from_points(points: np.ndarray, labels: np.ndarray, view_noise: float,
                      seed: int, probe_size: int = 1024) -> PairDataset:
    """Each point acts as its own prototype with isotropic view noise."""
    x, xp = gaussian_view_pairs(points, view_noise, seed)
    d = points.shape[1]
    probe_seed = np.random.SeedSequence(seed).spawn(1)[0]
    probe_rng = np.random.default_rng(probe_seed)
    probe_idx = probe_rng.integers(0, len(points), size=min(probe_size, 4 * len(points)))
    probe = points[probe_idx] + view_noise * probe_rng.standard_normal((len(probe_idx), d))
    factors = np.repeat(view_noise * np.eye(d)[np.newaxis], len(points), axis=0)
    return PairDataset(x, xp, np.asarray(labels, dtype=np.int64), probe_x=probe,
                       input_cov_factors=factors)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, values, grads):
        return [v - self.lr * g for v, g in zip(values, grads)]


class _SgdMomentum:
    def __init__(self, lr, momentum):
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self, values, grads):
        if self.velocity is None:
            self.velocity = [np.zeros_like(v) for v in values]
        self.velocity = [self.momentum * m + g for m, g in zip(self.velocity, grads)]
        return [v - self.lr * m for v, m in zip(values, self.velocity)]


class _Adam:
    def __init__(self, lr, b1, b2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, values, grads):
        if self.m is None:
            self.m = [np.zeros_like(v) for v in values]
            self.v = [np.zeros_like(v) for v in values]
        self.t += 1
        out = []
        for i, (val, g) in enumerate(zip(values, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            out.append(val - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def _make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return _Sgd(cfg.learning_rate)
    if cfg.optimizer == "sgd_momentum":
        return _SgdMomentum(cfg.learning_rate, cfg.momentum)
    return _Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def _diagnostics(net: PwaNetwork, probe_x: np.ndarray, beta: float) -> tuple:
    z = forward_batch(net, probe_x)
    std = z.std(axis=0, ddof=1)
    ld = logdet_batch_entropy(z, beta).value
    pw = pairwise_batch_entropy(z, beta).value
    return std, ld, pw


def _step_loss(template: PwaNetwork, values, objective_name: str, obj_cfg: SslObjectiveConfig,
               xb: np.ndarray, xpb: np.ndarray, factors_b) -> tuple[float, dict, list]:
    tape = Tape()
    params = [(tape.leaf(w), tape.leaf(b)) for w, b in values]
    live = params_to_network(template, values)
    z = forward_batch_op(live, params, xb)
    zp = forward_batch_op(live, params, xpb)
    sigmas = None
    if objective_name == "info_objective":
        sig_z, sig_zp = [], []
        for i in range(xb.shape[0]):
            f_const = factors_b[i]
            for x_in, dest in ((xb[i], sig_z), (xpb[i], sig_zp)):
                a_op = region_matrix_op(live, params, x_in)
                half = ad.matmul(a_op, f_const)
                dest.append(ad.add(ad.matmul(half, ad.transpose(half)),
                                   1e-6 * np.eye(live.output_dim)))
        sigmas = (sig_z, sig_zp)
    total, terms = objective_graph(objective_name, z, zp, obj_cfg, sigmas)
    grads = ad.grad(tape, total)
    flat = []
    for w_var, b_var in params:
        flat.append(grads.get(w_var, np.zeros_like(w_var.value)))
        flat.append(grads.get(b_var, np.zeros_like(b_var.value)))
    return float(total.value), terms, flat


def train_ssl(net: PwaNetwork, pairs: PairDataset, objective_name: str,
              obj_cfg: SslObjectiveConfig, train_cfg: TrainConfig
              ) -> tuple[PwaNetwork, TrainTrace]:
    """Minibatch gradient descent on the selected objective.

    Logs diagnostics at step 0, every ``diagnostics_every`` updates, and at
    the final step.  Raises :class:`TrainingAborted` on a non-finite loss,
    carrying the last finite-loss checkpoint.
    """
    if pairs.dim != net.input_dim:
        raise ValueError("network input dim does not match dataset")
    if pairs.n_pairs < train_cfg.batch_size:
        raise ValueError("batch_size exceeds the pair pool")
    rng = np.random.default_rng(train_cfg.seed)
    opt = _make_optimizer(train_cfg)
    values = [(w.copy(), b.copy()) for w, b in net.layers]
    trace = TrainTrace()
    t0 = time.perf_counter()
    probe = pairs.probe_x[: train_cfg.probe_batch_size]

    def log(step, loss, terms):
        std, ld, pw = _diagnostics(params_to_network(net, values), probe, obj_cfg.logdet_beta)
        trace.append(TraceRecord(step, loss, terms, std, ld, pw,
                                 time.perf_counter() - t0))

    log(0, 0.0, {})

    step = 0
    steps_per_epoch = pairs.n_pairs // train_cfg.batch_size
    total_steps = train_cfg.epochs * steps_per_epoch
    if train_cfg.max_steps is not None:
        total_steps = min(total_steps, train_cfg.max_steps)
    done = total_steps == 0
    for _epoch in range(train_cfg.epochs):
        if done:
            break
        order = rng.permutation(pairs.n_pairs)
        for start in range(0, pairs.n_pairs - train_cfg.batch_size + 1, train_cfg.batch_size):
            sel = order[start:start + train_cfg.batch_size]
            factors_b = None if pairs.input_cov_factors is None else pairs.input_cov_factors[sel]
            loss, terms, flat_grads = _step_loss(
                net, values, objective_name, obj_cfg,
                pairs.x[sel], pairs.x_prime[sel], factors_b)
            if not np.isfinite(loss):
                raise TrainingAborted(step, params_to_network(net, values), trace)
            flat_values = [a for pair in values for a in pair]
            new_flat = opt.step(flat_values, flat_grads)
            values = [(new_flat[2 * i], new_flat[2 * i + 1]) for i in range(len(values))]
            step += 1
            if step % train_cfg.diagnostics_every == 0 or step == total_steps:
                log(step, loss, terms)
            if step == total_steps:
                done = True
                break
    return params_to_network(net, values), trace


def linear_probe(net: PwaNetwork, train_points: np.ndarray, train_labels: np.ndarray,
                 test_points: np.ndarray, test_labels: np.ndarray,
                 ridge: float = 0.0) -> float:
    """Accuracy of the min-norm (or ridge) least-squares probe on frozen
    embeddings, one-hot targets, argmax decision."""
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    z_train = forward_batch(net, train_points).T          # (d, n)
    classes = np.unique(np.concatenate([train_labels, test_labels]))
    y = one_hot(train_labels, classes)                    # (n, r)
    w = min_norm_probe(z_train, y, ridge=ridge)           # (r, d)
    z_test = forward_batch(net, test_points).T
    pred = classes[np.argmax(w @ z_test, axis=0)]
    return float(np.mean(pred == np.asarray(test_labels)))


def one_hot(labels: np.ndarray, classes: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], classes.shape[0]))
    for j, c in enumerate(classes):
        out[labels == c, j] = 1.0
    return out

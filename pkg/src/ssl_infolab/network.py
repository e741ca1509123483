"""Piecewise-affine multilayer perceptron with exact per-input affine
extraction and the Gaussian pushforward through the active region.

A network with (leaky-)ReLU or absolute-value activations is affine on each
cell of an input-space partition.  ``affine_extract`` returns that affine map
(A, b) at a probe input by masked matrix products (never finite differences),
together with the activation pattern identifying the cell.
``pushforward_gaussian`` maps an input Gaussian through the cell containing
its mean and reports a sampled purity diagnostic that says how much of the
Gaussian's mass actually stays in that cell.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ssl_infolab import autodiff as ad
from ssl_infolab.autodiff import Tape, Var
from ssl_infolab.gaussians import Gaussian, semidefinite_cholesky

ACTIVATIONS = ("relu", "leaky_relu", "abs")

# Exact-zero pre-activations resolved to the non-negative side; counted here
# so long runs can report how often the measure-zero event fired.
BOUNDARY_WARNINGS = {"count": 0}


class BoundaryInputError(ValueError):
    """Probe input sits on a region boundary (a pre-activation is ~0)."""


@dataclass(frozen=True)
class PwaNetwork:
    """MLP with piecewise-affine activations on hidden layers, identity output.

    ``layers`` holds (weight, bias) pairs; weight of layer l has shape
    (fan_out, fan_in) and maps column vectors x -> W x + b.
    """

    layers: tuple
    activation: str = "relu"
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        layers = tuple((np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for w, b in self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for i, (w, b) in enumerate(layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not compose")
            if i > 0 and w.shape[1] != layers[i - 1][0].shape[0]:
                raise ValueError(f"layer {i} input dim {w.shape[1]} != previous output")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def n_hidden_units(self) -> int:
        return sum(w.shape[0] for w, _ in self.layers[:-1])

    def _act(self, h: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(h, 0.0)
        if self.activation == "leaky_relu":
            return np.where(h >= 0.0, h, self.leaky_slope * h)
        return np.abs(h)

    def _slopes(self, h: np.ndarray) -> np.ndarray:
        """Per-unit affine slope of the activation on the side h lies on."""
        if self.activation == "relu":
            return np.where(h >= 0.0, 1.0, 0.0)
        if self.activation == "leaky_relu":
            return np.where(h >= 0.0, 1.0, self.leaky_slope)
        return np.where(h >= 0.0, 1.0, -1.0)

    def to_json(self) -> str:
        doc = {
            "activation": self.activation,
            "leaky_slope": self.leaky_slope,
            "shapes": [list(w.shape) for w, _ in self.layers],
            "weights": [w.ravel().tolist() for w, _ in self.layers],
            "biases": [b.tolist() for _, b in self.layers],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PwaNetwork":
        doc = json.loads(text)
        layers = tuple(
            (np.asarray(w, dtype=np.float64).reshape(shape), np.asarray(b, dtype=np.float64))
            for shape, w, b in zip(doc["shapes"], doc["weights"], doc["biases"])
        )
        return cls(layers, doc["activation"], doc.get("leaky_slope", 0.1))


@dataclass(frozen=True)
class RegionAffine:
    """Affine map z = A x + b valid on one activation region."""

    a_matrix: np.ndarray
    b_offset: np.ndarray
    activation_pattern: np.ndarray  # bool, one bit per hidden unit

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.a_matrix @ np.asarray(x, dtype=np.float64) + self.b_offset


def init_network(dims: Sequence[int], activation: str = "relu", seed: int = 0,
                 leaky_slope: float = 0.1) -> PwaNetwork:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((w, b))
    return PwaNetwork(tuple(layers), activation, leaky_slope)


def forward(net: PwaNetwork, x: np.ndarray) -> np.ndarray:
    """Feed-forward evaluation of a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ValueError(f"input shape {x.shape}, expected ({net.input_dim},)")
    h = x
    for w, b in net.layers[:-1]:
        h = net._act(w @ h + b)
    w, b = net.layers[-1]
    return w @ h + b


def forward_batch(net: PwaNetwork, xs: np.ndarray) -> np.ndarray:
    """Row-wise forward of an (n, D) matrix."""
    h = np.asarray(xs, dtype=np.float64)
    for w, b in net.layers[:-1]:
        h = net._act(h @ w.T + b)
    w, b = net.layers[-1]
    return h @ w.T + b


def activation_patterns(net: PwaNetwork, xs: np.ndarray) -> np.ndarray:
    """(n, n_hidden_units) bool sign patterns for a batch of inputs."""
    h = np.asarray(xs, dtype=np.float64)
    bits = []
    for w, b in net.layers[:-1]:
        pre = h @ w.T + b
        bits.append(pre >= 0.0)
        h = net._act(pre)
    return np.concatenate(bits, axis=1) if bits else np.zeros((h.shape[0], 0), dtype=bool)


def affine_extract(net: PwaNetwork, x: np.ndarray, boundary_tol: float = 1e-12,
                   on_boundary: str = "error") -> RegionAffine:
    """Exact affine map of the region containing x, via masked matrix products.

    Raises :class:`BoundaryInputError` when a hidden pre-activation is within
    ``boundary_tol`` of zero, unless ``on_boundary="accept"``, which resolves
    the tie to the non-negative side and bumps the module warning counter.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ValueError(f"input shape {x.shape}, expected ({net.input_dim},)")
    h = x
    a = np.eye(net.input_dim)
    bits = []
    for w, b in net.layers[:-1]:
        pre = w @ h + b
        near = np.abs(pre) <= boundary_tol
        if np.any(near):
            if on_boundary == "error":
                raise BoundaryInputError(
                    f"{int(np.sum(near))} pre-activation(s) within {boundary_tol} of zero")
            BOUNDARY_WARNINGS["count"] += int(np.sum(near))
        slopes = net._slopes(pre)
        bits.append(pre >= 0.0)
        a = (slopes[:, np.newaxis] * w) @ a
        h = net._act(pre)
    w, b = net.layers[-1]
    a = w @ a
    out = w @ h + b
    pattern = np.concatenate(bits) if bits else np.zeros(0, dtype=bool)
    return RegionAffine(a_matrix=a, b_offset=out - a @ x, activation_pattern=pattern)


def pushforward_gaussian(net: PwaNetwork, g: Gaussian, n_purity: int = 4096,
                         seed: int = 0) -> tuple[Gaussian, float]:
    """Image Gaussian N(A mu + b, A Sigma A^T) of the region at the mean,
    plus the sampled fraction of mass sharing that region (purity).

    The single-Gaussian reduction is only trustworthy when purity is ~1.
    """
    if g.dim != net.input_dim:
        raise ValueError(f"Gaussian dim {g.dim} != network input dim {net.input_dim}")
    region = affine_extract(net, g.mean)
    image_cov = region.a_matrix @ g.cov @ region.a_matrix.T
    image = Gaussian(region.apply(g.mean), semidefinite_cholesky(image_cov))
    eps = np.random.default_rng(seed).standard_normal((n_purity, g.dim))
    xs = g.mean + eps @ g.cov_factor.T
    patterns = activation_patterns(net, xs)
    purity = float(np.mean(np.all(patterns == region.activation_pattern, axis=1)))
    return image, purity


# ---------------------------------------------------------------------------
# Tape-recorded evaluation for training.
# ---------------------------------------------------------------------------

def network_params(tape: Tape, net: PwaNetwork) -> list[tuple[Var, Var]]:
    """Record every layer's weight and bias as differentiable leaves."""
    return [(tape.leaf(w), tape.leaf(b)) for w, b in net.layers]


def forward_batch_op(net: PwaNetwork, params: list[tuple[Var, Var]], xs: np.ndarray) -> Var:
    """Batch forward as tape ops, so gradients reach the parameter leaves."""
    tape = params[0][0].tape
    h: Var = tape.constant(np.asarray(xs, dtype=np.float64))
    for i, (w, b) in enumerate(params):
        h = ad.add(ad.matmul(h, ad.transpose(w)), b)
        if i < len(params) - 1:
            h = _apply_act_op(net, h)
    return h


def _apply_act_op(net: PwaNetwork, h: Var) -> Var:
    if net.activation == "relu":
        return ad.relu(h)
    if net.activation == "leaky_relu":
        return ad.leaky_relu(h, net.leaky_slope)
    return ad.abs_act(h)


def region_matrix_op(net: PwaNetwork, params: list[tuple[Var, Var]], x: np.ndarray) -> Var:
    """The Jacobian A at input x as a tape expression of the weights.

    The activation masks are held fixed at the probe input's pattern, matching
    the per-region affine map; gradients w.r.t. the weights flow through the
    masked products.
    """
    x = np.asarray(x, dtype=np.float64)
    h = x
    a: Optional[Var] = None
    for (w_np, b_np), (w, _b) in zip(net.layers[:-1], params[:-1]):
        pre = w_np @ h + b_np
        slopes = net._slopes(pre)
        masked = ad.mul(w, slopes[:, np.newaxis])
        a = masked if a is None else ad.matmul(masked, a)
        h = net._act(pre)
    w_last = params[-1][0]
    return w_last if a is None else ad.matmul(w_last, a)


def params_to_network(net: PwaNetwork, values: list[tuple[np.ndarray, np.ndarray]]) -> PwaNetwork:
    """New network with the same architecture and the given parameter values."""
    return PwaNetwork(tuple((w.copy(), b.copy()) for w, b in values),
                      net.activation, net.leaky_slope)

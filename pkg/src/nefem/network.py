"""Tiny sine-activated MLPs used as enrichment functions.

Each network maps a coordinate offset (plus optionally a quasi-distance
channel) to a scalar.  Differentiation is done from scratch: the forward pass
jointly computes value and input gradient, and one reverse sweep over that
augmented computation yields parameter gradients of any linear functional of
both.  No external autodiff is involved, which keeps evaluations exact and
bit-reproducible.

Parameter layout (flat vector, fixed for checkpoints): W1 row-major, b1, W2
row-major, b2, W3, then the two trainable activation slopes.  Hidden layers
use sin(n_k a_k (W z + b)) with fixed integer scale n_k and trainable slope
a_k; the output layer carries weights only (no bias).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._kernels import param_count, param_offsets

SPATIAL = "spatial"
SPATIAL_DISTANCE = "spatial+distance"

CHECKPOINT_VERSION = 1


class NetworkError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class MlpEnrichment:
    dims: tuple                # (d_in, h1, h2, 1)
    scales: tuple              # (n1, n2), integers >= 1
    input_mode: str            # SPATIAL or SPATIAL_DISTANCE
    anchor: np.ndarray         # (2,) node coordinate p_i
    params: np.ndarray         # flat parameter vector
    seed: int
    version: int = 0           # bumped on every parameter change

    @property
    def num_params(self):
        return self.params.shape[0]

    def bump_version(self):
        self.version += 1

    def set_params(self, values):
        self.params[:] = values
        self.bump_version()

    # -- evaluation ---------------------------------------------------------

    def _check_dist(self, d):
        if self.input_mode == SPATIAL_DISTANCE:
            if d is None:
                raise NetworkError("distance input required in "
                                   f"{self.input_mode!r} mode")
        elif d is not None:
            raise NetworkError("distance input supplied in spatial mode")

    def eval_with_gradient(self, x, d=None):
        """Value and spatial gradient at a single point.

        In distance mode `d` is a pair (D(x), grad D(x)) and the returned
        gradient includes the chain-rule term dN/dD * grad D.
        """
        self._check_dist(d)
        x = np.asarray(x, dtype=float)
        din, h1, h2, _ = self.dims
        if d is None:
            X = (x - self.anchor)[None, :]
            vals, grads = _kernels.mlp_forward(self.params, din, h1, h2,
                                               *self.scales, X)
            return float(vals[0]), grads[0].copy()
        dval, dgrad = d
        X = np.array([[x[0] - self.anchor[0], x[1] - self.anchor[1], dval]])
        vals, grads = _kernels.mlp_forward(self.params, din, h1, h2,
                                           *self.scales, X)
        g = grads[0, :2] + grads[0, 2] * np.asarray(dgrad, dtype=float)
        return float(vals[0]), g

    def eval_batch(self, X):
        """Values and input-space gradients for a batch of network inputs
        (already anchor-shifted, with the distance channel appended in
        distance mode)."""
        din, h1, h2, _ = self.dims
        return _kernels.mlp_forward(self.params, din, h1, h2, *self.scales, X)

    def eval_laplacian(self, x):
        """Input-space Laplacian at a point; spatial mode only."""
        if self.input_mode != SPATIAL:
            raise NetworkError("Laplacian is unsupported in distance mode")
        _, h1, h2, _ = self.dims
        X = (np.asarray(x, dtype=float) - self.anchor)[None, :]
        _, _, laps = _kernels.mlp_forward_lap(self.params, h1, h2,
                                              *self.scales, X)
        return float(laps[0])

    def eval_batch_laplacian(self, X):
        if self.input_mode != SPATIAL:
            raise NetworkError("Laplacian is unsupported in distance mode")
        _, h1, h2, _ = self.dims
        return _kernels.mlp_forward_lap(self.params, h1, h2, *self.scales, X)

    def accumulate_param_gradient(self, X, w_value, w_gradient):
        """d/dtheta of sum_p w_value[p] N(x_p) + w_gradient[p] . grad N(x_p).

        X holds network inputs (anchor-shifted); w_gradient cotangents are in
        input space (callers apply the distance chain rule beforehand).
        Points are accumulated in index order.
        """
        din, h1, h2, _ = self.dims
        X = np.asarray(X, dtype=float)
        w_value = np.asarray(w_value, dtype=float)
        w_gradient = np.asarray(w_gradient, dtype=float)
        if not (np.isfinite(w_value).all() and np.isfinite(w_gradient).all()):
            raise NetworkError("non-finite cotangent")
        return _kernels.mlp_backward(self.params, din, h1, h2, *self.scales,
                                     X, w_value, w_gradient)

    # -- checkpointing ------------------------------------------------------

    def to_record(self):
        return {
            "dims": list(self.dims),
            "scales": list(self.scales),
            "input_mode": self.input_mode,
            "anchor": [float(self.anchor[0]), float(self.anchor[1])],
            "seed": int(self.seed),
            "params": [float(v) for v in self.params],
        }

    @classmethod
    def from_record(cls, rec):
        try:
            dims = tuple(int(v) for v in rec["dims"])
            scales = tuple(int(v) for v in rec["scales"])
            net = cls(dims=dims, scales=scales,
                      input_mode=str(rec["input_mode"]),
                      anchor=np.array(rec["anchor"], dtype=float),
                      params=np.array(rec["params"], dtype=float),
                      seed=int(rec["seed"]))
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed network record: {exc}") from exc
        expect = param_count(dims[0], dims[1], dims[2])
        if net.params.shape[0] != expect:
            raise CheckpointError(
                f"parameter count {net.params.shape[0]} does not match dims "
                f"{dims} (expected {expect})")
        return net


def init_network(dims, scales, input_mode, anchor, seed):
    """Freshly initialized enrichment network.

    Weights and biases are fan-in uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    from a seeded generator; slopes start at 1/n_k so the effective
    activation slope n_k a_k is 1.
    """
    dims = tuple(int(v) for v in dims)
    scales = tuple(int(v) for v in scales)
    if len(dims) != 4 or dims[3] != 1:
        raise NetworkError(f"expected dims [d_in, h1, h2, 1], got {dims}")
    expected_din = 3 if input_mode == SPATIAL_DISTANCE else 2
    if input_mode not in (SPATIAL, SPATIAL_DISTANCE):
        raise NetworkError(f"unknown input mode {input_mode!r}")
    if dims[0] != expected_din:
        raise NetworkError(f"dims[0]={dims[0]} inconsistent with input mode "
                           f"{input_mode!r}")
    if any(n < 1 for n in scales):
        raise NetworkError("scale factors must be >= 1")

    d, h1, h2, _ = dims
    rng = np.random.default_rng(seed)
    ow1, ob1, ow2, ob2, ow3, oa = param_offsets(d, h1, h2)
    params = np.empty(param_count(d, h1, h2))
    params[ow1:ob1] = rng.uniform(-1, 1, h1 * d) / np.sqrt(d)
    params[ob1:ow2] = rng.uniform(-1, 1, h1) / np.sqrt(d)
    params[ow2:ob2] = rng.uniform(-1, 1, h2 * h1) / np.sqrt(h1)
    params[ob2:ow3] = rng.uniform(-1, 1, h2) / np.sqrt(h1)
    params[ow3:oa] = rng.uniform(-1, 1, h2) / np.sqrt(h2)
    params[oa] = 1.0 / scales[0]
    params[oa + 1] = 1.0 / scales[1]
    return MlpEnrichment(dims=dims, scales=scales, input_mode=input_mode,
                         anchor=np.asarray(anchor, dtype=float).copy(),
                         params=params, seed=int(seed))


def save_networks(nets, path):
    payload = {"version": CHECKPOINT_VERSION,
               "networks": [n.to_record() for n in nets]}
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_networks(path):
    try:
        with open(path) as f:
            payload = json.load(f)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload.get('version')} "
                              f"not supported")
    return [MlpEnrichment.from_record(r) for r in payload["networks"]]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Standard Adam state over a flat parameter vector."""

    learning_rate: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, num_params, learning_rate):
        return cls(learning_rate=float(learning_rate),
                   m=np.zeros(num_params), v=np.zeros(num_params))


def adam_step(state, params, grads, frozen_mask=None):
    """One Adam update, in place on `params`.

    Entries where `frozen_mask` is True are skipped entirely: no moment
    update and no parameter change.  Non-finite gradient entries abort.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise NetworkError("parameter/gradient/state shape mismatch")
    active = slice(None) if frozen_mask is None else ~np.asarray(frozen_mask)
    g = grads[active]
    if not np.isfinite(g).all():
        bad = int(np.count_nonzero(~np.isfinite(g)))
        raise NetworkError(f"non-finite gradient entries: {bad}")
    state.step += 1
    t = state.step
    state.m[active] = state.beta1 * state.m[active] + (1 - state.beta1) * g
    state.v[active] = state.beta2 * state.v[active] + (1 - state.beta2) * g * g
    mhat = state.m[active] / (1 - state.beta1 ** t)
    vhat = state.v[active] / (1 - state.beta2 ** t)
    params[active] -= state.learning_rate * mhat / (np.sqrt(vhat) + state.eps)
    return params

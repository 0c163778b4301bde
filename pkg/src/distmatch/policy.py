"""Randomized Markov policy a = f(theta, s, R, z, tau) with exact derivatives.

Two architectures over the input x = (s, R, z, tau):

``theory2layer``   y = w2 . act(W1 x + b1) + b2, optionally with a
                   parameter-free layer norm between the affine map and the
                   activation.  Small enough that its closed-form derivatives
                   are checkable by hand.
``residual-mlp``   input layer Linear(4 -> P) + LayerNorm + act, then
                   ``blocks`` residual blocks h + act(LayerNorm(Linear(h))),
                   then a zero-initialized Linear(P -> 1).

Reverse-mode derivatives are written out explicitly (no autodiff) and keep
the batch axis, so ``evaluate_batch`` returns per-sample parameter gradients
as an (M, n_params) matrix along with the input partials df/ds and df/dR
needed by the trajectory sensitivity recursion.  An optional smooth squash
a = a_min + (a_max - a_min) * (tanh(y) + 1)/2 maps the output into a compact
action interval without killing gradients.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import DomainError, ParameterError
from .numerics import RandomStream

ARCHITECTURES = ("theory2layer", "residual-mlp")
ACTIVATIONS = ("tanh", "relu")
TIME_ENCODINGS = ("tau", "t-over-T")

N_INPUTS = 4
_LN_EPS = 1e-6


@dataclass(frozen=True)
class PolicyConfig:
    architecture: str = "theory2layer"
    width: int = 32
    blocks: int = 0
    activation: str = "tanh"
    layer_norm: bool = False
    output_squash: Optional[Tuple[float, float]] = None
    seed: int = 0
    # fourth input feature: "tau" = time-to-go (T-t)/T, "t-over-T" = elapsed t/T
    time_encoding: str = "tau"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ParameterError(f"unknown architecture {self.architecture!r}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.time_encoding not in TIME_ENCODINGS:
            raise ParameterError(f"unknown time encoding {self.time_encoding!r}")
        if self.width < 1:
            raise ParameterError(f"width must be >= 1, got {self.width}")
        if self.blocks < 0:
            raise ParameterError(f"blocks must be >= 0, got {self.blocks}")
        if self.architecture == "theory2layer" and self.blocks != 0:
            raise ParameterError("theory2layer has no residual blocks")
        if self.output_squash is not None:
            lo, hi = self.output_squash
            if not lo < hi:
                raise ParameterError(f"need a_min < a_max, got {self.output_squash}")
            object.__setattr__(self, "output_squash", (float(lo), float(hi)))


def _shape_table(config: PolicyConfig) -> Dict[str, Tuple[int, Tuple[int, ...]]]:
    """Name -> (offset, shape) layout of the flat parameter vector."""
    P = config.width
    order = []
    if config.architecture == "theory2layer":
        order = [("W1", (P, N_INPUTS)), ("b1", (P,)), ("w2", (P,)), ("b2", (1,))]
    else:
        order.append(("W_in", (P, N_INPUTS)))
        order.append(("b_in", (P,)))
        if config.layer_norm:
            order += [("ln_in_g", (P,)), ("ln_in_b", (P,))]
        for i in range(config.blocks):
            order += [(f"W_{i}", (P, P)), (f"b_{i}", (P,))]
            if config.layer_norm:
                order += [(f"ln{i}_g", (P,)), (f"ln{i}_b", (P,))]
        order += [("w_out", (P,)), ("b_out", (1,))]
    table, offset = {}, 0
    for name, shape in order:
        table[name] = (offset, shape)
        offset += int(np.prod(shape))
    return table


@dataclass(frozen=True)
class PolicyParams:
    """Flat parameter vector plus its layout; treat as immutable."""

    config: PolicyConfig
    theta: np.ndarray
    shapes: Dict[str, Tuple[int, Tuple[int, ...]]]

    @property
    def n_params(self) -> int:
        return self.theta.size

    def tensor(self, name: str) -> np.ndarray:
        offset, shape = self.shapes[name]
        return self.theta[offset:offset + int(np.prod(shape))].reshape(shape)

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ParameterError("replacement theta has wrong length")
        return PolicyParams(self.config, theta, self.shapes)


@dataclass(frozen=True)
class PolicyEval:
    action: float
    grad_theta: np.ndarray
    df_ds: float
    df_dR: float


def n_params(config: PolicyConfig) -> int:
    table = _shape_table(config)
    return sum(int(np.prod(shape)) for _, shape in table.values())


def init_params(config: PolicyConfig) -> PolicyParams:
    """Seed-deterministic initialization.

    Hidden weight matrices are N(0, 1/fan_in) draws, biases start at zero,
    layer-norm gains at one, and the output layer is exactly zero, so a fresh
    policy plays action 0 everywhere and training starts from the
    deterministic zero policy.
    """
    table = _shape_table(config)
    theta = np.zeros(sum(int(np.prod(s)) for _, s in table.values()))
    gen = RandomStream(config.seed, 0).generator()
    for name, (offset, shape) in table.items():
        size = int(np.prod(shape))
        if name in ("W1", "W_in") or (name.startswith("W_") and name != "W_in"):
            fan_in = shape[1]
            theta[offset:offset + size] = (
                gen.standard_normal(size) / math.sqrt(fan_in)
            )
        elif name.endswith("_g"):
            theta[offset:offset + size] = 1.0
        # biases, layer-norm shifts, and the output layer stay zero
    theta.setflags(write=False)
    return PolicyParams(config=config, theta=theta, shapes=table)


def _act(config: PolicyConfig, h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Activation value and its pointwise derivative."""
    if config.activation == "tanh":
        g = np.tanh(h)
        return g, 1.0 - g * g
    return np.maximum(h, 0.0), (h > 0.0).astype(float)


def _ln_forward(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Feature-axis layer norm (no affine): returns (zhat, 1/std)."""
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    return (z - mu) * inv[:, None], inv


def _ln_backward(dzhat: np.ndarray, zhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """d/dz of layer norm given the gradient w.r.t. zhat."""
    m1 = dzhat.mean(axis=1, keepdims=True)
    m2 = (dzhat * zhat).mean(axis=1, keepdims=True)
    return (dzhat - m1 - zhat * m2) * inv[:, None]


def _squash(config: PolicyConfig, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if config.output_squash is None:
        return y, np.ones_like(y)
    lo, hi = config.output_squash
    t = np.tanh(y)
    return lo + (hi - lo) * (t + 1.0) / 2.0, (hi - lo) / 2.0 * (1.0 - t * t)


def evaluate_batch(params: PolicyParams, s, R, z, tau, need_grad: bool = True):
    """Vectorized policy evaluation over a batch.

    Returns ``(action, grad_theta, df_ds, df_dR)`` with shapes
    (M,), (M, n_params) (or None when ``need_grad`` is false), (M,), (M,).
    """
    cfg = params.config
    s = np.atleast_1d(np.asarray(s, dtype=float))
    R = np.broadcast_to(np.asarray(R, dtype=float), s.shape)
    z = np.broadcast_to(np.asarray(z, dtype=float), s.shape)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), s.shape)
    if tau.size and (tau.min() < 0.0 or tau.max() > 1.0):
        raise DomainError("time feature tau must lie in [0, 1]")
    x = np.stack([s, R, z, tau], axis=1)
    if cfg.architecture == "theory2layer":
        return _eval_theory2layer(params, x, need_grad)
    return _eval_residual(params, x, need_grad)


def _eval_theory2layer(params: PolicyParams, x: np.ndarray, need_grad: bool):
    cfg = params.config
    W1, b1 = params.tensor("W1"), params.tensor("b1")
    w2, b2 = params.tensor("w2"), params.tensor("b2")
    pre = x @ W1.T + b1
    if cfg.layer_norm:
        h, inv = _ln_forward(pre)
    else:
        h = pre
    g, gprime = _act(cfg, h)
    y = g @ w2 + b2[0]
    action, dy = _squash(cfg, y)
    if not need_grad:
        # input partials still come cheap from the same pass
        dh = dy[:, None] * w2[None, :] * gprime
        dpre = _ln_backward(dh, h, inv) if cfg.layer_norm else dh
        dx = dpre @ W1
        return action, None, dx[:, 0], dx[:, 1]
    M = x.shape[0]
    grads = np.empty((M, params.n_params))
    dh = dy[:, None] * w2[None, :] * gprime
    dpre = _ln_backward(dh, h, inv) if cfg.layer_norm else dh
    off, shape = params.shapes["W1"]
    grads[:, off:off + W1.size] = (dpre[:, :, None] * x[:, None, :]).reshape(M, -1)
    off, _ = params.shapes["b1"]
    grads[:, off:off + b1.size] = dpre
    off, _ = params.shapes["w2"]
    grads[:, off:off + w2.size] = dy[:, None] * g
    off, _ = params.shapes["b2"]
    grads[:, off] = dy
    dx = dpre @ W1
    return action, grads, dx[:, 0], dx[:, 1]


def _eval_residual(params: PolicyParams, x: np.ndarray, need_grad: bool):
    cfg = params.config
    M = x.shape[0]
    use_ln = cfg.layer_norm

    # forward, stashing what the backward pass needs
    W_in, b_in = params.tensor("W_in"), params.tensor("b_in")
    z0 = x @ W_in.T + b_in
    if use_ln:
        zhat0, inv0 = _ln_forward(z0)
        l0 = params.tensor("ln_in_g") * zhat0 + params.tensor("ln_in_b")
    else:
        zhat0, inv0, l0 = None, None, z0
    h, hprime = _act(cfg, l0)
    blocks = []
    for i in range(cfg.blocks):
        W, b = params.tensor(f"W_{i}"), params.tensor(f"b_{i}")
        zi = h @ W.T + b
        if use_ln:
            zhat, inv = _ln_forward(zi)
            li = params.tensor(f"ln{i}_g") * zhat + params.tensor(f"ln{i}_b")
        else:
            zhat, inv, li = None, None, zi
        ri, rprime = _act(cfg, li)
        blocks.append((h, zhat, inv, rprime))
        h = h + ri
    w_out, b_out = params.tensor("w_out"), params.tensor("b_out")
    y = h @ w_out + b_out[0]
    action, dy = _squash(cfg, y)

    grads = np.empty((M, params.n_params)) if need_grad else None

    def put(name, value):
        off, shape = params.shapes[name]
        grads[:, off:off + int(np.prod(shape))] = value.reshape(M, -1)

    if need_grad:
        put("w_out", dy[:, None] * h)
        put("b_out", dy[:, None])
    dh = dy[:, None] * w_out[None, :]
    for i in reversed(range(cfg.blocks)):
        h_prev, zhat, inv, rprime = blocks[i]
        dli = dh * rprime
        if use_ln:
            dzhat = dli * params.tensor(f"ln{i}_g")
            if need_grad:
                put(f"ln{i}_g", dli * zhat)
                put(f"ln{i}_b", dli)
            dzi = _ln_backward(dzhat, zhat, inv)
        else:
            dzi = dli
        if need_grad:
            put(f"W_{i}", dzi[:, :, None] * h_prev[:, None, :])
            put(f"b_{i}", dzi)
        dh = dh + dzi @ params.tensor(f"W_{i}")
    dl0 = dh * hprime
    if use_ln:
        dzhat0 = dl0 * params.tensor("ln_in_g")
        if need_grad:
            put("ln_in_g", dl0 * zhat0)
            put("ln_in_b", dl0)
        dz0 = _ln_backward(dzhat0, zhat0, inv0)
    else:
        dz0 = dl0
    if need_grad:
        put("W_in", dz0[:, :, None] * x[:, None, :])
        put("b_in", dz0)
    dx = dz0 @ W_in
    return action, grads, dx[:, 0], dx[:, 1]


def evaluate(params: PolicyParams, s: float, R: float, z: float, tau: float) -> PolicyEval:
    """Single-input policy evaluation with exact reverse-mode derivatives."""
    action, grads, df_ds, df_dR = evaluate_batch(
        params, [s], [R], [z], [tau], need_grad=True
    )
    return PolicyEval(action=float(action[0]), grad_theta=grads[0],
                      df_ds=float(df_ds[0]), df_dR=float(df_dR[0]))


def save_checkpoint(params: PolicyParams, path: str) -> None:
    """Write {config, theta} as JSON; floats round-trip bit-exactly."""
    payload = {"config": asdict(params.config), "theta": params.theta.tolist()}
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> PolicyParams:
    with open(path) as fh:
        payload = json.load(fh)
    raw = dict(payload["config"])
    if raw.get("output_squash") is not None:
        raw["output_squash"] = tuple(raw["output_squash"])
    config = PolicyConfig(**raw)
    theta = np.asarray(payload["theta"], dtype=float)
    expected = n_params(config)
    if theta.size != expected:
        raise ParameterError(
            f"checkpoint has {theta.size} parameters, architecture needs {expected}"
        )
    theta.setflags(write=False)
    return PolicyParams(config=config, theta=theta, shapes=_shape_table(config))

"""Flat-parameter tanh MLP (6 -> 32 -> 32 -> 4) with manual backprop and optimizers.

Parameters live in one flat float64 array so optimizers and Hessian-vector
products are plain vector operations. Layout, per layer: weight matrix
(out x in, row-major) followed by the bias vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LAYER_SIZES = (6, 32, 32, 4)
CHECKPOINT_VERSION = 1


def _layer_slices(sizes=LAYER_SIZES):
    slices = []
    offset = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = slice(offset, offset + n_out * n_in)
        offset += n_out * n_in
        b = slice(offset, offset + n_out)
        offset += n_out
        slices.append((w, b, n_out, n_in))
    return slices, offset


_SLICES, N_PARAMS = _layer_slices()


def unpack(theta: np.ndarray):
    """Return [(W, b), ...] as views into ``theta``."""
    if theta.shape != (N_PARAMS,):
        raise ValueError(f"expected flat parameter vector of length {N_PARAMS}, got {theta.shape}")
    return [(theta[w].reshape(n_out, n_in), theta[b]) for w, b, n_out, n_in in _SLICES]


def init_params(rng: np.random.Generator) -> np.ndarray:
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    theta = np.zeros(N_PARAMS)
    for w, _, n_out, n_in in _SLICES:
        s = 1.0 / np.sqrt(n_in)
        theta[w] = rng.uniform(-s, s, size=n_out * n_in)
    return theta


def _forward_cache(theta, x):
    (w1, b1), (w2, b2), (w3, b3) = unpack(theta)
    h1 = np.tanh(x @ w1.T + b1)
    h2 = np.tanh(h1 @ w2.T + b2)
    out = h2 @ w3.T + b3
    return out, (x, h1, h2)


def forward(theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input (6,) or a batch (B, 6)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != LAYER_SIZES[0]:
        raise ValueError(f"input must have trailing dimension {LAYER_SIZES[0]}, got {x.shape}")
    return _forward_cache(theta, x)[0]


def _backward_cache(theta, cache, gout, gtheta=None):
    """Accumulate d/dtheta into ``gtheta`` and return d/dinput for a batch."""
    (w1, _), (w2, _), (w3, _) = unpack(theta)
    x, h1, h2 = cache
    if gtheta is None:
        gtheta = np.zeros(N_PARAMS)
    (gw1, gb1), (gw2, gb2), (gw3, gb3) = unpack(gtheta)
    gw3 += gout.T @ h2
    gb3 += gout.sum(axis=0)
    d2 = (gout @ w3) * (1.0 - h2 * h2)
    gw2 += d2.T @ h1
    gb2 += d2.sum(axis=0)
    d1 = (d2 @ w2) * (1.0 - h1 * h1)
    gw1 += d1.T @ x
    gb1 += d1.sum(axis=0)
    return gtheta, d1 @ w1


def backward(theta: np.ndarray, inputs: np.ndarray, output_grads: np.ndarray):
    """Gradient of sum_i <output_grads_i, f(inputs_i)> w.r.t. parameters and inputs.

    Returns ``(grad_theta, grad_inputs)`` with grad_inputs shaped like ``inputs``.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    output_grads = np.atleast_2d(np.asarray(output_grads, dtype=float))
    if inputs.shape[0] == 0:
        raise ValueError("empty batch")
    if inputs.shape[1] != LAYER_SIZES[0] or output_grads.shape[1] != LAYER_SIZES[-1]:
        raise ValueError(f"bad shapes: inputs {inputs.shape}, output_grads {output_grads.shape}")
    if inputs.shape[0] != output_grads.shape[0]:
        raise ValueError(
            f"batch size mismatch: {inputs.shape[0]} inputs vs {output_grads.shape[0]} output grads"
        )
    _, cache = _forward_cache(theta, inputs)
    return _backward_cache(theta, cache, output_grads)


def hvp(theta: np.ndarray, grad_fn, v: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian-vector product of the loss whose gradient is ``grad_fn``.

    The probe direction is normalised so ``eps`` is an absolute step in
    parameter space regardless of ``|v|``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        raise ValueError("hvp direction has (near) zero norm")
    u = v / norm
    return (grad_fn(theta + eps * u) - grad_fn(theta - eps * u)) / (2.0 * eps) * norm


def sgd_step(theta: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    if eta <= 0:
        raise ValueError("learning rate must be positive")
    return theta - eta * grad


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int = N_PARAMS, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam step; ``state.t`` is the index of this step (starts at 1)."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    b1, b2, t = state.beta1, state.beta2, state.t
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t + 1, b1, b2, state.eps)


@dataclass(frozen=True)
class Normalizer:
    """Frozen per-channel scaling around the network.

    Inputs are standardised with ``mean``/``std``; raw outputs are multiplied
    by ``out_scale`` so that the model emits unnormalised state derivatives
    while every output channel is of order one inside the network.
    """

    mean: np.ndarray = field(default_factory=lambda: np.zeros(LAYER_SIZES[0]))
    std: np.ndarray = field(default_factory=lambda: np.ones(LAYER_SIZES[0]))
    out_scale: np.ndarray = field(default_factory=lambda: np.ones(LAYER_SIZES[-1]))

    @classmethod
    def fit(cls, inputs: np.ndarray, min_std: float = 1e-3) -> "Normalizer":
        inputs = np.asarray(inputs, dtype=float).reshape(-1, LAYER_SIZES[0])
        return cls(inputs.mean(axis=0), np.maximum(inputs.std(axis=0), min_std))

    def with_output_scale(self, targets: np.ndarray, min_std: float = 1e-3) -> "Normalizer":
        """Copy whose output scale is the per-channel std of ``targets`` (..., 4)."""
        targets = np.asarray(targets, dtype=float).reshape(-1, LAYER_SIZES[-1])
        return Normalizer(self.mean, self.std, np.maximum(targets.std(axis=0), min_std))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def save_checkpoint(path, theta: np.ndarray, norm: Normalizer, meta: dict | None = None) -> None:
    """Write parameters and normalisation statistics to a compressed ``.npz``."""
    header = {"version": CHECKPOINT_VERSION, "layer_sizes": list(LAYER_SIZES), "meta": meta or {}}
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
            theta=theta,
            mean=norm.mean,
            std=norm.std,
            out_scale=norm.out_scale,
        )


def load_checkpoint(path):
    """Return ``(theta, normalizer, meta)``."""
    path = Path(path)
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        if tuple(header["layer_sizes"]) != LAYER_SIZES:
            raise ValueError(f"{path}: layer sizes {header['layer_sizes']} != {LAYER_SIZES}")
        norm = Normalizer(data["mean"].copy(), data["std"].copy(), data["out_scale"].copy())
        return data["theta"].copy(), norm, header["meta"]

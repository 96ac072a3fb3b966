"""Residual MLP building blocks shared by the encoder/decoder networks.

A trunk is: input affine to `hidden`, then `n_blocks` residual blocks
(affine -> activation -> affine, skip-add), with optional pre-block layer
normalization. Output heads are plain affine layers; heads that must start
as a standard normal are zero-initialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden: int
    n_blocks: int
    out_dim: int
    layer_norm: bool = False
    activation: str = "relu"


_ACTIVATIONS = {"relu": ng.relu, "tanh": ng.tanh}


def init_mlp(
    spec: MlpSpec,
    rng: np.random.Generator,
    prefix: str,
    dtype=np.float64,
    zero_output: bool = False,
) -> list[tuple[str, np.ndarray]]:
    """He-initialized trunk parameters; the output layer optionally zeroed."""

    def dense(fan_in, fan_out, zero=False):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        return w.astype(dtype), np.zeros(fan_out, dtype=dtype)

    items = []
    w, b = dense(spec.in_dim, spec.hidden)
    items += [(f"{prefix}.in.w", w), (f"{prefix}.in.b", b)]
    for k in range(spec.n_blocks):
        if spec.layer_norm:
            items += [
                (f"{prefix}.block{k}.ln.g", np.ones(spec.hidden, dtype=dtype)),
                (f"{prefix}.block{k}.ln.b", np.zeros(spec.hidden, dtype=dtype)),
            ]
        w1, b1 = dense(spec.hidden, spec.hidden)
        w2, b2 = dense(spec.hidden, spec.hidden)
        items += [
            (f"{prefix}.block{k}.w1", w1),
            (f"{prefix}.block{k}.b1", b1),
            (f"{prefix}.block{k}.w2", w2),
            (f"{prefix}.block{k}.b2", b2),
        ]
    w, b = dense(spec.hidden, spec.out_dim, zero=zero_output)
    items += [(f"{prefix}.out.w", w), (f"{prefix}.out.b", b)]
    return items


def _layer_norm(x, gain, bias, eps=1e-5):
    mu = ng.vmean(x, axis=-1, keepdims=True)
    centered = ng.sub(x, mu)
    var = ng.vmean(ng.mul(centered, centered), axis=-1, keepdims=True)
    normed = ng.div(centered, ng.sqrt(ng.add(var, eps)))
    return ng.add(ng.mul(normed, gain), bias)


def mlp_forward(params, prefix: str, x, spec: MlpSpec):
    """Apply the trunk to a (batch, in_dim) input; returns (batch, out_dim)."""
    act = _ACTIVATIONS[spec.activation]
    h = ng.affine(x, params[f"{prefix}.in.w"], params[f"{prefix}.in.b"])
    for k in range(spec.n_blocks):
        u = h
        if spec.layer_norm:
            u = _layer_norm(
                u, params[f"{prefix}.block{k}.ln.g"], params[f"{prefix}.block{k}.ln.b"]
            )
        u = ng.affine(u, params[f"{prefix}.block{k}.w1"], params[f"{prefix}.block{k}.b1"])
        u = act(u)
        u = ng.affine(u, params[f"{prefix}.block{k}.w2"], params[f"{prefix}.block{k}.b2"])
        h = ng.add(h, u)
    return ng.affine(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])

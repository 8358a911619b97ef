"""Bias-corrected Adam over a fixed list of parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradError, Tensor


@dataclass
class AdamState:
    """First/second-moment buffers plus step counter for one parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float = 2e-4, beta1: float = 0.5,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are left untouched."""
    if len(params) != len(state.m):
        raise GradError(f"adam_step: {len(params)} params but state holds {len(state.m)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradError(f"adam_step: parameter {i} has no gradient")
        if p.grad.shape != state.m[i].shape:
            raise GradError(
                f"adam_step: parameter {i} gradient shape {p.grad.shape} != {state.m[i].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    step = state.lr / bc1
    inv_sqrt_bc2 = 1.0 / np.sqrt(bc2)
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v)
        denom *= inv_sqrt_bc2
        denom += state.eps
        # rebind rather than mutate: saved forward activations may alias p.data
        p.data = p.data - step * (m / denom)

"""Adam optimizer state and a finite-difference gradient checker."""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .rng import Rng
from .tensor import ShapeMismatch, Tape, Tensor


class AdamState:
    """Bias-corrected Adam moments for one named parameter group."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> Mapping[str, np.ndarray]:
    """One in-place Adam update for every named parameter; returns `params`."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name in params:
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"adam_step: grad {g.shape} vs param {p.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params


def grad_check(build: Callable[[Tape, list[Tensor]], Tensor],
               params: Sequence[np.ndarray], rng: Rng,
               coords_per_param: int = 6, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `build(tape, leaves)` must construct a scalar loss from parameter leaves
    and be deterministic across calls. Up to `coords_per_param` coordinates
    per parameter are probed (all of them for small parameters).
    """

    def evaluate(values: Sequence[np.ndarray]):
        tape = Tape()
        leaves = [tape.parameter(v) for v in values]
        loss = build(tape, leaves)
        if loss.data.shape != ():
            raise ShapeMismatch(f"grad_check: loss must be scalar, got {loss.shape}")
        if not np.isfinite(loss.data):
            raise ValueError("grad_check: non-finite loss")
        return tape, leaves, loss

    tape, leaves, loss = evaluate(params)
    grads = tape.backward(loss)
    analytic = [grads[leaf.tape_id] for leaf in leaves]

    worst = 0.0
    values = [np.array(p, dtype=np.float64) for p in params]
    for pi, p in enumerate(values):
        size = p.size
        if size <= coords_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, coords_per_param, replace=False)
        flat = p.reshape(-1)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            _, _, up = evaluate(values)
            flat[ci] = orig - h
            _, _, down = evaluate(values)
            flat[ci] = orig
            numeric = (float(up.data) - float(down.data)) / (2.0 * h)
            a = float(analytic[pi].reshape(-1)[ci])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > worst:
                worst = rel
    return worst

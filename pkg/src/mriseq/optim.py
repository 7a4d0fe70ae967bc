"""Adam optimizer and a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class OptimizerState:
    """Adam moments and step counter, aligned with a parameter list."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], learning_rate: float = 1e-4,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        state = cls(learning_rate, beta1, beta2, eps)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: list[Tensor], state: OptimizerState) -> None:
    """One bias-corrected Adam update; parameters with grad None are skipped."""
    if len(state.m) != len(params):
        raise ValueError(f"optimizer state tracks {len(state.m)} params, got {len(params)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Thin object wrapper around adam_step for a fixed parameter list."""

    def __init__(self, params: list[Tensor], learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState.for_params(self.params, learning_rate, beta1, beta2, eps)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_check(loss_fn, named_tensors, h: float = 1e-5, rng=None,
               max_coords: int | None = None) -> dict[str, float]:
    """Compare analytic grads of ``loss_fn()`` against central finite differences.

    ``loss_fn`` must rebuild the graph on each call and be a deterministic
    function of the tensors in ``named_tensors`` (name -> Tensor, 64-bit data).
    Checks every coordinate, or ``max_coords`` randomly sampled ones per tensor.
    Returns the max relative error per name, with relative error defined as
    |a - n| / max(|a|, |n|, 1e-6).
    """
    named_tensors = dict(named_tensors)
    for name, t in named_tensors.items():
        if t.data.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 tensors, {name} is {t.data.dtype}")
        if not t.data.flags.c_contiguous:
            raise ValueError(f"grad_check needs contiguous tensors, {name} is not")
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, t in named_tensors.items():
        if t.grad is None:
            raise ValueError(f"no gradient reached {name}")
        analytic[name] = t.grad.copy()
    report: dict[str, float] = {}
    for name, t in named_tensors.items():
        flat = t.data.reshape(-1)
        n_coords = flat.size
        if max_coords is not None and n_coords > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n_coords, size=max_coords, replace=False)
        else:
            coords = range(n_coords)
        worst = 0.0
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            up = float(loss_fn().data)
            flat[i] = keep - h
            down = float(loss_fn().data)
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
        report[name] = worst
    return report

"""Finite-difference gradient checking, independent of the tape machinery."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, get_tape, no_grad

FD_STEP = 1e-5  # central-difference step for 64-bit checks


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar-valued closure w.r.t. one tensor."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = FD_STEP) -> float:
    """Max relative error between tape gradients and finite differences.

    ``fn`` is a closure over ``params`` returning a scalar Tensor; params
    must be float64 for the stated tolerances to be meaningful.
    """
    tape = get_tape()
    mark = len(tape.nodes)
    for p in params:
        p.zero_grad()
    loss = fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_gradient(fn, p, h=h)
        denom = max(np.linalg.norm(numeric), 1e-12)
        err = np.linalg.norm(analytic - numeric) / denom
        worst = max(worst, float(err))
    del tape.nodes[mark:]
    return worst

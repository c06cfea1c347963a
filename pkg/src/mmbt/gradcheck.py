"""Finite-difference verification of autograd gradients.

The checker rebuilds the loss graph from scratch for every probe, so it
exercises the same code path training uses. It always runs in 64-bit
verification mode; the loss builder therefore sees float64 parameters and
must construct its own inputs through ``tensor()`` so they pick up the
active precision.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericalError


def check_gradients(build_loss, params, h=1e-6):
    """Return the worst relative error between autograd and central differences.

    build_loss: callable(dict[str, Tensor]) -> scalar loss Tensor. Called
        many times; must be a pure function of the parameters.
    params: dict name -> Tensor. Copied to float64 internally; the caller's
        tensors are never touched.
    h: central-difference step, (f(x+h) - f(x-h)) / 2h.

    The error for one scalar parameter is |g_auto - g_fd| / max(1, |g_fd|);
    the maximum over all parameters is returned. A parameterless function
    scores 0 by convention.
    """
    with T.verification_mode():
        p64 = {
            name: T.Tensor(p.data.astype(np.float64, copy=True), requires_grad=True)
            for name, p in params.items()
        }
        loss = build_loss(p64)
        if not isinstance(loss, T.Tensor) or loss.data.size != 1:
            raise ContractError("gradient check requires a scalar loss")
        T.backward(loss)
        autograds = {name: p.grad.copy() for name, p in p64.items()}

        worst = 0.0
        for name, p in p64.items():
            flat = p.data.reshape(-1)
            auto = autograds[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(build_loss(p64).data)
                flat[i] = orig - h
                f_minus = float(build_loss(p64).data)
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericalError(
                        f"loss is non-finite at finite-difference probe for '{name}'[{i}]"
                    )
                fd = (f_plus - f_minus) / (2.0 * h)
                err = abs(auto[i] - fd) / max(1.0, abs(fd))
                if err > worst:
                    worst = err
    return worst

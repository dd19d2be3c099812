"""AdamW with decoupled weight decay, plus a finite-difference checker."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DeterminismError
from .tensor import Tensor, backward


class AdamW:
    """Decoupled-weight-decay Adam over a name -> Tensor parameter dict.

    Beta/eps/decay defaults are common practice; the method itself only
    fixes the learning rate externally. Gradients are left untouched by
    ``step`` -- the caller zeroes them.
    """

    def __init__(self, params, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if isinstance(params, dict):
            self.params = dict(params)
        else:
            self.params = {str(i): p for i, p in enumerate(params)}
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.second_moment = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"adamw_step: parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            if self.weight_decay != 0.0:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adamw_step(optimizer):
    """Functional alias for one optimizer update."""
    optimizer.step()


def gradient_check(model_fn, params, epsilon=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``model_fn`` takes no arguments, reads the (float64) parameters, and
    returns a scalar loss Tensor. It must be deterministic: two calls at
    the same point must agree bit-exactly.
    """
    if isinstance(params, dict):
        plist = list(params.values())
    else:
        plist = list(params)

    base1 = float(model_fn().data)
    base2 = float(model_fn().data)
    if base1 != base2:
        raise DeterminismError(
            f"model_fn is not deterministic: {base1!r} != {base2!r}"
        )

    for p in plist:
        p.zero_grad()
    loss = model_fn()
    backward(loss)
    analytic = [np.array(p.grad, dtype=np.float64) for p in plist]

    max_rel = 0.0
    for p, ana in zip(plist, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(model_fn().data)
            flat[i] = orig - epsilon
            down = float(model_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(ana_flat[i]), abs(numeric), 1e-8)
            max_rel = max(max_rel, abs(ana_flat[i] - numeric) / denom)
    return max_rel

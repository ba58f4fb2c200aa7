"""First-order optimizers operating in place on parameter buffers."""

from __future__ import annotations

import numpy as np

from dasrf.errors import ContractError, NumericError


def _check_grad(name, grad):
    if grad is None:
        raise ContractError(f"parameter {name!r} has no gradient")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient in parameter {name!r}")


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * p;  p <- p - lr * v
    """

    def __init__(self, params: dict, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict | None = None) -> None:
        for name, p in self.params.items():
            grad = p.grad if grads is None else grads.get(name)
            _check_grad(name, grad)
            v = self.momentum * self.velocity[name] + grad + self.weight_decay * p.data
            self.velocity[name] = v
            p.data = (p.data - self.lr * v).astype(p.data.dtype)


def sgd_step(params: dict, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: dict | None = None) -> dict:
    """Functional form of one SGD update; returns the (updated) velocity map."""
    opt = SGD(params, lr, momentum, weight_decay)
    if velocity is not None:
        opt.velocity.update(velocity)
    opt.step()
    return opt.velocity


class Adam:
    """Adam with coupled L2 weight decay (decay added to the gradient)."""

    def __init__(self, params: dict, lr: float, betas=(0.5, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ContractError(f"learning rate must be non-negative, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        if self.lr == 0:
            return
        self.t += 1
        for name, p in self.params.items():
            _check_grad(name, p.grad)
            g = p.grad + self.weight_decay * p.data
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

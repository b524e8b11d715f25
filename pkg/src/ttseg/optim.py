"""Optimizers operating on named parameter dicts."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError


class SGD:
    """Plain momentum-free SGD: p <- p - lr * g. lr=0 is the identity."""

    kind = "sgd"

    def __init__(self, lr: float):
        if lr < 0:
            raise ConfigError(f"sgd lr must be >= 0, got {lr}")
        self.lr = lr
        self.step_count = 0

    def step(self, params: dict, grads: dict, frozen_names=(), lr: float | None = None):
        lr = self.lr if lr is None else lr
        for name in grads:
            if name in frozen_names:
                raise ContractError(f"gradient supplied for frozen parameter {name!r}")
            if name not in params:
                raise ContractError(f"gradient for unknown parameter {name!r}")
        for name in sorted(grads):
            params[name].data -= (lr * grads[name]).astype(params[name].dtype, copy=False)
        self.step_count += 1

    def state_dict(self):
        return {"kind": self.kind, "step": self.step_count, "lr": self.lr, "moments": {}}

    def load_state_dict(self, state):
        if state["kind"] != self.kind:
            raise ConfigError(f"optimizer state kind {state['kind']!r} does not match sgd")
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    kind = "adamw"

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError(f"adamw lr must be > 0, got {lr}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, frozen_names=(), lr: float | None = None):
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ConfigError(f"adamw step lr must be > 0, got {lr}")
        for name in grads:
            if name in frozen_names:
                raise ContractError(f"gradient supplied for frozen parameter {name!r}")
            if name not in params:
                raise ContractError(f"gradient for unknown parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name in sorted(grads):
            p = params[name]
            g = grads[name].astype(np.float32, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update).astype(p.dtype, copy=False)
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data

    def state_dict(self):
        return {
            "kind": self.kind,
            "step": self.step_count,
            "lr": self.lr,
            "betas": (self.beta1, self.beta2),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "moments": {
                name: {"m": self.m[name].copy(), "v": self.v[name].copy()} for name in sorted(self.m)
            },
        }

    def load_state_dict(self, state):
        if state["kind"] != self.kind:
            raise ConfigError(f"optimizer state kind {state['kind']!r} does not match adamw")
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        self.beta1, self.beta2 = state["betas"]
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        self.m = {name: mv["m"].copy() for name, mv in state["moments"].items()}
        self.v = {name: mv["v"].copy() for name, mv in state["moments"].items()}


def one_cycle_lr(step: int, total_steps: int, max_lr: float, div_initial: float = 10.0,
                 div_final: float = 1000.0, pct_warm: float = 0.3) -> float:
    """Cosine one-cycle schedule: max_lr/div_initial -> max_lr -> max_lr/div_final."""
    if total_steps <= 0:
        raise ConfigError("one_cycle_lr needs total_steps >= 1")
    lo = max_lr / div_initial
    fin = max_lr / div_final
    warm = max(1, int(round(pct_warm * total_steps)))
    if step < warm:
        frac = step / warm
        return lo + (max_lr - lo) * 0.5 * (1.0 - np.cos(np.pi * frac))
    frac = (step - warm) / max(1, total_steps - warm)
    return fin + (max_lr - fin) * 0.5 * (1.0 + np.cos(np.pi * min(1.0, frac)))

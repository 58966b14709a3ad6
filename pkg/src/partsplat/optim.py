"""Bias-corrected adaptive first-order optimizer shared by all training stages."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import DivergenceError


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter tensor."""

    m: Tensor
    v: Tensor
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def zeros_like(param: Tensor) -> "AdamState":
        return AdamState(m=torch.zeros_like(param), v=torch.zeros_like(param))

    def select(self, idx: Tensor) -> "AdamState":
        """Moment rows restricted to ``idx`` (used when pruning Gaussians)."""
        return AdamState(m=self.m[idx], v=self.v[idx], step=self.step,
                         beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def append_zeros(self, count: int) -> "AdamState":
        """Zero-initialized rows for newly created Gaussians."""
        pad_m = torch.zeros((count,) + self.m.shape[1:], dtype=self.m.dtype)
        pad_v = torch.zeros_like(pad_m)
        return AdamState(m=torch.cat([self.m, pad_m]), v=torch.cat([self.v, pad_v]),
                         step=self.step, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


def adam_step(
    params: Tensor, grads: Tensor, state: AdamState, lr: float, name: str = "params"
) -> tuple[Tensor, AdamState]:
    """One bias-corrected update. Returns the new parameter tensor; the state
    accumulators are updated in place and the step count incremented."""
    if params.shape != grads.shape:
        raise DivergenceError(f"{name}: gradient shape {tuple(grads.shape)} does not match "
                              f"parameters {tuple(params.shape)}")
    if not torch.isfinite(grads).all():
        raise DivergenceError(f"{name}: non-finite gradient at step {state.step + 1}")
    with torch.no_grad():
        state.step += 1
        state.m.mul_(state.beta1).add_(grads, alpha=1 - state.beta1)
        state.v.mul_(state.beta2).addcmul_(grads, grads, value=1 - state.beta2)
        m_hat = state.m / (1 - state.beta1**state.step)
        v_hat = state.v / (1 - state.beta2**state.step)
        new_params = params - lr * m_hat / (v_hat.sqrt() + state.eps)
    return new_params, state


@dataclass
class AdamGroups:
    """A set of named leaf tensors optimized together with per-group rates."""

    params: dict[str, Tensor] = field(default_factory=dict)
    states: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, param: Tensor) -> Tensor:
        param.requires_grad_(True)
        self.params[name] = param
        self.states[name] = AdamState.zeros_like(param)
        return param

    def step(self, lrs: dict[str, float]) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            new_p, _ = adam_step(p.detach(), p.grad, self.states[name], lrs[name], name)
            with torch.no_grad():
                p.copy_(new_p)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

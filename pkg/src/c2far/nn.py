"""Small neural-network core on top of torch.

torch provides tensors and reverse-mode autodiff; everything the model
layers on top (the LSTM stack convention, heads, the optimizer, parameter
counting, finite-difference checking) lives here.

LSTM layers use one combined bias per gate set: torch's second bias vector
(``bias_hh``) is pinned to zero and frozen, so parameter counts are
``4 * (H*d + H*H + H)`` per layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn

from .exceptions import InputError


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    # log1p(exp(x)) overflows for large x; rewrite as x + log1p(exp(-x))
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def linear_param_count(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def lstm_layer_param_count(n_in: int, n_hidden: int) -> int:
    return 4 * (n_hidden * n_in + n_hidden * n_hidden + n_hidden)


def lstm_stack_param_count(n_in: int, n_hidden: int, n_layers: int = 2) -> int:
    return lstm_layer_param_count(n_in, n_hidden) + (n_layers - 1) * lstm_layer_param_count(n_hidden, n_hidden)


class LstmStack(nn.Module):
    """Stacked LSTM with dropout between layers (training mode only).

    Dropout masks are drawn independently per timestep.
    """

    def __init__(self, n_in: int, n_hidden: int, dropout: float = 0.0, n_layers: int = 2):
        super().__init__()
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.n_layers = n_layers
        self.lstm = nn.LSTM(n_in, n_hidden, num_layers=n_layers, dropout=dropout if n_layers > 1 else 0.0)
        for name, p in self.lstm.named_parameters():
            if name.startswith("bias_hh"):
                with torch.no_grad():
                    p.zero_()
                p.requires_grad_(False)

    def zero_state(self, batch: int, dtype=None) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = dtype or next(self.parameters()).dtype
        shape = (self.n_layers, batch, self.n_hidden)
        return torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype)

    def forward(self, inputs: torch.Tensor, state=None):
        if inputs.shape[-1] != self.n_in:
            raise InputError(f"expected {self.n_in} input features, got {inputs.shape[-1]}")
        if state is None:
            state = self.zero_state(inputs.shape[1], inputs.dtype)
        return self.lstm(inputs, state)


def lstm_forward(stack: LstmStack, inputs: torch.Tensor, initial_state=None):
    """Run ``stack`` over a (time, batch, features) sequence; returns (outputs, final_state)."""
    return stack(inputs, initial_state)


def trainable_parameters(module: nn.Module) -> dict[str, torch.Tensor]:
    return {name: p for name, p in module.named_parameters() if p.requires_grad}


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in trainable_parameters(module).values())


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Exact gradients of a scalar ``loss`` with respect to each named parameter."""
    if loss.numel() != 1:
        raise InputError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adam_update(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One in-place Adam step with decoupled weight decay."""
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


class Adam:
    """Thin stateful wrapper around :func:`adam_update` for a module's trainable parameters."""

    def __init__(self, module: nn.Module, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = trainable_parameters(module)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, loss: torch.Tensor) -> None:
        grads = backward(loss, self.params)
        adam_update(self.params, grads, self.state, self.lr, self.weight_decay, self.betas, self.eps)


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-4,
    max_entries: int | None = None,
    floor: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    Relative error per entry is ``|a - f| / max(|a|, |f|, floor)``.  When
    ``max_entries`` is set, a random subset of entries per tensor is probed.
    """
    loss = loss_fn()
    analytic = backward(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and len(idx) > max_entries:
                idx = rng.choice(idx, size=max_entries, replace=False)
            ga = analytic[name].reshape(-1)
            for k in idx:
                orig = flat[k].item()
                flat[k] = orig + eps
                up = loss_fn().item()
                flat[k] = orig - eps
                down = loss_fn().item()
                flat[k] = orig
                fd = (up - down) / (2 * eps)
                a = ga[k].item()
                rel = abs(a - fd) / max(abs(a), abs(fd), floor)
                if not math.isfinite(rel):
                    return math.inf
                worst = max(worst, rel)
    return worst

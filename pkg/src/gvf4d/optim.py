"""AdamW with decoupled weight decay, operating on named parameter dicts."""

from __future__ import annotations

import torch


def init_adam_state(params: dict[str, torch.Tensor]) -> dict:
    return {
        "step": 0,
        "m": {k: torch.zeros_like(v) for k, v in params.items()},
        "v": {k: torch.zeros_like(v) for k, v in params.items()},
    }


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> dict:
    """One bias-corrected AdamW update, in place; returns the mutated state.

    Parameters whose gradient is missing/None are left untouched. A NaN
    gradient aborts with the offending parameter name.
    """
    state["step"] += 1
    t = state["step"]
    b1, b2 = betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if torch.isnan(g).any():
            raise ValueError(f"NaN gradient for parameter '{name}'")
        m, v = state["m"][name], state["v"][name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        update = (m / bc1) / ((v / bc2).sqrt() + eps)
        if weight_decay:
            update = update + weight_decay * p
        p.add_(update, alpha=-lr)
    return state


class AdamW:
    """Thin stateful wrapper for training loops over an nn.Module."""

    def __init__(self, module: torch.nn.Module, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(module.named_parameters())
        self.state = init_adam_state(self.params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items()}
        adamw_step(self.params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

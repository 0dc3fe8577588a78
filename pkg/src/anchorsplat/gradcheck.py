"""Central finite-difference gradient checking for torch scalar functions."""
from __future__ import annotations

from typing import Callable, Sequence

import torch

__all__ = ["numeric_gradient", "relative_error", "check_gradients"]


@torch.no_grad()
def numeric_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central differences of ``fn()`` with respect to every entry of ``tensor`` (perturbed in place)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(fn())
        flat[i] = old - eps
        lo = float(fn())
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-12) -> float:
    """``|a - n| / max(|a|, |n|)`` with vector 2-norms; 0 when both vanish."""
    scale = max(float(analytic.norm()), float(numeric.norm()))
    if scale < floor:
        return 0.0
    return float((analytic - numeric).norm()) / scale


def check_gradients(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], eps: float = 1e-5) -> list:
    """Relative error between autograd and central differences, one value per tensor."""
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    return [relative_error(a, numeric_gradient(fn, t, eps)) for a, t in zip(analytic, tensors)]

"""Dense-array primitives on top of torch autograd, plus finite-difference checking.

Arrays are ``torch.Tensor``; float32 is the training dtype and float64 the
verification dtype. Reverse rules come from torch's tape. Primitives refuse
general broadcasting: the second operand of ``add``/``mul`` may only omit
leading batch axes, which keeps every reverse rule a plain sum over those axes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

from .rng import make_rng

LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    pass


def _check_trailing(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if b.dim() > a.dim() or tuple(a.shape[a.dim() - b.dim():]) != tuple(b.shape):
        raise ValueError(f"{op}: shape {tuple(b.shape)} is not a trailing block of {tuple(a.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)."""
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ {tuple(a.shape)} @ {tuple(b.shape)}")
    if b.dim() > 2 and tuple(a.shape[:-2]) != tuple(b.shape[:-2]):
        raise ValueError(f"matmul: batch dims differ {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_trailing(a, b, "add")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_trailing(a, b, "mul")
    return a * b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: torch.Tensor, axis: int = -1, eps: float = LN_EPS) -> torch.Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    mu = x.mean(dim=axis, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=axis, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.gelu(x)


def reshape(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    return x.reshape(*shape)


def gather(x: torch.Tensor, index) -> torch.Tensor:
    """Rows of ``x`` at ``index`` (axis 0)."""
    return x.index_select(0, torch.as_tensor(index, dtype=torch.long))


def scatter_add(src: torch.Tensor, index, length: int) -> torch.Tensor:
    """Adjoint of :func:`gather`: accumulate rows of ``src`` into ``length`` slots."""
    out = src.new_zeros((length, *src.shape[1:]))
    return out.index_add(0, torch.as_tensor(index, dtype=torch.long), src)


def mean(x: torch.Tensor, axis: int | None = None) -> torch.Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


def sum_sq(x: torch.Tensor) -> torch.Tensor:
    return (x * x).sum()


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    n_samples: int | None = None,
    seed: int = 0,
    avoid: Callable[[torch.Tensor, int], bool] | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` is re-evaluated with each sampled coordinate nudged by ``+-eps``.
    Relative error is ``|a - n| / max(1, |a|, |n|)``. With ``n_samples`` set, that
    many coordinates are drawn uniformly over all parameters; ``avoid(p, i)``
    may veto coordinates (e.g. kinks).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]

    coords = [(pi, i) for pi, p in enumerate(params) for i in range(p.numel())]
    if n_samples is not None and n_samples < len(coords):
        rng = make_rng(seed, "grad_check")
        order = rng.permutation(len(coords))
        picked = []
        for j in order:
            pi, i = coords[j]
            if avoid is not None and avoid(params[pi], i):
                continue
            picked.append(coords[j])
            if len(picked) == n_samples:
                break
        coords = picked

    worst = 0.0
    with torch.no_grad():
        for pi, i in coords:
            flat = params[pi].view(-1)
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(f())
            flat[i] = orig - eps
            down = float(f())
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = float(analytic[pi].reshape(-1)[i])
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    return worst


def as_array(x, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)

"""Transformer building blocks: embeddings, adaLN conditioning, global and window
attention, dense FFN and top-k mixture-of-experts FFN.

All blocks operate on unbatched token matrices ``(L, D)`` with a single
conditioning vector ``(D,)``.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from . import numerics as F

INIT_STD = 0.02


def trunc_normal_(w: torch.Tensor, std: float = INIT_STD) -> torch.Tensor:
    return nn.init.trunc_normal_(w, std=std, a=-2 * std, b=2 * std)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, zero: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out))
        if not zero:
            trunc_normal_(self.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.add(F.matmul(x, self.weight), self.bias)


class Mlp(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int | None = None):
        super().__init__()
        self.fc1 = Linear(d_in, hidden)
        self.fc2 = Linear(hidden, d_out if d_out is not None else d_in)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


# --- embeddings ---------------------------------------------------------------

def _sincos(pos: np.ndarray, dim: int) -> np.ndarray:
    """``dim`` = 2 * n_freq: sin block then cos block."""
    half = dim // 2
    omega = 1.0 / 10000 ** (np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(pos, dtype=np.float64)[:, None] * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def pos_embed_3d(origins: np.ndarray, D: int) -> np.ndarray:
    """Fixed sinusoidal embedding, ``D/3`` dims per lattice axis (i, j, k)."""
    if D % 6:
        raise ValueError(f"positional width D={D} must be divisible by 6")
    origins = np.asarray(origins)
    return np.concatenate([_sincos(origins[:, a], D // 3) for a in range(3)], axis=1)


def timestep_sincos(t: int, dim: int) -> np.ndarray:
    return _sincos(np.array([t]), dim)[0]


class TimestepClassEmbed(nn.Module):
    """Sinusoidal timestep -> 2-layer MLP, plus a learned class-embedding row."""

    def __init__(self, D: int, num_classes: int, T: int, freq_dim: int = 64):
        super().__init__()
        self.T = T
        self.num_classes = num_classes
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(Linear(freq_dim, D), nn.SiLU(), Linear(D, D))
        self.table = nn.Parameter(torch.zeros(num_classes, D))
        trunc_normal_(self.table)

    def forward(self, t: int, c: int) -> torch.Tensor:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        if not 0 <= c < self.num_classes:
            raise ValueError(f"class id {c} outside [0, {self.num_classes})")
        freq = torch.as_tensor(timestep_sincos(t, self.freq_dim), dtype=self.table.dtype)
        return self.mlp(freq) + self.table[c]


# --- attention ----------------------------------------------------------------

class Attention(nn.Module):
    """Multi-head scaled dot-product self-attention over all given tokens."""

    def __init__(self, D: int, heads: int):
        super().__init__()
        if D % heads:
            raise ValueError(f"heads={heads} does not divide D={D}")
        self.heads = heads
        self.head_dim = D // heads
        self.qkv = Linear(D, 3 * D)
        self.proj = Linear(D, D)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        L, D = x.shape
        qkv = self.qkv(x).reshape(L, 3, self.heads, self.head_dim).permute(1, 2, 0, 3)
        q, k, v = qkv[0], qkv[1], qkv[2]  # (H, L, Dh)
        scores = F.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        w = F.softmax(scores, axis=-1)
        self.last_weights = w.detach()
        out = F.matmul(w, v).permute(1, 0, 2).reshape(L, D)
        return self.proj(out)


def window_order(G: int, R: int) -> np.ndarray:
    """Permutation taking lexicographic patch order to window-major order.

    ``x[window_order(G, R)]`` lists the ``R**3`` tokens of window 0 first, then
    window 1, ...; windows and their members are each in lexicographic order.
    """
    if R < 1 or G % R:
        raise ValueError(f"window size {R} does not divide lattice side {G}")
    W = G // R
    idx = np.arange(G**3).reshape(W, R, W, R, W, R)
    return idx.transpose(0, 2, 4, 1, 3, 5).reshape(-1)


def window_fold(x: torch.Tensor, R: int) -> torch.Tensor:
    """(L, D) in window-major order -> (L / R^3, D R^3); a pure reshape."""
    L, D = x.shape
    r3 = R**3
    if L % r3:
        raise ValueError(f"R^3={r3} does not divide L={L}")
    return x.reshape(L // r3, D * r3)


def window_unfold(x: torch.Tensor, R: int) -> torch.Tensor:
    n, w = x.shape
    r3 = R**3
    if w % r3:
        raise ValueError(f"folded width {w} not divisible by R^3={r3}")
    return x.reshape(n * r3, w // r3)


# --- feed-forward ---------------------------------------------------------------

class MoEFFN(nn.Module):
    """``sum_j TopK(Softmax(g(x)), k)_j * E_j(x)``; gates are not renormalised.

    Ties in the gate ranking go to the lower expert index. Each expert runs only
    on the tokens routed to it.
    """

    def __init__(self, D: int, hidden: int, n_experts: int, k: int):
        super().__init__()
        if not 1 <= k <= n_experts:
            raise ValueError(f"need 1 <= k <= n, got k={k}, n={n_experts}")
        self.k = k
        self.router = Mlp(D, D, n_experts)
        self.experts = nn.ModuleList(Mlp(D, hidden) for _ in range(n_experts))
        self.last_selection: np.ndarray | None = None

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def route(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (kept gates (L, n) with zeros off the top-k, selected (L, k))."""
        probs = F.softmax(self.router(x), axis=-1)
        order = torch.sort(probs.detach(), dim=-1, descending=True, stable=True).indices
        sel = order[:, : self.k]
        keep = torch.zeros_like(probs, dtype=torch.bool).scatter(1, sel, True)
        return probs * keep, sel

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gates, sel = self.route(x)
        self.last_selection = sel.cpu().numpy()
        out = torch.zeros_like(x)
        L = x.shape[0]
        for j, expert in enumerate(self.experts):
            rows = (sel == j).any(dim=1).nonzero(as_tuple=True)[0]
            if rows.numel() == 0:
                continue
            if rows.numel() == L:
                y = expert(x)
            else:
                y = expert(x.index_select(0, rows))
            out = out.index_add(0, rows, gates.index_select(0, rows)[:, j : j + 1] * y)
        return out


# --- blocks ----------------------------------------------------------------------

def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


class AdaLN(nn.Module):
    """cond -> ``n`` width-D modulation vectors, zero-initialised."""

    def __init__(self, D: int, n: int):
        super().__init__()
        self.n = n
        self.act = nn.SiLU()
        self.linear = Linear(D, n * D, zero=True)

    def forward(self, cond: torch.Tensor) -> tuple[torch.Tensor, ...]:
        return self.linear(self.act(cond)).chunk(self.n, dim=-1)


class Block(nn.Module):
    """Pre-norm transformer block with adaLN-Zero: y = x + gate * f(modulate(norm(x)))."""

    def __init__(self, D: int, heads: int, mlp_ratio: float = 4.0, n_experts: int = 0, k: int = 1):
        super().__init__()
        hidden = int(D * mlp_ratio)
        self.attn = Attention(D, heads)
        self.ffn = MoEFFN(D, hidden, n_experts, k) if n_experts else Mlp(D, hidden)
        self.ada = AdaLN(D, 6)

    def delta(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Sum of both residual updates, i.e. ``forward(x) - x`` without cancellation."""
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(cond)
        d1 = g1 * self.attn(modulate(F.layer_norm(x), sh1, sc1))
        d2 = g2 * self.ffn(modulate(F.layer_norm(x + d1), sh2, sc2))
        return d1 + d2

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(cond)
        x = x + g1 * self.attn(modulate(F.layer_norm(x), sh1, sc1))
        x = x + g2 * self.ffn(modulate(F.layer_norm(x), sh2, sc2))
        return x


class WindowBlock(nn.Module):
    """Decoder block attending over window-folded tokens.

    Input is in window-major order. Windows are folded and projected to width
    D, a :class:`Block` runs at the folded resolution, and the block's residual
    update for each window is added to all ``R**3`` of its tokens.
    """

    def __init__(self, D: int, heads: int, R: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.R = R
        self.fold_proj = Linear(D * R**3, D)
        self.inner = Block(D, heads, mlp_ratio)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        P = self.fold_proj(window_fold(x, self.R))
        delta = self.inner.delta(P, cond)
        return x + delta.repeat_interleave(self.R**3, dim=0)


class FinalLayer(nn.Module):
    def __init__(self, D: int, d_out: int):
        super().__init__()
        self.ada = AdaLN(D, 2)
        self.linear = Linear(D, d_out, zero=True)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift, scale = self.ada(cond)
        return self.linear(modulate(F.layer_norm(x), shift, scale))

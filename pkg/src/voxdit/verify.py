"""Finite-difference verification of primitives, layers and the end-to-end model (float64)."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from . import nn as blocks
from . import numerics as F
from .diffusion import dual_loss, make_schedule, q_sample
from .geometry import synth_shape
from .masking import lift_point_mask
from .model import MaskedVoxelDiT, ModelConfig
from .rng import make_rng

DTYPE = torch.float64


def _randn(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> torch.Tensor:
    return torch.tensor(rng.standard_normal(shape) * scale, dtype=DTYPE, requires_grad=True)


def _probe(out: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    w = torch.tensor(rng.standard_normal(tuple(out.shape)), dtype=DTYPE)
    return (out * w).sum()


def jitter_(module: torch.nn.Module, seed: int, scale: float = 0.05) -> torch.nn.Module:
    """Add Gaussian noise to every parameter so zero-initialised paths carry gradient."""
    rng = make_rng(seed, "jitter")
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.tensor(rng.standard_normal(tuple(p.shape)) * scale, dtype=p.dtype))
    return module


def primitive_checks(seed: int = 0) -> dict[str, float]:
    rng = make_rng(seed, "primitives")
    a, b = _randn(rng, 5, 4), _randn(rng, 4, 3)
    x = _randn(rng, 6, 7)
    bias = _randn(rng, 7)
    idx = np.array([4, 0, 0, 2, 5])
    src = _randn(rng, 5, 7)
    out: dict[str, float] = {}
    cases: dict[str, tuple[Callable[[], torch.Tensor], list[torch.Tensor]]] = {
        "matmul": (lambda: _probe(F.matmul(a, b), make_rng(seed, "w")), [a, b]),
        "add": (lambda: _probe(F.add(x, bias), make_rng(seed, "w")), [x, bias]),
        "mul": (lambda: _probe(F.mul(x, bias), make_rng(seed, "w")), [x, bias]),
        "softmax": (lambda: _probe(F.softmax(x, axis=-1), make_rng(seed, "w")), [x]),
        "layer_norm": (lambda: _probe(F.layer_norm(x), make_rng(seed, "w")), [x]),
        "gelu": (lambda: _probe(F.gelu(x), make_rng(seed, "w")), [x]),
        "reshape": (lambda: _probe(F.reshape(x, (7, 6)), make_rng(seed, "w")), [x]),
        "gather": (lambda: _probe(F.gather(x, idx), make_rng(seed, "w")), [x]),
        "scatter_add": (lambda: _probe(F.scatter_add(src, idx, 6), make_rng(seed, "w")), [src]),
        "mean": (lambda: F.mean(x * x), [x]),
        "sum_sq": (lambda: F.sum_sq(x), [x]),
    }
    for name, (f, params) in cases.items():
        out[name] = F.grad_check(f, params)
    return out


def layer_checks(seed: int = 0, n_samples: int = 64) -> dict[str, float]:
    """Parameter and input gradients of each block type on random tokens."""
    torch.manual_seed(seed)
    rng = make_rng(seed, "layers")
    D, L = 12, 8
    tokens = _randn(rng, L, D)
    cond = _randn(rng, D)
    layers: dict[str, torch.nn.Module] = {
        "linear": blocks.Linear(D, 5),
        "mlp": blocks.Mlp(D, 2 * D),
        "attention": blocks.Attention(D, 3),
        "moe_ffn": blocks.MoEFFN(D, 2 * D, 6, 2),
        "block": blocks.Block(D, 3, 2.0),
        "moe_block": blocks.Block(D, 3, 2.0, n_experts=4, k=2),
        "window_block": blocks.WindowBlock(D, 3, 2, 2.0),
        "final_layer": blocks.FinalLayer(D, 6),
    }
    out = {}
    for name, layer in layers.items():
        layer = jitter_(layer.to(DTYPE), seed, scale=0.2)
        wrng_seed = seed
        if name in ("linear", "mlp", "attention", "moe_ffn"):
            f = lambda layer=layer: _probe(layer(tokens), make_rng(wrng_seed, "w"))  # noqa: E731
        else:
            f = lambda layer=layer: _probe(layer(tokens, cond), make_rng(wrng_seed, "w"))  # noqa: E731
        params = [tokens, *layer.parameters()] + ([cond] if name not in ("linear", "mlp", "attention", "moe_ffn") else [])
        out[name] = F.grad_check(f, params, n_samples=n_samples, seed=seed)
    emb = jitter_(blocks.TimestepClassEmbed(D, 3, 1000).to(DTYPE), seed)
    out["timestep_class_embed"] = F.grad_check(
        lambda: _probe(emb(37, 1), make_rng(seed, "w")), list(emb.parameters()), n_samples=n_samples, seed=seed
    )
    return out


def micro_config(**overrides) -> ModelConfig:
    cfg = dict(V=8, p=2, D=24, encoder_depth=1, encoder_heads=2, decoder_depth=1, decoder_width=24,
               decoder_heads=2, wa_layers=[], R=2, n_experts=3, k=2, num_classes=2, mask_mode="fb",
               r_f=0.5, r_b=0.75, T=100)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def model_grad_check(config: ModelConfig | None = None, seed: int = 0, n_samples: int = 200) -> float:
    """End-to-end check of the masked dual loss with respect to sampled parameters."""
    cfg = config or micro_config()
    torch.manual_seed(seed)
    model = jitter_(MaskedVoxelDiT(cfg).to(DTYPE), seed)
    schedule = make_schedule(cfg.T)
    rng = make_rng(seed, "model_check")
    x0 = synth_shape("sphere", 96, seed).points
    eps = rng.standard_normal(x0.shape)
    t = cfg.T // 3
    x_t = q_sample(x0, t, eps, schedule)
    eps_t = torch.as_tensor(eps, dtype=DTYPE)

    def loss() -> torch.Tensor:
        out = model(x_t, t, 1, seed=seed)
        pm = lift_point_mask(x_t, out.patch_mask, cfg.V, cfg.p)
        return dual_loss(eps_t, out.eps_pred, pm, 0.1).total

    return F.grad_check(loss, list(model.parameters()), n_samples=n_samples, seed=seed)


def gradcheck_report(profile: str = "micro", seed: int = 0) -> dict[str, float]:
    if profile != "micro":
        raise ValueError(f"unknown gradcheck profile {profile!r}")
    report = {f"primitive/{k}": v for k, v in primitive_checks(seed).items()}
    report.update({f"layer/{k}": v for k, v in layer_checks(seed).items()})
    report["model/global_decoder"] = model_grad_check(micro_config(), seed)
    report["model/window_decoder"] = model_grad_check(micro_config(wa_layers=[0]), seed)
    return report

"""The masked voxel diffusion transformer.

Pipeline for one cloud ``x_t``::

    voxelize -> patchify -> embed + pos -> mask -> encoder (global attn, MoE FFN)
    -> scatter + mask tokens -> decoder (global / window attn) -> final linear
    -> unpatchify -> devoxelize at the input points
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from . import nn as blocks
from .masking import (
    MaskVector,
    build_mask,
    classify_patches,
    no_mask,
    random_mask,
    scatter_tokens,
    select_unmasked,
    unmasked_count,
)
from .numerics import check_finite
from .voxel import devoxelize, patch_origins, patchify, unpatchify, voxelize

MASK_MODES = ("fb", "random", "none")


@dataclass
class ModelConfig:
    V: int = 32
    p: int = 4
    D: int = 384
    encoder_depth: int = 12
    encoder_heads: int = 6
    decoder_depth: int = 4
    decoder_width: int = 384
    decoder_heads: int = 6
    wa_layers: list[int] = field(default_factory=lambda: [1, 3])
    R: int = 4
    n_experts: int = 6
    k: int = 2
    num_classes: int = 3
    use_moe: bool = True
    mask_mode: str = "fb"
    r_f: float = 0.95
    r_b: float = 0.99
    mlp_ratio: float = 4.0
    T: int = 1000

    def __post_init__(self) -> None:
        self.wa_layers = sorted(int(i) for i in self.wa_layers)

    @property
    def G(self) -> int:
        return self.V // self.p

    @property
    def L(self) -> int:
        return self.G**3

    def validate(self) -> "ModelConfig":
        V, p = self.V, self.p
        if V < 2 or V & (V - 1):
            raise ValueError(f"V must be a power of two >= 2, got {V}")
        if p < 1 or V % p:
            raise ValueError(f"patch size {p} does not divide V={V}")
        for name, width, heads in (("encoder", self.D, self.encoder_heads),
                                   ("decoder", self.decoder_width, self.decoder_heads)):
            if width % 6:
                raise ValueError(f"{name} width {width} must be divisible by 6")
            if heads < 1 or width % heads:
                raise ValueError(f"{name} heads {heads} do not divide width {width}")
        if self.encoder_depth < 0 or self.decoder_depth < 1:
            raise ValueError("need encoder_depth >= 0 and decoder_depth >= 1")
        if any(not 0 <= i < self.decoder_depth for i in self.wa_layers):
            raise ValueError(f"wa_layers {self.wa_layers} outside [0, {self.decoder_depth})")
        if self.wa_layers and (self.R < 1 or self.G % self.R):
            raise ValueError(f"window size R={self.R} does not divide lattice side {self.G}")
        if self.use_moe and not 1 <= self.k <= self.n_experts:
            raise ValueError(f"need 1 <= k <= n_experts, got k={self.k}, n={self.n_experts}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        for name in ("r_f", "r_b"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {r}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    eps_pred: torch.Tensor  # (N, 3)
    patch_mask: MaskVector
    routing: list[np.ndarray]  # per encoder layer, (L_u, k) selected experts

    @property
    def tokens_encoded(self) -> int:
        return self.patch_mask.L_u


class MaskedVoxelDiT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        cfg = config.validate()
        self.config = cfg
        D, Dd = cfg.D, cfg.decoder_width
        raw = 3 * cfg.p**3
        origins = patch_origins(cfg.V, cfg.p)

        self.patch_embed = blocks.Linear(raw, D)
        self.register_buffer("pos_enc", torch.as_tensor(blocks.pos_embed_3d(origins, D), dtype=torch.float32))
        self.register_buffer("pos_dec", torch.as_tensor(blocks.pos_embed_3d(origins, Dd), dtype=torch.float32))
        self.cond = blocks.TimestepClassEmbed(D, cfg.num_classes, cfg.T)
        n_exp = cfg.n_experts if cfg.use_moe else 0
        self.encoder = nn.ModuleList(
            blocks.Block(D, cfg.encoder_heads, cfg.mlp_ratio, n_exp, cfg.k) for _ in range(cfg.encoder_depth)
        )
        self.bridge = blocks.Linear(D, Dd) if Dd != D else None
        self.cond_bridge = blocks.Linear(D, Dd) if Dd != D else None
        self.mask_token = nn.Parameter(blocks.trunc_normal_(torch.zeros(Dd)))
        self.decoder = nn.ModuleList(
            blocks.WindowBlock(Dd, cfg.decoder_heads, cfg.R, cfg.mlp_ratio) if i in cfg.wa_layers
            else blocks.Block(Dd, cfg.decoder_heads, cfg.mlp_ratio)
            for i in range(cfg.decoder_depth)
        )
        self.final = blocks.FinalLayer(Dd, raw)
        if cfg.wa_layers:
            order = blocks.window_order(cfg.G, cfg.R)
        else:
            order = np.arange(cfg.L)
        self.register_buffer("order", torch.as_tensor(order, dtype=torch.long), persistent=False)
        self.register_buffer("inverse_order", torch.as_tensor(np.argsort(order), dtype=torch.long), persistent=False)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    def make_mask(self, grid, seed: int, mode: str | None = None) -> MaskVector:
        cfg = self.config
        mode = cfg.mask_mode if mode is None else mode
        if mode == "fb":
            return build_mask(classify_patches(grid, cfg.p), cfg.r_f, cfg.r_b, seed)
        if mode == "random":
            return random_mask(cfg.L, cfg.r_b, seed)
        if mode == "none":
            return no_mask(cfg.L)
        raise ValueError(f"unknown mask mode {mode!r}")

    def forward(self, points: np.ndarray, t: int, c: int, seed: int = 0,
                mask_mode: str | None = None) -> ForwardOutput:
        cfg = self.config
        points = np.asarray(points, dtype=np.float64)
        grid = voxelize(points, cfg.V)
        feat = torch.as_tensor(grid.feat, dtype=self.dtype)
        x = self.patch_embed(patchify(feat, cfg.p)) + self.pos_enc
        cond = self.cond(t, c)

        mask = self.make_mask(grid, seed, mask_mode)
        x_u, idx = select_unmasked(x, mask)
        routing = []
        if x_u.shape[0] > 0:
            for blk in self.encoder:
                x_u = blk(x_u, cond)
                if isinstance(blk.ffn, blocks.MoEFFN):
                    routing.append(blk.ffn.last_selection)
        if self.bridge is not None:
            x_u = self.bridge(x_u)
            cond = self.cond_bridge(cond)

        filler = self.mask_token.expand(cfg.L, -1) + self.pos_dec
        h = scatter_tokens(x_u, idx, filler)
        h = h.index_select(0, self.order)
        for blk in self.decoder:
            h = blk(h, cond)
        out = self.final(h, cond).index_select(0, self.inverse_order)

        grid_out = unpatchify(out, cfg.V, cfg.p)
        eps = devoxelize(grid_out, torch.as_tensor(points, dtype=self.dtype))
        check_finite(eps, f"model output (t={t}, class={c})")
        return ForwardOutput(eps, mask, routing)

    @torch.no_grad()
    def predict_noise(self, points: np.ndarray, t: int, c: int) -> np.ndarray:
        """Inference path: every token is encoded."""
        return self.forward(points, t, c, mask_mode="none").eps_pred.double().numpy()


# --- complexity ledger ------------------------------------------------------------

def _attention_macs(n: int, width: int) -> tuple[int, int]:
    """(score + weighted-sum MACs, projection MACs) for one attention layer."""
    scores = 2 * n * n * width
    proj = 4 * n * width * width
    return scores, proj


def count_flops(config: ModelConfig, L_u: int | None = None, occupancy: float | None = None,
                mask_mode: str | None = None) -> dict[str, int]:
    """Closed-form multiply-accumulate counts for one forward pass.

    The encoder token count is ``L_u`` if given; otherwise it follows from the
    mask mode and, for ``fb``, a foreground fraction ``occupancy`` of the ``L``
    patches (rounded to the nearest patch).
    """
    cfg = config
    L = cfg.L
    mode = cfg.mask_mode if mask_mode is None else mask_mode
    if L_u is None:
        if mode == "none":
            L_u = L
        elif mode == "random":
            L_u = unmasked_count(0, L, 0.0, cfg.r_b)
        else:
            if occupancy is None:
                raise ValueError("fb masking needs an occupancy fraction or explicit L_u")
            L_f = int(round(occupancy * L))
            L_u = unmasked_count(L_f, L - L_f, cfg.r_f, cfg.r_b)
    D, Dd = cfg.D, cfg.decoder_width
    hidden_e, hidden_d = int(D * cfg.mlp_ratio), int(Dd * cfg.mlp_ratio)
    raw = 3 * cfg.p**3

    enc_scores, enc_proj = _attention_macs(L_u, D)
    if cfg.use_moe:
        enc_ffn = L_u * (D * D + D * cfg.n_experts) + cfg.k * 2 * L_u * D * hidden_e
    else:
        enc_ffn = 2 * L_u * D * hidden_e
    enc_ada = 6 * D * D

    dec_scores = dec_proj = dec_ffn = fold = 0
    for i in range(cfg.decoder_depth):
        n = L // cfg.R**3 if i in cfg.wa_layers else L
        if i in cfg.wa_layers:
            fold += L * Dd * Dd
        s, pr = _attention_macs(n, Dd)
        dec_scores += s
        dec_proj += pr
        dec_ffn += 2 * n * Dd * hidden_d

    ledger = {
        "L": L,
        "L_u": L_u,
        "encoder_attention_scores": cfg.encoder_depth * enc_scores,
        "encoder_attention": cfg.encoder_depth * (enc_scores + enc_proj),
        "encoder_ffn": cfg.encoder_depth * enc_ffn,
        "decoder_attention_scores": dec_scores,
        "decoder_attention": dec_scores + dec_proj,
        "decoder_ffn": dec_ffn,
        "projections": L * raw * D + L * Dd * raw + fold + (cfg.encoder_depth + cfg.decoder_depth) * enc_ada
                       + (L_u * D * Dd if Dd != D else 0),
    }
    ledger["total"] = (ledger["encoder_attention"] + ledger["encoder_ffn"] + ledger["decoder_attention"]
                       + ledger["decoder_ffn"] + ledger["projections"])
    return ledger

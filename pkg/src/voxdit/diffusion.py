"""DDPM schedule, forward corruption, masked dual objective and ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np
import torch

from .geometry import PointCloud
from .numerics import NonFiniteError
from .rng import child_seed, make_rng

DEFAULT_LAMBDA = 0.1


@dataclass(frozen=True)
class Schedule:
    """Linear-beta DDPM schedule; arrays are indexed by ``t - 1`` for t = 1..T."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_variance: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def at(self, t: int) -> tuple[float, float, float]:
        """(beta_t, alpha_t, alpha_bar_t)."""
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        i = t - 1
        return float(self.beta[i]), float(self.alpha[i]), float(self.alpha_bar[i])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    ab_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior = beta * (1.0 - ab_prev) / (1.0 - alpha_bar)
    return Schedule(beta, alpha, alpha_bar, posterior)


def q_sample(x0, t: int, eps, schedule: Schedule):
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; numpy or torch inputs."""
    if tuple(np.shape(x0)) != tuple(np.shape(eps)):
        raise ValueError(f"x0 shape {np.shape(x0)} != eps shape {np.shape(eps)}")
    _, _, ab = schedule.at(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass
class LossTerms:
    denoise: torch.Tensor
    masked: torch.Tensor
    lam: float

    @property
    def total(self) -> torch.Tensor:
        return self.denoise + self.lam * self.masked


def dual_loss(eps: torch.Tensor, eps_pred: torch.Tensor, point_mask, lam: float = DEFAULT_LAMBDA) -> LossTerms:
    """Mean squared noise error on unmasked points plus ``lam`` times the same on masked points.

    Each term averages over the coordinates of its own partition; an empty
    partition contributes zero.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    m = torch.as_tensor(np.asarray(point_mask, dtype=bool))
    sq = (eps - eps_pred) ** 2
    zero = sq.new_zeros(())
    keep = ~m
    denoise = sq[keep].mean() if bool(keep.any()) else zero
    masked = sq[m].mean() if bool(m.any()) else zero
    return LossTerms(denoise, masked, lam)


def _predict(model, x_t: np.ndarray, t: int, c: int) -> np.ndarray:
    fn = getattr(model, "predict_noise", model)
    return np.asarray(fn(x_t, t, c), dtype=np.float64)


def p_sample_step(model, x_t: np.ndarray, t: int, c: int, seed: int, schedule: Schedule) -> np.ndarray:
    """One ancestral step with fixed variance ``sigma_t^2 = beta_t``; no noise at t = 1."""
    beta, alpha, ab = schedule.at(t)
    eps = _predict(model, x_t, t, c)
    if not np.all(np.isfinite(eps)):
        raise NonFiniteError(f"model produced non-finite noise at t={t}, class={c}")
    mu = (x_t - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
    if t == 1:
        return mu
    z = make_rng(seed, "p_sample", t).standard_normal(x_t.shape)
    return mu + np.sqrt(beta) * z


def sample(model, count: int, n_points: int, c: int, seed: int, schedule: Schedule,
           num_classes: int | None = None) -> list[PointCloud]:
    """Run the full reverse chain from Gaussian clouds; all tokens are processed."""
    if num_classes is None:
        num_classes = getattr(model, "num_classes", None)
    if num_classes is not None and not 0 <= c < num_classes:
        raise ValueError(f"class id {c} outside [0, {num_classes})")
    out = []
    for i in range(count):
        x = make_rng(seed, "sample_init", i).standard_normal((n_points, 3))
        for t in range(schedule.T, 0, -1):
            x = p_sample_step(model, x, t, c, seed=child_seed(seed, "chain", i), schedule=schedule)
        out.append(PointCloud(x, c))
    return out


"""Training loop: Adam on the masked dual objective, CSV logging, checkpoints, resumption."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .diffusion import Schedule, dual_loss, make_schedule, q_sample
from .geometry import Dataset, PointCloud, load_fpc_dir, normalize_dataset, resample, synthetic_dataset
from .masking import lift_point_mask
from .model import MaskedVoxelDiT
from .numerics import NonFiniteError
from .rng import child_seed, make_rng

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "denoise", "masked", "total", "tokens_encoded")
LOG_NAME = "loss_log.csv"


class Adam:
    """Bias-corrected Adam with explicit, serialisable moment buffers."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(self.b1).add_(g, alpha=1.0 - self.b1)
            v.mul_(self.b2).addcmul_(g, g, value=1.0 - self.b2)
            p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_tensors(self, names: list[str]) -> dict[str, torch.Tensor]:
        out = {}
        for name, m, v in zip(names, self.m, self.v):
            out[f"adam.m/{name}"] = m
            out[f"adam.v/{name}"] = v
        return out

    def load_state_tensors(self, names: list[str], tensors: dict[str, np.ndarray], step: int) -> None:
        self.step_count = step
        for i, name in enumerate(names):
            self.m[i] = torch.from_numpy(tensors[f"adam.m/{name}"]).to(self.m[i].dtype)
            self.v[i] = torch.from_numpy(tensors[f"adam.v/{name}"]).to(self.v[i].dtype)


@dataclass
class StepRecord:
    step: int
    denoise: float
    masked: float
    total: float
    tokens_encoded: int

    def row(self) -> list:
        return [self.step, repr(self.denoise), repr(self.masked), repr(self.total), self.tokens_encoded]


def load_dataset(cfg: TrainConfig) -> Dataset:
    d = cfg.data
    if d.path is None:
        return synthetic_dataset(d.kinds, d.per_class, d.n_points, cfg.seed)
    clouds = load_fpc_dir(d.path)
    clouds = [resample(c, d.n_points, child_seed(cfg.seed, "resample", i)) for i, c in enumerate(clouds)]
    normed, mean, scale = normalize_dataset(clouds)
    num_classes = max(c.label for c in normed) + 1
    return Dataset(normed, num_classes=num_classes, mean=mean, scale=scale)


def build_model(cfg: TrainConfig) -> MaskedVoxelDiT:
    """Parameters are initialised from a torch generator seeded off the run seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(child_seed(cfg.seed, "init"))
        return MaskedVoxelDiT(cfg.model)


def train_step(model: MaskedVoxelDiT, batch: list[PointCloud], step: int, seed: int, opt: Adam,
               schedule: Schedule, lam: float) -> StepRecord:
    """One optimisation step on ``batch``.

    Each item draws its own timestep and noise from the ``(seed, step, item)``
    stream; per-item losses are averaged in item order before backward.
    """
    cfg = model.config
    opt.zero_grad()
    totals, den, msk = [], [], []
    tokens = 0
    for i, cloud in enumerate(batch):
        rng = make_rng(seed, "item", step, i)
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(cloud.points.shape)
        x_t = q_sample(cloud.points, t, eps, schedule)
        out = model(x_t, t, cloud.label, seed=child_seed(seed, "mask", step, i))
        pm = lift_point_mask(x_t, out.patch_mask, cfg.V, cfg.p)
        terms = dual_loss(torch.as_tensor(eps, dtype=model.dtype), out.eps_pred, pm, lam)
        total = terms.total
        if not torch.isfinite(total):
            raise NonFiniteError(f"non-finite loss at step {step}, batch item {i}")
        totals.append(total)
        den.append(float(terms.denoise.detach()))
        msk.append(float(terms.masked.detach()))
        tokens += out.tokens_encoded
    loss = torch.stack(totals).mean()
    loss.backward()
    opt.step()
    n = len(batch)
    return StepRecord(step, math.fsum(den) / n, math.fsum(msk) / n, float(loss.detach()), tokens)


def pick_batch(dataset: Dataset, batch: int, seed: int, step: int) -> list[PointCloud]:
    rng = make_rng(seed, "batch", step)
    n = len(dataset.clouds)
    idx = rng.choice(n, size=batch, replace=batch > n)
    return [dataset.clouds[i] for i in idx]


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"ckpt_{step:07d}.fd3d"


def _save(model: MaskedVoxelDiT, opt: Adam, names: list[str], cfg: TrainConfig, step: int, path: Path) -> None:
    state = {"seed": cfg.seed, "step": step, "adam_step": opt.step_count, "train": cfg.to_dict()}
    save_checkpoint(model, path, state=state, extra=opt.state_tensors(names))


def _log_header(cfg: TrainConfig) -> str:
    return f"# config={cfg.to_json()}\n" + ",".join(LOG_FIELDS) + "\n"


def read_loss_log(path: str | Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [
        {"step": int(r["step"]), "denoise": float(r["denoise"]), "masked": float(r["masked"]),
         "total": float(r["total"]), "tokens_encoded": int(r["tokens_encoded"])}
        for r in rows
    ]


def train(cfg: TrainConfig, out_dir: str | Path, resume: str | Path | None = None,
          stop_after: int | None = None) -> Path:
    """Run ``cfg.steps`` optimisation steps; returns the final checkpoint path.

    ``resume`` continues from a checkpoint written by a previous run with the
    same config. ``stop_after`` halts early (after that global step) without
    writing the final checkpoint, which is how interruption is simulated.
    """
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e.strerror}") from e
    dataset = load_dataset(cfg)
    if max(dataset.labels) >= cfg.model.num_classes:
        raise ValueError(f"dataset has class {max(dataset.labels)} but model.num_classes={cfg.model.num_classes}")
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    log_path = out / LOG_NAME

    if resume is None:
        model = build_model(cfg)
        names = [n for n, p in model.named_parameters() if p.requires_grad]
        opt = Adam(model.parameters(), lr=cfg.lr)
        start = 0
        log_path.write_text(_log_header(cfg), encoding="utf-8")
        _save(model, opt, names, cfg, 0, checkpoint_path(out, 0))
    else:
        model, state, extra = load_checkpoint(resume, cfg.model)
        if state.get("train") != cfg.to_dict():
            raise ValueError(f"config mismatch: checkpoint {resume} was written by a different run config")
        names = [n for n, p in model.named_parameters() if p.requires_grad]
        opt = Adam(model.parameters(), lr=cfg.lr)
        opt.load_state_tensors(names, extra, state["adam_step"])
        start = int(state["step"])
        kept = []
        if log_path.exists():
            for line in log_path.read_text(encoding="utf-8").splitlines(keepends=True):
                head = line.split(",", 1)[0]
                if line.startswith("#") or head == "step" or (head.isdigit() and int(head) <= start):
                    kept.append(line)
        log_path.write_text("".join(kept) or _log_header(cfg), encoding="utf-8")

    model.train()
    last = start
    with open(log_path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for step in range(start + 1, cfg.steps + 1):
            batch = pick_batch(dataset, cfg.batch, cfg.seed, step)
            rec = train_step(model, batch, step, cfg.seed, opt, schedule, cfg.lam)
            writer.writerow(rec.row())
            fh.flush()
            last = step
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                _save(model, opt, names, cfg, step, checkpoint_path(out, step))
            if step % 50 == 0:
                log.info("step %d total %.5f tokens %d", step, rec.total, rec.tokens_encoded)
            if stop_after is not None and step >= stop_after:
                return checkpoint_path(out, step)
    final = out / "final.fd3d"
    _save(model, opt, names, cfg, last, final)
    return final


def export_routing_csv(model: MaskedVoxelDiT, dataset: Dataset, schedule: Schedule, seed: int,
                       samples_per_cloud: int = 1) -> str:
    """Expert-selection counts per (layer, class, expert) over noisy training inputs."""
    cfg = model.config
    counts: dict[tuple[int, int, int], int] = {}
    with torch.no_grad():
        for ci, cloud in enumerate(dataset.clouds):
            for s in range(samples_per_cloud):
                rng = make_rng(seed, "routing", ci, s)
                t = int(rng.integers(1, schedule.T + 1))
                x_t = q_sample(cloud.points, t, rng.standard_normal(cloud.points.shape), schedule)
                out = model(x_t, t, cloud.label, mask_mode="none")
                for layer, sel in enumerate(out.routing):
                    for e, c in zip(*np.unique(sel, return_counts=True)):
                        key = (layer, cloud.label, int(e))
                        counts[key] = counts.get(key, 0) + int(c)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "class", "expert", "selection_count"])
    n_layers = cfg.encoder_depth if cfg.use_moe else 0
    classes = sorted({c.label for c in dataset.clouds})
    for layer in range(n_layers):
        for c in classes:
            for e in range(cfg.n_experts):
                w.writerow([layer, c, e, counts.get((layer, c, e), 0)])
    return buf.getvalue()


def smoothed_drop(totals: list[float], head: int = 10, tail: int = 50) -> tuple[float, float]:
    """(mean of the first ``head`` totals, mean of the last ``tail`` totals)."""
    return float(np.mean(totals[:head])), float(np.mean(totals[-tail:]))


def config_from_checkpoint(path: str | Path) -> TrainConfig:
    from .checkpoint import read_checkpoint

    doc, _ = read_checkpoint(path)
    return TrainConfig.from_dict(json.loads(json.dumps(doc["state"]["train"])))

"""Command-line entry point: ``voxdit {stats,train,sample,eval,gradcheck,bench,routing}``.

Every command echoes its effective configuration as a ``# config=<json>``
first line of its CSV output (or a ``config`` key in JSON output). Failures
exit non-zero with a single ``error: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__


def _overrides(args: argparse.Namespace) -> dict:
    """Map CLI flags onto dotted config keys; flags beat file values."""
    o: dict = {}
    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    for flag, key in (("voxel", "model.V"), ("patch", "model.p"), ("rb", "model.r_b"), ("rf", "model.r_f"),
                      ("mask", "model.mask_mode"), ("topk", "model.k"), ("steps", "steps"),
                      ("batch", "batch"), ("lr", "lr")):
        v = getattr(args, flag, None)
        if v is not None:
            o[key] = v
    if getattr(args, "moe", None) is not None:
        o["model.use_moe"] = args.moe == "on"
    return o


def _seed(args: argparse.Namespace, default: int = 0) -> int:
    env = os.environ.get("FD3D_SEED")
    if env is not None:
        return int(env)
    return default if args.seed is None else args.seed


def _write(text: str, out: str | None, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / name).write_text(text, encoding="utf-8")
    print(str(d / name))


def _csv(header: dict, columns: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    buf.write(f"# config={json.dumps(header, sort_keys=True, separators=(',', ':'))}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


# --- commands -----------------------------------------------------------------------

def cmd_stats(args: argparse.Namespace) -> int:
    from .geometry import load_fpc_dir, synth_shape
    from .masking import occupancy_stats

    V = args.voxel or 32
    p = args.patch or 4
    seed = _seed(args)
    if args.data:
        clouds = load_fpc_dir(args.data)
        source = {"data": str(args.data)}
    else:
        kinds = args.kinds.split(",") if args.kinds else []
        clouds = [synth_shape(k, args.n_points, seed + 1000 * c + i, label=c)
                  for c, k in enumerate(kinds) for i in range(args.per_class)]
        source = {"kinds": kinds, "per_class": args.per_class, "n_points": args.n_points}
    if not clouds:
        raise ValueError("empty dataset")
    stats = occupancy_stats(clouds, V, p)
    classes = [k for k in stats if k != "all"]
    rows = [[k, f"{stats[k][0]:.4f}", f"{stats[k][1]:.4f}"] for k in classes]
    if len(classes) > 1:
        rows.append(["all", f"{stats['all'][0]:.4f}", f"{stats['all'][1]:.4f}"])
    header = {"command": "stats", "V": V, "p": p, "seed": seed, **source}
    _write(_csv(header, ["class", "occupied_pct", "non_occupied_pct"], rows), args.out, "occupancy.csv")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .config import ci_profile, flatten, load_config, micro_profile, read_config_doc
    from .trainer import train

    # precedence: profile < config file < flags < FD3D_SEED
    merged: dict = {}
    if args.profile:
        merged.update(flatten({"micro": micro_profile, "ci": ci_profile}[args.profile]()))
    if args.config:
        merged.update(flatten(read_config_doc(args.config)))
    merged.update(_overrides(args))
    cfg = load_config(None, merged)
    out = Path(args.out or "runs/train")
    final = train(cfg, out, resume=args.resume)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(str(final))
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    from .checkpoint import load_checkpoint
    from .diffusion import make_schedule, sample
    from .geometry import PointCloud, write_fpc, write_xyz

    model, state, _ = load_checkpoint(args.ckpt)
    model.eval()
    train_cfg = state.get("train", {})
    T = model.config.T
    schedule = make_schedule(T, train_cfg.get("beta_start", 1e-4), train_cfg.get("beta_end", 0.02))
    n_points = args.n_points or train_cfg.get("data", {}).get("n_points", 2048)
    seed = _seed(args)
    clouds = sample(model, args.count, n_points, args.cls, seed, schedule)
    out = Path(args.out or "samples")
    out.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(clouds):
        write_fpc(out / f"sample_{i:04d}.fpc", c)
        write_xyz(out / f"sample_{i:04d}.xyz", PointCloud(c.points, c.label))
    meta = {"config": {"command": "sample", "ckpt": str(args.ckpt), "count": args.count, "class": args.cls,
                       "n_points": n_points, "seed": seed, "T": T},
            "files": [f"sample_{i:04d}.fpc" for i in range(len(clouds))]}
    (out / "samples.json").write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")
    print(str(out))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .geometry import load_fpc_dir
    from .metrics import evaluate

    G = load_fpc_dir(args.gen)
    R = load_fpc_dir(args.ref)
    rows = [[m, k, f"{v:.4f}"] for m, k, v in evaluate(G, R)]
    header = {"command": "eval", "gen": str(args.gen), "ref": str(args.ref)}
    _write(_csv(header, ["metric", "distance_kind", "value"], rows), args.out, "metrics.csv")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .verify import gradcheck_report

    seed = _seed(args)
    report = gradcheck_report(args.profile, seed)
    worst = max(report.values())
    doc = {"config": {"command": "gradcheck", "profile": args.profile, "seed": seed},
           "checks": report, "max_relative_error": worst, "tolerance": args.tol, "passed": worst < args.tol}
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    _write(text, args.out, "gradcheck.json")
    print(f"max relative error {worst:.3e}", file=sys.stderr)
    return 0 if worst < args.tol else 1


def cmd_bench(args: argparse.Namespace) -> int:
    from .model import ModelConfig, count_flops

    voxels = [int(v) for v in args.voxels.split(",")]
    p = args.patch or 4
    r_b = 0.99 if args.rb is None else args.rb
    r_f = 0.95 if args.rf is None else args.rf
    rows = []
    for V in voxels:
        cfg = ModelConfig(V=V, p=p, r_b=r_b, r_f=r_f, wa_layers=[1, 3] if (V // p) % 4 == 0 else [])
        base = count_flops(cfg, mask_mode="none")
        for mode in ("none", "random", "fb"):
            led = count_flops(cfg, occupancy=args.occupancy, mask_mode=mode)
            reduction = 100.0 * (1.0 - led["L_u"] / led["L"])
            rows.append([V, p, mode, led["L"], led["L_u"], f"{reduction:.2f}",
                         led["encoder_attention_scores"], led["encoder_attention"], led["decoder_attention"],
                         led["total"], f"{led['total'] / base['total']:.4f}"])
    header = {"command": "bench", "voxels": voxels, "p": p, "r_b": r_b, "r_f": r_f, "occupancy": args.occupancy}
    cols = ["V", "p", "mask", "L", "L_u", "token_reduction_pct", "encoder_attention_score_macs",
            "encoder_attention_macs", "decoder_attention_macs", "total_macs", "total_vs_unmasked"]
    _write(_csv(header, cols, rows), args.out, "bench.csv")
    return 0


def cmd_routing(args: argparse.Namespace) -> int:
    from .checkpoint import load_checkpoint
    from .config import TrainConfig
    from .diffusion import make_schedule
    from .trainer import export_routing_csv, load_dataset

    model, state, _ = load_checkpoint(args.ckpt)
    model.eval()
    cfg = TrainConfig.from_dict(state["train"])
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    seed = _seed(args)
    body = export_routing_csv(model, load_dataset(cfg), schedule, seed)
    header = {"command": "routing", "ckpt": str(args.ckpt), "seed": seed}
    text = f"# config={json.dumps(header, sort_keys=True, separators=(',', ':'))}\n" + body
    _write(text, args.out, "routing.csv")
    return 0


# --- parser -------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (stdout if omitted, where applicable)")
    p.add_argument("--voxel", type=int, help="voxel resolution V")
    p.add_argument("--patch", type=int, help="patch size p")
    p.add_argument("--rb", type=float, help="background masking ratio")
    p.add_argument("--rf", type=float, help="foreground masking ratio")
    p.add_argument("--mask", choices=["fb", "random", "none"])
    p.add_argument("--moe", choices=["on", "off"])
    p.add_argument("--topk", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxdit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="per-class foreground/background patch occupancy")
    _common(p)
    p.add_argument("--data", help="directory of .fpc clouds")
    p.add_argument("--kinds", default="sphere", help="comma-separated synthetic kinds (one class each)")
    p.add_argument("--per-class", type=int, default=32)
    p.add_argument("--n-points", type=int, default=2048)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--profile", choices=["micro", "ci"], help="scaled-down preset applied before the config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate clouds from a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--class", dest="cls", type=int, default=0)
    p.add_argument("--n-points", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="1-NNA and COV between two .fpc directories")
    _common(p)
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _common(p)
    p.add_argument("--profile", default="micro", choices=["micro"])
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="encoder-token and MAC tables across voxel sizes")
    _common(p)
    p.add_argument("--voxels", default="32,64,128")
    p.add_argument("--occupancy", type=float, default=0.0234, help="foreground patch fraction")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("routing", help="expert selection counts per layer and class")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_routing)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError, KeyError) as e:
        msg = str(e).replace("\n", " ") or type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

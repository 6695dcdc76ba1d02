"""Command-line workbench.

Subcommands: synth, train, eval, flow, matchstats, costvis, gradcheck.
Exit codes: 0 on success, 2 for usage errors, 1 for runtime failures.
Given the same inputs and seeds, every run writes byte-identical tables
and .flo files.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import dataio, figures
from .config import RunConfig, apply_overrides, load_config
from .dataio import BIN_RANGES, costvol_vis, flow_to_color, make_dataset, write_flo
from .fields import FULL, FlowField
from .numerics import ParamStore, grad_check, no_grad
from .pipeline import bind_model, forward, init_model
from .supervision import TraceRow, evaluate, total_loss, train

EVAL_SEED_OFFSET = 10_000


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="run configuration file (key = value lines)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key (repeatable)")


def _resolve_config(args, ckpt: str | None = None) -> RunConfig:
    cfg = RunConfig()
    path = getattr(args, "config", None)
    if path is None and ckpt is not None:
        sibling = Path(ckpt).with_name("run.cfg")
        if sibling.exists():
            path = str(sibling)
    if path is not None:
        cfg = load_config(path)
    return apply_overrides(cfg, args.overrides)


def _load_model(ckpt: str, cfg: RunConfig):
    store = ParamStore.load(ckpt)
    return bind_model(store, cfg.model_config())


def _eval_dataset(cfg: RunConfig):
    return make_dataset(cfg.num_pairs, cfg.synth_spec(EVAL_SEED_OFFSET))


def _load_image(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _save_image(arr: np.ndarray, path: str):
    """(3, H, W) floats in [0, 1] -> 8-bit PNG."""
    rgb = (np.clip(arr, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
    figures.save_flow_png(rgb, path)


def _pad_to_eighth(img: np.ndarray) -> tuple[np.ndarray, int, int]:
    _, H, W = img.shape
    ph = (-H) % 8
    pw = (-W) % 8
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return img, H, W


def _report_lines(report: dataio.EpeReport) -> list[str]:
    lines = ["bin\tpixels\taepe_px"]
    for name, aepe, count in report.rows():
        text = "-" if math.isnan(aepe) else f"{aepe:.4f}"
        lines.append(f"{name}\t{count}\t{text}")
    lines.append(f"fl-all\t{report.count}\t{100 * report.fl_all:.4f}%")
    return lines


# -- subcommands -----------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["pair\tseed\tmean_mag_px\tmax_mag_px\tocclusion_frac"]
    for i in range(cfg.num_pairs):
        spec = cfg.synth_spec(i)
        sample = dataio.synth_pair(spec)
        stem = out / f"pair{i:03d}"
        _save_image(sample.image1, f"{stem}_img1.png")
        _save_image(sample.image2, f"{stem}_img2.png")
        write_flo(f"{stem}_flow.flo", sample.flow)
        figures.save_flow_png(flow_to_color(sample.flow), f"{stem}_flow.png")
        mag = np.hypot(sample.flow.array[0], sample.flow.array[1])
        rows.append(f"pair{i:03d}\t{spec.seed}\t{mag.mean():.4f}\t{mag.max():.4f}"
                    f"\t{sample.occlusion.mean():.4f}")
    (out / "dataset.tsv").write_text("\n".join(rows) + "\n")
    print("\n".join(rows))
    print(f"wrote {cfg.num_pairs} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = make_dataset(cfg.num_pairs, cfg.synth_spec())
    model = init_model(cfg.model_config(), seed=cfg.seed)
    print(f"training on {len(dataset)} pairs, {model.store.total_size()} parameters")
    print(TraceRow.HEADER)
    trace = train(model, cfg.model_config(), dataset, cfg.train_config(), cfg.loss_config(),
                  on_row=lambda r: print(r.line(), flush=True))
    (out / "trace.tsv").write_text(
        TraceRow.HEADER + "\n" + "\n".join(r.line() for r in trace) + "\n")
    model.store.save(str(out / "checkpoint.bin"))
    (out / "run.cfg").write_text(cfg.text())
    figures.save_training_curves(trace, str(out / "training.png"))
    print(f"checkpoint, trace.tsv, run.cfg, training.png written to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args, ckpt=args.ckpt)
    model = _load_model(args.ckpt, cfg)
    dataset = _eval_dataset(cfg)
    report = evaluate(model, cfg.model_config(), dataset,
                      use_matching_init=not args.zero_init)
    lines = _report_lines(report)
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.tsv").write_text("\n".join(lines) + "\n")
        figures.save_eval_bars(report, str(out / "eval.png"))
        print(f"metrics.tsv and eval.png written to {out}")
    return 0


def cmd_flow(args) -> int:
    cfg = _resolve_config(args, ckpt=args.ckpt)
    model = _load_model(args.ckpt, cfg)
    img1, H, W = _pad_to_eighth(_load_image(args.img1))
    img2, H2, W2 = _pad_to_eighth(_load_image(args.img2))
    if (H, W) != (H2, W2):
        raise ValueError(f"image sizes differ: {H}x{W} vs {H2}x{W2}")
    with no_grad():
        out = forward(model, cfg.model_config(), img1, img2)
    flow = out.final_flow.array[:, :H, :W]
    write_flo(f"{args.out}.flo", FlowField(flow, FULL))
    figures.save_flow_png(flow_to_color(flow), f"{args.out}.png")
    mag = np.hypot(flow[0], flow[1])
    print(f"flow {W}x{H}: mean |f| = {mag.mean():.3f} px, max |f| = {mag.max():.3f} px")
    print(f"wrote {args.out}.flo and {args.out}.png")
    return 0


def cmd_matchstats(args) -> int:
    cfg = _resolve_config(args, ckpt=args.ckpt)
    model = _load_model(args.ckpt, cfg)
    dataset = _eval_dataset(cfg)
    lines = ["sample\tcoverage\tcoarse_aepe_px"]
    covs, aepes = [], []
    with no_grad():
        for i, sample in enumerate(dataset):
            out = forward(model, cfg.model_config(), sample.image1, sample.image2)
            coverage = float(out.match.mutual.mean())
            pooled = dataio.coarse_from_full(sample.flow)
            err = 8.0 * np.hypot(*(out.init_flow.array - pooled.array))
            sel = out.match.mutual
            aepe = float(err[sel].mean()) if sel.any() else float("nan")
            covs.append(coverage)
            aepes.append(aepe)
            text = "-" if math.isnan(aepe) else f"{aepe:.4f}"
            lines.append(f"{i}\t{coverage:.4f}\t{text}")
    mean_aepe = float(np.nanmean(aepes)) if aepes else float("nan")
    lines.append(f"mean\t{np.mean(covs):.4f}\t{mean_aepe:.4f}")
    print("\n".join(lines))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "matchstats.tsv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_costvis(args) -> int:
    cfg = _resolve_config(args, ckpt=args.ckpt)
    model = _load_model(args.ckpt, cfg)
    dataset = _eval_dataset(cfg)
    if not 0 <= args.sample < len(dataset):
        raise ValueError(f"--sample must be in [0, {len(dataset) - 1}]")
    sample = dataset[args.sample]
    with no_grad():
        out = forward(model, cfg.model_config(), sample.image1, sample.image2)
    pooled = dataio.coarse_from_full(sample.flow)
    dist = costvol_vis(out.cost_volume, pooled, args.bin, window=args.window)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = args.bin.replace("+", "plus")
    tsv = out_dir / f"costvis_{tag}.tsv"
    png = out_dir / f"costvis_{tag}.png"
    tsv.write_text("\n".join("\t".join(f"{x:.6e}" for x in row) for row in dist) + "\n")
    figures.save_costvis_heatmap(dist, str(png), args.bin)
    center = float(dist[args.window, args.window])
    print(f"bin {args.bin}: center mass {center:.4f} of {dist.sum():.4f}")
    print(f"wrote {tsv} and {png}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)
    model = init_model(cfg.model_config(), seed=cfg.seed, dtype=np.float64)
    sample = dataio.synth_pair(cfg.synth_spec())
    img1 = sample.image1.astype(np.float64)
    img2 = sample.image2.astype(np.float64)

    def loss_fn(store):
        bound = bind_model(store, cfg.model_config())
        out = forward(bound, cfg.model_config(), img1, img2)
        return total_loss(out, sample, cfg.loss_config()).total

    hook = None
    if args.corrupt:
        if args.corrupt not in model.store:
            raise ValueError(f"--corrupt names unknown parameter {args.corrupt!r}")

        def hook(analytic, name=args.corrupt):
            # Deliberate fault injection: prove the checker catches a bad grad.
            analytic[name] *= 2.0

    print(f"checking {model.store.total_size()} parameter entries "
          f"across {len(model.store)} tensors (eps {args.eps:g}, tol {args.tol:g})")
    report = grad_check(loss_fn, model.store, eps=args.eps, tol=args.tol, grad_hook=hook)
    for name in sorted(report.per_param, key=report.per_param.get, reverse=True)[:10]:
        print(f"  {name}\t{report.per_param[name]:.3e}")
    print(report.summary())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchflow",
        description="Optical flow by global matching with iterative refinement")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="render a synthetic dataset to disk")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on synthetic pairs")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out pairs")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--out", help="also write metrics.tsv and eval.png here")
    p.add_argument("--zero-init", action="store_true",
                   help="start refinement from zero flow instead of the match estimate")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flow", help="compute flow between two images")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--img1", required=True)
    p.add_argument("--img2", required=True)
    p.add_argument("--out", required=True, help="output prefix for .flo and .png")
    p.set_defaults(fn=cmd_flow)

    p = sub.add_parser("matchstats", help="mutual-match coverage and coarse-flow error")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="also write matchstats.tsv here")
    p.set_defaults(fn=cmd_matchstats)

    p = sub.add_parser("costvis", help="average match distribution around the true target")
    _add_config_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bin", required=True, choices=sorted(BIN_RANGES),
                   help="displacement-magnitude bin")
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--sample", type=int, default=0, help="dataset sample index")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_costvis)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    _add_config_args(p)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", metavar="PARAM",
                   help="test hook: corrupt one analytic gradient to force a failure")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

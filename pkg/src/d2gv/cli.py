"""Command line interface: encode, render, prune-curve, metrics, bd, info."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import codec
from .grouping import EmptyGroupWarning
from .imageio import load_frames, to_uint8, write_png
from .metrics import PSNR_CAP, RdCurve, bd_metrics, bpp, ms_ssim, psnr_capped, ssim
from .model import locate_time
from .pruning import rank_by_area, rank_by_color_magnitude
from .raster import area_downsample
from .trainer import FitLog, TrainConfig, fit_video

ABLATIONS = ("no_coarse", "loss_l2_only", "loss_ssim_only", "no_ode", "no_dc", "no_dc_no_gate",
             "euler_integrator", "state_conditioned_ode", "no_grouping")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _ratios(text: str) -> list[float]:
    """'a:b:step' (inclusive) or a comma list."""
    if ":" in text:
        a, b, step = (float(v) for v in text.split(":"))
        n = int(np.floor((b - a) / step + 1e-9)) + 1
        return [round(a + i * step, 10) for i in range(n)]
    return list(_floats(text))


def cmd_encode(args) -> int:
    frames = load_frames(args.input)
    kw = {name: getattr(args, name) for name in ABLATIONS}
    cfg = TrainConfig(gop_size=args.gop, primitive_count=args.prims, scales=args.scales, seed=args.seed,
                      coarse_iters=args.coarse_iters, fine_iters=args.fine_iters,
                      log_every=args.log_every, **kw)
    logs: list[FitLog] | None = [] if args.log else None
    models = fit_video(frames, cfg, logs)
    nbytes = codec.save(models, args.out, quantize=args.quantize)
    if args.log:
        _write_log(args.log, logs)
    t, h, w = frames.shape[:3]
    print(f"wrote {args.out}: {len(models)} GoP(s), {nbytes} bytes, {bpp(nbytes, w, h, t):.4f} bpp")
    return 0


def _write_log(path, logs: list[FitLog]) -> None:
    rows = [{"gop": g, **row} for g, fl in enumerate(logs) for row in fl.rows]
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _parse_time(text: str) -> float:
    """Global frame position: an integer frame index or a fractional one (interpolation)."""
    return float(int(text)) if text.lstrip("-").isdigit() else float(text)


def cmd_render(args) -> int:
    models = codec.load(args.model)
    gop, t = locate_time(models, _parse_time(args.t))
    m = models[gop]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyGroupWarning)
        img = m.render(t, args.scale, budget=args.budget, keep_ratio=args.keep_ratio,
                       grouping=not args.no_grouping)
    write_png(args.out, img)
    print(f"rendered GoP {gop} t={t:.6f} at scale {args.scale:g} -> {args.out} ({img.shape[1]}x{img.shape[0]})")
    return 0


def prune_curve(model_path, ref_frames, ratios, ranking: str = "score", scale: float = 1.0,
                grouping: bool = False) -> list[dict]:
    """Rate/quality points of progressive decoding at each keep ratio.

    Rate is the byte size of the truncated stream (header plus each record
    with its dropped primitives removed), reported in bpp over all frames.
    """
    header_models = codec.load(model_path)
    with open(model_path, "rb") as fh:
        header = codec.read_header(fh)
    total = Path(model_path).stat().st_size
    prim_bytes = codec.PRIM_BYTES_QUANTIZED if header.quantized else codec.PRIM_BYTES
    n_total = sum(m.n_frames for m in header_models)
    if len(ref_frames) != n_total:
        raise ValueError(f"reference has {len(ref_frames)} frames, model has {n_total}")
    rows, seen = [], set()
    for ratio in sorted(ratios):
        if not 0.0 < ratio <= 1.0:
            raise ValueError("keep ratios must lie in (0, 1]")
        budgets = tuple(int(round(ratio * m.n_prims)) for m in header_models)
        if budgets in seen:
            continue
        seen.add(budgets)
        nbytes = total - sum((m.n_prims - k) * prim_bytes for m, k in zip(header_models, budgets))
        errs = []
        for g, (m, k) in enumerate(zip(header_models, budgets)):
            if ranking == "score":
                sub = codec.load_prefix(model_path, g, budget=k)
                idx = None
            else:
                rk = rank_by_area(m.canonical) if ranking == "area" else rank_by_color_magnitude(m.canonical)
                sub = m.copy()
                sub._ranking = rk
                idx = k
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", EmptyGroupWarning)
                for j, t in enumerate(sub.timestamps):
                    img = sub.render(t, scale, budget=idx, grouping=grouping)
                    ref = ref_frames[m.first_frame + j]
                    if scale != 1:
                        ref = area_downsample(ref, scale)
                    errs.append(np.mean((img - ref) ** 2))
        mse = float(np.mean(errs))
        quality = PSNR_CAP if mse == 0 else min(10 * np.log10(1 / mse), PSNR_CAP)
        rows.append({"keep_ratio": ratio, "bytes": nbytes,
                     "bpp": bpp(nbytes, header.width, header.height, n_total), "psnr": quality})
    return rows


def cmd_prune_curve(args) -> int:
    frames = load_frames(args.ref)
    rows = prune_curve(args.model, frames, _ratios(args.ratios), args.ranking, args.scale)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["keep_ratio", "bytes", "bpp", "psnr"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} points to {args.out}")
    return 0


def cmd_metrics(args) -> int:
    ref, test = load_frames(args.ref), load_frames(args.test)
    if ref.shape != test.shape:
        raise SystemExit(f"frame stacks differ: {ref.shape} vs {test.shape}")
    if args.srgb:
        ref, test = to_uint8(ref) / 255.0, to_uint8(test) / 255.0
    rows = [{"frame": k, "psnr": psnr_capped(a, b), "ssim": ssim(a, b), "ms_ssim": ms_ssim(a, b)}
            for k, (a, b) in enumerate(zip(ref, test))]
    mean = {"frame": "mean", **{k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "ms_ssim")}}
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["frame", "psnr", "ssim", "ms_ssim"])
        writer.writeheader()
        writer.writerows(rows + [mean])
    print(f"psnr {mean['psnr']:.3f} dB  ssim {mean['ssim']:.5f}  ms-ssim {mean['ms_ssim']:.5f}")
    return 0


def cmd_bd(args) -> int:
    rate, psnr_db = bd_metrics(RdCurve.from_csv(args.test), RdCurve.from_csv(args.anchor))
    print(f"BD-rate {rate:.4f} %")
    print(f"BD-PSNR {psnr_db:.4f} dB")
    return 0


def cmd_info(args) -> int:
    print(json.dumps(codec.info(args.model), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="d2gv", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("encode", help="fit a clip and write a .d2gv file")
    e.add_argument("--input", required=True, help="PNG directory or .y4m file")
    e.add_argument("--out", required=True)
    e.add_argument("--gop", type=int, default=10)
    e.add_argument("--prims", type=int, default=1000)
    e.add_argument("--scales", type=_floats, default=(1.0, 2.0, 4.0, 8.0))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--coarse-iters", type=int, default=5000)
    e.add_argument("--fine-iters", type=int, default=20000)
    e.add_argument("--quantize", action="store_true")
    e.add_argument("--log", help="training log CSV")
    e.add_argument("--log-every", type=int, default=500)
    for name in ABLATIONS:
        e.add_argument("--" + name.replace("_", "-"), dest=name, action="store_true")
    e.set_defaults(func=cmd_encode)

    r = sub.add_parser("render", help="decode one frame to PNG")
    r.add_argument("--model", required=True)
    r.add_argument("--scale", type=float, default=1.0)
    g = r.add_mutually_exclusive_group()
    g.add_argument("--keep-ratio", type=float)
    g.add_argument("--budget", type=int)
    r.add_argument("--t", required=True, help="frame index, or fractional frame position to interpolate")
    r.add_argument("--no-grouping", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("prune-curve", help="rate/PSNR of progressive prefixes")
    c.add_argument("--model", required=True)
    c.add_argument("--ref", required=True, help="reference frames (PNG directory or .y4m)")
    c.add_argument("--ratios", default="0.1:1.0:0.1")
    c.add_argument("--ranking", choices=("score", "area", "color"), default="score")
    c.add_argument("--scale", type=float, default=1.0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_prune_curve)

    m = sub.add_parser("metrics", help="PSNR / SSIM / MS-SSIM between two frame sets")
    m.add_argument("--ref", required=True)
    m.add_argument("--test", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--srgb", action="store_true", help="compare 8-bit sRGB values instead of linear floats")
    m.set_defaults(func=cmd_metrics)

    b = sub.add_parser("bd", help="Bjontegaard delta between two RD CSVs (columns bpp, psnr)")
    b.add_argument("--test", required=True)
    b.add_argument("--anchor", required=True)
    b.set_defaults(func=cmd_bd)

    i = sub.add_parser("info", help="container header, parameter count and bpp")
    i.add_argument("--model", required=True)
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"d2gv: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

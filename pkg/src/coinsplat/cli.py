"""Command-line entry point: synth, train, render, warp, eval, bench."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

THREADS_ENV = "COINSPLAT_THREADS"
log = logging.getLogger("coinsplat")


class CommandError(Exception):
    pass


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def _section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name, {}))


def _resolve_threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    return int(env) if env else None


def _init_threads(n: int | None) -> None:
    # numba reads NUMBA_NUM_THREADS once, at import time
    if n is not None and "numba" not in sys.modules:
        os.environ.setdefault("NUMBA_NUM_THREADS", str(max(1, n)))
    from .render import set_threads

    set_threads(n)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg) -> dict:
    from .dataset import save_dataset
    from .io import write_obj
    from .synth import InconsistencySpec, inject, make_scene, render_views

    opts = _section(cfg, "synth")
    seed = args.seed if args.seed is not None else int(opts.get("seed", 0))
    views = args.views if args.views is not None else int(opts.get("views", 24))
    size = args.size if args.size is not None else int(opts.get("size", 64))
    n = args.gaussians if args.gaussians is not None else int(opts.get("gaussians", 1280))
    if views < 2:
        raise CommandError("--views must be at least 2")
    if size < 11:
        raise CommandError("--size must be at least 11 (SSIM window)")
    spec = InconsistencySpec(
        color_sigma=args.color_sigma if args.color_sigma is not None else float(opts.get("color_sigma", 0.1)),
        blob_count=args.blobs if args.blobs is not None else int(opts.get("blobs", 3)),
        jitter=args.jitter if args.jitter is not None else float(opts.get("jitter", 0.0)),
        seed=seed,
    )
    st = make_scene(seed, n)
    clean = render_views(st.scene, views, size)
    bundle = inject(clean, spec)
    out = Path(args.out)
    meta = {"seed": seed, "perturbation": bundle.records, "gaussians": n, "size": size}
    save_dataset(out, bundle.perturbed, meta)
    save_dataset(out / "clean", clean, {"seed": seed, "clean": True})
    write_obj(out / "mesh.obj", st.mesh.deformed(), st.mesh.faces)
    return {"dataset": str(out), "views": views, "size": size, "gaussians": n}


def _train_config(args, cfg):
    from .coin import TrainConfig

    opts = _section(cfg, "train")
    for key in ("phase1_iters", "phase2_iters", "mode", "log_every", "checkpoint_every"):
        v = getattr(args, key, None)
        if v is not None:
            opts[key] = v
    if args.seed is not None:
        opts["seed"] = args.seed
    return TrainConfig.from_dict(opts)


def cmd_train(args, cfg) -> dict:
    from .coin import LossReport, load_checkpoint, save_checkpoint, train
    from .dataset import DatasetManifest
    from .io import load_parametric_mesh

    manifest = DatasetManifest.scan(args.dataset)
    dataset = manifest.load()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        config = resume.config
        for key in ("phase1_iters", "phase2_iters"):
            if getattr(args, key) is not None:
                setattr(config, key, getattr(args, key))
    else:
        config = _train_config(args, cfg)
    mesh = load_parametric_mesh(manifest.mesh_file) if manifest.mesh_file else None

    log_path = out / "train_log.csv"
    rows = []
    if resume is not None and log_path.exists():
        with open(log_path, newline="") as f:
            rows = [r for r in csv.reader(f)][1:]
        rows = [r for r in rows if int(r[0]) <= resume.iteration]
    model, history = train(dataset, config, mesh=mesh, resume=resume, checkpoint_dir=out / "checkpoints",
                           stop_at=args.stop_at)
    state = train.last_state
    ckpt = save_checkpoint(out / "checkpoint.bin", model, state.optimizer, state.iteration, config)
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LossReport.FIELDS)
        w.writerows(rows)
        for rep in history:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in rep.row()])
    return {"checkpoint": str(ckpt), "log": str(log_path), "iterations": state.iteration,
            "logged_rows": len(rows) + len(history)}


def cmd_render(args, cfg) -> dict:
    from .camera import Intrinsics, load_cameras, orbit_cameras
    from .coin import infer, load_checkpoint
    from .io import write_pfm, write_png

    state = load_checkpoint(args.checkpoint)
    if args.cameras:
        cams = load_cameras(args.cameras)
    else:
        size = args.size
        cams = orbit_cameras(args.orbit, args.radius, intrinsics=Intrinsics.from_fov(size, size, args.fov))
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    mode = "reference_embedding" if args.mode in ("reference", "reference_embedding") else args.mode
    for k, cam in enumerate(cams):
        res = infer(state.model, cam, mode, view_id=args.view)
        write_png(out / "images" / f"{k:03d}.png", res.color)
        if args.depth:
            (out / "depth").mkdir(exist_ok=True)
            write_pfm(out / "depth" / f"{k:03d}.pfm", res.depth)
    return {"rendered": len(cams), "mode": mode, "out": str(out)}


def evaluate(renders_dir, truth_dir) -> dict:
    """PSNR/SSIM per view on 8-bit images; ids are the PNG file stems."""
    from .io import read_png
    from .losses import psnr, ssim

    rd = Path(renders_dir)
    rd = rd / "images" if (rd / "images").is_dir() else rd
    td = Path(truth_dir)
    td = td / "images" if (td / "images").is_dir() else td
    truth = {p.stem: p for p in sorted(td.glob("*.png"))}
    renders = {p.stem: p for p in sorted(rd.glob("*.png"))}
    if not truth:
        raise CommandError(f"no ground-truth images in {td}")
    missing = sorted(set(truth) - set(renders))
    if missing:
        raise CommandError(f"renders missing views: {', '.join(missing)}")
    per_view = {}
    for vid in truth:
        a, b = read_png(renders[vid]), read_png(truth[vid])
        if a.shape != b.shape:
            raise CommandError(f"view {vid}: render {a.shape} vs ground truth {b.shape}")
        per_view[vid] = {"psnr": psnr(a, b), "ssim": ssim(a, b)}
    return {
        "views": per_view,
        "count": len(per_view),
        "mean_psnr": float(np.mean([v["psnr"] for v in per_view.values()])),
        "mean_ssim": float(np.mean([v["ssim"] for v in per_view.values()])),
    }


def cmd_eval(args, cfg) -> dict:
    import time

    t0 = time.perf_counter()
    report = evaluate(args.renders, args.ground_truth)
    report["runtime_s"] = time.perf_counter() - t0
    return report


def cmd_warp(args, cfg) -> dict:
    from .camera import load_cameras
    from .io import read_pfm, read_png, write_png
    from .warp import soften_mask, warp

    anchor = read_png(args.anchor)
    acam = load_cameras(args.anchor_cam)[args.anchor_index]
    tcam = load_cameras(args.target_cam)[args.target_index]
    warped, mask = warp(anchor, read_pfm(args.anchor_depth), acam, tcam, read_pfm(args.target_depth), args.tol)
    if args.band:
        mask = soften_mask(mask, args.band)
    write_png(args.out_image, warped)
    write_png(args.out_mask, mask.weights)
    return {"visible_fraction": float(np.mean(mask.weights > 0)), "out_image": args.out_image,
            "out_mask": args.out_mask}


def cmd_bench(args, cfg) -> dict:
    from .camera import Intrinsics, orbit_cameras
    from .io import write_png
    from .render import render_benchmark
    from .synth import make_scene

    seed = args.seed if args.seed is not None else 0
    st = make_scene(seed, args.gaussians)
    cam = orbit_cameras(1, 2.6, intrinsics=Intrinsics.from_fov(args.size, args.size, 40.0))[0]
    rep = render_benchmark(st.scene, cam, args.repeats, threads=_resolve_threads(args))
    image = rep.pop("image")
    rep["image_sha256"] = hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_png(out / "bench.png", image)
        (out / "stats.json").write_text(json.dumps(rep, indent=1))
    return rep


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [synth]/[train] sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help=f"worker cap (default: ${THREADS_ENV} or all cores)")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coinsplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-view dataset")
    s.add_argument("--views", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--gaussians", type=int)
    s.add_argument("--color-sigma", type=float)
    s.add_argument("--blobs", type=int)
    s.add_argument("--jitter", type=float)
    s.set_defaults(func=cmd_synth, out_required=True)

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    t.add_argument("--dataset", required=True)
    t.add_argument("--phase1-iters", type=int)
    t.add_argument("--phase2-iters", type=int)
    t.add_argument("--mode", choices=["coin", "baseline"])
    t.add_argument("--log-every", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop after this many total iterations")
    t.set_defaults(func=cmd_train, out_required=True)

    r = sub.add_parser("render", parents=[common], help="render a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--cameras", help="cameras.json; default is an orbit")
    r.add_argument("--orbit", type=int, default=24)
    r.add_argument("--radius", type=float, default=2.6)
    r.add_argument("--size", type=int, default=64)
    r.add_argument("--fov", type=float, default=40.0)
    r.add_argument("--mode", choices=["consistent", "reference", "reference_embedding"], default="consistent")
    r.add_argument("--view", type=int, help="embedding view id for reference mode")
    r.add_argument("--depth", action="store_true", help="also write PFM depth maps")
    r.set_defaults(func=cmd_render, out_required=True)

    w = sub.add_parser("warp", parents=[common], help="depth-guided warp of an anchor image")
    w.add_argument("--anchor", required=True)
    w.add_argument("--anchor-depth", required=True)
    w.add_argument("--target-depth", required=True)
    w.add_argument("--anchor-cam", required=True)
    w.add_argument("--target-cam", required=True)
    w.add_argument("--anchor-index", type=int, default=0)
    w.add_argument("--target-index", type=int, default=0)
    w.add_argument("--tol", type=float, default=0.01)
    w.add_argument("--band", type=int, default=0)
    w.add_argument("--out-image", required=True)
    w.add_argument("--out-mask", required=True)
    w.set_defaults(func=cmd_warp, out_required=False)

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of renders against ground truth")
    e.add_argument("--renders", required=True)
    e.add_argument("--ground-truth", required=True)
    e.set_defaults(func=cmd_eval, out_required=False)

    b = sub.add_parser("bench", parents=[common], help="forward render timing")
    b.add_argument("--gaussians", type=int, default=20000)
    b.add_argument("--size", type=int, default=512)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench, out_required=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.out_required and not args.out:
            raise CommandError(f"{args.command}: --out is required")
        cfg = _load_config_file(args.config)
        _init_threads(_resolve_threads(args))
        result = args.func(args, cfg)
    except Exception as exc:  # single-line diagnostic, nonzero exit
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"coinsplat {args.command}: error: {msg}", file=sys.stderr)
        return 1
    if args.command == "eval" and args.out:
        Path(args.out).write_text(json.dumps(result, indent=1, sort_keys=True))
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

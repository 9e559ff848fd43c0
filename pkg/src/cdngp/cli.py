"""Batch command-line front end: synth, train, render, eval, report.

Exit codes: 0 success, 1 runtime/numerical failure, 2 usage/config error.
Training options come from an optional flat JSON config file plus dotted
override flags (--train.t_chunk=10); unknown keys are rejected. The effective
config and seed are echoed into the output directory. --threads (or the
CDNGP_THREADS env var) pins the BLAS worker count for reproducibility.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import accounting, checkpoint, continual, scene_io
from .errors import (CdngpError, CheckpointFormatError, ConfigurationError,
                     NumericalError, OutOfRangeError, SceneSpecError)

_THREAD_LIMITER = None


def _pin_threads(n):
    global _THREAD_LIMITER
    if n is None:
        env = os.environ.get("CDNGP_THREADS")
        n = int(env) if env else None
    if n is not None:
        import threadpoolctl
        _THREAD_LIMITER = threadpoolctl.threadpool_limits(limits=n)
    return n


def _build_parser():
    p = argparse.ArgumentParser(prog="cdngp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    s.add_argument("--spec", type=Path, help="scene spec JSON (default: built-in)")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--substeps", type=int, default=512)

    t = sub.add_parser("train", help="continual training over a dataset")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--config", type=Path, help="flat JSON TrainConfig overrides")
    t.add_argument("--layout", choices=("voxel", "plane", "merf", "4d"))
    t.add_argument("--fusion", choices=("sum", "concat"))
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--resume", action="store_true",
                   help="continue from the last complete chunk in --out")

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--dataset", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--view", type=int, default=None,
                   help="view id (default: held-out view)")
    r.add_argument("--frames", default="all", help="frame, lo:hi, or 'all'")
    r.add_argument("--save-raw", action="store_true",
                   help="also write float32 arrays next to the PNGs")
    r.add_argument("--threads", type=int)

    e = sub.add_parser("eval", help="psnr/dssim metrics against a dataset")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--view", type=int, default=None)
    e.add_argument("--frames", default="all")
    e.add_argument("--threads", type=int)

    rep = sub.add_parser("report", help="size and bandwidth accounting")
    rep.add_argument("--checkpoint", type=Path, required=True)
    rep.add_argument("--out", type=Path, help="also write JSON reports here")
    return p


def _apply_dotted_overrides(cfg_dict, extras):
    """Apply --train.key=value tokens onto a flat config dict."""
    valid = {f.name for f in dataclasses.fields(continual.TrainConfig)}
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--train."):
            raise ConfigurationError(f"unrecognized argument {tok!r}")
        body = tok[len("--train."):]
        if "=" in body:
            key, val = body.split("=", 1)
        else:
            key = body
            i += 1
            if i >= len(extras):
                raise ConfigurationError(f"missing value for --train.{key}")
            val = extras[i]
        if key not in valid:
            raise ConfigurationError(f"unknown config key {key!r}")
        cfg_dict[key] = val
        i += 1
    return cfg_dict


def _coerce_config(cfg_dict):
    fields = {f.name: f for f in dataclasses.fields(continual.TrainConfig)}
    out = {}
    for key, val in cfg_dict.items():
        if key not in fields:
            raise ConfigurationError(f"unknown config key {key!r}")
        typ = fields[key].type
        if isinstance(val, str):
            if typ in ("int", int):
                val = int(val)
            elif typ in ("float", float):
                val = float(val)
            elif typ in ("bool", bool):
                val = val.lower() in ("1", "true", "yes")
        out[key] = val
    return out


def _parse_frames(spec, n_frames):
    if spec == "all":
        return list(range(n_frames))
    if ":" in spec:
        lo, hi = spec.split(":", 1)
        return list(range(int(lo), int(hi)))
    return [int(spec)]


def _save_png(path, img):
    from PIL import Image
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def _cmd_synth(args):
    if args.spec is not None:
        try:
            spec_json = json.loads(args.spec.read_text())
            spec = scene_io.SynthSceneSpec.from_json(spec_json)
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"bad scene spec: missing/invalid key {exc}") from exc
    else:
        spec = scene_io.default_scene_spec(seed=args.seed)
    out = scene_io.generate_dataset(spec, args.views, args.frames,
                                    args.resolution, args.seed, args.out,
                                    substeps=args.substeps)
    print(f"dataset written to {out}")
    return 0


def _cmd_train(args, extras):
    cfg_dict = {}
    if args.config is not None:
        cfg_dict.update(json.loads(args.config.read_text()))
    if args.fusion:
        cfg_dict["fusion"] = args.fusion
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg_dict = _apply_dotted_overrides(cfg_dict, extras)
    layout = args.layout or cfg_dict.pop("layout", "voxel")
    cfg_dict.pop("layout", None)
    config = continual.TrainConfig.for_layout(layout, **_coerce_config(cfg_dict))
    dataset = scene_io.load_dataset(args.dataset)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(json.dumps(config.to_json(), indent=1,
                                                     sort_keys=True))
    log_rows = []

    def progress(k, step, eta, loss):
        print(f"chunk {k} step {step}/{eta} loss {loss:.5f}", flush=True)

    try:
        repo = continual.run_continual(dataset, config, out_dir=args.out,
                                       resume=args.resume, log_rows=log_rows,
                                       progress=progress)
    except NumericalError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    _write_training_log(args.out / "training_log.csv", log_rows, repo)
    rep = accounting.size_report(repo)
    bw = accounting.bandwidth_report(repo)
    (args.out / "size_report.json").write_text(json.dumps(rep.to_json(), indent=1))
    (args.out / "bandwidth_report.json").write_text(json.dumps(bw.to_json(), indent=1))
    print(rep.table())
    print(bw.table())
    return 0


def _write_training_log(path, rows, repo):
    with open(path, "w") as f:
        f.write("# loss reduction: " + repo.provenance["loss_reduction"] + "\n")
        f.write("chunk,step,lr,total,photometric,distortion,opacity_entropy,spatial_l1\n")
        for row in rows:
            f.write(",".join(f"{v:.8g}" if isinstance(v, float) else str(v)
                             for v in row) + "\n")


def _cmd_render(args):
    repo = checkpoint.load_checkpoint(args.checkpoint)
    dataset = scene_io.load_dataset(args.dataset)
    view = dataset.held_out_view if args.view is None else args.view
    camera = dataset.camera(view)
    frames = _parse_frames(args.frames, dataset.n_frames)
    for f in frames:
        img, opacity = repo.render_frame(camera, f)
        _save_png(args.out / f"v{view:02d}_f{f:04d}.png", img)
        if args.save_raw:
            np.save(args.out / f"v{view:02d}_f{f:04d}.npy",
                    img.astype(np.float32))
            np.save(args.out / f"v{view:02d}_f{f:04d}_opacity.npy",
                    opacity.astype(np.float32))
    print(f"rendered {len(frames)} frame(s) to {args.out}")
    return 0


def _cmd_eval(args):
    repo = checkpoint.load_checkpoint(args.checkpoint)
    dataset = scene_io.load_dataset(args.dataset)
    view = dataset.held_out_view if args.view is None else args.view
    camera = dataset.camera(view)
    frames = _parse_frames(args.frames, dataset.n_frames)
    rows = []
    per_chunk = {}
    for f in frames:
        img, _ = repo.render_frame(camera, f)
        target = dataset.frame(view, f)
        p = scene_io.psnr(img, target)
        d = scene_io.dssim(img, target)
        rows.append((f, view, f"{p:.4f}", f"{d:.6f}"))
        k = repo.schedule.branch_for_frame(f)
        per_chunk.setdefault(k, []).append(p)
    args.out.mkdir(parents=True, exist_ok=True)
    scene_io.write_metrics_csv(args.out / "metrics.csv", rows)
    summary = {
        "view": view,
        "mean_psnr": float(np.mean([float(r[2]) for r in rows])),
        "per_chunk_psnr": {str(k): float(np.mean(v)) for k, v in sorted(per_chunk.items())},
    }
    (args.out / "metrics_summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))
    return 0


def _cmd_report(args):
    repo = checkpoint.load_checkpoint(args.checkpoint)
    if repo.missing_branches():
        print("checkpoint incomplete; missing branches:", file=sys.stderr)
        for k, start, stop in repo.missing_branches():
            print(f"  chunk {k}: frames {start}..{stop - 1}", file=sys.stderr)
        return 2
    rep = accounting.size_report(repo)
    bw = accounting.bandwidth_report(repo)
    print(rep.table())
    print(bw.table())
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "size_report.json").write_text(json.dumps(rep.to_json(), indent=1))
        (args.out / "bandwidth_report.json").write_text(json.dumps(bw.to_json(), indent=1))
    return 0


def main(argv=None):
    parser = _build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        if extras and args.command != "train":
            raise ConfigurationError(f"unrecognized arguments: {extras}")
        _pin_threads(getattr(args, "threads", None))
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "train":
            return _cmd_train(args, extras)
        if args.command == "render":
            return _cmd_render(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "report":
            return _cmd_report(args)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except (ConfigurationError, CheckpointFormatError, SceneSpecError,
            OutOfRangeError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, CdngpError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: ``recureg {register,train,eval,synth,inspect}``."""

import argparse
import configparser
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from recureg import dataio, evaluation
from recureg.cnn import Adam, canonical_network, count_parameters, small_network
from recureg.estimator import BlockMatchEstimator, CNNEstimator
from recureg.pyramid import RecursionConfig, effective_range, recursion_levels, register
from recureg.training import (
    CurriculumSchedule,
    DistortionSpec,
    Stage,
    TrainConfig,
    TrainSample,
    synth_distortion,
    train,
)

DEFAULT_SEED = 1234

log = logging.getLogger("recureg")


class CliError(Exception):
    pass


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} {p} does not exist")
    return p


def _writable(path):
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise CliError(f"output directory {parent} does not exist")
    return p


def _as_rgb(img):
    return np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img


def _make_estimator(args, channels):
    if args.estimator == "oracle":
        return BlockMatchEstimator(mu=int(args.mu), patch_radius=args.patch_radius, stereo=args.stereo,
                                   min_size=args.min_size)
    if args.checkpoint is None:
        raise CliError("the cnn estimator needs --checkpoint")
    net = dataio.load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    if net.in_channels != 2 * channels:
        raise CliError(f"checkpoint expects {net.in_channels // 2}-channel images, got {channels}")
    return CNNEstimator(net, mu=args.mu, stereo=args.stereo)


def _load_pair(left, right, estimator):
    a, b = dataio.read_image(left), dataio.read_image(right)
    if a.shape != b.shape:
        raise CliError(f"image shapes differ: {a.shape} vs {b.shape}")
    if estimator == "cnn":
        a, b = _as_rgb(a), _as_rgb(b)
    return a, b


def _write_field(d, path, stereo):
    if stereo:
        dataio.write_pfm(d[..., 0], path)
    else:
        dataio.write_pfm(np.concatenate([d[..., :2], np.zeros_like(d[..., :1])], axis=2), path)


def cmd_register(args, outputs):
    left, right = _existing(args.left, "image"), _existing(args.right, "image")
    out = _writable(args.out)
    ppm = _writable(args.ppm) if args.ppm else None
    img1, img2 = _load_pair(left, right, args.estimator)
    est = _make_estimator(args, 1 if img1.ndim == 2 else img1.shape[2])
    cfg = RecursionConfig(max_depth=args.max_depth)
    t0 = time.perf_counter()
    d = register(img1, img2, est, cfg)
    elapsed = time.perf_counter() - t0
    outputs.append(out)
    _write_field(d, out, args.stereo)
    if ppm:
        outputs.append(ppm)
        dataio.write_ppm(dataio.render_disparity(d), ppm)
    levels = recursion_levels(img1.shape, est.spec, cfg)
    print(f"depth {max(levels - 1, 0)}")
    print(f"levels {levels}")
    print(f"effective range {effective_range(cfg, est.spec, img1.shape):g} px")
    print(f"time {elapsed:.3f} s")


def _stage_size(text):
    h, w = (int(v) for v in text.lower().split("x"))
    return h, w


def read_train_config(path):
    """Parse an INI training config into ``(TrainConfig, schedule, options)``."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise CliError(f"cannot read config {path}")
    if "train" not in cp:
        raise CliError(f"{path}: missing [train] section")
    t = cp["train"]
    cfg = TrainConfig(
        mu=t.getfloat("mu", 4.0),
        continuity=t.getfloat("continuity", 0.5),
        smoothness_sigma=t.getfloat("smoothness_sigma", math.inf),
        max_shift=t.getfloat("max_shift", 8.0),
        blur_sigma=t.getfloat("blur_sigma", 1.0),
        mask_limit=t.getfloat("mask_limit", None),
        crop=t.getint("crop", 16),
        crops_per_level=t.getint("crops_per_level", 2),
        batch_samples=t.getint("batch_samples", 8),
        stereo=t.getboolean("stereo", True),
        augment=t.getboolean("augment", True),
        seed=t.getint("seed", DEFAULT_SEED),
    )
    stages = []
    for name in sorted((s for s in cp.sections() if s.startswith("stage")), key=lambda s: int(s[5:] or 0)):
        s = cp[name]
        missing = [k for k in ("depth", "steps", "min_size", "max_size") if k not in s]
        if missing:
            raise CliError(f"{path}: [{name}] is missing {', '.join(missing)}")
        try:
            stages.append(Stage(
                depth=s.getint("depth"),
                steps=s.getint("steps"),
                size_range=(_stage_size(s["min_size"]), _stage_size(s["max_size"])),
                lr=s.getfloat("lr", 1e-3),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{path}: bad [{name}] section: {exc}") from None
    try:
        schedule = CurriculumSchedule(stages)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None
    opts = {
        "network": t.get("network", "small"),
        "output_dir": t.get("output_dir", "run"),
        "dataset": t.get("dataset", None),
        "init": t.get("init", None),
    }
    if opts["network"] not in ("small", "canonical"):
        raise CliError(f"{path}: network must be 'small' or 'canonical'")
    return cfg, schedule, opts


def _dataset_samples(root):
    samples = []
    for rec in dataio.load_dataset(root):
        if not rec.supervised:
            continue
        left, right, disp = dataio.load_scene(rec)
        truth = np.zeros(disp.shape + (2,), np.float32)
        truth[..., 0] = disp
        truth[~np.isfinite(disp)] = np.inf
        samples.append(TrainSample(_as_rgb(left), _as_rgb(right), truth, provenance=rec.name))
    return samples


def cmd_train(args, outputs):
    cfg, schedule, opts = read_train_config(_existing(args.config, "config"))
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = Path(args.output_dir or opts["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _dataset_samples(_existing(opts["dataset"], "dataset")) if opts["dataset"] else None
    if opts["init"]:
        net = dataio.load_checkpoint(_existing(opts["init"], "initial checkpoint"), seed=cfg.seed)
    else:
        build = small_network if opts["network"] == "small" else canonical_network
        net = build(seed=cfg.seed, zero_last=True)
    metrics_path = out_dir / "metrics.jsonl"
    outputs.append(metrics_path)
    stage_ends = np.cumsum([s.steps for s in schedule.stages])
    t0 = time.perf_counter()
    with open(metrics_path, "w") as metrics:
        def on_step(rec):
            rec = dict(rec, time=round(time.perf_counter() - t0, 3))
            metrics.write(json.dumps(rec) + "\n")
            metrics.flush()
            if rec["step"] in stage_ends:
                ckpt = out_dir / f"stage{rec['stage']}.ckpt"
                outputs.append(ckpt)
                dataio.save_checkpoint(net, ckpt)
                print(f"stage {rec['stage']} done at step {rec['step']}: loss {rec['loss']:.4f} epe {rec['epe']:.3f}")

        train(net, schedule, cfg, Adam(), on_step=on_step, dataset_samples=dataset)
    final = out_dir / "model.ckpt"
    outputs.append(final)
    dataio.save_checkpoint(net, final)
    print(f"parameters {count_parameters(net)}")
    print(f"checkpoint {final}")


def _report_rows(name, pred, gt, occlusion):
    rows = [(name, evaluation.bad_pixel_report(pred, gt, "all", occlusion=occlusion))]
    if occlusion is not None:
        rows.append((name + "/nonocc", evaluation.bad_pixel_report(pred, gt, "non_occluded", occlusion=occlusion)))
    return rows


def cmd_eval(args, outputs):
    records = _writable(args.records) if args.records else None
    rows = []
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise CliError("--pred and --gt go together")
        pred = dataio.read_pfm(_existing(args.pred, "prediction"))
        gt = dataio.read_pfm(_existing(args.gt, "ground truth"))
        rows += _report_rows(Path(args.pred).stem, pred, gt, None)
    else:
        if not args.dataset:
            raise CliError("eval needs --dataset or --pred/--gt")
        index = dataio.load_dataset(_existing(args.dataset, "dataset"))
        pred_dir = _existing(args.pred_dir, "prediction directory") if args.pred_dir else None
        for rec in index:
            if not rec.supervised:
                continue
            left, right, gt = dataio.load_scene(rec)
            occlusion = None
            if pred_dir:
                pred = dataio.read_pfm(_existing(pred_dir / f"{rec.name}.pfm", "prediction"))
                right_pred = pred_dir / f"{rec.name}_right.pfm"
                if right_pred.exists():
                    occlusion, _ = evaluation.occlusion_mask(pred, dataio.read_pfm(right_pred), args.tol)
            else:
                if args.estimator == "cnn":
                    left, right = _as_rgb(left), _as_rgb(right)
                est = _make_estimator(args, 1 if left.ndim == 2 else left.shape[2])
                cfg = RecursionConfig(max_depth=args.max_depth)
                pred = register(left, right, est, cfg)
                occlusion, _ = evaluation.occlusion_mask(pred, register(right, left, est, cfg), args.tol)
            rows += _report_rows(rec.name, pred, gt, occlusion)
        if not rows:
            raise CliError(f"no scenes with ground truth under {args.dataset}")
    print(evaluation.format_table(rows))
    if records:
        outputs.append(records)
        evaluation.write_records(rows, records)


def cmd_synth(args, outputs):
    src = _existing(args.image, "image")
    out_dir = Path(args.out_dir)
    if not out_dir.is_dir():
        raise CliError(f"output directory {out_dir} does not exist")
    img = dataio.read_image(src)
    spec = DistortionSpec(
        max_magnitude=args.max_magnitude,
        continuity=args.continuity,
        smoothness_sigma=args.smoothness,
        stereo=args.stereo,
    )
    sample = synth_distortion(img, spec, args.seed)
    ext = ".ppm" if sample.img1.ndim == 3 and sample.img1.shape[2] == 3 else ".pgm"
    img1, img2, truth = out_dir / f"im0{ext}", out_dir / f"im1{ext}", out_dir / "disp0.pfm"
    for path, write in ((img1, lambda p: dataio.write_image(sample.img1, p)),
                        (img2, lambda p: dataio.write_image(sample.img2, p)),
                        (truth, lambda p: _write_field(sample.truth, p, args.stereo))):
        outputs.append(path)
        write(path)
    d = sample.truth
    print(f"max |d| {np.abs(d).max():.3f} px")
    print(f"wrote {img1} {img2} {truth}")


def cmd_inspect(args, outputs):
    if args.checkpoint:
        net = dataio.load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    else:
        net = canonical_network()
    dh, dw = net.margins
    shapes = net.layer_shapes(dh + 1, dw + 1)
    print(f"input {dh + 1}x{dw + 1}x{net.in_channels}")
    for i, (layer, shape) in enumerate(zip(net.layers, shapes)):
        kind = type(layer).__name__
        if kind == "ConvLayer":
            desc = f"conv {layer.kernel_h}x{layer.kernel_w} {layer.activation}"
        else:
            desc = f"dropout {layer.rate:g}"
        print(f"{i:2d} {desc:<18} {'x'.join(map(str, shape)):>10} {layer.n_params:>8}")
    print(f"total {count_parameters(net)}")


def build_parser():
    p = argparse.ArgumentParser(prog="recureg", description="Recursive coarse-to-fine image registration.")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for numeric kernels")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def estimator_opts(sp):
        sp.add_argument("--estimator", choices=("cnn", "oracle"), default="oracle")
        sp.add_argument("--checkpoint", help="network checkpoint for the cnn estimator")
        sp.add_argument("--mu", type=float, default=None, help="estimator range in px (oracle 2, cnn 4)")
        sp.add_argument("--patch-radius", type=int, default=3)
        sp.add_argument("--min-size", type=int, default=None, help="oracle window side")
        sp.add_argument("--max-depth", type=int, default=None, help="cap on recursive halvings")
        sp.add_argument("--stereo", action=argparse.BooleanOptionalAction, default=True,
                        help="horizontal displacements only")

    sp = sub.add_parser("register", help="estimate the displacement field between two images")
    sp.add_argument("left")
    sp.add_argument("right")
    sp.add_argument("out", help="output PFM")
    sp.add_argument("--ppm", help="optional false-color rendering")
    estimator_opts(sp)
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("train", help="train the network estimator")
    sp.add_argument("config", help="INI config file")
    sp.add_argument("--output-dir", help="overrides output_dir from the config")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="bad-pixel statistics")
    sp.add_argument("--dataset", help="dataset root with scene folders")
    sp.add_argument("--pred-dir", help="precomputed <scene>.pfm predictions")
    sp.add_argument("--pred", help="single prediction PFM")
    sp.add_argument("--gt", help="single ground-truth PFM")
    sp.add_argument("--records", help="write JSON-lines records here")
    sp.add_argument("--tol", type=float, default=1.0, help="left-right consistency tolerance")
    estimator_opts(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="distort an image with a random field")
    sp.add_argument("image")
    sp.add_argument("out_dir")
    sp.add_argument("--max-magnitude", type=float, default=8.0)
    sp.add_argument("--smoothness", type=float, default=16.0, help="field smoothing sigma; inf for a pure shift")
    sp.add_argument("--continuity", type=float, default=0.5)
    sp.add_argument("--stereo", action=argparse.BooleanOptionalAction, default=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("inspect", help="print layer shapes and parameter counts")
    sp.add_argument("checkpoint", nargs="?", help="defaults to the canonical architecture")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "mu", "unset") is None:
        args.mu = 4.0 if args.estimator == "cnn" else 2.0
    if args.command != "train" and args.seed is None:
        args.seed = DEFAULT_SEED
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    outputs = []
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args, outputs)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        dataio.remove_quietly(outputs)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        dataio.remove_quietly(outputs)
        print("error: interrupted", file=sys.stderr)
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())

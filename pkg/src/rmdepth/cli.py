"""Command-line entry point.

Subcommands: gen-data, train, eval-depth, eval-motion, eval-flow, infer,
grad-check, count-params, ablate.  Exit codes: 0 success, 2 usage errors
(unknown flags, unreadable paths), 1 for domain failures; failures print a
single machine-parsable line `error: <Class>: <message>` on stderr.

The environment variable RMDEPTH_THREADS caps the number of worker
processes used for parallel sample generation (default 1).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from . import geometry as geo
from . import gradcheck
from . import scenes
from . import training as tr
from .depthnet import DepthNetConfig, count_parameters
from .errors import InvalidArgumentError, InvalidConfigError, RMDepthError

CSV_COLUMNS = ("variant", "epoch", "lr", "photometric", "smooth_depth",
               "smooth_motion", "motion_reg", "total", "val_abs_rel",
               "val_photometric", "abs_rel", "sq_rel", "rms", "rms_log",
               "delta1", "delta2", "delta3", "iou", "aee")

ABLATION_VARIANTS = ("full", "no-warping", "static-concat", "no-modulation",
                     "conventional-upsample", "plain-sparsity", "no-reg",
                     "no-object-motion")


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RMDEPTH_THREADS", "1")))
    except ValueError:
        return 1


# -- image dumps -------------------------------------------------------------


def write_pgm16(path: str, gray: np.ndarray) -> None:
    """16-bit portable graymap, normalized per image; the applied scale is
    recorded in a sidecar text file so the dump stays invertible."""
    g = np.asarray(gray, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    span = hi - lo if hi > lo else 1.0
    q = np.round((g - lo) / span * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{g.shape[1]} {g.shape[0]}\n65535\n".encode())
        fh.write(q.tobytes())
    with open(path + ".scale.txt", "w") as fh:
        fh.write(f"min={lo!r}\nmax={hi!r}\n")


def write_pgm8(path: str, mask: np.ndarray) -> None:
    m = (np.asarray(mask) > 0).astype(np.uint8) * 255
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode())
        fh.write(m.tobytes())


def write_ppm8(path: str, rgb: np.ndarray) -> None:
    """8-bit portable pixmap from a (3, H, W) array in [0, 1]."""
    q = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    q = np.moveaxis(q, 0, -1)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{q.shape[1]} {q.shape[0]}\n255\n".encode())
        fh.write(q.tobytes())


def write_raw(path: str, a: np.ndarray) -> None:
    arr = np.ascontiguousarray(a, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())
    with open(path + ".shape.txt", "w") as fh:
        fh.write(",".join(str(s) for s in arr.shape) + "\n")


def read_raw(path: str) -> np.ndarray:
    with open(path + ".shape.txt") as fh:
        shape = tuple(int(x) for x in fh.read().strip().split(","))
    return np.fromfile(path, dtype="<f8").reshape(shape)


# -- model predictions -------------------------------------------------------


def predict_sample(depth_net, motion_net, sample, object_motion: bool = True):
    """Per-sample predictions: full-resolution depth plus, per source,
    (pose, full-res object motion, full flow, rigid flow)."""
    target = ad.constant(sample.frames[1][None])
    pyramid = depth_net(target)
    d_full = ad.bilinear_resize(pyramid[-1], 2)
    K = sample.intrinsics
    out = {"depth": np.asarray(d_full.data[0, 0], dtype=np.float64), "sources": []}
    H, W = out["depth"].shape
    for src_img in sample.sources:
        src = ad.constant(src_img[None])
        est = motion_net(target, src, d_full, K)
        pose = (est.rotation, est.translation)
        t_full = ad.bilinear_resize(est.finest, H // est.finest.shape[2]) \
            if object_motion else None
        full, _, valid = geo.synthesize_correspondence(d_full, K, pose, t_full)
        rigid = geo.rigid_flow(d_full, K, pose)
        out["sources"].append({
            "pose": est.pose_numpy(),
            "t_obj": None if t_full is None
            else np.asarray(t_full.data[0], dtype=np.float64),
            "full_flow": np.asarray(full.data[0], dtype=np.float64),
            "rigid_flow": np.asarray(rigid.data[0], dtype=np.float64),
            "valid": valid[0, 0].astype(bool),
        })
    return out


def _gt_flow(sample, i):
    d = ad.constant(sample.gt_depth[None, None])
    t_obj = ad.constant(sample.gt_t_obj[i][None])
    flow, _, valid = geo.synthesize_correspondence(d, sample.intrinsics,
                                                   sample.gt_poses[i], t_obj)
    return np.asarray(flow.data[0], dtype=np.float64), valid[0, 0].astype(bool)


# -- argument plumbing -------------------------------------------------------


def _require_readable(parser, path: str, kind: str = "path"):
    if not os.path.exists(path):
        parser.error(f"unreadable {kind}: {path}")
    return path


def _load_run_config(parser, args) -> tr.RunConfig:
    if args.config is None:
        cfg = tr.RunConfig()
    else:
        _require_readable(parser, args.config, "config file")
        cfg = tr.load_config(args.config)
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            parser.error(f"--set expects section.key=value, got '{item}'")
        key, value = item.split("=", 1)
        section, field_name = key.split(".", 1)
        d = cfg.to_dict()
        if section not in d:
            raise InvalidConfigError(f"unknown section '{section}'")
        cls = tr._SECTIONS[section]
        d[section][field_name] = tr._parse_value(cls, field_name, value)
        cfg = tr.RunConfig.from_dict(d)
    return cfg


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmdepth",
                                     description="Unsupervised monocular depth "
                                                 "and motion on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--boxes", type=int, default=2)
    p.add_argument("--texture", choices=scenes.TEXTURE_KINDS, default="noise")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train depth and motion networks")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--val", type=int, default=0, help="samples held out for validation")

    for name in ("eval-depth", "eval-motion", "eval-flow"):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} evaluation")
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint")
        if name == "eval-depth":
            p.add_argument("--pred-dir", help="directory of raw depth dumps")
            p.add_argument("--cap", type=float, default=80.0)
            p.add_argument("--scaling", choices=ev.SCALING_MODES, default="median")
        if name == "eval-motion":
            p.add_argument("--alpha", type=float, default=0.5)
        if name == "eval-flow":
            p.add_argument("--rigid-only", action="store_true")

    p = sub.add_parser("infer", help="dump qualitative outputs for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--precision", type=int, choices=(64,), default=64)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--ops", help="comma-separated subset of checks")

    p = sub.add_parser("count-params", help="print trainable parameter count")
    p.add_argument("--config", required=True,
                   help="config file path or the literal 'paper-shape'")

    p = sub.add_parser("ablate", help="run the ablation variant matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--val", type=int, default=2)
    return parser


# -- subcommand implementations ----------------------------------------------


def _cmd_gen_data(args) -> int:
    base = scenes.SceneConfig(height=args.height, width=args.width,
                              n_boxes=args.boxes, texture=args.texture,
                              seed=args.seed)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count)
    cfgs = [replace(base, seed=int(s)) for s in seeds]
    workers = _worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(scenes.generate, cfgs))
    else:
        samples = [scenes.generate(c) for c in cfgs]
    scenes.save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args, parser) -> int:
    _require_readable(parser, args.data, "dataset")
    run_cfg = _load_run_config(parser, args)
    samples = scenes.load_dataset(args.data)
    val = samples[-args.val:] if args.val else None
    train_samples = samples[:-args.val] if args.val else samples
    trainer = tr.train(train_samples, run_cfg, val_samples=val,
                       checkpoint_dir=args.out)
    _write_csv(os.path.join(args.out, "metrics.csv"),
               [{**row, "variant": "full"} for row in trainer.log])
    final = trainer.log[-1]
    print(f"epoch {final['epoch']} total {final['total']:.6f} "
          f"photometric {final['photometric']:.6f}")
    return 0


def _checkpoint_nets(parser, args):
    _require_readable(parser, args.checkpoint, "checkpoint")
    depth_net, motion_net, ckpt = tr.load_networks(args.checkpoint)
    return depth_net, motion_net, ckpt


def _cmd_eval_depth(args, parser) -> int:
    _require_readable(parser, args.data, "dataset")
    samples = scenes.load_dataset(args.data)
    protocol = ev.EvalProtocol(cap=args.cap, scaling=args.scaling)
    if args.pred_dir:
        _require_readable(parser, args.pred_dir, "prediction directory")
        preds = [read_raw(os.path.join(args.pred_dir, f"depth_{i:05d}.raw"))
                 for i in range(len(samples))]
    elif args.checkpoint:
        depth_net, motion_net, _ = _checkpoint_nets(parser, args)
        preds = [predict_sample(depth_net, motion_net, s)["depth"]
                 for s in samples]
    else:
        parser.error("eval-depth needs --checkpoint or --pred-dir")
    rows = [ev.depth_metrics(p, s.gt_depth, protocol).as_tuple()
            for p, s in zip(preds, samples)]
    mean = np.mean(np.asarray(rows), axis=0)
    print(" ".join(ev.DepthMetrics.FIELDS))
    print(" ".join(f"{v:.6f}" for v in mean))
    return 0


def _cmd_eval_motion(args, parser) -> int:
    _require_readable(parser, args.data, "dataset")
    depth_net, motion_net, _ = _checkpoint_nets(parser, args)
    samples = scenes.load_dataset(args.data)
    scores = []
    for s in samples:
        pred = predict_sample(depth_net, motion_net, s)
        for src in pred["sources"]:
            rigid = geo.motion_mask(src["full_flow"][None], src["rigid_flow"][None],
                                    alpha=args.alpha)[0, 0]
            scores.append(ev.seg_iou(1 - rigid, s.gt_moving_mask))
    print("overall static moving")
    print(f"{np.mean([x.overall for x in scores]):.6f} "
          f"{np.mean([x.static for x in scores]):.6f} "
          f"{np.mean([x.moving for x in scores]):.6f}")
    return 0


def _cmd_eval_flow(args, parser) -> int:
    _require_readable(parser, args.data, "dataset")
    depth_net, motion_net, _ = _checkpoint_nets(parser, args)
    samples = scenes.load_dataset(args.data)
    errs = []
    for s in samples:
        pred = predict_sample(depth_net, motion_net, s,
                              object_motion=not args.rigid_only)
        for i, src in enumerate(pred["sources"]):
            gt_flow, gt_valid = _gt_flow(s, i)
            valid = gt_valid & src["valid"] & (s.occlusion[i] == 0)
            errs.append(ev.flow_aee(src["full_flow"], gt_flow, valid))
    print(f"aee {np.mean(errs):.6f}")
    return 0


def _cmd_infer(args, parser) -> int:
    _require_readable(parser, args.data, "dataset")
    depth_net, motion_net, _ = _checkpoint_nets(parser, args)
    samples = scenes.load_dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise InvalidArgumentError(f"sample index {args.index} out of range")
    s = samples[args.index]
    os.makedirs(args.out, exist_ok=True)
    pred = predict_sample(depth_net, motion_net, s)
    write_pgm16(os.path.join(args.out, "depth.pgm"), pred["depth"])
    write_raw(os.path.join(args.out, "depth.raw"), pred["depth"])
    write_ppm8(os.path.join(args.out, "target.ppm"), s.frames[1])
    for i, src in enumerate(pred["sources"]):
        flow = src["full_flow"]
        mag = np.sqrt((flow ** 2).sum(axis=0))
        vis = np.stack([np.clip(flow[0] / (mag.max() + 1e-9) + 0.5, 0, 1),
                        np.clip(flow[1] / (mag.max() + 1e-9) + 0.5, 0, 1),
                        mag / (mag.max() + 1e-9)])
        write_ppm8(os.path.join(args.out, f"flow_{i}.ppm"), vis)
        write_raw(os.path.join(args.out, f"flow_{i}.raw"), flow)
        t_obj = src["t_obj"]
        write_pgm16(os.path.join(args.out, f"motion_{i}.pgm"),
                    np.sqrt((t_obj ** 2).sum(axis=0)))
        write_raw(os.path.join(args.out, f"motion_{i}.raw"), t_obj)
        rigid = geo.motion_mask(src["full_flow"][None], src["rigid_flow"][None])[0, 0]
        write_pgm8(os.path.join(args.out, f"mask_{i}.pgm"), 1 - rigid)
    print(f"wrote qualitative dumps to {args.out}")
    return 0


def _cmd_grad_check(args) -> int:
    names = set(args.ops.split(",")) if args.ops else None
    if names is not None:
        unknown = names - set(gradcheck.CHECKS)
        if unknown:
            raise InvalidArgumentError(f"unknown checks: {sorted(unknown)}")
    results = gradcheck.run_checks(seeds=range(args.seeds), names=names)
    print(f"{'op':24s} {'max_rel_err':>12s} {'tolerance':>10s} status")
    ok = True
    for name, (err, tol, passed) in results.items():
        ok &= passed
        print(f"{name:24s} {err:12.3e} {tol:10.0e} {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def _cmd_count_params(args, parser) -> int:
    if args.config == "paper-shape":
        cfg = DepthNetConfig.paper_shape()
    else:
        _require_readable(parser, args.config, "config file")
        cfg = tr.load_config(args.config).depth
    print(count_parameters(cfg))
    return 0


def variant_config(base: tr.RunConfig, name: str) -> tr.RunConfig:
    """The run config for one named ablation variant."""
    if name == "full":
        return base
    if name == "no-warping":
        return replace(base, motion=replace(base.motion, warping=False))
    if name == "static-concat":
        return replace(base, depth=replace(base.depth, fusion_mode="static-concat"))
    if name == "no-modulation":
        return replace(base, depth=replace(base.depth, fusion_mode="rmu-no-modulation"))
    if name == "conventional-upsample":
        return replace(base, depth=replace(base.depth, upsample_mode="conventional"))
    if name == "plain-sparsity":
        return replace(base, loss=replace(base.loss, regularizer="plain-sparsity"))
    if name == "no-reg":
        return replace(base, loss=replace(base.loss, regularizer="none"))
    if name == "no-object-motion":
        return replace(base, train=replace(base.train, object_motion=False))
    raise InvalidArgumentError(f"unknown ablation variant '{name}'")


def run_variant(samples, val_samples, run_cfg: tr.RunConfig) -> dict:
    """Train one variant and measure it on the validation samples."""
    trainer = tr.train(samples, run_cfg, val_samples=val_samples)
    row = dict(trainer.log[-1])
    metrics, ious, aees = [], [], []
    for s in val_samples:
        pred = predict_sample(trainer.depth_net, trainer.motion_net, s,
                              object_motion=run_cfg.train.object_motion)
        metrics.append(ev.depth_metrics(pred["depth"], s.gt_depth).as_tuple())
        for i, src in enumerate(pred["sources"]):
            rigid = geo.motion_mask(src["full_flow"][None],
                                    src["rigid_flow"][None])[0, 0]
            ious.append(ev.seg_iou(1 - rigid, s.gt_moving_mask).overall)
            gt_flow, gt_valid = _gt_flow(s, i)
            valid = gt_valid & src["valid"] & (s.occlusion[i] == 0)
            aees.append(ev.flow_aee(src["full_flow"], gt_flow, valid))
    for f, v in zip(ev.DepthMetrics.FIELDS, np.mean(np.asarray(metrics), axis=0)):
        row[f] = float(v)
    row["iou"] = float(np.mean(ious))
    row["aee"] = float(np.mean(aees))
    return row


def _cmd_ablate(args, parser) -> int:
    _require_readable(parser, args.data, "dataset")
    base = _load_run_config(parser, args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        variant_config(base, v)  # validate names before the expensive runs
    samples = scenes.load_dataset(args.data)
    if args.val < 1 or args.val >= len(samples):
        raise InvalidArgumentError("--val must leave at least one training sample")
    train_samples, val_samples = samples[:-args.val], samples[-args.val:]
    rows = []
    for v in variants:
        row = run_variant(train_samples, val_samples, variant_config(base, v))
        row["variant"] = v
        rows.append(row)
        print(f"{v}: total {row['total']:.6f} abs_rel {row['abs_rel']:.6f}")
    _write_csv(args.out, rows)
    return 0


def _write_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train":
            return _cmd_train(args, parser)
        if args.command == "eval-depth":
            return _cmd_eval_depth(args, parser)
        if args.command == "eval-motion":
            return _cmd_eval_motion(args, parser)
        if args.command == "eval-flow":
            return _cmd_eval_flow(args, parser)
        if args.command == "infer":
            return _cmd_infer(args, parser)
        if args.command == "grad-check":
            return _cmd_grad_check(args)
        if args.command == "count-params":
            return _cmd_count_params(args, parser)
        if args.command == "ablate":
            return _cmd_ablate(args, parser)
        parser.error(f"unknown command {args.command}")
    except RMDepthError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

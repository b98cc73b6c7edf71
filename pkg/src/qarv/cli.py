"""Command-line surface: train, compress, decompress, sweep, bdrate, ablate.

Configuration files are flat JSON documents whose keys mirror the model
and training config fields, plus `preset`, `model_seed`, `data_dir` and
`data_glob`.  Worker parallelism for sweeps is capped by QARV_THREADS.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob as globmod
import json
import os
import sys

import numpy as np

from . import metrics, ppm, training
from .codec import CompressedImage, DecodeMode, compress, decompress
from .data import ImageDataset
from .model import (ModelConfig, QarvModel, apply_ema_weights,
                    load_checkpoint, preset)

ABLATION_AXES = {
    "block-config": [("block_config", v) for v in ("A", "B", "C")],
    "affine-position": [("affine_position", v) for v in range(5)],
    "norm-type": [("norm_type", v) for v in ("layer", "group", "instance")],
    "lambda-range": [("lambda_high", v) for v in (32.0, 128.0, 512.0, 2048.0)],
}


class CliError(RuntimeError):
    pass


def _load_json(path: str) -> dict:
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    with open(path) as f:
        return json.load(f)


def _split_config(raw: dict) -> tuple[ModelConfig, training.TrainConfig, dict]:
    raw = dict(raw)
    extra = {
        "preset": raw.pop("preset", None),
        "model_seed": int(raw.pop("model_seed", 0)),
        "data_dir": raw.pop("data_dir", None),
        "data_glob": raw.pop("data_glob", "*.ppm"),
    }
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(training.TrainConfig)}
    base = dataclasses.asdict(preset(extra["preset"])) if extra["preset"] else \
        dataclasses.asdict(ModelConfig())
    train_kwargs: dict = {}
    for key, val in raw.items():
        known = False
        if key in model_fields:
            base[key] = tuple(val) if isinstance(val, list) else val
            known = True
        if key in train_fields:
            train_kwargs[key] = val
            known = True
        if not known:
            raise CliError(f"unknown config key {key!r}")
    model_cfg = ModelConfig(**base)
    train_cfg = training.TrainConfig(**train_kwargs)
    return model_cfg, train_cfg, extra


def _load_model(ckpt_path: str, use_ema: bool) -> QarvModel:
    if not os.path.exists(ckpt_path):
        raise CliError(f"checkpoint not found: {ckpt_path}")
    model, extras = load_checkpoint(ckpt_path)
    if use_ema:
        apply_ema_weights(model, extras)
    return model


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    model_cfg, train_cfg, extra = _split_config(_load_json(args.config))
    if args.iterations is not None:
        train_cfg = dataclasses.replace(train_cfg, iterations=args.iterations)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if not extra["data_dir"]:
        raise CliError("config needs a data_dir entry")
    dataset = ImageDataset.from_dir(extra["data_dir"], extra["data_glob"])
    model = QarvModel(model_cfg, seed=extra["model_seed"])
    result = training.train(model, dataset, train_cfg, args.out,
                            resume_from=args.resume)
    print(f"trained {result.iterations_run} iterations, "
          f"final loss {result.last_loss:.6g}")
    print(f"checkpoint: {result.final_checkpoint}")
    return 0


def cmd_compress(args) -> int:
    model = _load_model(args.checkpoint, args.ema)
    img = ppm.to_float(ppm.read_image(args.image))
    container = compress(model, img, args.lam)
    container.save(args.output)
    print(f"bpp={metrics.bpp(container, container.width, container.height):.6f}")
    return 0


def cmd_decompress(args) -> int:
    model = _load_model(args.checkpoint, args.ema)
    container = CompressedImage.load(args.input)
    mode = DecodeMode.parse(args.mode)
    x_hat = decompress(model, container, mode)
    ppm.write_image(args.output, ppm.to_uint8(x_hat))
    if args.ref:
        ref = ppm.to_float(ppm.read_image(args.ref))
        print(f"psnr={metrics.psnr(ref, x_hat):.4f}")
    return 0


def cmd_sweep(args) -> int:
    model = _load_model(args.checkpoint, args.ema)
    dataset_dir = args.images
    if not os.path.isdir(dataset_dir):
        raise CliError(f"image directory not found: {dataset_dir}")
    files = sorted(globmod.glob(os.path.join(dataset_dir, args.glob)))
    if not files:
        raise CliError(f"no images matching {args.glob!r} in {dataset_dir}")
    images = [(os.path.basename(f), ppm.to_float(ppm.read_image(f))) for f in files]
    lambdas = [float(v) for v in args.lambdas.split(",")]
    rows = metrics.rd_sweep(model, images, lambdas)
    metrics.write_rd_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_bdrate(args) -> int:
    anchor = metrics.curve_from_rows(metrics.read_rd_csv(args.anchor))
    test = metrics.curve_from_rows(metrics.read_rd_csv(args.test))
    print(f"{metrics.bd_rate(anchor, test):.2f}")
    return 0


def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise CliError(f"unknown axis {args.axis!r}; have {sorted(ABLATION_AXES)}")
    model_cfg, train_cfg, extra = _split_config(_load_json(args.config))
    train_cfg = dataclasses.replace(train_cfg, iterations=args.steps,
                                    checkpoint_every=0)
    if not extra["data_dir"]:
        raise CliError("config needs a data_dir entry")
    dataset = ImageDataset.from_dir(extra["data_dir"], extra["data_glob"])
    eval_images = [(f"eval_{i}", (img.astype(np.float32) / 255.0).transpose(2, 0, 1))
                   for i, img in enumerate(dataset.images[:args.eval_images])]
    os.makedirs(args.out_dir, exist_ok=True)
    train_fields = {f.name for f in dataclasses.fields(training.TrainConfig)}
    rows = []
    for field_name, value in ABLATION_AXES[args.axis]:
        cfg = dataclasses.replace(model_cfg, **{field_name: value})
        variant_train = (dataclasses.replace(train_cfg, **{field_name: value})
                         if field_name in train_fields else train_cfg)
        # one shared seed so variants differ by config, not by init luck
        model = QarvModel(cfg, seed=extra["model_seed"])
        label = f"{field_name}={value}"
        subdir = os.path.join(args.out_dir, label.replace("=", "_"))
        result = training.train(model, dataset, variant_train, subdir)
        sweep_lams = [cfg.lambda_low, cfg.lambda_high]
        pts = metrics.rd_sweep(model, eval_images, sweep_lams)
        mean_pts = [p for p in pts if p.image_id == metrics.MEAN_ROW_ID]
        rows.append((label, result.last_loss,
                     float(np.mean([p.bpp for p in mean_pts])),
                     float(np.mean([p.psnr for p in mean_pts]))))
        print(f"{label}: loss={result.last_loss:.6g} "
              f"bpp={rows[-1][2]:.4f} psnr={rows[-1][3]:.2f}")
    out_csv = os.path.join(args.out_dir, "ablation.csv")
    with open(out_csv, "w") as f:
        f.write("variant,final_loss,mean_bpp,mean_psnr\n")
        for label, loss, mean_bpp, mean_psnr in rows:
            f.write(f"{label},{loss:.8g},{mean_bpp:.8g},{mean_psnr:.8g}\n")
    print(f"wrote {out_csv}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qarv",
                                     description="variable-rate learned image codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a flat JSON config")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="output directory for checkpoints/logs")
    p.add_argument("--iterations", type=int, default=None, help="override config iterations")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="compress a PPM image to a .qarv file")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("output")
    p.add_argument("--lambda", dest="lam", type=float, required=True,
                   help="rate-distortion trade-off")
    p.add_argument("--ema", action="store_true", help="use EMA weights")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a .qarv file to a PPM image")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--mode", default="full",
                   help="full | progressive:i | loo:i | disjoint:i")
    p.add_argument("--ref", default=None, help="original image; prints PSNR")
    p.add_argument("--ema", action="store_true", help="use EMA weights")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("sweep", help="rate-distortion sweep over a directory")
    p.add_argument("checkpoint")
    p.add_argument("images", help="directory of PPM images")
    p.add_argument("--lambdas", required=True, help="comma-separated values")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--glob", default="*.ppm")
    p.add_argument("--ema", action="store_true", help="use EMA weights")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bdrate", help="average rate difference between two sweep CSVs")
    p.add_argument("anchor")
    p.add_argument("test")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("ablate", help="train and evaluate variants along one axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True,
                   help="block-config | affine-position | norm-type | lambda-range")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--eval-images", type=int, default=4)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``shiftlic <train|encode|decode|eval|analyze|bdrate>``.

Every failure prints exactly one line ``shiftlic-error: <kind>: <message>`` to
stderr and exits nonzero (1 for operation errors, 2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, codec, imageio, metrics, training
from .model import CheckpointError, Model, ModelConfig, load_checkpoint

SEED_ENV = "SHIFTLIC_SEED"


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise CliError("usage", f"override {item!r} is not key=value")
        v = _parse_value(val)
        out[key.strip()] = tuple(v) if isinstance(v, list) else v
    return out


def build_config(name: str, overrides: dict) -> ModelConfig:
    try:
        cfg = ModelConfig.preset(name)
        return cfg.with_overrides(**overrides) if overrides else cfg
    except (TypeError, ValueError, KeyError) as exc:
        raise CliError("config", str(exc)) from exc


def resolve_seed(arg: int | None) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError as exc:
            raise CliError("usage", f"{SEED_ENV}={env!r} is not an integer") from exc
    return 0 if arg is None else arg


def parse_size(text: str) -> tuple[int, int]:
    """``WxH`` to (H, W)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise CliError("usage", f"size {text!r} is not WxH") from exc
    if w <= 0 or h <= 0 or w % 64 or h % 64:
        raise CliError("usage", f"size {text!r} must be positive multiples of 64")
    return h, w


def _load_model(path, config: ModelConfig | None = None) -> Model:
    try:
        m = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError("io", f"checkpoint not found: {path}") from exc
    except CheckpointError as exc:
        raise CliError("checkpoint", str(exc)) from exc
    if config is not None and config.config_id() != m.config.config_id():
        raise CliError("config", f"checkpoint config id {m.config.config_id()} does not match "
                                 f"requested config id {config.config_id()}")
    return m


def _read_image(path) -> np.ndarray:
    try:
        return imageio.read_ppm(path)
    except FileNotFoundError as exc:
        raise CliError("io", f"image not found: {path}") from exc
    except (OSError, imageio.ImageFormatError) as exc:
        raise CliError("image", f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    cfg = build_config(args.config, parse_overrides(args.set))
    rng = np.random.default_rng(seed)
    if args.overfit:
        img = _read_image(args.overfit)
        _, h, w = img.shape
        p = args.patch
        if h < p or w < p:
            raise CliError("image", f"{args.overfit} is smaller than the {p}x{p} patch")
        data = img[None, :, :p, :p]
    elif args.data:
        data = imageio.load_patches(args.data, args.patch, rng)
        if len(data) == 0:
            raise CliError("data", f"no usable patches in {args.data}")
    else:
        data = np.stack([imageio.procedural_texture(args.patch, args.patch, rng)
                         for _ in range(args.textures)])
    lmbda = args.lmbda
    if lmbda is None:
        table = training.LAMBDAS_MSE if args.distortion == "mse" else training.LAMBDAS_MSSSIM
        lmbda = table[args.lambda_index]
    kw = dict(lmbda=lmbda, distortion=args.distortion, seed=seed, steps=args.steps,
              batch_size=min(args.batch_size, len(data)), log_csv=args.csv,
              checkpoint=args.out, checkpoint_every=args.checkpoint_every)
    if args.lr is not None:
        kw["base_lr"] = args.lr
    tcfg = training.TrainConfig.desk(**kw)
    model = Model(cfg, seed=seed)
    t = time.perf_counter()
    try:
        res = training.train_loop(model, data, tcfg)
    except (training.TrainingDiverged, FloatingPointError) as exc:
        raise CliError("diverged", str(exc)) from exc
    first, last = res.history[0], res.history[-1]
    print(f"trained {len(res.history)} steps in {time.perf_counter() - t:.1f}s: "
          f"L {first['L']:.4f} -> {last['L']:.4f}, R {last['R']:.4f} bpp, D {last['D']:.3f}; "
          f"checkpoint {args.out}, curve {args.csv}")
    return 0


def cmd_encode(args) -> int:
    cfg = build_config(args.config, parse_overrides(args.set)) if args.config else None
    model = _load_model(args.checkpoint, cfg)
    x = _read_image(args.input)
    t = time.perf_counter()
    try:
        bs, _ = codec.compress(x, model, args.lambda_index)
    except ValueError as exc:
        raise CliError("encode", str(exc)) from exc
    data = bs.to_bytes()
    _write_atomic(args.output, data)
    _, h, w = x.shape
    print(f"{args.output}: {len(data)} bytes, {8 * len(data) / (h * w):.4f} bpp, "
          f"encode {time.perf_counter() - t:.2f}s")
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.checkpoint)
    try:
        data = Path(args.input).read_bytes()
    except OSError as exc:
        raise CliError("io", f"cannot read {args.input}: {exc}") from exc
    t = time.perf_counter()
    try:
        x_hat, _ = codec.decompress(data, model)
    except codec.BitstreamError as exc:
        raise CliError("bitstream", str(exc)) from exc
    imageio.write_ppm(args.output, x_hat[0])
    msg = f"{args.output}: {x_hat.shape[3]}x{x_hat.shape[2]}, decode {time.perf_counter() - t:.2f}s"
    if args.reference:
        ref = _read_image(args.reference)
        rec = imageio.read_ppm(args.output)
        if ref.shape != rec.shape:
            raise CliError("image", f"reference is {ref.shape}, reconstruction is {rec.shape}")
        msg += f", PSNR {metrics.psnr(ref, rec):.4f} dB"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    try:
        res = analysis.eval_dataset(model, args.folder, args.csv)
    except analysis.EmptyDatasetError as exc:
        raise CliError("data", str(exc)) from exc
    bpp, q = res.point()
    skipped = len(res.rows) - len(res.ok_rows)
    print(f"{len(res.ok_rows)} images ({skipped} skipped): mean {bpp:.4f} bpp, {q:.4f} dB PSNR, "
          f"MS-SSIM {res.mean('msssim'):.5f}; csv {args.csv}")
    return 0 if res.ok_rows else 1


def cmd_analyze(args) -> int:
    H, W = parse_size(args.size)
    if args.checkpoint:
        model = _load_model(args.checkpoint)
    else:
        model = Model(build_config(args.config, parse_overrides(args.set)), seed=0)
    rep = analysis.count_model(model, H, W)
    print(rep.table())
    if args.csv:
        _write_atomic(args.csv, rep.to_csv().encode())
    line = f"total: {rep.all_params} params, {rep.kmacs_per_pixel:.2f} KMACs/pixel"
    if args.bd is not None:
        line += f", BD-rate/MACs {analysis.bd_rate_per_kmacs(args.bd, rep.kmacs_per_pixel):.3e}"
    print(line)
    return 0


def cmd_bdrate(args) -> int:
    try:
        a = analysis.RdCurve.from_csv(args.anchor)
        t = analysis.RdCurve.from_csv(args.test)
        bd = analysis.bd_rate(a, t)
    except FileNotFoundError as exc:
        raise CliError("io", str(exc)) from exc
    except ValueError as exc:
        raise CliError("bdrate", str(exc)) from exc
    if args.csv:
        _write_atomic(args.csv, f"anchor,test,bd_rate_percent\n{args.anchor},{args.test},{bd:.6f}\n".encode())
    print(f"BD-rate: {bd:.2f}%")
    return 0


def _write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shiftlic", description="Shift-block learned image codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp, default="medium"):
        sp.add_argument("--config", default=default, help="small | medium | tiny | tiny-small")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    def lambda_index(sp):
        sp.add_argument("--lambda-index", type=int, default=3, choices=range(7), metavar="0..6")

    t = sub.add_parser("train", help="train on patches and write a checkpoint")
    config_args(t, "tiny")
    lambda_index(t)
    t.add_argument("--lambda", dest="lmbda", type=float, help="explicit lambda (overrides index)")
    t.add_argument("--distortion", choices=("mse", "ms_ssim"), default="mse")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int, default=1)
    t.add_argument("--patch", type=int, default=64)
    t.add_argument("--overfit", help="train on the top-left patch of one PPM")
    t.add_argument("--data", help="folder of PPM images to crop patches from")
    t.add_argument("--textures", type=int, default=8, help="procedural patches when no data given")
    t.add_argument("--out", default="model.ckpt")
    t.add_argument("--csv", default="loss.csv")
    t.add_argument("--checkpoint-every", type=int, default=100)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="compress a PPM image")
    e.add_argument("input")
    e.add_argument("-c", "--checkpoint", required=True)
    e.add_argument("-o", "--output", required=True)
    e.add_argument("--config", help="expected config preset; must match the checkpoint")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    lambda_index(e)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct a PPM image")
    d.add_argument("input")
    d.add_argument("-c", "--checkpoint", required=True)
    d.add_argument("-o", "--output", required=True)
    d.add_argument("--reference", help="original PPM to report PSNR against")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="encode/decode every PPM in a folder")
    v.add_argument("folder")
    v.add_argument("-c", "--checkpoint", required=True)
    v.add_argument("--csv", default="eval.csv")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="closed-form vs counted complexity")
    config_args(a)
    a.add_argument("--checkpoint")
    a.add_argument("--size", default="768x512", help="WxH")
    a.add_argument("--csv")
    a.add_argument("--bd", type=float, help="BD-rate (percent) for the per-MACs figure")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bdrate", help="BD-rate between two RD curve CSVs")
    b.add_argument("anchor")
    b.add_argument("test")
    b.add_argument("--csv")
    b.set_defaults(func=cmd_bdrate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"shiftlic-error: {exc.kind}: {exc}", file=sys.stderr)
        return 2 if exc.kind == "usage" else 1
    except KeyboardInterrupt:
        print("shiftlic-error: interrupted: stopped by user", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: train, encode, decode, eval, ablate, bdrate.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .codec import decode_image, encode_image
from .data import DatasetIndex, load_image, save_image
from .errors import ConfigError, DataError, MaskCodecError, NumericsError
from .layers import TransformConfig
from .metrics import (bd_rate, curve_from_rd_rows, ms_ssim, psnr, read_rd_csv,
                      write_rd_csv)
from .model import CodecConfig, init_model, load_checkpoint, save_checkpoint
from .train import TrainConfig, train_stage


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); config errors are exit 1
        raise ConfigError(message)


def _codec_config(cfg: C.RunConfig) -> CodecConfig:
    def ints(s):
        return tuple(int(v) for v in str(s).split(",") if v != "")

    transform = TransformConfig(
        latent_channels=cfg.model_latent_channels,
        widths=ints(cfg.model_widths),
        hyper_channels=cfg.model_hyper_channels,
        hyper_widths=ints(cfg.model_hyper_widths),
        kernel=cfg.model_kernel,
    )
    return CodecConfig(transform=transform, keep_ratio=cfg.gate_keep_ratio,
                       gate_learnable=cfg.gate_learnable, init_seed=cfg.model_seed)


def _floats(s):
    return tuple(float(v) for v in str(s).split(",") if v != "")


def _stage_config(cfg: C.RunConfig, stage: str) -> TrainConfig:
    if stage == "pretrain":
        return TrainConfig(
            stage="pretrain", lam=cfg.train_pretrain_lambda, loss=cfg.train_loss,
            epochs=cfg.train_pretrain_epochs, batch_size=cfg.train_batch_size,
            crop=cfg.train_crop, lr=cfg.train_pretrain_lr,
            lr_milestones=_floats(cfg.train_pretrain_milestones),
            lr_decay=cfg.train_pretrain_decay, mask_strategy=cfg.mask_strategy,
            mask_ratio=cfg.mask_ratio, seed=cfg.train_seed,
            weight_decay=cfg.train_weight_decay, augment=cfg.train_augment)
    return TrainConfig(
        stage="finetune", lam=cfg.train_finetune_lambda, loss=cfg.train_loss,
        epochs=cfg.train_finetune_epochs, batch_size=cfg.train_batch_size,
        crop=cfg.train_crop, lr=cfg.train_finetune_lr,
        lr_milestones=_floats(cfg.train_finetune_milestones),
        lr_decay=cfg.train_finetune_decay, mask_strategy=cfg.mask_strategy,
        mask_ratio=cfg.mask_ratio, seed=cfg.train_seed,
        weight_decay=cfg.train_weight_decay, augment=cfg.train_augment)


def _write_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("epoch", "step", "loss", "bpp", "distortion", "lr"))
        for r in history:
            w.writerow((r.epoch, r.step, f"{r.loss:.10g}", f"{r.bpp:.10g}",
                        f"{r.distortion:.10g}", f"{r.lr:.6g}"))


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        k, _, v = pair.partition("=")
        out[k.strip()] = v.strip()
    return out


def cmd_train(args) -> int:
    overrides = _overrides(args.set)
    if args.data:
        overrides["data.dir"] = args.data
    if args.out:
        overrides["out.dir"] = args.out
    cfg = C.load_config(args.config, overrides)
    if not cfg.data_dir:
        raise ConfigError("no dataset: pass --data or set data.dir")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = DatasetIndex(cfg.data_dir)

    stages = ("pretrain", "finetune") if args.stage == "both" else (args.stage,)
    if stages[0] == "finetune":
        if not args.checkpoint:
            raise ConfigError("finetune alone needs --checkpoint with pretrain weights")
        state = load_checkpoint(args.checkpoint)
    else:
        state = init_model(_codec_config(cfg))

    C.write_manifest(out_dir / "manifest.txt", cfg, extra={"cli.stage": args.stage})
    for stage in stages:
        scfg = _stage_config(cfg, stage)
        print(f"[{stage}] {scfg.epochs} epochs, lambda={scfg.lam}, lr={scfg.lr}")
        result = train_stage(data, state, scfg,
                             log=lambda r: print(
                                 f"  epoch {r.epoch:3d} step {r.step:3d} "
                                 f"loss {r.loss:.4f} bpp {r.bpp:.4f} dist {r.distortion:.6f}")
                             if args.verbose else None)
        state = result.state
        save_checkpoint(state, out_dir / f"{stage}.ckpt")
        _write_history(out_dir / f"{stage}_history.csv", result.history)
        print(f"[{stage}] done; checkpoint at {out_dir / (stage + '.ckpt')}")
    return 0


def cmd_encode(args) -> int:
    state = load_checkpoint(args.model)
    x = load_image(args.infile)
    blob = encode_image(x, state)
    Path(args.outfile).write_bytes(blob)
    bpp = len(blob) * 8.0 / (x.shape[0] * x.shape[1])
    print(f"{args.outfile}: {len(blob)} bytes, {bpp:.4f} bpp")
    return 0


def cmd_decode(args) -> int:
    state = load_checkpoint(args.model)
    blob = Path(args.infile).read_bytes()
    xhat = decode_image(blob, state)
    save_image(xhat, args.outfile)
    print(f"{args.outfile}: {xhat.shape[1]}x{xhat.shape[0]}")
    return 0


def cmd_eval(args) -> int:
    from .codec import evaluate_image

    state = load_checkpoint(args.model)
    data = DatasetIndex(args.images)
    lam = float(state.train_echo.get("lambda", 0.0))
    stage = state.trained_stage
    rows = []
    for i, path in enumerate(data.paths):
        x = data._image(i)
        r = evaluate_image(x, state)
        rows.append({"image": path.name, "bpp": r["bpp"], "psnr": r["psnr"],
                     "msssim": r["msssim"], "lambda": lam, "stage": stage})
        print(f"{path.name}: bpp {r['bpp']:.4f} psnr {r['psnr']:.2f} msssim {r['msssim']:.4f}")
    write_rd_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .codec import evaluate_image

    overrides = _overrides(args.set)
    if args.data:
        overrides["data.dir"] = args.data
    if args.out:
        overrides["out.dir"] = args.out
    cfg = C.load_config(args.config, overrides)
    if not cfg.data_dir:
        raise ConfigError("no dataset: pass --data or set data.dir")
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = DatasetIndex(cfg.data_dir)
    C.write_manifest(out_dir / "manifest.txt", cfg, extra={
        "ablate.strategies": ",".join(strategies),
        "ablate.ratios": ",".join(str(r) for r in ratios),
    })

    results = []
    for strategy in strategies:
        for ratio in ratios:
            cell = C.apply_overrides(cfg, {"mask.strategy": strategy,
                                           "mask.ratio": str(ratio)})
            state = init_model(_codec_config(cell))
            state = train_stage(data, state, _stage_config(cell, "pretrain")).state
            state = train_stage(data, state, _stage_config(cell, "finetune")).state
            bpps, psnrs, msssims = [], [], []
            for i in range(data.size()):
                r = evaluate_image(data._image(i), state)
                bpps.append(r["bpp"])
                psnrs.append(r["psnr"])
                msssims.append(r["msssim"])
            row = (strategy, ratio, float(np.mean(bpps)), float(np.mean(psnrs)),
                   float(np.mean(msssims)))
            results.append(row)
            print(f"{strategy} ratio={ratio}: bpp {row[2]:.4f} psnr {row[3]:.2f} "
                  f"msssim {row[4]:.4f}")

    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("strategy", "ratio", "bpp", "psnr", "msssim"))
        for row in results:
            w.writerow((row[0], row[1], f"{row[2]:.10g}", f"{row[3]:.10g}", f"{row[4]:.10g}"))
    print(f"wrote {len(results)} rows to {csv_path}")
    return 0


def cmd_bdrate(args) -> int:
    test = curve_from_rd_rows(read_rd_csv(args.test))
    anchor = curve_from_rd_rows(read_rd_csv(args.anchor))
    value = bd_rate(test, anchor)
    print(f"BD-rate: {value:.2f}%")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("test", "anchor", "bd_rate_percent"))
            w.writerow((args.test, args.anchor, f"{value:.6f}"))
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="maskcodec",
                description="Desk-scale learned image codec with mask sampling modules")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run pretrain/finetune stages")
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    t.add_argument("--data", default=None, help="dataset folder (PNG/PPM)")
    t.add_argument("--out", default=None, help="output directory")
    t.add_argument("--stage", choices=("pretrain", "finetune", "both"), default="both")
    t.add_argument("--checkpoint", default=None,
                   help="pretrain checkpoint when running finetune alone")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("encode", help="compress one image to a .mkc bitstream")
    e.add_argument("--model", required=True)
    e.add_argument("--in", dest="infile", required=True)
    e.add_argument("--out", dest="outfile", required=True)
    e.set_defaults(fn=cmd_encode)

    d = sub.add_parser("decode", help="decompress a .mkc bitstream")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="infile", required=True)
    d.add_argument("--out", dest="outfile", required=True)
    d.set_defaults(fn=cmd_decode)

    v = sub.add_parser("eval", help="encode/decode a folder and write an RD CSV")
    v.add_argument("--model", required=True)
    v.add_argument("--images", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="sweep mask strategies x ratios")
    a.add_argument("--config", default=None)
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.add_argument("--data", default=None)
    a.add_argument("--out", default=None)
    a.add_argument("--strategies", default="cube,spatial,channel,spatial_merge")
    a.add_argument("--ratios", default="0.2,0.5")
    a.set_defaults(fn=cmd_ablate)

    b = sub.add_parser("bdrate", help="BD-rate between two RD CSVs")
    b.add_argument("--test", required=True)
    b.add_argument("--anchor", required=True)
    b.add_argument("--out", default=None)
    b.set_defaults(fn=cmd_bdrate)

    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except NumericsError as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return 3
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except MaskCodecError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

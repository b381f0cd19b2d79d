"""Command line: etl, train, distill, superres, eval, gradcheck.

Exit codes: 0 success, 1 unexpected failure, 2 usage or configuration
error, 3 missing or empty data, 4 numeric failure (NaN/inf), 5 corrupt or
mismatched checkpoint.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint, pipeline
from .config import Config, load_config
from .data import ingest, png_to_tensor, save_png
from .denoiser import UPSCALE
from .errors import CheckpointError, CmsrError, ConfigError, InsufficientDataError, NumericError
from .verify import gradient_suite

logger = logging.getLogger("cmsr")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5


def _load(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.sampling.seed = args.seed
    return cfg


def cmd_etl(args) -> int:
    cfg = _load(args)
    d = cfg.data
    sources = {"train": args.input or d.input_dir, "test": args.test_input or d.test_dir}
    if sources["train"] is None:
        raise ConfigError("no input directory: pass --input or set data.input_dir")
    for split, src in sources.items():
        if src is None:
            continue
        seed = d.train_seed if split == "train" else d.test_seed
        manifest, images = ingest(src, d.image_size, d.crop_mode, seed, split)
        print(f"{split}: kept {len(manifest.records)}, skipped {len(manifest.skipped)} from {src}")
        if not manifest.records:
            raise InsufficientDataError(f"no usable RGB images of at least {d.image_size}px in {src}")
        path = pipeline.save_split(cfg, split, images, manifest.to_json())
        print(f"{split}: wrote {path} (manifest checksum {manifest.checksum()})")
    return EXIT_OK


def _report_training(kind: str, curve, path: Path) -> None:
    last = f"{curve[-1][1]:.6f}" if curve else "n/a"
    print(f"{kind}: {len(curve)} steps run, final loss {last}")
    print(f"{kind}: wrote {path} (sha256 {checkpoint.file_checksum(path)})")


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.steps is not None:
        cfg.train.teacher_steps = args.steps
    state, curve, path = pipeline.run_teacher(cfg, resume=args.resume)
    _report_training("teacher", curve, path)
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _load(args)
    if args.steps is not None:
        cfg.train.distill_steps = args.steps
    state, curve, path = pipeline.run_distill(cfg, args.teacher, resume=args.resume)
    _report_training("student", curve, path)
    return EXIT_OK


def _default_checkpoint(cfg: Config, sampler: str) -> Path:
    name = "student.cmsr" if sampler == "cm" else "teacher.cmsr"
    return Path(cfg.output_dir) / name


def cmd_superres(args) -> int:
    cfg = _load(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(cfg, args.sampler)
    model = pipeline.load_model(ckpt, cfg)
    lowres = png_to_tensor(args.input)
    expected = cfg.data.image_size // UPSCALE
    if lowres.shape[1:] != (expected, expected):
        raise ConfigError(
            f"input {args.input} is {lowres.shape[2]}x{lowres.shape[1]}; "
            f"the {cfg.data.image_size}px model expects {expected}x{expected}"
        )
    result = pipeline.upscale(model, lowres[None], cfg, args.sampler, args.steps, args.stride)
    save_png(result.images[0], args.output)
    logger.info("sampler %s: %d denoiser evaluations, %.3f s", result.sampler, result.nfe, result.wall_time)
    print(f"denoiser evaluations: {result.nfe}")
    print(f"wall time: {result.wall_time:.3f} s")
    print(f"wrote {args.output} ({4 * expected}x{4 * expected})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(cfg, args.sampler)
    model = pipeline.load_model(ckpt, cfg)
    teacher = pipeline.load_model(args.teacher, cfg) if args.teacher else None
    test = pipeline.load_split(cfg, "test")
    report = pipeline.evaluate(cfg, model, test, args.sampler, teacher)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_report.jsonl").write_text(report.to_records())
    (out_dir / "eval_summary.txt").write_text(report.summary_table())
    print(report.summary_table(), end="")
    print(f"wrote {out_dir / 'eval_report.jsonl'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    results = gradient_suite(cfg.unet, seed=args.seed or 0, image_size=cfg.data.image_size)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<32} max rel err {r.max_rel_error:.3e} ({r.coords} coords)")
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults reproduce the desk-scale experiment)")
    common.add_argument("--seed", type=int, help="override the training and sampling seeds")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cmsr", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("etl", parents=[common], help="crop PNGs and build low/high-resolution pairs")
    p.add_argument("--input", help="training image directory (overrides data.input_dir)")
    p.add_argument("--test-input", help="held-out image directory (overrides data.test_dir)")
    p.set_defaults(func=cmd_etl)

    p = sub.add_parser("train", parents=[common], help="train the diffusion teacher")
    p.add_argument("--steps", type=int, help="total step budget (overrides train.teacher_steps)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", parents=[common], help="consistency-distill a student from a teacher")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--steps", type=int, help="total step budget (overrides train.distill_steps)")
    p.add_argument("--resume", help="student checkpoint to continue from")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("superres", parents=[common], help="upscale one low-resolution PNG by 4x")
    p.add_argument("--input", required=True, help="low-resolution RGB PNG")
    p.add_argument("--output", required=True, help="where to write the upscaled PNG")
    p.add_argument("--sampler", choices=pipeline.SAMPLERS, default="cm")
    p.add_argument("--steps", type=int, help="cm: 1-4 steps; ddim: number of steps")
    p.add_argument("--stride", type=int, help="ddim: visit every n-th timestep instead of --steps")
    p.add_argument("--checkpoint", help="model checkpoint (default: student for cm, teacher otherwise)")
    p.set_defaults(func=cmd_superres)

    p = sub.add_parser("eval", parents=[common], help="score the test split against the nearest-upsample baseline")
    p.add_argument("--checkpoint", help="model checkpoint (default: student for cm, teacher otherwise)")
    p.add_argument("--sampler", choices=pipeline.SAMPLERS, default="cm")
    p.add_argument("--teacher", help="also report the teacher's DDIM proxy-FID")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and the U-Net")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InsufficientDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CmsrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

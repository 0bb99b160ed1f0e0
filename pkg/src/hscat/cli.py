"""Command-line entry point: train, compress, decompress, eval, rd-curve.

Exit codes: 0 success, 1 training diverged, 2 usage, 3 data, 4 model or stream mismatch.
Failures print exactly one line starting with ``error:`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import metrics
from .bitstream import Bitstream, ModelMismatchError
from .checkpoint import Checkpoint, CheckpointError
from .codec import compress, decompress
from .coder import CorruptStreamError
from .config import ModelConfig
from .data import ImageError, list_images, load_training_set, read_image, write_image
from .evaluation import evaluate_directory, rd_points, write_rd_curve
from .trainer import TrainConfig, Trainer, TrainingDiverged

EXIT_OK, EXIT_DIVERGED, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip("'\"")


def parse_config_text(text: str) -> TrainConfig:
    """``key = value`` lines; ``[model]`` sections or ``model.`` prefixes address ModelConfig.

    ``preset = "tiny"`` or ``"default"`` picks the base architecture.
    """
    train, model, section = {}, {}, ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if section == "model" or key.startswith("model."):
            model[key.removeprefix("model.")] = _value(val)
        else:
            train[{"lambda": "lam"}.get(key, key)] = _value(val)
    preset = train.pop("preset", "tiny")
    if preset not in ("tiny", "default"):
        raise UsageError(f"unknown preset {preset!r}")
    try:
        base = ModelConfig.tiny().to_dict() if preset == "tiny" else ModelConfig().to_dict()
        unknown = set(model) - set(base)
        if unknown:
            raise UsageError(f"unknown model options: {sorted(unknown)}")
        base.update(model)
        train["model"] = base
        return TrainConfig.from_dict(train)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from e


def _load_model(path):
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return Checkpoint.load(path).build_model()


def cmd_train(args) -> int:
    config = parse_config_text(Path(args.config).read_text()) if args.config else TrainConfig()
    if args.steps is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "steps": args.steps})
    images = load_training_set(args.data, min_size=config.crop)
    if args.resume and Path(args.out).exists():
        trainer = Trainer.resume(Checkpoint.load(args.out), images)
        if args.steps is not None:
            trainer.config = TrainConfig.from_dict({**trainer.config.to_dict(), "steps": args.steps})
    else:
        trainer = Trainer(config, images)
    log_path = args.log or f"{args.out}.log.csv"
    trainer.run(log_path=log_path, checkpoint_path=args.out)
    last = trainer.history[-1] if trainer.history else None
    if last:
        print(f"step {last['step']} loss {last['loss']:.4f} bpp {last['bpp']:.4f} psnr {last['psnr']:.2f}")
    return EXIT_OK


def cmd_compress(args) -> int:
    model = _load_model(args.model)
    image = read_image(args.input)
    data = compress(image, model).to_bytes()
    Path(args.out).write_bytes(data)
    h, w = image.shape[:2]
    print(f"{len(data)} bytes, {metrics.bpp(data, h, w):.4f} bpp")
    return EXIT_OK


def cmd_decompress(args) -> int:
    model = _load_model(args.model)
    try:
        data = Path(args.input).read_bytes()
    except OSError as e:
        raise ImageError(f"cannot read {args.input}: {e.strerror}") from e
    result = decompress(Bitstream.from_bytes(data), model)
    write_image(args.out, result.image)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    report = evaluate_directory(args.data, model)
    report.write_csv(args.report)
    print(f"mean bpp {report.mean_bpp:.4f} mean psnr {metrics.format_psnr(report.mean_psnr)}")
    return EXIT_OK


def cmd_rd_curve(args) -> int:
    paths = [p for p in args.models.split(",") if p]
    if len(paths) < 2:
        raise UsageError("rd-curve needs at least two checkpoints")
    models = [_load_model(p) for p in paths]
    lams = [m.lam for m in models]
    if len(set(lams)) != len(lams):
        raise UsageError(f"checkpoints must have distinct lambda values, got {lams}")
    files = list_images(args.data)
    if not files:
        raise ImageError(f"{args.data}: no images found")
    images = [read_image(p) for p in files]
    points = rd_points(models, images, [p.name for p in files])
    csv_path, svg_path = write_rd_curve(points, args.out)
    for p in points:
        print(f"lambda {p.lam:g}: bpp {p.mean_bpp:.4f} psnr {p.mean_psnr_db:.2f}")
    print(f"wrote {csv_path} and {svg_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hscat", description="Learned image codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on a directory of images")
    t.add_argument("--config", help="key = value training config file")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="CSV log path (default <out>.log.csv)")
    t.add_argument("--steps", type=int, help="override the configured step count")
    t.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="encode one image")
    c.add_argument("--model", required=True)
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="decode one stream")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompress)

    e = sub.add_parser("eval", help="per-image bpp and PSNR over a directory")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rd-curve", help="mean (bpp, PSNR) per checkpoint as CSV and SVG")
    r.add_argument("--models", required=True, help="comma-separated checkpoints")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True, help="output prefix")
    r.set_defaults(func=cmd_rd_curve)
    return p


def _fail(code: int, message: str) -> int:
    print("error: " + " ".join(str(message).split()), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, e)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        return _fail(EXIT_USAGE, e)
    except (ModelMismatchError, CheckpointError) as e:
        return _fail(EXIT_MODEL, e)
    except (ImageError, CorruptStreamError) as e:
        return _fail(EXIT_DATA, e)
    except FileNotFoundError as e:
        return _fail(EXIT_DATA, f"file not found: {e.filename}")
    except TrainingDiverged as e:
        return _fail(EXIT_DIVERGED, e)
    except ValueError as e:
        return _fail(EXIT_DATA, e)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

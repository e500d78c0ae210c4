"""Command-line entry points: synth, train, eval, erase.

Settings merge in three layers: built-in defaults, then a flat config
file of dotted keys (``section.field = value``), then command-line
flags. The effective configuration is echoed into the output directory
before any work starts.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .data import IMAGE_SIZE, DataError, Image, manifest_ids
from .discriminator import DiscriminatorError
from .generator import GeneratorError, erase, load_generator
from .losses import LossError
from .metrics import DEFAULT_TAU, MetricError, evaluate, format_summary, write_records
from .synth import SynthConfig, SynthError, generate_dataset
from .trainer import TrainConfig, TrainerError, config_from_dict, fit

CONFIG_ECHO_NAME = "config.txt"

_VALIDATION_ERRORS = (
    DataError,
    DiscriminatorError,
    GeneratorError,
    LossError,
    MetricError,
    SynthError,
    TrainerError,
    ValueError,
)


class UsageError(ValueError):
    """Bad flags, config values, or missing required files."""


@dataclass(frozen=True)
class RunConfig:
    """Effective settings after merging defaults, config file, and flags."""

    train: TrainConfig = field(default_factory=TrainConfig)
    synth_count: int = 8
    synth_seed: int = 0
    texts_per_image: tuple[int, int] = (1, 3)
    max_text_frac: float = 0.5
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.tau <= 0:
            raise UsageError(f"eval.tau must be positive, got {self.tau}")


def _parse_like(default, raw: str, key: str):
    try:
        if isinstance(default, bool):
            raise UsageError(f"{key}: boolean keys are not supported")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            elem = default[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(int(p) if isinstance(elem, int) else float(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"config key {key}: cannot parse {raw!r}: {exc}") from exc
    return raw


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def parse_config_file(path: Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` comments and blanks ignored."""
    entries = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        entries[key.strip()] = value.strip()
    return entries


def _apply_overrides(base: dict, overrides: dict[str, str], extra: dict) -> None:
    """Resolve dotted keys against the defaults tree, in place."""
    for key, raw in overrides.items():
        section, _, name = key.partition(".")
        if section == "train" and name in base and not isinstance(base[name], dict):
            base[name] = _parse_like(base[name], raw, key) if isinstance(raw, str) else raw
        elif section in base and isinstance(base.get(section), dict) and name in base[section]:
            ref = base[section][name]
            base[section][name] = _parse_like(ref, raw, key) if isinstance(raw, str) else raw
        elif key in extra:
            ref = extra[key]
            extra[key] = _parse_like(ref, raw, key) if isinstance(raw, str) else raw
        else:
            raise UsageError(f"unknown config key {key!r}")


def build_run_config(config_path: Path | None, flag_overrides: dict) -> RunConfig:
    base = asdict(TrainConfig())
    extra = {
        "synth.count": 8,
        "synth.seed": 0,
        "synth.texts_per_image": (1, 3),
        "synth.max_text_frac": 0.5,
        "eval.tau": DEFAULT_TAU,
    }
    if config_path is not None:
        if not Path(config_path).is_file():
            raise UsageError(f"config file {config_path} does not exist")
        _apply_overrides(base, parse_config_file(Path(config_path)), extra)
    _apply_overrides(base, {k: v for k, v in flag_overrides.items() if v is not None},
                     extra)
    try:
        train = config_from_dict(base)
    except _VALIDATION_ERRORS as exc:
        raise UsageError(str(exc)) from exc
    return RunConfig(
        train=train,
        synth_count=extra["synth.count"],
        synth_seed=extra["synth.seed"],
        texts_per_image=extra["synth.texts_per_image"],
        max_text_frac=extra["synth.max_text_frac"],
        tau=extra["eval.tau"],
    )


def echo_config(cfg: RunConfig, out_dir: Path) -> Path:
    """Write the effective settings as reparseable dotted keys."""
    tree = asdict(cfg.train)
    lines = []
    for name, value in sorted(tree.items()):
        if isinstance(value, dict):
            lines += [f"{name}.{k} = {_format_value(v)}" for k, v in sorted(value.items())]
        elif value is not None:
            lines.append(f"train.{name} = {_format_value(value)}")
    lines.append(f"synth.count = {cfg.synth_count}")
    lines.append(f"synth.max_text_frac = {cfg.max_text_frac}")
    lines.append(f"synth.seed = {cfg.synth_seed}")
    lines.append(f"synth.texts_per_image = {_format_value(cfg.texts_per_image)}")
    lines.append(f"eval.tau = {cfg.tau}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / CONFIG_ECHO_NAME
    path.write_text("".join(f"{line}\n" for line in sorted(lines)), encoding="utf-8")
    return path


# subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = build_run_config(args.config, {
        "synth.count": args.count,
        "synth.seed": args.seed,
        "synth.max_text_frac": args.max_text_frac,
        "synth.texts_per_image": tuple(args.texts_per_image)
        if args.texts_per_image else None,
    })
    backgrounds = Path(args.backgrounds)
    if not backgrounds.is_dir():
        raise UsageError(f"backgrounds directory {backgrounds} does not exist")
    try:
        synth_cfg = SynthConfig(
            background_dir=backgrounds,
            out_root=Path(args.out),
            count=cfg.synth_count,
            texts_per_image=cfg.texts_per_image,
            seed=cfg.synth_seed,
            max_text_frac=cfg.max_text_frac,
        )
    except SynthError as exc:
        raise UsageError(str(exc)) from exc
    echo_config(cfg, Path(args.out))
    ids = generate_dataset(synth_cfg)
    print(f"wrote {len(ids)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_run_config(args.config, {
        "train.total_iterations": args.iterations,
        "train.batch_size": args.batch_size,
        "train.image_size": args.image_size,
        "train.seed": args.seed,
        "train.extractor": args.extractor,
        "train.vgg16_path": args.vgg16_path,
    })
    data_root = Path(args.data)
    try:
        manifest_ids(data_root)
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not resume.is_file():
        raise UsageError(f"resume checkpoint {resume} does not exist")
    echo_config(cfg, Path(args.out))
    final = fit(cfg.train, data_root, Path(args.out), resume=resume, on_log=print)
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    cfg = build_run_config(args.config, {"eval.tau": args.tau})
    data_root = Path(args.data)
    try:
        manifest_ids(data_root)
    except DataError as exc:
        raise UsageError(str(exc)) from exc

    if args.identity and args.checkpoint:
        raise UsageError("--identity and --checkpoint are mutually exclusive")
    if args.identity:
        predict = lambda img: img  # noqa: E731  reference stub: report input quality
    else:
        if args.checkpoint is None:
            raise UsageError("provide --checkpoint or --identity")
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint {args.checkpoint} does not exist")
        gen = load_generator(Path(args.checkpoint))
        predict = lambda img: erase(gen, img)  # noqa: E731

    out_dir = Path(args.out)
    echo_config(cfg, out_dir)
    report = evaluate(predict, data_root, tau=cfg.tau)
    write_records(report, out_dir / "report.jsonl")
    summary = format_summary(report)
    (out_dir / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return 0 if not report.errors else 1


def _open_rgb(path: Path) -> tuple[np.ndarray, tuple[int, int]]:
    try:
        with PILImage.open(path) as im:
            rgb = im.convert("RGB")
            return np.asarray(rgb, dtype=np.uint8), im.size
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc


def _save_signed(img: Image, size: tuple[int, int], path: Path) -> None:
    from .data import to_range

    arr = np.rint(to_range(img, "byte").values).clip(0, 255).astype(np.uint8)
    out = PILImage.fromarray(arr)
    if out.size != size:
        out = out.resize(size, PILImage.LANCZOS)
    path.parent.mkdir(parents=True, exist_ok=True)
    out.save(path)


def cmd_erase(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    arr, orig_size = _open_rgb(Path(args.input))
    try:
        gen = load_generator(Path(args.checkpoint))
    except GeneratorError as exc:
        raise UsageError(str(exc)) from exc

    pil = PILImage.fromarray(arr)
    if pil.size != (IMAGE_SIZE, IMAGE_SIZE):
        pil = pil.resize((IMAGE_SIZE, IMAGE_SIZE), PILImage.LANCZOS)
    square = Image(np.asarray(pil, dtype=np.float32), "byte")

    out_path = Path(args.out)
    if args.dump_scales or args.dump_score:
        from .data import from_tensor, to_tensor
        import torch

        gen.eval()
        with torch.no_grad():
            outs = gen(to_tensor(square)[None])
        _save_signed(from_tensor(outs.full), orig_size, out_path)
        if args.dump_scales:
            stem = out_path.with_suffix("")
            _save_signed(from_tensor(outs.half), outs.half.shape[-2:][::-1],
                         Path(f"{stem}_half.png"))
            _save_signed(from_tensor(outs.quarter), outs.quarter.shape[-2:][::-1],
                         Path(f"{stem}_quarter.png"))
        if args.dump_score:
            score = (outs.score_map[0, 0].numpy() * 255).round().astype(np.uint8)
            PILImage.fromarray(score, mode="L").save(
                f"{out_path.with_suffix('')}_score.png")
    else:
        _save_signed(erase(gen, square), orig_size, out_path)
    print(f"wrote {out_path}")
    return 0


# wiring --------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texterase",
        description="Scene-text erasing: dataset synthesis, training, "
                    "evaluation, and single-image inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic triplet dataset")
    p.add_argument("--backgrounds", required=True, help="directory of background images")
    p.add_argument("--out", required=True, help="dataset output root")
    p.add_argument("--count", type=int, help="number of samples")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.add_argument("--max-text-frac", type=float, help="reject samples with more text")
    p.add_argument("--texts-per-image", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--config", help="config file of dotted keys")
    p.set_defaults(cmd=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset")
    p.add_argument("--data", required=True, help="dataset root with manifest.txt")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--iterations", type=int, help="total training iterations")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--extractor", choices=("toy", "vgg16"))
    p.add_argument("--vgg16-path", help="pretrained feature-extractor weights file")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--config", help="config file of dotted keys")
    p.set_defaults(cmd=cmd_train)

    p = sub.add_parser("eval", help="score a model on a dataset")
    p.add_argument("--data", required=True, help="dataset root with manifest.txt")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--checkpoint", help="generator or training checkpoint")
    p.add_argument("--identity", action="store_true",
                   help="score the inputs themselves instead of a model")
    p.add_argument("--tau", type=float, help="error-pixel threshold")
    p.add_argument("--config", help="config file of dotted keys")
    p.set_defaults(cmd=cmd_eval)

    p = sub.add_parser("erase", help="erase text from one image")
    p.add_argument("input", help="image to process")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--dump-scales", action="store_true",
                   help="also write the 1/4- and 1/2-scale outputs")
    p.add_argument("--dump-score", action="store_true",
                   help="also write the text-score map")
    p.set_defaults(cmd=cmd_erase)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.cmd(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, message instead of traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

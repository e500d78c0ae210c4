"""Synthetic triplet generation: text composited onto clean backgrounds.

Each sample is built so the non-text region of the input matches the
ground truth byte-for-byte: the anti-aliased text composite is copied
into the input only where the rendered alpha exceeds the mask threshold.
Halo pixels below the threshold are dropped rather than blended, keeping
the stroke mask an exact description of every changed pixel.
"""

from __future__ import annotations

import string
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw, ImageFont

from .data import (
    IMAGE_SIZE,
    DataError,
    Image,
    Sample,
    load_image,
    to_range,
    validate_sample,
    write_manifest,
    write_sample,
)

_FONT_DIR = Path(__file__).resolve().parent / "assets" / "fonts"
_FONT_FILES = {
    "sans": "DejaVuSans.ttf",
    "sans-bold": "DejaVuSans-Bold.ttf",
    "serif": "DejaVuSerif.ttf",
}
FONT_NAMES = tuple(sorted(_FONT_FILES))

ALPHA_THRESHOLD = 0.5
MIN_BACKGROUND_SIDE = 32
MAX_PLACEMENT_ATTEMPTS = 20
BACKGROUND_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class SynthError(RuntimeError):
    """Fatal dataset-generation failure."""


class PlacementError(ValueError):
    """A text spec cannot be realized on this image."""


@dataclass(frozen=True)
class TextSpec:
    """One piece of text to composite; ranges are resolved per sample."""

    content: str
    font: str = "sans"
    size: tuple[int, int] = (24, 48)
    color: tuple[int, int, int] = (255, 255, 255)
    rotation: tuple[float, float] = (-15.0, 15.0)
    opacity: float = 1.0
    region: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if not self.content.strip():
            raise PlacementError("text content is empty")
        if self.font not in _FONT_FILES:
            raise PlacementError(f"unknown font {self.font!r} (have {FONT_NAMES})")
        lo, hi = self.size
        if not 1 <= lo <= hi:
            raise PlacementError(f"bad size range {self.size}")
        if not 0.0 < self.opacity <= 1.0:
            raise PlacementError(f"opacity must be in (0, 1], got {self.opacity}")
        if self.rotation[0] > self.rotation[1]:
            raise PlacementError(f"bad rotation range {self.rotation}")
        if len(self.color) != 3 or any(not 0 <= c <= 255 for c in self.color):
            raise PlacementError(f"bad color {self.color}")
        if self.region is not None:
            x0, y0, x1, y1 = self.region
            if x0 < 0 or y0 < 0 or x0 >= x1 or y0 >= y1:
                raise PlacementError(f"bad placement region {self.region}")


@dataclass(frozen=True)
class SynthConfig:
    background_dir: Path
    out_root: Path
    count: int = 8
    texts_per_image: tuple[int, int] = (1, 3)
    seed: int = 0
    max_text_frac: float = 0.5

    def __post_init__(self):
        if self.count < 1:
            raise SynthError(f"count must be >= 1, got {self.count}")
        lo, hi = self.texts_per_image
        if not 0 <= lo <= hi:
            raise SynthError(f"bad texts_per_image range {self.texts_per_image}")
        if not 0.0 < self.max_text_frac <= 1.0:
            raise SynthError(f"max_text_frac must be in (0, 1], got {self.max_text_frac}")


def font_path(name: str) -> Path:
    if name not in _FONT_FILES:
        raise PlacementError(f"unknown font {name!r} (have {FONT_NAMES})")
    return _FONT_DIR / _FONT_FILES[name]


def _render_alpha(content: str, font_name: str, size: int, opacity: float,
                  angle: float) -> np.ndarray:
    """Anti-aliased coverage map of the rotated text, in [0, opacity]."""
    font = ImageFont.truetype(str(font_path(font_name)), size)
    x0, y0, x1, y1 = font.getbbox(content)
    if x1 <= x0 or y1 <= y0:
        raise PlacementError(f"text {content!r} renders to an empty box")
    layer = PILImage.new("L", (x1 - x0, y1 - y0), 0)
    ImageDraw.Draw(layer).text((-x0, -y0), content, font=font,
                               fill=round(opacity * 255))
    if angle:
        layer = layer.rotate(angle, resample=PILImage.BILINEAR, expand=True)
    return np.asarray(layer, dtype=np.float64) / 255.0


def prepare_background(img: Image, size: int = IMAGE_SIZE) -> np.ndarray:
    """Center-crop to square and resize, returning exact uint8 pixels."""
    arr = np.rint(to_range(img, "byte").values).clip(0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    if min(h, w) < MIN_BACKGROUND_SIDE:
        raise DataError(f"background {h}x{w} is smaller than {MIN_BACKGROUND_SIDE}px")
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    arr = arr[top:top + side, left:left + side]
    if side != size:
        pil = PILImage.fromarray(arr).resize((size, size), PILImage.LANCZOS)
        arr = np.asarray(pil, dtype=np.uint8)
    return arr


def synthesize_sample(background: Image, specs: list[TextSpec], seed,
                      max_text_frac: float = 1.0, sample_id: str = "") -> Sample:
    """Composite the specs onto the background; returns a validated Sample.

    ``seed`` may be an int, an int sequence, or a ready Generator. With an
    empty spec list the input equals the ground truth and the mask is empty.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    gt = prepare_background(background)
    h, w = gt.shape[:2]

    canvas = gt.astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    for spec in specs:
        size = int(rng.integers(spec.size[0], spec.size[1] + 1))
        angle = float(rng.uniform(*spec.rotation))
        alpha = _render_alpha(spec.content, spec.font, size, spec.opacity, angle)
        lh, lw = alpha.shape
        x0, y0, x1, y1 = spec.region or (0, 0, w, h)
        x1, y1 = min(x1, w), min(y1, h)
        if x1 - x0 < lw or y1 - y0 < lh:
            raise PlacementError(
                f"text {spec.content!r} at size {size} needs {lw}x{lh}px, "
                f"exceeding region ({x0}, {y0}, {x1}, {y1})"
            )
        x = int(rng.integers(x0, x1 - lw + 1))
        y = int(rng.integers(y0, y1 - lh + 1))
        a = alpha[..., None]
        patch = canvas[y:y + lh, x:x + lw]
        canvas[y:y + lh, x:x + lw] = patch * (1.0 - a) + np.asarray(spec.color, float) * a
        mask[y:y + lh, x:x + lw] |= alpha > ALPHA_THRESHOLD

    frac = float(mask.mean())
    if frac > max_text_frac:
        raise PlacementError(f"text covers {frac:.3f} of the image (limit {max_text_frac})")

    composite = np.rint(canvas.clip(0, 255)).astype(np.uint8)
    inp = np.where(mask[..., None], composite, gt)
    sample = Sample(
        input=Image(inp.astype(np.float32), "byte"),
        ground_truth=Image(gt.astype(np.float32), "byte"),
        mask=mask.astype(np.float32),
        id=sample_id,
    )
    return validate_sample(sample, synthetic=True)


def random_text_specs(rng: np.random.Generator, n: int) -> list[TextSpec]:
    alphabet = string.ascii_letters + string.digits
    specs = []
    for _ in range(n):
        length = int(rng.integers(3, 9))
        content = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), length))
        lo = int(rng.integers(18, 40))
        specs.append(
            TextSpec(
                content=content,
                font=FONT_NAMES[int(rng.integers(0, len(FONT_NAMES)))],
                size=(lo, lo + int(rng.integers(0, 25))),
                color=tuple(int(c) for c in rng.integers(0, 256, 3)),
                opacity=float(rng.uniform(0.8, 1.0)),
            )
        )
    return specs


def _load_backgrounds(background_dir: Path) -> list[np.ndarray]:
    background_dir = Path(background_dir)
    if not background_dir.is_dir():
        raise SynthError(f"background directory {background_dir} does not exist")
    prepared = []
    for path in sorted(background_dir.iterdir()):
        if path.suffix.lower() not in BACKGROUND_SUFFIXES:
            continue
        try:
            prepared.append(prepare_background(load_image(path)))
        except (DataError, OSError) as exc:
            warnings.warn(f"skipping background {path.name}: {exc}", stacklevel=2)
    if not prepared:
        raise SynthError(f"no usable backgrounds in {background_dir}")
    return prepared


def generate_dataset(config: SynthConfig) -> list[str]:
    """Write ``config.count`` validated triplets plus a manifest.

    The output is a pure function of the config and the background bytes:
    every random draw comes from generators keyed on (seed, index, attempt).
    """
    backgrounds = _load_backgrounds(config.background_dir)
    root = Path(config.out_root)
    ids = []
    t_lo, t_hi = config.texts_per_image
    for idx in range(config.count):
        bg = Image(backgrounds[idx % len(backgrounds)].astype(np.float32), "byte")
        sample = None
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            rng = np.random.default_rng([config.seed, idx, attempt])
            specs = random_text_specs(rng, int(rng.integers(t_lo, t_hi + 1)))
            try:
                sample = synthesize_sample(bg, specs, rng,
                                           max_text_frac=config.max_text_frac)
                break
            except PlacementError:
                continue
        if sample is None:
            raise SynthError(
                f"sample {idx}: no placement found in {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        sample = replace(sample, id=f"{idx:05d}")
        write_sample(root, sample)
        ids.append(sample.id)
    write_manifest(root, ids)
    return ids

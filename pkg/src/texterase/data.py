"""Shared data model: range-tagged images, binary masks, mask pyramids, samples.

Conventions used throughout the package:

* numpy domain: ``H x W x C`` float32 arrays wrapped in :class:`Image`,
  masks as plain ``H x W`` float32 arrays with values in {0, 1}.
* torch domain: ``(B, C, H, W)`` float tensors in the signed range,
  masks as ``(B, 1, H, W)``.
* on disk: 8-bit PNG, masks stored as {0, 255} grayscale and binarized
  at 128 on load.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

RANGE_BOUNDS: dict[str, tuple[float, float]] = {
    "unit": (0.0, 1.0),
    "signed": (-1.0, 1.0),
    "byte": (0.0, 255.0),
}

# {0,255} masks on disk are binarized at this gray level when loaded.
MASK_THRESHOLD = 128

# Fixed pipeline resolution for datasets on disk.
IMAGE_SIZE = 512

PYRAMID_SCALES = (0.25, 0.5, 1.0)


class DataError(ValueError):
    """Raised for malformed images, masks, or samples."""


@dataclass(frozen=True)
class Image:
    """An ``H x W x C`` float raster tagged with the range its values live in.

    ``range_tag`` is one of ``"unit"`` ([0,1]), ``"signed"`` ([-1,1]) or
    ``"byte"`` ([0,255]). Channels must be 1 or 3.
    """

    values: np.ndarray
    range_tag: str = "unit"

    def __post_init__(self):
        v = self.values
        if not isinstance(v, np.ndarray) or v.ndim != 3:
            raise DataError(f"image values must be an H x W x C array, got {getattr(v, 'shape', type(v))}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise DataError(f"image has empty spatial extent: {v.shape}")
        if v.shape[2] not in (1, 3):
            raise DataError(f"image must have 1 or 3 channels, got {v.shape[2]}")
        if self.range_tag not in RANGE_BOUNDS:
            raise DataError(f"unknown range tag: {self.range_tag!r}")
        lo, hi = RANGE_BOUNDS[self.range_tag]
        if not np.isfinite(v).all():
            raise DataError("image contains non-finite values")
        if v.min() < lo or v.max() > hi:
            raise DataError(
                f"values [{v.min():.4g}, {v.max():.4g}] outside {self.range_tag} range [{lo}, {hi}]"
            )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def to_range(img: Image, target: str) -> Image:
    """Affinely remap an image into another declared value range.

    The map is monotone and exactly inverts itself; a byte -> signed -> byte
    round trip is lossless up to float precision (and up to +-1/255 once
    values are re-quantized to 8 bits).
    """
    if target not in RANGE_BOUNDS:
        raise DataError(f"unknown range tag: {target!r}")
    if img.range_tag == target:
        return img
    lo_s, hi_s = RANGE_BOUNDS[img.range_tag]
    lo_t, hi_t = RANGE_BOUNDS[target]
    v = img.values.astype(np.float64)
    v = (v - lo_s) * ((hi_t - lo_t) / (hi_s - lo_s)) + lo_t
    v = np.clip(v, lo_t, hi_t)
    return Image(v.astype(np.float32), target)


def _mask_like(mask, ref_ndim: int, torch_domain: bool):
    """Broadcast a spatial mask across the channel axis of its image."""
    if torch_domain:
        m = mask if torch.is_tensor(mask) else torch.as_tensor(np.asarray(mask))
        while m.dim() < ref_ndim:
            m = m.unsqueeze(0)
        return m
    m = np.asarray(mask)
    if m.ndim == 2:
        m = m[..., None]
    return m


def compose(out, gt, mask):
    """Blend two images through a binary mask: ``mask*out + (1-mask)*gt``.

    Keeps ``out`` where the mask is 1 and ``gt`` where it is 0, with the
    mask broadcast across channels. Accepts :class:`Image` pairs (same
    range tag required), numpy ``H x W x C`` arrays, or torch
    ``(..., C, H, W)`` tensors; the result matches the input flavor.
    """
    if isinstance(out, Image):
        if not isinstance(gt, Image):
            raise DataError("compose needs two Image operands or two raw arrays")
        if out.range_tag != gt.range_tag:
            raise DataError(f"range tags differ: {out.range_tag} vs {gt.range_tag}")
        blended = compose(out.values, gt.values, mask)
        return Image(blended, out.range_tag)
    if torch.is_tensor(out):
        if out.shape != gt.shape:
            raise DataError(f"shape mismatch: {tuple(out.shape)} vs {tuple(gt.shape)}")
        m = _mask_like(mask, out.dim(), torch_domain=True).to(out.dtype)
        if m.shape[-2:] != out.shape[-2:]:
            raise DataError(f"mask spatial size {tuple(m.shape[-2:])} does not match image {tuple(out.shape[-2:])}")
        return m * out + (1.0 - m) * gt
    out = np.asarray(out)
    gt = np.asarray(gt)
    if out.shape != gt.shape:
        raise DataError(f"shape mismatch: {out.shape} vs {gt.shape}")
    m = _mask_like(mask, out.ndim, torch_domain=False).astype(out.dtype, copy=False)
    if m.shape[:2] != out.shape[:2]:
        raise DataError(f"mask spatial size {m.shape[:2]} does not match image {out.shape[:2]}")
    return m * out + (1.0 - m) * gt


def validate_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise DataError("mask is not strictly binary")
    return mask.astype(np.float32)


def downsample_mask(mask, factor: float):
    """Shrink a binary mask by block maximum, preserving text coverage.

    A coarse pixel is 1 iff any pixel of the corresponding block is 1, so
    no occupied level can collapse to all-zero. ``factor`` must be 1/2 or
    1/4 and the spatial size must divide evenly. Accepts a numpy ``H x W``
    mask or a torch ``(..., H, W)`` tensor.
    """
    if factor not in (0.5, 0.25):
        raise DataError(f"unsupported mask downsampling factor {factor}")
    k = round(1.0 / factor)
    if torch.is_tensor(mask):
        if mask.shape[-1] % k or mask.shape[-2] % k:
            raise DataError(f"mask size {tuple(mask.shape[-2:])} not divisible by {k}")
        squeeze = mask.dim() == 2
        m = mask[None, None] if squeeze else mask
        out = F.max_pool2d(m.float(), kernel_size=k)
        return out[0, 0] if squeeze else out.to(mask.dtype)
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % k or w % k:
        raise DataError(f"mask size {(h, w)} not divisible by {k}")
    return mask.reshape(h // k, k, w // k, k).max(axis=(1, 3))


def downsample_image(values, factor: float):
    """Area-average downsampling (anti-aliased) by 1/2 or 1/4.

    numpy input is ``H x W x C``; torch input is ``(..., C, H, W)``.
    """
    if factor == 1.0:
        return values
    if factor not in (0.5, 0.25):
        raise DataError(f"unsupported image downsampling factor {factor}")
    k = round(1.0 / factor)
    if torch.is_tensor(values):
        if values.shape[-1] % k or values.shape[-2] % k:
            raise DataError(f"image size {tuple(values.shape[-2:])} not divisible by {k}")
        squeeze = values.dim() == 3
        v = values[None] if squeeze else values
        out = F.avg_pool2d(v, kernel_size=k)
        return out[0] if squeeze else out
    values = np.asarray(values)
    h, w, c = values.shape
    if h % k or w % k:
        raise DataError(f"image size {(h, w)} not divisible by {k}")
    return values.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3)).astype(values.dtype)


@dataclass(frozen=True)
class MaskPyramid:
    """A mask and its block-max reductions, one level per output scale."""

    levels: tuple[tuple[float, np.ndarray], ...]

    def at(self, scale: float) -> np.ndarray:
        for s, m in self.levels:
            if s == scale:
                return m
        raise DataError(f"no pyramid level at scale {scale}")


def mask_pyramid(mask: np.ndarray) -> MaskPyramid:
    mask = validate_mask(mask)
    levels = tuple(
        (s, mask if s == 1.0 else downsample_mask(mask, s)) for s in PYRAMID_SCALES
    )
    return MaskPyramid(levels)


@dataclass(frozen=True)
class Sample:
    """One training/evaluation unit: text image, clean background, stroke mask."""

    input: Image
    ground_truth: Image
    mask: np.ndarray
    id: str = ""


def validate_sample(sample: Sample, synthetic: bool = False) -> Sample:
    """Check the structural sample invariants; raises :class:`DataError`.

    With ``synthetic=True`` additionally requires the input and ground
    truth to agree exactly outside the mask.
    """
    a, b = sample.input, sample.ground_truth
    mask = validate_mask(sample.mask)
    if (a.height, a.width) != (b.height, b.width) or (a.height, a.width) != mask.shape:
        raise DataError(
            f"sample {sample.id!r}: sizes differ "
            f"(input {(a.height, a.width)}, ground truth {(b.height, b.width)}, mask {mask.shape})"
        )
    if a.range_tag != b.range_tag:
        raise DataError(f"sample {sample.id!r}: range tags differ")
    if synthetic:
        keep = mask[..., None] == 0
        if not np.array_equal(a.values[np.broadcast_to(keep, a.values.shape)],
                              b.values[np.broadcast_to(keep, b.values.shape)]):
            raise DataError(f"sample {sample.id!r}: input differs from ground truth outside the mask")
    return sample


def resize_sample(sample: Sample, size: int) -> Sample:
    """Reduce a sample to a smaller square size (512 -> 256 or 128).

    Images are area-averaged, the mask is block-max reduced so text
    coverage survives; used for toy-scale training runs.
    """
    h = sample.input.height
    if size == h:
        return sample
    factor = size / h
    if factor not in (0.5, 0.25):
        raise DataError(f"cannot resize {h} -> {size}; only 1/2 and 1/4 reductions are supported")
    return Sample(
        input=Image(downsample_image(sample.input.values, factor), sample.input.range_tag),
        ground_truth=Image(downsample_image(sample.ground_truth.values, factor), sample.ground_truth.range_tag),
        mask=downsample_mask(validate_mask(sample.mask), factor),
        id=sample.id,
    )


# torch interop ---------------------------------------------------------

def to_tensor(img: Image) -> torch.Tensor:
    """Image -> ``(C, H, W)`` float32 tensor in the signed range."""
    v = to_range(img, "signed").values
    return torch.from_numpy(np.ascontiguousarray(v.transpose(2, 0, 1)))


def from_tensor(t: torch.Tensor, range_tag: str = "signed") -> Image:
    """``(C, H, W)`` or ``(1, C, H, W)`` tensor -> Image with the given tag."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise DataError(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    lo, hi = RANGE_BOUNDS[range_tag]
    v = t.detach().cpu().clamp(lo, hi).numpy().transpose(1, 2, 0)
    return Image(np.ascontiguousarray(v, dtype=np.float32), range_tag)


# disk layout ------------------------------------------------------------
#
# <root>/images/<id>.png   input with text
# <root>/labels/<id>.png   text-free ground truth
# <root>/masks/<id>.png    {0,255} stroke mask
# <root>/manifest.txt      one id per line

def sample_paths(root: Path, sample_id: str) -> dict[str, Path]:
    root = Path(root)
    return {
        "input": root / "images" / f"{sample_id}.png",
        "ground_truth": root / "labels" / f"{sample_id}.png",
        "mask": root / "masks" / f"{sample_id}.png",
    }


def load_image(path: Path) -> Image:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return Image(arr, "byte")


def save_image(img: Image, path: Path) -> None:
    v = to_range(img, "byte").values
    arr = np.rint(v).clip(0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr).save(path)


def load_mask(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return (arr >= MASK_THRESHOLD).astype(np.float32)


def save_mask(mask: np.ndarray, path: Path) -> None:
    mask = validate_mask(mask)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def read_sample(root: Path, sample_id: str) -> Sample:
    paths = sample_paths(root, sample_id)
    for name, p in paths.items():
        if not p.is_file():
            raise DataError(f"sample {sample_id!r}: missing {name} file {p}")
    sample = Sample(
        input=load_image(paths["input"]),
        ground_truth=load_image(paths["ground_truth"]),
        mask=load_mask(paths["mask"]),
        id=sample_id,
    )
    return validate_sample(sample)


def write_sample(root: Path, sample: Sample) -> None:
    paths = sample_paths(root, sample.id)
    save_image(sample.input, paths["input"])
    save_image(sample.ground_truth, paths["ground_truth"])
    save_mask(sample.mask, paths["mask"])


def manifest_ids(root: Path) -> list[str]:
    manifest = Path(root) / "manifest.txt"
    if not manifest.is_file():
        raise DataError(f"no manifest at {manifest}")
    ids = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    if not ids:
        raise DataError(f"manifest {manifest} lists no samples")
    return ids


def write_manifest(root: Path, ids: list[str]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.txt").write_text("".join(f"{i}\n" for i in ids))


def load_dataset(root: Path) -> list[Sample]:
    """Read every sample listed in the manifest, validating each one."""
    return [read_sample(root, sid) for sid in manifest_ids(root)]

"""Image-quality metrics for erased scenes and dataset-level evaluation.

All comparisons are pure functions of two aligned images. PSNR is computed
jointly over color channels on the byte scale; SSIM, AGE and the error-pixel
rates operate on an ITU-R 601 grayscale conversion; the l2 error is a plain
mean squared error on unit-range values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .data import Image, Sample, manifest_ids, read_sample, to_range

DEFAULT_TAU = 20.0
PSNR_CAP = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

GRAY_WEIGHTS = (0.299, 0.587, 0.114)

METRIC_KEYS = ("psnr", "ssim", "age", "peps", "pceps", "l2")


class MetricError(ValueError):
    """Raised for misaligned or unusable metric inputs."""


def _pair(a: Image, b: Image, range_tag: str) -> tuple[np.ndarray, np.ndarray]:
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels):
        raise MetricError(
            f"image shapes differ: {a.values.shape} vs {b.values.shape}"
        )
    return (
        to_range(a, range_tag).values.astype(np.float64),
        to_range(b, range_tag).values.astype(np.float64),
    )


def to_gray(img: Image) -> np.ndarray:
    """Byte-range luminance plane (ITU-R 601 weights), shape ``H x W`` float64."""
    v = to_range(img, "byte").values.astype(np.float64)
    if v.shape[2] == 1:
        return v[..., 0]
    r, g, b = GRAY_WEIGHTS
    return r * v[..., 0] + g * v[..., 1] + b * v[..., 2]


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB on the byte scale.

    MSE is taken over every element of the color image. Identical (or
    near-identical) inputs are capped at 100 dB so the value stays finite.
    """
    va, vb = _pair(a, b, "byte")
    mse = float(np.mean((va - vb) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse))


def _gaussian_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    k /= k.sum()
    return np.outer(k, k)


def ssim(a: Image, b: Image) -> float:
    """Mean structural similarity of the grayscale conversions.

    Reference formulation: 11x11 Gaussian window with sigma 1.5, K1=0.01,
    K2=0.03, dynamic range 255, population (not sample) covariance, local
    statistics from a valid-mode convolution so window-clipped borders are
    excluded from the mean.
    """
    ga = to_gray(a)
    gb = to_gray(b)
    if ga.shape != gb.shape:
        raise MetricError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < SSIM_WINDOW:
        raise MetricError(
            f"image {ga.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    w = _gaussian_kernel()

    def f(x):
        return convolve2d(x, w, mode="valid")

    mu1, mu2 = f(ga), f(gb)
    s11 = f(ga * ga) - mu1 * mu1
    s22 = f(gb * gb) - mu2 * mu2
    s12 = f(ga * gb) - mu1 * mu2
    c1 = (SSIM_K1 * 255.0) ** 2
    c2 = (SSIM_K2 * 255.0) ** 2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def age(a: Image, b: Image) -> float:
    """Average gray-level absolute difference."""
    ga, gb = to_gray(a), to_gray(b)
    if ga.shape != gb.shape:
        raise MetricError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    return float(np.mean(np.abs(ga - gb)))


def error_pixel_rates(a: Image, b: Image, tau: float = DEFAULT_TAU) -> tuple[float, float]:
    """Fractions of error pixels and of clustered error pixels.

    A pixel is an error pixel when its gray absolute difference exceeds
    ``tau``; it is clustered when all four of its 4-connected neighbors are
    error pixels too, so border pixels are never clustered.
    """
    ga, gb = to_gray(a), to_gray(b)
    if ga.shape != gb.shape:
        raise MetricError(f"image shapes differ: {ga.shape} vs {gb.shape}")
    err = np.abs(ga - gb) > tau
    peps = float(err.mean())
    clustered = (
        err[1:-1, 1:-1]
        & err[:-2, 1:-1]
        & err[2:, 1:-1]
        & err[1:-1, :-2]
        & err[1:-1, 2:]
    )
    pceps = float(clustered.sum() / err.size)
    return peps, pceps


def l2_error(a: Image, b: Image) -> float:
    """Mean squared difference on unit-range values."""
    va, vb = _pair(a, b, "unit")
    return float(np.mean((va - vb) ** 2))


def compare(a: Image, b: Image, tau: float = DEFAULT_TAU) -> dict[str, float]:
    """All six metrics between an output and its reference, keyed by name."""
    peps, pceps = error_pixel_rates(a, b, tau)
    return {
        "psnr": psnr(a, b),
        "ssim": ssim(a, b),
        "age": age(a, b),
        "peps": peps,
        "pceps": pceps,
        "l2": l2_error(a, b),
    }


@dataclass(frozen=True)
class MetricsReport:
    """Per-image metric rows plus their unweighted means.

    ``aggregate`` is ``None`` when no image was scored; ``errors`` maps ids
    that could not be evaluated to a reason.
    """

    per_image: dict[str, dict[str, float]]
    aggregate: dict[str, float] | None
    errors: dict[str, str] = field(default_factory=dict)


def build_report(per_image: dict[str, dict[str, float]],
                 errors: dict[str, str] | None = None) -> MetricsReport:
    if per_image:
        aggregate = {
            k: float(np.mean([row[k] for row in per_image.values()]))
            for k in METRIC_KEYS
        }
    else:
        aggregate = None
    return MetricsReport(dict(per_image), aggregate, dict(errors or {}))


def evaluate(predict, root: Path, tau: float = DEFAULT_TAU,
             ids: list[str] | None = None) -> MetricsReport:
    """Score a model over a dataset directory.

    ``predict`` maps an input :class:`Image` to an erased :class:`Image`
    (any declared range). Samples that fail to load or score are recorded
    under ``errors`` and evaluation continues.
    """
    if ids is None:
        ids = manifest_ids(root)
    per_image: dict[str, dict[str, float]] = {}
    errors: dict[str, str] = {}
    for sid in ids:
        try:
            sample: Sample = read_sample(root, sid)
            out = predict(sample.input)
            per_image[sid] = compare(out, sample.ground_truth, tau)
        except Exception as exc:
            errors[sid] = str(exc)
    return build_report(per_image, errors)


def write_records(report: MetricsReport, path: Path) -> None:
    """One JSON object per scored image, in evaluation order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for sid, row in report.per_image.items():
            fh.write(json.dumps({"id": sid, **row}) + "\n")


def format_summary(report: MetricsReport) -> str:
    """Fixed-width table of per-image rows, the mean row, and any errors."""
    header = f"{'id':<20}" + "".join(f"{k:>10}" for k in METRIC_KEYS)
    lines = [header, "-" * len(header)]

    def row(label, values):
        cells = "".join(f"{values[k]:>10.4f}" for k in METRIC_KEYS)
        return f"{label:<20}{cells}"

    for sid, values in report.per_image.items():
        lines.append(row(sid[:20], values))
    if report.aggregate is not None:
        lines.append("-" * len(header))
        lines.append(row("mean", report.aggregate))
    else:
        lines.append("(no images scored)")
    for sid, message in report.errors.items():
        lines.append(f"error {sid}: {message}")
    return "\n".join(lines) + "\n"

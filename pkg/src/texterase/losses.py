"""Training objective for the eraser generator.

Four reconstruction terms plus the adversarial term:

* multiscale regression: per-scale masked L1 between each output head and
  an area-averaged ground-truth pyramid, text and non-text regions
  weighted separately;
* content: L1 between perceptual features of the output (and of the
  mask-composited output) and those of the ground truth;
* texture: L1 between Gram matrices of the same feature taps;
* total variation: L1 of neighboring-pixel differences of the output.

L1 here means mean absolute error, except the texture term which keeps the
explicit 1/(C*H*W) normalization over a raw element sum; the TV term is
normalized by the number of neighbor pairs. This keeps loss magnitudes
comparable across resolutions so one set of weights works at any size.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .data import compose, downsample_image, downsample_mask

SCALES = (0.25, 0.5, 1.0)

# Perceptual tap widths after the first three pooling stages of the
# classic 16-layer configuration.
TAP_CHANNELS = (64, 128, 256)

VGG16_SHA256_PREFIX = "397923af"
DEFAULT_VGG16_PATH = Path("~/.cache/texterase/vgg16.pth")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class LossError(ValueError):
    """Raised for misaligned loss inputs."""


class ExtractorError(RuntimeError):
    """Raised when perceptual-extractor weights cannot be loaded."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective.

    ``alpha`` scales the non-text term of the multiscale loss;
    ``lambda_scales`` weight the (1/4, 1/2, 1) output scales; the remaining
    lambdas weight content, texture, total-variation, and adversarial terms.
    """

    alpha: float = 6.0
    lambda_scales: tuple[float, float, float] = (0.6, 0.8, 1.0)
    lambda_e: float = 0.5
    lambda_tex: float = 50.0
    lambda_t: float = 25.0
    lambda_adv: float = 1.0

    def __post_init__(self):
        flat = (self.alpha, *self.lambda_scales, self.lambda_e,
                self.lambda_tex, self.lambda_t, self.lambda_adv)
        if any(v < 0 for v in flat):
            raise LossError("loss weights must be non-negative")


# feature extractors -----------------------------------------------------

class RandomFeatureExtractor(nn.Module):
    """Fixed random conv/pool stack standing in for the pretrained extractor.

    Three stages of 3x3 conv + ELU + 2x2 average pool produce taps with the
    same shapes as the pretrained network's first three pooling stages, from
    a seeded initialization, so the whole suite runs without any weights
    file. Takes signed-range input directly. Parameters are frozen.
    """

    def __init__(self, seed: int = 0, widths: tuple[int, ...] = TAP_CHANNELS):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_c = 3
        for out_c in widths:
            conv = nn.Conv2d(in_c, out_c, kernel_size=3, padding=1, bias=False)
            std = (2.0 / (in_c * 9)) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
            convs.append(conv)
            in_c = out_c
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for conv in self.convs:
            x = F.avg_pool2d(F.elu(conv(x)), kernel_size=2)
            taps.append(x)
        return taps


class Vgg16FeatureExtractor(nn.Module):
    """Frozen taps at the first three pooling stages of a pretrained VGG16.

    Weights are read from a local file (``path`` argument, the
    ``TEXTERASE_VGG16_WEIGHTS`` environment variable, or
    ``~/.cache/texterase/vgg16.pth``) in the standard ``features.N.*``
    state-dict layout and verified against a sha256 prefix before use; a
    missing or corrupt file fails here, at construction. Signed-range
    inputs are remapped to the normalization the weights were trained with.
    """

    def __init__(self, path: Path | None = None,
                 expected_sha256_prefix: str | None = VGG16_SHA256_PREFIX):
        super().__init__()
        if path is None:
            path = Path(os.environ.get("TEXTERASE_VGG16_WEIGHTS",
                                       DEFAULT_VGG16_PATH)).expanduser()
        path = Path(path).expanduser()
        if not path.is_file():
            raise ExtractorError(
                f"no pretrained weights at {path}; fetch them as described in the README"
            )
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        if expected_sha256_prefix and not digest.startswith(expected_sha256_prefix):
            raise ExtractorError(
                f"weights file {path} has sha256 {digest[:8]}..., "
                f"expected prefix {expected_sha256_prefix}"
            )

        cfg = (64, 64, "P", 128, 128, "P", 256, 256, 256, "P")
        layers: list[nn.Module] = []
        in_c = 3
        for item in cfg:
            if item == "P":
                layers.append(nn.MaxPool2d(2))
            else:
                layers.append(nn.Conv2d(in_c, item, kernel_size=3, padding=1))
                layers.append(nn.ReLU(inplace=True))
                in_c = item
        self.features = nn.Sequential(*layers)
        self.tap_indices = tuple(i for i, m in enumerate(self.features)
                                 if isinstance(m, nn.MaxPool2d))

        state = torch.load(path, map_location="cpu", weights_only=True)
        wanted = {}
        for key, value in state.items():
            if key.startswith("features."):
                rest = key.split(".", 1)[1]
                if int(rest.split(".")[0]) < len(self.features):
                    wanted[rest] = value
        try:
            self.features.load_state_dict(wanted, strict=True)
        except RuntimeError as exc:
            raise ExtractorError(f"weights file {path} does not fit: {exc}") from exc

        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = ((x + 1.0) / 2.0 - self.mean) / self.std
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.tap_indices:
                taps.append(x)
        return taps


def build_extractor(kind: str, path: Path | None = None, seed: int = 0) -> nn.Module:
    if kind == "toy":
        return RandomFeatureExtractor(seed=seed)
    if kind == "vgg16":
        return Vgg16FeatureExtractor(path)
    raise LossError(f"unknown extractor kind {kind!r} (expected 'toy' or 'vgg16')")


# loss terms --------------------------------------------------------------

def _check_scale(out: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> None:
    if out.shape != gt.shape:
        raise LossError(f"output {tuple(out.shape)} vs ground truth {tuple(gt.shape)}")
    if mask.shape[-2:] != out.shape[-2:]:
        raise LossError(f"mask {tuple(mask.shape[-2:])} vs output {tuple(out.shape[-2:])}")


def multiscale_regression_loss(outs, gts, masks, w: LossWeights) -> torch.Tensor:
    """Scale-weighted masked L1 over the output pyramid.

    ``outs``, ``gts``, ``masks`` are sequences ordered (1/4, 1/2, 1); each
    mask is broadcast over channels. Per scale:
    lambda_i * (mean|M*(out-gt)| + alpha * mean|(1-M)*(out-gt)|).
    """
    if not (len(outs) == len(gts) == len(masks) == len(w.lambda_scales)):
        raise LossError(
            f"expected {len(w.lambda_scales)} scales, got "
            f"{len(outs)}/{len(gts)}/{len(masks)}"
        )
    total = None
    for lam, out, gt, mask in zip(w.lambda_scales, outs, gts, masks):
        _check_scale(out, gt, mask)
        d = out - gt
        term = (mask * d).abs().mean() + w.alpha * ((1.0 - mask) * d).abs().mean()
        total = lam * term if total is None else total + lam * term
    return total


def content_loss(out, comp, gt, extractor) -> torch.Tensor:
    """Per-tap mean absolute feature difference, output and composite branches."""
    f_out = extractor(out)
    f_comp = extractor(comp)
    f_gt = extractor(gt)
    total = None
    for a, c, g in zip(f_out, f_comp, f_gt):
        term = (a - g).abs().mean() + (c - g).abs().mean()
        total = term if total is None else total + term
    return total


def gram(act: torch.Tensor) -> torch.Tensor:
    """Channel autocorrelation of a feature map, summed over space.

    ``(C, H, W)`` input gives ``(C, C)``; ``(B, C, H, W)`` gives
    ``(B, C, C)``. Entry (c, c') is the spatial inner product of channels
    c and c', so the result is symmetric positive semidefinite.
    """
    squeeze = act.dim() == 3
    if squeeze:
        act = act[None]
    b, c = act.shape[:2]
    flat = act.reshape(b, c, -1)
    g = torch.bmm(flat, flat.transpose(1, 2))
    return g[0] if squeeze else g


def texture_loss(out, comp, gt, extractor) -> torch.Tensor:
    """Gram-matrix L1 between feature taps, normalized by tap volume.

    Per tap and per image: sum|gram(A(out)) - gram(A(gt))| / (C*H*W), plus
    the same with the composite; averaged over the batch.
    """
    f_out = extractor(out)
    f_comp = extractor(comp)
    f_gt = extractor(gt)
    total = None
    for a, c, g in zip(f_out, f_comp, f_gt):
        norm = a.shape[-3] * a.shape[-2] * a.shape[-1]
        gg = gram(g)
        term = ((gram(a) - gg).abs().sum(dim=(-2, -1)) / norm).mean()
        term = term + ((gram(c) - gg).abs().sum(dim=(-2, -1)) / norm).mean()
        total = term if total is None else total + term
    return total


def tv_loss(out: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between 4-connected neighbor pixels."""
    c, h, w = out.shape[-3:]
    pairs = c * ((h - 1) * w + h * (w - 1))
    dv = (out[..., 1:, :] - out[..., :-1, :]).abs().sum(dim=(-3, -2, -1))
    dh = (out[..., :, 1:] - out[..., :, :-1]).abs().sum(dim=(-3, -2, -1))
    return ((dv + dh) / pairs).mean()


@dataclass(frozen=True)
class LossBreakdown:
    """The four reconstruction terms, the adversarial term, and their
    weighted total (all 0-dim tensors; ``total`` carries the graph)."""

    multiscale: torch.Tensor
    content: torch.Tensor
    texture: torch.Tensor
    tv: torch.Tensor
    adversarial: torch.Tensor
    total: torch.Tensor


def combined_loss(outs, gt, mask, adversarial, extractor,
                  w: LossWeights | None = None) -> LossBreakdown:
    """Full generator objective on one batch.

    ``outs`` is the (1/4, 1/2, 1) output pyramid; ``gt`` and ``mask`` are
    full-scale ``(B, 3, H, W)`` / ``(B, 1, H, W)``. The ground-truth
    pyramid is built by area averaging and the mask pyramid by block max.
    ``adversarial`` is the already-computed generator-side adversarial term.
    """
    if w is None:
        w = LossWeights()
    gts = [downsample_image(gt, s) for s in SCALES]
    masks = [mask if s == 1.0 else downsample_mask(mask, s) for s in SCALES]

    out_full = outs[-1]
    comp = compose(out_full, gt, mask)

    ms = multiscale_regression_loss(outs, gts, masks, w)
    lc = content_loss(out_full, comp, gt, extractor)
    lt = texture_loss(out_full, comp, gt, extractor)
    ltv = tv_loss(out_full)
    adv = adversarial if torch.is_tensor(adversarial) else torch.tensor(float(adversarial))
    total = ms + w.lambda_e * lc + w.lambda_tex * lt + w.lambda_t * ltv + w.lambda_adv * adv
    return LossBreakdown(ms, lc, lt, ltv, adv, total)

"""Mask-aware local patch critic.

A conditional patch discriminator scores overlapping local windows of a
candidate image given the text image it came from. The conv stack is the
classic patch critic (widths 64/128/256/512, three stride-2 stages, one
stride-1 stage, 1-channel sigmoid head), whose geometry puts a 70x70
receptive field under each output cell at stride 8.

Padding is applied only on the right/bottom edge of every convolution, so
output cell (i, j) reads exactly the input window rows [8i, 8i+70) and
columns [8j, 8j+70); windows near the high edges overhang into zero
padding. The label map uses the same window rule, which keeps the critic
and its supervision aligned by construction.

Realness labels follow the text mask: a patch whose window contains any
text pixel is labeled 0 (must be judged fake on generated images) with a
weight equal to its mask coverage; text-free patches are not penalized on
generated images. Real pairs are all-real.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

EPS = 1e-7

# (kernel, stride) of every conv in the stack; the window geometry below
# is derived from this so the critic and label_map cannot drift apart.
_LAYERS = ((4, 2), (4, 2), (4, 2), (4, 1), (4, 1))


def _geometry() -> tuple[int, int]:
    stride, field = 1, 1
    for k, s in _LAYERS:
        field += (k - 1) * stride
        stride *= s
    return stride, field


PATCH_STRIDE, PATCH_SIZE = _geometry()  # 8, 70

MIN_INPUT = 32


class DiscriminatorError(ValueError):
    """Raised for invalid configs or input sizes."""


def grid_size(n: int) -> int:
    """Output cells along one axis for an n-pixel input (62 for n=512)."""
    if n < MIN_INPUT or n % PATCH_STRIDE:
        raise DiscriminatorError(
            f"input size {n} must be a multiple of {PATCH_STRIDE} and at least {MIN_INPUT}"
        )
    return n // PATCH_STRIDE - 2


def window(i: int) -> tuple[int, int]:
    """Half-open input pixel range read by output cell index i."""
    return i * PATCH_STRIDE, i * PATCH_STRIDE + PATCH_SIZE


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Stage widths of the conv stack; input is the 6-channel (x, y) pair."""

    widths: tuple[int, int, int, int] = (64, 128, 256, 512)

    def __post_init__(self):
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise DiscriminatorError(f"need 4 positive stage widths, got {self.widths}")


class PatchDiscriminator(nn.Module):
    """Sigmoid realness grid over local windows of a conditioned candidate.

    No normalization layers: every output cell must stay a pure function
    of its own input window.
    """

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        w1, w2, w3, w4 = self.config.widths
        plan = [(6, w1, 2), (w1, w2, 2), (w2, w3, 2), (w3, w4, 1), (w4, 1, 1)]
        layers: list[nn.Module] = []
        for n, (in_c, out_c, stride) in enumerate(plan):
            layers.append(nn.ZeroPad2d((0, 2, 0, 2)))
            layers.append(nn.Conv2d(in_c, out_c, kernel_size=4, stride=stride))
            if n < len(plan) - 1:
                layers.append(nn.LeakyReLU(0.2, inplace=True))
        self.stack = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if x.shape != y.shape:
            raise DiscriminatorError(f"input shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
        if x.dim() != 4 or x.shape[1] != 3:
            raise DiscriminatorError(f"expected (B, 3, H, W) inputs, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        s_h, s_w = grid_size(h), grid_size(w)
        grid = torch.sigmoid(self.stack(torch.cat([x, y], dim=1)))
        assert grid.shape[-2:] == (s_h, s_w)
        return grid


def build_discriminator(config: DiscriminatorConfig | None = None,
                        seed: int = 0) -> PatchDiscriminator:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        d = PatchDiscriminator(config)
        for m in d.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)
    return d


@dataclass(frozen=True)
class PatchLabelMap:
    """Per-cell realness labels and text coverage.

    ``labels`` is 1 on text-free windows, 0 where the window holds any text;
    ``coverage`` is the window's mask sum over PATCH_SIZE^2. Shapes follow
    the input: ``(S, S)`` for a plain mask, ``(B, 1, S, S)`` for a batch.
    """

    labels: torch.Tensor
    coverage: torch.Tensor


def label_map(mask) -> PatchLabelMap:
    """Window-sum the mask at the critic's geometry (exact integer sums).

    Accepts an ``H x W`` numpy mask or a ``(B, 1, H, W)`` tensor.
    """
    if isinstance(mask, np.ndarray):
        if mask.ndim != 2:
            raise DiscriminatorError(f"mask must be 2-D, got {mask.shape}")
        m = torch.from_numpy(np.ascontiguousarray(mask)).round().to(torch.int64)[None, None]
        squeeze = True
    elif torch.is_tensor(mask) and mask.dim() == 4 and mask.shape[1] == 1:
        m = mask.detach().round().to(torch.int64)
        squeeze = False
    else:
        raise DiscriminatorError("mask must be an H x W array or a (B, 1, H, W) tensor")

    b, _, h, w = m.shape
    s_h, s_w = grid_size(h), grid_size(w)

    # inclusive prefix sums with a leading zero row/column
    p = torch.zeros((b, 1, h + 1, w + 1), dtype=torch.int64)
    p[:, :, 1:, 1:] = m.cumsum(dim=-2).cumsum(dim=-1)

    r0 = torch.arange(s_h) * PATCH_STRIDE
    r1 = (r0 + PATCH_SIZE).clamp(max=h)
    c0 = torch.arange(s_w) * PATCH_STRIDE
    c1 = (c0 + PATCH_SIZE).clamp(max=w)

    sums = (
        p[:, :, r1[:, None], c1[None, :]]
        - p[:, :, r0[:, None], c1[None, :]]
        - p[:, :, r1[:, None], c0[None, :]]
        + p[:, :, r0[:, None], c0[None, :]]
    )
    labels = (sums == 0).float()
    coverage = sums.float() / (PATCH_SIZE * PATCH_SIZE)
    if squeeze:
        return PatchLabelMap(labels[0, 0], coverage[0, 0])
    return PatchLabelMap(labels, coverage)


def _per_image_sum(t: torch.Tensor) -> torch.Tensor:
    if t.dim() == 4:
        return t.sum(dim=(1, 2, 3))
    return t.sum()


def generator_adversarial_loss(preds: torch.Tensor, labels: PatchLabelMap) -> torch.Tensor:
    """Coverage-weighted log-realness of text patches on a generated image.

    -sum_i coverage_i * (1 - L_i) * log(P_i), summed over the grid and
    averaged over the batch; text-free patches contribute nothing.
    """
    p = preds.clamp(EPS, 1.0 - EPS)
    term = labels.coverage * (1.0 - labels.labels) * (-torch.log(p))
    return _per_image_sum(term).mean()


def discriminator_loss(preds_real: torch.Tensor, preds_fake: torch.Tensor,
                       labels: PatchLabelMap) -> torch.Tensor:
    """Locality-weighted critic objective.

    Real pairs are pushed to 1 on every patch; generated pairs are pushed
    to 0 only on text patches, each weighted by coverage and averaged over
    the text patches present. Text-free patches of a generated image are
    not penalized.
    """
    pr = preds_real.clamp(EPS, 1.0 - EPS)
    real_term = (-torch.log(pr)).mean()

    pf = preds_fake.clamp(EPS, 1.0 - EPS)
    text = 1.0 - labels.labels
    weighted = labels.coverage * text * (-torch.log(1.0 - pf))
    counts = _per_image_sum(text)
    fake_per_image = _per_image_sum(weighted) / counts.clamp(min=1.0)
    return real_term + fake_per_image.mean()

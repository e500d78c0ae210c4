"""Whole-image eraser network.

A residual-style convolution pathway (strides 4/8/16/32) feeds a five-stage
transposed-convolution pathway through channel-preserving lateral transform
blocks attached at matching spatial sizes; the stride-32 tap is summed with
the pathway entry itself. Image heads at 1/4, 1/2 and full resolution are
tanh-bounded; a sigmoid side head on the backbone tail exposes a coarse
text/non-text score map (no loss attaches to it).

Inside the convolution pathway activations are ReLU; everywhere else ELU.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

from .data import Image, from_tensor, to_tensor

CHECKPOINT_FORMAT_VERSION = 1

# Total downsampling of the convolution pathway; inputs must divide by it.
BACKBONE_STRIDE = 32

OUTPUT_SCALES = (0.25, 0.5, 1.0)

LATERAL_SHRINK_RATIO = 4


class GeneratorError(ValueError):
    """Raised for invalid configs, input sizes, or checkpoint mismatches."""


@dataclass(frozen=True)
class GeneratorConfig:
    """Width and activation settings; output scales are fixed at (1/4, 1/2, 1)."""

    base_channels: int = 64
    elu_alpha: float = 1.0
    output_scales: tuple[float, float, float] = OUTPUT_SCALES

    def __post_init__(self):
        if self.base_channels < 4 or self.base_channels % 4:
            raise GeneratorError(
                f"base_channels must be a positive multiple of 4, got {self.base_channels}"
            )
        if tuple(self.output_scales) != OUTPUT_SCALES:
            raise GeneratorError(f"output scales are fixed at {OUTPUT_SCALES}")


@dataclass(frozen=True)
class MultiScaleOutput:
    """Generator outputs: three tanh-bounded image scales plus the score map.

    Tensors are batched ``(B, 3, h, w)``; ``score_map`` is ``(B, 1, H/32, W/32)``
    with sigmoid values.
    """

    quarter: torch.Tensor
    half: torch.Tensor
    full: torch.Tensor
    score_map: torch.Tensor

    def scales(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Outputs ordered coarse to fine, matching OUTPUT_SCALES."""
        return (self.quarter, self.half, self.full)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with batch norm and an identity (or projected) skip."""

    def __init__(self, in_c: int, out_c: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_c, out_c, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_c)
        self.conv2 = nn.Conv2d(out_c, out_c, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_c)
        if stride != 1 or in_c != out_c:
            self.skip = nn.Sequential(
                nn.Conv2d(in_c, out_c, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_c),
            )
        else:
            self.skip = nn.Identity()
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        h = self.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return self.relu(h + self.skip(x))


class Backbone(nn.Module):
    """18-layer-style residual encoder exposing the four stage outputs."""

    def __init__(self, base: int):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, base, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(base),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.stage2 = nn.Sequential(BasicBlock(base, base), BasicBlock(base, base))
        self.stage3 = nn.Sequential(BasicBlock(base, 2 * base, 2), BasicBlock(2 * base, 2 * base))
        self.stage4 = nn.Sequential(BasicBlock(2 * base, 4 * base, 2), BasicBlock(4 * base, 4 * base))
        self.stage5 = nn.Sequential(BasicBlock(4 * base, 8 * base, 2), BasicBlock(8 * base, 8 * base))

    def forward(self, x):
        x = self.stem(x)
        c2 = self.stage2(x)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c2, c3, c4, c5


class LateralBlock(nn.Module):
    """Channel-preserving transform: 1x1 shrink, two 3x3 convs, 1x1 expand.

    Shrinks to ``channels / LATERAL_SHRINK_RATIO`` internally and expands
    back, keeping the spatial size, so the output can be summed with a
    same-shape pathway feature.
    """

    def __init__(self, channels: int, elu_alpha: float):
        super().__init__()
        inner = max(1, channels // LATERAL_SHRINK_RATIO)
        self.shrink = nn.Conv2d(channels, inner, 1)
        self.conv1 = nn.Conv2d(inner, inner, 3, padding=1)
        self.conv2 = nn.Conv2d(inner, inner, 3, padding=1)
        self.expand = nn.Conv2d(inner, channels, 1)
        self.act = nn.ELU(elu_alpha)

    def forward(self, x):
        h = self.act(self.shrink(x))
        h = self.act(self.conv1(h))
        h = self.act(self.conv2(h))
        return self.expand(h)


def _deconv(in_c: int, out_c: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(in_c, out_c, kernel_size=4, stride=2, padding=1)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        b = config.base_channels
        alpha = config.elu_alpha
        self.backbone = Backbone(b)

        self.lateral2 = LateralBlock(b, alpha)
        self.lateral3 = LateralBlock(2 * b, alpha)
        self.lateral4 = LateralBlock(4 * b, alpha)
        self.lateral5 = LateralBlock(8 * b, alpha)

        self.reduce = nn.Conv2d(8 * b, 4 * b, 1)
        self.deconv1 = _deconv(4 * b, 4 * b)
        self.deconv2 = _deconv(4 * b, 2 * b)
        self.deconv3 = _deconv(2 * b, b)
        self.deconv4 = _deconv(b, b // 2)
        self.deconv5 = _deconv(b // 2, 3)

        self.quarter_head = nn.Conv2d(b, 3, 1)
        self.half_head = nn.Conv2d(b // 2, 3, 1)
        self.score_head = nn.Conv2d(8 * b, 1, 1)
        self.act = nn.ELU(alpha)

    def forward(self, x: torch.Tensor) -> MultiScaleOutput:
        if x.dim() != 4 or x.shape[1] != 3:
            raise GeneratorError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h < BACKBONE_STRIDE or w < BACKBONE_STRIDE or h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise GeneratorError(
                f"input size {h}x{w} must be a multiple of {BACKBONE_STRIDE}"
            )
        c2, c3, c4, c5 = self.backbone(x)
        score_map = torch.sigmoid(self.score_head(c5))

        t = self.act(self.reduce(c5 + self.lateral5(c5)))
        t = self.act(self.deconv1(t) + self.lateral4(c4))
        t = self.act(self.deconv2(t) + self.lateral3(c3))
        t = self.act(self.deconv3(t) + self.lateral2(c2))
        quarter = torch.tanh(self.quarter_head(t))
        t = self.act(self.deconv4(t))
        half = torch.tanh(self.half_head(t))
        full = torch.tanh(self.deconv5(t))
        return MultiScaleOutput(quarter, half, full, score_map)


def _init_weights(module: nn.Module) -> None:
    for name, m in module.named_modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            if name.endswith("_head"):
                nn.init.normal_(m.weight, 0.0, 0.02)
            else:
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_generator(config: GeneratorConfig | None = None, seed: int = 0) -> Generator:
    """Construct and seed-initialize a generator (same seed, same weights)."""
    if config is None:
        config = GeneratorConfig()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = Generator(config)
        _init_weights(gen)
    return gen


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_generator(gen: Generator, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": asdict(gen.config),
            "state_dict": gen.state_dict(),
        },
        path,
    )


def load_generator(path: Path) -> Generator:
    """Load a generator from its own file or from a full training checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise GeneratorError(f"no checkpoint at {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(blob, dict) and "train_config" in blob:
        blob = blob.get("generator")
    return generator_from_blob(blob, path)


def generator_from_blob(blob: dict, origin) -> Generator:
    """Rebuild a generator from a checkpoint payload (shared with trainer)."""
    try:
        version = blob["format_version"]
        cfg = dict(blob["config"])
        cfg["output_scales"] = tuple(cfg["output_scales"])
        state = blob["state_dict"]
    except (KeyError, TypeError) as exc:
        raise GeneratorError(f"{origin} is not a generator checkpoint: {exc}") from exc
    if version != CHECKPOINT_FORMAT_VERSION:
        raise GeneratorError(
            f"{origin}: checkpoint format {version} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    gen = Generator(GeneratorConfig(**cfg))
    try:
        gen.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise GeneratorError(f"{origin} does not match its config: {exc}") from exc
    return gen


def erase(gen: Generator, img: Image) -> Image:
    """Run full-scale inference on one image, returning a signed-range Image."""
    gen.eval()
    with torch.no_grad():
        out = gen(to_tensor(img)[None])
    return from_tensor(out.full[0])

"""Alternating adversarial training: one critic step, one generator step.

The loop owns all mutable state. Batch order is a pure function of
(seed, iteration), so a run can be reproduced or resumed bit-for-bit
from any checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import (
    DataError,
    Sample,
    manifest_ids,
    read_sample,
    resize_sample,
    to_tensor,
    validate_mask,
    validate_sample,
)
from .discriminator import (
    DiscriminatorConfig,
    PatchDiscriminator,
    build_discriminator,
    discriminator_loss,
    generator_adversarial_loss,
    label_map,
)
from .generator import (
    CHECKPOINT_FORMAT_VERSION,
    GeneratorConfig,
    build_generator,
    generator_from_blob,
)
from .losses import LossBreakdown, LossWeights, build_extractor, combined_loss

LOG_NAME = "train_log.txt"
LOG_FIELDS = ("lm", "lc", "lt", "ltv", "ladv", "d")
MIN_IMAGE_SIZE = 64


class TrainerError(RuntimeError):
    """Raised for invalid configs, datasets, or checkpoints."""


class NonFiniteLossError(TrainerError):
    """A loss degenerated to NaN/inf; carries the offending batch ids."""


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)

    def __post_init__(self):
        if self.name != "adam":
            raise TrainerError(f"unsupported optimizer {self.name!r}")
        if self.learning_rate <= 0:
            raise TrainerError(f"learning rate must be positive, got {self.learning_rate}")


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 1000
    batch_size: int = 4
    image_size: int = 512
    seed: int = 0
    checkpoint_every: int = 100
    log_every: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    extractor: str = "toy"
    extractor_seed: int = 0
    vgg16_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainerError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_iterations < 0:
            raise TrainerError(f"total_iterations must be >= 0, got {self.total_iterations}")
        if self.image_size < MIN_IMAGE_SIZE or self.image_size % 32:
            raise TrainerError(
                f"image_size must be a multiple of 32 and at least {MIN_IMAGE_SIZE}, "
                f"got {self.image_size}"
            )
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise TrainerError("checkpoint_every and log_every must be >= 1")


def config_from_dict(d: dict) -> TrainConfig:
    """Rebuild a TrainConfig from its ``asdict`` form (checkpoint payloads)."""
    d = dict(d)
    try:
        opt = dict(d.pop("optimizer"))
        opt["betas"] = tuple(opt["betas"])
        gen = dict(d.pop("generator"))
        gen["output_scales"] = tuple(gen["output_scales"])
        weights = dict(d.pop("weights"))
        weights["lambda_scales"] = tuple(weights["lambda_scales"])
        disc_widths = tuple(d.pop("discriminator")["widths"])
        return TrainConfig(
            optimizer=OptimizerConfig(**opt),
            generator=GeneratorConfig(**gen),
            discriminator=DiscriminatorConfig(widths=disc_widths),
            weights=LossWeights(**weights),
            **d,
        )
    except (KeyError, TypeError) as exc:
        raise TrainerError(f"malformed train config: {exc}") from exc


@dataclass
class TrainState:
    """Everything the loop mutates; serializable via checkpoints."""

    config: TrainConfig
    iteration: int
    generator: torch.nn.Module
    discriminator: PatchDiscriminator
    extractor: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer


def _make_extractor(config: TrainConfig) -> torch.nn.Module:
    path = Path(config.vgg16_path) if config.vgg16_path else None
    return build_extractor(config.extractor, path=path, seed=config.extractor_seed)


def _make_optimizer(params, opt: OptimizerConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=opt.learning_rate, betas=opt.betas)


def init_train_state(config: TrainConfig) -> TrainState:
    gen = build_generator(config.generator, seed=config.seed)
    disc = build_discriminator(config.discriminator, seed=config.seed + 1)
    return TrainState(
        config=config,
        iteration=0,
        generator=gen,
        discriminator=disc,
        extractor=_make_extractor(config),
        opt_g=_make_optimizer(gen.parameters(), config.optimizer),
        opt_d=_make_optimizer(disc.parameters(), config.optimizer),
    )


def batch_indices(seed: int, iteration: int, dataset_size: int, batch_size: int) -> list[int]:
    """Sample indices for one step: chunk a per-epoch seeded permutation.

    A pure function of its arguments, so any iteration's batch can be
    recomputed without replaying the loop.
    """
    if dataset_size < 1:
        raise TrainerError("dataset is empty")
    per_epoch = math.ceil(dataset_size / batch_size)
    epoch, slot = divmod(iteration, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(dataset_size)
    return perm[slot * batch_size:(slot + 1) * batch_size].tolist()


def _check_finite(value: float, name: str, iteration: int, batch: list[Sample]) -> None:
    if math.isfinite(value):
        return
    ids = [s.id or "?" for s in batch]
    raise NonFiniteLossError(
        f"{name} loss is {value} at iteration {iteration} on batch {ids}"
    )


def train_step(state: TrainState,
               batch: list[Sample]) -> tuple[TrainState, LossBreakdown, float]:
    """One critic update on detached fakes, then one generator update."""
    if not batch:
        raise TrainerError("empty batch")
    x = torch.stack([to_tensor(s.input) for s in batch])
    gt = torch.stack([to_tensor(s.ground_truth) for s in batch])
    mask = torch.stack(
        [torch.from_numpy(validate_mask(s.mask)).float()[None] for s in batch]
    )
    labels = label_map(mask)

    gen, disc = state.generator, state.discriminator
    gen.train()
    disc.train()

    with torch.no_grad():
        fake = gen(x).full
    d_loss = discriminator_loss(disc(x, gt), disc(x, fake), labels)
    _check_finite(d_loss.item(), "critic", state.iteration + 1, batch)
    state.opt_d.zero_grad()
    d_loss.backward()
    state.opt_d.step()

    outs = gen(x)
    adv = generator_adversarial_loss(disc(x, outs.full), labels)
    breakdown = combined_loss(outs.scales(), gt, mask, adv, state.extractor,
                              state.config.weights)
    _check_finite(breakdown.total.item(), "generator", state.iteration + 1, batch)
    state.opt_g.zero_grad()
    breakdown.total.backward()
    state.opt_g.step()

    state.iteration += 1
    return state, breakdown, d_loss.item()


# checkpoints -------------------------------------------------------------

def save_checkpoint(state: TrainState, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "iteration": state.iteration,
            "train_config": asdict(state.config),
            "generator": {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "config": asdict(state.generator.config),
                "state_dict": state.generator.state_dict(),
            },
            "discriminator": state.discriminator.state_dict(),
            "opt_g": state.opt_g.state_dict(),
            "opt_d": state.opt_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
        },
        path,
    )


def load_checkpoint(path: Path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise TrainerError(f"no checkpoint at {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    try:
        version = blob["format_version"]
        config = config_from_dict(blob["train_config"])
        iteration = blob["iteration"]
    except (KeyError, TypeError) as exc:
        raise TrainerError(f"{path} is not a training checkpoint: {exc}") from exc
    if version != CHECKPOINT_FORMAT_VERSION:
        raise TrainerError(
            f"{path}: checkpoint format {version} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )

    gen = generator_from_blob(blob["generator"], path)
    disc = PatchDiscriminator(config.discriminator)
    disc.load_state_dict(blob["discriminator"], strict=True)
    state = TrainState(
        config=config,
        iteration=iteration,
        generator=gen,
        discriminator=disc,
        extractor=_make_extractor(config),
        opt_g=_make_optimizer(gen.parameters(), config.optimizer),
        opt_d=_make_optimizer(disc.parameters(), config.optimizer),
    )
    state.opt_g.load_state_dict(blob["opt_g"])
    state.opt_d.load_state_dict(blob["opt_d"])
    torch.set_rng_state(blob["torch_rng"])
    return state


def format_log_line(iteration: int, breakdown: LossBreakdown, d_loss: float) -> str:
    values = (
        breakdown.multiscale.item(),
        breakdown.content.item(),
        breakdown.texture.item(),
        breakdown.tv.item(),
        breakdown.adversarial.item(),
        d_loss,
    )
    parts = [f"iteration={iteration}"]
    parts += [f"{k}={v:.17g}" for k, v in zip(LOG_FIELDS, values)]
    return " ".join(parts)


# the loop ----------------------------------------------------------------

def _load_training_set(root: Path, image_size: int) -> list[Sample]:
    ids = manifest_ids(root)
    samples = []
    for sample_id in ids:
        sample = validate_sample(read_sample(root, sample_id))
        samples.append(resize_sample(sample, image_size))
    if not samples:
        raise TrainerError(f"dataset at {root} is empty")
    return samples


def fit(config: TrainConfig, dataset_root: Path, out_dir: Path,
        resume: Path | None = None,
        on_log: Callable[[str], None] | None = None) -> Path:
    """Run the loop to ``total_iterations``; returns the final checkpoint path.

    ``resume`` restores a full TrainState; the resumed run keeps the
    checkpoint's configuration apart from ``total_iterations``, which is
    taken from ``config`` so a run can be extended.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state = load_checkpoint(resume)
        state.config = replace(state.config, total_iterations=config.total_iterations)
        log_mode = "a"
    else:
        state = init_train_state(config)
        save_checkpoint(state, out_dir / "ckpt_0.bin")
        log_mode = "w"
    cfg = state.config

    samples = _load_training_set(Path(dataset_root), cfg.image_size)

    with open(out_dir / LOG_NAME, log_mode, encoding="utf-8") as log:
        while state.iteration < cfg.total_iterations:
            picks = batch_indices(cfg.seed, state.iteration, len(samples), cfg.batch_size)
            batch = [samples[i] for i in picks]
            state, breakdown, d_loss = train_step(state, batch)
            if state.iteration % cfg.log_every == 0:
                line = format_log_line(state.iteration, breakdown, d_loss)
                log.write(line + "\n")
                log.flush()
                if on_log is not None:
                    on_log(line)
            if state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"ckpt_{state.iteration}.bin")

    final = out_dir / f"ckpt_{state.iteration}.bin"
    save_checkpoint(state, final)
    return final

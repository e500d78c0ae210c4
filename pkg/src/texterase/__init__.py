"""Scene text erasing: generator, adversarial training, synthesis, evaluation."""

from texterase.data import Image, Sample, read_sample, write_manifest, write_sample
from texterase.discriminator import (
    DiscriminatorConfig,
    PatchDiscriminator,
    build_discriminator,
    discriminator_loss,
    generator_adversarial_loss,
    label_map,
)
from texterase.generator import (
    Generator,
    GeneratorConfig,
    build_generator,
    erase,
    load_generator,
    save_generator,
)
from texterase.losses import (
    LossWeights,
    RandomFeatureExtractor,
    Vgg16FeatureExtractor,
    build_extractor,
    combined_loss,
)
from texterase.metrics import MetricsReport, compare, evaluate
from texterase.synth import SynthConfig, TextSpec, generate_dataset, synthesize_sample
from texterase.trainer import OptimizerConfig, TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "DiscriminatorConfig",
    "Generator",
    "GeneratorConfig",
    "Image",
    "LossWeights",
    "MetricsReport",
    "OptimizerConfig",
    "PatchDiscriminator",
    "RandomFeatureExtractor",
    "Sample",
    "SynthConfig",
    "TextSpec",
    "TrainConfig",
    "Vgg16FeatureExtractor",
    "build_discriminator",
    "build_extractor",
    "build_generator",
    "combined_loss",
    "compare",
    "discriminator_loss",
    "erase",
    "evaluate",
    "fit",
    "generate_dataset",
    "generator_adversarial_loss",
    "label_map",
    "load_generator",
    "read_sample",
    "save_generator",
    "synthesize_sample",
    "write_manifest",
    "write_sample",
]

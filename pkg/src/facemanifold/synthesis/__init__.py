from .network import (
    FORMAT_TAG,
    GeneratorConfig,
    StyleGenerator,
    freeze,
    generate,
    image_to_uint8,
    input_gradients,
    load_generator,
    map_latent,
    modulated_conv2d,
    param_checksum,
    sample_latent,
    sample_noise,
    save_generator,
    stack_latents,
    stack_noise,
    synthesize,
)
from .training import GANTrainConfig, train_generator

__all__ = [
    "FORMAT_TAG",
    "GANTrainConfig",
    "GeneratorConfig",
    "StyleGenerator",
    "freeze",
    "generate",
    "image_to_uint8",
    "input_gradients",
    "load_generator",
    "map_latent",
    "modulated_conv2d",
    "param_checksum",
    "sample_latent",
    "sample_noise",
    "save_generator",
    "stack_latents",
    "stack_noise",
    "synthesize",
    "train_generator",
]

"""Corpora, experiment configuration, the pipeline stages and the CLI."""

from .config import ExperimentConfig
from .corpus import FAKE, REAL, LabeledImages, build_fake_corpus, build_real_corpus, render_face
from .experiments import Run
from .manifest import RunManifest

__all__ = [
    "ExperimentConfig", "FAKE", "REAL", "LabeledImages", "Run", "RunManifest",
    "build_fake_corpus", "build_real_corpus", "render_face",
]

"""Few-shot font generation with a component codebook, local component style and
similarity-weighted global style."""

from .config import ConfigError, RunConfig, load_config
from .data import DatasetManifest, GlyphImage, build_manifest, render_dataset, render_font
from .codebook import VQAutoencoder, latent_loss, pretrain_codebook, quantize
from .generator import Generator
from .trainer import ProjectionDiscriminator, load_generator, train
from .evaluation import ablation_sweep, evaluate_split, rmse, ssim

__all__ = [
    "ConfigError", "RunConfig", "load_config",
    "DatasetManifest", "GlyphImage", "build_manifest", "render_dataset", "render_font",
    "VQAutoencoder", "latent_loss", "pretrain_codebook", "quantize",
    "Generator", "ProjectionDiscriminator", "load_generator", "train",
    "ablation_sweep", "evaluate_split", "rmse", "ssim",
]

"""Run configuration: defaults, YAML loading, command-line overrides, validation."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

VARIANTS = ("full", "no-LSA", "no-GSA")
REF_MODES = ("fixed", "random")


class ConfigError(ValueError):
    pass


def _opt(default, help, **kw):
    return field(default=default, metadata={"help": help, **kw})


def _default_fonts() -> list[str]:
    import matplotlib

    root = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    names = [
        "DejaVuSans.ttf",
        "DejaVuSerif-Bold.ttf",
        "DejaVuSansMono-Oblique.ttf",
        "STIXGeneralItalic.ttf",
        "DejaVuSerif-Italic.ttf",
        "STIXGeneralBol.ttf",
        "DejaVuSans-BoldOblique.ttf",
        "DejaVuSansMono-Bold.ttf",
    ]
    return [str(root / n) for n in names]


def _default_chars() -> str:
    ascii_part = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"
    latin1 = "".join(chr(c) for c in range(0xC0, 0x100) if chr(c) not in "×÷")
    return (ascii_part + latin1)[:120]


@dataclass
class RunConfig:
    # reproducibility / data
    seed: int = _opt(0, "global seed; VQFONT_SEED overrides the file value")
    canvas: int = _opt(128, "glyph canvas size in pixels (square)")
    margin: float = _opt(0.08, "fraction of the canvas left blank on each side when rendering")
    fonts: list = _opt(None, "font files to render (default: 8 fonts bundled with matplotlib)")
    content_font: str = _opt(None, "font id used as the fixed content template (default: first font)")
    chars: str = _opt(None, "characters to render (default: 120 Latin characters)")
    n_seen_fonts: int = _opt(5, "style fonts used for training; the rest are unseen")
    n_seen_chars: int = _opt(100, "characters used for training; the rest are unseen")
    n_holdout: int = _opt(0, "seen-font/seen-char pairs withheld from training for validation")
    # component codebook
    codebook_size: int = _opt(100, "number of component codes N")
    dim: int = _opt(256, "embedding dimension d")
    width: int = _opt(64, "base channel width of the conv encoders/decoders")
    alpha: float = _opt(1.0, "codebook term weight in the latent loss")
    beta: float = _opt(0.1, "commitment term weight in the latent loss")
    pretrain_steps: int = _opt(50_000, "codebook pretraining iterations")
    pretrain_batch: int = _opt(256, "codebook pretraining batch size")
    pretrain_lr: float = _opt(3e-4, "codebook pretraining learning rate (Adam)")
    dead_code_reset: int = _opt(0, "re-seed codes unused for this many steps (0 disables)")
    # generator
    heads: int = _opt(8, "attention heads m in the cross-attention stack")
    depth: int = _opt(3, "stacked cross-attention layers")
    ffn_mult: int = _opt(4, "feed-forward hidden size multiplier in attention blocks")
    gsa_temperature: float = _opt(1.0, "temperature a of the per-channel reference softmax")
    variant: str = _opt("full", "model variant: full | no-LSA | no-GSA")
    k_refs: int = _opt(3, "reference glyphs per style")
    # adversarial training
    lambda_img: float = _opt(1.0, "pixel L1 matching weight")
    lambda_feat: float = _opt(1.0, "discriminator feature matching weight")
    lambda_cst: float = _opt(0.1, "style contrastive weight")
    cst_temperature: float = _opt(0.1, "contrastive similarity temperature")
    adv_warmup: int = _opt(0, "G steps over which the adversarial G term ramps linearly from 0 to 1 (0: full weight from the start)")
    train_steps: int = _opt(500_000, "generator training iterations")
    batch_size: int = _opt(48, "generator training batch size")
    lr_g: float = _opt(1e-4, "generator learning rate")
    lr_d: float = _opt(2e-4, "discriminator learning rate")
    adam_beta1: float = _opt(0.0, "Adam beta1 for the GAN stage")
    adam_beta2: float = _opt(0.9, "Adam beta2 for the GAN stage")
    spectral_norm: bool = _opt(True, "spectral normalization on discriminator layers")
    checkpoint_every: int = _opt(5000, "iterations between checkpoints")
    log_every: int = _opt(100, "iterations between loss-trace rows")
    # evaluation
    ref_mode: str = _opt("fixed", "test-time reference choice: fixed (per font, by seed) | random")
    device: str = _opt("cpu", "torch device")

    def __post_init__(self):
        if self.fonts is None:
            self.fonts = _default_fonts()
        if self.chars is None:
            self.chars = _default_chars()
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.codebook_size >= 2, f"codebook_size must be >= 2, got {self.codebook_size}")
        need(self.dim > 0, f"dim must be > 0, got {self.dim}")
        need(self.heads > 0 and self.dim % self.heads == 0,
             f"heads must divide dim (dim={self.dim}, heads={self.heads})")
        need(self.canvas >= 8 and self.canvas % 8 == 0,
             f"canvas must be a positive multiple of 8, got {self.canvas}")
        need(0 <= self.margin < 0.5, f"margin must be in [0, 0.5), got {self.margin}")
        need(self.k_refs >= 1, f"k_refs must be >= 1, got {self.k_refs}")
        need(self.depth >= 1, f"depth must be >= 1, got {self.depth}")
        need(self.gsa_temperature > 0, "gsa_temperature must be > 0")
        need(self.adv_warmup >= 0, "adv_warmup must be >= 0")
        need(self.cst_temperature > 0, "cst_temperature must be > 0")
        need(self.variant in VARIANTS, f"variant must be one of {VARIANTS}, got {self.variant!r}")
        need(self.ref_mode in REF_MODES, f"ref_mode must be one of {REF_MODES}, got {self.ref_mode!r}")
        need(self.batch_size >= 1 and self.pretrain_batch >= 1, "batch sizes must be >= 1")
        need(self.width >= 1, "width must be >= 1")
        need(self.n_holdout >= 0, "n_holdout must be >= 0")

    @property
    def grid(self) -> int:
        return self.canvas // 8

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def config_fields():
    return fields(RunConfig)


def from_dict(data: Mapping[str, Any] | None) -> RunConfig:
    data = dict(data or {})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None = None,
                overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Resolve a config as defaults <- file <- overrides.

    ``VQFONT_SEED`` in the environment replaces the file's seed but not an
    explicit ``seed`` override.
    """
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping")
        data.update(loaded)
    env_seed = os.environ.get("VQFONT_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"VQFONT_SEED must be an integer, got {env_seed!r}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return from_dict(data)

"""Component codebook: vector-quantized glyph autoencoder trained on the template font.

Feature maps are channel-first tensors ``(B, d, h, w)``. Code indices are
0-based.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import RunConfig
from .nets import ConvDecoder, ConvEncoder, to_batch

logger = logging.getLogger(__name__)

CKPT_FORMAT = "vqfont-codebook"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


@dataclass
class QuantizationResult:
    quantized: torch.Tensor   # same shape as the input feature map
    indices: torch.Tensor     # (B, h, w) long


def _flatten_cells(z: torch.Tensor) -> torch.Tensor:
    """(B, d, h, w) -> (B*h*w, d); a (cells, d) matrix passes through."""
    if z.dim() == 2:
        return z
    if z.dim() == 3:
        z = z[None]
    return z.permute(0, 2, 3, 1).reshape(-1, z.shape[1])


def nearest_code(cells: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Index of the closest code for every row of ``cells`` (smallest index on ties)."""
    if cells.shape[-1] != codes.shape[-1]:
        raise ValueError(f"feature dim {cells.shape[-1]} does not match codebook dim {codes.shape[-1]}")
    with torch.no_grad():
        dist = (cells.pow(2).sum(1, keepdim=True)
                - 2.0 * cells @ codes.t()
                + codes.pow(2).sum(1)[None])
        return dist.argmin(dim=1)


def quantize(z_e: torch.Tensor, codes: torch.Tensor) -> QuantizationResult:
    """Replace every spatial cell of ``z_e`` by its nearest codebook row.

    Accepts ``(B, d, h, w)``, ``(d, h, w)`` or ``(cells, d)``. The quantized
    output is a plain lookup (gradient flows to ``codes``); see
    :func:`straight_through` for the encoder-side gradient.
    """
    idx = nearest_code(_flatten_cells(z_e), codes)
    q = codes[idx]
    if z_e.dim() == 2:
        return QuantizationResult(q, idx)
    squeeze = z_e.dim() == 3
    z4 = z_e[None] if squeeze else z_e
    b, d, h, w = z4.shape
    q = q.view(b, h, w, d).permute(0, 3, 1, 2)
    idx = idx.view(b, h, w)
    if squeeze:
        return QuantizationResult(q[0], idx[0])
    return QuantizationResult(q, idx)


def straight_through(z_e: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value ``z_q``; backward copies the gradient onto ``z_e`` unchanged."""
    return z_e + (z_q - z_e).detach()


def latent_loss(z_e: torch.Tensor, z_q: torch.Tensor, alpha: float = 1.0, beta: float = 0.1) -> torch.Tensor:
    """alpha * ||sg[z_e] - e||^2 + beta * ||z_e - sg[e]||^2, each as a mean over elements."""
    codebook_term = F.mse_loss(z_q, z_e.detach())
    commitment_term = F.mse_loss(z_e, z_q.detach())
    return alpha * codebook_term + beta * commitment_term


class VectorQuantizer(nn.Module):
    def __init__(self, num_codes: int, dim: int):
        super().__init__()
        self.codes = nn.Parameter(torch.empty(num_codes, dim).uniform_(-1.0 / num_codes, 1.0 / num_codes))

    @property
    def num_codes(self) -> int:
        return self.codes.shape[0]

    def forward(self, z_e, alpha=1.0, beta=0.1):
        res = quantize(z_e, self.codes)
        loss = latent_loss(z_e, res.quantized, alpha, beta)
        return straight_through(z_e, res.quantized), res.indices, loss


class VQAutoencoder(nn.Module):
    """Content encoder -> quantizer -> reconstruction decoder, no skip path."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.encoder = ConvEncoder(cfg.width, cfg.dim, cfg.canvas)
        self.quantizer = VectorQuantizer(cfg.codebook_size, cfg.dim)
        self.decoder = ConvDecoder(cfg.dim, cfg.width)
        self.alpha = cfg.alpha
        self.beta = cfg.beta

    def forward(self, x):
        z_e = self.encoder(x)
        z_st, idx, lat = self.quantizer(z_e, self.alpha, self.beta)
        return self.decoder(z_st), idx, lat

    def freeze(self) -> "VQAutoencoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


def encode_content(images, encoder: ConvEncoder) -> torch.Tensor:
    x = to_batch(images, device=next(encoder.parameters()).device,
                 dtype=next(encoder.parameters()).dtype)
    with torch.no_grad():
        return encoder(x)


def param_hash(*modules_or_tensors) -> str:
    h = hashlib.sha256()
    for m in modules_or_tensors:
        tensors = m.state_dict().items() if isinstance(m, nn.Module) else [("t", m)]
        for name, t in tensors:
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def atomic_torch_save(obj, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def save_codebook_checkpoint(model: VQAutoencoder, cfg: RunConfig, step: int, path) -> None:
    atomic_torch_save({
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "config": cfg.to_dict(),
        "step": step,
        "encoder": model.encoder.state_dict(),
        "codebook": model.quantizer.codes.detach().clone(),
        "decoder": model.decoder.state_dict(),
    }, path)


def load_codebook_checkpoint(path, device="cpu") -> tuple[VQAutoencoder, RunConfig, int]:
    from .config import from_dict

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"codebook checkpoint not found: {path}")
    blob = torch.load(path, map_location=device, weights_only=False)
    if blob.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path} is not a codebook checkpoint")
    cfg = from_dict(blob["config"])
    model = VQAutoencoder(cfg)
    model.encoder.load_state_dict(blob["encoder"])
    model.decoder.load_state_dict(blob["decoder"])
    with torch.no_grad():
        model.quantizer.codes.copy_(blob["codebook"])
    return model.to(device).freeze(), cfg, blob["step"]


@dataclass
class PretrainResult:
    model: VQAutoencoder
    trace: list[dict] = field(default_factory=list)
    steps: int = 0

    @property
    def encoder(self):
        return self.model.encoder

    @property
    def codebook(self):
        return self.model.quantizer.codes

    @property
    def decoder(self):
        return self.model.decoder


def template_images(manifest, chars=None) -> torch.Tensor:
    """Template-font glyphs of the training characters as a (B, 1, H, W) tensor."""
    chars = manifest.split_chars("SFSC") if chars is None else chars
    chars = [c for c in chars if manifest.has(manifest.content_font_id, c)]
    return to_batch([manifest.load_pixels(manifest.content_font_id, c) for c in chars])


def reconstruction_l1(model: VQAutoencoder, images: torch.Tensor, batch: int = 64) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = images[i:i + batch]
            recon, _, _ = model(x)
            total += (recon - x).abs().sum().item()
    return total / images.numel()


def pretrain_codebook(images, cfg: RunConfig, checkpoint_path=None,
                      progress=None) -> PretrainResult:
    """Fit the VQ autoencoder to template glyphs, then freeze it.

    ``images`` is a (B, 1, H, W) tensor or a :class:`DatasetManifest` (its
    training characters in the template font are used).
    """
    if not isinstance(images, torch.Tensor):
        images = template_images(images)
    device = torch.device(cfg.device)
    images = images.to(device)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = VQAutoencoder(cfg).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.pretrain_lr)
    n = len(images)
    bs = min(cfg.pretrain_batch, n)
    last_used = torch.zeros(cfg.codebook_size, dtype=torch.long)
    last_good = None
    trace = []
    log_every = max(1, min(cfg.log_every, cfg.pretrain_steps // 50 or 1))
    model.train()
    for step in range(1, cfg.pretrain_steps + 1):
        x = images[torch.randperm(n, generator=gen)[:bs].to(device)]
        recon, idx, lat = model(x)
        l1 = (recon - x).abs().mean()
        loss = l1 + lat
        if not torch.isfinite(loss):
            if checkpoint_path is not None and last_good is not None:
                model.load_state_dict(last_good)
                save_codebook_checkpoint(model, cfg, step - 1, checkpoint_path)
            raise TrainingDiverged(f"pretraining loss became {loss.item()} at step {step}",
                                   checkpoint_path)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if cfg.dead_code_reset:
            last_used[idx.unique().cpu()] = step
            _reseed_dead_codes(model, x, last_used, step, cfg.dead_code_reset, gen)
        if step % log_every == 0 or step == cfg.pretrain_steps:
            row = {"step": step, "loss": loss.item(), "l1": l1.item(), "latent": lat.item(),
                   "codes_used": int(idx.unique().numel())}
            trace.append(row)
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if progress:
                progress(row)
    model.freeze()
    if checkpoint_path is not None:
        save_codebook_checkpoint(model, cfg, cfg.pretrain_steps, checkpoint_path)
    return PretrainResult(model, trace, cfg.pretrain_steps)


def _reseed_dead_codes(model, x, last_used, step, patience, gen):
    dead = (step - last_used) >= patience
    if not dead.any():
        return
    with torch.no_grad():
        cells = _flatten_cells(model.encoder(x))
        pick = torch.randint(len(cells), (int(dead.sum()),), generator=gen).to(cells.device)
        model.quantizer.codes[dead.to(cells.device)] = cells[pick]
    last_used[dead] = step


def code_activation_map(image, code_index: int, encoder: ConvEncoder, codes: torch.Tensor) -> np.ndarray:
    """Per-cell affinity of one code: 1 where it is the selected code, else d_min / d_code."""
    n = codes.shape[0]
    if not 0 <= code_index < n:
        raise IndexError(f"code index {code_index} out of range [0, {n})")
    single = hasattr(image, "pixels") or (isinstance(image, np.ndarray) and image.ndim == 2)
    z = encode_content([image] if single else image, encoder)
    cells = _flatten_cells(z)
    dist = torch.cdist(cells.double(), codes.detach().double()).pow(2)
    idx = nearest_code(cells, codes.detach())
    d_min = dist.min(dim=1).values
    d_code = dist[:, code_index]
    ratio = torch.where(d_code > 0, d_min / d_code.clamp_min(1e-300), torch.ones_like(d_code))
    heat = torch.where(idx == code_index, torch.ones_like(ratio), ratio.clamp(0.0, 1.0))
    h, w = z.shape[-2:]
    return heat.view(-1, h, w)[0].cpu().numpy()


def code_usage(images, encoder, codes) -> np.ndarray:
    z = encode_content(images, encoder)
    idx = quantize(z, codes.detach()).indices
    return np.bincount(idx.flatten().cpu().numpy(), minlength=codes.shape[0])


def perplexity(usage: np.ndarray) -> float:
    p = usage / max(1, usage.sum())
    p = p[p > 0]
    return float(math.exp(-(p * np.log(p)).sum()))

"""Projection discriminator, GAN / matching / style-contrastive losses and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .codebook import (TrainingDiverged, atomic_torch_save, load_codebook_checkpoint,
                       param_hash)
from .config import RunConfig, from_dict
from .data import DatasetManifest, sample_triplet
from .generator import Generator

logger = logging.getLogger(__name__)

CKPT_FORMAT = "vqfont-generator"
CKPT_VERSION = 1
TRACE_COLUMNS = ["step", "loss_d", "loss_adv_g", "loss_img", "loss_feat", "loss_cst"]
TRACE_HEADER = ["step", "L_adv^D", "L_adv^G", "L_img", "L_feat", "L_cst"]


class FrozenParameterDrift(AssertionError):
    pass


# --------------------------------------------------------------------------- discriminator

class DownBlock(nn.Module):
    def __init__(self, cin, cout, sn=True):
        super().__init__()
        wrap = spectral_norm if sn else (lambda m: m)
        self.conv1 = wrap(nn.Conv2d(cin, cout, 3, padding=1))
        self.conv2 = wrap(nn.Conv2d(cout, cout, 3, padding=1))
        self.skip = wrap(nn.Conv2d(cin, cout, 1))

    def forward(self, x):
        h = F.avg_pool2d(self.conv1(F.leaky_relu(x, 0.2)), 2)
        h = self.conv2(F.leaky_relu(h, 0.2))
        return h + self.skip(F.avg_pool2d(x, 2))


@dataclass
class DiscriminatorOutput:
    logit: torch.Tensor           # (B,)
    features: list[torch.Tensor]  # one per backbone stage


class ProjectionDiscriminator(nn.Module):
    """Residual backbone with font and character projection heads."""

    def __init__(self, n_fonts: int, n_chars: int, width: int = 32, sn: bool = True, stages: int = 4):
        super().__init__()
        wrap = spectral_norm if sn else (lambda m: m)
        self.n_fonts, self.n_chars = n_fonts, n_chars
        self.stem = wrap(nn.Conv2d(1, width, 3, padding=1))
        chans = [width * min(2 ** i, 8) for i in range(stages + 1)]
        self.blocks = nn.ModuleList(DownBlock(chans[i], chans[i + 1], sn) for i in range(stages))
        c = chans[-1]
        self.score = wrap(nn.Linear(c, 1))
        self.font_embed = nn.Embedding(n_fonts, c)
        self.char_embed = nn.Embedding(n_chars, c)
        nn.init.uniform_(self.font_embed.weight, -0.1, 0.1)
        nn.init.uniform_(self.char_embed.weight, -0.1, 0.1)

    def forward(self, x, style_label, char_label) -> DiscriminatorOutput:
        style_label = torch.as_tensor(style_label, device=x.device).long().reshape(-1)
        char_label = torch.as_tensor(char_label, device=x.device).long().reshape(-1)
        if style_label.min() < 0 or style_label.max() >= self.n_fonts:
            raise ValueError(f"style label out of range [0, {self.n_fonts})")
        if char_label.min() < 0 or char_label.max() >= self.n_chars:
            raise ValueError(f"char label out of range [0, {self.n_chars})")
        h = self.stem(x)
        feats = []
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        pooled = F.leaky_relu(h, 0.2).mean(dim=(2, 3))
        logit = self.score(pooled).squeeze(1)
        logit = logit + (self.font_embed(style_label) * pooled).sum(1)
        logit = logit + (self.char_embed(char_label) * pooled).sum(1)
        return DiscriminatorOutput(logit, feats)


# --------------------------------------------------------------------------- losses

def _logit(x):
    return x.logit if isinstance(x, DiscriminatorOutput) else torch.as_tensor(x, dtype=torch.float64)


def adversarial_losses(real, fake):
    """Hinge losses: (D loss, G loss) from real / fake logits or DiscriminatorOutputs."""
    r, f = _logit(real), _logit(fake)
    loss_d = F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean()
    loss_g = -f.mean()
    return loss_d, loss_g


def image_matching_loss(generated, target):
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}")
    return (generated - target).abs().mean()


def feature_matching_loss(fake_feats, real_feats):
    if len(fake_feats) != len(real_feats):
        raise ValueError("feature lists differ in length")
    return sum((f - r.detach()).abs().mean() for f, r in zip(fake_feats, real_feats))


def matching_losses(generated, target, disc=None, style_label=None, char_label=None):
    """(L_img, L_feat). Without a discriminator the feature term is 0."""
    l_img = image_matching_loss(generated, target)
    if disc is None:
        return l_img, torch.zeros((), dtype=l_img.dtype)
    fake = disc(generated, style_label, char_label)
    with torch.no_grad():
        real = disc(target, style_label, char_label)
    return l_img, feature_matching_loss(fake.features, real.features)


def codebook_similarity(a, b, temperature):
    """Mean row-wise cosine between aligned codebooks, divided by the temperature."""
    return F.cosine_similarity(a, b, dim=-1).mean(-1) / temperature


def style_contrastive_loss(anchor, positive, negatives, temperature: float = 0.1):
    """InfoNCE over stylized codebooks.

    anchor, positive: (N, d); negatives: (M, N, d) or a list of (N, d), M >= 1.
    """
    if isinstance(negatives, (list, tuple)):
        if not negatives:
            raise ValueError("style contrastive loss needs at least one negative")
        negatives = torch.stack(list(negatives))
    if negatives.dim() != 3 or negatives.shape[0] == 0:
        raise ValueError("style contrastive loss needs at least one negative")
    s_pos = codebook_similarity(anchor, positive, temperature)
    s_neg = codebook_similarity(anchor[None], negatives, temperature)
    logits = torch.cat([s_pos[None], s_neg])
    return -torch.log_softmax(logits, dim=0)[0]


def batch_contrastive_loss(anchors, positives, font_ids, temperature):
    """Average InfoNCE over the batch; negatives are one anchor per other font present."""
    first = {}
    for i, f in enumerate(font_ids):
        first.setdefault(f, i)
    losses = []
    for i, f in enumerate(font_ids):
        neg = [anchors[j] for g, j in first.items() if g != f]
        if neg:
            losses.append(style_contrastive_loss(anchors[i], positives[i], torch.stack(neg), temperature))
    if not losses:
        return anchors.new_zeros(())
    return torch.stack(losses).mean()


# --------------------------------------------------------------------------- training

@dataclass
class Batch:
    content: torch.Tensor
    refs: torch.Tensor
    aux: torch.Tensor
    target: torch.Tensor
    style_label: torch.Tensor
    char_label: torch.Tensor
    font_ids: list[str]


class TripletLoader:
    def __init__(self, manifest: DatasetManifest, cfg: RunConfig, split="SFSC"):
        self.manifest = manifest
        self.cfg = cfg
        self.split = split
        self.fonts = manifest.split_fonts("SFSC")
        self.chars = manifest.split_chars("SFSC")
        self.font_index = {f: i for i, f in enumerate(self.fonts)}
        self.char_index = {c: i for i, c in enumerate(self.chars)}
        self.rng = np.random.default_rng(cfg.seed)

    def sample(self, batch_size: int, device="cpu", dtype=torch.float32) -> Batch:
        trips = [sample_triplet(self.manifest, self.split, self.cfg.k_refs, self.rng, with_aux=True)
                 for _ in range(batch_size)]

        def stack(imgs):
            return torch.as_tensor(np.stack([g.pixels for g in imgs]))[:, None]

        t = lambda x: x.to(device=device, dtype=dtype)
        return Batch(
            content=t(stack([tr.content for tr in trips])),
            refs=t(torch.stack([stack(tr.references) for tr in trips])),
            aux=t(torch.stack([stack(tr.aux_references) for tr in trips])),
            target=t(stack([tr.target for tr in trips])),
            style_label=torch.tensor([self.font_index[tr.font_id] for tr in trips], device=device),
            char_label=torch.tensor([self.char_index[tr.target.char_id] for tr in trips], device=device),
            font_ids=[tr.font_id for tr in trips],
        )


def adversarial_weight(cfg: RunConfig, step: int | None) -> float:
    if step is None or cfg.adv_warmup <= 0:
        return 1.0
    return min(1.0, step / cfg.adv_warmup)


def generator_objective(gen: Generator, disc: ProjectionDiscriminator, batch: Batch, cfg: RunConfig,
                        generated=None, step: int | None = None):
    """G-step loss and its parts. D is only read, never updated here.

    ``generated`` is an optional precomputed ``gen(content, refs)`` result.
    ``step`` only matters when ``cfg.adv_warmup`` ramps the adversarial term.
    """
    fake, extras = generated if generated is not None else gen(batch.content, batch.refs)
    fake_out = disc(fake, batch.style_label, batch.char_label)
    with torch.no_grad():
        real_out = disc(batch.target, batch.style_label, batch.char_label)
    _, l_adv = adversarial_losses(real_out, fake_out)
    l_img = image_matching_loss(fake, batch.target)
    l_feat = feature_matching_loss(fake_out.features, real_out.features)
    if gen.use_lsa and cfg.lambda_cst > 0:
        pos = gen.style_state(batch.aux).stylized
        l_cst = batch_contrastive_loss(extras["state"].stylized, pos, batch.font_ids, cfg.cst_temperature)
    else:
        l_cst = fake.new_zeros(())
    total = adversarial_weight(cfg, step) * l_adv + cfg.lambda_img * l_img + cfg.lambda_feat * l_feat + cfg.lambda_cst * l_cst
    parts = {"loss_adv_g": l_adv, "loss_img": l_img, "loss_feat": l_feat, "loss_cst": l_cst}
    return total, parts, fake


def discriminator_objective(gen, disc, batch: Batch, fake=None):
    if fake is None:
        with torch.no_grad():
            fake, _ = gen(batch.content, batch.refs)
    fake = fake.detach()
    real_out = disc(batch.target, batch.style_label, batch.char_label)
    fake_out = disc(fake, batch.style_label, batch.char_label)
    loss_d, _ = adversarial_losses(real_out, fake_out)
    return loss_d


def build_models(cfg: RunConfig, vq_model, n_fonts, n_chars):
    torch.manual_seed(cfg.seed)
    gen = Generator(cfg, vq_model.encoder, vq_model.quantizer.codes)
    disc = ProjectionDiscriminator(n_fonts, n_chars, width=cfg.width, sn=cfg.spectral_norm)
    return gen.to(cfg.device), disc.to(cfg.device)


def frozen_hash(gen: Generator) -> str:
    return param_hash(gen.content_encoder, gen.codes)


@dataclass
class TrainResult:
    generator: Generator
    discriminator: ProjectionDiscriminator
    trace: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    frozen_hash_before: str = ""
    frozen_hash_after: str = ""


def save_generator_checkpoint(path, gen, disc, cfg, step, fonts, chars, vq_ckpt=None,
                              opt_g=None, opt_d=None):
    atomic_torch_save({
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "config": cfg.to_dict(),
        "step": step,
        "seed": cfg.seed,
        "generator": gen.state_dict(),
        "discriminator": disc.state_dict(),
        "opt_g": opt_g.state_dict() if opt_g else None,
        "opt_d": opt_d.state_dict() if opt_d else None,
        "labels": {"fonts": list(fonts), "chars": [int(c) for c in chars]},
        "frozen_hash": frozen_hash(gen),
        "vq_checkpoint": str(vq_ckpt) if vq_ckpt else None,
    }, path)


def load_generator(path, device="cpu", variant=None):
    """Rebuild a trained generator (and discriminator) from a checkpoint."""
    from .codebook import VQAutoencoder

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"generator checkpoint not found: {path}")
    blob = torch.load(path, map_location=device, weights_only=False)
    if blob.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path} is not a generator checkpoint")
    cfg = from_dict(blob["config"])
    cfg.device = str(device)
    vq = VQAutoencoder(cfg)
    gen = Generator(cfg, vq.encoder, vq.quantizer.codes)
    gen.load_state_dict(blob["generator"])
    labels = blob["labels"]
    disc = ProjectionDiscriminator(len(labels["fonts"]), len(labels["chars"]), cfg.width, cfg.spectral_norm)
    disc.load_state_dict(blob["discriminator"])
    gen.to(device).eval()
    disc.to(device).eval()
    return gen, disc, cfg, blob


def _write_trace(path: Path, trace: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for row in trace:
            w.writerow([row[k] for k in TRACE_COLUMNS])


def train(manifest: DatasetManifest, vq_checkpoint, cfg: RunConfig, out_dir=None,
          progress=None) -> TrainResult:
    """Alternate one D step and one G step for ``cfg.train_steps`` iterations.

    ``vq_checkpoint`` is a codebook checkpoint path or an already-pretrained
    :class:`VQAutoencoder`; its encoder and codes stay frozen throughout.
    """
    if isinstance(vq_checkpoint, (str, Path)):
        vq_model, _, _ = load_codebook_checkpoint(vq_checkpoint, cfg.device)
        vq_path = vq_checkpoint
    else:
        vq_model, vq_path = vq_checkpoint, None
    loader = TripletLoader(manifest, cfg)
    gen, disc = build_models(cfg, vq_model, len(loader.fonts), len(loader.chars))
    opt_g = torch.optim.Adam(gen.trainable_parameters(), lr=cfg.lr_g, betas=(cfg.adam_beta1, cfg.adam_beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(cfg.adam_beta1, cfg.adam_beta2))

    out = Path(out_dir) if out_dir else None
    ckpt_path = None
    if out:
        for sub in ("checkpoints", "samples", "reports"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfg.dump())
        ckpt_path = out / "checkpoints" / "generator.pt"

    before = frozen_hash(gen)
    trace: list[dict] = []
    t0 = time.time()
    gen.train()
    disc.train()
    saved_any = False
    for step in range(1, cfg.train_steps + 1):
        batch = loader.sample(cfg.batch_size, cfg.device)

        generated = gen(batch.content, batch.refs)
        loss_d = discriminator_objective(gen, disc, batch, generated[0])
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()

        total, parts, _ = generator_objective(gen, disc, batch, cfg, generated, step)
        opt_g.zero_grad(set_to_none=True)
        disc.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
        disc.zero_grad(set_to_none=True)

        if not (math.isfinite(loss_d.item()) and math.isfinite(total.item())):
            raise TrainingDiverged(f"non-finite loss at step {step}",
                                   ckpt_path if saved_any else None)
        if step % cfg.log_every == 0 or step == cfg.train_steps:
            row = {"step": step, "loss_d": loss_d.item(), **{k: v.item() for k, v in parts.items()}}
            trace.append(row)
            if progress:
                progress(row, time.time() - t0)
        if ckpt_path and (step % cfg.checkpoint_every == 0 or step == cfg.train_steps):
            if frozen_hash(gen) != before:
                raise FrozenParameterDrift("content encoder or codebook changed during training")
            save_generator_checkpoint(ckpt_path, gen, disc, cfg, step, loader.fonts, loader.chars,
                                      vq_path, opt_g, opt_d)
            saved_any = True

    after = frozen_hash(gen)
    if after != before:
        raise FrozenParameterDrift("content encoder or codebook changed during training")
    if out:
        _write_trace(out / "reports" / "loss_trace.csv", trace)
    gen.eval()
    disc.eval()
    return TrainResult(gen, disc, trace, ckpt_path, before, after)

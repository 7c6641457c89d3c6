"""Style encoder, local (component) and global (similarity-weighted) style aggregation, decoder.

Shapes: images ``(B, 1, H, W)``; feature maps ``(B, d, h, w)``; reference
stacks ``(B, K, ...)``; codebooks ``(N, d)`` or batched ``(B, N, d)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn

from .codebook import quantize
from .config import RunConfig
from .nets import ConvDecoder, ConvEncoder, to_batch

logger = logging.getLogger(__name__)


@dataclass
class ChannelWeights:
    raw: torch.Tensor         # (B, K, d) cosine similarities
    normalized: torch.Tensor  # (B, K, d), sums to 1 over K
    temperature: float


def reference_tokens(style_maps: torch.Tensor) -> torch.Tensor:
    """(B, K, d, h, w) -> (B, K*h*w, d)."""
    b, k, d, h, w = style_maps.shape
    return style_maps.permute(0, 1, 3, 4, 2).reshape(b, k * h * w, d)


class MultiHeadCrossAttention(nn.Module):
    """Queries attend over reference tokens; per-head width ``dim // heads``."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide dim ({dim})")
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)

    def forward(self, queries, tokens, return_attn=False):
        b, n, d = queries.shape
        t = tokens.shape[1]
        m, c = self.heads, self.head_dim
        q = self.w_q(queries).view(b, n, m, c).transpose(1, 2)
        k = self.w_k(tokens).view(b, t, m, c).transpose(1, 2)
        v = self.w_v(tokens).view(b, t, m, c).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.w_o(out)
        return (out, attn) if return_attn else out


class CrossAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.attn = MultiHeadCrossAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, tokens, return_attn=False):
        a, attn = self.attn(x, tokens, return_attn=True)
        x = self.norm1(x + a)
        x = self.norm2(x + self.ffn(x))
        return (x, attn) if return_attn else x


class CrossAttentionStack(nn.Module):
    """Stylizes the component codes: layer 1 queries are the codes, later layers
    query with the previous layer's output; every layer reads the same tokens."""

    def __init__(self, dim: int, heads: int, depth: int, ffn_mult: int = 4):
        super().__init__()
        self.layers = nn.ModuleList(CrossAttentionBlock(dim, heads, ffn_mult) for _ in range(depth))
        self.calls = 0

    def forward(self, codes: torch.Tensor, tokens: torch.Tensor, return_attn=False):
        self.calls += 1
        x = codes.expand(tokens.shape[0], -1, -1) if codes.dim() == 2 else codes
        maps = []
        for layer in self.layers:
            x, attn = layer(x, tokens, return_attn=True)
            maps.append(attn)
        return (x, maps) if return_attn else x


def stylize_components(codes: torch.Tensor, style_maps: torch.Tensor, cam: CrossAttentionStack) -> torch.Tensor:
    return cam(codes, reference_tokens(style_maps))


def assemble_local_style(f_c: torch.Tensor, codes: torch.Tensor, stylized: torch.Tensor):
    """Replace each cell of ``f_c`` with the stylized code at its nearest-code index.

    ``stylized`` is ``(N, d)`` or ``(B, N, d)``. Returns ``(f_sr_L, indices)``.
    """
    idx = quantize(f_c, codes).indices            # (B, h, w)
    b, h, w = idx.shape
    if stylized.dim() == 2:
        out = stylized[idx]                        # (B, h, w, d)
    else:
        flat = idx.view(b, h * w)
        out = torch.gather(stylized, 1, flat[..., None].expand(-1, -1, stylized.shape[-1]))
        out = out.view(b, h, w, -1)
    return out.permute(0, 3, 1, 2), idx


def content_similarity_weights(f_c: torch.Tensor, ref_content: torch.Tensor,
                               temperature: float = 1.0) -> ChannelWeights:
    """Per-channel cosine similarity between each reference's content map and the input's,
    turned into convex weights by a temperature softmax over the references.

    ``f_c``: (B, d, h, w); ``ref_content``: (B, K, d, h, w). Zero-norm columns give 0.
    """
    b, k, d = ref_content.shape[:3]
    x = f_c.flatten(2)[:, None]                    # (B, 1, d, hw)
    r = ref_content.flatten(3)                     # (B, K, d, hw)
    dot = (x * r).sum(-1)
    norm = x.norm(dim=-1) * r.norm(dim=-1)
    zero = norm == 0
    if zero.any():
        logger.debug("%d zero-norm channel columns; cosine set to 0", int(zero.sum()))
    raw = torch.where(zero, torch.zeros_like(dot), dot / norm.masked_fill(zero, 1.0))
    raw = raw.clamp(-1.0, 1.0)
    return ChannelWeights(raw, torch.softmax(temperature * raw, dim=1), temperature)


def aggregate_global_style(weights: torch.Tensor | ChannelWeights, style_maps: torch.Tensor) -> torch.Tensor:
    """Channelwise convex combination of the K style maps: (B, K, d) x (B, K, d, h, w) -> (B, d, h, w)."""
    w = weights.normalized if isinstance(weights, ChannelWeights) else weights
    if w.shape[:2] != style_maps.shape[:2]:
        raise ValueError(f"weights for {w.shape[1]} references, got {style_maps.shape[1]} style maps")
    return (w[..., None, None] * style_maps).sum(1)


@dataclass
class StyleState:
    """Everything derived from one reference set, reusable across content glyphs."""
    style_maps: torch.Tensor     # (B, K, d, h, w)
    ref_content: torch.Tensor    # (B, K, d, h, w), frozen content encoder
    stylized: torch.Tensor | None  # (B, N, d)


class Generator(nn.Module):
    def __init__(self, cfg: RunConfig, content_encoder: ConvEncoder, codes: torch.Tensor):
        super().__init__()
        self.cfg = cfg
        self.variant = cfg.variant
        self.content_encoder = content_encoder
        for p in self.content_encoder.parameters():
            p.requires_grad_(False)
        self.register_buffer("codes", codes.detach().clone())
        self.style_encoder = ConvEncoder(cfg.width, cfg.dim, cfg.canvas)
        self.use_lsa = cfg.variant != "no-LSA"
        self.use_gsa = cfg.variant != "no-GSA"
        self.cam = CrossAttentionStack(cfg.dim, cfg.heads, cfg.depth, cfg.ffn_mult) if self.use_lsa else None
        parts = 1 + int(self.use_lsa) + int(self.use_gsa)
        self.decoder = ConvDecoder(parts * cfg.dim, cfg.width)

    def train(self, mode: bool = True):
        super().train(mode)
        self.content_encoder.eval()  # frozen, always inference mode
        return self

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("content_encoder.")]

    # pieces
    def encode_content(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.content_encoder(x)

    def encode_style(self, refs: torch.Tensor) -> torch.Tensor:
        """(B, K, 1, H, W) -> (B, K, d, h, w); each reference encoded independently."""
        if refs.dim() != 5 or refs.shape[1] == 0:
            raise ValueError(f"references must be (B, K>=1, 1, H, W), got {tuple(refs.shape)}")
        b, k = refs.shape[:2]
        f = self.style_encoder(refs.flatten(0, 1))
        return f.view(b, k, *f.shape[1:])

    def style_state(self, refs: torch.Tensor) -> StyleState:
        b, k = refs.shape[:2]
        style_maps = self.encode_style(refs)
        ref_content = self.encode_content(refs.flatten(0, 1)).view(b, k, *style_maps.shape[2:]) \
            if self.use_gsa else None
        stylized = stylize_components(self.codes, style_maps, self.cam) if self.use_lsa else None
        return StyleState(style_maps, ref_content, stylized)

    def decode(self, content: torch.Tensor, state: StyleState):
        f_c = self.encode_content(content)
        parts = [f_c]
        extras = {"f_c": f_c}
        if self.use_lsa:
            f_l, idx = assemble_local_style(f_c, self.codes, state.stylized)
            parts.append(f_l)
            extras["indices"] = idx
        if self.use_gsa:
            weights = content_similarity_weights(f_c, state.ref_content, self.cfg.gsa_temperature)
            parts.append(aggregate_global_style(weights, state.style_maps))
            extras["weights"] = weights
        return self.decoder(torch.cat(parts, dim=1)), extras

    def forward(self, content: torch.Tensor, refs: torch.Tensor):
        state = self.style_state(refs)
        out, extras = self.decode(content, state)
        extras["state"] = state
        return out, extras

    # inference
    @torch.no_grad()
    def generate(self, content, references) -> torch.Tensor:
        """Generate one glyph per content image from a single shared reference set.

        ``content``: images (M, 1, H, W) or GlyphImages; ``references``: K
        images. The stylized codebook is computed once and reused for all M.
        """
        was_training = self.training
        self.eval()
        dev = self.codes.device
        content = to_batch(content, device=dev, dtype=self.codes.dtype)
        refs = to_batch(references, device=dev, dtype=self.codes.dtype)[None]
        self._check_canvas(content)
        state = self.style_state(refs)
        m = content.shape[0]
        expanded = StyleState(
            state.style_maps.expand(m, *state.style_maps.shape[1:]),
            state.ref_content.expand(m, *state.ref_content.shape[1:]) if state.ref_content is not None else None,
            state.stylized.expand(m, *state.stylized.shape[1:]) if state.stylized is not None else None,
        )
        out, _ = self.decode(content, expanded)
        self.train(was_training)
        return out.clamp(-1.0, 1.0)

    def _check_canvas(self, x):
        c = self.cfg.canvas
        if x.shape[-1] != c or x.shape[-2] != c:
            raise ValueError(f"model canvas is {c}x{c}, got {x.shape[-2]}x{x.shape[-1]}")

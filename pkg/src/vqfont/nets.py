"""Convolutional building blocks shared by the encoders, decoders and discriminator."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

DOWNSAMPLE = 8  # three stride-2 stages


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class ConvEncoder(nn.Module):
    """Three stride-2 stages with residual refinement: canvas -> canvas/8, ``dim`` channels.

    Used both as the content encoder and (with its own weights) as the style encoder.
    """

    def __init__(self, width: int, dim: int, canvas: int):
        super().__init__()
        self.canvas = canvas
        self.dim = dim
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(1, w, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(w, w, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
            ResBlock(4 * w),
            ResBlock(4 * w),
            nn.ReLU(),
            nn.Conv2d(4 * w, dim, 1),
        )

    def check_input(self, x: torch.Tensor) -> None:
        expected = (1, self.canvas, self.canvas)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(
                f"encoder expects images of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(x.shape)}")

    def forward(self, x):
        self.check_input(x)
        return self.body(x)


class ConvDecoder(nn.Module):
    """Mirror of :class:`ConvEncoder`: ``in_ch`` x grid -> one channel in [-1, 1]."""

    def __init__(self, in_ch: int, width: int):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, 4 * w, 3, padding=1),
            ResBlock(4 * w),
            ResBlock(4 * w),
            nn.ReLU(),
            nn.ConvTranspose2d(4 * w, 2 * w, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(w, w, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(w, 1, 3, padding=1),
        )

    def forward(self, x):
        return inward_clamp(self.body(x))


class _InwardClamp(torch.autograd.Function):
    @staticmethod
    def forward(ctx, h):
        ctx.save_for_backward(h)
        return h.clamp(-1.0, 1.0)

    @staticmethod
    def backward(ctx, grad):
        (h,) = ctx.saved_tensors
        # descent moves h by -grad: keep only steps that stay in or head back into range
        keep = (h.abs() <= 1) | ((h > 1) & (grad > 0)) | ((h < -1) & (grad < 0))
        return grad * keep


def inward_clamp(h: torch.Tensor) -> torch.Tensor:
    """Clamp to [-1, 1]. Gradient passes inside the range, and outside it only
    when it points back in.

    A tanh head or a plain clamp starves saturated pixels of gradient, so a
    wrong all-white region never recovers. A pure straight-through clamp lets
    the adversarial term push values outward without bound.
    """
    return _InwardClamp.apply(h)


def to_batch(images, device=None, dtype=torch.float32) -> torch.Tensor:
    """Stack GlyphImages / arrays / tensors into a (B, 1, H, W) tensor."""
    if isinstance(images, torch.Tensor):
        t = images
        if t.dim() == 2:
            t = t[None, None]
        elif t.dim() == 3:
            t = t[:, None]
        return t.to(device=device, dtype=dtype)
    arrs = [getattr(im, "pixels", im) for im in images]
    t = torch.as_tensor(np.stack(arrs), dtype=dtype)
    return t[:, None].to(device)

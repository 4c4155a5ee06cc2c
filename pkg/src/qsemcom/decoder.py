"""Receiver-side image reconstruction and the adversarial discriminator.

Received token matrices are reshaped onto the patch grid; the first stage
consumes the deepest layer's tensor, and each later stage fuses the next
skip (upsampled to the running resolution) before a conv block that doubles
the spatial size.  With one stage per selected layer and 2**stages equal to
the patch size, the head lands exactly on the input resolution.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import QsemcomError


def reshape_spatial(y: torch.Tensor) -> torch.Tensor:
    """Row-major (..., N, D) -> (..., g, g, D) with g = sqrt(N)."""
    n = y.shape[-2]
    g = math.isqrt(n)
    if g * g != n:
        raise QsemcomError(f"token count {n} is not a perfect square")
    return y.reshape(*y.shape[:-2], g, g, y.shape[-1])


def flatten_spatial(t: torch.Tensor) -> torch.Tensor:
    """Inverse of reshape_spatial."""
    g1, g2, d = t.shape[-3], t.shape[-2], t.shape[-1]
    return t.reshape(*t.shape[:-3], g1 * g2, d)


def _to_conv(y: torch.Tensor) -> torch.Tensor:
    # (B, N, D) -> (B, D, g, g)
    return reshape_spatial(y).permute(0, 3, 1, 2).contiguous()


class ConvBlock(nn.Module):
    """Two 3x3 convolutions (instance norm + leaky ReLU 0.2) and a stride-2
    transposed convolution that doubles the spatial size."""

    def __init__(self, dim: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=1),
            nn.InstanceNorm2d(dim, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(dim, dim, 3, padding=1),
            nn.InstanceNorm2d(dim, affine=True),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(dim, dim, 4, stride=2, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class Upsampler(nn.Module):
    """Learnable x2-per-step transposed-convolution stack."""

    def __init__(self, dim: int, doublings: int):
        super().__init__()
        steps = []
        for _ in range(doublings):
            steps += [
                nn.ConvTranspose2d(dim, dim, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2),
            ]
        self.body = nn.Sequential(*steps) if steps else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class DecoderNet(nn.Module):
    """Skip-fusing upsampling decoder; one stage per selected encoder layer."""

    def __init__(self, dim: int, n_stages: int, out_channels: int = 3, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed + 3000)
        self.n_stages = n_stages
        self.blocks = nn.ModuleList(ConvBlock(dim) for _ in range(n_stages))
        # Stage n (1-based, n >= 2) upsamples its skip by 2**(n-1).
        self.upsamplers = nn.ModuleList(
            Upsampler(dim, n - 1) for n in range(2, n_stages + 1)
        )
        self.fusers = nn.ModuleList(
            nn.Conv2d(2 * dim, dim, 1) for _ in range(n_stages - 1)
        )
        self.head = nn.Conv2d(dim, out_channels, 3, padding=1)

    def forward(self, received: list[torch.Tensor]) -> torch.Tensor:
        """received: per-layer (B, N_I, D) matrices in ascending layer order."""
        if len(received) != self.n_stages:
            raise QsemcomError(
                f"decoder expects {self.n_stages} feature matrices, got {len(received)}"
            )
        spatial = [_to_conv(y) for y in received]
        x = self.blocks[0](spatial[-1])
        for n in range(2, self.n_stages + 1):
            skip = spatial[self.n_stages - n]  # layer m_{M_S - n + 1}
            up = self.upsamplers[n - 2](skip)
            if up.shape[-2:] != x.shape[-2:]:
                raise QsemcomError(
                    f"stage {n}: upsampled skip {tuple(up.shape)} does not match "
                    f"running tensor {tuple(x.shape)}"
                )
            x = self.blocks[n - 1](self.fusers[n - 2](torch.cat([up, x], dim=1)))
        return torch.sigmoid(self.head(x))


class Discriminator(nn.Module):
    """Four strided-conv stages (64..512 wide) pooling to one probability."""

    def __init__(self, widths: tuple[int, ...] = (64, 128, 256, 512), seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed + 4000)
        layers: list[nn.Module] = []
        prev = 3
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = w
        self.features = nn.Sequential(*layers)
        self.classify = nn.Conv2d(prev, 1, 3, padding=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B,) probabilities strictly inside (0, 1)."""
        logits = self.classify(self.features(images))
        return torch.sigmoid(logits.mean(dim=(1, 2, 3)))


def discriminate(image: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    if image.ndim == 3:
        return disc(image.unsqueeze(0))[0]
    return disc(image)

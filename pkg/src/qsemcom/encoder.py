"""Transmitter-side feature extraction, projection, and FiLM alignment.

A backbone port yields per-layer image token matrices and a text token
matrix.  Trainable projection heads map both modalities into the shared
space; per-layer generators derive FiLM scale/shift vectors from the pooled
text embedding, broadcast across image tokens.  The desk-scale backbone is a
tiny from-scratch vision/text transformer pair behind the same port as a
pretrained dual encoder would use; it stays frozen during training.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Protocol

import torch
import torch.nn as nn

from .config import SystemConfig
from .errors import CapabilityError, QsemcomError
from .netutil import freeze


class BackbonePort(Protocol):
    """What the pipeline needs from any dual encoder."""

    n_layers: int
    frozen: bool

    def image_encode(self, images: torch.Tensor) -> list[torch.Tensor]: ...

    def text_encode(self, queries: list[str]) -> torch.Tensor: ...


# ---------------------------------------------------------------------------
# Tiny transformer backbone (desk scale)
# ---------------------------------------------------------------------------


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TinyVisionTower(nn.Module):
    """Patch-token transformer; no class token, so token count reshapes to a
    square spatial grid."""

    def __init__(self, image_size: int, patch_size: int, dim: int, depth: int, heads: int):
        super().__init__()
        grid = image_size // patch_size
        self.n_tokens = grid * grid
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)
        self.pos = nn.Parameter(torch.randn(1, self.n_tokens, dim) * 0.02)
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(depth))

    def layer_outputs(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = self.patch_embed(images).flatten(2).transpose(1, 2) + self.pos
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return outs


class TinyTextTower(nn.Module):
    """Hash-bucket word embeddings plus a shallow transformer."""

    VOCAB = 512  # bucket 0 is padding

    def __init__(self, dim: int, n_tokens: int, heads: int, depth: int = 2):
        super().__init__()
        self.n_tokens = n_tokens
        self.embed = nn.Embedding(self.VOCAB, dim)
        self.pos = nn.Parameter(torch.randn(1, n_tokens, dim) * 0.02)
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(depth))

    @classmethod
    def tokenize(cls, query: str, n_tokens: int) -> torch.Tensor:
        words = [w for w in "".join(
            c if c.isalnum() else " " for c in query.lower()
        ).split() if w]
        ids = [1 + zlib.crc32(w.encode("utf-8")) % (cls.VOCAB - 1) for w in words]
        ids = ids[:n_tokens] + [0] * max(0, n_tokens - len(ids))
        return torch.tensor(ids, dtype=torch.long)

    def encode(self, queries: list[str]) -> torch.Tensor:
        ids = torch.stack([self.tokenize(q, self.n_tokens) for q in queries])
        x = self.embed(ids) + self.pos
        for block in self.blocks:
            x = block(x)
        return x


class TinyDualBackbone(nn.Module):
    """Desk-scale stand-in for a pretrained dual encoder; frozen in training."""

    def __init__(self, cfg: SystemConfig):
        super().__init__()
        m = cfg.model
        torch.manual_seed(cfg.seed + 1000)
        self.vision = TinyVisionTower(
            m.image_size, m.patch_size, m.embed_dim, m.backbone_depth, m.backbone_heads
        )
        self.text = TinyTextTower(m.embed_dim, m.num_text_embeddings, m.backbone_heads)
        self.n_layers = m.backbone_depth
        self.frozen = False

    def freeze(self) -> "TinyDualBackbone":
        freeze(self)
        self.frozen = True
        return self

    def image_encode(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.vision.layer_outputs(images)

    def text_encode(self, queries: list[str]) -> torch.Tensor:
        return self.text.encode(queries)


def build_backbone(cfg: SystemConfig) -> TinyDualBackbone:
    if cfg.model.backbone == "tiny":
        return TinyDualBackbone(cfg).freeze()
    if cfg.model.backbone == "pretrained-dual-encoder":
        if not cfg.model.pretrained_path:
            raise CapabilityError(
                "backbone 'pretrained-dual-encoder' needs model.pretrained_path; "
                "weights are never downloaded implicitly"
            )
        raise CapabilityError(
            "no pretrained dual-encoder adapter is bundled in this environment; "
            "plug one in behind BackbonePort"
        )
    raise QsemcomError(f"unknown backbone {cfg.model.backbone!r}")


# ---------------------------------------------------------------------------
# Projection heads and FiLM alignment
# ---------------------------------------------------------------------------


@dataclass
class FiLMParams:
    scale: torch.Tensor  # (B, N_I, D)
    shift: torch.Tensor  # (B, N_I, D)


class ProjectionHead(nn.Module):
    """Normalized affine map D -> D (layer norm, then linear)."""

    def __init__(self, dim: int, use_norm: bool = True):
        super().__init__()
        self.norm = nn.LayerNorm(dim) if use_norm else nn.Identity()
        self.linear = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(self.norm(x))


def _film_generator(dim: int) -> nn.Sequential:
    gen = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
    # Zero-init the output layer so conditioning starts at the identity FiLM.
    nn.init.zeros_(gen[-1].weight)
    nn.init.zeros_(gen[-1].bias)
    return gen


class ProjectionHeads(nn.Module):
    """All trainable encoder-side parameters: per-layer image projections,
    the text projection, and per-layer FiLM scale/shift generators."""

    def __init__(self, dim: int, selection: tuple[int, ...], seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed + 2000)
        self.dim = dim
        self.selection = tuple(sorted(selection))
        self.image_proj = nn.ModuleDict(
            {str(m): ProjectionHead(dim) for m in self.selection}
        )
        self.text_proj = ProjectionHead(dim)
        self.film_scale = nn.ModuleDict(
            {str(m): _film_generator(dim) for m in self.selection}
        )
        self.film_shift = nn.ModuleDict(
            {str(m): _film_generator(dim) for m in self.selection}
        )

    def project(self, features: torch.Tensor, source: int | str) -> torch.Tensor:
        if source == "text":
            return self.text_proj(features)
        key = str(source)
        if key not in self.image_proj:
            raise QsemcomError(f"no projection head for source {source!r}")
        return self.image_proj[key](features)

    def film_params(
        self, text_proj: torch.Tensor, m: int, n_rows: int
    ) -> FiLMParams:
        key = str(m)
        if key not in self.film_scale:
            raise QsemcomError(f"layer {m} is not in the selection {self.selection}")
        pooled = text_proj.mean(dim=-2)  # (B, D)
        scale = 1.0 + torch.tanh(self.film_scale[key](pooled))
        shift = self.film_shift[key](pooled)
        expand = (*scale.shape[:-1], n_rows, scale.shape[-1])
        return FiLMParams(
            scale=scale.unsqueeze(-2).expand(expand),
            shift=shift.unsqueeze(-2).expand(expand),
        )


def align(image_proj: torch.Tensor, film: FiLMParams) -> torch.Tensor:
    """Elementwise scale * x + shift."""
    if film.scale.shape != image_proj.shape or film.shift.shape != image_proj.shape:
        raise QsemcomError(
            f"FiLM shape {tuple(film.scale.shape)} does not match features "
            f"{tuple(image_proj.shape)}"
        )
    return film.scale * image_proj + film.shift


def extract_image_features(
    images: torch.Tensor, backbone: BackbonePort, selection: tuple[int, ...]
) -> list[torch.Tensor]:
    """Backbone layer outputs restricted to the selected layers, in order."""
    selection = tuple(sorted(selection))
    if selection and selection[-1] > backbone.n_layers:
        raise QsemcomError(
            f"layer selection {selection} exceeds backbone depth {backbone.n_layers}"
        )
    outs = backbone.image_encode(images)
    return [outs[m - 1] for m in selection]


def encode(
    images: torch.Tensor,
    queries: list[str],
    backbone: BackbonePort,
    heads: ProjectionHeads,
    selection: tuple[int, ...],
    text_alignment: bool = True,
) -> list[torch.Tensor]:
    """Aligned feature matrices for every selected layer, in layer order."""
    if images.ndim != 4:
        raise QsemcomError("encode() expects a batched (B, 3, H, W) image tensor")
    feats = extract_image_features(images, backbone, selection)
    text_feats = backbone.text_encode(queries) if text_alignment else None
    text_proj = heads.project(text_feats, "text") if text_alignment else None
    aligned = []
    for m, x in zip(sorted(selection), feats):
        xp = heads.project(x, m)
        if text_alignment:
            film = heads.film_params(text_proj, m, n_rows=xp.shape[-2])
            xp = align(xp, film)
        aligned.append(xp)
    return aligned

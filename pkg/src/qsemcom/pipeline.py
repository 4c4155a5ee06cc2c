"""The end-to-end coding pipeline shared by training and evaluation.

Training uses the calibrated index-error surrogate between quantization and
reconstruction (the discrete coding chain is not differentiable); evaluation
runs the full physical layer per image frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import SystemConfig
from .decoder import DecoderNet
from .encoder import ProjectionHeads, TinyDualBackbone, build_backbone, encode
from .quantizer import (
    Codebook,
    QuantizedFeatures,
    assign_indices,
    lookup,
    straight_through,
)
from .phy import channel as phy_channel
from .phy import symbols as phy_symbols


@dataclass
class SurrogateForward:
    reconstruction: torch.Tensor  # (B, 3, H, W)
    aligned: list[torch.Tensor]  # per layer (B, N_I, D)
    indices: list[torch.Tensor]  # encoder-side indices per layer (B, N_I, L)


class CodingPipeline(nn.Module):
    """Backbone + projection heads + codebook + decoder with both channels."""

    def __init__(
        self,
        cfg: SystemConfig,
        backbone: TinyDualBackbone | None = None,
        codebook: Codebook | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.selection = tuple(sorted(cfg.model.layer_selection))
        self.backbone = backbone if backbone is not None else build_backbone(cfg)
        self.heads = ProjectionHeads(cfg.model.embed_dim, self.selection, seed=cfg.seed)
        self.decoder = DecoderNet(cfg.model.embed_dim, len(self.selection), seed=cfg.seed)
        if codebook is None:
            codebook = Codebook(
                torch.randn(
                    cfg.n_segments,
                    cfg.quantizer.codeword_count,
                    cfg.quantizer.segment_length,
                )
            )
        self.codeword_param = nn.Parameter(codebook.codewords.detach().clone())

    def _codebook(self) -> Codebook:
        # Wraps the live Parameter so quantizer ops see current codewords.
        return Codebook(self.codeword_param)

    def set_codebook(self, cb: Codebook) -> None:
        with torch.no_grad():
            self.codeword_param.copy_(cb.codewords)

    def aligned_features(
        self, images: torch.Tensor, queries: list[str]
    ) -> list[torch.Tensor]:
        return encode(
            images,
            queries,
            self.backbone,
            self.heads,
            self.selection,
            text_alignment=self.cfg.model.text_alignment,
        )

    def encoder_indices(self, aligned: list[torch.Tensor]) -> list[torch.Tensor]:
        cb = self._codebook()
        return [assign_indices(a, cb) for a in aligned]

    def reconstruct_from_values(self, received: list[torch.Tensor]) -> torch.Tensor:
        return self.decoder(received)

    # -- training path -------------------------------------------------------

    def forward_surrogate(
        self,
        images: torch.Tensor,
        queries: list[str],
        p_e: float,
        rng: np.random.Generator,
    ) -> SurrogateForward:
        cb = self._codebook()
        aligned = self.aligned_features(images, queries)
        indices = [assign_indices(a, cb) for a in aligned]
        received = []
        n_cw = cb.n_codewords
        for a, idx in zip(aligned, indices):
            flat = idx.cpu().numpy().reshape(-1)
            corrupted = phy_channel.index_error_channel(flat, p_e, rng, n_cw)
            rec_idx = torch.from_numpy(corrupted.reshape(idx.shape))
            values = lookup(rec_idx, cb).detach()
            received.append(straight_through(a, values))
        return SurrogateForward(
            reconstruction=self.decoder(received), aligned=aligned, indices=indices
        )

    # -- evaluation path ------------------------------------------------------

    @torch.no_grad()
    def forward_channel(
        self,
        images: torch.Tensor,
        queries: list[str],
        state: phy_channel.ChannelState,
        rng: np.random.Generator,
        scheme: str | None = None,
    ) -> tuple[torch.Tensor, float]:
        """Full phy round trip, one frame per image; returns reconstructions
        and the measured index error rate."""
        scheme = scheme if scheme is not None else self.cfg.phy.scheme
        cb = self._codebook()
        aligned = self.aligned_features(images, queries)
        indices = [assign_indices(a, cb) for a in aligned]
        batch = images.shape[0]
        n_cw = cb.n_codewords
        n_errors = 0
        n_total = 0
        received_per_layer: list[list[torch.Tensor]] = [[] for _ in self.selection]
        for b in range(batch):
            qs = [
                QuantizedFeatures(indices=idx[b], layer=m)
                for idx, m in zip(indices, self.selection)
            ]
            s = phy_symbols.pack_symbols(qs, self.selection)
            s_hat = phy_channel.transmit(
                s,
                state,
                scheme,
                rng,
                n_cw,
                ldpc_block_length=self.cfg.phy.ldpc_block_length,
            )
            n_errors += int((s_hat != s).sum())
            n_total += s.size
            unpacked = phy_symbols.unpack_symbols(
                s_hat, self.selection, tuple(indices[0][b].shape)
            )
            for slot, q in enumerate(unpacked):
                received_per_layer[slot].append(lookup(q.indices, cb))
        received = [torch.stack(vals) for vals in received_per_layer]
        recon = self.decoder(received)
        return recon, (n_errors / n_total if n_total else 0.0)

    @torch.no_grad()
    def reconstruct_clean(self, images: torch.Tensor, queries: list[str]) -> torch.Tensor:
        """Channel-free quantized reconstruction (sigma^2 = 0 path)."""
        cb = self._codebook()
        aligned = self.aligned_features(images, queries)
        received = [lookup(assign_indices(a, cb), cb) for a in aligned]
        return self.decoder(received)

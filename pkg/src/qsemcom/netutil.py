"""Small shared helpers for torch modules."""

from __future__ import annotations

import hashlib

import torch


def parameter_checksum(module: torch.nn.Module) -> str:
    """Order-stable digest of all parameters and buffers."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        digest.update(key.encode("utf-8"))
        digest.update(state[key].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module

"""Scalar training objectives and their phase compositions.

The generator objective uses the non-saturating form -E[log D(Y)], so
minimizing the total loss pushes reconstructions toward being classified as
real.  Expectations over a minibatch are arithmetic means.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import QsemcomError

_EPS = 1e-12


@dataclass
class LossBundle:
    l1: float = 0.0
    user: float = 0.0
    quant: float = 0.0
    gen: float = 0.0
    dis: float = 0.0
    lambda_user: float = 0.5
    lambda_quant: float = 1.0
    lambda_gen: float = 0.1
    beta: float = 0.25

    def phase1_total(self) -> float:
        return self.l1 + self.lambda_user * self.user + self.lambda_quant * self.quant

    def phase2_total(self) -> float:
        return self.phase1_total() + self.lambda_gen * self.gen


def l1_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sum of absolute differences over all pixels."""
    if x.shape != y.shape:
        raise QsemcomError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).abs().sum()


def gen_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """-E[log D(Y)] for discriminator outputs on reconstructions."""
    return -torch.log(d_fake.clamp_min(_EPS)).mean()


def dis_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """-E[log D(X)] - E[log(1 - D(Y))]."""
    return (
        -torch.log(d_real.clamp_min(_EPS)).mean()
        - torch.log((1.0 - d_fake).clamp_min(_EPS)).mean()
    )


def phase1_loss(
    l1: torch.Tensor,
    user: torch.Tensor,
    quant: torch.Tensor,
    lambda_user: float,
    lambda_quant: float,
) -> torch.Tensor:
    for name, lam in (("lambda_user", lambda_user), ("lambda_quant", lambda_quant)):
        if lam < 0:
            raise QsemcomError(f"{name} must be non-negative")
    return l1 + lambda_user * user + lambda_quant * quant


def phase2_loss(
    l1: torch.Tensor,
    user: torch.Tensor,
    quant: torch.Tensor,
    gen: torch.Tensor,
    lambda_user: float,
    lambda_quant: float,
    lambda_gen: float,
) -> torch.Tensor:
    if lambda_gen < 0:
        raise QsemcomError("lambda_gen must be non-negative")
    return phase1_loss(l1, user, quant, lambda_user, lambda_quant) + lambda_gen * gen


class LossLog:
    """Per-step loss components as tab-separated rows."""

    COLUMNS = ("step", "phase", "l1", "user", "quant", "gen", "dis")

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("\t".join(self.COLUMNS) + "\n", encoding="utf-8")

    def append(self, step: int, phase: str, bundle: LossBundle) -> None:
        row = {
            "step": step,
            "phase": phase,
            "l1": bundle.l1,
            "user": bundle.user,
            "quant": bundle.quant,
            "gen": bundle.gen,
            "dis": bundle.dis,
        }
        self.rows.append(row)
        if self.path is not None:
            with io.open(self.path, "a", encoding="utf-8") as fh:
                fh.write(
                    f"{step}\t{phase}\t{bundle.l1:.6f}\t{bundle.user:.6f}"
                    f"\t{bundle.quant:.6f}\t{bundle.gen:.6f}\t{bundle.dis:.6f}\n"
                )

    @classmethod
    def read(cls, path: str | Path) -> list[dict]:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        rows = []
        for line in lines[1:]:
            parts = line.split("\t")
            rows.append(
                {
                    "step": int(parts[0]),
                    "phase": parts[1],
                    "l1": float(parts[2]),
                    "user": float(parts[3]),
                    "quant": float(parts[4]),
                    "gen": float(parts[5]),
                    "dis": float(parts[6]),
                }
            )
        return rows

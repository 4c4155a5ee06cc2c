"""User-intent relevance: a pluggable vision-language scorer, the cosine
relevance loss over its hidden states, answer generation, and exact-match
answer scoring.

The desk-scale scorer is a frozen proxy: a small seeded conv/text token
embedder with cross-modal mixing blocks provides differentiable hidden
states, while a template-grounded answerer (color-mask geometry features and
a ridge readout fitted once on synthetic scenes, then frozen) provides
deterministic short answers.
"""

from __future__ import annotations

import hashlib
import re
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import SystemConfig
from .data import BACKGROUND, PALETTE, QUADRANTS, SHAPES, UNKNOWN_ANSWER, generate_scene
from .errors import CapabilityError, QsemcomError
from .netutil import freeze

_SCORER_SEED = 90210  # the judge is pinned independently of experiment seeds
_ANSWERER_SCENES = 2048
_COLORS = tuple(PALETTE)


# ---------------------------------------------------------------------------
# Answer normalization and matching
# ---------------------------------------------------------------------------


def normalize_answer(text: str) -> str:
    text = text.lower()
    text = re.sub(r"[^a-z0-9 ]+", " ", text)
    return " ".join(text.split())


def answer_match_rate(
    pairs: list[tuple[torch.Tensor, torch.Tensor, str]], scorer
) -> float:
    """Fraction of (original, reconstructed, query) pairs with equal
    normalized answers."""
    if not pairs:
        raise QsemcomError("answer_match_rate needs a non-empty pair list")
    matches = 0
    for original, reconstructed, query in pairs:
        a = generate_answer(original, query, scorer)
        b = generate_answer(reconstructed, query, scorer)
        if normalize_answer(a) == normalize_answer(b):
            matches += 1
    return matches / len(pairs)


# ---------------------------------------------------------------------------
# User-intent relevance loss
# ---------------------------------------------------------------------------


@dataclass
class RelevanceReport:
    loss: torch.Tensor  # scalar in [0, 2]
    similarities: torch.Tensor  # (B, N_i) per-token cosines
    n_zero_norm: int


def user_intent_loss(
    x: torch.Tensor,
    y: torch.Tensor,
    query: str | list[str],
    scorer,
    token_scope: str = "all",
) -> RelevanceReport:
    """One minus the mean per-token cosine similarity between the scorer's
    hidden states for (x, query) and (y, query).  Zero-norm tokens contribute
    similarity 0 and are counted in the report."""
    if x.shape != y.shape:
        raise QsemcomError("images must share a shape")
    if x.ndim == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    queries = [query] * x.shape[0] if isinstance(query, str) else list(query)
    hx = scorer.hidden_states(x, queries)
    hy = scorer.hidden_states(y, queries)
    if token_scope == "image":
        hx = hx[:, : scorer.n_image_tokens]
        hy = hy[:, : scorer.n_image_tokens]
    elif token_scope != "all":
        raise QsemcomError(f"unknown token_scope {token_scope!r}")
    dot = (hx * hy).sum(dim=-1)
    nx = hx.norm(dim=-1)
    ny = hy.norm(dim=-1)
    eps = torch.finfo(hx.dtype).tiny
    ok = (nx > eps) & (ny > eps)
    sim = torch.where(ok, dot / (nx * ny).clamp_min(eps), torch.zeros_like(dot))
    return RelevanceReport(
        loss=1.0 - sim.mean(),
        similarities=sim,
        n_zero_norm=int((~ok).sum()),
    )


def generate_answer(image: torch.Tensor, query: str, scorer) -> str:
    """Deterministic short answer from the scorer (greedy decoding)."""
    answers = scorer.answer(
        image.unsqueeze(0) if image.ndim == 3 else image,
        [query] if isinstance(query, str) else query,
    )
    return answers[0]


# ---------------------------------------------------------------------------
# Proxy scorer
# ---------------------------------------------------------------------------


class _MixBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class _HiddenStateNet(nn.Module):
    """Image grid tokens + hashed query tokens, mixed by two attention blocks."""

    DIM = 64
    TEXT_TOKENS = 8
    VOCAB = 512

    def __init__(self, image_size: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(64, self.DIM, 3, stride=2, padding=1),
        )
        grid = image_size // 8
        self.n_image_tokens = grid * grid
        self.text_embed = nn.Embedding(self.VOCAB, self.DIM)
        self.pos = nn.Parameter(
            torch.randn(1, self.n_image_tokens + self.TEXT_TOKENS, self.DIM) * 0.02
        )
        self.mix = nn.ModuleList(_MixBlock(self.DIM) for _ in range(2))

    def _text_ids(self, query: str) -> torch.Tensor:
        words = [w for w in "".join(
            c if c.isalnum() else " " for c in query.lower()
        ).split() if w]
        ids = [1 + zlib.crc32(w.encode("utf-8")) % (self.VOCAB - 1) for w in words]
        ids = ids[: self.TEXT_TOKENS] + [0] * max(0, self.TEXT_TOKENS - len(ids))
        return torch.tensor(ids, dtype=torch.long)

    def forward(self, images: torch.Tensor, queries: list[str]) -> torch.Tensor:
        img_tokens = self.conv(images).flatten(2).transpose(1, 2)
        ids = torch.stack([self._text_ids(q) for q in queries])
        txt_tokens = self.text_embed(ids)
        x = torch.cat([img_tokens, txt_tokens], dim=1) + self.pos
        for block in self.mix:
            x = block(x)
        return x


# --- geometry features for the answerer ------------------------------------

_FILL_TARGETS = {"square": 0.95, "circle": 0.76, "triangle": 0.50}


def _scene_features(image: np.ndarray) -> np.ndarray:
    """Hand geometry features per palette color; input (3, H, W) in [0, 1].

    Pixels are assigned to their nearest palette color (or the background)
    so desaturated reconstructions still classify by hue.
    """
    _, h, w = image.shape
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    gx, gy = np.meshgrid(xs, ys)
    colors = np.array([PALETTE[c] for c in _COLORS], dtype=np.float64)
    d2_all = ((image[None, :] - colors[:, :, None, None]) ** 2).sum(axis=1)
    d2_bg = ((image - BACKGROUND) ** 2).sum(axis=0)
    stacked = np.concatenate([d2_all, d2_bg[None]], axis=0)
    nearest = stacked.argmin(axis=0)
    feats: list[float] = []
    for k, cname in enumerate(_COLORS):
        d2 = d2_all[k]
        soft_area = float(np.exp(-d2 / 0.06).mean())
        binary = (nearest == k) & (d2 < 0.30)
        area = float(binary.mean())
        present = float(area > 0.002)
        mass = float(binary.sum())
        if mass > 0:
            cx = float((binary * gx).sum() / mass)
            cy = float((binary * gy).sum() / mass)
        else:
            cx = cy = 0.5
        quad = [0.0, 0.0, 0.0, 0.0]
        if mass > 0:
            qmask = [
                (gx < 0.5) & (gy < 0.5),
                (gx >= 0.5) & (gy < 0.5),
                (gx < 0.5) & (gy >= 0.5),
                (gx >= 0.5) & (gy >= 0.5),
            ]
            quad = [float((binary & q).sum()) / mass for q in qmask]
            ys_i, xs_i = np.nonzero(binary)
            bbox_area = (ys_i.max() - ys_i.min() + 1) * (xs_i.max() - xs_i.min() + 1)
            fill = float(mass / bbox_area)
        else:
            fill = 0.0
        ind = {
            s: float(np.exp(-((fill - t) / 0.09) ** 2)) * present
            for s, t in _FILL_TARGETS.items()
        }
        feats += [area * 20.0, soft_area * 20.0, present, cx, cy, fill]
        feats += quad
        for s in SHAPES:
            feats.append(ind[s])
            feats += [ind[s] * q for q in quad]
    feats.append(1.0)
    return np.array(feats, dtype=np.float64)


def _scene_targets(scene) -> np.ndarray:
    """Per shape type: presence, one-hot color (+absent), one-hot quadrant (+absent)."""
    out: list[float] = []
    for shape in SHAPES:
        placed = scene.find(shape)
        out.append(1.0 if placed else 0.0)
        color_vec = [0.0] * (len(_COLORS) + 1)
        quad_vec = [0.0] * (len(QUADRANTS) + 1)
        if placed:
            color_vec[_COLORS.index(placed.color)] = 1.0
            quad_vec[QUADRANTS.index(placed.quadrant)] = 1.0
        else:
            color_vec[-1] = 1.0
            quad_vec[-1] = 1.0
        out += color_vec + quad_vec
    return np.array(out, dtype=np.float64)


_QUERY_RX = re.compile(
    r"^(?:(what color is the)|(is there a)|(where is the))\s+([a-z]+)$"
)


class ProxyScorer(nn.Module):
    """Frozen desk-scale stand-in for a large vision-language judge."""

    provides_gradients = True
    frozen = True

    def __init__(self, image_size: int):
        super().__init__()
        torch.manual_seed(_SCORER_SEED)
        self.image_size = image_size
        self.net = _HiddenStateNet(image_size)
        # Hidden states are centered against a neutral gray scene so cosine
        # similarity responds to content, not to the net's common component.
        with torch.no_grad():
            gray = torch.full((1, 3, image_size, image_size), 0.5)
            self.register_buffer("reference", self.net(gray, [""]))
        self._fit_answerer()
        freeze(self)

    @property
    def n_image_tokens(self) -> int:
        return self.net.n_image_tokens

    # -- hidden states -----------------------------------------------------

    def hidden_states(self, images: torch.Tensor, queries: list[str]) -> torch.Tensor:
        if images.shape[-1] != self.image_size:
            raise QsemcomError(
                f"scorer was built for {self.image_size}px images, got "
                f"{images.shape[-1]}px"
            )
        return self.net(images, queries) - self.reference

    # -- answerer ------------------------------------------------------------

    def _fit_answerer(self) -> None:
        rng = np.random.default_rng(_SCORER_SEED)
        feats = []
        targets = []
        for _ in range(_ANSWERER_SCENES):
            image, scene = generate_scene(rng, self.image_size)
            feats.append(_scene_features(image.astype(np.float64)))
            targets.append(_scene_targets(scene))
        x = np.stack(feats)
        y = np.stack(targets)
        lam = 1e-3
        gram = x.T @ x + lam * np.eye(x.shape[1])
        self._readout = np.linalg.solve(gram, x.T @ y)

    def _predict(self, image: np.ndarray) -> np.ndarray:
        return _scene_features(image.astype(np.float64)) @ self._readout

    def answer(self, images: torch.Tensor, queries: list[str]) -> list[str]:
        images_np = images.detach().cpu().numpy()
        out = []
        n_colors = len(_COLORS)
        for image, query in zip(images_np, queries):
            match = _QUERY_RX.match(normalize_answer(query))
            if not match or match.group(4) not in SHAPES:
                out.append(UNKNOWN_ANSWER)
                continue
            shape = match.group(4)
            pred = self._predict(image)
            base = SHAPES.index(shape) * (1 + n_colors + 1 + len(QUADRANTS) + 1)
            presence = pred[base] > 0.5
            if match.group(2):  # is there a ...
                out.append("yes" if presence else "no")
                continue
            if not presence:
                out.append(UNKNOWN_ANSWER)
                continue
            if match.group(1):  # what color is the ...
                logits = pred[base + 1 : base + 1 + n_colors + 1]
                pick = int(np.argmax(logits))
                out.append(UNKNOWN_ANSWER if pick == n_colors else _COLORS[pick])
            else:  # where is the ...
                start = base + 1 + n_colors + 1
                logits = pred[start : start + len(QUADRANTS) + 1]
                pick = int(np.argmax(logits))
                out.append(
                    UNKNOWN_ANSWER if pick == len(QUADRANTS) else QUADRANTS[pick]
                )
        return out

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for key in sorted(self.state_dict()):
            digest.update(self.state_dict()[key].detach().cpu().numpy().tobytes())
        digest.update(self._readout.tobytes())
        return digest.hexdigest()


_PROXY_CACHE: dict[int, ProxyScorer] = {}


def proxy_scorer(image_size: int) -> ProxyScorer:
    """Shared frozen proxy instance per image size (fitting it is not free)."""
    if image_size not in _PROXY_CACHE:
        _PROXY_CACHE[image_size] = ProxyScorer(image_size)
    return _PROXY_CACHE[image_size]


def build_scorer(cfg: SystemConfig):
    if cfg.scorer.kind == "proxy":
        return proxy_scorer(cfg.model.image_size)
    if cfg.scorer.kind == "external":
        raise CapabilityError(
            "no external vision-language backend is bundled; supply one behind "
            "the scorer port (hidden_states/answer) and select it in config"
        )
    raise QsemcomError(f"unknown scorer kind {cfg.scorer.kind!r}")

"""Datasets: record types, a synthetic shapes generator, a VQA-format loader,
and the zero-shot category split.

Images are CxHxW float32 tensors in [0, 1].  The synthetic generator places
1..3 distinct colored shapes on a plain background and derives query/answer
pairs from its own scene description, so labels are exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DatasetError

SHAPES = ("square", "circle", "triangle")

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.12, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.75),
    "orange": (0.95, 0.55, 0.05),
}

BACKGROUND = 0.85

QUADRANTS = ("top left", "top right", "bottom left", "bottom right")
_QUADRANT_ANCHORS = {
    "top left": (0.25, 0.25),
    "top right": (0.75, 0.25),
    "bottom left": (0.25, 0.75),
    "bottom right": (0.75, 0.75),
}

UNKNOWN_ANSWER = "unknown"


@dataclass
class Sample:
    image: torch.Tensor  # (3, H, W) float32 in [0, 1]
    query: str
    answer: str
    category: str

    def validate(self) -> "Sample":
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"image must be 3xHxW, got {tuple(self.image.shape)}")
        if self.image.shape[1] != self.image.shape[2]:
            raise DatasetError("image must be square (H == W)")
        if not torch.isfinite(self.image).all():
            raise DatasetError("image contains non-finite values")
        if self.image.min() < 0 or self.image.max() > 1:
            raise DatasetError("image values must lie in [0, 1]")
        if not self.query:
            raise DatasetError("query must be non-empty")
        return self


@dataclass
class Dataset:
    samples: tuple[Sample, ...]
    split_tag: str = "train"

    def __post_init__(self) -> None:
        if not self.samples:
            raise DatasetError("dataset must be non-empty")
        dims = {tuple(s.image.shape) for s in self.samples}
        if len(dims) != 1:
            raise DatasetError(f"inconsistent image dims in dataset: {dims}")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> Sample:
        return self.samples[idx]

    @property
    def image_size(self) -> int:
        return int(self.samples[0].image.shape[1])

    def categories(self) -> set[str]:
        return {s.category for s in self.samples}


@dataclass
class LoadResult:
    dataset: Dataset | None
    n_loaded: int
    n_skipped_images: int
    n_rejected_records: int
    messages: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------


@dataclass
class PlacedShape:
    shape: str
    color: str
    center: tuple[float, float]  # fractional (x, y)
    radius: float  # fractional half-extent
    quadrant: str


@dataclass
class Scene:
    shapes: list[PlacedShape] = field(default_factory=list)

    def find(self, shape: str) -> PlacedShape | None:
        for s in self.shapes:
            if s.shape == shape:
                return s
        return None


def _rasterize(scene: Scene, size: int) -> np.ndarray:
    img = np.full((3, size, size), BACKGROUND, dtype=np.float32)
    ys, xs = np.mgrid[0:size, 0:size]
    xs = (xs + 0.5) / size
    ys = (ys + 0.5) / size
    for placed in scene.shapes:
        cx, cy = placed.center
        r = placed.radius
        if placed.shape == "square":
            mask = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
        elif placed.shape == "circle":
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r**2
        else:  # triangle, apex up
            ax, ay = cx, cy - r
            bx, by = cx - 0.92 * r, cy + 0.78 * r
            ex, ey = cx + 0.92 * r, cy + 0.78 * r

            def side(px, py, qx, qy):
                return (qx - px) * (ys - py) - (qy - py) * (xs - px)

            d1 = side(ax, ay, bx, by)
            d2 = side(bx, by, ex, ey)
            d3 = side(ex, ey, ax, ay)
            mask = ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | (
                (d1 <= 0) & (d2 <= 0) & (d3 <= 0)
            )
        color = PALETTE[placed.color]
        for c in range(3):
            img[c][mask] = color[c]
    return img


def generate_scene(rng: np.random.Generator, size: int) -> tuple[np.ndarray, Scene]:
    """One random scene: 1..3 distinct shapes, distinct colors, one per quadrant."""
    k = int(rng.integers(1, 4))
    shapes = list(rng.choice(SHAPES, size=k, replace=False))
    colors = list(rng.choice(list(PALETTE), size=k, replace=False))
    quads = list(rng.permutation(QUADRANTS)[:k])
    scene = Scene()
    for shape, color, quad in zip(shapes, colors, quads):
        ax, ay = _QUADRANT_ANCHORS[quad]
        jitter = rng.uniform(-0.05, 0.05, size=2)
        radius = float(rng.uniform(0.10, 0.17))
        scene.shapes.append(
            PlacedShape(
                shape=str(shape),
                color=str(color),
                center=(float(ax + jitter[0]), float(ay + jitter[1])),
                radius=radius,
                quadrant=quad,
            )
        )
    return _rasterize(scene, size), scene


def query_for_scene(rng: np.random.Generator, scene: Scene) -> tuple[str, str, str]:
    """Sample a (query, answer, category) triple grounded in the scene."""
    kind = str(rng.choice(("color", "presence", "location")))
    if rng.random() < 0.8 and scene.shapes:
        subject = str(rng.choice([s.shape for s in scene.shapes]))
    else:
        subject = str(rng.choice(SHAPES))
    placed = scene.find(subject)
    if kind == "color":
        query = f"what color is the {subject}"
        answer = placed.color if placed else UNKNOWN_ANSWER
    elif kind == "presence":
        query = f"is there a {subject}"
        answer = "yes" if placed else "no"
    else:
        query = f"where is the {subject}"
        answer = placed.quadrant if placed else UNKNOWN_ANSWER
    return query, answer, subject


def synth_shapes_dataset(
    n: int, image_size: int, seed: int, split_tag: str = "train"
) -> Dataset:
    """Deterministic synthetic dataset: pure function of (n, image_size, seed)."""
    if n < 1:
        raise DatasetError("n must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        img, scene = generate_scene(rng, image_size)
        query, answer, category = query_for_scene(rng, scene)
        samples.append(
            Sample(
                image=torch.from_numpy(img),
                query=query,
                answer=answer,
                category=category,
            ).validate()
        )
    return Dataset(samples=tuple(samples), split_tag=split_tag)


# ---------------------------------------------------------------------------
# VQA-format loading
# ---------------------------------------------------------------------------


def resize_image(image: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize (align_corners off) of a (3, H, W) tensor to size x size."""
    if image.shape[1] == size and image.shape[2] == size:
        return image
    out = F.interpolate(
        image.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
    ).squeeze(0)
    return out.clamp(0.0, 1.0)


def load_vqa_dataset(root_path: str | Path, split: str, image_size: int) -> LoadResult:
    """Load a (image folder + TSV manifest) dataset.

    Manifest: UTF-8, one record per line, tab-separated fields
    image_file, question, answer, category.  Records with empty questions are
    rejected; unreadable images are skipped; both are counted in the result.
    """
    root = Path(root_path)
    manifest = root / f"{split}.tsv"
    if not manifest.exists():
        manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise DatasetError(f"no manifest found under {root}")

    samples: list[Sample] = []
    n_skipped = 0
    n_rejected = 0
    messages: list[str] = []
    for lineno, line in enumerate(
        manifest.read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            n_rejected += 1
            messages.append(f"line {lineno}: expected 4 fields, got {len(parts)}")
            continue
        image_file, question, answer, category = (p.strip() for p in parts)
        if not question:
            n_rejected += 1
            messages.append(f"line {lineno}: empty question")
            continue
        path = root / image_file
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except (OSError, ValueError) as exc:
            n_skipped += 1
            messages.append(f"line {lineno}: unreadable image {image_file}: {exc}")
            continue
        tensor = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
        tensor = resize_image(tensor, image_size)
        samples.append(
            Sample(image=tensor, query=question, answer=answer, category=category).validate()
        )

    dataset = Dataset(samples=tuple(samples), split_tag=split) if samples else None
    return LoadResult(
        dataset=dataset,
        n_loaded=len(samples),
        n_skipped_images=n_skipped,
        n_rejected_records=n_rejected,
        messages=tuple(messages),
    )


def write_vqa_dataset(ds: Dataset, out_dir: str | Path, split: str = "train") -> Path:
    """Write a dataset in the on-disk VQA format (PNG images + TSV manifest)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sample in enumerate(ds.samples):
        rel = f"images/{split}_{i:05d}.png"
        arr = (sample.image.numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(out / rel)
        lines.append("\t".join([rel, sample.query, sample.answer, sample.category]))
    manifest = out / f"{split}.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# Zero-shot split
# ---------------------------------------------------------------------------


def train_val_split(ds: Dataset, val_fraction: float) -> tuple[Dataset, Dataset]:
    """Deterministic tail split of an in-distribution dataset."""
    n_val = max(1, int(round(len(ds) * val_fraction)))
    if n_val >= len(ds):
        raise DatasetError("val_fraction leaves no training samples")
    return (
        Dataset(samples=ds.samples[:-n_val], split_tag="train"),
        Dataset(samples=ds.samples[-n_val:], split_tag="val"),
    )


def build_datasets(cfg) -> tuple[Dataset, Dataset, Dataset]:
    """(train, val, zeroshot) per the data config: VQA-format root when given,
    otherwise the synthetic shapes task."""
    if cfg.data.root:
        result = load_vqa_dataset(cfg.data.root, "train", cfg.model.image_size)
        if result.dataset is None:
            raise DatasetError(f"no usable samples under {cfg.data.root}")
        full = result.dataset
    else:
        full = synth_shapes_dataset(
            cfg.data.synthetic_n, cfg.model.image_size, seed=cfg.seed
        )
    in_dist, zeroshot = make_zero_shot_split(full, set(cfg.data.zero_shot_exclude))
    train, val = train_val_split(in_dist, cfg.data.val_fraction)
    return train, val, zeroshot


def make_zero_shot_split(
    ds: Dataset, excluded: set[str]
) -> tuple[Dataset, Dataset]:
    """Partition by category: train keeps none of `excluded`, zeroshot only them."""
    if not excluded:
        raise DatasetError("excluded category set must be non-empty")
    train = [s for s in ds.samples if s.category not in excluded]
    zeroshot = [s for s in ds.samples if s.category in excluded]
    if not train:
        raise DatasetError("excluded categories cover the whole dataset")
    if not zeroshot:
        raise DatasetError(f"no samples found for excluded categories {excluded}")
    return (
        Dataset(samples=tuple(train), split_tag="train"),
        Dataset(samples=tuple(zeroshot), split_tag="zeroshot"),
    )

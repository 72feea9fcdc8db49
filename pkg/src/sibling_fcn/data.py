"""Seeded synthetic nuclei images, ground-truth masks, augmentation and I/O.

Categories are numbered 1..K; 0 is background in every mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

CATEGORY_NAMES = ("epithelial", "inflammatory", "fibroblast", "miscellaneous")
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "sibling-fcn-dataset"
CENTROID_MARGIN = 0.2


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Nucleus:
    row: int
    col: int
    category: int


@dataclass
class AnnotatedImage:
    pixels: np.ndarray  # (3, H, W) in [0, 1]
    nuclei: List[Nucleus]
    image_id: str


@dataclass
class MaskPair:
    det_mask: np.ndarray  # (H, W) uint8 in {0, 1}
    cls_mask: np.ndarray  # (H, W) uint8 in {0..K}


@dataclass
class CategoryStyle:
    """Appearance of one nucleus category.

    ``color`` is the RGB stain colour before per-nucleus jitter; radii are the
    semi-axes in pixels; ``aspect`` stretches the major axis.
    """

    color: Tuple[float, float, float]
    radius: Tuple[float, float]
    aspect: Tuple[float, float] = (1.0, 1.2)
    texture: float = 0.03


# Every pair of categories is separable by at least one generative feature
# (gaps are between the sampled ranges, colour gaps allow for +-color_jitter):
#   epithelial / inflammatory   minor radius gap 0.6 px
#   epithelial / fibroblast     minor radius gap 1.1 px, aspect gap 0.7
#   epithelial / miscellaneous  minor radius gap 0.1 px, (B - R) gap 0.02
#   inflammatory / fibroblast   aspect gap 0.85
#   inflammatory / misc.        red channel gap 0.14
#   fibroblast / miscellaneous  aspect gap 0.7
# No single feature separates all four, so colour alone is not enough.
DEFAULT_STYLES = (
    CategoryStyle(color=(0.46, 0.30, 0.62), radius=(3.0, 3.6), aspect=(1.0, 1.3), texture=0.06),
    CategoryStyle(color=(0.30, 0.18, 0.46), radius=(1.9, 2.4), aspect=(1.0, 1.15), texture=0.03),
    CategoryStyle(color=(0.40, 0.24, 0.54), radius=(1.5, 1.9), aspect=(2.0, 2.6), texture=0.03),
    CategoryStyle(color=(0.52, 0.28, 0.50), radius=(2.5, 2.9), aspect=(1.0, 1.3), texture=0.05),
)


@dataclass
class SynthConfig:
    """Synthetic image generator settings.

    With the default styles every nucleus centroid differs from the background
    colour by at least ``CENTROID_MARGIN`` (mean absolute channel difference).
    """

    image_height: int = 32
    image_width: int = 32
    nuclei_min: int = 3
    nuclei_max: int = 6
    min_separation: float = 9.0
    border: int = 3
    background_color: Tuple[float, float, float] = (0.92, 0.78, 0.86)
    background_noise: float = 0.03
    color_jitter: float = 0.04
    edge_softness: float = 0.15
    mixture: Tuple[float, ...] = (0.343, 0.311, 0.255, 0.091)
    styles: Tuple[CategoryStyle, ...] = DEFAULT_STYLES
    seed: int = 0

    def __post_init__(self):
        self.styles = tuple(s if isinstance(s, CategoryStyle) else CategoryStyle(**s) for s in self.styles)
        self.mixture = tuple(float(w) for w in self.mixture)
        if len(self.mixture) != len(self.styles):
            raise ValueError("mixture and styles must have one entry per category")
        if abs(sum(self.mixture) - 1.0) > 1e-9 or min(self.mixture) < 0:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if self.nuclei_min < 0 or self.nuclei_max < self.nuclei_min:
            raise ValueError("need 0 <= nuclei_min <= nuclei_max")
        if self.min_separation < 4:
            raise ValueError("min_separation must be at least 4 pixels")
        if 2 * self.border >= min(self.image_height, self.image_width):
            raise ValueError("border leaves no room for nuclei")

    @property
    def num_categories(self) -> int:
        return len(self.styles)

    def to_dict(self) -> dict:
        return asdict(self)


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def image_name(seed: int, index: int) -> str:
    return f"img_{seed}_{index:04d}"


def _place(rng, n, cfg: SynthConfig) -> list:
    lo_r, hi_r = cfg.border, cfg.image_height - 1 - cfg.border
    lo_c, hi_c = cfg.border, cfg.image_width - 1 - cfg.border
    usable = (hi_r - lo_r + 1) * (hi_c - lo_c + 1)
    disk = math.pi * (cfg.min_separation / 2) ** 2
    if n * disk > 1.5 * usable:
        raise GenerationError(f"cannot pack {n} nuclei {cfg.min_separation}px apart in the image")
    placed: list = []
    attempts = 0
    while len(placed) < n:
        attempts += 1
        if attempts > 2000 * max(n, 1):
            raise GenerationError(f"could not place {n} nuclei {cfg.min_separation}px apart")
        r = int(rng.integers(lo_r, hi_r + 1))
        c = int(rng.integers(lo_c, hi_c + 1))
        if all((r - pr) ** 2 + (c - pc) ** 2 >= cfg.min_separation ** 2 for pr, pc in placed):
            placed.append((r, c))
    return placed


def _background(rng, cfg: SynthConfig) -> np.ndarray:
    h, w = cfg.image_height, cfg.image_width
    smooth = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=3.0, mode="wrap")
    smooth /= max(np.abs(smooth).max(), 1e-12)
    fine = rng.standard_normal((3, h, w))
    base = np.asarray(cfg.background_color)[:, None, None]
    return base + cfg.background_noise * (2.0 * smooth[None] + 0.5 * fine)


def _render_nucleus(img, rng, r, c, style: CategoryStyle, cfg: SynthConfig) -> None:
    h, w = img.shape[1:]
    minor = rng.uniform(*style.radius)
    major = minor * rng.uniform(*style.aspect)
    theta = rng.uniform(0.0, math.pi)
    color = np.asarray(style.color) + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)
    rows, cols = np.mgrid[0:h, 0:w]
    dr, dc = rows - r, cols - c
    u = dr * math.cos(theta) + dc * math.sin(theta)
    v = -dr * math.sin(theta) + dc * math.cos(theta)
    dist = np.sqrt((u / major) ** 2 + (v / minor) ** 2)
    alpha = 1.0 / (1.0 + np.exp((dist - 1.0) / cfg.edge_softness))
    texture = style.texture * rng.standard_normal((3, h, w))
    fill = color[:, None, None] + texture
    img *= 1.0 - alpha
    img += alpha * fill


def sample_categories(rng: np.random.Generator, mixture: Sequence[float], n: int) -> np.ndarray:
    return rng.choice(len(mixture), size=n, p=np.asarray(mixture)) + 1


def generate_one(cfg: SynthConfig, index: int) -> AnnotatedImage:
    rng = image_rng(cfg.seed, index)
    n = int(rng.integers(cfg.nuclei_min, cfg.nuclei_max + 1))
    centers = _place(rng, n, cfg)
    cats = sample_categories(rng, cfg.mixture, n)
    img = _background(rng, cfg)
    nuclei = []
    for (r, c), k in zip(centers, cats):
        _render_nucleus(img, rng, r, c, cfg.styles[k - 1], cfg)
        nuclei.append(Nucleus(r, c, int(k)))
    return AnnotatedImage(np.clip(img, 0.0, 1.0), nuclei, image_name(cfg.seed, index))


def generate(cfg: SynthConfig, n_images: int) -> List[AnnotatedImage]:
    """Render ``n_images`` images; image ``i`` depends only on ``(seed, i)``."""
    return [generate_one(cfg, i) for i in range(n_images)]


# --------------------------------------------------------------------- masks


def make_masks(nuclei: Sequence[Nucleus], height: int, width: int, radius: float = 3) -> MaskPair:
    """Disk of ``radius`` around each centroid; overlaps go to the nearest centroid.

    Distance ties are broken by the lower category index.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    det = np.zeros((height, width), dtype=np.uint8)
    cls = np.zeros((height, width), dtype=np.uint8)
    if not nuclei:
        return MaskPair(det, cls)
    order = sorted(range(len(nuclei)), key=lambda i: nuclei[i].category)
    rows, cols = np.mgrid[0:height, 0:width]
    best = np.full((height, width), np.inf)
    for i in order:
        nu = nuclei[i]
        d2 = (rows - nu.row) ** 2 + (cols - nu.col) ** 2
        take = (d2 <= radius * radius) & (d2 < best)
        best[take] = d2[take]
        cls[take] = nu.category
    det[cls > 0] = 1
    return MaskPair(det, cls)


# -------------------------------------------------------------- augmentation


@dataclass
class AugmentRanges:
    zoom: Tuple[float, float] = (0.9, 1.1)
    rotation_jitter_deg: float = 10.0
    shear: float = 0.1
    channel_shift: float = 0.05
    probability: float = 0.5


def augment(image: np.ndarray, masks: MaskPair, rng: np.random.Generator,
            ranges: AugmentRanges = AugmentRanges(), choose=None):
    """Apply a random subset of zoom, rotation, shear, flip and channel shift.

    ``choose`` forces the selected subset (a collection of transform names),
    bypassing the random draw for it. Geometric transforms move image and
    masks together; masks use nearest-neighbour sampling.
    """
    names = ("zoom", "rotate", "shear", "flip", "channel_shift")
    if choose is None:
        picked = {n for n in names if rng.random() < ranges.probability}
    else:
        picked = set(choose)
        unknown = picked - set(names)
        if unknown:
            raise ValueError(f"unknown transforms {sorted(unknown)}")
    img = image
    det, cls = masks.det_mask, masks.cls_mask

    if "flip" in picked:
        axes = [(1,), (2,), (1, 2)][int(rng.integers(3))]
        img = np.flip(img, axis=axes)
        det = np.flip(det, axis=tuple(a - 1 for a in axes))
        cls = np.flip(cls, axis=tuple(a - 1 for a in axes))

    linear = np.eye(2)
    if "rotate" in picked:
        quarter = int(rng.integers(-1, 2))
        if quarter:
            img = np.rot90(img, quarter, axes=(1, 2))
            det = np.rot90(det, quarter)
            cls = np.rot90(cls, quarter)
        a = math.radians(rng.uniform(-ranges.rotation_jitter_deg, ranges.rotation_jitter_deg))
        linear = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]) @ linear
    if "shear" in picked:
        s = rng.uniform(-ranges.shear, ranges.shear)
        linear = np.array([[1.0, s], [0.0, 1.0]]) @ linear
    if "zoom" in picked:
        z = rng.uniform(*ranges.zoom)
        linear = np.array([[z, 0.0], [0.0, z]]) @ linear

    if {"rotate", "shear", "zoom"} & picked:
        h, w = det.shape
        inv = np.linalg.inv(linear)
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = center - inv @ center
        img = np.stack([
            ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="reflect") for ch in img
        ])
        det = ndimage.affine_transform(det, inv, offset=offset, order=0, mode="reflect")
        cls = ndimage.affine_transform(cls, inv, offset=offset, order=0, mode="reflect")

    if "channel_shift" in picked:
        shift = rng.uniform(-ranges.channel_shift, ranges.channel_shift, size=(img.shape[0], 1, 1))
        img = np.clip(img + shift, 0.0, 1.0)

    return np.ascontiguousarray(img), MaskPair(np.ascontiguousarray(det), np.ascontiguousarray(cls))


def crop_patches(image: np.ndarray, masks: MaskPair, size: int = 64, stride: Optional[int] = None):
    """Aligned ``size`` x ``size`` image/mask patches on a regular grid."""
    stride = stride or size
    h, w = masks.det_mask.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    out = []
    for r in range(0, h - size + 1, stride):
        for c in range(0, w - size + 1, stride):
            out.append((
                image[:, r:r + size, c:c + size].copy(),
                MaskPair(masks.det_mask[r:r + size, c:c + size].copy(), masks.cls_mask[r:r + size, c:c + size].copy()),
                (r, c),
            ))
    return out


# ----------------------------------------------------------------------- I/O


def split_counts(n: int, ratio=(7, 1, 2)) -> Tuple[int, int, int]:
    total = sum(ratio)
    n_train = int(round(n * ratio[0] / total))
    n_val = int(round(n * ratio[1] / total))
    return n_train, n_val, n - n_train - n_val


def assign_splits(n: int, seed: int, ratio=(7, 1, 2)) -> List[str]:
    """Split labels per image index, shuffled deterministically by ``seed``."""
    n_train, n_val, _ = split_counts(n, ratio)
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1])).permutation(n)
    labels = [""] * n
    for rank, idx in enumerate(order):
        labels[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return labels


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_png(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(to_uint8(pixels)).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_dataset(out_dir, images: Sequence[AnnotatedImage], splits: Sequence[str], cfg: SynthConfig,
                  mask_radius: float = 3) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for im, split in zip(images, splits):
        fname = f"{im.image_id}.png"
        save_png(out / fname, im.pixels)
        records.append({
            "id": im.image_id,
            "file": fname,
            "split": split,
            "nuclei": [{"row": n.row, "col": n.col, "category": n.category} for n in im.nuclei],
        })
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "seed": cfg.seed,
        "image_height": cfg.image_height,
        "image_width": cfg.image_width,
        "num_categories": cfg.num_categories,
        "category_names": list(CATEGORY_NAMES[: cfg.num_categories]),
        "mask_radius": mask_radius,
        "images": records,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for split in ("train", "val", "test"):
        ids = [r["id"] for r in records if r["split"] == split]
        (out / f"{split}.txt").write_text("".join(f"{i}\n" for i in ids))
    return path


@dataclass
class Dataset:
    root: Path
    manifest: dict
    images: List[AnnotatedImage] = field(default_factory=list)
    splits: List[str] = field(default_factory=list)

    @property
    def num_categories(self) -> int:
        return int(self.manifest["num_categories"])

    @property
    def mask_radius(self) -> float:
        return float(self.manifest.get("mask_radius", 3))

    def split(self, name: str) -> List[AnnotatedImage]:
        return [im for im, s in zip(self.images, self.splits) if s == name]


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path} is not a {MANIFEST_FORMAT} manifest")
    images, splits = [], []
    for rec in manifest["images"]:
        nuclei = [Nucleus(int(n["row"]), int(n["col"]), int(n["category"])) for n in rec["nuclei"]]
        images.append(AnnotatedImage(load_png(root / rec["file"]), nuclei, rec["id"]))
        splits.append(rec["split"])
    return Dataset(root, manifest, images, splits)

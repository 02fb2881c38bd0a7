"""Image/mask ingestion, random tile sampling and a synthetic road-scene generator."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

TILE_SIZE = 224
MASK_THRESHOLD = 128
EIGHT_BIT_MODES = {"L", "LA", "P", "RGB", "RGBA"}


class DataError(ValueError):
    """Base class for dataset ingestion problems."""


class ImageDecodeError(DataError):
    pass


class BitDepthError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class UndersizedImageError(DataError):
    pass


@dataclass
class LabeledImage:
    image: np.ndarray  # (1, 3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, 1, H, W) float32 in {0, 1}
    source_id: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[2]

    @property
    def width(self) -> int:
        return self.image.shape[3]


@dataclass
class TileSample:
    image: np.ndarray
    mask: np.ndarray
    source_id: str
    x: int
    y: int


def _open_8bit(path: str) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image {path!r}: {exc}") from exc
    if img.mode not in EIGHT_BIT_MODES:
        raise BitDepthError(f"{path!r} is not an 8-bit image (PIL mode {img.mode!r})")
    return img


def load_labeled_image(image_path: str, mask_path: str, source_id: str | None = None) -> LabeledImage:
    """Read an RGB image scaled to [0, 1] and a mask binarized at 128."""
    img = _open_8bit(image_path)
    msk = _open_8bit(mask_path)
    if img.size != msk.size:
        raise DimensionMismatchError(
            f"image {image_path!r} is {img.size[0]}x{img.size[1]} but mask {mask_path!r} "
            f"is {msk.size[0]}x{msk.size[1]}"
        )
    rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    m = np.asarray(msk.convert("L"))
    return LabeledImage(
        rgb.transpose(2, 0, 1)[None].copy(),
        (m >= MASK_THRESHOLD).astype(np.float32)[None, None],
        source_id if source_id is not None else os.path.basename(image_path),
    )


def load_image(path: str) -> np.ndarray:
    """RGB PNG as a (1, 3, H, W) float32 tensor in [0, 1]."""
    rgb = np.asarray(_open_8bit(path).convert("RGB"), dtype=np.float32) / 255.0
    return rgb.transpose(2, 0, 1)[None].copy()


def load_probability_map(prob_path: str, mask_path: str) -> tuple[np.ndarray, np.ndarray]:
    """A grayscale probability PNG (value/255) and its binarized ground-truth mask, both (H, W)."""
    probs = np.asarray(_open_8bit(prob_path).convert("L"), dtype=np.float64) / 255.0
    gt = np.asarray(_open_8bit(mask_path).convert("L")) >= MASK_THRESHOLD
    return probs, gt


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(array: np.ndarray, path: str) -> None:
    """Save a (H, W) or (3, H, W) array of values in [0, 1] as an 8-bit PNG."""
    a = to_uint8(array)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
    Image.fromarray(a).save(path)


def save_labeled_image(item: LabeledImage, image_path: str, mask_path: str) -> None:
    save_png(item.image[0], image_path)
    save_png(item.mask[0, 0], mask_path)


def read_manifest(path: str) -> list[tuple[str, str]]:
    """Pairs from a ``first<TAB>second`` manifest; relative paths resolve against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected two tab-separated paths")
            pairs.append(tuple(os.path.normpath(os.path.join(base, p.strip())) for p in parts))
    return pairs


def write_manifest(path: str, pairs: Sequence[tuple[str, str]]) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in pairs:
            fh.write(f"{os.path.relpath(a, base)}\t{os.path.relpath(b, base)}\n")


def check_min_size(dataset: Sequence[LabeledImage], size: int = TILE_SIZE) -> None:
    for item in dataset:
        if item.height < size or item.width < size:
            raise UndersizedImageError(
                f"{item.source_id!r} is {item.height}x{item.width}, smaller than the {size}x{size} tile"
            )


def load_dataset(manifest_path: str, min_size: int = TILE_SIZE) -> list[LabeledImage]:
    pairs = read_manifest(manifest_path)
    if not pairs:
        raise DataError(f"manifest {manifest_path!r} lists no images")
    dataset = [load_labeled_image(img, msk) for img, msk in pairs]
    check_min_size(dataset, min_size)
    return dataset


def sample_tiles(
    dataset: Sequence[LabeledImage], count: int, seed: int, size: int = TILE_SIZE
) -> Iterator[TileSample]:
    """Uniform image, then uniform top-left corner. No augmentation."""
    if not dataset:
        raise DataError("cannot sample tiles from an empty dataset")
    check_min_size(dataset, size)
    return _tile_stream(dataset, count, np.random.default_rng(seed), size)


def _tile_stream(dataset, count, rng, size):
    for _ in range(count):
        item = dataset[int(rng.integers(len(dataset)))]
        y = int(rng.integers(item.height - size + 1))
        x = int(rng.integers(item.width - size + 1))
        yield TileSample(
            item.image[:, :, y : y + size, x : x + size],
            item.mask[:, :, y : y + size, x : x + size],
            item.source_id, x, y,
        )


# ------------------------------------------------------------ synthetic scenes


@dataclass
class Road:
    """A constant-width band. ``straight`` is an infinite line through ``point``;
    ``L`` is two perpendicular rays leaving ``point``."""

    kind: str
    point: tuple[float, float]  # (x, y)
    angle: float  # radians, direction of the (first) arm
    width: float
    turn: int = 1  # +1 / -1: which side the second L arm bends to


@dataclass
class SceneSpec:
    height: int = 448
    width: int = 448
    road_count: int = 3
    width_range: tuple[float, float] = (8.0, 16.0)
    noise: float = 0.03
    l_fraction: float = 0.4
    roads: list[Road] | None = field(default=None)


ROAD_RGB = np.array([0.62, 0.60, 0.58])
GROUND_RGB = np.array([0.30, 0.36, 0.22])


def _band(xs, ys, origin, direction, width, ray: bool):
    dx, dy = xs - origin[0], ys - origin[1]
    along = dx * direction[0] + dy * direction[1]
    across = -dx * direction[1] + dy * direction[0]
    inside = (across >= -width / 2) & (across < width / 2)
    if ray:
        inside &= along >= -width / 2
    return inside


def render_road(road: Road, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    d = (np.cos(road.angle), np.sin(road.angle))
    if road.kind == "straight":
        return _band(xs, ys, road.point, d, road.width, ray=False)
    if road.kind == "L":
        d2 = (-road.turn * d[1], road.turn * d[0])
        return _band(xs, ys, road.point, d, road.width, True) | _band(xs, ys, road.point, d2, road.width, True)
    raise ValueError(f"unknown road kind {road.kind!r}")


def _random_roads(spec: SceneSpec, rng: np.random.Generator) -> list[Road]:
    roads = []
    for _ in range(spec.road_count):
        kind = "L" if rng.random() < spec.l_fraction else "straight"
        point = (rng.uniform(0.15, 0.85) * spec.width, rng.uniform(0.15, 0.85) * spec.height)
        angle = rng.uniform(0, 2 * np.pi)
        w = rng.uniform(*spec.width_range)
        roads.append(Road(kind, point, angle, w, int(rng.choice([-1, 1]))))
    return roads


def generate_synthetic_scene(spec: SceneSpec | None = None, seed: int = 0) -> LabeledImage:
    """Roads of a distinct gray over a textured green-brown ground, plus noise.

    Pixel values are quantized to multiples of 1/255 so a PNG round trip is exact.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    roads = spec.roads if spec.roads is not None else _random_roads(spec, rng)

    mask = np.zeros((h, w), bool)
    for road in roads:
        mask |= render_road(road, h, w)

    coarse = rng.standard_normal((3, max(2, h // 32), max(2, w // 32)))
    texture = np.stack([ndimage.zoom(c, (h / c.shape[0], w / c.shape[1]), order=1)[:h, :w] for c in coarse])
    fine = ndimage.gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, 1.5, 1.5))
    ground = GROUND_RGB[:, None, None] + 0.06 * texture + 0.05 * fine
    road_rgb = ROAD_RGB[:, None, None] + 0.02 * rng.standard_normal((3, 1, 1))
    img = np.where(mask[None], road_rgb, ground)
    if spec.noise > 0:
        img = img + spec.noise * rng.standard_normal(img.shape)
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return LabeledImage(
        img.astype(np.float32)[None],
        mask.astype(np.float32)[None, None],
        f"synthetic-{seed}",
    )


def synthetic_dataset(count: int, seed: int = 0, spec: SceneSpec | None = None) -> list[LabeledImage]:
    """``count`` scenes with per-scene seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [generate_synthetic_scene(spec, int(s)) for s in seeds]

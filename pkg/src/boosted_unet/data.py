"""Dataset generation and loading.

A dataset lives in a directory tree

    root/{train,test}/{images,masks}/NAME.png
    root/manifest.json

Images are 8-bit RGB, masks are single-channel 8-bit label maps with values
in [0, C).  The manifest records the class count, tile size and the
per-channel normalization statistics computed on the training split.

The synthetic generator fills Voronoi cells with class-specific oriented
sinusoid textures plus calibrated Gaussian noise, so that classes carry
signatures at several length scales.  Everything is reproducible from the
spec seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class DatasetError(Exception):
    """Raised for malformed dataset directories or files."""


@dataclass
class TextureSpec:
    """Procedural texture of one class: oriented sinusoid plus noise."""

    period: float           # stripe period in pixels
    orientation: float      # radians
    noise: float            # Gaussian std in [0,1] intensity units
    tint: tuple[float, float, float]
    amplitude: float = 0.25


@dataclass
class SyntheticSpec:
    seed: int = 0
    classes: int = 4
    tile_size: int = 64
    cells: int = 6          # Voronoi sites per tile
    noise: float = 0.12
    max_depth: int = 4      # tile_size must be divisible by 2**max_depth
    textures: list[TextureSpec] = field(default_factory=list)

    def __post_init__(self):
        if not 2 <= self.classes <= 8:
            raise ValueError(f"classes must be in [2, 8], got {self.classes}")
        if self.tile_size % (2 ** self.max_depth) != 0:
            raise ValueError(
                f"tile_size {self.tile_size} not divisible by 2^{self.max_depth}"
            )
        if not self.textures:
            self.textures = default_textures(self.classes, self.noise)
        if len(self.textures) != self.classes:
            raise ValueError("one texture per class required")


# Muted tints: classes stay close in mean color so local texture, not color
# alone, carries most of the signal once noise is added.
_TINTS = [
    (0.52, 0.48, 0.50),
    (0.47, 0.53, 0.49),
    (0.50, 0.49, 0.55),
    (0.55, 0.51, 0.46),
    (0.45, 0.50, 0.53),
    (0.53, 0.46, 0.52),
    (0.48, 0.55, 0.47),
    (0.51, 0.52, 0.53),
]


def default_textures(classes: int, noise: float) -> list[TextureSpec]:
    """Texture ladder with geometrically spaced stripe periods.

    Periods range from ~21 px down to ~2.7 px so that different classes are
    easiest to discriminate at different resolutions.
    """
    periods = np.geomspace(21.3, 2.7, classes)
    return [
        TextureSpec(
            period=float(periods[c]),
            orientation=float(np.pi * c / classes),
            noise=noise,
            tint=_TINTS[c % len(_TINTS)],
        )
        for c in range(classes)
    ]


def voronoi_labels(sites: np.ndarray, cell_classes: np.ndarray, size: int) -> np.ndarray:
    """Label map assigning each pixel the class of its nearest site."""
    yy, xx = np.mgrid[0:size, 0:size]
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    d2 = ((pts[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
    owner = np.argmin(d2, axis=1)
    return cell_classes[owner].reshape(size, size).astype(np.uint8)


def render_tile(mask: np.ndarray, textures: list[TextureSpec], rng: np.random.Generator) -> np.ndarray:
    """Render an RGB uint8 image for a label map using per-class textures."""
    size = mask.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.zeros((size, size, 3), dtype=np.float64)
    for c, tex in enumerate(textures):
        region = mask == c
        if not region.any():
            # keep the per-class RNG stream length fixed regardless of layout
            rng.uniform(0, 2 * np.pi)
            continue
        phase = rng.uniform(0, 2 * np.pi)
        proj = xx * np.cos(tex.orientation) + yy * np.sin(tex.orientation)
        wave = tex.amplitude * np.sin(2 * np.pi * proj / tex.period + phase)
        for ch in range(3):
            img[..., ch][region] = tex.tint[ch] + wave[region]
    noise_field = rng.normal(0.0, 1.0, size=img.shape)
    per_pixel_noise = np.array([textures[c].noise for c in range(len(textures))])[mask]
    img += noise_field * per_pixel_noise[..., None]
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def generate_synthetic(
    spec: SyntheticSpec,
    out_dir: str | Path,
    train_tiles: int,
    test_tiles: int,
) -> "DatasetManifest":
    """Write a synthetic dataset under out_dir and return the train manifest.

    The same spec always produces byte-identical files.  Every class is
    guaranteed to appear in at least one training tile (the first Voronoi
    cell of tile t is forced to class t mod C).
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    C, size = spec.classes, spec.tile_size

    pairs: dict[str, list[str]] = {}
    for split, n_tiles in (("train", train_tiles), ("test", test_tiles)):
        img_dir = out_dir / split / "images"
        mask_dir = out_dir / split / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        names = []
        for t in range(n_tiles):
            sites = rng.uniform(0, size, size=(spec.cells, 2))
            cell_classes = rng.integers(0, C, size=spec.cells)
            cell_classes[0] = t % C
            mask = voronoi_labels(sites, cell_classes, size)
            img = render_tile(mask, spec.textures, rng)
            name = f"tile_{t:04d}.png"
            Image.fromarray(img, mode="RGB").save(img_dir / name)
            Image.fromarray(mask, mode="L").save(mask_dir / name)
            names.append(name)
        pairs[split] = names

    # normalization statistics over the training split
    acc = np.zeros(3)
    acc2 = np.zeros(3)
    n_px = 0
    for name in pairs["train"]:
        arr = np.asarray(Image.open(out_dir / "train" / "images" / name), dtype=np.float64) / 255.0
        acc += arr.reshape(-1, 3).sum(axis=0)
        acc2 += (arr.reshape(-1, 3) ** 2).sum(axis=0)
        n_px += arr.shape[0] * arr.shape[1]
    if n_px:
        mean = acc / n_px
        std = np.sqrt(np.maximum(acc2 / n_px - mean ** 2, 1e-12))
    else:
        mean, std = np.zeros(3), np.ones(3)

    manifest = {
        "class_count": C,
        "tile_size": size,
        "channel_mean": [round(float(v), 8) for v in mean],
        "channel_std": [round(float(v), 8) for v in std],
        "seed": spec.seed,
        "pairs": pairs,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return load_manifest(out_dir, "train")


@dataclass
class DatasetManifest:
    """One split of a dataset directory."""

    root: Path
    split: str
    images: list[Path]
    masks: list[Path]
    class_count: int
    tile_size: int
    channel_mean: np.ndarray
    channel_std: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


def load_manifest(root: str | Path, split: str = "train") -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest.json under {root}")
    with open(path) as fh:
        meta = json.load(fh)
    if split not in meta["pairs"]:
        raise DatasetError(f"split {split!r} not present in {path}")
    names = meta["pairs"][split]
    images = [root / split / "images" / n for n in names]
    masks = [root / split / "masks" / n for n in names]
    return DatasetManifest(
        root=root,
        split=split,
        images=images,
        masks=masks,
        class_count=int(meta["class_count"]),
        tile_size=int(meta["tile_size"]),
        channel_mean=np.asarray(meta["channel_mean"], dtype=np.float32),
        channel_std=np.asarray(meta["channel_std"], dtype=np.float32),
    )


def scan_directory(
    root: str | Path,
    split: str,
    class_count: int,
    tile_size: int,
    channel_mean=None,
    channel_std=None,
) -> DatasetManifest:
    """Manifest for a bare image/mask directory pair without manifest.json.

    Pairs are matched by identical base names; a missing partner is an error.
    """
    root = Path(root)
    img_dir = root / split / "images"
    mask_dir = root / split / "masks"
    images, masks = [], []
    if img_dir.exists():
        for img in sorted(img_dir.iterdir()):
            mask = mask_dir / img.name
            if not mask.exists():
                raise DatasetError(f"mask missing for image {img}")
            images.append(img)
            masks.append(mask)
    return DatasetManifest(
        root=root,
        split=split,
        images=images,
        masks=masks,
        class_count=class_count,
        tile_size=tile_size,
        channel_mean=np.asarray(channel_mean if channel_mean is not None else [0.5, 0.5, 0.5], dtype=np.float32),
        channel_std=np.asarray(channel_std if channel_std is not None else [0.25, 0.25, 0.25], dtype=np.float32),
    )


def one_hot(mask: np.ndarray, class_count: int) -> np.ndarray:
    """Integer label map (H, W) -> one-hot float32 array (C, H, W)."""
    if mask.min() < 0 or mask.max() >= class_count:
        raise DatasetError(
            f"labels outside [0, {class_count}): found {mask.min()}..{mask.max()}"
        )
    out = np.zeros((class_count,) + mask.shape, dtype=np.float32)
    for c in range(class_count):
        out[c][mask == c] = 1.0
    return out


def _read_pair(manifest: DatasetManifest, idx: int) -> tuple[np.ndarray, np.ndarray]:
    img_path, mask_path = manifest.images[idx], manifest.masks[idx]
    img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
    mask = np.asarray(Image.open(mask_path), dtype=np.int64)
    if mask.ndim != 2:
        raise DatasetError(f"mask {mask_path} is not single-channel")
    if img.shape[:2] != mask.shape:
        raise DatasetError(
            f"size mismatch for {img_path.name}: image {img.shape[:2]} vs mask {mask.shape}"
        )
    if mask.min() < 0 or mask.max() >= manifest.class_count:
        raise DatasetError(
            f"mask {mask_path} has labels outside [0, {manifest.class_count})"
        )
    img = (img - manifest.channel_mean) / manifest.channel_std
    return img.transpose(2, 0, 1), mask


def iter_tiles(manifest: DatasetManifest):
    """Yield (image_chw, mask) tiles in deterministic order.

    Stored files larger than the manifest tile size are cropped into a
    non-overlapping grid of tiles (row-major).
    """
    tile = manifest.tile_size
    for idx in range(len(manifest.images)):
        img, mask = _read_pair(manifest, idx)
        h, w = mask.shape
        if (h, w) == (tile, tile):
            yield img, mask
            continue
        if h % tile or w % tile:
            raise DatasetError(
                f"{manifest.images[idx].name}: size {h}x{w} not tileable by {tile}"
            )
        for i in range(h // tile):
            for j in range(w // tile):
                sl = np.s_[i * tile:(i + 1) * tile, j * tile:(j + 1) * tile]
                yield img[:, sl[0], sl[1]], mask[sl]


def load_dataset(manifest: DatasetManifest):
    """Iterate (image_chw, one_hot_mask) pairs; empty manifests yield nothing."""
    for img, mask in iter_tiles(manifest):
        yield img, one_hot(mask, manifest.class_count)


def load_split_arrays(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Materialize a whole split as (images (N,3,S,S), masks (N,S,S)) arrays."""
    images, masks = [], []
    for img, mask in iter_tiles(manifest):
        images.append(img)
        masks.append(mask)
    if not images:
        s = manifest.tile_size
        return np.zeros((0, 3, s, s), np.float32), np.zeros((0, s, s), np.int64)
    return np.stack(images).astype(np.float32), np.stack(masks).astype(np.int64)


def hflip(image: np.ndarray, mask: np.ndarray):
    """Flip image (C, H, W) and mask (H, W) along the width axis."""
    return image[..., ::-1].copy(), mask[:, ::-1].copy()


def vflip(image: np.ndarray, mask: np.ndarray):
    """Flip image (C, H, W) and mask (H, W) along the height axis."""
    return image[:, ::-1, :].copy(), mask[::-1, :].copy()


def augment(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    shift_margin: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Random flips plus shift-and-crop, identical on image and mask.

    image is (C, H, W), mask is (H, W).  The shift pads by reflection and
    re-crops at an offset of up to shift_margin * H pixels per axis.
    """
    if image.shape[-2:] != mask.shape:
        raise DatasetError("image/mask shapes differ")
    if rng.random() < 0.5:
        image, mask = image[..., ::-1], mask[..., ::-1]
    if rng.random() < 0.5:
        image, mask = image[..., ::-1, :], mask[::-1, :]
    margin = int(round(shift_margin * mask.shape[0]))
    if margin > 0:
        dy = int(rng.integers(-margin, margin + 1))
        dx = int(rng.integers(-margin, margin + 1))
        if dy or dx:
            pimg = np.pad(image, ((0, 0), (margin, margin), (margin, margin)), mode="reflect")
            pmask = np.pad(mask, ((margin, margin), (margin, margin)), mode="reflect")
            h, w = mask.shape
            y0, x0 = margin + dy, margin + dx
            image = pimg[:, y0:y0 + h, x0:x0 + w]
            mask = pmask[y0:y0 + h, x0:x0 + w]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def class_weights(masks, class_count: int) -> np.ndarray:
    """Per-class loss weights 1 - N_c / N over all pixels of the masks."""
    masks = list(masks)
    if not masks:
        raise DatasetError("class_weights needs at least one mask")
    counts = np.zeros(class_count, dtype=np.int64)
    total = 0
    for mask in masks:
        counts += np.bincount(np.asarray(mask).ravel(), minlength=class_count)[:class_count]
        total += mask.size
    return (1.0 - counts / total).astype(np.float64)

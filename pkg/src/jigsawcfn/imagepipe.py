"""Deterministic image-to-puzzle sampling.

Images travel through the pipeline as float32 (H, W, C) arrays with unit
interval values; 8-bit files are converted at the I/O boundary. A puzzle
sample is produced by resize -> random crop -> per-cell tile extraction
with random shifts -> permutation by a uniformly drawn set entry ->
per-channel normalization. Every random choice comes from the generator
passed in, consumed in a fixed documented order, so identical (image,
set, config, seed) always yields a bit-identical sample.

RNG consumption order inside ``make_puzzle``: crop row offset, crop column
offset, then one (row, column) shift per cell in raster order, then the
permutation label.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .permset import PermutationSet, apply_permutation
from .seeding import DOMAIN_SAMPLE, derive_rng

Image = np.ndarray


@dataclass(frozen=True)
class PuzzleConfig:
    resize_target: int = 256
    crop: int = 225
    grid: int = 3
    cell: int = 75
    tile: int = 64
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    std: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.grid * self.cell != self.crop:
            raise ValueError(f"grid*cell must equal crop: {self.grid}*{self.cell} != {self.crop}")
        if not 1 <= self.tile <= self.cell:
            raise ValueError(f"tile must be in 1..cell, got tile={self.tile} cell={self.cell}")
        if self.resize_target < self.crop:
            raise ValueError(f"resize_target {self.resize_target} smaller than crop {self.crop}")
        if any(s == 0 for s in self.std):
            raise ValueError("normalization std must be nonzero")

    @property
    def num_tiles(self) -> int:
        return self.grid * self.grid

    @property
    def max_shift(self) -> int:
        return self.cell - self.tile


@dataclass
class PuzzleSample:
    """Shuffled, normalized tiles plus the permutation label that shuffled them."""

    tiles: np.ndarray  # (grid^2, tile, tile, channels) float32
    label: int
    source_id: str = ""
    rng_trace: tuple[int, ...] = ()

    def __post_init__(self):
        if self.tiles.ndim != 4:
            raise ValueError(f"tiles must be (n, h, w, c), got {self.tiles.shape}")
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")


def _check_image(img: Image) -> Image:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"degenerate image of shape {img.shape}")
    return img


def load_image(path: str | Path) -> Image:
    """Read an 8-bit image file into float32 (H, W, C) RGB in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"could not read image {path}")
    if raw.ndim == 3 and raw.shape[2] == 4:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2BGR)
    if raw.ndim == 3:
        raw = raw[:, :, ::-1]  # BGR -> RGB
    return _check_image(raw.astype(np.float32) / 255.0)


def save_image(path: str | Path, img: Image) -> None:
    img = _check_image(img)
    out = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if out.shape[2] == 3:
        out = out[:, :, ::-1]  # RGB -> BGR
    else:
        out = out[:, :, 0]
    if not cv2.imwrite(str(path), out):
        raise ValueError(f"could not write image {path}")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def resize_shorter_side(img: Image, target: int) -> Image:
    """Bilinear resize so the shorter side equals ``target``, keeping aspect.

    The long side is rounded half-up.
    """
    img = _check_image(img)
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    h, w = img.shape[:2]
    if h <= w:
        new_h, new_w = target, _round_half_up(w * target / h)
    else:
        new_h, new_w = _round_half_up(h * target / w), target
    if (new_h, new_w) == (h, w):
        return img.copy()
    out = cv2.resize(img, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    if out.ndim == 2:
        out = out[..., None]
    return out


def center_crop_to_square(img: Image, side: int) -> Image:
    """Centered side x side crop; odd margins fall toward the top-left."""
    img = _check_image(img)
    h, w = img.shape[:2]
    if h < side or w < side:
        raise ValueError(f"image {h}x{w} smaller than crop side {side}")
    top = (h - side) // 2
    left = (w - side) // 2
    return img[top : top + side, left : left + side]


def random_crop(img: Image, side: int, rng: np.random.Generator) -> Image:
    """Uniformly positioned side x side crop; draws row offset, then column."""
    img = _check_image(img)
    h, w = img.shape[:2]
    if h < side or w < side:
        raise ValueError(f"image {h}x{w} smaller than crop side {side}")
    top = int(rng.integers(h - side + 1))
    left = int(rng.integers(w - side + 1))
    return img[top : top + side, left : left + side]


def draw_tile_offsets(cfg: PuzzleConfig, rng: np.random.Generator) -> np.ndarray:
    """(grid^2, 2) per-cell (row, col) shifts, each uniform on 0..cell-tile."""
    return rng.integers(0, cfg.max_shift + 1, size=(cfg.num_tiles, 2))


def extract_tiles(img: Image, cfg: PuzzleConfig, rng: np.random.Generator, return_offsets: bool = False):
    """Cut one randomly shifted tile from each grid cell, in raster order.

    Each tile is a contiguous sub-window of its own cell; adjacent-tile
    gaps therefore range over [0, 2*(cell-tile)] with mean cell-tile.
    """
    img = _check_image(img)
    if img.shape[0] != cfg.crop or img.shape[1] != cfg.crop:
        raise ValueError(f"expected a {cfg.crop}x{cfg.crop} crop, got {img.shape[0]}x{img.shape[1]}")
    offsets = draw_tile_offsets(cfg, rng)
    tiles = np.empty((cfg.num_tiles, cfg.tile, cfg.tile, img.shape[2]), dtype=img.dtype)
    for k in range(cfg.num_tiles):
        r, c = divmod(k, cfg.grid)
        oy, ox = offsets[k]
        top = r * cfg.cell + oy
        left = c * cfg.cell + ox
        tiles[k] = img[top : top + cfg.tile, left : left + cfg.tile]
    if return_offsets:
        return tiles, offsets
    return tiles


def adjacent_gaps(offsets: np.ndarray, cfg: PuzzleConfig) -> np.ndarray:
    """Pixel gaps between every horizontally and vertically adjacent tile pair."""
    base = cfg.max_shift
    gaps = []
    for r in range(cfg.grid):
        for c in range(cfg.grid - 1):
            k = r * cfg.grid + c
            gaps.append(base + offsets[k + 1, 1] - offsets[k, 1])
    for r in range(cfg.grid - 1):
        for c in range(cfg.grid):
            k = r * cfg.grid + c
            gaps.append(base + offsets[k + cfg.grid, 0] - offsets[k, 0])
    return np.asarray(gaps)


def gap_statistics(n_samples: int, cfg: PuzzleConfig, seed: int = 0) -> dict[str, float]:
    """min/max/mean adjacent-tile gap over ``n_samples`` simulated extractions."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    rng = derive_rng(seed)
    all_gaps = np.concatenate([adjacent_gaps(draw_tile_offsets(cfg, rng), cfg) for _ in range(n_samples)])
    return {"min": float(all_gaps.min()), "max": float(all_gaps.max()), "mean": float(all_gaps.mean())}


def normalize(tile: Image, cfg: PuzzleConfig) -> Image:
    """Per-channel (x - mean) / std using the config parameters."""
    tile = _check_image(tile)
    mean = np.asarray(cfg.mean, dtype=np.float32)
    std = np.asarray(cfg.std, dtype=np.float32)
    if np.any(std == 0):
        raise ValueError("normalization std must be nonzero")
    if mean.size not in (1, tile.shape[2]) or std.size not in (1, tile.shape[2]):
        raise ValueError(f"normalization parameters do not match {tile.shape[2]} channels")
    return (tile - mean) / std


def one_hot(label: int, num_classes: int) -> np.ndarray:
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} out of range for {num_classes} classes")
    v = np.zeros(num_classes, dtype=np.float32)
    v[label] = 1.0
    return v


def make_puzzle(
    img: Image,
    pset: PermutationSet,
    cfg: PuzzleConfig,
    rng: np.random.Generator,
    source_id: str = "",
    rng_trace: tuple[int, ...] = (),
) -> PuzzleSample:
    """Sample one labeled puzzle from an image; see module docstring for RNG order."""
    if pset.grid != cfg.grid:
        raise ValueError(f"permutation set grid {pset.grid} does not match config grid {cfg.grid}")
    resized = resize_shorter_side(img, cfg.resize_target)
    cropped = random_crop(resized, cfg.crop, rng)
    tiles = extract_tiles(cropped, cfg, rng)
    label = int(rng.integers(len(pset)))
    shuffled = apply_permutation(pset[label], [tiles[k] for k in range(cfg.num_tiles)])
    stacked = np.stack([normalize(t, cfg) for t in shuffled])
    return PuzzleSample(tiles=stacked, label=label, source_id=source_id, rng_trace=rng_trace)


def tiles_to_batch(samples: Sequence[PuzzleSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into ((branches, batch, C, t, t) tiles, (batch,) labels)."""
    if not samples:
        raise ValueError("empty batch")
    tiles = np.stack([s.tiles for s in samples], axis=1)  # (n, batch, h, w, c)
    tiles = tiles.transpose(0, 1, 4, 2, 3).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return tiles, labels


# ---------------------------------------------------------------------------
# dataset on disk: manifest + images + normalization sidecar


def load_manifest(path: str | Path) -> list[str]:
    """One relative image path per line; order defines the record indices."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    records = [ln for ln in lines if ln and not ln.startswith("#")]
    if not records:
        raise ValueError(f"manifest {path} lists no images")
    return records


def save_manifest(path: str | Path, records: Sequence[str]) -> None:
    Path(path).write_text("\n".join(records) + "\n")


def save_normalization(path: str | Path, mean: Sequence[float], std: Sequence[float]) -> None:
    mean_s = " ".join(repr(float(v)) for v in mean)
    std_s = " ".join(repr(float(v)) for v in std)
    Path(path).write_text(f"mean = {mean_s}\nstd = {std_s}\n")


def load_normalization(path: str | Path) -> tuple[tuple[float, ...], tuple[float, ...]]:
    values: dict[str, tuple[float, ...]] = {}
    for ln in Path(path).read_text().splitlines():
        ln = ln.strip()
        if not ln:
            continue
        key, _, rest = ln.partition("=")
        values[key.strip()] = tuple(float(v) for v in rest.split())
    if "mean" not in values or "std" not in values:
        raise ValueError(f"normalization file {path} must define mean and std")
    return values["mean"], values["std"]


def compute_normalization(images) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Dataset-level per-channel mean/std over an iterable of [0,1] images."""
    total = None
    total_sq = None
    count = 0
    for img in images:
        img = _check_image(img).astype(np.float64)
        flat = img.reshape(-1, img.shape[2])
        if total is None:
            total = flat.sum(axis=0)
            total_sq = (flat**2).sum(axis=0)
        else:
            total += flat.sum(axis=0)
            total_sq += (flat**2).sum(axis=0)
        count += flat.shape[0]
    if count == 0:
        raise ValueError("no images to aggregate")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    return tuple(float(v) for v in mean), tuple(float(v) for v in np.sqrt(var))


class PuzzleDataset:
    """Manifest-backed image collection that emits replayable puzzle samples.

    Per-sample generators derive from (master seed, sample domain, epoch,
    record index), so a record's puzzle for a given epoch is independent of
    batching, workers or visit order, and its label resamples every epoch.
    """

    def __init__(self, root: str | Path, config: PuzzleConfig, records: Sequence[str] | None = None, cache: bool = True):
        self.root = Path(root)
        self.config = config
        self.records = list(records) if records is not None else load_manifest(self.root / "manifest.txt")
        self._cache: dict[int, Image] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.records)

    def image(self, index: int) -> Image:
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        img = load_image(self.root / self.records[index])
        if self._cache is not None:
            self._cache[index] = img
        return img

    def sample(self, index: int, pset: PermutationSet, master_seed: int, epoch: int) -> PuzzleSample:
        trace = (master_seed, DOMAIN_SAMPLE, epoch, index)
        rng = derive_rng(*trace)
        return make_puzzle(self.image(index), pset, self.config, rng, source_id=self.records[index], rng_trace=trace)

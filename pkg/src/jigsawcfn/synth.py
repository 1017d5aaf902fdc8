"""Synthetic datasets that make puzzle pretraining learnable in minutes.

Each generated image is split into grid x grid macro-cells and every cell
carries a distinct texture family that encodes the cell position: stripes
at several orientations and scales, checkerboards and rings. The pattern
family survives the random crop and tile shifts, so a tile identifies
its source cell, while the base color, channel gains, phases and noise
are per-image nuisances. The families are deliberately not variations of
one parametric pattern: telling two of them apart does not automatically
tell the others apart, so feature coverage across cells is what transfer
measures. A per-image global pattern scale (two families) doubles as a
retrieval label. The transfer task reuses the same pattern language:
single-texture tiles classified by family.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imagepipe import compute_normalization, save_image, save_manifest, save_normalization
from .seeding import DOMAIN_SYNTH, derive_rng

# two global pattern scales; the scale index is the retrieval label
SCALE_FAMILIES = (1.0, 1.45)
N_PATTERNS = 9


def _stripes(yy, xx, angle: float, wavelength: float, phase: float) -> np.ndarray:
    return np.sin(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / wavelength + phase)


def render_pattern(
    kind: int, height: int, width: int, rng: np.random.Generator, scale: float = 1.0
) -> np.ndarray:
    """One unit-amplitude texture field of the given family, with jitter.

    Families 0-3: stripes at 0/90/45/135 degrees; 4: checkerboard;
    5: concentric rings around a random center; 6-7: coarse stripes at
    0/90 degrees; 8: coarse checkerboard.
    """
    if not 0 <= kind < N_PATTERNS:
        raise ValueError(f"pattern kind must be in 0..{N_PATTERNS - 1}, got {kind}")
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    wav = 7.0 * scale * float(rng.uniform(0.95, 1.05))
    coarse = 13.0 * scale * float(rng.uniform(0.95, 1.05))
    phase = float(rng.uniform(0, 2 * np.pi))
    if kind == 0:
        return _stripes(yy, xx, 0.0, wav, phase)
    if kind == 1:
        return _stripes(yy, xx, np.pi / 2, wav, phase)
    if kind == 2:
        return _stripes(yy, xx, np.pi / 4, wav, phase)
    if kind == 3:
        return _stripes(yy, xx, 3 * np.pi / 4, wav, phase)
    if kind == 4:
        phase2 = float(rng.uniform(0, 2 * np.pi))
        return _stripes(yy, xx, 0.0, wav, phase) * _stripes(yy, xx, np.pi / 2, wav, phase2)
    if kind == 5:
        cy = float(rng.uniform(0, height))
        cx = float(rng.uniform(0, width))
        rr = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return np.sin(2 * np.pi * rr / wav + phase)
    if kind == 6:
        return _stripes(yy, xx, 0.0, coarse, phase)
    if kind == 7:
        return _stripes(yy, xx, np.pi / 2, coarse, phase)
    phase2 = float(rng.uniform(0, 2 * np.pi))
    return _stripes(yy, xx, np.pi / 4, coarse, phase) * _stripes(yy, xx, 3 * np.pi / 4, coarse, phase2)


def _colorize(field: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Wrap a unit field in per-image color nuisances plus pixel noise."""
    base = rng.uniform(0.35, 0.65, size=3).astype(np.float32)
    gains = rng.uniform(0.5, 1.0, size=3).astype(np.float32)
    amplitude = float(rng.uniform(0.18, 0.30))
    img = base[None, None, :] + amplitude * gains[None, None, :] * field[:, :, None]
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_puzzle_image(rng: np.random.Generator, size: int = 126, grid: int = 3) -> tuple[np.ndarray, int]:
    """One image whose cells are pattern-coded by position; returns (image, family).

    Color nuisances are shared by all cells of an image so absolute color
    carries no position information.
    """
    if size % grid:
        raise ValueError(f"size {size} must be divisible by grid {grid}")
    if grid * grid > N_PATTERNS:
        raise ValueError(f"at most {N_PATTERNS} cells have distinct patterns, got grid {grid}")
    cell = size // grid
    family = int(rng.integers(len(SCALE_FAMILIES)))
    scale = SCALE_FAMILIES[family]
    base = rng.uniform(0.35, 0.65, size=3).astype(np.float32)
    gains = rng.uniform(0.5, 1.0, size=3).astype(np.float32)
    amplitude = float(rng.uniform(0.18, 0.30))
    img = np.empty((size, size, 3), dtype=np.float32)
    for k in range(grid * grid):
        r, c = divmod(k, grid)
        field = render_pattern(k, cell, cell, rng, scale=scale)
        patch = base[None, None, :] + amplitude * gains[None, None, :] * field[:, :, None]
        img[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell] = patch
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0), family


def generate_puzzle_dataset(
    out_dir: str | Path, n_images: int, seed: int = 0, size: int = 126, grid: int = 3
) -> Path:
    """Write images, manifest.txt, normalization.txt and labels.txt to a directory."""
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    labels = []
    images = []
    for i in range(n_images):
        rng = derive_rng(seed, DOMAIN_SYNTH, i)
        img, family = synth_puzzle_image(rng, size=size, grid=grid)
        name = f"img_{i:05d}.png"
        save_image(out / name, img)
        records.append(name)
        labels.append(family)
        images.append(img)
    save_manifest(out / "manifest.txt", records)
    mean, std = compute_normalization(images)
    save_normalization(out / "normalization.txt", mean, std)
    (out / "labels.txt").write_text("".join(f"{r} {y}\n" for r, y in zip(records, labels)))
    return out


def load_labels(path: str | Path) -> dict[str, int]:
    """Parse a labels file with one "<record> <int label>" pair per line."""
    out: dict[str, int] = {}
    for ln in Path(path).read_text().splitlines():
        ln = ln.strip()
        if not ln:
            continue
        record, _, label = ln.rpartition(" ")
        out[record] = int(label)
    if not out:
        raise ValueError(f"labels file {path} is empty")
    return out


def synth_transfer_example(rng: np.random.Generator, kind: int, tile_side: int) -> np.ndarray:
    """A single-texture tile with the same nuisance structure as the puzzles."""
    scale = float(rng.choice(SCALE_FAMILIES))
    field = render_pattern(kind, tile_side, tile_side, rng, scale=scale)
    return _colorize(field, rng)


def make_transfer_data(
    n_per_class: int,
    n_classes: int = N_PATTERNS,
    tile_side: int = 32,
    seed: int = 0,
    mean: float = 0.5,
    std: float = 0.25,
) -> tuple[np.ndarray, np.ndarray]:
    """Labeled texture-classification tiles as ((N, 3, t, t), (N,)) arrays.

    Class k is pattern family k. Examples are normalized with the given
    scalar mean/std and interleaved so any prefix is class-balanced.
    """
    if not 2 <= n_classes <= N_PATTERNS:
        raise ValueError(f"n_classes must be in 2..{N_PATTERNS}, got {n_classes}")
    xs = []
    ys = []
    for i in range(n_per_class):
        for cls in range(n_classes):
            rng = derive_rng(seed, DOMAIN_SYNTH, cls, i)
            img = synth_transfer_example(rng, cls, tile_side)
            xs.append((img - mean) / std)
            ys.append(cls)
    x = np.stack(xs).transpose(0, 3, 1, 2).astype(np.float32)
    y = np.array(ys, dtype=np.int64)
    return x, y

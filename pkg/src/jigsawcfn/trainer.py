"""SGD training loop for the puzzle task, with checkpoints and metrics.

The batch stream is a pure function of (seed, iteration): record order is
reshuffled per epoch from a derived stream, each record's puzzle for a
given epoch comes from its own derived stream, and labels resample every
epoch. Resuming from a checkpoint therefore continues the exact run that
produced it.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensornet as tn
from .cfn import CfnConfig, CfnModel
from .imagepipe import PuzzleDataset, tiles_to_batch
from .permset import PermutationSet
from .seeding import DOMAIN_ORDER, derive_rng

CHECKPOINT_MAGIC = b"CFNJ"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; training aborts rather than clipping."""


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    learning_rate: float = 0.01
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0
    lr_schedule: tuple[int, ...] = ()  # iterations at which the rate drops by 10x
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_every: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError(f"batch_size and iterations must be >= 1, got {self.batch_size}, {self.iterations}")
        if self.momentum < 0:
            raise ValueError(f"momentum must be >= 0, got {self.momentum}")

    def lr_at(self, iteration: int) -> float:
        drops = sum(1 for step in self.lr_schedule if iteration >= step)
        return self.learning_rate * (0.1**drops)


@dataclass
class MetricsRow:
    iteration: int
    loss: float
    acc: float
    seconds: float


class MetricsLog:
    """Per-interval training telemetry; iterations are strictly increasing.

    ``seconds`` is wall time and is informational only; the deterministic
    content is (iteration, loss, acc), exposed via ``core()``.
    """

    def __init__(self, rows: list[MetricsRow] | None = None):
        self.rows: list[MetricsRow] = []
        for row in rows or []:
            self.append(row)

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ValueError(f"iterations must strictly increase: {row.iteration} after {self.rows[-1].iteration}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def core(self) -> list[tuple[int, float, float]]:
        return [(r.iteration, r.loss, r.acc) for r in self.rows]

    def to_csv(self, path: str | Path) -> None:
        lines = ["iter,loss,acc,seconds"]
        lines += [f"{r.iteration},{r.loss:.6f},{r.acc:.6f},{r.seconds:.3f}" for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricsLog":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != "iter,loss,acc,seconds":
            raise ValueError(f"{path} is not a metrics CSV")
        log = cls()
        for ln in lines[1:]:
            if not ln.strip():
                continue
            it, loss, acc, seconds = ln.split(",")
            log.append(MetricsRow(int(it), float(loss), float(acc), float(seconds)))
        return log


@dataclass
class Checkpoint:
    config: CfnConfig
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray]
    iteration: int
    rng_state: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Binary layout: magic, version u32, u64-length JSON header, raw little-endian
    tensor payload in header order, CRC-32 trailer over everything before it."""
    tensors = []
    payload = bytearray()
    for group, store in (("params", ckpt.params), ("velocities", ckpt.velocities)):
        for name, arr in store.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            buf = le.tobytes()
            tensors.append(
                {"group": group, "name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "nbytes": len(buf)}
            )
            payload += buf
    header = json.dumps(
        {
            "config": ckpt.config.to_dict(),
            "iteration": ckpt.iteration,
            "rng_state": ckpt.rng_state,
            "tensors": tensors,
        }
    ).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + struct.pack("<Q", len(header)) + header + payload
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: checksum failure")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header_end = 16 + header_len
    if header_end > len(body):
        raise CheckpointError(f"{path}: truncated header")
    meta = json.loads(body[16:header_end].decode("utf-8"))
    stores: dict[str, dict[str, np.ndarray]] = {"params": {}, "velocities": {}}
    offset = header_end
    for entry in meta["tensors"]:
        end = offset + entry["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: truncated tensor payload")
        arr = np.frombuffer(body[offset:end], dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        stores[entry["group"]][entry["name"]] = arr.astype(entry["dtype"]).reshape(entry["shape"])
        offset = end
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return Checkpoint(
        config=CfnConfig.from_dict(meta["config"]),
        params=stores["params"],
        velocities=stores["velocities"],
        iteration=meta["iteration"],
        rng_state=meta["rng_state"],
    )


def checkpoint_from_model(model: CfnModel, optimizer: tn.SGD, iteration: int, rng_state: dict) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        params={k: t.data.copy() for k, t in model.parameters().items()},
        velocities=optimizer.state_dict(),
        iteration=iteration,
        rng_state=dict(rng_state),
    )


def model_from_checkpoint(ckpt: Checkpoint, seed: int = 0, dtype=np.float32) -> CfnModel:
    model = CfnModel(ckpt.config, seed=seed, dtype=dtype)
    load_params(model, ckpt.params)
    return model


def load_params(model: CfnModel, params: Mapping[str, np.ndarray]) -> None:
    own = model.parameters()
    if set(own) != set(params):
        raise CheckpointError(f"parameter names do not match: {sorted(set(own) ^ set(params))}")
    for key, t in own.items():
        if params[key].shape != t.data.shape:
            raise CheckpointError(f"shape mismatch for {key}: {params[key].shape} vs {t.data.shape}")
        t.data[...] = params[key]


def puzzles_per_image(iterations: int, batch_size: int, dataset_size: int) -> float:
    """Average number of puzzles each image contributes over a training run."""
    if iterations <= 0 or batch_size <= 0:
        raise ValueError(f"iterations and batch_size must be positive, got {iterations}, {batch_size}")
    if dataset_size <= 0:
        raise ValueError(f"dataset_size must be positive, got {dataset_size}")
    return iterations * batch_size / dataset_size


def _batch_indices(n_records: int, start_sample: int, batch_size: int, seed: int, order_cache: dict):
    """Record indices and epochs for one batch of the deterministic stream."""
    out = []
    for s in range(start_sample, start_sample + batch_size):
        epoch, pos = divmod(s, n_records)
        if epoch not in order_cache:
            order_cache[epoch] = derive_rng(seed, DOMAIN_ORDER, epoch).permutation(n_records)
        out.append((int(order_cache[epoch][pos]), epoch))
    return out


def train(
    model: CfnModel,
    dataset: PuzzleDataset,
    pset: PermutationSet,
    cfg: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, MetricsLog]:
    """Run SGD until cfg.iterations; returns the final checkpoint and metrics.

    With ``resume``, parameters and optimizer state are restored and the
    loop continues from the stored iteration, reproducing the batch stream
    of an uninterrupted run.
    """
    if dataset.config.grid != pset.grid:
        raise ValueError(f"dataset grid {dataset.config.grid} does not match permutation set grid {pset.grid}")
    if model.config.num_branches != pset.grid * pset.grid:
        raise ValueError(f"model has {model.config.num_branches} branches for a {pset.grid}x{pset.grid} grid")
    if model.config.num_classes != len(pset):
        raise ValueError(f"model expects {model.config.num_classes} classes, permutation set has {len(pset)}")
    if model.config.tile_side != dataset.config.tile:
        raise ValueError(f"model tile {model.config.tile_side} does not match pipeline tile {dataset.config.tile}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")

    optimizer = tn.SGD(model.parameters(), lr=cfg.lr_at(1), momentum=cfg.momentum)
    start_iter = 0
    if resume is not None:
        if resume.config != model.config:
            raise CheckpointError("checkpoint config does not match the model")
        load_params(model, resume.params)
        optimizer.load_state_dict(resume.velocities)
        start_iter = resume.iteration

    metrics = MetricsLog()
    order_cache: dict[int, np.ndarray] = {}
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    rng_state = {"train_seed": cfg.seed, "batch_size": cfg.batch_size}
    t0 = time.perf_counter()

    for it in range(start_iter + 1, cfg.iterations + 1):
        picks = _batch_indices(len(dataset), (it - 1) * cfg.batch_size, cfg.batch_size, cfg.seed, order_cache)
        samples = [dataset.sample(idx, pset, cfg.seed, epoch) for idx, epoch in picks]
        tiles, labels = tiles_to_batch(samples)

        logits = model.forward(tiles)
        loss, probs = tn.softmax_cross_entropy(logits, labels)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss} at iteration {it} (lr={cfg.lr_at(it)})")
        acc = float((logits.argmax(axis=1) == labels).mean())

        model.zero_grad()
        model.backward(tn.softmax_cross_entropy_backward(probs, labels))
        optimizer.lr = cfg.lr_at(it)
        optimizer.step()

        if it % cfg.log_every == 0 or it == cfg.iterations:
            metrics.append(MetricsRow(it, loss, acc, time.perf_counter() - t0))
        if ckpt_dir is not None and cfg.checkpoint_every > 0 and it % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_from_model(model, optimizer, it, rng_state), ckpt_dir / f"ckpt_{it:08d}.cfnj")

    final = checkpoint_from_model(model, optimizer, cfg.iterations, rng_state)
    if ckpt_dir is not None:
        save_checkpoint(final, ckpt_dir / "ckpt_final.cfnj")
    return final, metrics


def fit_fixed_batch(
    model: CfnModel, tiles: np.ndarray, labels: np.ndarray, iterations: int, learning_rate: float, momentum: float = 0.9
) -> list[float]:
    """Optimization sanity helper: repeat SGD on one frozen batch; returns losses."""
    optimizer = tn.SGD(model.parameters(), lr=learning_rate, momentum=momentum)
    losses = []
    for _ in range(iterations):
        logits = model.forward(tiles)
        loss, probs = tn.softmax_cross_entropy(logits, labels)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss} on fixed batch")
        losses.append(loss)
        model.zero_grad()
        model.backward(tn.softmax_cross_entropy_backward(probs, labels))
        optimizer.step()
    return losses

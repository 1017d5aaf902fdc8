"""Feature-quality evaluation: puzzle accuracy, layer-locked transfer,
activation ranking and normalized-inner-product retrieval.

All evaluation is read-only over a frozen model; the transfer protocol
builds its own classifier graph, copies the locked prefix from the source
model and verifies bit-exactness of that prefix after retraining.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensornet as tn
from .cfn import CfnModel
from .imagepipe import PuzzleDataset, tiles_to_batch
from .permset import PermutationSet
from .seeding import DOMAIN_INIT, DOMAIN_ORDER, derive_rng
from .tensornet import Flatten, Linear, NetworkGraph


@dataclass(frozen=True)
class LockSpec:
    """Freeze conv blocks 1..lock_upto; 0 locks nothing. With reinit_rest the
    unlocked layers restart from fresh weights, otherwise they fine-tune."""

    lock_upto: int
    reinit_rest: bool = True

    def __post_init__(self):
        if self.lock_upto < 0:
            raise ValueError(f"lock_upto must be >= 0, got {self.lock_upto}")


@dataclass(frozen=True)
class TransferConfig:
    iterations: int = 300
    learning_rate: float = 0.05
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0
    init: str = "gaussian"  # or "detection_fill"

    def __post_init__(self):
        if self.init not in ("gaussian", "detection_fill"):
            raise ValueError(f"unknown init policy {self.init!r}")


@dataclass
class TransferResult:
    accuracy: float
    graph: NetworkGraph
    locked_keys: tuple[str, ...]


@dataclass
class FeatureIndex:
    """Unit-norm feature vectors addressable by item id, for retrieval."""

    ids: list[str]
    vectors: np.ndarray
    labels: list | None = None

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.ids) != self.vectors.shape[0]:
            raise ValueError(f"need one vector per id: {len(self.ids)} ids, vectors {self.vectors.shape}")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("index vectors must be unit-norm; use FeatureIndex.from_features")
        if self.labels is not None and len(self.labels) != len(self.ids):
            raise ValueError("labels length does not match ids")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_features(cls, ids: Sequence[str], features: np.ndarray, labels: Sequence | None = None) -> "FeatureIndex":
        features = np.asarray(features, dtype=np.float64)
        norms = np.linalg.norm(features, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("cannot normalize a zero feature vector")
        return cls(list(ids), features / norms, list(labels) if labels is not None else None)


def puzzle_accuracy(
    model: CfnModel,
    dataset: PuzzleDataset,
    pset: PermutationSet,
    n_samples: int,
    seed: int = 0,
    batch_size: int = 64,
) -> float:
    """Fraction of freshly drawn puzzles whose argmax logit hits the label.

    Pass a seed disjoint from training so the evaluated puzzles are held out.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    hits = 0
    for start in range(0, n_samples, batch_size):
        count = min(batch_size, n_samples - start)
        samples = [dataset.sample((start + k) % len(dataset), pset, seed, (start + k) // len(dataset)) for k in range(count)]
        tiles, labels = tiles_to_batch(samples)
        logits = model.forward(tiles)
        hits += int((logits.argmax(axis=1) == labels).sum())
    return hits / n_samples


def _locked_boundary(branch: NetworkGraph, lock_upto: int) -> int:
    """Index of the first layer NOT covered by locking conv1..conv_lock_upto."""
    conv_idx = branch.conv_layer_indices()
    if lock_upto > len(conv_idx):
        raise ValueError(f"lock_upto {lock_upto} exceeds {len(conv_idx)} conv layers")
    if lock_upto == 0:
        return 0
    if lock_upto < len(conv_idx):
        return conv_idx[lock_upto]
    # everything through the conv stack: lock up to the flatten bottleneck
    for i, spec in enumerate(branch.specs):
        if isinstance(spec, Flatten):
            return i
    return len(branch.specs)


def detection_fill_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Gaussian fill for repurposed fully connected stacks: mean 0.1, std 0.001."""
    return rng.normal(0.1, 0.001, shape)


def transfer_lock_and_retrain(
    model: CfnModel,
    lock: LockSpec,
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    cfg: TransferConfig = TransferConfig(),
) -> TransferResult:
    """Retrain one branch as a classifier with its first conv blocks frozen.

    The classifier is the branch stack plus a fresh linear head. Locked
    layers copy the source model's weights and are excluded from the
    optimizer; unlocked layers start fresh (or copy, per the lock spec).
    Returns held-out accuracy plus the trained graph; raises if a locked
    parameter changed.
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    n_classes = int(max(train_y.max(), test_y.max())) + 1
    if n_classes < 2:
        raise ValueError("transfer task needs at least 2 classes")

    branch = model.branch
    boundary = _locked_boundary(branch, lock.lock_upto)
    specs = branch.specs + (Linear(n_classes),)
    graph = NetworkGraph(
        branch.input_shape,
        specs,
        rng=derive_rng(cfg.seed, DOMAIN_INIT, 100),
        dtype=branch.dtype,
        output_init_std=0.01,
    )
    if cfg.init == "detection_fill":
        fill_rng = derive_rng(cfg.seed, DOMAIN_INIT, 101)
        for i in range(boundary, len(specs)):
            key = f"{i}.weight"
            if key in graph.params:
                t = graph.params[key]
                t.data[...] = detection_fill_init(fill_rng, t.data.shape).astype(t.data.dtype)

    copy_upto = boundary if lock.reinit_rest else len(branch.specs)
    for i in range(copy_upto):
        for suffix in ("weight", "bias"):
            key = f"{i}.{suffix}"
            if key in graph.params:
                graph.params[key].data[...] = branch.params[key].data

    locked_keys = tuple(k for k in graph.params if int(k.split(".")[0]) < boundary)
    locked_before = {k: graph.params[k].data.copy() for k in locked_keys}
    trainable = {k: t for k, t in graph.params.items() if k not in locked_keys}

    optimizer = tn.SGD(trainable, lr=cfg.learning_rate, momentum=cfg.momentum)
    order_rng = derive_rng(cfg.seed, DOMAIN_ORDER, 100)
    n = train_x.shape[0]
    order = order_rng.permutation(n)
    pos = 0
    for _ in range(cfg.iterations):
        if pos + cfg.batch_size > n:
            order = order_rng.permutation(n)
            pos = 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        logits, caches = graph.forward(train_x[idx])
        _, probs = tn.softmax_cross_entropy(logits, train_y[idx])
        graph.zero_grad()
        graph.backward(tn.softmax_cross_entropy_backward(probs, train_y[idx]), caches)
        optimizer.step()

    for key in locked_keys:
        if not np.array_equal(graph.params[key].data, locked_before[key]):
            raise AssertionError(f"locked parameter {key} changed during retraining")

    logits, _ = graph.forward(test_x)
    accuracy = float((logits.argmax(axis=1) == test_y).mean())
    return TransferResult(accuracy=accuracy, graph=graph, locked_keys=locked_keys)


def extract_features(model: CfnModel, images: np.ndarray, layer: int | None = None) -> np.ndarray:
    """Branch features for (N, C, t, t) inputs, flattened to (N, D).

    By default features come from the last pre-bottleneck representation
    (the flatten layer at the top of the conv stack); pass ``layer`` to
    read any other depth.
    """
    branch = model.branch
    if layer is None:
        flat = [i for i, s in enumerate(branch.specs) if isinstance(s, Flatten)]
        layer = flat[-1] if flat else len(branch.specs) - 1
    if not 0 <= layer < len(branch.specs):
        raise ValueError(f"layer {layer} out of range for a {len(branch.specs)}-layer branch")
    out, _ = branch.forward(np.asarray(images, dtype=branch.dtype), upto=layer + 1)
    return out.reshape(out.shape[0], -1)


def top_activations(
    model: CfnModel | NetworkGraph,
    layer: int,
    channel: int,
    patches: np.ndarray,
    source_ids: Sequence[str],
    k: int,
) -> list[tuple[int, float]]:
    """Rank patches by mean absolute response of one channel at one layer.

    Returns at most one patch (the best) per source image, as (patch index,
    score) pairs, highest first; score ties break toward the lower patch
    index. ``k`` may not exceed the number of distinct source images.
    """
    branch = model.branch if isinstance(model, CfnModel) else model
    if not 0 <= layer < len(branch.specs):
        raise ValueError(f"layer {layer} out of range")
    if len(source_ids) != patches.shape[0]:
        raise ValueError(f"{patches.shape[0]} patches but {len(source_ids)} source ids")
    if k > len(set(source_ids)):
        raise ValueError(f"k={k} exceeds {len(set(source_ids))} distinct source images")
    out, _ = branch.forward(np.asarray(patches, dtype=branch.dtype), upto=layer + 1)
    if out.ndim < 2 or channel >= out.shape[1]:
        raise ValueError(f"channel {channel} out of range for layer output {out.shape}")
    responses = np.abs(out[:, channel]).reshape(out.shape[0], -1)
    scores = responses.mean(axis=1)
    order = np.lexsort((np.arange(len(scores)), -scores))
    picked: list[tuple[int, float]] = []
    seen: set = set()
    for idx in order:
        src = source_ids[idx]
        if src in seen:
            continue
        seen.add(src)
        picked.append((int(idx), float(scores[idx])))
        if len(picked) == k:
            break
    return picked


def retrieve(query: np.ndarray, index: FeatureIndex, k: int) -> list[tuple[str, float]]:
    """Top-k index items by inner product with the normalized query."""
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.vectors.shape[1]:
        raise ValueError(f"query dimension {query.shape[0]} does not match index {index.vectors.shape[1]}")
    if not 1 <= k <= len(index):
        raise ValueError(f"k must be in 1..{len(index)}, got {k}")
    norm = np.linalg.norm(query)
    if norm == 0:
        raise ValueError("cannot normalize a zero query")
    sims = index.vectors @ (query / norm)
    ranked = sorted(range(len(index)), key=lambda i: (-sims[i], index.ids[i]))
    return [(index.ids[i], float(sims[i])) for i in ranked[:k]]


def precision_recall(ranked_labels: Sequence, query_label) -> list[tuple[float, float]]:
    """(recall, precision) at each rank holding a relevant item."""
    relevant = [lbl == query_label for lbl in ranked_labels]
    total = sum(relevant)
    if total == 0:
        raise ValueError("no relevant items in the ranking")
    points = []
    hits = 0
    for rank, rel in enumerate(relevant, start=1):
        if rel:
            hits += 1
            points.append((hits / total, hits / rank))
    return points


def pr_to_csv(points: Sequence[tuple[float, float]], path: str | Path) -> None:
    lines = ["recall,precision"] + [f"{r:.6f},{p:.6f}" for r, p in points]
    Path(path).write_text("\n".join(lines) + "\n")


def ranked_to_text(ranked: Sequence[tuple[str, float]], path: str | Path) -> None:
    Path(path).write_text("".join(f"{item} {sim:.6f}\n" for item, sim in ranked))

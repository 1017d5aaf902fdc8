"""Context-free network: nine weight-shared tile branches and a small head.

Every branch runs the same ``NetworkGraph`` instance, so branch weights
exist exactly once; the branch outputs are concatenated in raster order
of the puzzle positions and fed through two fully connected head layers
to logits over the permutation labels. Backward accumulates the branch
gradient as the sum of the per-branch contributions.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensornet as tn
from .seeding import DOMAIN_INIT, derive_rng
from .tensornet import Conv, Flatten, GraphError, Linear, MaxPool, NetworkGraph, Relu


@dataclass(frozen=True)
class CfnConfig:
    """Shapes of one branch and the head.

    ``branch`` must end in the branch bottleneck: Flatten, Linear(fc6),
    Relu. The head is Linear(fc7) -> Relu -> Linear(num_classes).
    """

    tile_side: int
    branch: tuple[tn.LayerSpec, ...]
    fc7_width: int
    num_classes: int
    num_branches: int = 9
    in_channels: int = 3
    init_std: float | None = None  # None: fan-in-scaled Gaussian init

    def __post_init__(self):
        if self.num_branches < 1:
            raise GraphError(f"num_branches must be >= 1, got {self.num_branches}")
        if self.num_classes < 2:
            raise GraphError(f"num_classes must be >= 2, got {self.num_classes}")
        linears = [s for s in self.branch if isinstance(s, Linear)]
        if not linears:
            raise GraphError("branch must end in a Linear bottleneck")
        # raises GraphError if the branch does not chain from the tile input
        tn.infer_shapes(self.input_shape, self.branch)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.tile_side, self.tile_side)

    @property
    def fc6_width(self) -> int:
        return [s for s in self.branch if isinstance(s, Linear)][-1].out_features

    @property
    def first_conv_stride(self) -> int:
        return [s for s in self.branch if isinstance(s, Conv)][0].stride

    @property
    def head_specs(self) -> tuple[tn.LayerSpec, ...]:
        return (Linear(self.fc7_width), Relu(), Linear(self.num_classes))

    def to_dict(self) -> dict:
        return {
            "tile_side": self.tile_side,
            "branch": [tn.spec_to_dict(s) for s in self.branch],
            "fc7_width": self.fc7_width,
            "num_classes": self.num_classes,
            "num_branches": self.num_branches,
            "in_channels": self.in_channels,
            "init_std": self.init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CfnConfig":
        d = dict(d)
        d["branch"] = tuple(tn.spec_from_dict(s) for s in d["branch"])
        return cls(**d)


def toy_config(
    num_classes: int = 8,
    tile_side: int = 32,
    fc6_width: int = 64,
    fc7_width: int = 128,
    num_branches: int = 9,
    in_channels: int = 3,
) -> CfnConfig:
    """Small branch that trains on a CPU in minutes; 32px tiles by default."""
    branch = (
        Conv(8, kernel=5, stride=2, padding=2),
        Relu(),
        MaxPool(2, 2),
        Conv(16, kernel=3, stride=1, padding=1),
        Relu(),
        MaxPool(2, 2),
        Flatten(),
        Linear(fc6_width),
        Relu(),
    )
    return CfnConfig(
        tile_side=tile_side,
        branch=branch,
        fc7_width=fc7_width,
        num_classes=num_classes,
        num_branches=num_branches,
        in_channels=in_channels,
    )


def full_config(num_classes: int = 1000) -> CfnConfig:
    """Reference branch at full published dimensions for 64px tiles.

    Five AlexNet-family conv layers (96/256/384/384/256 channels, groups 2
    on conv2/4/5) with the first conv at stride 2, reduced to a 4x4x256 map
    feeding a 512-wide bottleneck; head is 4096 wide. Pooling uses 2x2/2
    windows and conv1 pads by 5 so the chain lands exactly on 4x4.
    """
    branch = (
        Conv(96, kernel=11, stride=2, padding=5),
        Relu(),
        MaxPool(2, 2),
        Conv(256, kernel=5, stride=1, padding=2, groups=2),
        Relu(),
        MaxPool(2, 2),
        Conv(384, kernel=3, stride=1, padding=1),
        Relu(),
        Conv(384, kernel=3, stride=1, padding=1, groups=2),
        Relu(),
        Conv(256, kernel=3, stride=1, padding=1, groups=2),
        Relu(),
        MaxPool(2, 2),
        Flatten(),
        Linear(512),
        Relu(),
    )
    return CfnConfig(tile_side=64, branch=branch, fc7_width=4096, num_classes=num_classes)


def alexnet_parameter_count(num_classes: int = 1000) -> int:
    """Parameter total of the classic 227px single-branch reference network."""
    specs = (
        Conv(96, kernel=11, stride=4),
        Relu(),
        MaxPool(3, 2),
        Conv(256, kernel=5, stride=1, padding=2, groups=2),
        Relu(),
        MaxPool(3, 2),
        Conv(384, kernel=3, stride=1, padding=1),
        Relu(),
        Conv(384, kernel=3, stride=1, padding=1, groups=2),
        Relu(),
        Conv(256, kernel=3, stride=1, padding=1, groups=2),
        Relu(),
        MaxPool(3, 2),
        Flatten(),
        Linear(4096),
        Relu(),
        Linear(4096),
        Relu(),
        Linear(num_classes),
    )
    _, total = tn.count_parameters((3, 227, 227), specs)
    return total


class CfnModel:
    """Siamese-ennead assembly over one shared branch graph plus a head."""

    def __init__(self, config: CfnConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        branch_rng = derive_rng(seed, DOMAIN_INIT, 0)
        head_rng = derive_rng(seed, DOMAIN_INIT, 1)
        self.branch = NetworkGraph(
            config.input_shape, config.branch, rng=branch_rng, dtype=self.dtype, init_std=config.init_std
        )
        head_in = config.num_branches * config.fc6_width
        # near-zero logits at init: a fresh model predicts the uniform distribution
        self.head = NetworkGraph(
            (head_in,),
            config.head_specs,
            rng=head_rng,
            dtype=self.dtype,
            init_std=config.init_std,
            output_init_std=0.01,
        )
        self._fwd_state = None

    @property
    def num_branches(self) -> int:
        return self.config.num_branches

    def parameters(self) -> OrderedDict[str, tn.Tensor]:
        out: OrderedDict[str, tn.Tensor] = OrderedDict()
        for key, t in self.branch.parameters().items():
            out[f"branch.{key}"] = t
        for key, t in self.head.parameters().items():
            out[f"head.{key}"] = t
        return out

    def zero_grad(self) -> None:
        self.branch.zero_grad()
        self.head.zero_grad()

    def _stack_tiles(self, tiles) -> np.ndarray:
        arr = np.asarray(tiles, dtype=self.dtype)
        expected = (self.num_branches,) + self.config.input_shape
        if arr.ndim == 4:  # unbatched: (branches, C, t, t)
            arr = arr[:, None]
        if arr.ndim != 5 or arr.shape[0] != self.num_branches or arr.shape[2:] != self.config.input_shape:
            raise ValueError(f"expected tiles shaped {expected} or (branches, batch, C, t, t), got {np.shape(tiles)}")
        return arr

    def branch_features(self, tiles) -> np.ndarray:
        """Per-branch bottleneck outputs, shape (branches, batch, fc6)."""
        arr = self._stack_tiles(tiles)
        nb, batch = arr.shape[0], arr.shape[1]
        feats, _ = self.branch.forward(arr.reshape((nb * batch,) + arr.shape[2:]))
        return feats.reshape(nb, batch, -1)

    def forward(self, tiles) -> np.ndarray:
        """Logits over permutation labels, shape (batch, num_classes)."""
        arr = self._stack_tiles(tiles)
        nb, batch = arr.shape[0], arr.shape[1]
        folded = arr.reshape((nb * batch,) + arr.shape[2:])
        feats, branch_caches = self.branch.forward(folded)
        segments = [feats[i * batch : (i + 1) * batch] for i in range(nb)]
        joined, widths = tn.concat_forward(segments)
        logits, head_caches = self.head.forward(joined)
        self._fwd_state = (branch_caches, head_caches, widths, nb, batch)
        return logits

    def backward(self, grad_logits: np.ndarray) -> None:
        """Accumulate grads; the shared branch receives the sum over branches."""
        if self._fwd_state is None:
            raise RuntimeError("backward called before forward")
        branch_caches, head_caches, widths, nb, batch = self._fwd_state
        g = self.head.backward(np.asarray(grad_logits, dtype=self.dtype), head_caches)
        segments = tn.concat_backward(g, widths)
        folded = np.concatenate(segments, axis=0)
        self.branch.backward(folded, branch_caches)
        self._fwd_state = None

    def param_count(self):
        """(per-layer counts, total); the shared branch is counted once."""
        table: OrderedDict[str, int] = OrderedDict()
        branch_table, branch_total = self.branch.param_count()
        for key, n in branch_table.items():
            table[f"branch.{key}"] = n
        head_table, head_total = self.head.param_count()
        for key, n in head_table.items():
            table[f"head.{key}"] = n
        return table, branch_total + head_total


def build_cfn(config: CfnConfig, seed: int = 0, dtype=np.float32) -> CfnModel:
    return CfnModel(config, seed=seed, dtype=dtype)


def fc6_weight_count(config: CfnConfig) -> int:
    """Weight count (no bias) of the branch bottleneck linear layer."""
    shapes = [config.input_shape] + tn.infer_shapes(config.input_shape, config.branch)
    idx = max(i for i, s in enumerate(config.branch) if isinstance(s, Linear))
    return shapes[idx][0] * config.branch[idx].out_features


def fc7_weight_count(config: CfnConfig) -> int:
    """Weight count (no bias) of the first head linear layer."""
    return config.num_branches * config.fc6_width * config.fc7_width

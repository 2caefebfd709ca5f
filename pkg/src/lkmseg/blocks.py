"""Large-kernel encoder block: pixel-level and patch-level SSM mixing.

The feature map is tiled into non-overlapping sub-kernels; each tile is
flattened row-major into a sequence and mixed by a selective scan layer
(pixel-level path). A pooled representative per tile forms one global
sequence mixed the same way and broadcast back (patch-level path). Both
paths carry residual connections, so disabling them leaves the block as an
identity followed by strided downsampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import PartitionError
from .ssm import MambaLayer
from .tensor import Tensor, _as_tensor


@dataclass(frozen=True)
class KernelSpec:
    """Per-stage sub-kernel extents: (m, n) in 2D, (d, m, n) in 3D."""

    dims: tuple

    def __post_init__(self):
        if len(self.dims) not in (2, 3) or any(d < 1 for d in self.dims):
            raise PartitionError(f"bad kernel dims {self.dims}")


@dataclass(frozen=True)
class PartitionLayout:
    """Bookkeeping to undo a sub-kernel partition exactly."""

    source_spatial: tuple   # original spatial extents
    padded_spatial: tuple   # after right/bottom zero padding
    dims: tuple             # sub-kernel extents
    grid: tuple             # sub-kernel counts per axis

    @property
    def count(self) -> int:
        return int(np.prod(self.grid))

    @property
    def seq_len(self) -> int:
        return int(np.prod(self.dims))


def _layout_for(spatial, dims, allow_pad: bool) -> PartitionLayout:
    if len(spatial) != len(dims):
        raise PartitionError(f"kernel rank {len(dims)} != spatial rank {len(spatial)}")
    padded = []
    for s, d in zip(spatial, dims):
        if s % d and not allow_pad:
            raise PartitionError(f"extent {s} not divisible by kernel dim {d}")
        padded.append(-(-s // d) * d)
    grid = tuple(p // d for p, d in zip(padded, dims))
    return PartitionLayout(tuple(spatial), tuple(padded), tuple(dims), grid)


def partition_pixels(F, k: KernelSpec, allow_pad: bool = True):
    """Tile [..., C, spatial...] into flattened sub-kernel sequences.

    Returns (sequences, layout) with sequences shaped [..., C, K, L]:
    K = number of sub-kernels in row-major grid order, L = prod(kernel dims)
    flattened row-major within each tile. Non-divisible extents are
    right/bottom zero padded when allowed.
    """
    F = _as_tensor(F)
    dims = k.dims
    r = len(dims)
    if F.ndim < r + 1:
        raise PartitionError(f"rank-{F.ndim} map too small for {r}D kernels")
    prefix = F.shape[:-r]
    spatial = F.shape[-r:]
    layout = _layout_for(spatial, dims, allow_pad)

    if layout.padded_spatial != layout.source_spatial:
        pw = [(0, 0)] * len(prefix) + [
            (0, p - s) for p, s in zip(layout.padded_spatial, layout.source_spatial)]
        F = T.pad(F, pw)

    split = []
    for g, d in zip(layout.grid, dims):
        split += [g, d]
    F = T.reshape(F, prefix + tuple(split))
    np_ = len(prefix)
    grid_axes = tuple(np_ + 2 * i for i in range(r))
    tile_axes = tuple(np_ + 2 * i + 1 for i in range(r))
    F = T.permute(F, tuple(range(np_)) + grid_axes + tile_axes)
    seqs = T.reshape(F, prefix + (layout.count, layout.seq_len))
    return seqs, layout


def unpartition(seqs, layout: PartitionLayout) -> Tensor:
    """Exact inverse of partition_pixels (padding cropped away)."""
    seqs = _as_tensor(seqs)
    if seqs.shape[-2:] != (layout.count, layout.seq_len):
        raise PartitionError(
            f"sequences {seqs.shape[-2:]} inconsistent with layout "
            f"({layout.count}, {layout.seq_len})")
    prefix = seqs.shape[:-2]
    r = len(layout.dims)
    F = T.reshape(seqs, prefix + layout.grid + layout.dims)
    np_ = len(prefix)
    axes = tuple(range(np_))
    for i in range(r):
        axes += (np_ + i, np_ + r + i)
    F = T.permute(F, axes)
    F = T.reshape(F, prefix + layout.padded_spatial)
    if layout.padded_spatial != layout.source_spatial:
        key = (slice(None),) * np_ + tuple(slice(0, s) for s in layout.source_spatial)
        F = F[key]
    return F


def pool_kernels(F, k: KernelSpec, allow_pad: bool = True) -> Tensor:
    """Mean over each sub-kernel tile: [..., C, spatial] -> [..., C, grid]."""
    F = _as_tensor(F)
    dims = k.dims
    r = len(dims)
    prefix = F.shape[:-r]
    layout = _layout_for(F.shape[-r:], dims, allow_pad)
    if layout.padded_spatial != layout.source_spatial:
        pw = [(0, 0)] * len(prefix) + [
            (0, p - s) for p, s in zip(layout.padded_spatial, layout.source_spatial)]
        F = T.pad(F, pw)
    split = []
    for g, d in zip(layout.grid, dims):
        split += [g, d]
    F = T.reshape(F, prefix + tuple(split))
    np_ = len(prefix)
    tile_axes = tuple(np_ + 2 * i + 1 for i in range(r))
    return T.reduce_mean(F, axes=tile_axes)


def unpool_kernels(Z, k: KernelSpec, layout: PartitionLayout) -> Tensor:
    """Broadcast each tile representative back over its tile."""
    Z = _as_tensor(Z)
    dims = k.dims
    r = len(dims)
    prefix = Z.shape[:-r]
    if Z.shape[-r:] != layout.grid:
        raise PartitionError(f"grid {Z.shape[-r:]} != layout grid {layout.grid}")
    np_ = len(prefix)
    shape1 = prefix + tuple(x for g in layout.grid for x in (g, 1))
    target = prefix + tuple(x for g, d in zip(layout.grid, dims) for x in (g, d))
    Zp = T.expand(T.reshape(Z, shape1), target)
    F = T.reshape(Zp, prefix + layout.padded_spatial)
    if layout.padded_spatial != layout.source_spatial:
        key = (slice(None),) * np_ + tuple(slice(0, s) for s in layout.source_spatial)
        F = F[key]
    return F


@dataclass
class LMBlockConfig:
    channels: int
    kernel: KernelSpec
    use_pim: bool = True
    use_pam: bool = True
    use_bim: bool = True
    state_dim: int = 4
    pooling: str = "mean"


class LMBlock:
    """One encoder stage: PiM, PaM, then stride-2 channel-doubling conv."""

    def __init__(self, cfg: LMBlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        C = cfg.channels
        self.pim_layer = MambaLayer(C, cfg.state_dim, cfg.use_bim, rng)
        self.pam_layer = MambaLayer(C, cfg.state_dim, cfg.use_bim, rng)
        fan = C * 9
        s = 1.0 / np.sqrt(fan)
        self.down_w = T.tensor(rng.uniform(-s, s, (2 * C, C, 3, 3)),
                               requires_grad=True)
        self.down_scale = T.tensor(np.ones(2 * C), requires_grad=True)

    def named_params(self, prefix: str = "") -> dict:
        out = {prefix + "down_w": self.down_w, prefix + "down_scale": self.down_scale}
        out.update(self.pim_layer.named_params(prefix + "pim."))
        out.update(self.pam_layer.named_params(prefix + "pam."))
        return out

    def pim_forward(self, F: Tensor) -> Tensor:
        """Per-sub-kernel scan with residual; [B, C, H, W] -> same shape."""
        seqs, layout = partition_pixels(F, self.cfg.kernel)   # [B, C, K, L]
        nd = seqs.ndim
        perm = tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3)
        seqs = T.permute(seqs, perm)                          # [B, K, L, C]
        y = self.pim_layer.forward(seqs)
        inv = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
        y = T.permute(y, inv)                                 # [B, C, K, L]
        return T.add(F, unpartition(y, layout))

    def pam_forward(self, F: Tensor) -> Tensor:
        """Pool -> global scan over representatives -> unpool, with residual."""
        k = self.cfg.kernel
        r = len(k.dims)
        layout = _layout_for(F.shape[-r:], k.dims, True)
        Z = pool_kernels(F, k)                                # [B, C, grid...]
        prefix = Z.shape[:-r]
        nd = len(prefix) + 1
        zf = T.reshape(Z, prefix + (layout.count,))           # [B, C, G]
        perm = tuple(range(nd - 2)) + (nd - 1, nd - 2)
        seq = T.permute(zf, perm)                             # [B, G, C]
        y = self.pam_layer.forward(seq)
        y = T.permute(y, perm)                                # [B, C, G]
        y = T.reshape(y, prefix + layout.grid)
        return T.add(F, unpool_kernels(y, k, layout))

    def forward(self, F: Tensor):
        """Returns (pre-downsample map for the skip path, downsampled map)."""
        out = F
        if self.cfg.use_pim:
            out = self.pim_forward(out)
        if self.cfg.use_pam:
            out = self.pam_forward(out)
        down = T.conv2d(out, self.down_w, stride=2, padding=1)
        down = T.mul(down, T.reshape(self.down_scale, (self.down_scale.size, 1, 1)))
        return out, down

"""Multi-resolution glimpses over sparse occupancy grids.

A glimpse at location ``loc`` (normalized to [-1, 1] per axis) is a stack of
``G`` patches. Patch ``k`` (1-based) spans ``k * g_s`` cells per axis around
the same centre and is average-pooled over ``k``-sized blocks back down to
``g_s`` cells per axis, so every patch has ``g_s ** ndim`` values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel import VoxelTensor4D


@dataclass(frozen=True)
class GlimpseConfig:
    size: int = 8  # side of the finest patch, in cells
    patches: int = 5

    def __post_init__(self):
        if self.size < 2 or self.size % 2:
            raise ValueError(f"glimpse size must be even and >= 2, got {self.size}")
        if self.patches < 1:
            raise ValueError(f"need at least one glimpse patch, got {self.patches}")

    def length(self, ndim: int) -> int:
        return self.patches * self.size ** ndim


@dataclass
class SparseGrid:
    """Binary occupancy on an ``ndim``-axis grid, stored as unique integer coordinates."""

    coords: np.ndarray  # (n, ndim) int64, kept sorted along axis 0
    shape: tuple[int, ...]

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, len(self.shape))
        if len(c) > 1 and np.any(np.diff(c[:, 0]) < 0):
            c = c[np.argsort(c[:, 0], kind="stable")]
        self.coords = c

    def rows_in(self, lo: int, hi: int) -> np.ndarray:
        """Coordinates whose first axis lies in [lo, hi)."""
        a, b = np.searchsorted(self.coords[:, 0], [lo, hi])
        return self.coords[a:b]

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.float64)
        if len(self.coords):
            out[tuple(self.coords.T)] = 1.0
        return out


def grid_view(tensor: VoxelTensor4D, dims: int = 4, frame: int | None = None) -> SparseGrid:
    """Axis layout used by the agent for each input dimensionality.

    dims=4: (x, y, z, t) over the whole video.
    dims=3: (x, y, z) of one frame.
    dims=2: (x, y) silhouette of one frame, occupancy projected along z.
    """
    if dims == 4:
        return SparseGrid(tensor.coords, tensor.shape)
    if frame is None:
        raise ValueError("3D and 2D views need a frame index")
    pts = tensor.frame(frame)
    if dims == 3:
        return SparseGrid(pts, tensor.dims)
    if dims == 2:
        xy = np.unique(pts[:, :2], axis=0) if len(pts) else np.zeros((0, 2), dtype=np.int64)
        return SparseGrid(xy, tensor.dims[:2])
    raise ValueError(f"dims must be 2, 3 or 4, got {dims}")


def denormalize(loc: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Map [-1, 1] per axis linearly onto [0, n - 1], rounding half up."""
    loc = np.clip(np.asarray(loc, dtype=np.float64), -1.0, 1.0)
    top = np.asarray(shape, dtype=np.float64) - 1.0
    return np.floor((loc + 1.0) * 0.5 * top + 0.5).astype(np.int64)


def normalize(center: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    top = np.maximum(np.asarray(shape, dtype=np.float64) - 1.0, 1.0)
    return np.asarray(center, dtype=np.float64) / top * 2.0 - 1.0


def extract(grid: SparseGrid, loc: np.ndarray, cfg: GlimpseConfig = GlimpseConfig()) -> np.ndarray:
    """Flat glimpse of length ``cfg.patches * cfg.size ** grid.ndim``.

    Cells outside the grid count as empty. Work is proportional to the number
    of occupied cells inside the largest window, never to window volume.
    """
    nd = grid.ndim
    gs = cfg.size
    center = denormalize(loc, grid.shape)
    out = np.zeros((cfg.patches, gs ** nd))
    h = gs // 2
    half = cfg.patches * h
    rel = grid.rows_in(center[0] - half, center[0] + half) - center
    if not len(rel):
        return out.reshape(-1)
    rel = rel.astype(np.int32)
    # patch k covers offsets [-k*h, k*h) per axis; find each point's smallest k
    reach = (np.abs(2 * rel + 1).max(axis=1) + 1) // 2
    kmin = (reach + h - 1) // h
    keep = kmin <= cfg.patches
    rel, kmin = rel[keep], kmin[keep]
    strides = (gs ** np.arange(nd - 1, -1, -1)).astype(np.int32)
    for k in range(1, cfg.patches + 1):
        local = (rel if k == cfg.patches else rel[kmin <= k]) + k * h
        cells = (local // k) @ strides
        counts = np.bincount(cells, minlength=gs ** nd)
        out[k - 1] = counts / float(k ** nd)
    return out.reshape(-1)


def extract_dense(dense: np.ndarray, loc: np.ndarray, cfg: GlimpseConfig = GlimpseConfig()) -> np.ndarray:
    """Reference glimpse built by materializing every window and averaging k-blocks.

    Slow and memory-hungry; meant for checking ``extract`` on small grids.
    """
    nd = dense.ndim
    gs = cfg.size
    center = denormalize(loc, dense.shape)
    patches = []
    for k in range(1, cfg.patches + 1):
        side = k * gs
        lo = center - side // 2
        window = np.zeros((side,) * nd)
        src, dst = [], []
        for a in range(nd):
            s0, s1 = max(lo[a], 0), min(lo[a] + side, dense.shape[a])
            if s1 <= s0:
                break
            src.append(slice(s0, s1))
            dst.append(slice(s0 - lo[a], s1 - lo[a]))
        else:
            window[tuple(dst)] = dense[tuple(src)]
        blocks = window.reshape(sum(((gs, k) for _ in range(nd)), ()))
        pooled = blocks.mean(axis=tuple(range(1, 2 * nd, 2)))
        patches.append(pooled.reshape(-1))
    return np.concatenate(patches)

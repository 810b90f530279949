"""Depth frames -> metric point clouds -> sparse 4D occupancy tensors."""

from __future__ import annotations

import glob
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

GRID_DIMS = (250, 100, 200)
# metres per cell along x, y, z (z cells are 10 mm)
CELL_SIZE = (0.01, 0.01, 0.01)


class VoxelError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise VoxelError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass
class DepthFrame:
    """One depth image; ``values`` holds millimetres, 0 marks an invalid pixel."""

    values: np.ndarray  # (height, width) uint16 or integer-valued array
    index: int = 0

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class VoxelTensor4D:
    """Sparse binary occupancy over (x, y, z, frame).

    ``coords`` holds one row ``(x, y, z, t)`` per occupied cell, without
    duplicates and sorted lexicographically by (t, x, y, z).
    """

    coords: np.ndarray
    frames: int
    dims: tuple[int, int, int] = GRID_DIMS
    dropped: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise VoxelError("a voxel tensor needs at least one frame")
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 4)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (*self.dims, self.frames)

    def __len__(self) -> int:
        return len(self.coords)

    def dense(self) -> np.ndarray:
        """Dense (x, y, z, t) uint8 array. Only sensible for small grids."""
        out = np.zeros(self.shape, dtype=np.uint8)
        out[tuple(self.coords.T)] = 1
        return out

    def frame(self, t: int) -> np.ndarray:
        """Occupied (x, y, z) cells of frame ``t``."""
        return self.coords[self.coords[:, 3] == t, :3]


@dataclass
class LabeledSequence:
    """A voxelized sequence plus its 0-based class index.

    ``points`` keeps the metric per-frame clouds so training can re-augment
    and re-voxelize every epoch.
    """

    tensor: VoxelTensor4D
    label: int
    sequence_id: str
    points: list[np.ndarray] = field(default_factory=list, repr=False)


# ---------------------------------------------------------------- geometry


def backproject(frame: DepthFrame, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole backprojection of every valid pixel to metric (x, y, z), shape (n, 3)."""
    d = np.asarray(frame.values)
    v, u = np.nonzero(d > 0)
    z = d[v, u].astype(np.float64) / 1000.0
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return np.column_stack([x, y, z])


def project(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Inverse of ``backproject``: rows of (u, v, depth_mm)."""
    p = np.asarray(points, dtype=np.float64)
    z = p[:, 2]
    u = p[:, 0] * intr.fx / z + intr.cx
    v = p[:, 1] * intr.fy / z + intr.cy
    return np.column_stack([u, v, z * 1000.0])


def sequence_centroid(points: list[np.ndarray]) -> np.ndarray:
    nonempty = [p for p in points if len(p)]
    if not nonempty:
        return np.zeros(3)
    return np.concatenate(nonempty).mean(axis=0)


def voxelize(
    points: list[np.ndarray],
    dims: tuple[int, int, int] = GRID_DIMS,
    origin: np.ndarray | None = None,
    cell_size: tuple[float, float, float] = CELL_SIZE,
) -> VoxelTensor4D:
    """Bin per-frame metric clouds into a binary occupancy tensor.

    With ``origin=None`` the sequence centroid lands on cell ``dims // 2``;
    otherwise ``origin`` is the metric position of cell (0, 0, 0).
    Points outside the grid are dropped and counted in ``.dropped``.
    """
    dims = tuple(int(d) for d in dims)
    cell = np.asarray(cell_size, dtype=np.float64)
    if origin is None:
        origin = sequence_centroid(points) - np.asarray(dims) // 2 * cell
    origin = np.asarray(origin, dtype=np.float64)
    chunks = []
    total = 0
    for t, p in enumerate(points):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        total += len(p)
        if not len(p):
            continue
        # the small epsilon keeps exact cell boundaries (0.30 m / 1 cm) from rounding down
        idx = np.floor((p - origin) / cell + 1e-9).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
        idx = idx[ok]
        chunks.append(np.column_stack([idx, np.full(len(idx), t, dtype=np.int64)]))
    coords = np.concatenate(chunks) if chunks else np.zeros((0, 4), dtype=np.int64)
    dropped = total - len(coords)
    if total and not len(coords):
        raise VoxelError(f"all {total} points fell outside the grid; check the grid origin")
    if len(coords):
        # unique over a flat (t, x, y, z) key is much faster than a row-wise unique
        X, Y, Z = dims
        key = ((coords[:, 3] * X + coords[:, 0]) * Y + coords[:, 1]) * Z + coords[:, 2]
        key = np.unique(key)
        key, z = np.divmod(key, Z)
        key, y = np.divmod(key, Y)
        t, x = np.divmod(key, X)
        coords = np.column_stack([x, y, z, t])
    if dropped:
        log.debug("voxelize dropped %d of %d points", dropped, total)
    return VoxelTensor4D(coords, frames=max(len(points), 1), dims=dims, dropped=dropped)


@dataclass(frozen=True)
class AugmentConfig:
    """Point-cloud augmentation magnitudes (metres, except ``scale``)."""

    jitter_sigma: float = 0.05
    shift: float = 0.05
    scale: tuple[float, float] = (0.8, 1.2)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(jitter_sigma=0.0, shift=0.0, scale=(1.0, 1.0))


def augment_points(points: list[np.ndarray], rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> list[np.ndarray]:
    """Jitter each point, then scale and shift the whole sequence about its centroid."""
    centre = sequence_centroid(points)
    scale = rng.uniform(*cfg.scale)
    shift = rng.uniform(-cfg.shift, cfg.shift, size=3)
    out = []
    for p in points:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        noise = rng.normal(0.0, cfg.jitter_sigma, size=p.shape) if cfg.jitter_sigma > 0 else 0.0
        out.append((p - centre) * scale + centre + shift + noise)
    return out


def augment(
    seq: LabeledSequence,
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
    origin: np.ndarray | None = None,
) -> LabeledSequence:
    """Augmented copy of ``seq``, re-voxelized from its stored point clouds."""
    if not seq.points:
        raise VoxelError(f"sequence {seq.sequence_id} carries no point clouds to augment")
    pts = augment_points(seq.points, rng, cfg)
    tensor = voxelize(pts, dims=seq.tensor.dims, origin=origin)
    return LabeledSequence(tensor, seq.label, seq.sequence_id, pts)


# ---------------------------------------------------------------- file formats


def write_pgm(path: str | os.PathLike, values: np.ndarray) -> None:
    """Write a 16-bit binary PGM (P5, maxval 65535, big-endian samples)."""
    a = np.asarray(values)
    if a.ndim != 2:
        raise VoxelError(f"PGM needs a 2D array, got shape {a.shape}")
    if a.size and (a.min() < 0 or a.max() > 65535):
        raise VoxelError("PGM samples must lie in [0, 65535]")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(a.astype(">u2").tobytes())


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise VoxelError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), off = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise VoxelError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    raster = data[off:off + n]
    if len(raster) != n:
        raise VoxelError(f"{path}: expected {n} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.uint16)


@dataclass
class ManifestEntry:
    sequence_id: str
    person_id: int
    split: str
    frame_glob: str
    intrinsics: CameraIntrinsics

    def to_dict(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "person_id": self.person_id,
            "split": self.split,
            "frame_glob": self.frame_glob,
            "intrinsics": self.intrinsics.to_dict(),
        }


def load_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Read a dataset manifest: a JSON list (or ``{"sequences": [...]}``) of sequence records."""
    raw = json.loads(Path(path).read_text())
    records = raw["sequences"] if isinstance(raw, dict) else raw
    out = []
    for r in records:
        if r["split"] not in ("train", "test"):
            raise VoxelError(f"sequence {r['sequence_id']}: split must be train or test")
        out.append(
            ManifestEntry(
                sequence_id=str(r["sequence_id"]),
                person_id=int(r["person_id"]),
                split=r["split"],
                frame_glob=r["frame_glob"],
                intrinsics=CameraIntrinsics(**r["intrinsics"]),
            )
        )
    return out


def _frame_sort_key(path: str):
    stem = Path(path).stem
    digits = "".join(ch for ch in stem if ch.isdigit())
    return (int(digits) if digits else -1, path)


def load_sequence_points(entry: ManifestEntry, root: str | os.PathLike) -> list[np.ndarray]:
    paths = sorted(glob.glob(os.path.join(str(root), entry.frame_glob)), key=_frame_sort_key)
    if not paths:
        raise VoxelError(f"sequence {entry.sequence_id}: no frames match {entry.frame_glob}")
    return [backproject(DepthFrame(read_pgm(p), i), entry.intrinsics) for i, p in enumerate(paths)]


def load_dataset(
    root: str | os.PathLike,
    split: str | None = None,
    manifest: str = "manifest.json",
    dims: tuple[int, int, int] = GRID_DIMS,
    labels: dict[int, int] | None = None,
) -> tuple[list[LabeledSequence], dict[int, int]]:
    """Ingest every sequence of ``split`` listed in ``root/manifest``.

    Person ids are mapped to contiguous 0-based class indices (sorted by id)
    unless an explicit ``labels`` map is given. Returns (sequences, labels).
    """
    entries = load_manifest(Path(root) / manifest)
    if labels is None:
        labels = {pid: i for i, pid in enumerate(sorted({e.person_id for e in entries}))}
    seqs = []
    for e in entries:
        if split is not None and e.split != split:
            continue
        if e.person_id not in labels:
            raise VoxelError(f"person {e.person_id} is not in the label map")
        pts = load_sequence_points(e, root)
        seqs.append(LabeledSequence(voxelize(pts, dims=dims), labels[e.person_id], e.sequence_id, pts))
    return seqs, labels

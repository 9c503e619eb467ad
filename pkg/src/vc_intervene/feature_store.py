"""Region-feature matrices: FMAT binary I/O, key joins and concatenation.

FMAT layout (all little-endian)::

    b"VCF1" | u32 R | u32 d | R*d float32, row-major | R * (u64 image_id, u32 region_id, u32 category)
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, IndexMismatch, TruncatedFile
from .seeding import rng_for

MAGIC = b"VCF1"
_HEADER = struct.Struct("<4sII")
INDEX_DTYPE = np.dtype([("image_id", "<u8"), ("region_id", "<u4"), ("category", "<u4")])


@dataclass(frozen=True)
class RegionFeatureSet:
    """R x d float32 features plus one (image_id, region_id, category) key per row."""

    matrix: np.ndarray
    index: np.ndarray  # structured, INDEX_DTYPE

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if m.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {m.shape}")
        idx = np.asarray(self.index)
        if idx.dtype != INDEX_DTYPE:
            idx = idx.astype(INDEX_DTYPE)
        if idx.shape != (m.shape[0],):
            raise IndexMismatch(f"index has {idx.shape[0] if idx.ndim else 0} rows, matrix has {m.shape[0]}")
        keys = idx["image_id"].astype(np.uint64) << np.uint64(32) | idx["region_id"].astype(np.uint64)
        if np.unique(keys).size != keys.size:
            raise IndexMismatch("duplicate (image_id, region_id) key")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "index", idx)

    @classmethod
    def from_arrays(cls, matrix, image_ids, region_ids, categories) -> "RegionFeatureSet":
        idx = np.zeros(len(image_ids), dtype=INDEX_DTYPE)
        idx["image_id"] = image_ids
        idx["region_id"] = region_ids
        idx["category"] = categories
        return cls(matrix, idx)

    def __len__(self):
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def categories(self) -> np.ndarray:
        return self.index["category"].astype(np.int64)

    @property
    def image_ids(self) -> np.ndarray:
        return self.index["image_id"].astype(np.int64)

    def features(self) -> np.ndarray:
        """Rows as float64 for computation."""
        return self.matrix.astype(np.float64)

    def keys(self) -> list[tuple[int, int]]:
        return list(zip(self.index["image_id"].tolist(), self.index["region_id"].tolist()))

    def with_matrix(self, matrix) -> "RegionFeatureSet":
        return RegionFeatureSet(matrix, self.index.copy())

    def take(self, rows) -> "RegionFeatureSet":
        return RegionFeatureSet(self.matrix[rows], self.index[rows])

    def equals(self, other: "RegionFeatureSet") -> bool:
        """Bitwise equality of matrix and index."""
        return (self.matrix.shape == other.matrix.shape
                and self.matrix.tobytes() == other.matrix.tobytes()
                and self.index.tobytes() == other.index.tobytes())


def to_bytes(fs: RegionFeatureSet) -> bytes:
    r, d = fs.matrix.shape
    return (_HEADER.pack(MAGIC, r, d)
            + fs.matrix.astype("<f4", copy=False).tobytes()
            + fs.index.astype(INDEX_DTYPE, copy=False).tobytes())


def from_bytes(data: bytes) -> RegionFeatureSet:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {bytes(data[:4])!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFile("header shorter than 12 bytes")
    _, r, d = _HEADER.unpack_from(data)
    body = r * d * 4
    need = _HEADER.size + body + r * INDEX_DTYPE.itemsize
    if len(data) < need:
        raise TruncatedFile(f"need {need} bytes for {r}x{d}, file has {len(data)}")
    if len(data) > need:
        raise IndexMismatch(f"{len(data) - need} trailing bytes after the index block")
    matrix = np.frombuffer(data, dtype="<f4", count=r * d, offset=_HEADER.size).reshape(r, d)
    index = np.frombuffer(data, dtype=INDEX_DTYPE, count=r, offset=_HEADER.size + body)
    return RegionFeatureSet(matrix.astype(np.float32), index.copy())


def write_fmat(fs: RegionFeatureSet, path) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".fmat-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(fs))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_fmat(path) -> RegionFeatureSet:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def concat_features(base: RegionFeatureSet, vc: RegionFeatureSet) -> RegionFeatureSet:
    """Append ``vc`` columns to ``base`` rows matched on (image_id, region_id).

    Output rows follow ``base`` order; ``vc`` may be in any order.
    """
    base_keys = base.keys()
    lookup = {k: i for i, k in enumerate(vc.keys())}
    missing = next((k for k in base_keys if k not in lookup), None)
    if missing is not None:
        raise IndexMismatch(f"key (image_id={missing[0]}, region_id={missing[1]}) missing from vc features")
    if len(lookup) != len(base_keys):
        extra = next(k for k in lookup if k not in set(base_keys))
        raise IndexMismatch(f"key (image_id={extra[0]}, region_id={extra[1]}) missing from base features")
    order = np.fromiter((lookup[k] for k in base_keys), dtype=np.intp, count=len(base_keys))
    aligned = vc.matrix[order] if len(order) else np.zeros((0, vc.dim), dtype=np.float32)
    return RegionFeatureSet(np.hstack([base.matrix, aligned]), base.index.copy())


def to_csv(fs: RegionFeatureSet) -> str:
    """Debug export with 6 significant digits; lossy, never read back."""
    lines = ["image_id,region_id,category," + ",".join(f"f{j}" for j in range(fs.dim))]
    for key, row in zip(fs.index, fs.matrix):
        vals = ",".join(f"{v:.6g}" for v in row)
        lines.append(f"{key['image_id']},{key['region_id']},{key['category']}" + ("," + vals if fs.dim else ""))
    return "\n".join(lines) + "\n"


def synth_region_features(world, scenes, d: int = 16, noise: float = 0.5, seed: int = 0,
                          confounder_scale: float = 1.0, noise_seed: int | None = None) -> RegionFeatureSet:
    """Confounded stand-in for backbone region features.

    Every present category in scene ``i`` becomes one region with feature
    ``prototype[c] + confounder_scale * sum_h U_h * offset[h] + noise * eps``
    with standard-normal prototypes, offsets and ``eps``. Region ids number
    the regions within each scene; image ids are scene indices.
    Prototypes and offsets depend on ``seed`` only, so splits drawn with a
    different ``noise_seed`` share them.
    """
    if d < 2:
        raise ValueError("feature dimension must be >= 2")
    n, h = world.n_categories, world.n_confounders
    prototypes, offsets = _prototypes_and_offsets(n, h, d, seed)
    rng = rng_for(seed if noise_seed is None else noise_seed, "feature-noise")
    presence = np.asarray(scenes.presence, dtype=bool)
    conf = np.asarray(scenes.confounders, dtype=float)
    scene_idx, cats = np.nonzero(presence)
    region_ids = np.zeros_like(scene_idx)
    if scene_idx.size:
        # position of each present category within its scene
        starts = np.searchsorted(scene_idx, scene_idx, side="left")
        region_ids = np.arange(scene_idx.size) - starts
    feats = prototypes[cats] + confounder_scale * (conf[scene_idx] @ offsets if h else 0.0)
    feats = feats + noise * rng.standard_normal(feats.shape)
    return RegionFeatureSet.from_arrays(feats.reshape(-1, d), scene_idx, region_ids, cats)


def _prototypes_and_offsets(n, h, d, seed):
    rng = rng_for(seed, "prototypes")
    return rng.standard_normal((n, d)), rng.standard_normal((h, d))


def category_prototypes(world, d: int, seed: int) -> np.ndarray:
    """The prototypes :func:`synth_region_features` uses for ``seed``."""
    return _prototypes_and_offsets(world.n_categories, world.n_confounders, d, seed)[0]

"""Confounder dictionary: class-averaged region features and their prior.

Variants mirror the dictionary ablations: ``fixed`` (class means, frozen),
``random`` (Gaussian entries), ``context`` (rebuilt per image from that
image's own regions) and ``expectation_only`` (class means, attention
bypassed by the head).
"""
from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCategory
from .feature_store import RegionFeatureSet, read_fmat, write_fmat

VARIANTS = ("fixed", "random", "context", "expectation_only")

CONTEXT_WARNING = ("context dictionary is rebuilt per image; training with it is "
                   "known to be unstable and is provided for ablation only")


@dataclass(frozen=True)
class ConfounderDictionary:
    Z: np.ndarray  # (N, d)
    prior: np.ndarray  # (N,)
    variant: str = "fixed"
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        Z = np.array(self.Z, dtype=np.float64, ndmin=2)
        prior = np.array(self.prior, dtype=np.float64).reshape(-1)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown dictionary variant {self.variant!r}")
        if prior.shape != (Z.shape[0],):
            raise ValueError("prior needs one entry per dictionary row")
        if (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-9:
            raise ValueError("prior must be non-negative and sum to 1")
        Z.flags.writeable = False
        prior.flags.writeable = False
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "prior", prior)

    @property
    def n_entries(self) -> int:
        return self.Z.shape[0]

    @property
    def dim(self) -> int:
        return self.Z.shape[1]

    def as_variant(self, variant: str) -> "ConfounderDictionary":
        return ConfounderDictionary(self.Z, self.prior, variant, dict(self.provenance, variant=variant))


def _source_hash(features: RegionFeatureSet) -> str:
    h = hashlib.sha256()
    h.update(features.matrix.tobytes())
    h.update(features.index.tobytes())
    return h.hexdigest()


def build_fixed(features: RegionFeatureSet, n_categories: int | None = None,
                variant: str = "fixed") -> ConfounderDictionary:
    """z_i = mean of the rows labelled i; prior_i = share of rows labelled i."""
    cats = features.categories
    n = int(cats.max()) + 1 if n_categories is None and len(cats) else (n_categories or 0)
    counts = np.bincount(cats, minlength=n).astype(float)
    empty = np.nonzero(counts == 0)[0]
    if n == 0 or empty.size:
        raise EmptyCategory(int(empty[0]) if empty.size else 0)
    sums = np.zeros((n, features.dim))
    np.add.at(sums, cats, features.features())
    return ConfounderDictionary(
        sums / counts[:, None], counts / counts.sum(), variant,
        {"builder": "class_mean", "rows": len(features), "source_sha256": _source_hash(features)})


def build_random(n: int, d: int, seed: int) -> ConfounderDictionary:
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    rng = np.random.default_rng(seed)
    return ConfounderDictionary(rng.standard_normal((n, d)), np.full(n, 1.0 / n), "random",
                                {"builder": "random", "seed": seed})


def build_context(image_regions, n_categories: int, d: int | None = None,
                  warn: bool = True) -> ConfounderDictionary:
    """Per-image dictionary from ``(category, feature)`` pairs.

    Present categories get the mean of the image's rows; absent ones a zero
    row with prior 0.
    """
    if not image_regions:
        raise ValueError("image has no regions")
    if warn:
        warnings.warn(CONTEXT_WARNING, RuntimeWarning, stacklevel=2)
    cats = np.array([c for c, _ in image_regions], dtype=np.int64)
    feats = np.array([np.asarray(f, dtype=float) for _, f in image_regions])
    d = feats.shape[1] if d is None else d
    counts = np.bincount(cats, minlength=n_categories).astype(float)
    sums = np.zeros((n_categories, d))
    np.add.at(sums, cats, feats)
    Z = np.zeros_like(sums)
    present = counts > 0
    Z[present] = sums[present] / counts[present, None]
    return ConfounderDictionary(Z, counts / counts.sum(), "context", {"builder": "context"})


def save_dictionary(dct: ConfounderDictionary, path) -> None:
    """FMAT matrix (row i keyed (0, i, i)) plus a ``.json`` sidecar."""
    n = dct.n_entries
    fs = RegionFeatureSet.from_arrays(dct.Z, np.zeros(n), np.arange(n), np.arange(n))
    write_fmat(fs, path)
    sidecar = {"prior": dct.prior.tolist(), "variant": dct.variant, "provenance": dct.provenance}
    with open(os.fspath(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dictionary(path) -> ConfounderDictionary:
    fs = read_fmat(path)
    with open(os.fspath(path) + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return ConfounderDictionary(fs.features(), meta["prior"], meta["variant"], meta.get("provenance", {}))

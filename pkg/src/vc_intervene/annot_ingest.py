"""COCO-style and TSV annotation parsing, plus per-image presence sets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

from .errors import DanglingReference, MalformedJson, MalformedLine, MissingField


@dataclass(frozen=True)
class CategoryTable:
    """Category ids and names with a dense 0..N-1 index in first-seen order."""

    ids: tuple[int, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.names):
            raise ValueError("ids and names differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate category id")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate category name")

    def __len__(self):
        return len(self.ids)

    def dense(self, category_id: int) -> int:
        return self._id_index[category_id]

    def by_name(self, name: str) -> int:
        return self._name_index[name]

    @cached_property
    def _id_index(self):
        return {cid: i for i, cid in enumerate(self.ids)}

    @cached_property
    def _name_index(self):
        return {n: i for i, n in enumerate(self.names)}


@dataclass(frozen=True)
class Region:
    region_id: int
    category: int
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    regions: tuple[Region, ...]


@dataclass(frozen=True)
class AnnotationDataset:
    categories: CategoryTable
    images: tuple[ImageRecord, ...]
    provenance: dict = field(default_factory=dict, compare=False)

    @property
    def n_categories(self) -> int:
        return len(self.categories)


def _require(obj, key, array, index):
    if not isinstance(obj, dict) or key not in obj:
        raise MissingField(key, array, index)
    return obj[key]


def _assemble(categories, per_image, order, min_distinct, source):
    images = []
    excluded = 0
    for image_id in order:
        regions = per_image[image_id]
        if not regions or len({r.category for r in regions}) < min_distinct:
            excluded += 1
            continue
        images.append(ImageRecord(image_id, tuple(regions)))
    provenance = {"source": source, "min_distinct": min_distinct,
                  "images_excluded": excluded, "images_kept": len(images)}
    return AnnotationDataset(categories, tuple(images), provenance)


def parse_coco(data: bytes | str, min_distinct: int = 1, source: str = "<bytes>") -> AnnotationDataset:
    """Parse the COCO-JSON subset (``images``, ``annotations``, ``categories``).

    Annotations keep their file order within each image. Images left with
    fewer than ``min_distinct`` distinct categories are dropped and counted
    in ``provenance["images_excluded"]``.
    """
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedJson(str(exc)) from exc
    if not isinstance(doc, dict):
        raise MalformedJson("top level is not an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise MissingField(key, "<root>", 0)

    ids, names = [], []
    for i, cat in enumerate(doc["categories"]):
        ids.append(int(_require(cat, "id", "categories", i)))
        names.append(str(_require(cat, "name", "categories", i)))
    categories = CategoryTable(tuple(ids), tuple(names))
    dense = categories._id_index

    per_image: dict[int, list[Region]] = {}
    order = []
    for i, img in enumerate(doc["images"]):
        image_id = int(_require(img, "id", "images", i))
        if image_id in per_image:
            raise MalformedJson(f"duplicate image id {image_id}")
        per_image[image_id] = []
        order.append(image_id)

    for i, ann in enumerate(doc["annotations"]):
        image_id = int(_require(ann, "image_id", "annotations", i))
        category_id = int(_require(ann, "category_id", "annotations", i))
        bbox = _require(ann, "bbox", "annotations", i)
        if image_id not in per_image:
            raise DanglingReference(f"annotations[{i}] references unknown image_id {image_id}")
        if category_id not in dense:
            raise DanglingReference(f"annotations[{i}] references unknown category_id {category_id}")
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise MalformedJson(f"annotations[{i}].bbox must be [x, y, w, h]")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            # degenerate boxes carry no region
            continue
        region_id = int(ann.get("id", len(per_image[image_id])))
        per_image[image_id].append(Region(region_id, dense[category_id], (x, y, w, h)))

    return _assemble(categories, per_image, order, min_distinct, source)


def parse_tsv(data: bytes | str, min_distinct: int = 1, source: str = "<bytes>") -> AnnotationDataset:
    """Parse ``image_id<TAB>category_name`` lines; ``#`` starts a comment."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedLine(0, f"not UTF-8: {exc}") from exc
    names: list[str] = []
    name_index: dict[str, int] = {}
    per_image: dict[int, list[Region]] = {}
    order = []
    for lineno, line in enumerate(data.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 2:
            raise MalformedLine(lineno, f"expected 2 tab-separated fields, got {len(parts)}")
        raw_id, name = parts[0].strip(), parts[1].strip()
        try:
            image_id = int(raw_id)
        except ValueError:
            raise MalformedLine(lineno, f"image id {raw_id!r} is not an integer") from None
        if not name:
            raise MalformedLine(lineno, "empty category name")
        if name not in name_index:
            name_index[name] = len(names)
            names.append(name)
        if image_id not in per_image:
            per_image[image_id] = []
            order.append(image_id)
        regions = per_image[image_id]
        regions.append(Region(len(regions), name_index[name]))

    categories = CategoryTable(tuple(range(len(names))), tuple(names))
    return _assemble(categories, per_image, order, min_distinct, source)


def to_tsv(ds: AnnotationDataset) -> str:
    lines = []
    for img in ds.images:
        for region in img.regions:
            lines.append(f"{img.image_id}\t{ds.categories.names[region.category]}")
    return "\n".join(lines) + ("\n" if lines else "")


def presence_sets(ds: AnnotationDataset, min_distinct: int = 3) -> list[tuple[int, frozenset[int]]]:
    """Distinct categories per image, dropping images with too few."""
    if min_distinct < 1:
        raise ValueError("min_distinct must be >= 1")
    out = []
    for img in ds.images:
        present = frozenset(r.category for r in img.regions)
        if len(present) >= min_distinct:
            out.append((img.image_id, present))
    return out


def load_annotations(path, fmt: str = "coco", min_distinct: int = 1) -> AnnotationDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if fmt == "coco":
        return parse_coco(data, min_distinct, source=str(path))
    if fmt == "tsv":
        return parse_tsv(data, min_distinct, source=str(path))
    raise ValueError(f"unknown annotation format {fmt!r}")

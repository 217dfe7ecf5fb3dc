"""Detection annotation datasets: loading, validation, normalization, subsampling.

Boxes are stored in normalized center form (cx, cy, w, h), all relative to
image width/height. Conversion from absolute pixel corners happens exactly
once, at load time. Datasets are immutable after construction and safe to
share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

# Tolerance for boxes that overshoot image bounds in real exports.
BOUNDS_EPS = 1e-6

ImageId = "int | str"


class DatasetError(Exception):
    """Raised when an annotation file cannot be loaded or is inconsistent."""


@dataclass(frozen=True)
class BoxAnnotation:
    """One labeled box: class id plus normalized center-form geometry."""

    image_id: int | str
    class_id: int
    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class ImageInfo:
    image_id: int | str
    width: int
    height: int


@dataclass(frozen=True)
class DetectionDataset:
    """A labeled detection dataset for one domain.

    ``category_id_map`` keeps the original-file category id for each dense
    class index (COCO loads only); it is reporting metadata and does not
    participate in equality of reloaded datasets.
    """

    domain: str
    classes: tuple[str, ...]
    images: tuple[ImageInfo, ...]
    annotations: tuple[BoxAnnotation, ...]
    category_id_map: tuple[int, ...] | None = field(default=None, compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def image_ids(self) -> set:
        return {im.image_id for im in self.images}


def _check_domain(domain: str) -> str:
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
    return domain


def _normalize_bbox(
    bbox, img_w: float, img_h: float, *, where: str, clamp: bool
) -> tuple[float, float, float, float]:
    """Convert absolute [x_topleft, y_topleft, w, h] to normalized center form.

    Rejects non-positive sizes always; rejects bounds overshoot beyond
    BOUNDS_EPS unless ``clamp`` is set, in which case the box is clipped to
    the image.
    """
    if len(bbox) != 4:
        raise DatasetError(f"{where}: bbox must have 4 entries, got {len(bbox)}")
    x0, y0, bw, bh = (float(v) for v in bbox)
    if bw <= 0 or bh <= 0:
        raise DatasetError(f"{where}: non-positive box dimensions ({bw}, {bh})")
    cx = (x0 + bw / 2.0) / img_w
    cy = (y0 + bh / 2.0) / img_h
    w = bw / img_w
    h = bh / img_h
    lo_x, hi_x = cx - w / 2.0, cx + w / 2.0
    lo_y, hi_y = cy - h / 2.0, cy + h / 2.0
    out_of_bounds = (
        lo_x < -BOUNDS_EPS or hi_x > 1.0 + BOUNDS_EPS or lo_y < -BOUNDS_EPS or hi_y > 1.0 + BOUNDS_EPS
    )
    if out_of_bounds:
        if not clamp:
            raise DatasetError(f"{where}: box exceeds image bounds")
        x_lo, x_hi = max(lo_x, 0.0), min(hi_x, 1.0)
        y_lo, y_hi = max(lo_y, 0.0), min(hi_y, 1.0)
        if x_hi <= x_lo or y_hi <= y_lo:
            raise DatasetError(f"{where}: box lies entirely outside the image")
        cx, w = (x_lo + x_hi) / 2.0, x_hi - x_lo
        cy, h = (y_lo + y_hi) / 2.0, y_hi - y_lo
    return cx, cy, w, h


def denormalize_bbox(ann: BoxAnnotation, width: int, height: int) -> tuple[float, float, float, float]:
    """Inverse of load-time normalization: absolute [x_topleft, y_topleft, w, h]."""
    bw = ann.w * width
    bh = ann.h * height
    x0 = ann.cx * width - bw / 2.0
    y0 = ann.cy * height - bh / 2.0
    return x0, y0, bw, bh


def load_coco(path, domain: str = "source", *, clamp: bool = False) -> DetectionDataset:
    """Load a COCO-style annotation file (images / annotations / categories).

    Category ids are remapped to dense [0, K) in ascending original-id
    order; the original ids are retained in ``category_id_map``. All COCO
    fields outside the required subset are ignored.
    """
    _check_domain(domain)
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"annotation file not found: {path}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON in {path}: {e}")
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise DatasetError(f"{path}: missing required field {key!r}")

    try:
        cats = sorted((int(c["id"]), str(c["name"])) for c in raw["categories"])
    except (KeyError, TypeError) as e:
        raise DatasetError(f"{path}: malformed categories entry ({e})")
    if len({cid for cid, _ in cats}) != len(cats):
        raise DatasetError(f"{path}: duplicate category ids")
    dense = {cid: k for k, (cid, _) in enumerate(cats)}
    classes = tuple(name for _, name in cats)

    images = []
    dims: dict = {}
    for im in raw["images"]:
        try:
            info = ImageInfo(im["id"], int(im["width"]), int(im["height"]))
        except (KeyError, TypeError) as e:
            raise DatasetError(f"{path}: malformed image entry ({e})")
        if info.width <= 0 or info.height <= 0:
            raise DatasetError(f"{path}: image {info.image_id} has non-positive dimensions")
        if info.image_id in dims:
            raise DatasetError(f"{path}: duplicate image id {info.image_id}")
        dims[info.image_id] = (info.width, info.height)
        images.append(info)

    annotations = []
    for idx, ann in enumerate(raw["annotations"]):
        where = f"{path}: annotation #{idx}"
        try:
            image_id = ann["image_id"]
            cat_id = int(ann["category_id"])
            bbox = ann["bbox"]
        except (KeyError, TypeError) as e:
            raise DatasetError(f"{where}: missing or malformed field ({e})")
        if image_id not in dims:
            raise DatasetError(f"{where}: references unknown image {image_id}")
        if cat_id not in dense:
            raise DatasetError(f"{where}: unknown category id {cat_id}")
        img_w, img_h = dims[image_id]
        cx, cy, w, h = _normalize_bbox(bbox, img_w, img_h, where=where, clamp=clamp)
        annotations.append(BoxAnnotation(image_id, dense[cat_id], cx, cy, w, h))

    return DetectionDataset(
        domain=domain,
        classes=classes,
        images=tuple(images),
        annotations=tuple(annotations),
        category_id_map=tuple(cid for cid, _ in cats),
    )


def load_jsonl(path, domain: str | None = None, *, clamp: bool = False) -> DetectionDataset:
    """Load the line-delimited annotation format.

    One JSON object per line: {image_id, width, height, class, bbox} with an
    absolute-pixel [x_topleft, y_topleft, w, h] bbox. An optional first line
    {"classes": [...]} fixes the class vocabulary (and may carry "domain");
    otherwise the vocabulary is inferred in first-appearance order. Lines
    without a "class" field declare an annotation-less image, which keeps
    write_jsonl/load_jsonl a lossless round trip.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DatasetError(f"annotation file not found: {path}")

    explicit_classes: list[str] | None = None
    header_domain = None
    start = 0
    if lines:
        try:
            first = json.loads(lines[0])
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}:1: malformed JSON: {e}")
        if isinstance(first, dict) and "classes" in first:
            explicit_classes = [str(c) for c in first["classes"]]
            if len(set(explicit_classes)) != len(explicit_classes):
                raise DatasetError(f"{path}:1: duplicate class names in header")
            header_domain = first.get("domain")
            start = 1

    if domain is None:
        domain = header_domain if header_domain is not None else "source"
    _check_domain(domain)

    classes: list[str] = list(explicit_classes) if explicit_classes is not None else []
    class_index = {name: k for k, name in enumerate(classes)}
    images: list[ImageInfo] = []
    dims: dict = {}
    annotations: list[BoxAnnotation] = []

    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{where}: malformed JSON: {e}")
        try:
            image_id = rec["image_id"]
            width = int(rec["width"])
            height = int(rec["height"])
        except (KeyError, TypeError) as e:
            raise DatasetError(f"{where}: missing or malformed field ({e})")
        if width <= 0 or height <= 0:
            raise DatasetError(f"{where}: non-positive image dimensions")
        if image_id in dims:
            if dims[image_id] != (width, height):
                raise DatasetError(f"{where}: image {image_id} redeclared with different dimensions")
        else:
            dims[image_id] = (width, height)
            images.append(ImageInfo(image_id, width, height))
        if "class" not in rec and "bbox" not in rec:
            continue  # image-only line
        try:
            cls_name = str(rec["class"])
            bbox = rec["bbox"]
        except (KeyError, TypeError) as e:
            raise DatasetError(f"{where}: missing or malformed field ({e})")
        if cls_name not in class_index:
            if explicit_classes is not None:
                raise DatasetError(f"{where}: unknown class {cls_name!r}")
            class_index[cls_name] = len(classes)
            classes.append(cls_name)
        cx, cy, w, h = _normalize_bbox(bbox, float(width), float(height), where=where, clamp=clamp)
        annotations.append(BoxAnnotation(image_id, class_index[cls_name], cx, cy, w, h))

    return DetectionDataset(
        domain=domain,
        classes=tuple(classes),
        images=tuple(images),
        annotations=tuple(annotations),
    )


def write_jsonl(dataset: DetectionDataset, path) -> None:
    """Serialize a dataset to the line-delimited format (see load_jsonl)."""
    path = Path(path)
    dims = {im.image_id: (im.width, im.height) for im in dataset.images}
    covered = {ann.image_id for ann in dataset.annotations}
    out = [json.dumps({"classes": list(dataset.classes), "domain": dataset.domain})]
    for im in dataset.images:
        if im.image_id not in covered:
            out.append(json.dumps({"image_id": im.image_id, "width": im.width, "height": im.height}))
    for ann in dataset.annotations:
        width, height = dims[ann.image_id]
        x0, y0, bw, bh = denormalize_bbox(ann, width, height)
        out.append(
            json.dumps(
                {
                    "image_id": ann.image_id,
                    "width": width,
                    "height": height,
                    "class": dataset.classes[ann.class_id],
                    "bbox": [x0, y0, bw, bh],
                }
            )
        )
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def subsample(dataset: DetectionDataset, fraction: float, seed: int) -> DetectionDataset:
    """Retain ceil(fraction * |images|) images chosen uniformly without replacement.

    Image-level, so every annotation of a retained image is kept. Image and
    annotation order is preserved. Deterministic per (dataset, fraction, seed).
    """
    if not dataset.images:
        raise ValueError("cannot subsample an empty dataset")
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(dataset.images)
    keep = math.ceil(fraction * n)
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=keep, replace=False).tolist())
    images = tuple(im for i, im in enumerate(dataset.images) if i in chosen)
    kept_ids = {im.image_id for im in images}
    annotations = tuple(a for a in dataset.annotations if a.image_id in kept_ids)
    return replace(dataset, images=images, annotations=annotations)


def validate(dataset: DetectionDataset) -> list[str]:
    """Check every dataset invariant; returns violation descriptions, never raises."""
    problems: list[str] = []
    if dataset.num_classes < 1:
        problems.append("dataset has no classes")
    if len(set(dataset.classes)) != len(dataset.classes):
        problems.append("duplicate class names")
    if dataset.domain not in ("source", "target"):
        problems.append(f"invalid domain tag {dataset.domain!r}")
    seen = set()
    for im in dataset.images:
        if im.image_id in seen:
            problems.append(f"duplicate image id {im.image_id}")
        seen.add(im.image_id)
        if im.width <= 0 or im.height <= 0:
            problems.append(f"image {im.image_id}: non-positive dimensions")
    known = dataset.image_ids()
    for i, a in enumerate(dataset.annotations):
        tag = f"annotation #{i} (image {a.image_id})"
        if a.image_id not in known:
            problems.append(f"{tag}: references unknown image")
        if not (0 <= a.class_id < dataset.num_classes):
            problems.append(f"{tag}: class_id {a.class_id} out of range [0, {dataset.num_classes})")
        if not (0.0 <= a.cx <= 1.0 and 0.0 <= a.cy <= 1.0):
            problems.append(f"{tag}: center ({a.cx}, {a.cy}) outside [0, 1]")
        if not (0.0 < a.w <= 1.0 and 0.0 < a.h <= 1.0):
            problems.append(f"{tag}: size ({a.w}, {a.h}) outside (0, 1]")
        if a.cx - a.w / 2 < -BOUNDS_EPS or a.cx + a.w / 2 > 1.0 + BOUNDS_EPS:
            problems.append(f"{tag}: box exceeds image bounds in x")
        if a.cy - a.h / 2 < -BOUNDS_EPS or a.cy + a.h / 2 > 1.0 + BOUNDS_EPS:
            problems.append(f"{tag}: box exceeds image bounds in y")
    return problems

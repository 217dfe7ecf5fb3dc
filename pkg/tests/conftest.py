"""Shared test fixtures: repo paths and small hand-built datasets."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from care.annotations import BoxAnnotation, DetectionDataset, ImageInfo

REPO_ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return REPO_ROOT / "fixtures"


@pytest.fixture(scope="session")
def source_fixture_path(fixtures_dir) -> Path:
    return fixtures_dir / "sim_source.json"


@pytest.fixture(scope="session")
def target_fixture_path(fixtures_dir) -> Path:
    return fixtures_dir / "real_target.jsonl"


@pytest.fixture(scope="session")
def configs_dir() -> Path:
    return REPO_ROOT / "configs"


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return REPO_ROOT / "tests" / "golden"


def build_dataset(domain: str, boxes, classes=("car", "bus", "rider"), size=(100, 100)) -> DetectionDataset:
    """Dataset from (class_id, cx, cy, w, h) tuples, one image per box."""
    images = []
    annotations = []
    for i, (class_id, cx, cy, w, h) in enumerate(boxes):
        image_id = f"{domain}-img-{i:04d}"
        images.append(ImageInfo(image_id, size[0], size[1]))
        annotations.append(BoxAnnotation(image_id, class_id, cx, cy, w, h))
    return DetectionDataset(
        domain=domain,
        classes=tuple(classes),
        images=tuple(images),
        annotations=tuple(annotations),
    )


def random_dataset(domain: str, counts, seed: int, classes=("car", "bus", "rider")) -> DetectionDataset:
    """Random in-bounds boxes, ``counts[k]`` of class k."""
    rng = np.random.default_rng(seed)
    boxes = []
    for class_id, n in enumerate(counts):
        w = rng.uniform(0.05, 0.2, size=n)
        h = rng.uniform(0.05, 0.2, size=n)
        cx = rng.uniform(0.2, 0.8, size=n)
        cy = rng.uniform(0.2, 0.8, size=n)
        boxes += [(class_id, *map(float, row)) for row in zip(cx, cy, w, h)]
    return build_dataset(domain, boxes, classes=classes)


@pytest.fixture()
def tiny_coco_file(tmp_path) -> Path:
    """Two images, three annotations, non-dense category ids."""
    doc = {
        "images": [
            {"id": 7, "width": 200, "height": 100},
            {"id": 9, "width": 100, "height": 100},
        ],
        "annotations": [
            {"id": 1, "image_id": 7, "category_id": 11, "bbox": [20.0, 10.0, 40.0, 30.0]},
            {"id": 2, "image_id": 7, "category_id": 30, "bbox": [100.0, 40.0, 50.0, 50.0]},
            {"id": 3, "image_id": 9, "category_id": 11, "bbox": [25.0, 25.0, 50.0, 50.0]},
        ],
        "categories": [
            {"id": 30, "name": "bus"},
            {"id": 11, "name": "car"},
        ],
    }
    path = tmp_path / "tiny_coco.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


@pytest.fixture()
def tiny_jsonl_file(tmp_path) -> Path:
    lines = [
        {"classes": ["car", "bus"], "domain": "target"},
        {"image_id": "a", "width": 100, "height": 100, "class": "car", "bbox": [10, 10, 20, 20]},
        {"image_id": "a", "width": 100, "height": 100, "class": "bus", "bbox": [40, 40, 30, 30]},
        {"image_id": "b", "width": 200, "height": 100},
    ]
    path = tmp_path / "tiny.jsonl"
    path.write_text("\n".join(json.dumps(l) for l in lines) + "\n", encoding="utf-8")
    return path

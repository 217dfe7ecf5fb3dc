"""Regenerate the shipped annotation fixtures.

Two deterministic synthetic datasets with the content gaps the package
measures: a simulator-style source export in COCO layout and a
street-scene-style target export in the line-delimited layout. The target
is label-imbalanced and its boxes—most visibly the dominant class—run
larger than the source's, giving the size densities a heavier large-size
tail. Each source class carries well over 200 boxes so density-ratio
noise-band tests can treat the file as its own comparison partner.

Run from the repository root:

    python3 scripts/make_fixtures.py
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"

CLASSES = ("car", "bus", "rider")

# Per-class box geometry: lognormal sizes, normal locations.
SOURCE_GEOMETRY = {
    "counts": {"car": 260, "bus": 240, "rider": 230},
    "size_log_mean": {
        "car": np.log([0.060, 0.050]),
        "bus": np.log([0.120, 0.100]),
        "rider": np.log([0.040, 0.090]),
    },
    "size_log_sigma": 0.30,
    "loc_mean": {"car": (0.45, 0.60), "bus": (0.55, 0.50), "rider": (0.35, 0.55)},
    "loc_sigma": 0.13,
}
TARGET_GEOMETRY = {
    "counts": {"car": 430, "bus": 130, "rider": 45},
    "size_log_mean": {
        "car": np.log([0.100, 0.085]),
        "bus": np.log([0.165, 0.140]),
        "rider": np.log([0.050, 0.115]),
    },
    "size_log_sigma": 0.35,
    "loc_mean": {"car": (0.50, 0.55), "bus": (0.50, 0.45), "rider": (0.60, 0.50)},
    "loc_sigma": 0.13,
}


def sample_boxes(rng: np.random.Generator, geometry: dict) -> list[tuple[str, float, float, float, float]]:
    """Normalized center-form boxes (class, cx, cy, w, h), fully inside the image."""
    boxes = []
    for cls in CLASSES:
        n = geometry["counts"][cls]
        sizes = np.exp(rng.normal(geometry["size_log_mean"][cls], geometry["size_log_sigma"], size=(n, 2)))
        sizes = np.clip(sizes, 0.004, 0.85)
        locs = rng.normal(geometry["loc_mean"][cls], geometry["loc_sigma"], size=(n, 2))
        lo = sizes / 2.0
        centers = np.clip(locs, lo + 1e-4, 1.0 - lo - 1e-4)
        for (w, h), (cx, cy) in zip(sizes, centers):
            boxes.append((cls, float(cx), float(cy), float(w), float(h)))
    order = rng.permutation(len(boxes))
    return [boxes[i] for i in order]


def write_source_coco(path: Path, rng: np.random.Generator) -> None:
    width, height = 1440, 720
    boxes = sample_boxes(rng, SOURCE_GEOMETRY)
    per_image = 5
    n_images = -(-len(boxes) // per_image)
    images = [
        {"id": i + 1, "file_name": f"scene_{i + 1:05d}.png", "width": width, "height": height}
        for i in range(n_images)
    ]
    cat_ids = {cls: k + 1 for k, cls in enumerate(CLASSES)}
    categories = [{"id": cat_ids[c], "name": c} for c in CLASSES]
    annotations = []
    for j, (cls, cx, cy, w, h) in enumerate(boxes):
        bw, bh = w * width, h * height
        x0, y0 = cx * width - bw / 2.0, cy * height - bh / 2.0
        annotations.append(
            {
                "id": j + 1,
                "image_id": (j // per_image) + 1,
                "category_id": cat_ids[cls],
                "bbox": [round(x0, 2), round(y0, 2), round(bw, 2), round(bh, 2)],
                "area": round(bw * bh, 2),
                "iscrowd": 0,
            }
        )
    doc = {
        "info": {"description": "synthetic simulator-style fixture", "version": "1"},
        "images": images,
        "annotations": annotations,
        "categories": categories,
    }
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def write_target_jsonl(path: Path, rng: np.random.Generator) -> None:
    width, height = 2048, 1024
    boxes = sample_boxes(rng, TARGET_GEOMETRY)
    per_image = 4
    lines = [json.dumps({"classes": list(CLASSES), "domain": "target"})]
    for j, (cls, cx, cy, w, h) in enumerate(boxes):
        img_idx = j // per_image
        image_id = f"city_{img_idx // 100:04d}_{img_idx % 100:06d}"
        bw, bh = w * width, h * height
        x0, y0 = cx * width - bw / 2.0, cy * height - bh / 2.0
        lines.append(
            json.dumps(
                {
                    "image_id": image_id,
                    "width": width,
                    "height": height,
                    "class": cls,
                    "bbox": [round(x0, 2), round(y0, 2), round(bw, 2), round(bh, 2)],
                }
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    write_source_coco(FIXTURES / "sim_source.json", np.random.default_rng(1201))
    write_target_jsonl(FIXTURES / "real_target.jsonl", np.random.default_rng(1202))
    print(f"fixtures written to {FIXTURES}")


if __name__ == "__main__":
    main()

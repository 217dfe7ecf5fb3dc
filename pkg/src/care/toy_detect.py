"""Synthetic instance-level sim2real detection task with controllable gaps.

Each instance is a (feature vector, box, class) triple. Content gaps come
from per-domain class probabilities and per-class box size/location
distributions; the appearance gap comes from a per-domain affine transform
of shared class latents plus isotropic observation noise. Features stand in
for ROI-pooled crops, so the full adaptation objective runs on them while
staying trainable on one CPU core in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotations import BoxAnnotation, DetectionDataset, ImageInfo
from .alignment import FeatureBatch, cycle_consistency_loss, linear_mmd_loss
from .numerics import softmax

TOY_IMAGE_SIZE = 1000  # pixel dims used when exporting toy instances as a dataset


@dataclass(frozen=True)
class DomainParams:
    """Generative knobs for one domain."""

    class_probs: np.ndarray  # (K,)
    size_log_mean: np.ndarray  # (K, 2) log-normal location for (w, h)
    size_log_sigma: np.ndarray  # (K, 2)
    loc_mean: np.ndarray  # (K, 2) Gaussian mean for (cx, cy)
    loc_sigma: np.ndarray  # (K, 2)
    feature_map: np.ndarray  # (raw_dim, latent_dim)
    feature_bias: np.ndarray  # (raw_dim,)
    noise_sigma: float

    def validate(self, num_classes: int) -> None:
        if abs(float(self.class_probs.sum()) - 1.0) > 1e-9 or np.any(self.class_probs < 0):
            raise ValueError("class_probs must be a probability simplex")
        if len(self.class_probs) != num_classes:
            raise ValueError("class_probs length must equal the class count")
        if np.any(self.size_log_sigma <= 0) or np.any(self.loc_sigma <= 0) or self.noise_sigma <= 0:
            raise ValueError("all sigma parameters must be positive")


@dataclass(frozen=True)
class ToyDomainSpec:
    """Two-domain generative task description.

    ``box_coupling`` injects (w - 0.5, h - 0.5) into the first two latent
    coordinates before the appearance transform, so instance appearance
    depends on box geometry, not only on class.
    """

    classes: tuple
    latent_dim: int
    raw_dim: int
    class_latents: np.ndarray  # (K, latent_dim)
    source: DomainParams
    target: DomainParams
    box_coupling: float = 0.0

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def params(self, domain: str) -> DomainParams:
        if domain == "source":
            return self.source
        if domain == "target":
            return self.target
        raise ValueError(f"unknown domain {domain!r}")

    def validate(self) -> None:
        self.source.validate(self.num_classes)
        self.target.validate(self.num_classes)
        if self.class_latents.shape != (self.num_classes, self.latent_dim):
            raise ValueError("class_latents shape mismatch")

    def to_dict(self) -> dict:
        def dom(p: DomainParams) -> dict:
            return {
                "class_probs": p.class_probs.tolist(),
                "size_log_mean": p.size_log_mean.tolist(),
                "size_log_sigma": p.size_log_sigma.tolist(),
                "loc_mean": p.loc_mean.tolist(),
                "loc_sigma": p.loc_sigma.tolist(),
                "feature_map": p.feature_map.tolist(),
                "feature_bias": p.feature_bias.tolist(),
                "noise_sigma": p.noise_sigma,
            }

        return {
            "classes": list(self.classes),
            "latent_dim": self.latent_dim,
            "raw_dim": self.raw_dim,
            "class_latents": self.class_latents.tolist(),
            "box_coupling": self.box_coupling,
            "source": dom(self.source),
            "target": dom(self.target),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDomainSpec":
        def dom(p: dict) -> DomainParams:
            return DomainParams(
                class_probs=np.asarray(p["class_probs"], dtype=float),
                size_log_mean=np.asarray(p["size_log_mean"], dtype=float),
                size_log_sigma=np.asarray(p["size_log_sigma"], dtype=float),
                loc_mean=np.asarray(p["loc_mean"], dtype=float),
                loc_sigma=np.asarray(p["loc_sigma"], dtype=float),
                feature_map=np.asarray(p["feature_map"], dtype=float),
                feature_bias=np.asarray(p["feature_bias"], dtype=float),
                noise_sigma=float(p["noise_sigma"]),
            )

        spec = cls(
            classes=tuple(d["classes"]),
            latent_dim=int(d["latent_dim"]),
            raw_dim=int(d["raw_dim"]),
            class_latents=np.asarray(d["class_latents"], dtype=float),
            box_coupling=float(d.get("box_coupling", 0.0)),
            source=dom(d["source"]),
            target=dom(d["target"]),
        )
        spec.validate()
        return spec


@dataclass(frozen=True)
class ToyInstance:
    feature: np.ndarray
    box: BoxAnnotation
    domain: str


def generate_domain(spec: ToyDomainSpec, domain: str, n: int, seed) -> list[ToyInstance]:
    """Sample n instances i.i.d. from one domain; deterministic per seed.

    Box sizes are log-normal clamped into (0, 1]; centers are Gaussian
    clamped into [w/2, 1 - w/2] so every generated box is a valid
    annotation.
    """
    spec.validate()
    p = spec.params(domain)
    rng = np.random.default_rng(seed)
    if n == 0:
        return []
    class_ids = rng.choice(spec.num_classes, size=n, p=p.class_probs)
    sizes = np.exp(rng.normal(p.size_log_mean[class_ids], p.size_log_sigma[class_ids]))
    sizes = np.minimum(sizes, 1.0)
    centers = rng.normal(p.loc_mean[class_ids], p.loc_sigma[class_ids])
    half = sizes / 2.0
    centers = np.clip(centers, half, 1.0 - half)
    latents = spec.class_latents[class_ids].copy()
    if spec.box_coupling != 0.0:
        latents[:, 0] += spec.box_coupling * (sizes[:, 0] - 0.5)
        latents[:, 1] += spec.box_coupling * (sizes[:, 1] - 0.5)
    noise = rng.normal(0.0, p.noise_sigma, size=(n, spec.raw_dim))
    features = latents @ p.feature_map.T + p.feature_bias + noise
    out = []
    for i in range(n):
        box = BoxAnnotation(
            image_id=f"{domain}-{i:06d}",
            class_id=int(class_ids[i]),
            cx=float(centers[i, 0]),
            cy=float(centers[i, 1]),
            w=float(sizes[i, 0]),
            h=float(sizes[i, 1]),
        )
        out.append(ToyInstance(feature=features[i], box=box, domain=domain))
    return out


def instances_to_dataset(instances, classes, domain: str) -> DetectionDataset:
    """Wrap toy instances as a detection dataset (one image per instance)."""
    images = []
    annotations = []
    for i, inst in enumerate(instances):
        image_id = f"{domain}-img-{i:06d}"
        images.append(ImageInfo(image_id, TOY_IMAGE_SIZE, TOY_IMAGE_SIZE))
        b = inst.box
        annotations.append(BoxAnnotation(image_id, b.class_id, b.cx, b.cy, b.w, b.h))
    return DetectionDataset(
        domain=domain,
        classes=tuple(classes),
        images=tuple(images),
        annotations=tuple(annotations),
    )


def write_feature_csv(instances, path) -> None:
    """Sidecar feature table matching instances_to_dataset image ids."""
    from pathlib import Path

    lines = []
    dim = len(instances[0].feature) if instances else 0
    header = ["image_id"] + [f"f{j}" for j in range(dim)]
    lines.append(",".join(header))
    for i, inst in enumerate(instances):
        row = [f"{inst.domain}-img-{i:06d}"] + [repr(float(v)) for v in inst.feature]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Model: two affine layers with tanh, then linear class and box heads.

PARAM_NAMES = ("w1", "b1", "w2", "b2", "wc", "bc", "wb", "bb")


@dataclass
class ToyModel:
    w1: np.ndarray  # (hidden, raw)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (embed, hidden)
    b2: np.ndarray  # (embed,)
    wc: np.ndarray  # (K, embed)
    bc: np.ndarray  # (K,)
    wb: np.ndarray  # (4, embed)
    bb: np.ndarray  # (4,)

    def param_items(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def copy(self) -> "ToyModel":
        return ToyModel(**{name: arr.copy() for name, arr in self.param_items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.param_items()])


def init_model(raw_dim: int, hidden_dim: int, embed_dim: int, num_classes: int, rng) -> ToyModel:
    """Gaussian init scaled by 1/sqrt(fan_in); biases start at zero."""
    rng = np.random.default_rng(rng)

    def layer(out_dim, in_dim):
        return rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim))

    return ToyModel(
        w1=layer(hidden_dim, raw_dim),
        b1=np.zeros(hidden_dim),
        w2=layer(embed_dim, hidden_dim),
        b2=np.zeros(embed_dim),
        wc=layer(num_classes, embed_dim),
        bc=np.zeros(num_classes),
        wb=layer(4, embed_dim),
        bb=np.zeros(4),
    )


def zero_model(raw_dim: int, hidden_dim: int, embed_dim: int, num_classes: int) -> ToyModel:
    return ToyModel(
        w1=np.zeros((hidden_dim, raw_dim)),
        b1=np.zeros(hidden_dim),
        w2=np.zeros((embed_dim, hidden_dim)),
        b2=np.zeros(embed_dim),
        wc=np.zeros((num_classes, embed_dim)),
        bc=np.zeros(num_classes),
        wb=np.zeros((4, embed_dim)),
        bb=np.zeros(4),
    )


def encode(model: ToyModel, x: np.ndarray):
    """Batch encoder pass; returns (hidden activations, embeddings)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    hidden = np.tanh(x @ model.w1.T + model.b1)
    embed = hidden @ model.w2.T + model.b2
    return hidden, embed


def heads(model: ToyModel, embed: np.ndarray):
    logits = embed @ model.wc.T + model.bc
    boxes = embed @ model.wb.T + model.bb
    return logits, boxes


def forward(model: ToyModel, x: np.ndarray):
    """Single-instance forward pass: (embedding, class logits, predicted box)."""
    _, embed = encode(model, x)
    logits, boxes = heads(model, embed)
    return embed[0], logits[0], boxes[0]


def _smooth_l1(t: np.ndarray) -> np.ndarray:
    a = np.abs(t)
    return np.where(a < 1.0, 0.5 * t * t, a - 0.5)


def _smooth_l1_grad(t: np.ndarray) -> np.ndarray:
    return np.where(np.abs(t) < 1.0, t, np.sign(t))


def det_loss(logits: np.ndarray, pred_box: np.ndarray, box, class_id: int) -> float:
    """Cross-entropy over classes plus smooth-L1 over the 4 box coordinates.

    ``box`` is either a BoxAnnotation or a length-4 (cx, cy, w, h) array.
    """
    if isinstance(box, BoxAnnotation):
        box = np.array([box.cx, box.cy, box.w, box.h])
    logits = np.asarray(logits, dtype=float)
    m = logits.max()
    ce = float(np.log(np.exp(logits - m).sum()) + m - logits[class_id])
    box_term = float(_smooth_l1(np.asarray(pred_box, dtype=float) - box).sum())
    return ce + box_term


def det_loss_batch(logits: np.ndarray, pred_boxes: np.ndarray, class_ids: np.ndarray, box_targets: np.ndarray):
    """Per-instance losses plus gradients w.r.t. logits and predicted boxes."""
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits - m).sum(axis=1, keepdims=True)) + m
    log_p = logits - log_z
    ce = -log_p[np.arange(n), class_ids]
    t = pred_boxes - box_targets
    losses = ce + _smooth_l1(t).sum(axis=1)
    d_logits = np.exp(log_p)
    d_logits[np.arange(n), class_ids] -= 1.0
    d_boxes = _smooth_l1_grad(t)
    return losses, d_logits, d_boxes


def backprop(model: ToyModel, x: np.ndarray, hidden: np.ndarray, d_embed: np.ndarray, d_logits: np.ndarray, d_boxes: np.ndarray) -> dict:
    """Exact parameter gradients given upstream gradients at the three outputs."""
    embed = hidden @ model.w2.T + model.b2
    d_e = d_logits @ model.wc + d_boxes @ model.wb + d_embed
    grads = {
        "wc": d_logits.T @ embed,
        "bc": d_logits.sum(axis=0),
        "wb": d_boxes.T @ embed,
        "bb": d_boxes.sum(axis=0),
        "w2": d_e.T @ hidden,
        "b2": d_e.sum(axis=0),
    }
    d_hidden = d_e @ model.w2
    d_z1 = d_hidden * (1.0 - hidden * hidden)
    grads["w1"] = d_z1.T @ x
    grads["b1"] = d_z1.sum(axis=0)
    return grads


@dataclass
class ObjectiveResult:
    total: float
    per_instance_losses: np.ndarray
    alignment_loss: float
    gradients: dict
    alignment_skipped: tuple = ()


def model_gradients(
    model: ToyModel,
    batch,
    lam: float = 0.0,
    alignment: str = "none",
    symmetric: bool = False,
    cap: int | None = None,
) -> ObjectiveResult:
    """Weighted objective over one batch with exact parameter gradients.

    ``batch`` is a sequence of (ToyInstance, weight). The objective is
    sum_i weight_i * det_loss_i + lam * alignment_loss, where the alignment
    loss groups the batch embeddings by ground-truth class across domains.
    Gradients flow through the encoder along both the detection and the
    alignment paths. ``cap`` limits how many same-class instances per
    domain feed the alignment term (batch order, None = all).
    """
    instances = [b[0] for b in batch]
    weights = np.array([b[1] for b in batch], dtype=float)
    if not instances:
        raise ValueError("batch must be non-empty")
    x = np.stack([inst.feature for inst in instances])
    class_ids = np.array([inst.box.class_id for inst in instances])
    box_targets = np.array([[inst.box.cx, inst.box.cy, inst.box.w, inst.box.h] for inst in instances])

    hidden, embed = encode(model, x)
    logits, pred_boxes = heads(model, embed)
    losses, d_logits, d_boxes = det_loss_batch(logits, pred_boxes, class_ids, box_targets)
    d_logits *= weights[:, None]
    d_boxes *= weights[:, None]

    d_embed = np.zeros_like(embed)
    align_loss = 0.0
    skipped = ()
    if lam != 0.0 and alignment != "none":
        groups: dict[int, tuple[list, list]] = {}
        for i, inst in enumerate(instances):
            src, tgt = groups.setdefault(inst.box.class_id, ([], []))
            (src if inst.domain == "source" else tgt).append(i)
        if cap is not None:
            groups = {c: (s[:cap], t[:cap]) for c, (s, t) in groups.items()}
        fb = FeatureBatch(
            {c: (embed[np.array(s, dtype=int)], embed[np.array(t, dtype=int)]) for c, (s, t) in groups.items()}
        )
        if alignment == "cycle":
            align_loss, agrads = cycle_consistency_loss(fb, symmetric=symmetric)
        elif alignment == "mmd":
            align_loss, agrads = linear_mmd_loss(fb)
        else:
            raise ValueError(f"unknown alignment kind {alignment!r}")
        skipped = agrads.skipped
        for c, (g_s, g_t) in agrads.per_class.items():
            s, t = groups[c]
            if len(s):
                d_embed[np.array(s, dtype=int)] += lam * g_s
            if len(t):
                d_embed[np.array(t, dtype=int)] += lam * g_t

    grads = backprop(model, x, hidden, d_embed, d_logits, d_boxes)
    total = float(weights @ losses) + lam * align_loss
    return ObjectiveResult(
        total=total,
        per_instance_losses=losses,
        alignment_loss=float(align_loss),
        gradients=grads,
        alignment_skipped=skipped,
    )


def predict_classes(model: ToyModel, x: np.ndarray) -> np.ndarray:
    _, embed = encode(model, x)
    logits, _ = heads(model, embed)
    return logits.argmax(axis=1)


# ---------------------------------------------------------------------------
# Shipped task fixtures.


def imbalanced_shift_spec() -> ToyDomainSpec:
    """The shipped adaptation task: imbalanced target labels plus both gaps.

    Source classes are balanced and fully separated. In the target domain
    the rare class's latent axis is mostly collapsed onto the dominant
    class's axis (a within-target near-collision that plain supervision
    cannot resolve from a handful of labels), the label distribution is
    heavily skewed toward the dominant class, boxes are systematically
    larger, and a small additive appearance offset separates the domains.
    Class reweighting, box reweighting, and feature alignment each have a
    distinct deficiency to repair.
    """
    classes = ("car", "bus", "rider")
    latent_dim, raw_dim = 4, 8
    scale = 2.0
    class_latents = np.zeros((3, latent_dim))
    class_latents[0, 0] = scale
    class_latents[1, 1] = scale
    class_latents[2, 2] = scale

    rng = np.random.default_rng(20240711)
    source_map = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(raw_dim, latent_dim))
    target_bias = rng.normal(0.0, 0.15, size=raw_dim)

    # In the target, the rider axis keeps only 35% of itself and leans 75%
    # onto the car axis, so target riders sit in the skirt of the target
    # car cluster.
    collapse = np.eye(latent_dim)
    collapse[:, 2] = 0.0
    collapse[0, 2] = 0.75
    collapse[2, 2] = 0.35
    target_map = source_map @ collapse

    src_size_mean = np.log(np.array([[0.06, 0.05], [0.12, 0.10], [0.04, 0.09]]))
    tgt_size_mean = src_size_mean + np.log(1.15)

    source = DomainParams(
        class_probs=np.array([1.0, 1.0, 1.0]) / 3.0,
        size_log_mean=src_size_mean,
        size_log_sigma=np.full((3, 2), 0.25),
        loc_mean=np.array([[0.45, 0.60], [0.55, 0.50], [0.35, 0.55]]),
        loc_sigma=np.full((3, 2), 0.13),
        feature_map=source_map,
        feature_bias=np.zeros(raw_dim),
        noise_sigma=0.35,
    )
    target = DomainParams(
        class_probs=np.array([0.80, 0.14, 0.06]),
        size_log_mean=tgt_size_mean,
        size_log_sigma=np.full((3, 2), 0.25),
        loc_mean=np.array([[0.50, 0.55], [0.50, 0.45], [0.60, 0.50]]),
        loc_sigma=np.full((3, 2), 0.13),
        feature_map=target_map,
        feature_bias=target_bias,
        noise_sigma=0.35,
    )
    spec = ToyDomainSpec(
        classes=classes,
        latent_dim=latent_dim,
        raw_dim=raw_dim,
        class_latents=class_latents,
        source=source,
        target=target,
        box_coupling=1.0,
    )
    spec.validate()
    return spec


def separable_spec() -> ToyDomainSpec:
    """A nearly separable, nearly gap-free task for sanity baselines."""
    classes = ("a", "b")
    latent_dim, raw_dim = 3, 6
    rng = np.random.default_rng(4)
    class_latents = np.array([[3.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
    fmap = rng.normal(0.0, 1.0, size=(raw_dim, latent_dim))

    def dom(probs):
        return DomainParams(
            class_probs=np.asarray(probs, dtype=float),
            size_log_mean=np.log(np.full((2, 2), 0.1)),
            size_log_sigma=np.full((2, 2), 0.2),
            loc_mean=np.full((2, 2), 0.5),
            loc_sigma=np.full((2, 2), 0.1),
            feature_map=fmap,
            feature_bias=np.zeros(raw_dim),
            noise_sigma=0.3,
        )

    spec = ToyDomainSpec(
        classes=classes,
        latent_dim=latent_dim,
        raw_dim=raw_dim,
        class_latents=class_latents,
        source=dom([0.5, 0.5]),
        target=dom([0.5, 0.5]),
        box_coupling=0.0,
    )
    spec.validate()
    return spec


TOY_FIXTURES = {
    "imbalanced_shift": imbalanced_shift_spec,
    "separable": separable_spec,
}

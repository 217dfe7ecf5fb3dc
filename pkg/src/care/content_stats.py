"""Content-gap statistics: class frequencies, conditional box densities, reweighting.

Produces the two multiplicative loss weights used during adaptation:

* inverse-frequency class weights, normalized so a uniform class
  distribution gives weight 1 for every class and the total weighted loss
  mass equals the unweighted mass when all classes are present;
* class-conditional box weights, the target/source density ratio of box
  size times box location, estimated by per-class 2-d Gaussian KDEs and
  passed through a bounding smoothing curve.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotations import BoxAnnotation, DetectionDataset
from .numerics import log_sum_exp, sigmoid

MIN_BANDWIDTH = 1e-3

GAP_REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Smoothing:
    """Bounding curve for raw density ratios.

    A raw ratio r >= 0 maps to alpha*sigmoid(r) + beta, which lies in
    [1, 11) for the default parameters; boxes whose joint target density is
    at or below tau get the floor value instead.
    """

    alpha: float = 20.0
    beta: float = -9.0
    tau: float = 0.1
    floor: float = 1.0

    def weight(self, raw_ratio, target_density):
        raw_ratio = np.asarray(raw_ratio, dtype=float)
        smoothed = self.alpha * sigmoid(raw_ratio) + self.beta
        # sigmoid saturates to 1.0 in float64 for ratios above ~37; clamp so
        # the documented strict upper bound alpha + beta is never reached.
        smoothed = np.minimum(smoothed, np.nextafter(self.alpha + self.beta, -np.inf))
        out = np.where(np.asarray(target_density) > self.tau, smoothed, self.floor)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class ClassWeights:
    """Per-class inverse-frequency loss weights for one domain."""

    weights: np.ndarray
    counts: np.ndarray
    domain: str
    zero_count: np.ndarray  # True where the class had no annotations

    def for_class(self, class_id: int) -> float:
        return float(self.weights[class_id])


def class_counts(dataset: DetectionDataset) -> np.ndarray:
    """Number of annotations per class, indexed by dense class id."""
    counts = np.zeros(dataset.num_classes, dtype=np.int64)
    for ann in dataset.annotations:
        counts[ann.class_id] += 1
    return counts


def inverse_frequency_weights(counts, domain: str = "source") -> ClassWeights:
    """weights[c] = N_total / (K * counts[c]); zero-count classes get 1.0, flagged.

    The 1/K factor makes uniform counts map to all-ones weights, and keeps
    the total weighted loss mass equal to the unweighted mass whenever every
    class is present.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a non-empty 1-d array")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    total = int(counts.sum())
    if total == 0:
        raise ValueError("cannot build class weights from all-zero counts")
    k = counts.size
    zero = counts == 0
    weights = np.ones(k, dtype=float)
    weights[~zero] = total / (k * counts[~zero].astype(float))
    return ClassWeights(weights=weights, counts=counts, domain=domain, zero_count=zero)


class GaussianKde2d:
    """2-d Gaussian kernel density estimate with a diagonal bandwidth.

    pdf(p) = (1/n) sum_i N(p; x_i, diag(h1^2, h2^2)). Instances are
    immutable and evaluation is reentrant.
    """

    def __init__(self, points, bandwidth):
        self.points = np.array(points, dtype=float)
        self.bandwidth = np.array(bandwidth, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError("points must have shape (n, 2)")
        if np.any(self.bandwidth <= 0):
            raise ValueError("bandwidth entries must be positive")
        self.n = self.points.shape[0]
        # log of the per-kernel normalization 1 / (2*pi*h1*h2)
        self._log_norm = -np.log(2.0 * np.pi * self.bandwidth[0] * self.bandwidth[1])

    def _log_kernels(self, query) -> np.ndarray:
        query = np.atleast_2d(np.asarray(query, dtype=float))
        diff = (query[:, None, :] - self.points[None, :, :]) / self.bandwidth
        return -0.5 * np.sum(diff * diff, axis=2)  # (m, n)

    def logpdf(self, query) -> np.ndarray:
        z = self._log_kernels(query)
        return log_sum_exp(z, axis=1) - np.log(self.n) + self._log_norm

    def pdf(self, query) -> np.ndarray:
        z = self._log_kernels(query)
        return np.exp(z).sum(axis=1) / self.n * np.exp(self._log_norm)


def scott_bandwidth(points, min_bandwidth: float = MIN_BANDWIDTH) -> np.ndarray:
    """Diagonal Scott-rule bandwidth for 2-d data: n^(-1/6) * per-dim sample std.

    The sample standard deviation is undefined for n = 1 and may be zero for
    degenerate data; both cases fall back to the floor.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    sigma = points.std(axis=0, ddof=1) if n >= 2 else np.zeros(2)
    h = n ** (-1.0 / 6.0) * sigma
    return np.maximum(h, min_bandwidth)


def fit_kde(points, min_bandwidth: float = MIN_BANDWIDTH) -> GaussianKde2d:
    """Fit one KDE component on (n, 2) samples."""
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        raise ValueError("cannot fit a KDE on an empty point set")
    points = np.atleast_2d(points)
    return GaussianKde2d(points, scott_bandwidth(points, min_bandwidth))


@dataclass(frozen=True)
class ConditionalKde:
    """Per-class KDE components; None where a class had no samples."""

    components: tuple
    counts: tuple

    def component(self, class_id: int) -> GaussianKde2d | None:
        return self.components[class_id]


def _per_class_points(dataset: DetectionDataset, kind: str) -> list[np.ndarray]:
    cols = {"size": ("w", "h"), "loc": ("cx", "cy")}[kind]
    buckets: list[list] = [[] for _ in range(dataset.num_classes)]
    for ann in dataset.annotations:
        buckets[ann.class_id].append((getattr(ann, cols[0]), getattr(ann, cols[1])))
    return [np.asarray(b, dtype=float).reshape(-1, 2) for b in buckets]


def fit_conditional_kde(dataset: DetectionDataset, kind: str, min_bandwidth: float = MIN_BANDWIDTH) -> ConditionalKde:
    """Fit one KDE per class on box sizes ('size') or locations ('loc')."""
    pts = _per_class_points(dataset, kind)
    comps = tuple(fit_kde(p, min_bandwidth) if len(p) else None for p in pts)
    return ConditionalKde(components=comps, counts=tuple(len(p) for p in pts))


@dataclass(frozen=True)
class BoxRatioResult:
    value: float
    raw_ratio: float
    target_density: float
    code: str  # "smoothed" | "low_target_support" | "flagged_class"


@dataclass(frozen=True)
class BoxRatioModel:
    """Target/source box-density ratio model, factorized into size and location.

    The raw ratio for a box of class c is
        r = [P_T(w,h|c) / P_S(w,h|c)] * [P_T(cx,cy|c) / P_S(cx,cy|c)],
    computed in log space to avoid underflow far from either density's mass.
    The production weight is the smoothed raw ratio when the joint target
    density (product of the two target factors) exceeds tau, else the floor.
    Classes missing from either domain are flagged and always weigh 1.0.
    """

    classes: tuple
    size_source: ConditionalKde
    size_target: ConditionalKde
    loc_source: ConditionalKde
    loc_target: ConditionalKde
    flagged: np.ndarray = field(compare=False)
    smoothing: Smoothing = Smoothing()

    def evaluate_class(self, class_id: int, sizes, locs, smoothed: bool = True):
        """Vectorized weights for boxes of one class.

        Returns (values, raw_ratios, target_densities); raw ratios and
        densities are NaN for flagged classes.
        """
        sizes = np.atleast_2d(np.asarray(sizes, dtype=float))
        locs = np.atleast_2d(np.asarray(locs, dtype=float))
        m = sizes.shape[0]
        if self.flagged[class_id]:
            nan = np.full(m, np.nan)
            return np.full(m, self.smoothing.floor), nan, nan
        lt_size = self.size_target.component(class_id).logpdf(sizes)
        ls_size = self.size_source.component(class_id).logpdf(sizes)
        lt_loc = self.loc_target.component(class_id).logpdf(locs)
        ls_loc = self.loc_source.component(class_id).logpdf(locs)
        log_r = (lt_size - ls_size) + (lt_loc - ls_loc)
        # a raw ratio beyond float range saturates to inf; the bounded form
        # below maps it to the top of its range, so this is benign
        with np.errstate(over="ignore"):
            raw = np.exp(log_r)
        target_density = np.exp(lt_size + lt_loc)
        if smoothed:
            values = self.smoothing.weight(raw, target_density)
        else:
            values = raw
        return np.asarray(values, dtype=float).reshape(m), raw, target_density

    def raw_ratio(self, box: BoxAnnotation) -> float:
        """Unsmoothed density ratio; NaN for flagged classes."""
        _, raw, _ = self.evaluate_class(box.class_id, [[box.w, box.h]], [[box.cx, box.cy]])
        return float(raw[0])


def fit_box_ratio_model(
    source_ds: DetectionDataset,
    target_ds: DetectionDataset,
    min_bandwidth: float = MIN_BANDWIDTH,
    smoothing: Smoothing = Smoothing(),
) -> BoxRatioModel:
    """Fit the four conditional KDEs (size/location x source/target).

    Classes with zero annotations in either domain are flagged rather than
    fitted; their weight contract is handled by box_ratio.
    """
    if source_ds.classes != target_ds.classes:
        raise ValueError("source and target datasets must share the same class list")
    size_s = fit_conditional_kde(source_ds, "size", min_bandwidth)
    size_t = fit_conditional_kde(target_ds, "size", min_bandwidth)
    loc_s = fit_conditional_kde(source_ds, "loc", min_bandwidth)
    loc_t = fit_conditional_kde(target_ds, "loc", min_bandwidth)
    flagged = np.array(
        [size_s.counts[c] == 0 or size_t.counts[c] == 0 for c in range(len(source_ds.classes))]
    )
    return BoxRatioModel(
        classes=source_ds.classes,
        size_source=size_s,
        size_target=size_t,
        loc_source=loc_s,
        loc_target=loc_t,
        flagged=flagged,
        smoothing=smoothing,
    )


def box_ratio(model: BoxRatioModel, box: BoxAnnotation) -> float:
    """Smoothed box weight in [1, 11); flagged classes return the floor (1.0)."""
    return box_ratio_detail(model, box).value


def box_ratio_detail(model: BoxRatioModel, box: BoxAnnotation) -> BoxRatioResult:
    """Like box_ratio but reports the raw ratio, target density, and branch taken."""
    if model.flagged[box.class_id]:
        return BoxRatioResult(model.smoothing.floor, float("nan"), float("nan"), "flagged_class")
    values, raw, dens = model.evaluate_class(box.class_id, [[box.w, box.h]], [[box.cx, box.cy]])
    code = "smoothed" if dens[0] > model.smoothing.tau else "low_target_support"
    return BoxRatioResult(float(values[0]), float(raw[0]), float(dens[0]), code)


def _moments(points: np.ndarray):
    if len(points) == 0:
        return None, None
    mean = points.mean(axis=0)
    cov = np.cov(points, rowvar=False, ddof=0).reshape(2, 2)
    return mean.tolist(), cov.tolist()


def _domain_summary(dataset: DetectionDataset) -> dict:
    counts = class_counts(dataset)
    total = int(counts.sum())
    sizes = _per_class_points(dataset, "size")
    locs = _per_class_points(dataset, "loc")
    per_class = []
    for c, name in enumerate(dataset.classes):
        size_mean, size_cov = _moments(sizes[c])
        loc_mean, loc_cov = _moments(locs[c])
        per_class.append(
            {
                "class": name,
                "count": int(counts[c]),
                "size_mean": size_mean,
                "size_cov": size_cov,
                "loc_mean": loc_mean,
                "loc_cov": loc_cov,
            }
        )
    return {
        "image_count": len(dataset.images),
        "annotation_count": total,
        "class_counts": counts.tolist(),
        "class_freqs": (counts / total).tolist() if total else [0.0] * len(counts),
        "per_class": per_class,
    }


def _summary_stats(values: np.ndarray) -> dict:
    return {
        "min": float(values.min()),
        "median": float(np.median(values)),
        "max": float(values.max()),
    }


def gap_report(source_ds: DetectionDataset, target_ds: DetectionDataset) -> dict:
    """Content-gap diagnostics: class histograms, box moments, weight summaries.

    Box weight summaries are min/median/max of the (smoothed and raw) box
    weight evaluated at the target domain's own annotations, the empirical
    target-support grid. Deterministic for fixed inputs.
    """
    if source_ds.classes != target_ds.classes:
        raise ValueError("source and target datasets must share the same class list")
    model = fit_box_ratio_model(source_ds, target_ds)
    src_counts = class_counts(source_ds)
    tgt_counts = class_counts(target_ds)
    w_src = inverse_frequency_weights(src_counts, "source") if src_counts.sum() else None
    w_tgt = inverse_frequency_weights(tgt_counts, "target") if tgt_counts.sum() else None

    tgt_sizes = _per_class_points(target_ds, "size")
    tgt_locs = _per_class_points(target_ds, "loc")
    weight_summary = []
    for c, name in enumerate(target_ds.classes):
        entry = {"class": name, "flagged": bool(model.flagged[c]), "n_eval": len(tgt_sizes[c])}
        if model.flagged[c] or len(tgt_sizes[c]) == 0:
            entry["smoothed"] = None
            entry["raw"] = None
        else:
            smoothed, raw, _ = model.evaluate_class(c, tgt_sizes[c], tgt_locs[c], smoothed=True)
            entry["smoothed"] = _summary_stats(smoothed)
            entry["raw"] = _summary_stats(raw)
        weight_summary.append(entry)

    def weights_block(w: ClassWeights | None, classes) -> dict | None:
        if w is None:
            return None
        return {
            "weights": w.weights.tolist(),
            "zero_count_classes": [classes[i] for i in np.nonzero(w.zero_count)[0]],
        }

    freq_ratio = []
    for c in range(len(source_ds.classes)):
        s = src_counts[c] / src_counts.sum() if src_counts.sum() else 0.0
        t = tgt_counts[c] / tgt_counts.sum() if tgt_counts.sum() else 0.0
        freq_ratio.append(float(t / s) if s > 0 else None)

    return {
        "schema_version": GAP_REPORT_SCHEMA_VERSION,
        "classes": list(source_ds.classes),
        "domains": {
            "source": _domain_summary(source_ds),
            "target": _domain_summary(target_ds),
        },
        "class_weights": {
            "source": weights_block(w_src, source_ds.classes),
            "target": weights_block(w_tgt, target_ds.classes),
        },
        "class_freq_ratio_target_over_source": freq_ratio,
        "box_weight_summary": weight_summary,
    }


def export_weight_rows(
    dataset: DetectionDataset,
    weights: ClassWeights,
    model: BoxRatioModel,
    smoothed: bool = True,
) -> list[dict]:
    """Per-annotation weight rows: class weight, box weight, and their product."""
    sizes = np.array([[a.w, a.h] for a in dataset.annotations], dtype=float).reshape(-1, 2)
    locs = np.array([[a.cx, a.cy] for a in dataset.annotations], dtype=float).reshape(-1, 2)
    by_class: dict[int, list[int]] = {}
    for i, a in enumerate(dataset.annotations):
        by_class.setdefault(a.class_id, []).append(i)
    v = np.ones(len(dataset.annotations))
    for c, idx in by_class.items():
        idx = np.asarray(idx)
        values, _, _ = model.evaluate_class(c, sizes[idx], locs[idx], smoothed=smoothed)
        v[idx] = values
    rows = []
    for i, a in enumerate(dataset.annotations):
        w_class = weights.for_class(a.class_id)
        rows.append(
            {
                "image_id": a.image_id,
                "annotation_index": i,
                "class": dataset.classes[a.class_id],
                "w_class": w_class,
                "v_box": float(v[i]),
                "combined": w_class * float(v[i]),
            }
        )
    return rows


WEIGHT_CSV_COLUMNS = ["image_id", "annotation_index", "class", "w_class", "v_box", "combined"]


def write_weights_csv(rows: list[dict], path) -> None:
    """Write weight rows with repr-exact floats so reruns are byte-identical."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(WEIGHT_CSV_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["image_id"],
                    row["annotation_index"],
                    row["class"],
                    repr(row["w_class"]),
                    repr(row["v_box"]),
                    repr(row["combined"]),
                ]
            )

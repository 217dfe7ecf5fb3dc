"""Training loop and ablation bench for the adaptation objective.

The objective has three parts: an inverse-class-frequency- and
box-ratio-weighted source detection risk, an inverse-class-frequency-
weighted target detection risk, and a class-conditional feature alignment
penalty scaled by lambda. Baselines (single-domain training, unweighted
mixing, mean-matching alignment) are the same loop with parts switched
off, so every comparison is apples to apples: same init, same batch
streams, same optimizer.

Determinism contract: every stochastic choice draws from its own named
child stream of the run seed, so enabling one component never shifts the
randomness of another. Stream assignments:

    (seed, 0)        model init
    (seed, 1, step)  source batch indices at a step
    (seed, 2, step)  target batch indices at a step
    (seed, 10)       source data generation
    (seed, 11)       target pool generation
    (seed, 12)       target test/train split
    (seed, 13)       target train subsampling
"""

from __future__ import annotations

import hashlib
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .content_stats import (
    BoxRatioModel,
    class_counts,
    fit_box_ratio_model,
    inverse_frequency_weights,
)
from .toy_detect import (
    TOY_FIXTURES,
    ToyDomainSpec,
    ToyModel,
    encode,
    heads,
    init_model,
    model_gradients,
)

METHODS = ("source_only", "target_only", "mixing", "seq_ft", "s_mmd", "care")
ALIGNMENTS = ("none", "cycle", "mmd")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class CareConfig:
    """One training run. Unset toggles resolve to per-method defaults.

    ``use_class_rewt`` / ``use_box_rewt`` / ``alignment`` may be left None,
    in which case the method picks its canonical setting (care: both
    weightings on and cycle alignment; everything else: off/none). Explicit
    values are honored where consistent, so ablation rows are spelled as
    mixing plus toggles.
    """

    method: str = "care"
    seed: int = 0
    steps: int = 700
    batch_size: int = 96
    source_fraction: float = 0.5
    learning_rate: float = 0.05
    momentum: float = 0.9
    lam: float = 0.1
    alignment: str | None = None
    use_class_rewt: bool | None = None
    use_box_rewt: bool | None = None
    symmetric_alignment: bool = False
    alignment_cap: int | None = None
    fixture: str = "imbalanced_shift"
    task: dict | None = None
    source_n: int = 3000
    target_n: int = 1600
    target_test_fraction: float = 0.5
    target_train_fraction: float = 0.12
    hidden_dim: int = 16
    embed_dim: int = 8

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.alignment is not None and self.alignment not in ALIGNMENTS:
            raise ConfigError(f"unknown alignment {self.alignment!r}; expected one of {ALIGNMENTS}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not 0.0 < self.source_fraction < 1.0:
            raise ConfigError("source_fraction must lie strictly between 0 and 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.source_n < 1 or self.target_n < 4:
            raise ConfigError("source_n and target_n must allow at least a split")
        if not 0.0 < self.target_test_fraction < 1.0:
            raise ConfigError("target_test_fraction must lie strictly between 0 and 1")
        if not 0.0 < self.target_train_fraction <= 1.0:
            raise ConfigError("target_train_fraction must lie in (0, 1]")
        if self.hidden_dim < 1 or self.embed_dim < 1:
            raise ConfigError("hidden_dim and embed_dim must be positive")
        if self.alignment_cap is not None and self.alignment_cap < 1:
            raise ConfigError("alignment_cap must be a positive instance count or null")
        if self.task is None and self.fixture not in TOY_FIXTURES:
            raise ConfigError(
                f"unknown fixture {self.fixture!r}; expected one of {tuple(sorted(TOY_FIXTURES))}"
            )
        if self.method in ("source_only", "target_only"):
            if self.use_class_rewt or self.use_box_rewt:
                raise ConfigError(f"{self.method} does not combine with reweighting toggles")
            if self.alignment not in (None, "none"):
                raise ConfigError(f"{self.method} does not combine with an alignment loss")
        if self.method == "s_mmd" and self.alignment == "cycle":
            raise ConfigError("s_mmd fixes alignment to 'mmd'; use method 'mixing' with alignment 'cycle'")

    def resolved(self) -> "ResolvedSettings":
        """Per-method effective toggles after defaulting."""
        self.validate()
        if self.method == "care":
            cw = True if self.use_class_rewt is None else self.use_class_rewt
            bw = True if self.use_box_rewt is None else self.use_box_rewt
            align = "cycle" if self.alignment is None else self.alignment
        elif self.method == "s_mmd":
            cw = bool(self.use_class_rewt)
            bw = bool(self.use_box_rewt)
            align = "mmd"
        else:
            cw = bool(self.use_class_rewt)
            bw = bool(self.use_box_rewt)
            align = "none" if self.alignment is None else self.alignment
        if self.method in ("source_only", "target_only"):
            align = "none"
        lam = self.lam if align != "none" else 0.0
        return ResolvedSettings(use_class_rewt=cw, use_box_rewt=bw, alignment=align, lam=lam)

    def task_spec(self) -> ToyDomainSpec:
        if self.task is not None:
            return ToyDomainSpec.from_dict(self.task)
        return TOY_FIXTURES[self.fixture]()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "source_fraction": self.source_fraction,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "lambda": self.lam,
            "alignment": self.alignment,
            "use_class_rewt": self.use_class_rewt,
            "use_box_rewt": self.use_box_rewt,
            "symmetric_alignment": self.symmetric_alignment,
            "alignment_cap": self.alignment_cap,
            "fixture": self.fixture,
            "task": self.task,
            "source_n": self.source_n,
            "target_n": self.target_n,
            "target_test_fraction": self.target_test_fraction,
            "target_train_fraction": self.target_train_fraction,
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CareConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        key_map = {name: name for name in (
            "method", "seed", "steps", "batch_size", "source_fraction",
            "learning_rate", "momentum", "alignment", "use_class_rewt",
            "use_box_rewt", "symmetric_alignment", "alignment_cap",
            "fixture", "task", "source_n", "target_n",
            "target_test_fraction", "target_train_fraction", "hidden_dim",
            "embed_dim",
        )}
        key_map["lambda"] = "lam"
        kwargs = {}
        for key, value in raw.items():
            if key not in key_map:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key_map[key]] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class ResolvedSettings:
    use_class_rewt: bool
    use_box_rewt: bool
    alignment: str
    lam: float


# ---------------------------------------------------------------------------
# Precomputed per-instance weights.


@dataclass(frozen=True)
class TrainingWeights:
    """Static per-instance objective weights, fitted on training data only."""

    source: np.ndarray
    target: np.ndarray
    source_class: np.ndarray | None
    target_class: np.ndarray | None
    box_model: BoxRatioModel | None
    zero_count_classes: tuple = ()


def _instance_class_array(instances) -> np.ndarray:
    return np.array([inst.box.class_id for inst in instances], dtype=int)


def fit_training_weights(
    source_train: list,
    target_train: list,
    classes,
    settings: ResolvedSettings,
) -> TrainingWeights:
    """Class and box-ratio weights from the training split.

    With both toggles off this is all ones, which keeps the weighted
    objective bitwise identical to the unweighted one.
    """
    from .toy_detect import instances_to_dataset

    w_src = np.ones(len(source_train))
    w_tgt = np.ones(len(target_train))
    src_class = tgt_class = None
    box_model = None
    zero_classes: tuple = ()
    if settings.use_class_rewt:
        src_ds = instances_to_dataset(source_train, classes, "source")
        tgt_ds = instances_to_dataset(target_train, classes, "target")
        cw_s = inverse_frequency_weights(class_counts(src_ds), "source")
        cw_t = inverse_frequency_weights(class_counts(tgt_ds), "target")
        src_class = cw_s.weights
        tgt_class = cw_t.weights
        zero_classes = tuple(
            int(c)
            for c in sorted(
                set(np.flatnonzero(cw_s.zero_count)) | set(np.flatnonzero(cw_t.zero_count))
            )
        )
        w_src = src_class[_instance_class_array(source_train)].copy()
        w_tgt = tgt_class[_instance_class_array(target_train)].copy()
    if settings.use_box_rewt:
        src_ds = instances_to_dataset(source_train, classes, "source")
        tgt_ds = instances_to_dataset(target_train, classes, "target")
        box_model = fit_box_ratio_model(src_ds, tgt_ds)
        v = np.ones(len(source_train))
        by_class: dict[int, list] = {}
        for i, inst in enumerate(source_train):
            by_class.setdefault(inst.box.class_id, []).append(i)
        for class_id, idx in by_class.items():
            sizes = np.array([[source_train[i].box.w, source_train[i].box.h] for i in idx])
            locs = np.array([[source_train[i].box.cx, source_train[i].box.cy] for i in idx])
            values, _, _ = box_model.evaluate_class(class_id, sizes, locs, smoothed=True)
            v[np.array(idx, dtype=int)] = values
        w_src = w_src * v
    return TrainingWeights(
        source=w_src,
        target=w_tgt,
        source_class=src_class,
        target_class=tgt_class,
        box_model=box_model,
        zero_count_classes=zero_classes,
    )


# ---------------------------------------------------------------------------
# Objective.


def care_objective(
    model: ToyModel,
    source_batch: list,
    target_batch: list,
    weights: tuple,
    lam: float,
    alignment: str = "cycle",
    symmetric: bool = False,
    cap: int | None = None,
) -> tuple[float, dict, dict]:
    """Three-part objective on one mixed batch, with exact gradients.

    ``weights`` is (per-source-instance, per-target-instance) arrays.
    Detection terms are averaged over the combined batch size so that unit
    weights and lam=0 reproduce the plain mixing objective exactly. Returns
    (total, breakdown, parameter gradients); the breakdown parts sum to the
    total by construction.
    """
    w_src, w_tgt = weights
    n = len(source_batch) + len(target_batch)
    if n == 0:
        raise ValueError("need at least one instance across the two batches")
    inv = 1.0 / n
    batch = [(inst, float(w) * inv) for inst, w in zip(source_batch, w_src)]
    batch += [(inst, float(w) * inv) for inst, w in zip(target_batch, w_tgt)]
    use_alignment = alignment != "none" and lam != 0.0 and len(target_batch) > 0
    result = model_gradients(
        model,
        batch,
        lam=lam if use_alignment else 0.0,
        alignment=alignment if use_alignment else "none",
        symmetric=symmetric,
        cap=cap,
    )
    n_s = len(source_batch)
    losses = result.per_instance_losses
    term1 = float(np.asarray(w_src, dtype=float) @ losses[:n_s]) * inv if n_s else 0.0
    term2 = float(np.asarray(w_tgt, dtype=float) @ losses[n_s:]) * inv if len(target_batch) else 0.0
    term3 = result.alignment_loss if use_alignment else 0.0
    total = term1 + term2 + lam * term3
    breakdown = {
        "source_det": term1,
        "target_det": term2,
        "alignment": term3,
        "total": total,
    }
    return total, breakdown, result.gradients


# ---------------------------------------------------------------------------
# Reports.


@dataclass
class TrainReport:
    config: dict
    seed: int
    loss_history: list
    metrics: dict
    stats_meta: dict
    param_digest: str
    phase_switch_digest: str | None
    wall_time_s: float

    def to_dict(self, include_history: bool = True) -> dict:
        d = {
            "config": self.config,
            "seed": self.seed,
            "metrics": self.metrics,
            "stats_meta": self.stats_meta,
            "param_digest": self.param_digest,
            "phase_switch_digest": self.phase_switch_digest,
            "wall_time_s": self.wall_time_s,
        }
        if include_history:
            d["loss_history"] = self.loss_history
        return d


def params_digest(model: ToyModel) -> str:
    return hashlib.sha256(model.flat().tobytes()).hexdigest()


def _subsample_instances(instances: list, fraction: float, rng) -> list:
    if fraction >= 1.0:
        return list(instances)
    k = math.ceil(fraction * len(instances))
    idx = np.sort(rng.choice(len(instances), size=k, replace=False))
    return [instances[i] for i in idx]


def split_target(instances: list, test_fraction: float, train_fraction: float, seed: int):
    """Held-out test split first, then training subsample of the remainder."""
    n = len(instances)
    perm = np.random.default_rng([seed, 12]).permutation(n)
    n_test = int(round(test_fraction * n))
    n_test = min(max(n_test, 1), n - 1)
    test = [instances[i] for i in perm[:n_test]]
    pool = [instances[i] for i in perm[n_test:]]
    train = _subsample_instances(pool, train_fraction, np.random.default_rng([seed, 13]))
    return train, test


def evaluate(model: ToyModel, instances: list, classes, target_class_weights=None) -> dict:
    """Target metrics: accuracies, box error, weighted/unweighted risks."""
    from .toy_detect import det_loss_batch

    x = np.stack([inst.feature for inst in instances])
    class_ids = _instance_class_array(instances)
    box_targets = np.array([[i.box.cx, i.box.cy, i.box.w, i.box.h] for i in instances])
    _, embed = encode(model, x)
    logits, pred_boxes = heads(model, embed)
    pred = logits.argmax(axis=1)
    correct = pred == class_ids
    per_class = {}
    accs = []
    for c, name in enumerate(classes):
        mask = class_ids == c
        if mask.any():
            acc = float(correct[mask].mean())
            per_class[name] = acc
            accs.append(acc)
    losses, _, _ = det_loss_batch(logits, pred_boxes, class_ids, box_targets)
    t = pred_boxes - box_targets
    box_term = np.sum(np.where(np.abs(t) < 1.0, 0.5 * t * t, np.abs(t) - 0.5), axis=1)
    risk_unweighted = float(losses.mean())
    if target_class_weights is not None:
        w = target_class_weights[class_ids]
        risk_weighted = float((w * losses).mean())
    else:
        risk_weighted = risk_unweighted
    return {
        "overall_accuracy": float(correct.mean()),
        "balanced_accuracy": float(np.mean(accs)),
        "per_class_accuracy": per_class,
        "mean_box_smooth_l1": float(box_term.mean()),
        "target_risk_unweighted": risk_unweighted,
        "target_risk_weighted": risk_weighted,
    }


def _sample_batch(instances: list, size: int, stream) -> list:
    idx = np.random.default_rng(stream).integers(0, len(instances), size=size)
    return [instances[i] for i in idx]


def train(
    config: CareConfig,
    source: list | None = None,
    target: list | None = None,
    target_test: list | None = None,
    trajectory_hook=None,
) -> TrainReport:
    """Run one configuration to completion; deterministic per seed.

    Data not passed in is generated from the configured task fixture. When
    ``target`` is provided without ``target_test``, it is split here so the
    held-out instances never reach training or statistics fitting.
    ``trajectory_hook(step, model)`` runs after each parameter update.
    """
    from .toy_detect import generate_domain

    config.validate()
    settings = config.resolved()
    spec = config.task_spec()
    seed = config.seed
    t0 = time.perf_counter()

    if source is None:
        source = generate_domain(spec, "source", config.source_n, [seed, 10])
    if target is None:
        pool = generate_domain(spec, "target", config.target_n, [seed, 11])
    else:
        pool = target
    if target_test is None:
        target_train, target_test = split_target(
            pool, config.target_test_fraction, config.target_train_fraction, seed
        )
    else:
        target_train = pool

    needs_weights = settings.use_class_rewt or settings.use_box_rewt
    if needs_weights:
        weights = fit_training_weights(source, target_train, spec.classes, settings)
    else:
        weights = TrainingWeights(
            source=np.ones(len(source)),
            target=np.ones(len(target_train)),
            source_class=None,
            target_class=None,
            box_model=None,
        )

    model = init_model(spec.raw_dim, config.hidden_dim, config.embed_dim, spec.num_classes, [seed, 0])
    velocity = {name: np.zeros_like(arr) for name, arr in model.param_items()}
    half = config.steps // 2
    n_src_batch = int(round(config.batch_size * config.source_fraction))
    n_src_batch = min(max(n_src_batch, 1), config.batch_size - 1)
    n_tgt_batch = config.batch_size - n_src_batch

    history = []
    phase_switch_digest = None
    for step in range(config.steps):
        if config.method == "source_only":
            mode = "source"
        elif config.method == "target_only":
            mode = "target"
        elif config.method == "seq_ft":
            mode = "source" if step < half else "target"
        else:
            mode = "both"

        if mode == "source":
            src_batch = _sample_batch(source, config.batch_size, [seed, 1, step])
            tgt_batch = []
        elif mode == "target":
            src_batch = []
            tgt_batch = _sample_batch(target_train, config.batch_size, [seed, 2, step])
        else:
            src_idx = np.random.default_rng([seed, 1, step]).integers(0, len(source), size=n_src_batch)
            tgt_idx = np.random.default_rng([seed, 2, step]).integers(0, len(target_train), size=n_tgt_batch)
            src_batch = [source[i] for i in src_idx]
            tgt_batch = [target_train[i] for i in tgt_idx]

        if mode == "both":
            w_src = weights.source[src_idx]
            w_tgt = weights.target[tgt_idx]
        else:
            w_src = np.ones(len(src_batch))
            w_tgt = np.ones(len(tgt_batch))

        total, breakdown, grads = care_objective(
            model, src_batch, tgt_batch, (w_src, w_tgt), settings.lam, settings.alignment,
            symmetric=config.symmetric_alignment, cap=config.alignment_cap,
        )
        for name, arr in model.param_items():
            v = velocity[name]
            v *= config.momentum
            v += grads[name]
            arr -= config.learning_rate * v
        history.append({"step": step, **breakdown})
        if config.method == "seq_ft" and step == half - 1:
            phase_switch_digest = params_digest(model)
        if trajectory_hook is not None:
            trajectory_hook(step, model)

    metrics = evaluate(model, target_test, spec.classes, weights.target_class)
    wall = time.perf_counter() - t0
    stats_meta = {
        "source_train_n": len(source),
        "target_train_n": len(target_train),
        "target_test_n": len(target_test),
        "weights_fitted_on_test_split": False,
        "class_weighting": settings.use_class_rewt,
        "box_weighting": settings.use_box_rewt,
        "alignment": settings.alignment,
        "lambda_effective": settings.lam,
        "zero_count_classes": list(weights.zero_count_classes),
    }
    return TrainReport(
        config=config.to_dict(),
        seed=seed,
        loss_history=history,
        metrics=metrics,
        stats_meta=stats_meta,
        param_digest=params_digest(model),
        phase_switch_digest=phase_switch_digest,
        wall_time_s=wall,
    )


# ---------------------------------------------------------------------------
# Ablation bench.

BENCH_ROWS = (
    ("mixing", {"method": "mixing"}),
    ("mixing+mmd", {"method": "s_mmd"}),
    ("mixing+cycle", {"method": "mixing", "alignment": "cycle"}),
    ("mixing+class_weights", {"method": "mixing", "use_class_rewt": True}),
    ("mixing+cycle+class_weights", {"method": "mixing", "alignment": "cycle", "use_class_rewt": True}),
    ("care", {"method": "care"}),
)

BENCH_METRICS = ("balanced_accuracy", "overall_accuracy", "mean_box_smooth_l1")


def bench_thread_budget() -> int:
    """Worker cap from CARE_THREADS; defaults to 1 (fully sequential)."""
    raw = os.environ.get("CARE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"CARE_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("CARE_THREADS must be >= 1")
    return n


def bench(base: CareConfig, seeds) -> dict:
    """Fixed six-row ablation grid over the seed list; rows never reorder.

    Cells with the same seed share generated data (the batch and data
    streams depend only on the seed), so per-seed comparisons are paired.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("bench needs at least one seed")
    jobs = []
    for row_idx, (label, overrides) in enumerate(BENCH_ROWS):
        for seed in seeds:
            cfg = replace(
                base,
                seed=seed,
                method=overrides.get("method", "mixing"),
                alignment=overrides.get("alignment"),
                use_class_rewt=overrides.get("use_class_rewt"),
                use_box_rewt=overrides.get("use_box_rewt"),
            )
            cfg.validate()
            jobs.append((row_idx, seed, cfg))

    results: dict[tuple, TrainReport] = {}
    workers = bench_thread_budget()
    if workers == 1:
        for row_idx, seed, cfg in jobs:
            results[(row_idx, seed)] = train(cfg)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(train, cfg): (row_idx, seed) for row_idx, seed, cfg in jobs
            }
            for fut, key in futures.items():
                results[key] = fut.result()

    rows = []
    for row_idx, (label, overrides) in enumerate(BENCH_ROWS):
        reports = [results[(row_idx, seed)] for seed in seeds]
        per_seed = {
            str(seed): {m: rep.metrics[m] for m in BENCH_METRICS}
            for seed, rep in zip(seeds, reports)
        }
        summary = {}
        for m in BENCH_METRICS:
            vals = np.array([rep.metrics[m] for rep in reports])
            summary[m] = {
                "median": float(np.median(vals)),
                "min": float(vals.min()),
                "max": float(vals.max()),
            }
        rows.append({
            "label": label,
            "overrides": overrides,
            "per_seed": per_seed,
            "summary": summary,
        })
    return {
        "schema_version": 1,
        "base_config": base.to_dict(),
        "seeds": seeds,
        "rows": rows,
    }


def render_bench_table(result: dict) -> str:
    """Aligned text table of the bench grid (median [min, max] per metric)."""
    headers = ["row"] + [m for m in BENCH_METRICS]
    lines = []
    body = []
    for row in result["rows"]:
        cells = [row["label"]]
        for m in BENCH_METRICS:
            s = row["summary"][m]
            cells.append(f"{s['median']:.4f} [{s['min']:.4f}, {s['max']:.4f}]")
        body.append(cells)
    widths = [max(len(headers[i]), *(len(r[i]) for r in body)) for i in range(len(headers))]
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    lines.append("  ".join("-" * w for w in widths))
    for cells in body:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(cells)))
    return "\n".join(lines) + "\n"

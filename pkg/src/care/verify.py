"""Exact finite-support check of the reweighting identity.

On a finite joint distribution over (appearance, box bin, class) the
reweighted source risk with exact inverse-class-frequency and box-ratio
weights must equal the appearance-ratio-corrected target risk exactly (up
to float rounding). Forcing the two domains to share the appearance
conditional makes the plain inverse-frequency target risk match as well.
Everything here is computed by direct summation over the support — no
sampling, no estimation — so discrepancies are pure arithmetic noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .content_stats import Smoothing

PROB_FLOOR = 1e-3


@dataclass(frozen=True)
class DiscreteJointDistribution:
    """Joint P(appearance, box, class) on axes (0, 1, 2)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 3:
            raise ValueError("probs must have shape (appearance, box, class)")
        if np.any(p <= 0):
            raise ValueError("all cells must have positive probability")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple:
        return self.probs.shape

    def class_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=(0, 1))

    def box_class_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    def box_given_class(self) -> np.ndarray:
        return self.box_class_marginal() / self.class_marginal()

    def appearance_given_box_class(self) -> np.ndarray:
        return self.probs / self.box_class_marginal()


def random_joint(rng, shape: tuple) -> DiscreteJointDistribution:
    """Uniform random cells floored at PROB_FLOOR, then renormalized."""
    cells = np.maximum(rng.random(shape), PROB_FLOOR)
    return DiscreteJointDistribution(cells / cells.sum())


def random_loss_table(rng, shape: tuple, low: float = 0.0, high: float = 10.0) -> np.ndarray:
    return rng.uniform(low, high, size=shape)


def exact_weights(source: DiscreteJointDistribution, target: DiscreteJointDistribution):
    """Exact weight tables: w(c) = 1 / P_S(c) and v(b, c) = P_T(b|c) / P_S(b|c).

    No estimation and no smoothing — these are the quantities the
    production KDE path approximates.
    """
    w = 1.0 / source.class_marginal()
    v = target.box_given_class() / source.box_given_class()
    return w, v


def lhs_reweighted_source_risk(
    source: DiscreteJointDistribution,
    weights: tuple,
    loss: np.ndarray,
) -> float:
    """E_S[w_S(C) * v(B|C) * loss] with precomputed exact weight tables."""
    w, v = weights
    return float(np.sum(source.probs * (w * v)[None, :, :] * loss))


def rhs_target_reference_risk(
    source: DiscreteJointDistribution,
    target: DiscreteJointDistribution,
    loss: np.ndarray,
) -> float:
    """E_T[(P_S(A|B,C) / P_T(A|B,C)) * (1 / P_T(C)) * loss]."""
    ratio = source.appearance_given_box_class() / target.appearance_given_box_class()
    w = 1.0 / target.class_marginal()
    return float(np.sum(target.probs * ratio * w[None, None, :] * loss))


def plain_weighted_risk(dist: DiscreteJointDistribution, loss: np.ndarray) -> float:
    """E[(1 / P(C)) * loss] under one distribution, no appearance correction."""
    w = 1.0 / dist.class_marginal()
    return float(np.sum(dist.probs * w[None, None, :] * loss))


def forced_equal_appearance(
    source: DiscreteJointDistribution,
    target: DiscreteJointDistribution,
) -> DiscreteJointDistribution:
    """Replace the target's appearance conditional with the source's.

    P'(a, b, c) = P_S(a | b, c) * P_T(b, c); marginals over (b, c) are
    untouched, so content statistics are the target's while appearance
    given content is the source's.
    """
    cond = source.appearance_given_box_class()
    return DiscreteJointDistribution(cond * target.box_class_marginal()[None, :, :])


@dataclass(frozen=True)
class PairReport:
    support: tuple
    lhs: float
    rhs: float
    discrepancy: float
    forced_rhs: float
    forced_discrepancy: float
    smoothed_lhs: float
    smoothed_gap: float

    def to_dict(self) -> dict:
        return {
            "support": list(self.support),
            "lhs_reweighted_source_risk": self.lhs,
            "rhs_target_reference_risk": self.rhs,
            "discrepancy": self.discrepancy,
            "forced_equal_appearance_rhs": self.forced_rhs,
            "forced_equal_appearance_discrepancy": self.forced_discrepancy,
            "smoothed_lhs": self.smoothed_lhs,
            "smoothed_gap": self.smoothed_gap,
        }


def smoothed_source_risk(
    source: DiscreteJointDistribution,
    target: DiscreteJointDistribution,
    loss: np.ndarray,
    smoothing: Smoothing,
) -> float:
    """Same LHS but with the bounded surrogate in place of the raw ratio.

    The surrogate is deliberately not an unbiased estimate, so this only
    feeds an informational gap in the report, never an assertion.
    """
    w, raw = exact_weights(source, target)
    v = smoothing.weight(raw, target.box_given_class())
    return float(np.sum(source.probs * (w * v)[None, :, :] * loss))


def pair_report(
    source: DiscreteJointDistribution,
    target: DiscreteJointDistribution,
    loss: np.ndarray,
    smoothing: Smoothing | None = None,
) -> PairReport:
    if source.shape != target.shape or loss.shape != source.shape:
        raise ValueError("source, target, and loss table must share one support shape")
    lhs = lhs_reweighted_source_risk(source, exact_weights(source, target), loss)
    rhs = rhs_target_reference_risk(source, target, loss)
    forced = forced_equal_appearance(source, target)
    forced_rhs = plain_weighted_risk(forced, loss)
    smoothing = smoothing or Smoothing()
    smoothed = smoothed_source_risk(source, target, loss, smoothing)
    return PairReport(
        support=source.shape,
        lhs=lhs,
        rhs=rhs,
        discrepancy=abs(lhs - rhs),
        forced_rhs=forced_rhs,
        forced_discrepancy=abs(lhs - forced_rhs),
        smoothed_lhs=smoothed,
        smoothed_gap=abs(smoothed - rhs),
    )


def identity_report(trials: int, seed: int, max_support: int = 4) -> dict:
    """Randomized identity sweep over supports in [2, max_support]^3.

    Every trial draws a fresh source/target pair and loss table, then
    compares the reweighted source risk with the target reference risk by
    direct summation. Deterministic per seed.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if max_support < 2:
        raise ValueError("max_support must be >= 2")
    rng = np.random.default_rng(seed)
    discrepancies = np.empty(trials)
    forced = np.empty(trials)
    smoothed_gaps = np.empty(trials)
    for t in range(trials):
        shape = tuple(rng.integers(2, max_support + 1, size=3))
        source = random_joint(rng, shape)
        target = random_joint(rng, shape)
        loss = random_loss_table(rng, shape)
        rep = pair_report(source, target, loss)
        discrepancies[t] = rep.discrepancy
        forced[t] = rep.forced_discrepancy
        smoothed_gaps[t] = rep.smoothed_gap
    return {
        "trials": trials,
        "seed": seed,
        "max_support": max_support,
        "max_discrepancy": float(discrepancies.max()),
        "mean_discrepancy": float(discrepancies.mean()),
        "max_forced_discrepancy": float(forced.max()),
        "mean_forced_discrepancy": float(forced.mean()),
        "smoothed_gap_min": float(smoothed_gaps.min()),
        "smoothed_gap_max": float(smoothed_gaps.max()),
        "smoothed_gap_mean": float(smoothed_gaps.mean()),
    }

"""Finite-support reweighting identity checks.

The key oracle: both sides of the identity reduce to
sum_{a,b,c} P_S(a|b,c) * P_T(b|c) * loss(a,b,c), which this file computes
with explicit triple loops and compares against the library's two
formulations.
"""

from __future__ import annotations

import numpy as np
import pytest

from care.content_stats import Smoothing
from care.verify import (
    PROB_FLOOR,
    DiscreteJointDistribution,
    exact_weights,
    forced_equal_appearance,
    identity_report,
    lhs_reweighted_source_risk,
    pair_report,
    plain_weighted_risk,
    random_joint,
    random_loss_table,
    rhs_target_reference_risk,
    smoothed_source_risk,
)


def oracle_identity_value(source, target, loss):
    """Independent evaluation of the common value of both risk formulas."""
    p_s, p_t = source.probs, target.probs
    total = 0.0
    for a in range(p_s.shape[0]):
        for b in range(p_s.shape[1]):
            for c in range(p_s.shape[2]):
                ps_bc = p_s[:, b, c].sum()
                pt_bc = p_t[:, b, c].sum()
                pt_c = p_t[:, :, c].sum()
                total += (p_s[a, b, c] / ps_bc) * (pt_bc / pt_c) * loss[a, b, c]
    return total


class TestDistribution:
    def test_rejects_nonpositive_cells(self):
        p = np.full((2, 2, 2), 0.125)
        p[0, 0, 0] = 0.0
        p[1, 1, 1] = 0.25
        with pytest.raises(ValueError, match="positive"):
            DiscreteJointDistribution(p)

    def test_rejects_bad_total(self):
        with pytest.raises(ValueError, match="sum"):
            DiscreteJointDistribution(np.full((2, 2, 2), 0.2))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError, match="shape"):
            DiscreteJointDistribution(np.full((2, 2), 0.25))

    def test_marginals_consistent(self):
        rng = np.random.default_rng(0)
        d = random_joint(rng, (3, 4, 2))
        assert d.class_marginal() == pytest.approx(d.probs.sum(axis=(0, 1)))
        assert np.allclose(d.box_class_marginal().sum(axis=0), d.class_marginal())
        # conditionals renormalize exactly
        assert np.allclose(d.box_given_class().sum(axis=0), 1.0)
        assert np.allclose(d.appearance_given_box_class().sum(axis=0), 1.0)

    def test_random_joint_respects_floor_and_determinism(self):
        a = random_joint(np.random.default_rng(5), (3, 3, 3))
        b = random_joint(np.random.default_rng(5), (3, 3, 3))
        assert np.array_equal(a.probs, b.probs)
        assert a.probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert a.probs.min() >= PROB_FLOOR / (27 * 1.0)  # renormalized floor


class TestExactWeights:
    def test_hand_values_on_uniform_source(self):
        source = DiscreteJointDistribution(np.full((2, 2, 2), 0.125))
        box_class = np.array([[0.1, 0.2], [0.4, 0.3]])  # (b, c), columns sum to 0.5
        target = DiscreteJointDistribution(np.broadcast_to(box_class / 2, (2, 2, 2)).copy())
        w, v = exact_weights(source, target)
        assert np.allclose(w, [2.0, 2.0])
        assert np.allclose(v, [[0.4, 0.8], [1.6, 1.2]])

    def test_equal_distributions_give_unit_box_ratios(self):
        d = random_joint(np.random.default_rng(1), (2, 3, 2))
        w, v = exact_weights(d, d)
        assert np.allclose(v, 1.0)
        assert np.allclose(w, 1.0 / d.class_marginal())


class TestIdentity:
    def test_both_sides_match_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            shape = tuple(rng.integers(2, 5, size=3))
            source = random_joint(rng, shape)
            target = random_joint(rng, shape)
            loss = random_loss_table(rng, shape)
            expected = oracle_identity_value(source, target, loss)
            lhs = lhs_reweighted_source_risk(source, exact_weights(source, target), loss)
            rhs = rhs_target_reference_risk(source, target, loss)
            assert lhs == pytest.approx(expected, abs=1e-11)
            assert rhs == pytest.approx(expected, abs=1e-11)

    def test_linear_in_the_loss_table(self):
        rng = np.random.default_rng(3)
        source = random_joint(rng, (3, 3, 3))
        target = random_joint(rng, (3, 3, 3))
        l1 = random_loss_table(rng, (3, 3, 3))
        l2 = random_loss_table(rng, (3, 3, 3))
        w = exact_weights(source, target)
        combo = lhs_reweighted_source_risk(source, w, 2.0 * l1 + 0.5 * l2)
        parts = 2.0 * lhs_reweighted_source_risk(source, w, l1) + 0.5 * lhs_reweighted_source_risk(source, w, l2)
        assert combo == pytest.approx(parts, rel=1e-12)

    def test_equal_domains_reduce_to_plain_weighted_risk(self):
        rng = np.random.default_rng(4)
        d = random_joint(rng, (2, 2, 3))
        loss = random_loss_table(rng, (2, 2, 3))
        rep = pair_report(d, d, loss)
        plain = plain_weighted_risk(d, loss)
        assert rep.lhs == pytest.approx(plain, rel=1e-12)
        assert rep.discrepancy < 1e-12
        assert rep.forced_discrepancy < 1e-12

    def test_zero_loss_gives_zero_risks(self):
        rng = np.random.default_rng(5)
        source = random_joint(rng, (2, 2, 2))
        target = random_joint(rng, (2, 2, 2))
        rep = pair_report(source, target, np.zeros((2, 2, 2)))
        assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.discrepancy == 0.0


class TestForcedEqualAppearance:
    def test_keeps_target_content_and_source_appearance(self):
        rng = np.random.default_rng(6)
        source = random_joint(rng, (3, 2, 2))
        target = random_joint(rng, (3, 2, 2))
        forced = forced_equal_appearance(source, target)
        assert np.allclose(forced.box_class_marginal(), target.box_class_marginal(), atol=1e-15)
        assert np.allclose(
            forced.appearance_given_box_class(),
            source.appearance_given_box_class(),
            atol=1e-13,
        )

    def test_plain_weighted_risk_matches_lhs_after_forcing(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            shape = tuple(rng.integers(2, 4, size=3))
            source = random_joint(rng, shape)
            target = random_joint(rng, shape)
            loss = random_loss_table(rng, shape)
            lhs = lhs_reweighted_source_risk(source, exact_weights(source, target), loss)
            forced_rhs = plain_weighted_risk(forced_equal_appearance(source, target), loss)
            assert abs(lhs - forced_rhs) < 1e-11


class TestPairReport:
    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(8)
        a = random_joint(rng, (2, 2, 2))
        b = random_joint(rng, (2, 2, 3))
        with pytest.raises(ValueError, match="support"):
            pair_report(a, b, np.zeros((2, 2, 2)))
        with pytest.raises(ValueError, match="support"):
            pair_report(a, a, np.zeros((2, 2, 3)))

    def test_smoothed_field_matches_direct_computation(self):
        rng = np.random.default_rng(9)
        source = random_joint(rng, (2, 3, 2))
        target = random_joint(rng, (2, 3, 2))
        loss = random_loss_table(rng, (2, 3, 2))
        rep = pair_report(source, target, loss)
        direct = smoothed_source_risk(source, target, loss, Smoothing())
        assert rep.smoothed_lhs == direct
        assert rep.smoothed_gap == abs(direct - rep.rhs)

    def test_to_dict_round_trips_every_field(self):
        rng = np.random.default_rng(10)
        rep = pair_report(
            random_joint(rng, (2, 2, 2)),
            random_joint(rng, (2, 2, 2)),
            random_loss_table(rng, (2, 2, 2)),
        )
        d = rep.to_dict()
        assert d["support"] == [2, 2, 2]
        assert d["discrepancy"] == rep.discrepancy
        assert d["forced_equal_appearance_discrepancy"] == rep.forced_discrepancy
        assert d["smoothed_gap"] == rep.smoothed_gap


class TestIdentityReport:
    def test_small_sweep_is_exact_and_deterministic(self):
        rep = identity_report(trials=60, seed=123)
        again = identity_report(trials=60, seed=123)
        assert rep == again
        assert rep["trials"] == 60
        assert rep["max_discrepancy"] < 1e-10
        assert rep["max_forced_discrepancy"] < 1e-10
        # the bounded surrogate is biased: the informational gap is not tiny
        assert rep["smoothed_gap_max"] > rep["max_discrepancy"]

    def test_seed_changes_draws(self):
        assert identity_report(20, seed=0) != identity_report(20, seed=1)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="trials"):
            identity_report(0, seed=0)
        with pytest.raises(ValueError, match="max_support"):
            identity_report(5, seed=0, max_support=1)

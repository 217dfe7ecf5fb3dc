"""Synthetic two-domain detection task: generator, model, losses, gradients.

The full objective gradient (detection + alignment through the shared
encoder) is validated against central finite differences over every model
parameter.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from care.annotations import BoxAnnotation, validate
from care.toy_detect import (
    PARAM_NAMES,
    TOY_FIXTURES,
    DomainParams,
    ToyDomainSpec,
    det_loss,
    det_loss_batch,
    encode,
    forward,
    generate_domain,
    heads,
    imbalanced_shift_spec,
    init_model,
    instances_to_dataset,
    model_gradients,
    predict_classes,
    separable_spec,
    write_feature_csv,
    zero_model,
)


def tiny_spec(box_coupling=0.5) -> ToyDomainSpec:
    """Small two-class task used for gradient checks."""
    rng = np.random.default_rng(99)
    latents = np.array([[2.0, 0.0], [0.0, 2.0]])

    def domain(bias_scale):
        return DomainParams(
            class_probs=np.array([0.5, 0.5]),
            size_log_mean=np.log(np.full((2, 2), 0.1)),
            size_log_sigma=np.full((2, 2), 0.3),
            loc_mean=np.full((2, 2), 0.5),
            loc_sigma=np.full((2, 2), 0.1),
            feature_map=rng.normal(size=(3, 2)),
            feature_bias=rng.normal(0, bias_scale, size=3),
            noise_sigma=0.3,
        )

    return ToyDomainSpec(
        classes=("a", "b"),
        latent_dim=2,
        raw_dim=3,
        class_latents=latents,
        source=domain(0.0),
        target=domain(0.5),
        box_coupling=box_coupling,
    )


def mixed_batch(spec, n_source=6, n_target=5, seed=0, weight_seed=1):
    src = generate_domain(spec, "source", n_source, seed)
    tgt = generate_domain(spec, "target", n_target, seed + 1000)
    rng = np.random.default_rng(weight_seed)
    instances = src + tgt
    weights = rng.uniform(0.5, 3.0, size=len(instances))
    return [(inst, float(w)) for inst, w in zip(instances, weights)]


def parameter_fd_error(model, batch, step=1e-5, **kwargs):
    """Max relative error of model_gradients vs central differences."""
    analytic = model_gradients(model, batch, **kwargs).gradients
    worst = 0.0
    for name in PARAM_NAMES:
        arr = getattr(model, name)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            up = model_gradients(model, batch, **kwargs).total
            arr[idx] = orig - step
            down = model_gradients(model, batch, **kwargs).total
            arr[idx] = orig
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(analytic[name][idx] - fd) / max(1.0, abs(fd)))
    return worst


class TestGenerator:
    def test_deterministic_per_seed(self):
        spec = tiny_spec()
        a = generate_domain(spec, "source", 20, 42)
        b = generate_domain(spec, "source", 20, 42)
        c = generate_domain(spec, "source", 20, 43)
        assert all(np.array_equal(x.feature, y.feature) for x, y in zip(a, b))
        assert all(x.box == y.box for x, y in zip(a, b))
        assert any(not np.array_equal(x.feature, y.feature) for x, y in zip(a, c))

    def test_boxes_always_valid(self):
        spec = imbalanced_shift_spec()
        for domain in ("source", "target"):
            for inst in generate_domain(spec, domain, 800, 7):
                b = inst.box
                assert 0.0 < b.w <= 1.0 and 0.0 < b.h <= 1.0
                assert b.w / 2 <= b.cx <= 1.0 - b.w / 2
                assert b.h / 2 <= b.cy <= 1.0 - b.h / 2

    def test_class_frequencies_track_probabilities(self):
        spec = imbalanced_shift_spec()
        n = 6000
        insts = generate_domain(spec, "target", n, 11)
        counts = np.bincount([i.box.class_id for i in insts], minlength=3)
        probs = spec.target.class_probs
        sigma = np.sqrt(n * probs * (1 - probs))
        assert np.all(np.abs(counts - n * probs) < 5 * sigma)

    def test_box_coupling_changes_features_not_boxes(self):
        coupled = tiny_spec(box_coupling=0.8)
        plain = dataclasses.replace(coupled, box_coupling=0.0)
        a = generate_domain(coupled, "source", 15, 3)
        b = generate_domain(plain, "source", 15, 3)
        assert all(x.box == y.box for x, y in zip(a, b))
        assert any(not np.array_equal(x.feature, y.feature) for x, y in zip(a, b))

    def test_empty_request(self):
        assert generate_domain(tiny_spec(), "source", 0, 0) == []

    def test_unknown_domain_rejected(self):
        with pytest.raises(ValueError, match="domain"):
            generate_domain(tiny_spec(), "val", 5, 0)

    def test_instances_to_dataset_valid(self):
        spec = tiny_spec()
        insts = generate_domain(spec, "target", 12, 5)
        ds = instances_to_dataset(insts, spec.classes, "target")
        assert len(ds.annotations) == 12 and len(ds.images) == 12
        assert validate(ds) == []
        assert ds.annotations[0].image_id == "target-img-000000"

    def test_feature_csv(self, tmp_path):
        spec = tiny_spec()
        insts = generate_domain(spec, "source", 4, 5)
        path = tmp_path / "features.csv"
        write_feature_csv(insts, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "image_id,f0,f1,f2"
        assert len(lines) == 5
        values = [float(v) for v in lines[1].split(",")[1:]]
        assert np.allclose(values, insts[0].feature)


class TestSpecSerialization:
    @pytest.mark.parametrize("factory", [tiny_spec, imbalanced_shift_spec, separable_spec])
    def test_round_trip(self, factory):
        spec = factory()
        again = ToyDomainSpec.from_dict(spec.to_dict())
        assert again.classes == spec.classes
        assert again.box_coupling == spec.box_coupling
        assert np.array_equal(again.class_latents, spec.class_latents)
        assert np.array_equal(again.source.feature_map, spec.source.feature_map)
        assert np.array_equal(again.target.feature_bias, spec.target.feature_bias)

    def test_validate_rejects_bad_probs(self):
        spec = tiny_spec()
        bad = dataclasses.replace(
            spec, source=dataclasses.replace(spec.source, class_probs=np.array([0.7, 0.7]))
        )
        with pytest.raises(ValueError, match="simplex"):
            bad.validate()

    def test_validate_rejects_nonpositive_sigma(self):
        spec = tiny_spec()
        bad = dataclasses.replace(
            spec, target=dataclasses.replace(spec.target, noise_sigma=0.0)
        )
        with pytest.raises(ValueError, match="positive"):
            bad.validate()

    def test_validate_rejects_latent_shape_mismatch(self):
        bad = dataclasses.replace(tiny_spec(), class_latents=np.zeros((3, 2)))
        with pytest.raises(ValueError, match="class_latents"):
            bad.validate()

    def test_fixture_registry(self):
        assert set(TOY_FIXTURES) == {"imbalanced_shift", "separable"}
        for factory in TOY_FIXTURES.values():
            factory().validate()


class TestDetectionLoss:
    def test_uniform_logits_give_log_k(self):
        box = np.array([0.5, 0.5, 0.1, 0.1])
        loss = det_loss(np.zeros(2), box.copy(), box, class_id=0)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)
        loss3 = det_loss(np.full(3, 7.0), box.copy(), box, class_id=2)
        assert loss3 == pytest.approx(math.log(3.0), abs=1e-12)

    def test_smooth_l1_quadratic_branch(self):
        box = np.array([0.5, 0.5, 0.1, 0.1])
        pred = box + np.array([0.5, 0.0, 0.0, 0.0])
        loss = det_loss(np.array([10.0, -10.0]), pred, box, class_id=0)
        # CE is ~2e-9 here; the box term is 0.5 * 0.5^2 = 0.125
        assert loss == pytest.approx(0.125, abs=1e-8)

    def test_smooth_l1_linear_branch(self):
        box = np.zeros(4)
        pred = np.array([2.0, 0.0, 0.0, 0.0])
        loss = det_loss(np.array([10.0, -10.0]), pred, box, class_id=0)
        assert loss == pytest.approx(1.5, abs=1e-8)  # |t| - 0.5 at t = 2

    def test_accepts_box_annotation(self):
        ann = BoxAnnotation("img", 1, 0.4, 0.6, 0.2, 0.3)
        arr = np.array([ann.cx, ann.cy, ann.w, ann.h])
        logits = np.array([0.3, -0.2])
        pred = np.array([0.5, 0.5, 0.25, 0.25])
        assert det_loss(logits, pred, ann, 1) == det_loss(logits, pred, arr, 1)

    def test_batch_matches_single_instance_loop(self):
        rng = np.random.default_rng(0)
        n, k = 9, 3
        logits = rng.normal(size=(n, k))
        pred = rng.normal(size=(n, 4))
        targets = rng.uniform(0, 1, size=(n, 4))
        ids = rng.integers(0, k, size=n)
        losses, _, _ = det_loss_batch(logits, pred, ids, targets)
        for i in range(n):
            assert losses[i] == pytest.approx(det_loss(logits[i], pred[i], targets[i], ids[i]), rel=1e-12)

    def test_batch_gradients_match_central_differences(self):
        rng = np.random.default_rng(1)
        n, k = 4, 3
        logits = rng.normal(size=(n, k))
        pred = rng.normal(0, 0.4, size=(n, 4))
        targets = rng.uniform(0, 1, size=(n, 4))
        ids = rng.integers(0, k, size=n)
        _, d_logits, d_boxes = det_loss_batch(logits, pred, ids, targets)
        step = 1e-6
        for arr, grad in ((logits, d_logits), (pred, d_boxes)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + step
                up = det_loss_batch(logits, pred, ids, targets)[0].sum()
                arr[idx] = orig - step
                down = det_loss_batch(logits, pred, ids, targets)[0].sum()
                arr[idx] = orig
                fd = (up - down) / (2 * step)
                assert abs(grad[idx] - fd) < 1e-8


class TestModel:
    def test_init_shapes_and_zero_biases(self):
        model = init_model(raw_dim=5, hidden_dim=7, embed_dim=4, num_classes=3, rng=0)
        assert model.w1.shape == (7, 5) and model.w2.shape == (4, 7)
        assert model.wc.shape == (3, 4) and model.wb.shape == (4, 4)
        assert not model.b1.any() and not model.bc.any()

    def test_init_deterministic(self):
        a = init_model(5, 7, 4, 3, rng=123)
        b = init_model(5, 7, 4, 3, rng=123)
        assert np.array_equal(a.flat(), b.flat())

    def test_copy_is_deep(self):
        a = init_model(3, 3, 2, 2, rng=0)
        b = a.copy()
        b.w1[0, 0] += 1.0
        assert a.w1[0, 0] != b.w1[0, 0]

    def test_encode_hidden_is_bounded(self):
        model = init_model(3, 4, 2, 2, rng=0)
        hidden, embed = encode(model, np.random.default_rng(0).normal(0, 5, size=(10, 3)))
        assert np.all(np.abs(hidden) < 1.0)
        assert embed.shape == (10, 2)

    def test_forward_matches_encode_heads(self):
        model = init_model(3, 4, 2, 2, rng=1)
        x = np.array([0.3, -0.7, 1.1])
        embed, logits, box = forward(model, x)
        _, e2 = encode(model, x)
        l2, b2 = heads(model, e2)
        assert np.array_equal(embed, e2[0])
        assert np.array_equal(logits, l2[0])
        assert np.array_equal(box, b2[0])

    def test_zero_model_predicts_first_class(self):
        model = zero_model(3, 4, 2, 3)
        x = np.random.default_rng(0).normal(size=(6, 3))
        assert predict_classes(model, x).tolist() == [0] * 6

    def test_predict_classes_argmax(self):
        model = zero_model(2, 2, 2, 3)
        model.w2[:] = np.eye(2)
        model.w1[:] = np.eye(2) * 20.0  # saturate tanh to +/- 1
        model.wc[:] = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
        x = np.array([[5.0, -5.0], [-5.0, 5.0], [-5.0, -5.0]])
        assert predict_classes(model, x).tolist() == [0, 1, 2]


class TestObjectiveGradients:
    def test_detection_only(self):
        spec = tiny_spec()
        model = init_model(spec.raw_dim, 4, 3, spec.num_classes, rng=0)
        batch = mixed_batch(spec)
        assert parameter_fd_error(model, batch, lam=0.0) < 1e-5

    def test_cycle_alignment_path(self):
        spec = tiny_spec()
        model = init_model(spec.raw_dim, 4, 3, spec.num_classes, rng=1)
        batch = mixed_batch(spec, n_source=7, n_target=6, seed=2)
        assert parameter_fd_error(model, batch, lam=0.3, alignment="cycle") < 1e-5

    def test_mmd_alignment_path(self):
        spec = tiny_spec()
        model = init_model(spec.raw_dim, 4, 3, spec.num_classes, rng=2)
        batch = mixed_batch(spec, n_source=7, n_target=6, seed=3)
        assert parameter_fd_error(model, batch, lam=0.3, alignment="mmd") < 1e-5

    def test_symmetric_cycle_path(self):
        spec = tiny_spec()
        model = init_model(spec.raw_dim, 4, 3, spec.num_classes, rng=3)
        batch = mixed_batch(spec, n_source=6, n_target=6, seed=4)
        err = parameter_fd_error(model, batch, lam=0.3, alignment="cycle", symmetric=True)
        assert err < 1e-5

    def test_capped_alignment_path(self):
        spec = tiny_spec()
        model = init_model(spec.raw_dim, 4, 3, spec.num_classes, rng=4)
        batch = mixed_batch(spec, n_source=8, n_target=8, seed=5)
        err = parameter_fd_error(model, batch, lam=0.3, alignment="cycle", cap=2)
        assert err < 1e-5

    def test_total_is_weighted_sum_plus_alignment(self):
        spec = tiny_spec()
        model = init_model(spec.raw_dim, 4, 3, spec.num_classes, rng=5)
        batch = mixed_batch(spec)
        res = model_gradients(model, batch, lam=0.7, alignment="cycle")
        weights = np.array([w for _, w in batch])
        expected = float(weights @ res.per_instance_losses) + 0.7 * res.alignment_loss
        assert res.total == pytest.approx(expected, rel=1e-14)

    def test_per_instance_losses_match_det_loss(self):
        spec = tiny_spec()
        model = init_model(spec.raw_dim, 4, 3, spec.num_classes, rng=6)
        batch = mixed_batch(spec, n_source=4, n_target=3)
        res = model_gradients(model, batch)
        for loss, (inst, _) in zip(res.per_instance_losses, batch):
            _, logits, pred = forward(model, inst.feature)
            assert loss == pytest.approx(det_loss(logits, pred, inst.box, inst.box.class_id), rel=1e-12)

    def test_cap_one_disables_cycle_alignment(self):
        spec = tiny_spec()
        model = init_model(spec.raw_dim, 4, 3, spec.num_classes, rng=7)
        batch = mixed_batch(spec, n_source=6, n_target=6, seed=6)
        capped = model_gradients(model, batch, lam=0.5, alignment="cycle", cap=1)
        off = model_gradients(model, batch, lam=0.0)
        assert capped.alignment_loss == 0.0
        assert len(capped.alignment_skipped) > 0
        assert capped.total == pytest.approx(off.total, rel=1e-14)
        for name in PARAM_NAMES:
            assert np.allclose(capped.gradients[name], off.gradients[name], rtol=0, atol=1e-15)

    def test_single_domain_batch_skips_all_classes(self):
        spec = tiny_spec()
        model = init_model(spec.raw_dim, 4, 3, spec.num_classes, rng=8)
        src = generate_domain(spec, "source", 8, 9)
        batch = [(inst, 1.0) for inst in src]
        res = model_gradients(model, batch, lam=0.5, alignment="cycle")
        assert res.alignment_loss == 0.0
        assert set(res.alignment_skipped) == {i.box.class_id for i in src}

    def test_lam_zero_ignores_alignment_kind(self):
        spec = tiny_spec()
        model = init_model(spec.raw_dim, 4, 3, spec.num_classes, rng=9)
        batch = mixed_batch(spec)
        a = model_gradients(model, batch, lam=0.0, alignment="cycle")
        b = model_gradients(model, batch, lam=0.0, alignment="none")
        assert a.total == b.total
        assert a.alignment_loss == 0.0

    def test_unknown_alignment_rejected(self):
        spec = tiny_spec()
        model = init_model(spec.raw_dim, 4, 3, spec.num_classes, rng=10)
        with pytest.raises(ValueError, match="alignment"):
            model_gradients(model, mixed_batch(spec), lam=0.1, alignment="swirl")

    def test_empty_batch_rejected(self):
        model = init_model(3, 4, 3, 2, rng=11)
        with pytest.raises(ValueError, match="non-empty"):
            model_gradients(model, [])

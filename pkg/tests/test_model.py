"""Adapters, optimizer, schedule, training loop and the gradient checker."""

import json

import numpy as np
import pytest

from oracles import adam_trace, fd_grad, lr_closed_form, rel_err
from xmatch.errors import DegenerateOutputRow, InvalidConfig
from xmatch.io import generate_synthetic
from xmatch.metrics import evaluate_retrieval
from xmatch.model import (
    CrossModalAdapter,
    HyperParams,
    LinearAdapter,
    grad_check,
    train,
)
from xmatch.optim import AdamState, lr_schedule


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


class TestAdapter:
    def test_identity_adapter_is_identity_on_unit_rows(self):
        rng = np.random.default_rng(0)
        x = unit_rows(rng, 5, 6)
        adapter = LinearAdapter(np.eye(6), np.zeros(6))
        np.testing.assert_allclose(adapter.forward(x), x, atol=1e-7)

    def test_scale_is_absorbed_by_normalization(self):
        rng = np.random.default_rng(1)
        x = unit_rows(rng, 4, 5)
        adapter = LinearAdapter(2.0 * np.eye(5), np.zeros(5))
        np.testing.assert_allclose(adapter.forward(x), x, atol=1e-12)

    def test_outputs_unit_norm(self):
        rng = np.random.default_rng(2)
        x = unit_rows(rng, 6, 7)
        adapter = LinearAdapter(np.eye(7) + rng.normal(0, 0.2, (7, 7)), rng.normal(0, 0.1, 7))
        out = adapter.forward(x)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_degenerate_output_row(self):
        adapter = LinearAdapter(np.zeros((3, 3)), np.zeros(3))
        with pytest.raises(DegenerateOutputRow):
            adapter.forward(np.eye(3)[:1])

    def test_zero_upstream_gives_zero_parameter_grads(self):
        rng = np.random.default_rng(3)
        x = unit_rows(rng, 4, 5)
        adapter = LinearAdapter(np.eye(5), np.zeros(5))
        dw, db = adapter.backward(x, np.zeros((4, 5)))
        np.testing.assert_array_equal(dw, 0.0)
        np.testing.assert_array_equal(db, 0.0)

    def test_hand_computed_normalization_jacobian(self):
        # x = e1 so the affine output is W[:, 0] = (1, 2, 2); r = 3.
        # upstream (1, 0, 0): dL/du = (g - (g.y) y)/r = (8, -2, -2)/27
        w = np.zeros((3, 3))
        w[:, 0] = (1.0, 2.0, 2.0)
        adapter = LinearAdapter(w, np.zeros(3))
        x = np.array([[1.0, 0.0, 0.0]])
        dw, db = adapter.backward(x, np.array([[1.0, 0.0, 0.0]]))
        expect_du = np.array([8.0, -2.0, -2.0]) / 27.0
        np.testing.assert_allclose(db, expect_du, atol=1e-10)
        np.testing.assert_allclose(dw[:, 0], expect_du, atol=1e-10)
        np.testing.assert_allclose(dw[:, 1:], 0.0, atol=1e-10)

    def test_parameter_grads_match_finite_differences(self):
        rng = np.random.default_rng(4)
        x = unit_rows(rng, 5, 6)
        adapter = LinearAdapter(np.eye(6) + rng.normal(0, 0.1, (6, 6)), rng.normal(0, 0.1, 6))
        upstream = rng.normal(size=(5, 6))
        dw, db = adapter.backward(x, upstream)

        def loss_of_w(w):
            return float(np.sum(LinearAdapter(w, adapter.bias).forward(x) * upstream))

        def loss_of_b(b):
            return float(np.sum(LinearAdapter(adapter.weight, b).forward(x) * upstream))

        assert rel_err(dw, fd_grad(loss_of_w, adapter.weight.copy())) < 1e-6
        assert rel_err(db, fd_grad(loss_of_b, adapter.bias.copy())) < 1e-6


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = np.array([1.0, -2.0])
        opt = AdamState(params=[p])
        opt.step([np.zeros(2)], lr=0.1)
        np.testing.assert_array_equal(p, [1.0, -2.0])
        assert opt.step_count == 1

    def test_first_step_identity(self):
        g = np.array([0.5, -3.0, 1e-3])
        p = np.zeros(3)
        opt = AdamState(params=[p], eps=1e-8)
        opt.step([g.copy()], lr=0.01)
        expect = -0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p, expect, atol=1e-12)

    def test_three_step_scalar_trace(self):
        grads = [0.3, -1.2, 0.7]
        p = np.array([0.5])
        opt = AdamState(params=[p], beta1=0.9, beta2=0.999, eps=1e-8)
        seen = []
        for g in grads:
            opt.step([np.array([g])], lr=0.05)
            seen.append(float(p[0]))
        expect = adam_trace(grads, lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8, x0=0.5)
        np.testing.assert_allclose(seen, expect, atol=1e-12)


class TestSchedule:
    def test_warmup_endpoints(self):
        assert lr_schedule(0, 1e-6, 1e-5, warmup_steps=50, total_steps=200) == 1e-6
        assert lr_schedule(49, 1e-6, 1e-5, warmup_steps=50, total_steps=200) == pytest.approx(1e-5)

    def test_decay_midpoint_closed_form(self):
        lr = lr_schedule(125, 1e-6, 1e-5, warmup_steps=50, total_steps=200)
        # midpoint of the decay phase: lr_start + (lr_peak-lr_start)*0.5*(1+cos(pi/2))
        assert lr == pytest.approx(1e-6 + (1e-5 - 1e-6) * 0.5, abs=1e-15)
        assert lr == pytest.approx(lr_closed_form(125, 1e-6, 1e-5, 50, 200), abs=1e-18)

    def test_matches_oracle_everywhere(self):
        for step in range(0, 200, 7):
            got = lr_schedule(step, 1e-6, 1e-5, warmup_steps=50, total_steps=200)
            assert got == pytest.approx(lr_closed_form(step, 1e-6, 1e-5, 50, 200), abs=1e-18)

    def test_no_warmup_starts_at_peak(self):
        assert lr_schedule(0, 1e-6, 1e-5, warmup_steps=0, total_steps=100) == pytest.approx(1e-5)


def small_bundle(seed=0, **kw):
    defaults = dict(g=6, per_id_img=3, per_id_txt=3, d=16, sigma=0.2, seed=seed)
    defaults.update(kw)
    return generate_synthetic(**defaults)


def fast_hp(**kw):
    defaults = dict(batch_size=8, epochs=2, warmup_epochs=1, top_k=3, seed=1)
    defaults.update(kw)
    return HyperParams(**defaults)


class TestTraining:
    def test_zero_epochs_returns_initialization(self):
        bundle = small_bundle()
        est, report = train(bundle, fast_hp(epochs=0))
        assert report.epochs == []
        rng = np.random.default_rng(1)
        init_v = LinearAdapter.init(16, rng)
        init_t = LinearAdapter.init(16, rng)
        np.testing.assert_array_equal(est.image_adapter_.weight, init_v.weight)
        np.testing.assert_array_equal(est.text_adapter_.weight, init_t.weight)

    def test_all_flags_off_parameters_never_change(self):
        bundle = small_bundle()
        est, _ = train(bundle, fast_hp(use_itc=False, use_lrc=False,
                                       use_gsrc=False, use_iascl=False))
        rng = np.random.default_rng(1)
        init_v = LinearAdapter.init(16, rng)
        np.testing.assert_array_equal(est.image_adapter_.weight, init_v.weight)
        np.testing.assert_array_equal(est.image_adapter_.bias, init_v.bias)

    def test_itc_only_total_equals_contrastive(self):
        bundle = small_bundle()
        _, report = train(bundle, fast_hp(use_lrc=False, use_gsrc=False, use_iascl=False))
        for rec in report.epochs:
            assert rec.loss_total == pytest.approx(rec.loss_contrastive, abs=1e-12)
            assert rec.loss_local == 0.0 and rec.loss_global == 0.0

    def test_bitwise_reproducibility(self):
        bundle = small_bundle()
        hp = fast_hp(epochs=3)
        est1, rep1 = train(bundle, hp)
        est2, rep2 = train(bundle, hp)
        np.testing.assert_array_equal(est1.image_adapter_.weight, est2.image_adapter_.weight)
        np.testing.assert_array_equal(est1.text_adapter_.bias, est2.text_adapter_.bias)
        assert json.dumps(rep1.to_dict()) == json.dumps(rep2.to_dict())

    def test_adapter_outputs_stay_unit_norm(self):
        bundle = small_bundle()
        est, _ = train(bundle, fast_hp())
        out = est.transform(bundle.images, "image")
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-5)

    def test_single_sided_asym_modes(self):
        bundle = small_bundle()
        for mode in ("image", "text"):
            _, report = train(bundle, fast_hp(epochs=1, asym_mode=mode))
            assert report.epochs[0].loss_consistency > 0.0

    def test_aug_views_replace_synthetic_perturbation(self):
        bundle = small_bundle()
        rng = np.random.default_rng(9)
        aug_v = unit_rows(rng, bundle.n, bundle.dim)
        aug_t = unit_rows(rng, bundle.n, bundle.dim)
        est = CrossModalAdapter(**fast_hp().to_dict())
        est.fit(bundle.images, bundle.texts, bundle.labels, aug_v, aug_t)
        assert est.report_.epochs[0].loss_consistency > 0.0

    def test_rank1_improves_over_untrained_baseline(self):
        # hard cross-modal geometry: text centroids fully rotated, so the
        # untrained adapters start near chance and training must recover it
        bundle = generate_synthetic(g=25, per_id_img=8, per_id_txt=8, d=16,
                                    sigma=0.5, seed=3, modality_rotation=1.0)
        hp = HyperParams(batch_size=32, epochs=12, lr_peak=0.02, lr_start=4e-4,
                         warmup_epochs=2, seed=0)
        est, report = train(bundle, hp)
        base = report.baseline_metrics["text_to_image"].rank1
        final = report.final_metrics["text_to_image"].rank1
        assert final > base
        assert report.epochs[-1].loss_total < report.epochs[0].loss_total

    def test_batch_size_below_two_rejected(self):
        with pytest.raises(InvalidConfig):
            train(small_bundle(), fast_hp(batch_size=1))


class TestEstimatorApi:
    def test_get_set_params_round_trip(self):
        est = CrossModalAdapter(temperature=0.5, top_k=3)
        params = est.get_params()
        assert params["temperature"] == 0.5
        clone = CrossModalAdapter(**params)
        assert clone.get_params() == params
        est.set_params(epochs=1)
        assert est.epochs == 1

    def test_transform_requires_fit(self):
        from xmatch.errors import MissingCheckpoint
        with pytest.raises(MissingCheckpoint):
            CrossModalAdapter().transform(np.eye(4))

    def test_transform_checks_dimension(self):
        from xmatch.errors import MissingCheckpoint
        bundle = small_bundle()
        est, _ = train(bundle, fast_hp(epochs=1))
        with pytest.raises(MissingCheckpoint):
            est.transform(np.eye(8), "image")

    def test_sklearn_clone_compatible(self):
        from sklearn.base import clone
        est = CrossModalAdapter(top_k=5, epochs=3)
        cloned = clone(est)
        assert cloned.top_k == 5 and cloned.epochs == 3


class TestGradCheck:
    def test_quadratic_is_exact(self):
        assert grad_check("quadratic", instance_seed=0) < 1e-10

    def test_each_loss_passes(self):
        for sel in ("itc", "lrc", "gsrc", "iascl", "total"):
            err = grad_check(sel, instance_seed=3, b=6, d=12)
            assert err < 1e-4, f"{sel}: {err}"

    def test_unknown_selector_rejected(self):
        with pytest.raises(InvalidConfig):
            grad_check("nope")

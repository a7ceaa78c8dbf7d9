"""Focal pyramid, fusion, bin head, loss, optimizer, trainer, gradcheck."""

import numpy as np
import pytest

import focaldepth.numerics
from focaldepth.errors import ArgumentError, DimensionError, NumericalFailure
from focaldepth.numerics import FeatureStack, GradTape, Plane2D
import focaldepth.focal_net as fn
from focaldepth.focal_net import (
    AdamW,
    BinHead,
    FocalEncodingMatrix,
    LossConfig,
    ScalePyramid,
    ToyBackbone,
    ToyDepthModel,
    TrainerConfig,
    fuse,
    gradcheck,
    level_dims,
    make_focal_pyramid,
    predict_depth,
    sample_rgb01,
    silog_loss,
    toy_backbone,
    train,
)
from focaldepth.synthetic import render_plane_scene, scene_camera

from conftest import make_rgbd


def _model_parts(seed=3, h=24, w=32, f=40.0):
    """Pure (tape-free) backbone features, focal pyramid, and rel depth."""
    rng = np.random.default_rng(seed)
    rgb01 = rng.uniform(0, 1, (3, h, w))
    backbone = ToyBackbone(seed)
    rel, feats = backbone.forward(rgb01)
    matrix = FocalEncodingMatrix.create(seed + 1)
    focal = make_focal_pyramid(f, matrix, (h, w))
    return rgb01, rel, feats, matrix, focal


class TestFocalPyramid:
    def test_zero_focal_bypass_gives_zero_pyramid(self):
        matrix = FocalEncodingMatrix.create(0)
        pyr = make_focal_pyramid(0.0, matrix, (64, 64), validate=False)
        for level in pyr.levels:
            assert (level.as_array() == 0).all()

    def test_nonpositive_focal_rejected(self):
        with pytest.raises(ArgumentError):
            make_focal_pyramid(0.0, FocalEncodingMatrix.create(0), (64, 64))

    def test_unit_focal_384x512_base_level_equals_matrix(self):
        matrix = FocalEncodingMatrix.create(1)
        pyr = make_focal_pyramid(1.0, matrix, (384, 512))
        base = pyr.levels[4]
        assert (base.height, base.width) == (12, 16)
        assert np.array_equal(base.planes[0].data, matrix.values)

    @pytest.mark.parametrize("k", [2.0, 3.7, 0.25, 10.0])
    def test_homogeneity(self, k):
        """Features scale linearly with the focal value, level by level.

        Tolerance 1e-12 relative to each level's magnitude: elements crossing
        zero have no meaningful relative precision of their own."""
        rng = np.random.default_rng(5)
        matrix = FocalEncodingMatrix(rng.normal(size=(12, 16)))
        for target in ((384, 512), (24, 32), (100, 140)):
            base = make_focal_pyramid(7.0, matrix, target)
            scaled = make_focal_pyramid(k * 7.0, matrix, target)
            for lb, ls in zip(base.levels, scaled.levels):
                want = k * lb.as_array()
                scale = max(1.0, np.abs(want).max())
                np.testing.assert_allclose(ls.as_array(), want, rtol=1e-12,
                                           atol=1e-12 * scale)

    def test_level_dims_follow_pyramid_rule(self):
        rng = np.random.default_rng(6)
        matrix = FocalEncodingMatrix.create(2)
        for _ in range(10):
            h, w = int(rng.integers(8, 400)), int(rng.integers(8, 400))
            pyr = make_focal_pyramid(35.0, matrix, (h, w))
            for level, (lh, lw) in zip(pyr.levels, level_dims(h, w)):
                assert (level.height, level.width) == (lh, lw)
                assert level.channels == 1

    def test_var_path_matches_pure_path(self):
        matrix = FocalEncodingMatrix.create(3)
        tape = GradTape()
        m_var = tape.param(matrix.values, "M")
        noded = make_focal_pyramid(52.0, m_var, (48, 64))
        pure = make_focal_pyramid(52.0, matrix, (48, 64))
        for a, b in zip(noded.levels, pure.levels):
            assert np.array_equal(a.as_array(), b.as_array())
        assert noded.nodes is not None

    def test_wrong_matrix_shape_rejected(self):
        with pytest.raises(DimensionError):
            FocalEncodingMatrix(np.zeros((10, 16)))


class TestScalePyramid:
    def test_needs_exactly_five_levels(self):
        stacks = [FeatureStack.from_array(np.zeros((1, h, w)))
                  for h, w in level_dims(64, 64)]
        with pytest.raises(DimensionError):
            ScalePyramid(stacks[:4], (64, 64))

    def test_level_size_validated(self):
        stacks = [FeatureStack.from_array(np.zeros((1, h, w)))
                  for h, w in level_dims(64, 64)]
        stacks[2] = FeatureStack.from_array(np.zeros((1, 9, 9)))
        with pytest.raises(DimensionError):
            ScalePyramid(stacks, (64, 64))


class TestFuse:
    def test_feature_channels_lead_and_counts(self):
        _, _, feats, _, focal = _model_parts()
        fused = fuse(feats, focal)
        assert fused.channels_per_level == [c + 1 for c in feats.channels_per_level]
        for j in range(5):
            a = fused.levels[j].as_array()
            np.testing.assert_array_equal(a[:-1], feats.levels[j].as_array())
            np.testing.assert_array_equal(a[-1:], focal.levels[j].as_array())

    def test_zero_focal_keeps_features_unchanged(self):
        _, _, feats, _, _ = _model_parts()
        zeros = make_focal_pyramid(40.0, FocalEncodingMatrix.zeros(), (24, 32))
        fused = fuse(feats, zeros)
        for j in range(5):
            np.testing.assert_array_equal(
                fused.levels[j].as_array()[:-1], feats.levels[j].as_array()
            )
            assert (fused.levels[j].as_array()[-1] == 0).all()

    def test_base_resolution_mismatch_rejected(self):
        _, _, feats, matrix, _ = _model_parts()
        other = make_focal_pyramid(40.0, matrix, (48, 64))
        with pytest.raises(DimensionError):
            fuse(feats, other)

    def test_gradient_reaches_encoding_through_every_level(self):
        """Each fused level alone carries gradient back to the encoding grid."""
        matrix = FocalEncodingMatrix.create(9)
        rng = np.random.default_rng(9)
        rgb01 = rng.uniform(0, 1, (3, 64, 96))
        _, feats = ToyBackbone(9).forward(rgb01)
        for j in range(5):
            tape = GradTape()
            m_var = tape.param(matrix.values, "M")
            focal = make_focal_pyramid(37.0, m_var, (64, 96))
            fused = fuse(feats, focal)
            grads = tape.backward(fused.nodes[j].mean())
            assert np.abs(grads["M"]).sum() > 0, f"level {j} carries no gradient"


class TestToyBackbone:
    def test_constant_image_gives_constant_features(self):
        rgb = FeatureStack.from_array(np.full((3, 40, 48), 0.5))
        rel, feats = toy_backbone(rgb, seed=0)
        assert (rel.data == 0).all()  # degenerate normalization
        for level in feats.levels:
            arr = level.as_array()
            for c in range(arr.shape[0]):
                assert np.ptp(arr[c]) == 0

    def test_same_seed_identical_outputs(self):
        rng = np.random.default_rng(1)
        rgb = FeatureStack.from_array(rng.uniform(0, 1, (3, 30, 36)))
        rel_a, feats_a = toy_backbone(rgb, seed=5)
        rel_b, feats_b = toy_backbone(rgb, seed=5)
        assert np.array_equal(rel_a.data, rel_b.data)
        for a, b in zip(feats_a.levels, feats_b.levels):
            assert np.array_equal(a.as_array(), b.as_array())

    def test_shapes_match_pyramid_invariant_for_random_sizes(self):
        rng = np.random.default_rng(2)
        for _ in range(8):
            h, w = int(rng.integers(4, 90)), int(rng.integers(4, 90))
            rgb = FeatureStack.from_array(rng.uniform(0, 1, (3, h, w)))
            rel, feats = toy_backbone(rgb, seed=1)
            assert rel.shape == (h, w)
            for level, (lh, lw) in zip(feats.levels, level_dims(h, w)):
                assert (level.height, level.width) == (lh, lw)

    def test_relative_depth_in_unit_range(self):
        rng = np.random.default_rng(3)
        rgb = FeatureStack.from_array(rng.uniform(0, 1, (3, 20, 20)))
        rel, _ = toy_backbone(rgb, seed=2)
        assert rel.data.min() >= 0 and rel.data.max() <= 1

    def test_unnormalized_input_rejected(self):
        rgb = FeatureStack.from_array(np.full((3, 4, 4), 2.0))
        with pytest.raises(ArgumentError):
            toy_backbone(rgb, seed=0)


class TestBinHeadAndPredict:
    def _uniform_head(self, in_channels, n_bins=64):
        return BinHead(
            n_bins=n_bins, d_min=0.001, d_max=10.0,
            proj_w=np.zeros((n_bins, in_channels)),
            proj_b=np.zeros(n_bins),
            bin_params=np.zeros(n_bins),
        )

    def test_uniform_logits_uniform_centers_closed_form(self):
        """All logits equal and uniform bin widths: every pixel is the mean of
        the centers, d_min + (d_max - d_min)/2 = 5.0005 for (0.001, 10)."""
        _, rel, feats, _, focal = _model_parts()
        fused = fuse(feats, focal)
        head = self._uniform_head(in_channels=26)
        out = predict_depth(fused, rel, head)
        n = head.n_bins
        centers = 0.001 + (10.0 - 0.001) * (2 * np.arange(n) + 1) / (2 * n)
        np.testing.assert_allclose(out.data, centers.mean(), rtol=1e-12)
        assert out.data[0, 0] == pytest.approx(5.0005, abs=1e-9)

    def test_saturated_logit_returns_that_bins_center(self):
        _, rel, feats, _, focal = _model_parts()
        fused = fuse(feats, focal)
        head = self._uniform_head(in_channels=26)
        head.proj_b[7] = 50.0  # softmax margin 50 saturates bin 7
        out = predict_depth(fused, rel, head)
        expected_center = head.centers()[7]
        np.testing.assert_allclose(out.data, expected_center, atol=1e-9)

    def test_output_range_over_100_random_parameter_draws(self):
        _, rel, feats, _, focal = _model_parts()
        fused = fuse(feats, focal)
        rng = np.random.default_rng(17)
        for _ in range(100):
            head = BinHead(
                n_bins=16, d_min=0.001, d_max=10.0,
                proj_w=rng.normal(0, 2.0, (16, 26)),
                proj_b=rng.normal(0, 2.0, 16),
                bin_params=rng.normal(0, 2.0, 16),
            )
            out = predict_depth(fused, rel, head)
            assert out.data.min() >= head.d_min
            assert out.data.max() <= head.d_max

    def test_centers_monotone_and_inside_range(self):
        rng = np.random.default_rng(18)
        for _ in range(20):
            head = BinHead(
                n_bins=32, d_min=0.5, d_max=4.0,
                proj_w=np.zeros((32, 5)), proj_b=np.zeros(32),
                bin_params=rng.normal(0, 3.0, 32),
            )
            c = head.centers()
            assert (np.diff(c) > 0).all()
            assert c.min() > head.d_min and c.max() < head.d_max

    def test_channel_mismatch_rejected(self):
        _, rel, feats, _, focal = _model_parts()
        fused = fuse(feats, focal)
        head = self._uniform_head(in_channels=11)
        with pytest.raises(DimensionError):
            predict_depth(fused, rel, head)

    def test_head_config_validation(self):
        with pytest.raises(ArgumentError):
            BinHead(1, 0.001, 10.0, np.zeros((1, 3)), np.zeros(1), np.zeros(1))
        with pytest.raises(ArgumentError):
            BinHead(4, 5.0, 1.0, np.zeros((4, 3)), np.zeros(4), np.zeros(4))


class TestSilogLoss:
    def _mask(self, h, w):
        return Plane2D(np.ones((h, w)))

    def test_perfect_prediction_is_zero_and_flagged(self):
        rng = np.random.default_rng(0)
        gt = Plane2D(rng.uniform(0.5, 5.0, (6, 6)))
        loss, clamped = silog_loss(gt, gt, self._mask(6, 6))
        assert loss == pytest.approx(0.0, abs=1e-6)
        assert clamped

    def test_lambda_one_full_scale_invariance(self):
        rng = np.random.default_rng(1)
        gt = Plane2D(rng.uniform(0.5, 5.0, (5, 5)))
        pred = Plane2D(gt.data * 1.7)
        loss, clamped = silog_loss(pred, gt, self._mask(5, 5),
                                   LossConfig(silog_lambda=1.0))
        assert loss == pytest.approx(0.0, abs=1e-6)
        assert clamped

    def test_partial_lambda_scale_term(self):
        """Scaling pred by c shifts the squared loss by
        (1 - lambda) * (log(c)^2 + 2 log(c) mean(g))."""
        rng = np.random.default_rng(2)
        gt = Plane2D(rng.uniform(0.5, 5.0, (6, 7)))
        pred = Plane2D(gt.data * rng.uniform(0.8, 1.3, (6, 7)))
        cfg = LossConfig(silog_lambda=0.85, silog_alpha=10.0)
        mask = self._mask(6, 7)
        c = 1.9
        base, _ = silog_loss(pred, gt, mask, cfg)
        scaled, _ = silog_loss(Plane2D(pred.data * c), gt, mask, cfg)
        g = np.log(pred.data) - np.log(gt.data)
        expected_shift = (1 - cfg.silog_lambda) * (
            np.log(c) ** 2 + 2 * np.log(c) * g.mean()
        )
        got_shift = (scaled / cfg.silog_alpha) ** 2 - (base / cfg.silog_alpha) ** 2
        assert got_shift == pytest.approx(expected_shift, rel=1e-10)

    def test_scaling_both_sides_never_changes_loss(self):
        rng = np.random.default_rng(3)
        gt = Plane2D(rng.uniform(0.5, 5.0, (5, 6)))
        pred = Plane2D(gt.data * rng.uniform(0.7, 1.5, (5, 6)))
        mask = self._mask(5, 6)
        for lam in (0.85, 1.0):
            cfg = LossConfig(silog_lambda=lam)
            a, _ = silog_loss(pred, gt, mask, cfg)
            b, _ = silog_loss(Plane2D(pred.data * 3.1), Plane2D(gt.data * 3.1), mask, cfg)
            assert b == pytest.approx(a, rel=1e-9, abs=1e-12)

    def test_empty_mask_rejected(self):
        gt = Plane2D(np.ones((3, 3)))
        with pytest.raises(ArgumentError):
            silog_loss(gt, gt, Plane2D(np.zeros((3, 3))))

    def test_nonpositive_masked_pred_rejected(self):
        gt = Plane2D(np.ones((2, 2)))
        with pytest.raises(ArgumentError):
            silog_loss(Plane2D(np.array([[1.0, -1.0], [1.0, 1.0]])), gt, self._mask(2, 2))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed + 20)
        h, w = 5, 6
        gt = Plane2D(rng.uniform(0.5, 5.0, (h, w)))
        pred0 = gt.data * rng.uniform(0.6, 1.6, (h, w))
        mask = Plane2D((rng.uniform(size=(h, w)) < 0.8).astype(float))
        if mask.data.sum() == 0:
            mask = self._mask(h, w)
        cfg = LossConfig()

        tape = GradTape()
        pred = tape.param(pred0, "pred")
        loss, _ = silog_loss(pred, gt, mask, cfg)
        grad = tape.backward(loss)["pred"]

        num = np.zeros_like(pred0)
        for i in range(h):
            for j in range(w):
                hstep = 1e-5 * max(1.0, abs(pred0[i, j]))
                up = pred0.copy()
                up[i, j] += hstep
                dn = pred0.copy()
                dn[i, j] -= hstep
                lu, _ = silog_loss(Plane2D(up), gt, mask, cfg)
                ld, _ = silog_loss(Plane2D(dn), gt, mask, cfg)
                num[i, j] = (lu - ld) / (2 * hstep)
        rel = np.abs(grad - num) / np.maximum(1e-6, np.maximum(np.abs(grad), np.abs(num)))
        assert rel.max() < 1e-4

    def test_gradient_zero_outside_mask(self):
        rng = np.random.default_rng(30)
        gt = Plane2D(rng.uniform(1, 2, (3, 3)))
        mask = Plane2D(np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1]]))
        tape = GradTape()
        pred = tape.param(gt.data * 1.2, "pred")
        loss, _ = silog_loss(pred, gt, mask, LossConfig())
        grad = tape.backward(loss)["pred"]
        assert (grad[mask.data == 0] == 0).all()
        assert (grad[mask.data == 1] != 0).any()


class TestAdamW:
    def test_single_step_scalar_closed_form(self):
        p = np.array([0.7])
        opt = AdamW({"w": p}, {"w": 0.01}, weight_decay=0.01)
        g = np.array([0.3])
        opt.step({"w": g})
        m = 0.1 * 0.3
        v = 0.001 * 0.09
        m_hat = m / 0.1
        v_hat = v / 0.001
        expected = 0.7 - 0.01 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.01 * 0.7)
        assert p[0] == pytest.approx(expected, rel=1e-14)

    def test_group_update_ratio_exact_power_of_two(self):
        base = 0.004
        ratio = 0.5
        params = {"backbone.w": np.array([1.0]), "head.w": np.array([1.0])}
        opt = AdamW(params, {"backbone.w": base * ratio, "head.w": base}, weight_decay=0.01)
        opt.step({"backbone.w": np.array([0.3]), "head.w": np.array([0.3])})
        upd_b = 1.0 - params["backbone.w"][0]
        upd_h = 1.0 - params["head.w"][0]
        assert upd_b == ratio * upd_h  # bit-exact: identical state, lr halved

    def test_group_update_ratio_default_one_fiftieth(self):
        base = 1.6e-4
        ratio = 1.0 / 50.0
        params = {"backbone.w": np.array([1.0]), "head.w": np.array([1.0])}
        opt = AdamW(params, {"backbone.w": base * ratio, "head.w": base}, weight_decay=0.01)
        opt.step({"backbone.w": np.array([0.3]), "head.w": np.array([0.3])})
        upd_b = 1.0 - params["backbone.w"][0]
        upd_h = 1.0 - params["head.w"][0]
        assert upd_b == pytest.approx(ratio * upd_h, rel=1e-13)

    def test_missing_lr_rejected(self):
        with pytest.raises(ArgumentError):
            AdamW({"a": np.zeros(1)}, {})


class TestTrainer:
    def _dataset(self, n=6):
        cam = scene_camera(40.0, 12, 16)
        return [
            render_plane_scene(cam, 12, 16, wall_depth=2.0 + 0.2 * i,
                               source_id=f"s{i}")
            for i in range(n)
        ]

    def test_zero_ratio_freezes_backbone_bitwise(self):
        data = self._dataset()
        model = ToyDepthModel(seed=1, n_bins=8)
        before = {k: v.copy() for k, v in model.backbone.param_arrays().items()}
        cfg = TrainerConfig(base_lr=0.01, backbone_lr_ratio=0.0, epochs=1, seed=1)
        train(data, cfg, model=model)
        for k, v in model.backbone.param_arrays().items():
            assert np.array_equal(v, before[k]), k
        assert not np.array_equal(model.head.proj_w,
                                  BinHead.create(3, 26, 8).proj_w)  # head moved

    def test_fixed_seed_reproduces_loss_curve(self):
        data = self._dataset()
        cfg = TrainerConfig(base_lr=0.01, epochs=2, seed=4)
        r1 = train(data, cfg, model=ToyDepthModel(seed=4, n_bins=8))
        r2 = train(data, cfg, model=ToyDepthModel(seed=4, n_bins=8))
        assert r1.losses == r2.losses
        assert len(r1.losses) == 2 * int(np.ceil(len(data) / cfg.batch_size))

    def test_nan_loss_aborts_with_step_and_sample(self, monkeypatch):
        data = self._dataset()
        orig = fn.silog_loss

        def poisoned(pred, gt, mask, cfg=None):
            loss, clamped = orig(pred, gt, mask, cfg)
            loss.value = np.asarray(np.nan)
            return loss, clamped

        monkeypatch.setattr(fn, "silog_loss", poisoned)
        with pytest.raises(NumericalFailure, match=r"step 0 on sample 's\d'"):
            train(data, TrainerConfig(base_lr=0.01, epochs=1, seed=0),
                  model=ToyDepthModel(seed=0, n_bins=8))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ArgumentError):
            train([], TrainerConfig())

    def test_losses_decrease_on_easy_data(self):
        data = self._dataset(n=8)
        cfg = TrainerConfig(base_lr=0.05, epochs=5, seed=2)
        r = train(data, cfg, model=ToyDepthModel(seed=2, n_bins=8))
        assert np.mean(r.losses[-4:]) < np.mean(r.losses[:4])


class TestFocalSensitivity:
    def test_with_focal_model_responds_to_focal_change(self):
        model = ToyDepthModel(seed=3, n_bins=8)
        s = make_rgbd(16, 20, seed=2)
        rgb01 = sample_rgb01(s)
        a = model.predict(rgb01, 40.0)
        b = model.predict(rgb01, 44.0)
        assert np.abs(a.data - b.data).mean() > 0

    def test_ablated_model_is_provably_focal_invariant(self):
        model = ToyDepthModel(seed=3, n_bins=8, ablate_focal=True)
        s = make_rgbd(16, 20, seed=2)
        rgb01 = sample_rgb01(s)
        a = model.predict(rgb01, 40.0)
        b = model.predict(rgb01, 44.0)
        assert np.array_equal(a.data, b.data)


class TestGradcheck:
    def _case(self, seed=0, h=24, w=32, n_bins=16):
        cam = scene_camera(40.0, h, w)
        scene = render_plane_scene(cam, h, w, wall_depth=3.0, source_id="gc")
        model = ToyDepthModel(seed=seed, n_bins=n_bins)
        return model, sample_rgb01(scene), cam.fx, scene.depth, scene.valid_mask

    def test_full_toy_model_24x32_under_tolerance(self):
        model, rgb01, f, gt, mask = self._case(seed=5)
        report = gradcheck(model, rgb01, f, gt, mask)
        assert set(report) == {"M", "head.proj_w", "head.proj_b", "head.bin_params",
                               "backbone.mix1", "backbone.mix2", "backbone.mix3",
                               "backbone.mix4", "backbone.mix5"}
        assert max(report.values()) < 1e-4

    def test_fault_injected_adjoint_is_detected(self, monkeypatch):
        model, rgb01, f, gt, mask = self._case(seed=6, h=16, w=24, n_bins=8)
        clean = gradcheck(model, rgb01, f, gt, mask)
        assert max(clean.values()) < 1e-4

        def broken_softmax_vjp(p, adj, axis):
            return p * (adj - 1.01 * np.sum(p * adj, axis=axis, keepdims=True))

        monkeypatch.setattr(focaldepth.numerics, "_softmax_vjp", broken_softmax_vjp)
        corrupted = gradcheck(model, rgb01, f, gt, mask)
        assert max(corrupted.values()) > 1e-3


class TestCheckpoint:
    def test_round_trip_preserves_parameters_and_predictions(self, tmp_path):
        model = ToyDepthModel(seed=7, n_bins=8, focal_normalizer=40.0,
                              encoding_init="unit")
        data = TestTrainer._dataset(TestTrainer(), n=4)
        train(data, TrainerConfig(base_lr=0.02, epochs=1, seed=7), model=model)
        path = model.save_checkpoint(tmp_path / "ckpt.json")
        loaded = ToyDepthModel.load_checkpoint(path)
        for name, arr in model.param_arrays().items():
            assert np.array_equal(arr, loaded.param_arrays()[name]), name
        s = make_rgbd(12, 16, seed=9)
        rgb01 = sample_rgb01(s)
        assert np.array_equal(model.predict(rgb01, 40.0).data,
                              loaded.predict(rgb01, 40.0).data)

    def test_rejects_foreign_json(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text('{"kind": "something_else", "schema_version": 1}')
        with pytest.raises(ArgumentError):
            ToyDepthModel.load_checkpoint(p)

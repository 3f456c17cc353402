import json

import numpy as np
import pytest
from oracles import dense_grid_calibrate

from confwalk.conformal import (
    METHOD_CRC,
    METHOD_DILATION,
    METHOD_RWCP,
    CalibrationResult,
    ConformalConfig,
    RiskCurve,
    base_prediction,
    calibrate_threshold,
    calibration_from_dict,
    calibration_to_dict,
    config_digest,
    crc_lower_bound,
    dilate_mask,
    dilation_calibrate,
    dilation_infer,
    fnr_loss,
    inflated_target,
    load_calibration,
    max_set_size_sensitivity,
    min_calibration_size,
    predict_set,
    rwcp_calibrate,
    rwcp_infer,
    save_calibration,
    set_size_curve,
    standard_crc_calibrate,
    standard_crc_infer,
)
from confwalk.diffusion import DiffusionConfig
from confwalk.errors import (
    ConfigError,
    DimensionMismatch,
    IoFailure,
    MalformedFile,
    RangeViolation,
    TargetInfeasible,
    Unsatisfiable,
)
from confwalk.graph import GraphConfig
from confwalk.synthetic import SceneSpec, gen_scene
from confwalk.tensors import (
    BinaryMask,
    DatasetManifest,
    ManifestEntry,
    ProbMap,
    load_binary_mask,
    load_prob_map,
    save_tensor,
)


def random_instance(rng, n, max_side):
    """n score maps with random masks, mixed sizes."""
    maps, masks = [], []
    for _ in range(n):
        h = int(rng.integers(2, max_side + 1))
        w = int(rng.integers(2, max_side + 1))
        maps.append(ProbMap(rng.random((h, w))))
        masks.append(BinaryMask(rng.random((h, w)) < 0.4))
    return maps, masks


class TestTargets:
    def test_inflated_target_example(self):
        assert abs(inflated_target(0.1, 20) - 0.055) < 1e-12

    def test_infeasible_small_n(self):
        with pytest.raises(TargetInfeasible):
            inflated_target(0.05, 10)

    def test_large_n_limit(self):
        alpha = 0.1
        assert abs(inflated_target(alpha, 10**6) - alpha) < 2e-6 * (1 + alpha)

    def test_bad_n(self):
        with pytest.raises(ConfigError):
            inflated_target(0.1, 0)

    def test_min_calibration_sizes(self):
        assert min_calibration_size(0.05, 1.0) == 19
        assert min_calibration_size(0.2, 1.0) == 4
        assert min_calibration_size(0.1, 0.0) == 0

    def test_min_size_is_sharp(self):
        # n = 19 is feasible for alpha = 0.05, n = 18 is not.
        assert inflated_target(0.05, 19) >= 0.0
        with pytest.raises(TargetInfeasible):
            inflated_target(0.05, 18)

    def test_min_size_validation(self):
        with pytest.raises(ConfigError):
            min_calibration_size(0.0, 1.0)
        with pytest.raises(ConfigError):
            min_calibration_size(0.1, -0.5)

    def test_lower_bound_formula(self):
        assert abs(crc_lower_bound(0.1, 19, 1.0) - 0.0) < 1e-15
        assert abs(crc_lower_bound(0.2, 9, 1.0) - 0.0) < 1e-15

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ConformalConfig(alpha=0.0)
        with pytest.raises(ConfigError):
            ConformalConfig(alpha=1.0)
        with pytest.raises(ConfigError):
            ConformalConfig(alpha=0.1, method="magic")
        assert ConformalConfig(alpha=0.1, method=METHOD_CRC).alpha == 0.1


class TestFnrLoss:
    def test_full_coverage_is_zero(self):
        y = BinaryMask(np.ones((3, 3), dtype=bool))
        assert fnr_loss(y, y) == 0.0

    def test_empty_truth_is_zero(self):
        y = BinaryMask(np.zeros((3, 3), dtype=bool))
        c = BinaryMask(np.ones((3, 3), dtype=bool))
        assert fnr_loss(y, c) == 0.0

    def test_partial_miss(self):
        y = np.zeros((2, 2), dtype=bool)
        y[:, :] = True
        c = np.zeros((2, 2), dtype=bool)
        c[0, :] = True
        c[1, 0] = True
        assert fnr_loss(BinaryMask(y), BinaryMask(c)) == 0.25

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            fnr_loss(
                BinaryMask(np.zeros((2, 2), dtype=bool)),
                BinaryMask(np.zeros((3, 3), dtype=bool)),
            )


class TestPredictSet:
    def test_lambda_zero_keeps_only_certain_pixels(self):
        scores = ProbMap(np.array([[0.0, 0.999, 1.0]]))
        out = predict_set(scores, 0.0)
        np.testing.assert_array_equal(out.values, [[False, False, True]])

    def test_lambda_one_keeps_everything(self):
        scores = ProbMap(np.array([[0.0, 0.3, 1.0]]))
        assert predict_set(scores, 1.0).values.all()

    def test_threshold_is_inclusive(self):
        scores = ProbMap(np.array([[0.2, 0.9, 0.95]]))
        out = predict_set(scores, 0.1)
        np.testing.assert_array_equal(out.values, [[False, True, True]])

    def test_out_of_range_lambda(self):
        scores = ProbMap(np.zeros((2, 2)))
        with pytest.raises(RangeViolation):
            predict_set(scores, -0.1)
        with pytest.raises(RangeViolation):
            predict_set(scores, 1.5)


class TestCalibrateThreshold:
    def test_two_pixel_hand_example(self):
        # Foreground scores 0.9 and 0.6, alpha = 0.5 with n = 1 gives an
        # inflated target of 0: both pixels must be covered, and the exact
        # infimum is 1 - 0.6 = 0.4.
        scores = ProbMap(np.array([[0.9, 0.6]]))
        mask = BinaryMask(np.array([[True, True]]))
        result = calibrate_threshold([scores], [mask], 0.5)
        assert result.lambda_hat == 0.4
        assert result.achieved_risk == 0.0

    def test_every_candidate_covers_its_own_score(self):
        # 1 - (1 - s) can land one ulp above s; the sweep must compensate so
        # the reported risk at lambda_hat matches an actual predict_set run.
        rng = np.random.default_rng(77)
        maps, masks = random_instance(rng, 6, 12)
        result = calibrate_threshold(maps, masks, 0.3)
        losses = [
            fnr_loss(y, predict_set(s, result.lambda_hat))
            for s, y in zip(maps, masks)
        ]
        assert np.mean(losses) == result.achieved_risk
        assert np.mean(losses) <= result.alpha_star

    def test_matches_dense_grid_oracle(self):
        rng = np.random.default_rng(52)
        step = 1e-4
        for _ in range(15):
            n = int(rng.integers(1, 8))
            maps, masks = random_instance(rng, n, 10)
            alpha = float(rng.uniform(0.25, 0.9))
            result = calibrate_threshold(maps, masks, alpha)
            fg_sets = [s.values[y.values] for s, y in zip(maps, masks)]
            grid_lam = dense_grid_calibrate(fg_sets, result.alpha_star, step)
            assert grid_lam - step <= result.lambda_hat <= grid_lam + step

    def test_minimality_invariant(self):
        rng = np.random.default_rng(53)
        maps, masks = random_instance(rng, 5, 10)
        result = calibrate_threshold(maps, masks, 0.4)
        idx = int(np.searchsorted(result.curve.levels, result.lambda_hat))
        assert result.curve.risks[idx] <= result.alpha_star
        if idx > 0:
            assert result.curve.risks[idx - 1] > result.alpha_star

    def test_permutation_invariance(self):
        rng = np.random.default_rng(54)
        maps, masks = random_instance(rng, 6, 10)
        a = calibrate_threshold(maps, masks, 0.35)
        order = rng.permutation(len(maps))
        b = calibrate_threshold(
            [maps[i] for i in order], [masks[i] for i in order], 0.35
        )
        assert a.lambda_hat == b.lambda_hat
        np.testing.assert_array_equal(a.curve.levels, b.curve.levels)
        # The mean risk is permutation invariant; float accumulation order
        # still moves the sums by an ulp.
        np.testing.assert_allclose(a.curve.risks, b.curve.risks, atol=1e-12)

    def test_all_scores_one_gives_zero_lambda(self):
        scores = ProbMap(np.ones((2, 2)))
        mask = BinaryMask(np.ones((2, 2), dtype=bool))
        result = calibrate_threshold([scores], [mask], 0.5)
        assert result.lambda_hat == 0.0

    def test_empty_truth_contributes_no_loss(self):
        scores = [
            ProbMap(np.array([[0.9, 0.6]])),
            ProbMap(np.array([[0.1, 0.2]])),
        ]
        masks = [
            BinaryMask(np.array([[True, True]])),
            BinaryMask(np.array([[False, False]])),
        ]
        # n = 2, alpha = 0.5 -> alpha* = 0.25; covering only 0.9 leaves a
        # mean FNR of 0.5/2 = 0.25, so lambda = 1 - 0.9 suffices.
        result = calibrate_threshold(scores, masks, 0.5)
        assert abs(result.lambda_hat - 0.1) < 1e-12
        assert result.achieved_risk == 0.25

    def test_input_validation(self):
        with pytest.raises(ConfigError):
            calibrate_threshold([], [], 0.5)
        with pytest.raises(ConfigError):
            calibrate_threshold(
                [ProbMap(np.zeros((2, 2)))],
                [],
                0.5,
            )


class TestRwcpVsCrc:
    def make_manifest(self, tmp_path, n):
        # Feature grid equals the image grid so the zero-step walk never
        # resamples anything.
        spec = SceneSpec(grid=(12, 12), feature_grid=(12, 12), seed=9)
        entries = []
        probs, masks = [], []
        for i in range(n):
            prob, feats, mask = gen_scene(spec, i)
            pp = tmp_path / f"p{i}.npy"
            fp = tmp_path / f"f{i}.npy"
            mp = tmp_path / f"m{i}.npy"
            save_tensor(prob, pp)
            save_tensor(feats, fp)
            save_tensor(mask, mp)
            entries.append(
                ManifestEntry(id=f"s{i}", prob_path=pp, feature_path=fp, mask_path=mp)
            )
            probs.append(prob)
            masks.append(mask)
        return DatasetManifest(entries=tuple(entries)), probs, masks

    def test_zero_step_walk_reduces_to_plain_thresholding(self, tmp_path):
        manifest, _, _ = self.make_manifest(tmp_path, 4)
        cfg = DiffusionConfig(n_step=0, graph=GraphConfig(k=4, beta=20.0))
        walk = rwcp_calibrate(manifest, cfg, 0.4)
        # Both arms must consume the same stored files: the walk reads the
        # manifest, so the plain arm does too.
        probs = [load_prob_map(e.prob_path) for e in manifest]
        masks = [load_binary_mask(e.mask_path) for e in manifest]
        plain = standard_crc_calibrate(probs, masks, 0.4)
        assert walk.lambda_hat == plain.lambda_hat
        assert walk.method == METHOD_RWCP
        assert plain.method == METHOD_CRC
        prob, feats, mask = gen_scene(
            SceneSpec(grid=(12, 12), feature_grid=(12, 12), seed=9), 100
        )
        m1 = rwcp_infer(prob, feats, cfg, walk.lambda_hat)
        m2 = standard_crc_infer(prob, plain.lambda_hat)
        np.testing.assert_array_equal(m1.values, m2.values)

    def test_worker_count_does_not_change_result(self, tmp_path):
        manifest, _, _ = self.make_manifest(tmp_path, 4)
        cfg = DiffusionConfig(n_step=2, graph=GraphConfig(k=4, beta=20.0))
        a = rwcp_calibrate(manifest, cfg, 0.4, workers=1)
        b = rwcp_calibrate(manifest, cfg, 0.4, workers=3)
        assert a.lambda_hat == b.lambda_hat
        np.testing.assert_array_equal(a.curve.risks, b.curve.risks)


class TestDilation:
    def test_base_prediction_includes_half(self):
        prob = ProbMap(np.array([[0.49, 0.5, 0.51]]))
        np.testing.assert_array_equal(
            base_prediction(prob).values, [[False, True, True]]
        )

    def test_dilate_single_pixel(self):
        m = np.zeros((5, 5), dtype=bool)
        m[2, 2] = True
        out = dilate_mask(BinaryMask(m), 1)
        assert out.values.sum() == 9
        assert out.values[1:4, 1:4].all()

    def test_dilate_zero_is_identity(self):
        m = np.zeros((4, 4), dtype=bool)
        m[1, 1] = True
        out = dilate_mask(BinaryMask(m), 0)
        np.testing.assert_array_equal(out.values, m)

    def test_empty_mask_stays_empty(self):
        m = BinaryMask(np.zeros((4, 4), dtype=bool))
        assert not dilate_mask(m, 5).values.any()

    def test_negative_count_rejected(self):
        with pytest.raises(RangeViolation):
            dilate_mask(BinaryMask(np.zeros((2, 2), dtype=bool)), -1)

    def test_one_pixel_shift_needs_one_dilation(self):
        # Base prediction at (2, 2), truth at (2, 3): a single 8-connected
        # dilation reaches the shifted pixel.
        prob = np.zeros((5, 5))
        prob[2, 2] = 1.0
        truth = np.zeros((5, 5), dtype=bool)
        truth[2, 3] = True
        result = dilation_calibrate([ProbMap(prob)], [BinaryMask(truth)], 0.5)
        assert result.lambda_hat == 1.0
        np.testing.assert_array_equal(result.curve.levels, [0.0, 1.0])
        np.testing.assert_array_equal(result.curve.risks, [1.0, 0.0])

    def test_superset_needs_no_dilation(self):
        prob = np.zeros((5, 5))
        prob[1:4, 1:4] = 1.0
        truth = np.zeros((5, 5), dtype=bool)
        truth[2, 2] = True
        result = dilation_calibrate([ProbMap(prob)], [BinaryMask(truth)], 0.5)
        assert result.lambda_hat == 0.0

    def test_empty_base_is_unsatisfiable(self):
        prob = ProbMap(np.zeros((4, 4)))
        truth = np.zeros((4, 4), dtype=bool)
        truth[1, 1] = True
        with pytest.raises(Unsatisfiable):
            dilation_calibrate([prob], [BinaryMask(truth)], 0.5, max_dilations=3)

    def test_infer_applies_count(self):
        prob = np.zeros((5, 5))
        prob[2, 2] = 1.0
        out = dilation_infer(ProbMap(prob), 1.0)
        assert out.values.sum() == 9


class TestSetSizeCurve:
    def test_counts_on_small_map(self):
        scores = ProbMap(np.array([[0.0, 0.3], [0.6, 1.0]]))
        lambdas, sizes = set_size_curve(scores, step=0.5)
        np.testing.assert_allclose(lambdas, [0.0, 0.5, 1.0])
        np.testing.assert_array_equal(sizes, [1, 2, 4])

    def test_sizes_monotone(self):
        rng = np.random.default_rng(60)
        scores = ProbMap(rng.random((16, 16)))
        _, sizes = set_size_curve(scores)
        assert np.all(np.diff(sizes) >= 0)

    def test_sensitivity_value(self):
        scores = ProbMap(np.array([[0.0, 0.3], [0.6, 1.0]]))
        assert max_set_size_sensitivity(scores, step=0.5) == 4.0

    def test_bad_step(self):
        with pytest.raises(ConfigError):
            set_size_curve(ProbMap(np.zeros((2, 2))), step=0.0)


class TestResultInvariants:
    def curve(self):
        return RiskCurve(
            levels=np.array([0.0, 0.5, 1.0]), risks=np.array([0.6, 0.2, 0.0])
        )

    def ok(self, lam=0.5, alpha_star=0.3):
        return CalibrationResult(
            lambda_hat=lam,
            alpha=0.35,
            alpha_star=alpha_star,
            n=10,
            method=METHOD_CRC,
            config_hash="",
            curve=self.curve(),
        )

    def test_valid_result(self):
        r = self.ok()
        assert r.achieved_risk == 0.2

    def test_rejects_infeasible_lambda(self):
        with pytest.raises(RangeViolation):
            self.ok(lam=0.0)

    def test_rejects_non_minimal_lambda(self):
        with pytest.raises(RangeViolation):
            self.ok(lam=1.0)

    def test_rejects_lambda_off_curve(self):
        with pytest.raises(RangeViolation):
            self.ok(lam=0.25)

    def test_curve_rejects_increasing_risk(self):
        with pytest.raises(RangeViolation):
            RiskCurve(levels=np.array([0.0, 1.0]), risks=np.array([0.1, 0.2]))

    def test_curve_rejects_unsorted_levels(self):
        with pytest.raises(RangeViolation):
            RiskCurve(levels=np.array([0.5, 0.5]), risks=np.array([0.2, 0.1]))


class TestSerialization:
    def result(self):
        rng = np.random.default_rng(61)
        maps, masks = random_instance(rng, 4, 8)
        return calibrate_threshold(maps, masks, 0.4, config_hash=config_digest(METHOD_CRC))

    def test_round_trip_dict(self):
        r = self.result()
        back = calibration_from_dict(calibration_to_dict(r))
        assert back.lambda_hat == r.lambda_hat
        assert back.alpha_star == r.alpha_star
        assert back.config_hash == r.config_hash
        np.testing.assert_array_equal(back.curve.levels, r.curve.levels)
        np.testing.assert_array_equal(back.curve.risks, r.curve.risks)

    def test_round_trip_file(self, tmp_path):
        r = self.result()
        path = tmp_path / "cal.json"
        save_calibration(r, path)
        back = load_calibration(path)
        assert back.lambda_hat == r.lambda_hat
        assert back.n == r.n

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure):
            load_calibration(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(MalformedFile):
            load_calibration(path)

    def test_missing_key(self, tmp_path):
        path = tmp_path / "partial.json"
        path.write_text(json.dumps({"lambda_hat": 0.5}))
        with pytest.raises(MalformedFile):
            load_calibration(path)


class TestConfigDigest:
    def test_stable_and_parameter_sensitive(self):
        cfg = DiffusionConfig()
        a = config_digest(METHOD_RWCP, cfg)
        b = config_digest(METHOD_RWCP, DiffusionConfig())
        c = config_digest(METHOD_RWCP, DiffusionConfig(n_step=3))
        assert a == b
        assert a != c
        assert len(a) == 16

    def test_mismatch_warns(self):
        prob = ProbMap(np.array([[0.9, 0.1]]))
        with pytest.warns(UserWarning, match="does not match"):
            standard_crc_infer(prob, 0.5, config_hash="deadbeefdeadbeef")

    def test_matching_hash_is_silent(self):
        prob = ProbMap(np.array([[0.9, 0.1]]))
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("error")
            standard_crc_infer(prob, 0.5, config_hash=config_digest(METHOD_CRC))

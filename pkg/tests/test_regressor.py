from __future__ import annotations

import copy

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.augment import PerturbRanges, build_regression_samples
from app.facemodel import project_landmarks
from app.features import current_landmarks, decode_points, extract_features
from app.models import ShapeParams, ShapeVector
from app.regressor import (
    CascadeConfig,
    Fern,
    TrainingSample,
    block_scales,
    pair_correlations,
    regress,
    train_cascade,
)
from app.synth import SynthConfig, gen_synthetic_dataset

SMALL = CascadeConfig(stages=3, ferns=20, depth=3, feature_points=60, seed=4)


@pytest.fixture(scope="module")
def samples(rig, faces):
    ranges = PerturbRanges(expression_count=3, other_count=1)
    return build_regression_samples(faces, rig, ranges, np.random.default_rng(12))


@pytest.fixture(scope="module")
def model(samples, rig):
    return train_cascade(samples, rig, SMALL)


def landmark_error(shape: ShapeVector, sample: TrainingSample, rig) -> float:
    truth = project_landmarks(ShapeParams.from_vector(sample.target, sample.identity, sample.focal), rig, sample.center)
    found = project_landmarks(ShapeParams.from_vector(shape, sample.identity, sample.focal), rig, sample.center)
    return float(np.linalg.norm(found - truth, axis=1).mean())


class TestFern:
    def test_bit_order(self):
        fern = Fern(pairs=np.array([[0, 1], [2, 3]]), thresholds=np.zeros(2), outputs=np.zeros((4, 1)))
        assert_array_equal(fern.bins(np.array([[5.0, 1.0, 0.0, 9.0], [0.0, 1.0, 9.0, 0.0], [2.0, 0.0, 3.0, 1.0]])), [1, 2, 3])

    def test_bins_in_range(self, rng):
        fern = Fern(pairs=rng.integers(0, 10, size=(5, 2)), thresholds=rng.normal(size=5), outputs=np.zeros((32, 1)))
        bins = fern.bins(rng.normal(size=(200, 10)) * 50.0)
        assert bins.min() >= 0 and bins.max() < 32


def test_pair_correlations_match_corrcoef(rng):
    features = rng.normal(size=(50, 6))
    target = features[:, 1] - 0.5 * features[:, 4] + rng.normal(size=50)
    cov = np.cov(features, rowvar=False, bias=True)
    corr = pair_correlations(features, cov, target)
    expected = np.corrcoef(features[:, 1] - features[:, 4], target)[0, 1]
    assert corr[1, 4] == pytest.approx(expected, rel=1e-10)
    assert corr[4, 1] == pytest.approx(-expected, rel=1e-10)
    assert np.all(np.isnan(np.diag(corr)))


def test_constant_features_give_undefined_correlation():
    features = np.ones((10, 3))
    corr = pair_correlations(features, np.zeros((3, 3)), np.arange(10.0))
    assert np.all(np.isnan(corr))


def test_block_scales_are_per_block(rng):
    residuals = np.zeros((40, ShapeVector.size(2, 1)))
    residuals[:, :3] = rng.normal(0.0, 0.1, size=(40, 3))
    residuals[:, 6:8] = rng.normal(0.0, 5.0, size=(40, 2))
    scales = block_scales(residuals, 2, 1)
    assert_allclose(scales[:3], residuals[:, :3].std())
    assert_array_equal(scales[3:6], 1.0)
    assert_allclose(scales[6:8], residuals[:, 6:8].std())


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            CascadeConfig(depth=0)
        with pytest.raises(ValueError):
            CascadeConfig(shrinkage=-1.0)

    def test_too_few_samples(self, samples, rig):
        with pytest.raises(ValueError, match="at least 32"):
            train_cascade(samples[:5], rig, CascadeConfig(depth=5))

    def test_structure(self, model):
        assert len(model.stages) == SMALL.stages
        for stage in model.stages:
            assert len(stage.points) == SMALL.feature_points
            assert len(stage.ferns) == SMALL.ferns
            for fern in stage.ferns:
                assert fern.outputs.shape == (2**SMALL.depth, model.dimension)
                assert np.all(fern.pairs[:, 0] != fern.pairs[:, 1])

    def test_training_error_is_non_increasing(self, model, samples):
        initial = sum(float(((s.target.flatten() - s.initial.flatten()) ** 2).sum()) for s in samples)
        errors = [initial] + model.training_errors
        assert all(later <= earlier + 1e-9 for earlier, later in zip(errors, errors[1:]))
        assert errors[-1] < initial

    def test_zero_residuals_give_zero_outputs(self, samples, rig):
        settled = [
            TrainingSample(s.image, s.mask, s.target.copy(), s.target.copy(), s.identity, s.focal) for s in samples[:8]
        ]
        zero = train_cascade(settled, rig, CascadeConfig(stages=1, ferns=3, depth=2, feature_points=20))
        for fern in zero.stages[0].ferns:
            assert_array_equal(fern.outputs, 0.0)

    def test_bin_outputs_are_shrunk_means(self, samples, rig):
        cfg = CascadeConfig(stages=1, ferns=1, depth=2, feature_points=30, shrinkage=7.0, seed=1)
        trained = train_cascade(samples, rig, cfg)
        stage = trained.stages[0]
        fern = stage.ferns[0]
        features = np.stack(
            [
                extract_features(
                    s.image,
                    s.mask,
                    decode_points(stage.points, current_landmarks(s.initial, rig, s.identity, s.focal, s.center)),
                )
                for s in samples
            ]
        )
        residuals = np.stack([s.target.flatten() - s.initial.flatten() for s in samples])
        bins = fern.bins(features)
        for b in range(4):
            members = residuals[bins == b]
            if len(members):
                assert_allclose(fern.outputs[b], members.sum(axis=0) / (len(members) + 7.0), atol=1e-12)
            else:
                assert_array_equal(fern.outputs[b], 0.0)

    def test_parallel_training_is_deterministic(self, samples, rig):
        cfg = CascadeConfig(stages=1, ferns=5, depth=2, feature_points=30, seed=9)
        serial = train_cascade(samples, rig, cfg)
        parallel = train_cascade(samples, rig, CascadeConfig(stages=1, ferns=5, depth=2, feature_points=30, seed=9, workers=3))
        for a, b in zip(serial.stages[0].ferns, parallel.stages[0].ferns):
            assert_array_equal(a.pairs, b.pairs)
            assert_array_equal(a.outputs, b.outputs)

    def test_offface_exclusion_still_trains(self, samples, rig):
        cfg = CascadeConfig(stages=1, ferns=5, depth=2, feature_points=40, exclude_offface_pairs=True, seed=2)
        trained = train_cascade(samples, rig, cfg)
        assert len(trained.stages[0].ferns) == 5


class TestRegress:
    def test_zero_bins_return_initial(self, model, samples, rig):
        silent = copy.deepcopy(model)
        for stage in silent.stages:
            for fern in stage.ferns:
                fern.outputs = np.zeros_like(fern.outputs)
        sample = samples[0]
        result = regress(sample.image, sample.mask, sample.initial, silent, rig, sample.identity, sample.focal)
        assert not result.failed
        assert_allclose(result.shape.flatten(), sample.initial.flatten())

    def test_overfits_a_single_sample(self, samples, rig):
        sample = samples[0]
        pair = [sample, sample]
        cfg = CascadeConfig(stages=2, ferns=3, depth=1, feature_points=20, shrinkage=0.0)
        trained = train_cascade(pair, rig, cfg)
        result = regress(sample.image, sample.mask, sample.initial, trained, rig, sample.identity, sample.focal)
        expected = sample.target.copy()
        expected.expression = np.clip(expected.expression, 0.0, 1.0)
        assert_allclose(result.shape.flatten(), expected.flatten(), atol=1e-9)

    def test_projection_failure_is_flagged(self, samples, rig):
        trained = train_cascade(samples, rig, CascadeConfig(stages=1, ferns=2, depth=2, feature_points=20))
        sample = samples[0]
        behind = sample.initial.copy()
        behind.translation = np.array([0.0, 0.0, -1.0])
        result = regress(sample.image, sample.mask, behind, trained, rig, sample.identity, sample.focal)
        assert result.failed
        assert result.failed_stage == 0

    def test_dimension_mismatch(self, samples, rig):
        trained = train_cascade(samples, rig, CascadeConfig(stages=1, ferns=2, depth=2, feature_points=20))
        wrong = ShapeVector.from_flat(np.zeros(ShapeVector.size(2, 3)), 2, 3)
        with pytest.raises(ValueError, match="model expects"):
            regress(samples[0].image, samples[0].mask, wrong, trained, rig, samples[0].identity, samples[0].focal)


class TestRegressProperties:
    @pytest.fixture(scope="class")
    def trained(self, samples, rig):
        return train_cascade(samples, rig, CascadeConfig(stages=2, ferns=10, depth=3, feature_points=60, seed=5))

    def test_deterministic(self, trained, samples, rig):
        s = samples[3]
        first = regress(s.image, s.mask, s.initial, trained, rig, s.identity, s.focal)
        second = regress(s.image, s.mask, s.initial, trained, rig, s.identity, s.focal)
        assert_array_equal(first.shape.flatten(), second.shape.flatten())

    def test_ignores_pixels_outside_mask(self, trained, samples, rig):
        s = samples[3]
        rng = np.random.default_rng(0)
        scrambled = np.where(s.mask, s.image, rng.uniform(0.0, 255.0, size=s.image.shape))
        first = regress(s.image, s.mask, s.initial, trained, rig, s.identity, s.focal)
        second = regress(scrambled, s.mask, s.initial, trained, rig, s.identity, s.focal)
        assert_array_equal(first.shape.flatten(), second.shape.flatten())

    def test_expression_is_clamped(self, trained, samples, rig):
        for s in samples[:10]:
            result = regress(s.image, s.mask, s.initial, trained, rig, s.identity, s.focal)
            assert np.all((result.shape.expression >= 0.0) & (result.shape.expression <= 1.0))


@pytest.mark.slow
def test_synthetic_training_run_reduces_landmark_error(rig):
    faces = gen_synthetic_dataset(rig, 500, SynthConfig(image_size=128), np.random.default_rng(0))
    training = build_regression_samples(faces, rig, PerturbRanges(expression_count=3, other_count=1), np.random.default_rng(1))
    trained = train_cascade(training, rig, CascadeConfig(seed=0, workers=4))
    assert trained.config.ferns == 300
    assert all(b <= a for a, b in zip(trained.training_errors, trained.training_errors[1:]))

    unseen = gen_synthetic_dataset(rig, 40, SynthConfig(image_size=128), np.random.default_rng(100))
    held_out = build_regression_samples(unseen, rig, PerturbRanges(expression_count=3, other_count=1), np.random.default_rng(101))
    before, after = [], []
    for s in held_out:
        result = regress(s.image, s.mask, s.initial, trained, rig, s.identity, s.focal)
        before.append(landmark_error(s.initial, s, rig))
        after.append(landmark_error(result.shape, s, rig))
    assert np.mean(after) < 0.3 * np.mean(before)

from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.augment import PerturbRanges, build_regression_samples
from app.facemodel import FaceRig, image_center, make_toy_rig
from app.models import ShapeParams
from app.regressor import CascadeConfig, CascadeModel, train_cascade
from app.synth import SynthConfig, SyntheticSample, gen_synthetic_dataset

SMALL_FACES = SynthConfig(image_size=64)


@pytest.fixture(scope="session")
def rig() -> FaceRig:
    return make_toy_rig(n_expressions=6, n_identity=4, n_landmarks=20, grid=8, seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def center() -> np.ndarray:
    return image_center(128, 128)


def random_params(rig: FaceRig, rng: np.random.Generator, focal: float = 128.0, depth: float = 0.3) -> ShapeParams:
    return ShapeParams(
        rotation=Rotation.from_rotvec(rng.uniform(-0.2, 0.2, size=3)).as_quat(),
        translation=np.array([rng.uniform(-0.01, 0.01), rng.uniform(-0.01, 0.01), depth]),
        expression=rng.uniform(0.2, 0.8, size=rig.n_expressions),
        displacements=np.zeros((rig.n_landmarks, 2)),
        identity=rng.normal(0.0, 0.5, size=rig.n_identity),
        focal=focal,
    )


@pytest.fixture
def params(rig, rng) -> ShapeParams:
    return random_params(rig, rng)


@pytest.fixture(scope="session")
def faces(rig) -> list[SyntheticSample]:
    return gen_synthetic_dataset(rig, 6, SMALL_FACES, np.random.default_rng(11))


@pytest.fixture(scope="session")
def tiny_model(rig, faces) -> CascadeModel:
    samples = build_regression_samples(faces, rig, PerturbRanges(expression_count=3, other_count=1), np.random.default_rng(12))
    return train_cascade(samples, rig, CascadeConfig(stages=2, ferns=10, depth=3, feature_points=60, seed=4))

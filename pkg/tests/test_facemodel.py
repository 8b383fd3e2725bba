from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.spatial.transform import Rotation

from app.facemodel import (
    FaceRig,
    evaluate_rig,
    inter_ocular_distance,
    landmark_jacobian,
    make_toy_rig,
    project_bbox,
    project_landmarks,
    project_mesh,
    shape_vertices,
)
from app.models import BoundingBox, ProjectionError, ShapeParams, ShapeVector

from conftest import random_params


def two_point_rig() -> FaceRig:
    core = np.zeros((6, 1, 1))
    core[:, 0, 0] = [0.1, 0.0, 0.0, 0.0, 0.1, 0.0]
    return FaceRig(
        core_tensor=core,
        mean_landmarks=np.array([[1.0, 0.0], [0.0, 1.0]]),
        landmark_indices=np.array([0, 1]),
        triangles=np.zeros((0, 3), dtype=np.int64),
        eye_corners=(0, 1),
    )


def identity_pose(rig: FaceRig, focal: float, depth: float = 1.0) -> ShapeParams:
    return ShapeParams.neutral(rig.n_expressions, rig.n_landmarks, rig.n_identity, focal=focal, depth=depth)


class TestEvaluateRig:
    def test_zero_identity_is_origin_slice(self, rig):
        b0, basis = evaluate_rig(np.zeros(rig.n_identity), rig)
        assert_array_equal(b0, rig.core_tensor[:, 0, 0])
        assert_array_equal(basis, rig.core_tensor[:, 1:, 0])

    def test_first_basis_adds_first_identity_column(self, rig):
        u = np.zeros(rig.n_identity)
        u[0] = 1.0
        b0, _ = evaluate_rig(u, rig)
        assert_allclose(b0, rig.core_tensor[:, 0, 0] + rig.core_tensor[:, 0, 1])

    def test_matches_loop_contraction(self, rng):
        rig = make_toy_rig(n_expressions=2, n_identity=3, n_landmarks=3, grid=4, seed=3)
        u = rng.normal(size=3)
        b0, basis = evaluate_rig(u, rig)
        core = rig.core_tensor
        expected = np.zeros(core.shape[:2])
        for r in range(core.shape[0]):
            for k in range(core.shape[1]):
                value = core[r, k, 0]
                for j in range(3):
                    value += core[r, k, 1 + j] * u[j]
                expected[r, k] = value
        assert_allclose(b0, expected[:, 0], atol=1e-15)
        assert_allclose(basis, expected[:, 1:], atol=1e-15)

    def test_rejects_wrong_identity_length(self, rig):
        with pytest.raises(ValueError, match="Identity"):
            evaluate_rig(np.zeros(rig.n_identity + 1), rig)


class TestShapeVertices:
    def test_zero_expression_is_neutral(self, rig, rng):
        u = rng.normal(size=rig.n_identity)
        b0, _ = evaluate_rig(u, rig)
        assert_allclose(shape_vertices(u, np.zeros(rig.n_expressions), rig), b0.reshape(-1, 3))

    def test_unit_expression_adds_blendshape(self, rig, rng):
        u = rng.normal(size=rig.n_identity)
        b0, basis = evaluate_rig(u, rig)
        x = np.zeros(rig.n_expressions)
        x[2] = 1.0
        assert_allclose(shape_vertices(u, x, rig), (b0 + basis[:, 2]).reshape(-1, 3))

    def test_linear_in_expression(self, rig, rng):
        u = rng.normal(size=rig.n_identity)
        x1, x2 = rng.uniform(size=(2, rig.n_expressions))
        mid = shape_vertices(u, (x1 + x2) / 2.0, rig)
        assert_allclose(mid, (shape_vertices(u, x1, rig) + shape_vertices(u, x2, rig)) / 2.0, atol=1e-15)

    def test_strict_rejects_out_of_range(self, rig):
        x = np.full(rig.n_expressions, 1.5)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            shape_vertices(np.zeros(rig.n_identity), x, rig)

    def test_lenient_clamps(self, rig):
        u = np.zeros(rig.n_identity)
        clamped = shape_vertices(u, np.full(rig.n_expressions, 1.5), rig, strict=False)
        assert_allclose(clamped, shape_vertices(u, np.ones(rig.n_expressions), rig))


class TestProjection:
    def test_pinhole_example(self):
        rig = two_point_rig()
        landmarks = project_landmarks(identity_pose(rig, 500.0), rig, np.array([64.0, 64.0]))
        assert_allclose(landmarks[0], [114.0, 64.0])
        assert_allclose(landmarks[1], [64.0, 114.0])

    def test_doubling_focal_doubles_offsets(self, rig, params, center):
        near = project_landmarks(params, rig, center)
        far = project_landmarks(params.with_updates(focal=2.0 * params.focal), rig, center)
        assert_allclose(far - center, 2.0 * (near - center), rtol=1e-12)

    def test_matches_scalar_reimplementation(self, rig, params, center):
        landmarks = project_landmarks(params, rig, center)
        rot = Rotation.from_quat(params.rotation).as_matrix()
        core = rig.core_tensor
        for i, vid in enumerate(rig.landmark_indices):
            vertex = np.zeros(3)
            for c in range(3):
                row = 3 * vid + c
                weights = np.concatenate([[1.0], params.expression])
                ident = np.concatenate([[1.0], params.identity])
                vertex[c] = weights @ core[row] @ ident
            cam = rot @ vertex + params.translation
            expected = params.focal * cam[:2] / cam[2] + center
            assert_allclose(landmarks[i], expected, rtol=1e-12)

    def test_displacements_are_additive(self, rig, params, center, rng):
        base = project_landmarks(params, rig, center)
        offsets = rng.normal(size=(rig.n_landmarks, 2))
        moved = project_landmarks(params.with_updates(displacements=offsets), rig, center)
        assert_allclose(moved, base + offsets, atol=1e-12)

    def test_quaternion_sign_flip(self, rig, params, center):
        flipped = params.with_updates(rotation=-params.rotation)
        assert_allclose(project_landmarks(flipped, rig, center), project_landmarks(params, rig, center), atol=1e-12)

    def test_behind_camera_names_landmark(self, rig):
        params = identity_pose(rig, 100.0, depth=-1.0)
        with pytest.raises(ProjectionError) as info:
            project_landmarks(params, rig, np.array([64.0, 64.0]))
        assert info.value.landmark_index == 0


class TestBoundingBox:
    def test_margin_grows_box_about_centre(self):
        box = BoundingBox(10.0, 20.0, 100.0, 100.0).expanded(0.2)
        assert_allclose([box.width, box.height], [120.0, 120.0])
        assert_allclose(box.center, [60.0, 70.0])

    def test_projected_bbox_contains_landmarks(self, rig, params, center):
        box = project_bbox(params, rig, center, margin=0.0)
        assert box.contains(project_landmarks(params, rig, center))
        assert box.contains(project_mesh(params, rig, center))

    def test_single_vertex_gives_one_pixel_box(self):
        rig = FaceRig(
            core_tensor=np.zeros((3, 1, 1)),
            mean_landmarks=np.zeros((2, 2)),
            landmark_indices=np.array([0, 0]),
            triangles=np.zeros((0, 3), dtype=np.int64),
            eye_corners=(0, 1),
        )
        box = project_bbox(identity_pose(rig, 100.0), rig, np.array([50.0, 50.0]), margin=0.0)
        assert (box.width, box.height) == (1.0, 1.0)
        assert_allclose(box.center, [50.0, 50.0])

    def test_clamped_stays_inside_frame(self):
        box = BoundingBox(-10.0, 100.0, 50.0, 50.0).clamped(128, 128)
        assert (box.x, box.y, box.width, box.height) == (0.0, 78.0, 50.0, 50.0)


def test_shape_vector_layout(rig, params):
    vector = params.to_vector()
    flat = vector.flatten()
    assert flat.shape == (ShapeVector.size(rig.n_expressions, rig.n_landmarks),)
    back = ShapeParams.from_vector(ShapeVector.from_flat(flat, rig.n_expressions, rig.n_landmarks), params.identity, params.focal)
    assert_allclose(back.rotation_matrix, params.rotation_matrix, atol=1e-12)
    assert_allclose(back.expression, params.expression)


def test_shape_params_text(params):
    back = ShapeParams.from_text(params.to_text())
    assert_array_equal(back.translation, params.translation)
    assert_array_equal(back.identity, params.identity)
    assert back.focal == params.focal


def test_inter_ocular_distance(rig, params, center):
    landmarks = project_landmarks(params, rig, center)
    left, right = rig.eye_corners
    assert inter_ocular_distance(landmarks, rig) == pytest.approx(float(np.linalg.norm(landmarks[left] - landmarks[right])))
    assert inter_ocular_distance(landmarks, rig) > 0.0


@pytest.mark.parametrize("seed", range(100))
def test_jacobian_matches_finite_differences(rig, center, seed):
    rng = np.random.default_rng(seed)
    params = random_params(rig, rng)
    jac = landmark_jacobian(params, rig, center)
    h = 1e-6

    def project(p: ShapeParams) -> np.ndarray:
        return project_landmarks(p, rig, center).reshape(-1)

    def rotated(step: np.ndarray) -> ShapeParams:
        rot = Rotation.from_rotvec(step) * Rotation.from_quat(params.rotation)
        return params.with_updates(rotation=rot.as_quat())

    numeric_rot = np.stack(
        [(project(rotated(h * e)) - project(rotated(-h * e))) / (2 * h) for e in np.eye(3)], axis=1
    )
    numeric_t = np.stack(
        [
            (project(params.with_updates(translation=params.translation + h * e))
             - project(params.with_updates(translation=params.translation - h * e))) / (2 * h)
            for e in np.eye(3)
        ],
        axis=1,
    )
    numeric_x = np.stack(
        [
            (project(params.with_updates(expression=params.expression + h * e))
             - project(params.with_updates(expression=params.expression - h * e))) / (2 * h)
            for e in np.eye(rig.n_expressions)
        ],
        axis=1,
    )
    numeric_u = np.stack(
        [
            (project(params.with_updates(identity=params.identity + h * e))
             - project(params.with_updates(identity=params.identity - h * e))) / (2 * h)
            for e in np.eye(rig.n_identity)
        ],
        axis=1,
    )
    numeric_f = (project(params.with_updates(focal=params.focal + h)) - project(params.with_updates(focal=params.focal - h))) / (2 * h)

    for analytic, numeric in (
        (jac.rotation, numeric_rot),
        (jac.translation, numeric_t),
        (jac.expression, numeric_x),
        (jac.identity, numeric_u),
        (jac.focal, numeric_f),
    ):
        scale = max(np.abs(numeric).max(), 1e-8)
        assert np.abs(analytic - numeric).max() / scale < 1e-4

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from app.synth import SynthConfig, gen_blob_dataset, gen_sequence, gen_synthetic_dataset, gen_synthetic_sample, render_face

from conftest import SMALL_FACES


def test_same_seed_same_face(rig):
    a = gen_synthetic_sample(rig, SMALL_FACES, 42)
    b = gen_synthetic_sample(rig, SMALL_FACES, 42)
    assert_array_equal(a.image, b.image)
    assert_array_equal(a.mask, b.mask)


def test_faces_fit_in_frame(faces):
    for face in faces:
        assert face.image.shape == (64, 64)
        assert face.mask.any()
        assert np.all(face.landmarks >= 1.0) and np.all(face.landmarks <= 62.0)
        assert face.image.min() >= 0.0 and face.image.max() <= 255.0


def test_dataset_samples_are_independent_of_order(rig, faces):
    again = gen_synthetic_sample(rig, SMALL_FACES, faces[3].seed)
    assert_array_equal(again.image, faces[3].image)


def test_dataset_needs_a_meshed_rig(rig):
    flat = replace(rig, triangles=rig.triangles[:2])
    with pytest.raises(ValueError, match="4 triangles"):
        gen_synthetic_dataset(flat, 1, SMALL_FACES)


def test_negative_count(rig):
    with pytest.raises(ValueError):
        gen_synthetic_dataset(rig, -1, SMALL_FACES)


def test_sequence_keeps_identity(rig):
    frames = gen_sequence(rig, 4, SMALL_FACES, np.random.default_rng(5))
    for frame in frames[1:]:
        assert_array_equal(frame.params.identity, frames[0].params.identity)
        assert frame.params.focal == frames[0].params.focal
        assert np.all((frame.params.expression >= 0.0) & (frame.params.expression <= 1.0))


def test_render_background_shape_check(rig, faces):
    with pytest.raises(ValueError, match="Background"):
        render_face(faces[0].params, rig, 64, 64, background=np.zeros((32, 32)))


def test_render_without_background_is_black_outside_face(rig, faces):
    image, mask = render_face(faces[0].params, rig, 64, 64)
    assert np.all(image[~mask] == 0.0)
    assert np.all(image[mask] > 0.0)


def test_blob_dataset():
    images, masks = gen_blob_dataset(3, size=32, rng=np.random.default_rng(0))
    assert len(images) == len(masks) == 3
    assert images[0].shape == (32, 32, 3)
    assert masks[0].shape == (32, 32)
    assert all(m.any() and not m.all() for m in masks)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(image_size=4)
    with pytest.raises(ValueError):
        SynthConfig(depth=0.0)

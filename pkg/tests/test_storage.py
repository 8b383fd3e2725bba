from __future__ import annotations

import copy
import struct

import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.models import FormatError
from app.segnet import build_two_stream_net, forward, initialize, linear_probe_net
from app.storage import load_cascade, load_rig, load_segnet, save_cascade, save_rig, save_segnet


class TestRig:
    def test_round_trip(self, rig, tmp_path):
        save_rig(rig, tmp_path / "rig.bin")
        loaded = load_rig(tmp_path / "rig.bin")
        assert_allclose(loaded.core_tensor, rig.core_tensor, rtol=1e-6, atol=1e-9)
        assert_array_equal(loaded.landmark_indices, rig.landmark_indices)
        assert_array_equal(loaded.triangles, rig.triangles)
        assert loaded.eye_corners == rig.eye_corners
        assert (loaded.n_expressions, loaded.n_identity, loaded.n_landmarks) == (
            rig.n_expressions,
            rig.n_identity,
            rig.n_landmarks,
        )

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "rig.bin").write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_rig(tmp_path / "rig.bin")

    def test_truncated(self, rig, tmp_path):
        path = tmp_path / "rig.bin"
        save_rig(rig, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError, match="truncated"):
            load_rig(path)

    def test_trailing_bytes(self, rig, tmp_path):
        path = tmp_path / "rig.bin"
        save_rig(rig, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_rig(path)

    def test_unsupported_version(self, rig, tmp_path):
        path = tmp_path / "rig.bin"
        save_rig(rig, path)
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version 99"):
            load_rig(path)

    def test_cascade_file_is_not_a_rig(self, tiny_model, tmp_path):
        save_cascade(tiny_model, tmp_path / "model.bin")
        with pytest.raises(FormatError):
            load_rig(tmp_path / "model.bin")


class TestCascade:
    def test_round_trip(self, tiny_model, tmp_path):
        save_cascade(tiny_model, tmp_path / "model.bin")
        loaded = load_cascade(tmp_path / "model.bin")
        assert loaded.config == tiny_model.config
        assert len(loaded.stages) == len(tiny_model.stages)
        assert loaded.training_errors == tiny_model.training_errors
        for ours, theirs in zip(loaded.stages, tiny_model.stages):
            assert_array_equal(ours.points.triangle_ids, theirs.points.triangle_ids)
            assert_allclose(ours.points.barycentric, theirs.points.barycentric, rtol=1e-6, atol=1e-7)
            assert len(ours.ferns) == len(theirs.ferns)
            for a, b in zip(ours.ferns, theirs.ferns):
                assert_array_equal(a.pairs, b.pairs)
                assert_allclose(a.outputs, b.outputs, rtol=1e-6, atol=1e-9)

    def test_rejects_dimension_mismatch(self, tiny_model, tmp_path):
        broken = copy.deepcopy(tiny_model)
        broken.n_expressions += 1
        save_cascade(broken, tmp_path / "model.bin")
        with pytest.raises(FormatError, match="dimension"):
            load_cascade(tmp_path / "model.bin")


class TestSegnet:
    def test_probe_round_trip(self, tmp_path, rng):
        net = linear_probe_net(input_size=8)
        initialize(net, rng, init_std=0.1)
        net.trained = True
        save_segnet(net, tmp_path / "probe.bin")
        loaded = load_segnet(tmp_path / "probe.bin")
        assert loaded.trained
        image = rng.normal(size=(3, 8, 8))
        assert_allclose(forward(loaded, image)["fused"], forward(net, image)["fused"], atol=1e-5)

    def test_two_stream_round_trip(self, tmp_path, rng):
        net = build_two_stream_net(scale=1.0 / 32.0, input_size=32, freeze_fcn=True)
        initialize(net, rng)
        save_segnet(net, tmp_path / "net.bin")
        loaded = load_segnet(tmp_path / "net.bin")
        assert loaded.node_names() == net.node_names()
        assert not loaded.trained
        assert not loaded.node("upscore8").layer.trainable
        for (name, _, _, ours), (_, _, _, theirs) in zip(loaded.parameters(), net.parameters()):
            assert_allclose(ours, theirs, rtol=1e-6, atol=1e-7, err_msg=name)

from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.models import TrainingDivergedError, UntrainedModelError
from app.segnet import (
    HEADS,
    build_two_stream_net,
    check_shapes,
    forward,
    infer_probability_map,
    initialize,
    linear_probe_net,
    normalize_image,
)
from app.segnet_layers import Conv2D, MaxPool2x2, TransposedConv2D, Unpool2x2, bilinear_kernel, softmax
from app.segtrain import (
    CE_EPSILON,
    TrainConfig,
    evaluate_iou,
    fine_tune,
    gradient_check,
    loss,
    loss_and_gradients,
    momentum_update,
    new_network,
    sgd_step,
    train,
)
from app.synth import gen_blob_dataset


def naive_conv(x, weight, bias, pad, stride=1):
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = x[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, oc, i, j] = np.sum(patch * weight[oc]) + (bias[oc] if bias is not None else 0.0)
    return out


def two_stream_gradient_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    net = build_two_stream_net(scale=1.0 / 64.0, input_size=32)
    initialize(net, rng)
    image = normalize_image(rng.uniform(0.0, 255.0, size=(32, 32, 3)))
    truth = rng.uniform(size=(32, 32)) > 0.5
    return gradient_check(net, (image, truth), step=1e-5, samples=60, rng=rng, min_magnitude=1e-5)


class TestLayers:
    def test_conv_matches_loops(self, rng):
        layer = Conv2D(2, 3, 3, pad=1)
        layer.params["weight"][...] = rng.normal(size=layer.params["weight"].shape)
        layer.params["bias"][...] = rng.normal(size=3)
        x = rng.normal(size=(2, 2, 5, 6))
        assert_allclose(layer.forward(x), naive_conv(x, layer.params["weight"], layer.params["bias"], 1), atol=1e-12)

    def test_conv_input_gradient_is_adjoint(self, rng):
        layer = Conv2D(2, 3, 3, pad=1, bias=False)
        layer.params["weight"][...] = rng.normal(size=layer.params["weight"].shape)
        x = rng.normal(size=(1, 2, 6, 6))
        dy = rng.normal(size=(1, 3, 6, 6))
        y = layer.forward(x)
        (dx,) = layer.backward(dy)
        assert np.sum(y * dy) == pytest.approx(np.sum(x * dx), rel=1e-10)

    def test_transposed_conv_is_adjoint_of_strided_conv(self, rng):
        layer = TransposedConv2D(2, 3, 4, stride=2, pad=1, bias=False)
        weight = rng.normal(size=layer.params["weight"].shape)
        layer.params["weight"][...] = weight
        x = rng.normal(size=(1, 2, 3, 3))
        y = layer.forward(x)
        assert y.shape == (1, 3, 6, 6)
        probe = rng.normal(size=y.shape)
        # the strided convolution with weight (in=3 -> out=2) is the adjoint
        back = naive_conv(probe, weight, None, pad=1, stride=2)
        assert np.sum(y * probe) == pytest.approx(np.sum(x * back), rel=1e-10)

    def test_bilinear_kernel(self):
        assert_allclose(bilinear_kernel(4)[0], [0.0625, 0.1875, 0.1875, 0.0625])

    def test_unpool_places_values_at_switches(self):
        pool = MaxPool2x2()
        x = np.array([[[[1.0, 5.0], [2.0, 3.0]]]])
        assert_array_equal(pool.forward(x), [[[[5.0]]]])
        unpooled = Unpool2x2(pool).forward(np.array([[[[7.0]]]]))
        assert_array_equal(unpooled, [[[[0.0, 7.0], [0.0, 0.0]]]])

    def test_unpool_rejects_mismatched_input(self):
        pool = MaxPool2x2()
        pool.forward(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ValueError, match="switches"):
            Unpool2x2(pool).forward(np.zeros((1, 1, 1, 1)))

    def test_softmax_sums_to_one(self, rng):
        probs = softmax(rng.normal(size=(2, 2, 3, 3)) * 50.0)
        assert_allclose(probs.sum(axis=1), 1.0)


class TestArchitecture:
    def test_shape_audit_at_128(self):
        net = build_two_stream_net(scale=1.0 / 16.0, input_size=128)
        net.forward_logits(np.zeros((1, 3, 128, 128)))
        chain = [128] + [net.activation(f"pool{b}").shape[2] for b in range(1, 6)]
        assert chain == [128, 64, 32, 16, 8, 4]
        assert net.node("fc6").layer.kernel == 4
        assert net.activation("fc6").shape[2:] == (1, 1)
        assert net.activation("score_deconv").shape == (1, 2, 128, 128)
        assert net.activation("upscore8").shape == (1, 2, 128, 128)
        shapes = check_shapes(net)
        assert shapes["score_fused"] == (1, 2, 128, 128)
        assert net.activation("concat").shape == (1, 4, 128, 128)
        assert net.activation("score_fused").shape == (1, 2, 128, 128)

    def test_parameter_count_at_sixteenth_scale(self):
        def conv(cin, cout, k, bias=True):
            return cout * cin * k * k + (cout if bias else 0)

        trunk = (
            conv(3, 4, 3) + conv(4, 4, 3)
            + conv(4, 8, 3) + conv(8, 8, 3)
            + conv(8, 16, 3) + 2 * conv(16, 16, 3)
            + conv(16, 32, 3) + 2 * conv(32, 32, 3)
            + 3 * conv(32, 32, 3)
        )
        dense = conv(32, 256, 4)
        deconv = (
            conv(256, 32, 4)
            + 3 * conv(32, 32, 3)
            + 2 * conv(32, 32, 3) + conv(32, 16, 3)
            + 2 * conv(16, 16, 3) + conv(16, 8, 3)
            + conv(8, 8, 3) + conv(8, 4, 3)
            + 2 * conv(4, 4, 3)
            + conv(4, 2, 1)
        )
        fcn = conv(32, 2, 1) + conv(32, 2, 1) + conv(16, 2, 1) + 2 * conv(2, 2, 4, bias=False) + conv(2, 2, 16, bias=False)
        fusion = conv(4, 2, 1)
        expected = trunk + dense + deconv + fcn + fusion
        assert expected == 379434
        assert build_two_stream_net(scale=1.0 / 16.0, input_size=128).parameter_count() == expected

    def test_zero_final_conv_gives_even_odds(self, rng):
        net = new_network(TrainConfig(scale=1.0 / 32.0, input_size=32))
        for value in net.node("score_fused").layer.params.values():
            value[...] = 0.0
        fused = forward(net, rng.normal(size=(3, 32, 32)))["fused"]
        assert_allclose(fused, 0.5, atol=1e-12)

    def test_every_unpool_references_a_trunk_pool(self):
        net = build_two_stream_net(scale=1.0 / 32.0, input_size=64)
        pools = {id(node.layer) for node in net.nodes if isinstance(node.layer, MaxPool2x2)}
        unpools = [node.layer for node in net.nodes if isinstance(node.layer, Unpool2x2)]
        assert len(unpools) == 5
        assert all(id(layer.pool) in pools for layer in unpools)

    def test_rejects_bad_input_size(self):
        with pytest.raises(ValueError, match="multiple of 32"):
            build_two_stream_net(input_size=100)

    def test_frozen_fcn_stays_bilinear(self):
        net = new_network(TrainConfig(scale=1.0 / 32.0, input_size=32, freeze_fcn=True))
        upsampler = net.node("upscore8").layer
        assert not upsampler.trainable
        assert_allclose(upsampler.params["weight"][0, 0], bilinear_kernel(16))

    def test_forward_outputs_are_distributions(self, rng):
        net = new_network(TrainConfig(scale=1.0 / 32.0, input_size=32))
        outputs = forward(net, rng.normal(size=(3, 32, 32)))
        assert set(outputs) == set(HEADS)
        for probs in outputs.values():
            assert probs.shape == (1, 2, 32, 32)
            assert_allclose(probs.sum(axis=1), 1.0)


class TestTraining:
    def test_uniform_prediction_loss(self):
        net = linear_probe_net(input_size=4)
        outputs = forward(net, np.zeros((3, 4, 4)))
        truth = np.zeros((4, 4), dtype=bool)
        truth[:2] = True
        assert loss(outputs, truth, TrainConfig()) == pytest.approx(2.0 * math.log(2.0), abs=1e-9)

    def test_momentum_update(self):
        param = np.array([1.0])
        velocity = np.array([0.2])
        momentum_update(param, np.array([0.5]), velocity, learning_rate=0.1, momentum=0.9, weight_decay=0.01)
        assert_allclose(velocity, [0.129])
        assert_allclose(param, [1.129])

    @pytest.mark.parametrize("seed", range(100))
    def test_linear_net_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = linear_probe_net(input_size=6)
        initialize(net, rng, init_std=0.5)
        sample = (rng.normal(size=(3, 6, 6)), rng.uniform(size=(6, 6)) > 0.5)
        assert gradient_check(net, sample, step=1e-5, samples=8, rng=rng, min_magnitude=1e-4) < 1e-4

    def test_two_stream_gradients_match_finite_differences(self):
        assert two_stream_gradient_error(5) < 1e-4

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(100))
    def test_two_stream_gradients_across_seeds(self, seed):
        assert two_stream_gradient_error(seed) < 1e-4

    def test_corrupted_backward_is_caught(self, monkeypatch):
        rng = np.random.default_rng(7)
        net = linear_probe_net(input_size=6)
        initialize(net, rng, init_std=0.5)
        layer = net.node("score").layer
        backward = layer.backward

        def corrupted(dy):
            out = backward(dy)
            layer.grads["weight"] *= 1.5
            return out

        monkeypatch.setattr(layer, "backward", corrupted)
        sample = (rng.normal(size=(3, 6, 6)), rng.uniform(size=(6, 6)) > 0.5)
        assert gradient_check(net, sample, step=1e-5, samples=8, rng=rng, min_magnitude=1e-4) > 1e-2

    def test_vacuous_check_is_nan(self, rng):
        net = linear_probe_net(input_size=6)
        initialize(net, rng, init_std=0.5)
        sample = (rng.normal(size=(3, 6, 6)), rng.uniform(size=(6, 6)) > 0.5)
        assert math.isnan(gradient_check(net, sample, samples=8, rng=rng, min_magnitude=1e6))

    def test_clamped_pixels_carry_no_gradient(self):
        net = linear_probe_net(input_size=4)
        net.node("score").layer.params["bias"][...] = [0.0, 100.0]
        truth = np.zeros((1, 4, 4), dtype=bool)
        value = loss_and_gradients(net, np.zeros((1, 3, 4, 4)), truth, TrainConfig())
        assert value == pytest.approx(-2.0 * math.log(CE_EPSILON))
        for _, node, pname, _ in net.parameters():
            assert_array_equal(node.layer.grads[pname], 0.0)

    def test_two_steps_with_momentum(self):
        param = np.array([0.0])
        velocity = np.array([0.0])
        for _ in range(2):
            momentum_update(param, np.array([2.0]), velocity, learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        assert_allclose(param, [-0.1 * 2.0 * 2.9])

    def test_toy_net_fits_four_samples(self):
        rng = np.random.default_rng(3)
        rgb, masks = gen_blob_dataset(4, size=16, rng=rng)
        net = linear_probe_net(input_size=16)
        initialize(net, rng, init_std=0.01)
        cfg = TrainConfig(learning_rate=0.1, batch_size=4, iterations=200, log_every=0)
        images = np.stack([normalize_image(image) for image in rgb])
        losses = train(net, images, np.stack(masks), cfg)
        assert losses[-1] < 0.2 * losses[0]

    def test_non_finite_gradients_raise(self):
        net = linear_probe_net(input_size=4)
        net.node("score").layer.params["weight"][0, 0] = np.nan
        batch = (np.ones((1, 3, 4, 4)), np.ones((1, 4, 4), dtype=bool))
        with pytest.raises(TrainingDivergedError, match="score.weight"):
            sgd_step(net, batch, TrainConfig())

    def test_untrained_net_refuses_inference(self):
        net = linear_probe_net(input_size=4)
        with pytest.raises(UntrainedModelError):
            infer_probability_map(net, np.zeros((4, 4, 3)))

    def test_probe_learns_blob_colours(self):
        rng = np.random.default_rng(0)
        rgb, masks = gen_blob_dataset(24, size=16, rng=rng)
        net = linear_probe_net(input_size=16)
        initialize(net, rng, init_std=0.01)
        cfg = TrainConfig(batch_size=4, iterations=300, log_every=0)
        images = np.stack([normalize_image(image) for image in rgb])
        losses = train(net, images, np.stack(masks), cfg)
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
        prob = infer_probability_map(net, rgb[0])
        assert prob.shape == (16, 16)
        assert evaluate_iou(net, rgb, masks) > 0.5

    def test_fine_tune_needs_negatives(self):
        net = linear_probe_net(input_size=4)
        with pytest.raises(ValueError, match="negative"):
            fine_tune(net, np.zeros((2, 3, 4, 4)), np.zeros((2, 4, 4), bool), np.zeros((0, 3, 4, 4)), TrainConfig())

    def test_fine_tune_balances_negatives(self, monkeypatch):
        seen = {}

        def fake_train(net, images, masks, cfg, iterations=None, learning_rate=None, callback=None):
            seen.update(count=len(images), negatives=int((~masks.any(axis=(1, 2))).sum()), lr=learning_rate)
            return [0.0]

        monkeypatch.setattr("app.segtrain.train", fake_train)
        positives = np.ones((3, 4, 4), dtype=bool)
        fine_tune(linear_probe_net(input_size=4), np.zeros((3, 3, 4, 4)), positives, np.zeros((5, 3, 4, 4)), TrainConfig())
        assert seen == {"count": 6, "negatives": 3, "lr": 0.001}

    def test_config_from_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("learning_rate = 0.02\ninit_std = 0.01\nfreeze_fcn = true\n")
        cfg = TrainConfig.from_file(path)
        assert cfg.learning_rate == 0.02
        assert cfg.init_std == 0.01
        assert cfg.freeze_fcn is True
        assert cfg.loss_weights == {"deconv": 0.5, "fcn": 0.5, "fused": 1.0}

    def test_config_rejects_unknown_keys(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("learning_rte = 0.02\n")
        with pytest.raises(ValueError, match="learning_rte"):
            TrainConfig.from_file(path)

    @pytest.mark.slow
    def test_toy_segmentation_reaches_target_iou(self):
        rng = np.random.default_rng(0)
        rgb, masks = gen_blob_dataset(240, size=128, rng=rng)
        cfg = TrainConfig(iterations=2000, batch_size=4, log_every=100)
        net = new_network(cfg)
        images = np.stack([normalize_image(image) for image in rgb[:200]])
        train(net, images, np.stack(masks[:200]), cfg)
        assert evaluate_iou(net, rgb[200:], masks[200:]) >= 0.9

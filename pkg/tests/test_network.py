"""Tests for ImpatientNet construction, staged forward passes and the joint loss."""

import numpy as np
import pytest

from src.core.exceptions import BudgetError, ConfigurationError, ShapeMismatchError
from src.models.schemas import ArchitectureConfig, HeadKind, HeadSpec, LayerSpec, LayerType
from src.nn.gradcheck import numerical_gradient, relative_error
from src.nn.layers import AvgPoolGlobal, AvgPoolGrid, FullyConnected, ReLU
from src.nn.losses import softmax_cross_entropy
from src.services.network import ImpatientNet, alexnet_style_architecture, desk_architecture, fit_grid_heads


def batch_for(net, n, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((n, *net.input_shape))
    labels = rng.integers(0, net.num_classes, n)
    return images, labels


def weighted_loss(net, images, labels, weights):
    logits = net.forward_logits(images)
    return sum(w * softmax_cross_entropy(z, labels).loss for w, z in zip(weights, logits))


class TestBuild:

    def test_generated_heads_follow_blocks(self, tiny_architecture):
        net = ImpatientNet.build(tiny_architecture)
        # conv, bn, relu, maxpool per block
        assert net.attach_points == [3, 7]
        assert net.num_heads == 2

    def test_head_layers(self, three_head_architecture):
        net = ImpatientNet.build(three_head_architecture)
        assert isinstance(net.heads[0].layers[0], AvgPoolGlobal)
        assert isinstance(net.heads[1].layers[0], AvgPoolGrid)
        assert len(net.heads[2].layers) == 1 and isinstance(net.heads[2].layers[0], FullyConnected)

    def test_hidden_units_add_fc_relu(self):
        arch = desk_architecture(input_shape=(1, 8, 8), num_classes=3, channels=(2, 2), hidden_units=5)
        head = ImpatientNet.build(arch).heads[0]
        assert [type(layer) for layer in head.layers] == [AvgPoolGlobal, FullyConnected, ReLU, FullyConnected]

    def test_unordered_attach_points(self, three_head_architecture):
        arch = three_head_architecture.model_copy(update={
            "heads": [HeadSpec(attach_point=3), HeadSpec(attach_point=1), HeadSpec(attach_point=5)]
        })
        with pytest.raises(ConfigurationError):
            ImpatientNet.build(arch)

    def test_attach_point_past_end(self, three_head_architecture):
        arch = three_head_architecture.model_copy(update={"heads": [HeadSpec(attach_point=6)]})
        with pytest.raises(ConfigurationError):
            ImpatientNet.build(arch)

    def test_last_head_must_close_backbone(self, three_head_architecture):
        arch = three_head_architecture.model_copy(update={"heads": [HeadSpec(attach_point=3)]})
        with pytest.raises(ConfigurationError):
            ImpatientNet.build(arch)

    def test_avg4x4_needs_spatial_extent(self):
        arch = desk_architecture(input_shape=(1, 16, 16), channels=(4, 4, 4, 4), head_kind=HeadKind.AVG4X4)
        with pytest.raises(ConfigurationError):
            ImpatientNet.build(arch)

    def test_avg_needs_spatial_input(self):
        arch = ArchitectureConfig(
            input_shape=(1, 4, 4),
            num_classes=2,
            layers=[LayerSpec(type=LayerType.FC, out_features=3)],
            heads=[HeadSpec(attach_point=0, kind=HeadKind.AVG)],
        )
        with pytest.raises(ConfigurationError):
            ImpatientNet.build(arch)

    def test_backbone_too_deep_for_input(self):
        arch = desk_architecture(input_shape=(1, 4, 4), channels=(2, 2, 2, 2))
        with pytest.raises(ConfigurationError):
            ImpatientNet.build(arch)

    def test_same_seed_same_parameters(self, tiny_architecture):
        a = ImpatientNet.build(tiny_architecture, seed=3)
        b = ImpatientNet.build(tiny_architecture, seed=3)
        for (_, pa, _), (_, pb, _) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa, pb)

    def test_desk_architecture(self):
        net = ImpatientNet.build(desk_architecture())
        assert net.num_heads == 4
        assert net.layer_shapes()[-1] == (32, 1, 1)

    def test_grid_heads_fall_back_on_small_maps(self):
        arch = desk_architecture(head_kind=HeadKind.AVG4X4)
        with pytest.raises(ConfigurationError):
            ImpatientNet.build(arch)
        fitted = fit_grid_heads(arch)
        assert [h.kind for h in fitted.resolved_heads()] == [HeadKind.AVG4X4] * 2 + [HeadKind.AVG] * 2
        assert ImpatientNet.build(fitted).num_heads == 4

    def test_grid_heads_on_flat_activations(self):
        arch = ArchitectureConfig(
            input_shape=(1, 8, 8),
            num_classes=3,
            layers=[
                LayerSpec(type=LayerType.CONV, out_channels=2, kernel_size=3, padding=1),
                LayerSpec(type=LayerType.RELU),
                LayerSpec(type=LayerType.FC, out_features=5),
                LayerSpec(type=LayerType.RELU),
            ],
            heads=[HeadSpec(attach_point=1, kind=HeadKind.AVG4X4), HeadSpec(attach_point=3, kind=HeadKind.AVG4X4)],
        )
        kinds = [h.kind for h in fit_grid_heads(arch).resolved_heads()]
        assert kinds == [HeadKind.AVG4X4, HeadKind.FC_ONLY]

    def test_alexnet_style_architecture(self):
        arch = alexnet_style_architecture()
        net = ImpatientNet.build(arch)
        assert net.num_heads == 7
        kinds = [h.kind for h in arch.resolved_heads()]
        assert kinds == [HeadKind.AVG4X4] * 5 + [HeadKind.FC_ONLY] * 2
        images, _ = batch_for(net, 2)
        assert net.forward_all(images).probabilities.shape == (7, 2, 10)


class TestForward:

    def test_forward_all_shapes_and_normalization(self, three_head_architecture):
        net = ImpatientNet.build(three_head_architecture)
        images, _ = batch_for(net, 5)
        staged = net.forward_all(images)
        assert staged.probabilities.shape == (3, 5, 4)
        np.testing.assert_allclose(staged.probabilities.sum(axis=-1), 1.0, rtol=1e-5)
        assert staged.predictions().shape == (3, 5)

    def test_forward_head_matches_forward_all(self, tiny_architecture):
        net = ImpatientNet.build(tiny_architecture, dtype=np.float64)
        net.eval()
        images, _ = batch_for(net, 4)
        staged = net.forward_all(images).probabilities
        for k in range(net.num_heads):
            np.testing.assert_allclose(net.forward_head(images, k), staged[k])

    def test_head_logits_are_lazy(self, three_head_architecture):
        net = ImpatientNet.build(three_head_architecture)
        images, _ = batch_for(net, 2)
        first = next(net.iter_head_logits(images))
        assert first.shape == (2, 4)
        assert net.backbone[-1]._cache is None
        assert net.heads[-1].layers[0]._cache is None

    def test_input_shape_is_checked(self, tiny_architecture):
        net = ImpatientNet.build(tiny_architecture)
        with pytest.raises(ShapeMismatchError):
            net.forward_all(np.zeros((2, 1, 5, 5), dtype=np.float32))

    def test_truncated_matches_prefix(self, three_head_architecture):
        net = ImpatientNet.build(three_head_architecture, dtype=np.float64)
        images, _ = batch_for(net, 3)
        full = net.forward_all(images).probabilities
        short = net.truncated(1)
        assert short.num_heads == 2
        np.testing.assert_allclose(short.forward_all(images).probabilities, full[:2])

    def test_predict_proba_batch_independent(self, tiny_architecture):
        net = ImpatientNet.build(tiny_architecture, dtype=np.float64)
        images, _ = batch_for(net, 7)
        np.testing.assert_allclose(net.predict_proba(images, 2), net.predict_proba(images, 256))

    def test_named_entries_are_unique(self, tiny_architecture):
        net = ImpatientNet.build(tiny_architecture)
        names = [n for n, _, _ in net.named_parameters()] + [n for n, _ in net.named_buffers()]
        assert len(names) == len(set(names))
        assert "backbone.0.weight" in names
        assert "backbone.1.running_mean" in names
        assert "heads.1.1.bias" in names


class TestJointLoss:

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, tiny_architecture, seed):
        net = ImpatientNet.build(tiny_architecture, seed=seed, dtype=np.float64)
        images, labels = batch_for(net, 4, seed)
        weights = np.random.default_rng(seed).dirichlet([1.0, 1.0])

        net.zero_grad()
        net.joint_loss_backward(images, labels, weights)
        for name, param, grad in net.named_parameters():
            numeric = numerical_gradient(lambda: weighted_loss(net, images, labels, weights), param, 1e-6)
            # conv biases feeding BatchNorm have an exactly zero gradient
            close = np.max(np.abs(grad - numeric)) < 1e-7
            assert close or relative_error(grad, numeric) < 1e-4, name

    def test_loss_value(self, tiny_architecture):
        net = ImpatientNet.build(tiny_architecture, dtype=np.float64)
        images, labels = batch_for(net, 4)
        weights = [0.3, 0.7]
        result = net.joint_loss_backward(images, labels, weights)
        assert result.weighted_loss == pytest.approx(weighted_loss(net, images, labels, weights))
        assert result.regularization == 0.0
        assert result.total == result.weighted_loss

    def test_standard_weights_leave_early_heads_untouched(self, three_head_architecture):
        net = ImpatientNet.build(three_head_architecture, dtype=np.float64)
        images, labels = batch_for(net, 3)
        net.zero_grad()
        net.joint_loss_backward(images, labels, [0.0, 0.0, 1.0], weight_decay=1e-3)
        for k in (0, 1):
            for name, _, grad in net.head_parameters(k):
                assert not grad.any(), name
        assert any(grad.any() for _, _, grad in net.head_parameters(2))

    def test_gradients_are_linear_in_weights(self, three_head_architecture):
        net = ImpatientNet.build(three_head_architecture, dtype=np.float64)
        images, labels = batch_for(net, 3)

        def grads(w):
            net.zero_grad()
            net.joint_loss_backward(images, labels, w)
            return [g.copy() for _, _, g in net.named_parameters()]

        a, b = np.array([0.2, 0.5, 0.3]), np.array([0.6, 0.1, 0.3])
        for ga, gb, gab in zip(grads(a), grads(b), grads(a + b)):
            np.testing.assert_allclose(gab, ga + gb, atol=1e-12)

    def test_weight_decay_adds_l2_term(self, three_head_architecture):
        net = ImpatientNet.build(three_head_architecture, dtype=np.float64)
        images, labels = batch_for(net, 3)
        weights = [0.0, 0.5, 0.5]
        net.zero_grad()
        plain = net.joint_loss_backward(images, labels, weights)
        before = {n: g.copy() for n, _, g in net.named_parameters()}
        net.zero_grad()
        decayed = net.joint_loss_backward(images, labels, weights, weight_decay=0.1)

        expected = 0.0
        for name, param, grad in net.named_parameters():
            active = name.startswith("backbone.") or not name.startswith("heads.0.")
            if name.endswith(".weight") and active:
                expected += 0.05 * np.sum(param ** 2)
                np.testing.assert_allclose(grad, before[name] + 0.1 * param, atol=1e-12)
            else:
                np.testing.assert_allclose(grad, before[name], atol=1e-12)
        assert decayed.regularization == pytest.approx(expected)
        assert decayed.total == pytest.approx(plain.total + expected)

    def test_frozen_backbone_receives_no_gradient(self, tiny_architecture):
        net = ImpatientNet.build(tiny_architecture, dtype=np.float64)
        images, labels = batch_for(net, 4)
        net.zero_grad()
        net.joint_loss_backward(images, labels, [0.5, 0.5], propagate_to_backbone=False)
        assert not any(g.any() for _, _, g in net.backbone_parameters())
        assert all(any(g.any() for _, _, g in net.head_parameters(k)) for k in range(2))

    def test_frozen_backbone_is_not_decayed(self, tiny_architecture):
        net = ImpatientNet.build(tiny_architecture, dtype=np.float64)
        images, labels = batch_for(net, 4)
        net.zero_grad()
        result = net.joint_loss_backward(images, labels, [0.5, 0.5], weight_decay=0.1,
                                         propagate_to_backbone=False)
        assert not any(g.any() for _, _, g in net.backbone_parameters())
        head_l2 = sum(
            0.05 * np.sum(param ** 2)
            for k in range(2)
            for name, param, _ in net.head_parameters(k)
            if name.endswith(".weight")
        )
        assert result.regularization == pytest.approx(head_l2)

    def test_weights_are_validated(self, tiny_architecture):
        net = ImpatientNet.build(tiny_architecture)
        images, labels = batch_for(net, 2)
        with pytest.raises(BudgetError):
            net.joint_loss_backward(images, labels, [1.0])

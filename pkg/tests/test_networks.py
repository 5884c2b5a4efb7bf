import numpy as np
import pytest
import torch

from dilseg.networks import (
    Architecture,
    BackboneInit,
    NetworkSpec,
    StreamAblation,
    apply_ablation,
    build_network,
    count_parameters,
)
from dilseg.training import soft_dice_loss

ALL_ARCHS = ["UNET", "UNETPP", "RESUNET", "MRRN", "MRRN_DS", "FPSNET", "FPSNET_SL"]

# Reference parameter budgets for the default configurations.
PARAM_BUDGETS = {
    "UNET": 13e6,
    "UNETPP": 9e6,
    "RESUNET": 32e6,
    "MRRN": 39e6,
    "MRRN_DS": 39e6,
}


def tiny_spec(arch, **kw):
    """Small widths keep per-test forward passes cheap."""
    defaults = dict(architecture=arch, base_width=8)
    defaults.update(kw)
    return NetworkSpec(**defaults)


class TestSpecValidation:
    def test_defaults(self):
        spec = NetworkSpec(architecture="MRRN_DS")
        assert spec.in_channels == 5
        assert NetworkSpec(architecture="FPSNET").in_channels == 3

    def test_even_channels_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            NetworkSpec(architecture="UNET", in_channels=4)

    def test_supervision_level_range(self):
        with pytest.raises(ValueError, match="supervision_level"):
            NetworkSpec(architecture="MRRN_DS", supervision_level=5)

    def test_ablation_only_for_mrrn(self):
        with pytest.raises(ValueError, match="ablation"):
            NetworkSpec(architecture="UNET", ablation="DROP_FULLRES_STREAM")

    def test_spec_hash_stable(self):
        a = NetworkSpec(architecture="MRRN")
        b = NetworkSpec(architecture="MRRN")
        assert a.hash() == b.hash()
        c = NetworkSpec(architecture="MRRN", base_width=32)
        assert a.hash() != c.hash()


class TestForwardContract:
    @pytest.mark.parametrize("arch", ALL_ARCHS)
    def test_shape_and_range(self, arch):
        torch.manual_seed(0)
        spec = tiny_spec(arch)
        net = build_network(spec)
        net.eval()
        x = torch.randn(2, spec.in_channels, 64, 64)
        with torch.no_grad():
            out = net(x)
        assert out.main.shape == (2, 1, 64, 64)
        assert float(out.main.min()) >= 0.0
        assert float(out.main.max()) <= 1.0
        if arch == "MRRN_DS":
            assert out.aux.shape == out.main.shape
        if arch == "UNETPP":
            assert isinstance(out.aux, list) and len(out.aux) == spec.num_levels

    def test_channel_mismatch_raises(self):
        net = build_network(tiny_spec("UNET"))
        with pytest.raises(ValueError, match="expected"):
            net(torch.randn(1, 3, 64, 64))

    def test_zero_weight_head_gives_half(self):
        net = build_network(tiny_spec("UNET"))
        torch.nn.init.zeros_(net.net.head.weight)
        torch.nn.init.zeros_(net.net.head.bias)
        net.eval()
        with torch.no_grad():
            out = net(torch.randn(1, 5, 32, 32))
        np.testing.assert_allclose(out.main.numpy(), 0.5, atol=1e-7)

    def test_duplicated_sample_identical_outputs(self):
        torch.manual_seed(1)
        net = build_network(tiny_spec("MRRN_DS"))
        net.eval()
        x = torch.randn(1, 5, 32, 32)
        batch = torch.cat([x, x], dim=0)
        with torch.no_grad():
            out = net(batch)
        np.testing.assert_array_equal(out.main[0].numpy(), out.main[1].numpy())

    def test_deterministic_given_weights(self):
        torch.manual_seed(2)
        net = build_network(tiny_spec("UNETPP"))
        net.eval()
        x = torch.randn(1, 5, 32, 32)
        with torch.no_grad():
            a = net(x).main.numpy()
            b = net(x).main.numpy()
        np.testing.assert_array_equal(a, b)

    def test_unetpp_inference_mean_vs_last(self):
        torch.manual_seed(3)
        last = build_network(tiny_spec("UNETPP", unetpp_inference="last"))
        mean = build_network(tiny_spec("UNETPP", unetpp_inference="mean"))
        mean.load_state_dict(last.state_dict())
        last.eval(), mean.eval()
        x = torch.randn(1, 5, 32, 32)
        with torch.no_grad():
            out_last = last(x)
            out_mean = mean(x)
        stacked = torch.stack(out_last.aux).mean(dim=0)
        np.testing.assert_allclose(out_mean.main.numpy(), stacked.numpy(), atol=1e-7)
        np.testing.assert_array_equal(out_last.main.numpy(), out_last.aux[-1].numpy())


class TestParameterCounts:
    def test_single_conv_count(self):
        conv = torch.nn.Conv2d(1, 1, 3)
        assert count_parameters(conv) == 10

    @pytest.mark.parametrize("arch,budget", sorted(PARAM_BUDGETS.items()))
    def test_default_configs_match_budgets(self, arch, budget):
        net = build_network(NetworkSpec(architecture=arch))
        n = count_parameters(net)
        assert 0.8 * budget <= n <= 1.2 * budget, f"{arch}: {n}"

    def test_frozen_backbone_excluded(self):
        full = build_network(tiny_spec("FPSNET"))
        frozen = build_network(tiny_spec("FPSNET", freeze_backbone=True))
        n_full = count_parameters(full)
        n_frozen = count_parameters(frozen)
        assert n_frozen < n_full
        assert count_parameters(frozen, trainable_only=False) == n_full


class TestAblation:
    def test_none_unchanged(self):
        spec = NetworkSpec(architecture="MRRN")
        assert apply_ablation(spec) == spec

    def test_keep_only_fullres_strictly_smaller(self):
        full = build_network(tiny_spec("MRRN"))
        ablated = build_network(
            apply_ablation(tiny_spec("MRRN"), StreamAblation.KEEP_ONLY_FULLRES_STREAM)
        )
        assert count_parameters(ablated) < count_parameters(full)

    def test_drop_fullres_on_unet_rejected(self):
        with pytest.raises(ValueError, match="ablation"):
            apply_ablation(NetworkSpec(architecture="UNET"), "DROP_FULLRES_STREAM")

    @pytest.mark.parametrize(
        "ablation", ["DROP_FULLRES_STREAM", "KEEP_ONLY_FULLRES_STREAM"]
    )
    def test_ablated_shape_contract_and_gradients(self, ablation):
        torch.manual_seed(4)
        spec = apply_ablation(tiny_spec("MRRN_DS"), ablation)
        net = build_network(spec)
        x = torch.randn(2, 5, 32, 32)
        target = (torch.rand(2, 1, 32, 32) > 0.8).float()
        out = net(x)
        assert out.main.shape == (2, 1, 32, 32)
        loss = soft_dice_loss(out.main, target)
        loss.backward()
        grad_norm = sum(
            float(p.grad.abs().sum()) for p in net.parameters() if p.grad is not None
        )
        assert grad_norm > 0


class TestGradientFlow:
    @pytest.mark.parametrize("arch", ["UNET", "UNETPP", "RESUNET", "MRRN", "MRRN_DS"])
    def test_every_block_receives_gradient(self, arch):
        torch.manual_seed(5)
        net = build_network(tiny_spec(arch))
        x = torch.randn(2, 5, 32, 32)
        target = (torch.rand(2, 1, 32, 32) > 0.8).float()
        out = net(x)
        if arch == "MRRN_DS":
            loss = 0.75 * soft_dice_loss(out.main, target) + 0.25 * soft_dice_loss(
                out.aux, target
            )
        elif arch == "UNETPP":
            loss = torch.stack([soft_dice_loss(h, target) for h in out.aux]).mean()
        else:
            loss = soft_dice_loss(out.main, target)
        loss.backward()
        # No detached heads: every top-level child owns at least one
        # parameter with a nonzero gradient.
        for name, child in net.net.named_children():
            params = [p for p in child.parameters() if p.requires_grad]
            if not params:
                continue
            norms = [float(p.grad.abs().sum()) for p in params if p.grad is not None]
            assert norms and max(norms) > 0, f"{arch}.{name} got no gradient"

    def test_supervision_levels_all_trainable(self):
        for level in (1, 2, 3, 4):
            torch.manual_seed(level)
            net = build_network(tiny_spec("MRRN_DS", supervision_level=level))
            x = torch.randn(1, 5, 32, 32)
            target = (torch.rand(1, 1, 32, 32) > 0.8).float()
            out = net(x)
            assert out.aux.shape == (1, 1, 32, 32)
            loss = soft_dice_loss(out.aux, target)
            loss.backward()
            aux_grad = float(net.net.aux_head.weight.grad.abs().sum())
            assert aux_grad > 0


class TestFPSNetDetails:
    def test_detection_boxes_format(self):
        torch.manual_seed(6)
        net = build_network(tiny_spec("FPSNET"))
        net.eval()
        with torch.no_grad():
            out = net(torch.randn(1, 3, 64, 64))
        assert out.seg_highres.shape[-2:] == (256, 256)
        for box, score in out.detections[0]:
            assert len(box) == 4 and 0.0 <= score <= 1.0

    def test_detection_loss_backward(self):
        torch.manual_seed(7)
        net = build_network(tiny_spec("FPSNET"))
        out = net(torch.randn(1, 3, 64, 64))
        cls_logits, box_deltas, _ = out.detection_raw
        gt = [torch.tensor([[40.0, 40.0, 120.0, 120.0]])]
        loss = net.net.detection_loss(cls_logits, box_deltas, gt)
        assert torch.isfinite(loss)
        loss.backward()

    def test_boxes_from_mask(self):
        from dilseg.networks.fpsnet import boxes_from_mask

        mask = np.zeros((32, 32))
        mask[4:9, 10:20] = 1
        boxes = boxes_from_mask(torch.from_numpy(mask))
        assert boxes.shape == (1, 4)
        assert boxes[0].tolist() == [4.0, 10.0, 9.0, 20.0]
        assert boxes_from_mask(torch.zeros(8, 8)).shape == (0, 4)

    def test_box_encode_decode_round_trip(self):
        from dilseg.networks.fpsnet import decode_boxes, encode_boxes, make_anchors

        anchors = make_anchors((256, 256))[::997]
        boxes = anchors + torch.tensor([3.0, -2.0, 10.0, 4.0])
        deltas = encode_boxes(anchors, boxes)
        back = decode_boxes(anchors, deltas)
        np.testing.assert_allclose(back.numpy(), boxes.numpy(), atol=1e-3)

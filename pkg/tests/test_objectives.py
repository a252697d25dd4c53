import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dynsubnet import ops
from dynsubnet.gating import GatingNetwork, make_gates
from dynsubnet.objectives import (LossConfig, binary_entropy, cxcywh_to_xyxy, generalized_iou,
                                  giou_loss, l1_loss, mutual_information, total_loss,
                                  xyxy_to_cxcywh)
from dynsubnet.supernet import SupernetConfig

D = torch.float64


def _h(p):
    return 0.0 if p in (0.0, 1.0) else -(p * math.log(p) + (1 - p) * math.log(1 - p))


def _cxcywh(*corners):
    return xyxy_to_cxcywh(torch.tensor(corners, dtype=D))


class TestL1:
    def test_identical(self):
        b = torch.rand(5, 4, dtype=D)
        assert l1_loss(b, b).item() == 0.0

    def test_example(self):
        pred = torch.tensor([[0.5, 0.5, 0.5, 0.5]], dtype=D)
        gt = torch.tensor([[0.25, 0.5, 0.5, 0.25]], dtype=D)
        assert l1_loss(pred, gt).item() == 0.5

    def test_gradient(self):
        pred = torch.rand(4, 4, dtype=D, requires_grad=True)
        gt = torch.rand(4, 4, dtype=D)
        grad = ops.backward(l1_loss(pred, gt), {"p": pred})["p"]
        num = ops.numerical_grad(lambda: l1_loss(pred, gt), pred)
        assert ops.relative_error(grad, num) <= 1e-4


class TestGIoU:
    def test_identical(self):
        b = torch.tensor([[0.3, 0.4, 0.2, 0.1]], dtype=D)
        assert giou_loss(b, b).item() == 0.0

    def test_touching_corners(self):
        loss = giou_loss(_cxcywh([0, 0, 1, 1]), _cxcywh([1, 1, 2, 2]))
        assert abs(loss.item() - 1.5) <= 1e-12

    def test_overlapping(self):
        loss = giou_loss(_cxcywh([0, 0, 2, 2]), _cxcywh([1, 1, 3, 3]))
        assert abs(loss.item() - (1 + 5 / 63)) <= 1e-12

    def test_degenerate_pair_flagged(self):
        point = torch.tensor([[0.5, 0.5, 0.0, 0.0]], dtype=D)
        loss, flags = giou_loss(point, point, return_flags=True)
        assert loss.item() == 1.0 and flags.tolist() == [True]

    def test_corner_conversion_round_trip(self):
        b = torch.rand(10, 4, dtype=D)
        assert torch.allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(b)), b, atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=8, max_size=8))
    def test_range_and_symmetry(self, v):
        a = torch.tensor([v[:4]], dtype=D)
        b = torch.tensor([v[4:]], dtype=D)
        la, lb = giou_loss(a, b).item(), giou_loss(b, a).item()
        assert 0 <= la <= 2
        assert abs(la - lb) <= 1e-12

    def test_gradient(self):
        pred = torch.tensor([[0.4, 0.5, 0.3, 0.2], [0.6, 0.3, 0.2, 0.4]], dtype=D, requires_grad=True)
        gt = torch.tensor([[0.5, 0.5, 0.2, 0.3], [0.2, 0.7, 0.1, 0.1]], dtype=D)
        grad = ops.backward(giou_loss(pred, gt), {"p": pred})["p"]
        num = ops.numerical_grad(lambda: giou_loss(pred, gt), pred)
        assert ops.relative_error(grad, num) <= 1e-4

    def test_enclosure_slack(self):
        g, _ = generalized_iou(torch.tensor([0.0, 0, 1, 1], dtype=D), torch.tensor([2.0, 0, 3, 1], dtype=D))
        assert abs(g.item() + 1 / 3) <= 1e-12


class TestMutualInformation:
    def test_constant_half(self):
        assert mutual_information(torch.full((6, 9), 0.5, dtype=D)).value.item() == 0.0

    def test_two_sample_example(self):
        est = mutual_information(torch.tensor([[0.9], [0.1]], dtype=D))
        assert est.marginal.item() == pytest.approx(0.5, abs=1e-15)
        assert est.marginal_entropy.item() == pytest.approx(0.693147, abs=1e-6)
        assert est.conditional_entropy.item() == pytest.approx(0.325083, abs=1e-6)
        assert est.value.item() == pytest.approx(0.368064, abs=1e-6)
        assert est.value.item() == pytest.approx(math.log(2) - _h(0.9), abs=1e-14)

    def test_saturated(self):
        est = mutual_information(torch.ones(4, 3, dtype=D))
        assert est.marginal_entropy.abs().max().item() == 0
        assert est.value.item() == 0

    def test_mean_over_gates(self):
        soft = torch.tensor([[0.9, 0.5], [0.1, 0.5]], dtype=D)
        est = mutual_information(soft)
        assert est.value.item() == pytest.approx((math.log(2) - _h(0.9)) / 2, abs=1e-14)

    def test_bounds_on_random_batches(self):
        rng = np.random.default_rng(0)
        soft = torch.from_numpy(rng.random((10_000, 8, 3)) ** rng.uniform(0.2, 5, (10_000, 1, 1)))
        m = soft.mean(1)
        per_gate = binary_entropy(m) - binary_entropy(soft).mean(1)
        assert per_gate.min().item() >= -1e-12
        assert per_gate.max().item() <= math.log(2) + 1e-12

    def test_zero_iff_identical_rows(self):
        row = torch.rand(1, 5, dtype=D)
        assert mutual_information(row.repeat(4, 1)).value.abs().item() <= 1e-15
        other = row.repeat(4, 1)
        other[2, 3] = (other[2, 3] + 0.3) % 1
        assert mutual_information(other).per_gate[3].item() > 0

    def test_disagreement_monotone(self):
        values = []
        for d in np.linspace(0, 0.5, 11):
            soft = torch.tensor([[0.5 + d], [0.5 - d]], dtype=D)
            values.append(mutual_information(soft).value.item())
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_rejects(self):
        with pytest.raises(ValueError, match="B >= 2"):
            mutual_information(torch.full((1, 3), 0.5))
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            mutual_information(torch.tensor([[0.5], [1.2]]))

    def test_entropy_endpoints(self):
        p = torch.tensor([0.0, 1.0, 0.5], dtype=D, requires_grad=True)
        h = binary_entropy(p)
        assert h[:2].tolist() == [0.0, 0.0]
        h.sum().backward()
        assert torch.isfinite(p.grad).all()

    def test_gradient_wrt_soft_gates(self):
        soft = (torch.rand(5, 7, dtype=D) * 0.9 + 0.05).requires_grad_()
        f = lambda: -0.1 * mutual_information(soft).value
        grad = ops.backward(f(), {"s": soft})["s"]
        assert ops.relative_error(grad, ops.numerical_grad(f, soft)) <= 1e-4

    def test_composed_gradient_through_gating(self):
        cfg = SupernetConfig(d_model=8, heads=2, gate_hidden=4, stage_widths=(4, 6),
                             stage_strides=(1, 2), interaction_layers=1)
        torch.manual_seed(3)
        net = GatingNetwork(cfg).double()
        feats = torch.randn(4, 5, 8, dtype=D)
        mask = torch.ones(4, 5, dtype=torch.bool)
        mask[1, 2:] = False

        def loss():
            _, scores = net(feats, mask)
            return -mutual_information(make_gates(scores, "eval").soft).value

        params = dict(net.named_parameters())
        analytic = ops.backward(loss(), params)
        for name, p in params.items():
            assert ops.relative_error(analytic[name], ops.numerical_grad(loss, p)) <= 1e-4, name


class TestTotal:
    def test_perfect_and_constant(self):
        b = torch.rand(3, 4, dtype=D) * 0.5 + 0.25
        terms = total_loss(b, b, torch.full((3, 4), 0.5, dtype=D))
        assert terms.total.item() == 0.0

    def test_linear_combination(self):
        pred = torch.cat([_cxcywh([0, 0, 1, 1]), _cxcywh([0, 0, 2, 2])])
        gt = torch.cat([_cxcywh([1, 1, 2, 2]), _cxcywh([1, 1, 3, 3])])
        soft = torch.tensor([[0.9], [0.1]], dtype=D)
        cfg = LossConfig(giou_weight=1.0, mi_weight=0.1)
        terms = total_loss(pred, gt, soft, cfg)
        l1 = (2.0 + 2.0) / 2      # both pairs differ by 1 in each centre coordinate
        giou = (1.5 + 1 + 5 / 63) / 2
        mi = math.log(2) - _h(0.9)
        assert abs(terms.total.item() - (l1 + giou - 0.1 * mi)) <= 1e-12

    def test_zero_mi_weight_is_detection_loss(self):
        pred, gt = torch.rand(4, 4, dtype=D), torch.rand(4, 4, dtype=D)
        terms = total_loss(pred, gt, torch.rand(4, 6, dtype=D), LossConfig(mi_weight=0.0))
        assert terms.total.item() == (l1_loss(pred, gt) + giou_loss(pred, gt)).item()

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(mi_weight=-1)

    def test_row_is_plain_floats(self):
        pred = torch.rand(2, 4, dtype=D, requires_grad=True)
        row = total_loss(pred, torch.rand(2, 4, dtype=D), torch.rand(2, 3, dtype=D)).row()
        assert set(row) == {"l1", "giou", "mi", "total"}
        assert all(isinstance(v, float) for v in row.values())

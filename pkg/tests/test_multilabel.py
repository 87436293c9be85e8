import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptdet.backbone import FeatureExtractor
from adaptdet.errors import ConfigurationError, ValidationError
from adaptdet.multilabel import PROB_EPS, MultiLabelHead, multihot_from_boxes, multilabel_loss

from gradutils import check_parameter_gradients


class TestMultihot:
    def test_duplicates_collapse(self):
        np.testing.assert_array_equal(multihot_from_boxes([2, 0, 2], 3), [1, 0, 1])

    def test_empty(self):
        np.testing.assert_array_equal(multihot_from_boxes([], 3), [0, 0, 0])

    def test_all_present(self):
        np.testing.assert_array_equal(multihot_from_boxes([0, 1, 2], 3), [1, 1, 1])

    def test_out_of_range(self):
        with pytest.raises(ValidationError, match="out of range"):
            multihot_from_boxes([3], 3)
        with pytest.raises(ValidationError, match="out of range"):
            multihot_from_boxes([-1], 3)

    @given(st.lists(st.integers(0, 4), max_size=12), st.permutations(range(5)))
    @settings(max_examples=40, deadline=None)
    def test_order_invariant_and_idempotent(self, ids, perm):
        K = 5
        base = multihot_from_boxes(ids, K)
        shuffled = multihot_from_boxes([ids[i] for i in np.argsort(perm[: len(ids)])] if ids else [], K)
        doubled = multihot_from_boxes(ids + ids, K)
        np.testing.assert_array_equal(base, doubled)
        assert set(np.nonzero(base)[0]) == set(ids)
        assert base.shape == (K,)
        assert shuffled.shape == (K,)


class TestHead:
    def test_zero_init_gives_half(self):
        head = MultiLabelHead(in_channels=8, num_classes=4, conv_channels=8, seed=0)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        p = head(torch.zeros(2, 8, 4, 4))
        assert torch.allclose(p, torch.full((2, 4), 0.5))

    def test_output_shape_and_range(self):
        head = MultiLabelHead(in_channels=8, num_classes=5, conv_channels=8, seed=0)
        p = head(torch.randn(3, 8, 4, 4) * 50)
        assert p.shape == (3, 5)
        assert (p >= PROB_EPS).all() and (p <= 1 - PROB_EPS).all()

    def test_channel_mismatch(self):
        head = MultiLabelHead(in_channels=8, num_classes=2, conv_channels=8, seed=0)
        with pytest.raises(ConfigurationError, match="channels"):
            head(torch.zeros(1, 4, 4, 4))

    def test_predict_presence_single(self):
        net = FeatureExtractor(channels=(8, 8), seed=0)
        head = MultiLabelHead(in_channels=8, num_classes=3, conv_channels=8, seed=0)
        img = np.random.default_rng(0).uniform(0, 1, (64, 64, 3)).astype(np.float32)
        p = head.predict_presence(net.extract_features(img))
        assert p.shape == (3,)


class TestLoss:
    def test_half_probs_value(self):
        p = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        y = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        expected = 1.3862943611198906  # 2 ln 2, by hand from the summed binary CE
        assert abs(float(multilabel_loss(p, y)) - expected) < 1e-9

    def test_confident_correct_value(self):
        p = torch.tensor([[0.9, 0.1]], dtype=torch.float64)
        y = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        expected = 0.21072103131565256  # -2 ln 0.9
        assert abs(float(multilabel_loss(p, y)) - expected) < 1e-9

    def test_perfect_prediction_near_zero(self):
        K = 4
        y = torch.tensor([[1.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
        p = y.clamp(PROB_EPS, 1 - PROB_EPS)
        loss = float(multilabel_loss(p, y))
        assert 0 <= loss <= K * (-math.log(1 - PROB_EPS)) + 1e-12

    def test_batch_mean_normalization(self):
        p = torch.tensor([[0.5, 0.5]])
        y = torch.tensor([[1.0, 0.0]])
        single = float(multilabel_loss(p, y))
        doubled = float(multilabel_loss(p.repeat(2, 1), y.repeat(2, 1)))
        assert abs(single - doubled) < 1e-12

    def test_nonnegative_and_minimum_at_labels(self):
        rng = torch.Generator().manual_seed(0)
        for _ in range(20):
            p = torch.rand(3, 4, generator=rng).clamp(PROB_EPS, 1 - PROB_EPS)
            y = (torch.rand(3, 4, generator=rng) > 0.5).float()
            assert float(multilabel_loss(p, y)) >= 0
        y = (torch.rand(2, 5, generator=rng) > 0.5).float()
        at_labels = float(multilabel_loss(y.clamp(PROB_EPS, 1 - PROB_EPS), y))
        off = float(multilabel_loss(torch.full((2, 5), 0.4), y))
        assert at_labels < off

    def test_gradient_sign_matches_p_minus_y(self):
        p = torch.tensor([[0.3, 0.8, 0.5001]], dtype=torch.float64, requires_grad=True)
        y = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        multilabel_loss(p, y).backward()
        signs = torch.sign(p.grad)
        np.testing.assert_array_equal(signs.numpy(), np.sign(p.detach().numpy() - y.numpy()))

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError, match="mismatch"):
            multilabel_loss(torch.rand(2, 3), torch.rand(2, 4))

    def test_head_gradients_match_central_differences(self):
        torch.manual_seed(0)
        net = FeatureExtractor(channels=(4, 6), seed=1).double()
        head = MultiLabelHead(in_channels=6, num_classes=3, conv_channels=6, seed=2).double()
        image = torch.rand(2, 3, 48, 48, dtype=torch.float64)
        y = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]], dtype=torch.float64)

        def probe():
            return multilabel_loss(head(net(image)), y)

        named = list(head.named_parameters()) + list(net.named_parameters())
        failures = check_parameter_gradients(probe, named, per_tensor=4)
        assert not failures, "\n".join(failures)

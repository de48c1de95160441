import numpy as np
import pytest
import torch

from fastinst.decoder import (DecoderLayer, LayerPrediction, PredictionHead, build_attention_mask,
                              guided_attention_mask)
from fastinst.matching import MatchingAssignment
from fastinst.model import FastInst, ModelConfig
from fastinst.tensor_ops import finite_diff_gradcheck


def _model(layers=1, seed=0, **kw):
    torch.manual_seed(seed)
    return FastInst(ModelConfig(layers=layers, **kw)).double()


def _image(seed=0, size=64):
    return torch.rand(1, 3, size, size, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestPredictionHead:
    def test_zero_mask_mlp_gives_half(self):
        head = PredictionHead(8, 3)
        with torch.no_grad():
            last = head.mask_mlp.layers[-1]
            last.weight.zero_()
            last.bias.zero_()
        pred = head(0, torch.randn(1, 5, 8), torch.randn(1, 12, 8), na=3)
        assert torch.count_nonzero(pred.mask_logits) == 0
        assert pred.class_logits.shape == (1, 3, 4) and pred.mask_logits.shape == (1, 3, 12)

    def test_dot_product_definition(self):
        torch.manual_seed(1)
        head = PredictionHead(8, 2)
        q, x = torch.randn(1, 4, 8), torch.randn(1, 10, 8)
        pred = head(0, q, x, na=4)
        emb = head.mask_mlp(head.query_norm(q))
        feats = head.mask_proj(head.pixel_norm(x))
        torch.testing.assert_close(pred.mask_logits[0, 2, 7], (emb[0, 2] * feats[0, 7]).sum())

    def test_gradcheck_bce_both_mlps(self):
        torch.manual_seed(2)
        head = PredictionHead(4, 2).double()
        q, x = torch.randn(1, 3, 4, dtype=torch.float64), torch.randn(1, 6, 4, dtype=torch.float64)
        target = (torch.rand(1, 3, 6) > 0.5).double()
        params = list(head.mask_mlp.parameters()) + list(head.class_mlp.parameters())

        def f():
            p = head(0, q, x, na=3)
            return torch.nn.functional.binary_cross_entropy_with_logits(p.mask_logits, target) + p.class_logits.pow(2).mean()

        assert finite_diff_gradcheck(f, params).passed


class TestAttentionMask:
    def _pred(self, logits):
        m = torch.as_tensor(logits, dtype=torch.float64)[None]
        return LayerPrediction(torch.zeros(1, m.shape[1], 3), m, 0)

    def test_all_negative_falls_back(self):
        allow = build_attention_mask(self._pred(np.full((2, 5), -10.0)), nb=1)
        assert allow.all()

    def test_all_positive(self):
        assert build_attention_mask(self._pred(np.full((2, 5), 10.0)), nb=0).all()

    def test_mixed_matches_threshold(self, rng):
        logits = rng.normal(size=(4, 9))
        logits[1] = -1
        allow = build_attention_mask(self._pred(logits), nb=2)[0].numpy()
        want = logits > 0
        want[1] = True
        np.testing.assert_array_equal(allow[:4], want)
        assert allow[4:].all() and allow.shape == (6, 9)


class TestDecoderLayer:
    def test_shapes_and_masked_weights(self, rng):
        torch.manual_seed(3)
        layer = DecoderLayer(16, 4, 32)
        x, q = torch.randn(2, 20, 16), torch.randn(2, 7, 16)
        allow = torch.from_numpy(rng.random((2, 7, 20)) < 0.3)
        allow[..., 0] = True
        x2, q2 = layer(x, q, torch.randn(2, 20, 16), torch.randn(2, 7, 16), allow, record=True)
        assert x2.shape == x.shape and q2.shape == q.shape
        w = layer.last_query_weights  # (B, heads, N, L)
        blocked = ~allow[:, None].expand_as(w)
        assert w[blocked].max() <= 1e-6
        torch.testing.assert_close(w.sum(-1), torch.ones(w.shape[:-1]), atol=1e-6, rtol=0)

    def test_zero_weights_leave_residual_stream(self):
        layer = DecoderLayer(8, 2, 16)
        with torch.no_grad():
            for name, p in layer.named_parameters():
                if not name.startswith("norms."):
                    p.zero_()
        x, q = torch.randn(1, 6, 8), torch.randn(1, 3, 8)
        x2, q2 = layer(x, q, torch.randn(1, 6, 8), torch.randn(1, 3, 8), torch.ones(1, 3, 6, dtype=torch.bool))
        assert torch.equal(x2, x) and torch.equal(q2, q)

    def test_unknown_order(self):
        with pytest.raises(ValueError):
            DecoderLayer(8, 2, 16, order="sideways")


class TestDecoder:
    @pytest.mark.parametrize("depth", [0, 1, 3])
    def test_prediction_count(self, depth):
        m = _model(depth)
        out = m(_image())
        assert len(out.predictions) == depth + 1
        for l, p in enumerate(out.predictions):
            assert p.layer_index == l
            assert p.class_logits.shape == (1, 16, 4) and p.mask_logits.shape == (1, 16, 64)

    def test_heads_are_disjoint(self):
        m = _model(3)
        img = _image()
        before = m(img).predictions
        with torch.no_grad():
            for p in m.decoder.heads[2].parameters():
                p.add_(0.5)
        after = m(img).predictions
        for l in (0, 1):
            assert torch.equal(before[l].class_logits, after[l].class_logits)
            assert torch.equal(before[l].mask_logits, after[l].mask_logits)
        assert not torch.equal(before[2].class_logits, after[2].class_logits)

    def test_aux_query_permutation_invariance(self):
        m = _model(2)
        with torch.no_grad():
            m.aux_queries[1] = m.aux_queries[0]
            m.pos.aux_pos[1] = m.pos.aux_pos[0]
        img = _image(4)
        ref = m(img).predictions[-1]
        with torch.no_grad():
            perm = torch.tensor([1, 0] + list(range(2, m.cfg.nb)))
            m.aux_queries.copy_(m.aux_queries[perm])
            m.pos.aux_pos.copy_(m.pos.aux_pos[perm])
        got = m(img).predictions[-1]
        torch.testing.assert_close(got.mask_logits, ref.mask_logits, atol=1e-10, rtol=0)

    def test_deterministic(self):
        m = _model(1)
        img = _image(5)
        a, b = m(img).predictions[-1], m(img).predictions[-1]
        assert torch.equal(a.class_logits, b.class_logits)


class TestGuided:
    def test_allowed_set_is_gt_foreground(self):
        gt = torch.zeros(2, 12, dtype=torch.bool)
        gt[0, 3:6] = True
        allow = guided_attention_mask([MatchingAssignment([(1, 0), (2, 1)])], [gt], na=3, nb=1, length=12)
        np.testing.assert_array_equal(allow[0, 1].numpy(), gt[0].numpy())
        assert allow[0, 2].all()  # empty GT -> fallback
        assert allow[0, 0].all() and allow[0, 3].all()

    def test_rejects_auxiliary_index(self):
        with pytest.raises(ValueError):
            guided_attention_mask([MatchingAssignment([(3, 0)])], [torch.ones(1, 4, dtype=torch.bool)], 3, 1, 4)

    @pytest.mark.parametrize("layer", [1, 2])
    def test_previous_masks_reproduce_normal_output(self, layer):
        m = _model(2, seed=6)
        out = m(_image(6))
        dec = out.decoder
        prev = out.predictions[layer - 1]
        x, q = dec.states[layer - 1]
        sigma = MatchingAssignment([(i, i) for i in range(m.cfg.na)])
        guided = m.decoder.gt_guided_forward(layer, x, q, dec.pixel_pos, dec.query_pos, [sigma],
                                             [prev.mask_logits[0] > 0], m.cfg.na)
        want = out.predictions[layer]
        assert torch.equal(guided.mask_logits, want.mask_logits)
        assert torch.equal(guided.class_logits, want.class_logits)

    def test_guided_forward_is_pure(self):
        m = _model(1, seed=7)
        out = m(_image(7))
        state = {k: v.clone() for k, v in m.state_dict().items()}
        dec = out.decoder
        x, q = dec.states[1]
        m.decoder.gt_guided_forward(1, x, q, dec.pixel_pos, dec.query_pos, [MatchingAssignment([(0, 0)])],
                                    [torch.ones(1, 64, dtype=torch.bool)], m.cfg.na)
        assert all(torch.equal(v, state[k]) for k, v in m.state_dict().items())

    def test_layer_out_of_range(self):
        m = _model(1)
        out = m(_image())
        dec = out.decoder
        with pytest.raises(ValueError):
            m.decoder.gt_guided_forward(2, *dec.states[1], dec.pixel_pos, dec.query_pos, [MatchingAssignment()],
                                        [torch.zeros(0, 64, dtype=torch.bool)], m.cfg.na)

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fastinst import oracles
from fastinst.model import FastInst, ModelConfig
from fastinst.queries import AuxClassHead, PositionalEmbedding, local_maximum_mask, select_ia_queries
from fastinst.tensor_ops import finite_diff_gradcheck


def _probs(rng, h, w, k, ties=False):
    logits = rng.normal(size=(h * w, k + 1))
    if ties:
        logits = np.round(logits)
    e = np.exp(logits)
    return e / e.sum(1, keepdims=True)


class TestAuxHead:
    def test_zero_weights_uniform(self):
        head = AuxClassHead(8, 3)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        act = head(torch.rand(2, 8, 4, 5))
        assert act.hw == (4, 5)
        torch.testing.assert_close(act.probs, torch.full((2, 20, 4), 0.25))

    def test_rows_sum_to_one(self):
        act = AuxClassHead(8, 3)(torch.randn(1, 8, 6, 6))
        torch.testing.assert_close(act.probs.sum(-1), torch.ones(1, 36), atol=1e-6, rtol=0)

    def test_gradcheck_neg_log_prob(self):
        torch.manual_seed(0)
        head = AuxClassHead(4, 2).double()
        feat = torch.randn(1, 4, 3, 3, dtype=torch.float64)
        params = list(head.parameters())
        report = finite_diff_gradcheck(lambda: -head(feat).probs[0, :, 0].log().sum(), params)
        assert report.passed, report


class TestSelection:
    def test_one_peak_per_class(self):
        h = w = 5
        probs = np.full((25, 3), 0.1)
        probs[:, 2] = 0.8
        probs[7] = [0.9, 0.05, 0.05]
        probs[18] = [0.05, 0.85, 0.1]
        assert sorted(select_ia_queries(probs, h, w, 2)) == [7, 18]

    def test_adjacent_pair_only_higher_is_candidate(self):
        probs = np.full((9, 2), 0.5)
        probs[:, 0] = 0.1
        probs[:, 1] = 0.9
        probs[4] = [0.9, 0.1]
        probs[5] = [0.8, 0.2]
        cand = local_maximum_mask(probs, 3, 3)
        assert cand[4] and not cand[5]

    def test_matches_naive_oracle(self, rng):
        for t in range(200):
            h, w = rng.integers(1, 25, size=2)
            k = int(rng.integers(1, 5))
            probs = _probs(rng, h, w, k, ties=bool(t % 3 == 0))
            na = int(rng.integers(1, h * w + 5))
            assert list(select_ia_queries(probs, int(h), int(w), na)) == oracles.naive_select(probs, int(h), int(w), na)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(0, 10 ** 6))
    def test_distinct_deterministic_and_full_grid(self, h, w, k, seed):
        probs = _probs(np.random.default_rng(seed), h, w, k)
        sel = select_ia_queries(probs, h, w, h * w)
        assert sorted(sel) == list(range(h * w))
        np.testing.assert_array_equal(sel, select_ia_queries(probs, h, w, h * w))
        cand = local_maximum_mask(probs, h, w)
        n = int(cand.sum())
        assert cand[sel[:n]].all() and not cand[sel[n:]].any()

    def test_candidates_dominate_neighbours(self, rng):
        h, w, k = 9, 7, 3
        probs = _probs(rng, h, w, k)
        cls = probs[:, :-1].argmax(1)
        score = probs[np.arange(h * w), cls]
        for i in np.flatnonzero(local_maximum_mask(probs, h, w)):
            y, x = divmod(i, w)
            for ny in range(max(0, y - 1), min(h, y + 2)):
                for nx in range(max(0, x - 1), min(w, x + 2)):
                    assert score[i] >= probs[ny * w + nx, cls[i]]

    def test_top_k_without_local_max(self, rng):
        probs = _probs(rng, 4, 4, 2)
        score = probs[:, :-1].max(1)
        np.testing.assert_array_equal(select_ia_queries(probs, 4, 4, 5, local_max_first=False),
                                      np.argsort(-score, kind="stable")[:5])

    def test_nb_does_not_change_selection(self):
        img = torch.rand(1, 3, 96, 96)
        outs = []
        for nb in (0, 8):
            torch.manual_seed(0)
            m = FastInst(ModelConfig(nb=nb))
            outs.append(m(img).query_indices)
        torch.testing.assert_close(outs[0], outs[1])


class TestPositional:
    def test_default_profile_counts(self):
        from fastinst.config import FULL_SCALE_PROFILE
        assert FULL_SCALE_PROFILE["query.na"] == 100 and FULL_SCALE_PROFILE["query.nb"] == 8

    def test_table_at_native_size_is_raw_entry(self):
        pe = PositionalEmbedding(8, 16, 2)
        pix, qpos = pe((4, 4), (4, 4), torch.tensor([[5, 0]]))
        torch.testing.assert_close(qpos[0, 0], pe.table[1, 1], rtol=0, atol=0)
        torch.testing.assert_close(qpos[0, 2:], pe.aux_pos, rtol=0, atol=0)
        assert pix.shape == (16, 8)

    def test_constant_table_constant_rows(self):
        pe = PositionalEmbedding(4, 9, 1)
        with torch.no_grad():
            pe.table.fill_(0.3)
        pix, _ = pe((6, 5), (3, 3), torch.tensor([[0]]))
        torch.testing.assert_close(pix, torch.full((30, 4), 0.3))

    def test_gather_matches_bilinear_oracle(self):
        pe = PositionalEmbedding(3, 4, 0).double()  # 2x2 table
        _, qpos = pe((6, 6), (6, 6), torch.tensor([[14]]))  # cell (2, 2)
        table = pe.table.detach().permute(2, 0, 1).numpy()
        want = oracles.naive_bilinear(table, 6, 6)[:, 2, 2]
        np.testing.assert_allclose(qpos[0, 0].detach().numpy(), want, atol=1e-12)

    def test_sine_variant_shapes(self):
        pe = PositionalEmbedding(8, 4, 2, kind="sine")
        pix, qpos = pe((3, 4), (2, 2), torch.tensor([[0, 3]]))
        assert pix.shape == (12, 8) and qpos.shape == (1, 4, 8)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            PositionalEmbedding(8, 4, 2, kind="rope")

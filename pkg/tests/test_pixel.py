import numpy as np
import pytest
import torch

from fastinst.pixel import PPMFPN, Backbone, PyramidPooling
from fastinst.tensor_ops import finite_diff_gradcheck


def _zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_level_shapes_at_96():
    torch.manual_seed(0)
    bb = Backbone()
    fpn = PPMFPN(bb.out_channels, 24)
    feats = fpn(bb(torch.rand(2, 3, 96, 96)))
    assert [tuple(f.shape) for f in feats] == [(2, 24, 12, 12), (2, 24, 6, 6), (2, 24, 3, 3)]


def test_rejects_indivisible_input():
    with pytest.raises(ValueError):
        Backbone()(torch.rand(1, 3, 80, 96))


def test_zero_weights_give_zero_features():
    bb = Backbone()
    _zero_(bb)
    for f in bb(torch.rand(1, 3, 64, 64)):
        assert torch.count_nonzero(f) == 0


def test_stem_gradcheck():
    torch.manual_seed(1)
    bb = Backbone().double()
    img = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    stem_w = bb.stem[0][0].weight
    g = np.random.default_rng(0)
    coords = [sorted(g.choice(stem_w.numel(), 40, replace=False).tolist())]
    report = finite_diff_gradcheck(lambda: (bb(img)[2] ** 2).sum(), [stem_w], coords=coords)
    assert report.passed, report


def test_without_ppm_and_zero_top_down_e3_is_smoothed_lateral():
    torch.manual_seed(2)
    fpn = PPMFPN((16, 32, 64), 8, use_ppm=False)
    with torch.no_grad():
        for conv in fpn.lateral[1:]:
            conv.weight.zero_()
            conv.bias.zero_()
    c3, c4, c5 = torch.rand(1, 16, 8, 8), torch.rand(1, 32, 4, 4), torch.rand(1, 64, 2, 2)
    e3 = fpn([c3, c4, c5])[0]
    torch.testing.assert_close(e3, fpn.smooth[0](fpn.lateral[0](c3)), rtol=0, atol=0)


def test_output_strides_follow_input():
    fpn = PPMFPN((4, 4, 4), 8)
    feats = fpn([torch.rand(1, 4, 16, 12), torch.rand(1, 4, 8, 6), torch.rand(1, 4, 4, 3)])
    assert [f.shape[-2:] for f in feats] == [(16, 12), (8, 6), (4, 3)]


def test_constant_input_pooling():
    torch.manual_seed(3)
    ppm = PyramidPooling(8)
    x = torch.full((1, 8, 6, 6), 0.7)
    for pooled in ppm.pooled(x):
        torch.testing.assert_close(pooled, torch.full_like(pooled, 0.7))
    out = ppm(x)
    assert torch.allclose(out, out[..., :1, :1].expand_as(out), atol=1e-6)


def test_ppm_toggle_only_changes_top_path():
    torch.manual_seed(4)
    a, b = PPMFPN((16, 32, 64), 8, True), PPMFPN((16, 32, 64), 8, False)
    names_a = {n for n, _ in a.named_parameters()}
    names_b = {n for n, _ in b.named_parameters()}
    assert names_b < names_a and all(n.startswith("ppm.") for n in names_a - names_b)
    feats = [torch.rand(1, 16, 8, 8), torch.rand(1, 32, 4, 4), torch.rand(1, 64, 2, 2)]
    assert [f.shape for f in a(feats)[:2]] == [f.shape for f in b(feats)[:2]]


def test_shapes_pure_function_of_input():
    bb = Backbone()
    fpn = PPMFPN(bb.out_channels, 8)
    for size in ((64, 96), (128, 64)):
        shapes = [tuple(f.shape) for f in fpn(bb(torch.rand(1, 3, *size)))]
        h, w = size
        assert shapes == [(1, 8, h // 8, w // 8), (1, 8, h // 16, w // 16), (1, 8, h // 32, w // 32)]

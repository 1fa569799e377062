import pytest
import torch

from helpers import check_gradients
from polypvs.decoder import PartialDecoder, ReverseAttentionBranch, SegmentationDecoder


def _pyramid(g, b=1, c=32, h=8):
    return [
        torch.randn(b, c, h, h, generator=g),
        torch.randn(b, c, h // 2, h // 2, generator=g),
        torch.randn(b, c, h // 4, h // 4, generator=g),
    ]


def test_partial_decoder_output_at_finest_scale():
    g = torch.Generator().manual_seed(0)
    f8, f16, f32 = _pyramid(g, b=2)
    dec = PartialDecoder(32)
    out = dec(f8, f16, f32)
    assert out.shape == (2, 1, 8, 8)


def test_reverse_attention_identity_at_init():
    g = torch.Generator().manual_seed(1)
    branch = ReverseAttentionBranch(32)
    feature = torch.randn(1, 32, 4, 4, generator=g)
    coarse = torch.randn(1, 1, 8, 8, generator=g)
    out = branch(feature, coarse)
    # zero-init head -> the branch returns the (resized) coarse map untouched
    from polypvs.layers import resize_to

    assert torch.equal(out, resize_to(coarse, (4, 4)))


def test_reverse_attention_gate():
    torch.manual_seed(2)
    branch = ReverseAttentionBranch(8, depth=1)
    with torch.no_grad():
        branch.head.weight.normal_()
        branch.head.bias.normal_()
    feature = torch.randn(1, 8, 4, 4)
    # a very confident coarse map suppresses the feature almost completely:
    # the residual collapses to the response at zero input
    hot = torch.full((1, 1, 4, 4), 50.0)
    out_hot = branch(feature, hot)
    zero_resp = branch.head(branch.body(torch.zeros_like(feature)))
    assert (out_hot - (zero_resp + hot)).abs().max().item() <= 1e-4
    # an uncertain map (logit 0) passes half the feature through
    mid = torch.zeros(1, 1, 4, 4)
    out_mid = branch(feature, mid)
    want = branch.head(branch.body(0.5 * feature)) + mid
    assert torch.allclose(out_mid, want, atol=1e-6)


def test_decoder_side_outputs_and_sizes():
    g = torch.Generator().manual_seed(3)
    dec = SegmentationDecoder(32)
    sides = dec(_pyramid(g, b=2), (64, 64))
    assert len(sides) == 4
    for s in sides:
        assert s.shape == (2, 1, 64, 64)


def test_decoder_cascade_is_coarse_to_fine():
    from polypvs.layers import resize_to

    g = torch.Generator().manual_seed(4)
    dec = SegmentationDecoder(32)
    feats = _pyramid(g)
    sides = dec(feats, (32, 32))
    # at init every refinement is an identity, so the cascade just carries the
    # global map down and up the scale chain
    with torch.no_grad():
        coarse = dec.aggregate(*feats)
        r32 = resize_to(coarse, (2, 2))
        r16 = resize_to(r32, (4, 4))
        r8 = resize_to(r16, (8, 8))
    for got, want in zip(sides, (coarse, r32, r16, r8)):
        assert torch.equal(got, resize_to(want, (32, 32)))
    # after perturbing a refinement head the downstream outputs change but the
    # upstream ones do not
    with torch.no_grad():
        dec.refine16.head.weight.normal_()
    sides2 = dec(feats, (32, 32))
    assert torch.equal(sides2[0], sides[0])
    assert torch.equal(sides2[1], sides[1])
    assert not torch.equal(sides2[2], sides[2])
    assert not torch.equal(sides2[3], sides[3])


def test_decoder_gradients_match_finite_differences():
    torch.manual_seed(3)
    dec = SegmentationDecoder(32).double()
    g = torch.Generator().manual_seed(3)
    f8 = torch.randn(1, 32, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
    f16 = torch.randn(1, 32, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
    f32 = torch.randn(1, 32, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    probe = torch.randn(4, 1, 1, 16, 16, dtype=torch.float64)

    def scalar():
        sides = dec([f8, f16, f32], (16, 16))
        return sum((s * p).sum() for s, p in zip(sides, probe))

    worst = check_gradients(scalar, {"f8": f8, "f16": f16, "f32": f32}, tol=1e-3)
    assert worst <= 1e-3


def test_decoder_wrong_feature_count():
    dec = SegmentationDecoder(32)
    g = torch.Generator().manual_seed(5)
    with pytest.raises(ValueError):
        dec(_pyramid(g)[:2], (32, 32))

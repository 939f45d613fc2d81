import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from htrner.checks import check_a2dpe_identity, direct_sinusoid
from htrner.posenc import A2DPE, a2dpe, flatten, pe_1d, sinusoid_table, unflatten

from conftest import assert_gradient_matches


def test_table_first_rows():
    t = sinusoid_table(4, 8)
    assert torch.equal(t[0, 0::2], torch.zeros(4)) and torch.equal(t[0, 1::2], torch.ones(4))
    assert abs(float(t[1, 0]) - 0.841471) < 1e-6
    assert float(t[1, 0]) == math.sin(1.0)


def test_table_matches_direct_evaluation():
    err = (sinusoid_table(64, 256) - torch.from_numpy(direct_sinusoid(64, 256))).abs().max()
    assert float(err) <= 1e-12


def test_odd_dimension_rejected():
    with pytest.raises(ValueError):
        sinusoid_table(4, 7)
    with pytest.raises(ValueError):
        pe_1d(torch.zeros(3, 5))


def test_phase_strictly_increasing_in_position():
    dim = 16
    for i in range(dim // 2):
        phases = [p / 10000 ** (2 * i / dim) for p in range(64)]
        assert all(a < b for a, b in zip(phases, phases[1:]))
    # first column is sin(p); strictly increasing on [0, pi/2]
    col = sinusoid_table(2, dim)[:, 0]
    assert col[0] < col[1]


def test_zero_output_weights_give_half_scales():
    ok, detail = check_a2dpe_identity()
    assert ok, detail


def test_zero_scales_return_input():
    g = torch.Generator().manual_seed(0)
    feat = torch.randn(2, 3, 4, 6, generator=g, dtype=torch.float64)
    w = [torch.randn(6, 6, dtype=torch.float64), torch.randn(6, 1, dtype=torch.float64)] * 2
    out = a2dpe(feat, *w, scales=(torch.zeros(2), torch.zeros(2)))
    assert torch.equal(out, feat)


def test_scales_are_per_sample_scalars():
    g = torch.Generator().manual_seed(3)
    feat = torch.randn(2, 3, 4, 6, generator=g, dtype=torch.float64)
    w = [torch.randn(6, 6, generator=g, dtype=torch.float64), torch.randn(6, 1, generator=g, dtype=torch.float64)] * 2
    pos = a2dpe(feat, *w) - feat
    p_h, p_w = sinusoid_table(3, 6), sinusoid_table(4, 6)
    for b in range(2):
        gbar = feat[b].mean(dim=(0, 1))
        alpha = torch.sigmoid(torch.relu(gbar @ w[0]) @ w[1])
        beta = torch.sigmoid(torch.relu(gbar @ w[2]) @ w[3])
        expect = alpha * p_h[:, None, :] + beta * p_w[None, :, :]
        assert torch.allclose(pos[b], expect, atol=1e-14)


def test_weight_shape_mismatch():
    with pytest.raises(ValueError):
        a2dpe(torch.zeros(1, 2, 2, 4), torch.zeros(4, 4), torch.zeros(3, 1), torch.zeros(4, 4), torch.zeros(4, 1))


def test_a2dpe_gradient_wrt_height_perceptron():
    torch.manual_seed(0)
    mod = A2DPE(8).double()
    feat = torch.randn(2, 3, 5, 8, dtype=torch.float64)

    def loss():
        return mod(feat).sum()

    assert_gradient_matches(loss, mod.w1_h, range(0, 64, 5))
    assert_gradient_matches(loss, mod.w2_w, range(8))


@settings(max_examples=50, deadline=None)
@given(b=st.integers(1, 3), h=st.integers(1, 6), w=st.integers(1, 6), half=st.integers(1, 8))
def test_shapes_preserved(b, h, w, half):
    d = 2 * half
    feat = torch.randn(b, h, w, d, dtype=torch.float64)
    mod = A2DPE(d).double()
    assert mod(feat).shape == feat.shape
    seq = flatten(feat)
    assert pe_1d(seq).shape == seq.shape == (b, h * w, d)
    assert torch.equal(unflatten(seq, h, w), feat)


def test_pe_1d_examples():
    zero = torch.zeros(10, 12, dtype=torch.float64)
    table = sinusoid_table(10, 12)
    assert torch.equal(pe_1d(zero), table)
    x = torch.randn(10, 12, dtype=torch.float64)
    assert torch.allclose(pe_1d(pe_1d(x)), x + 2 * table, atol=1e-15)
    assert not torch.equal(pe_1d(pe_1d(x)), pe_1d(x))
    err = (pe_1d(zero) - torch.from_numpy(direct_sinusoid(10, 12))).abs().max()
    assert float(err) <= 1e-12


def test_flatten_is_row_major():
    fmap = torch.arange(2 * 3 * 4, dtype=torch.float64).reshape(2, 3, 4)
    seq = flatten(fmap)
    assert seq.shape == (6, 4)
    assert torch.equal(seq[4], fmap[1][1])
    assert flatten(torch.zeros(1, 8, 32, 16)).shape[1] == 256
    with pytest.raises(ValueError):
        unflatten(seq, 4, 2)

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdcn import ops


def rand(gen, *shape):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


class TestConv2d:
    def test_same_padding_shape(self, gen):
        assert ops.conv2d(rand(gen, 1, 3, 8, 8), rand(gen, 16, 3, 3, 3), padding=1).shape == (1, 16, 8, 8)

    def test_stride_two_shape(self, gen):
        assert ops.conv2d(rand(gen, 1, 3, 8, 8), rand(gen, 16, 3, 3, 3), stride=2, padding=1).shape == (1, 16, 4, 4)

    def test_unit_kernel_is_identity(self, gen):
        x = rand(gen, 1, 1, 5, 5)
        out = ops.conv2d(x, torch.ones(1, 1, 1, 1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
        assert torch.equal(out, x)

    def test_channel_mismatch(self, gen):
        with pytest.raises(ValueError, match="channel"):
            ops.conv2d(rand(gen, 1, 2, 8, 8), rand(gen, 4, 3, 3, 3))

    def test_empty_output(self, gen):
        with pytest.raises(ValueError):
            ops.conv2d(rand(gen, 1, 1, 2, 2), rand(gen, 1, 1, 5, 5))

    def test_matches_loop_oracle(self, gen):
        x, w, b = rand(gen, 1, 2, 5, 4), rand(gen, 3, 2, 3, 3), rand(gen, 3)
        out = ops.conv2d(x, w, b, padding=1)
        xp = torch.nn.functional.pad(x, (1, 1, 1, 1))
        ref = torch.zeros_like(out)
        for o in range(3):
            for i in range(5):
                for j in range(4):
                    ref[0, o, i, j] = b[o] + (xp[0, :, i:i + 3, j:j + 3] * w[o]).sum()
        assert torch.allclose(out, ref, atol=1e-12)


class TestTransposedConv2d:
    def test_doubles_extent(self, gen):
        assert ops.transposed_conv2d(rand(gen, 1, 16, 4, 4), rand(gen, 16, 8, 4, 4)).shape == (1, 8, 8, 8)

    def test_adjoint_of_strided_conv(self, gen):
        # <T(x), y> == <x, C(y)> where C is the stride-2 conv with the same kernel (roles of in/out swapped)
        x, y, w = rand(gen, 1, 3, 4, 5), rand(gen, 1, 2, 8, 10), rand(gen, 3, 2, 4, 4)
        lhs = (ops.transposed_conv2d(x, w) * y).sum()
        rhs = (x * ops.conv2d(y, w, stride=2, padding=1)).sum()
        assert math.isclose(lhs.item(), rhs.item(), rel_tol=1e-10)

    def test_zero_weight_gives_bias(self, gen):
        out = ops.transposed_conv2d(torch.full((1, 2, 3, 3), 0.7, dtype=torch.float64),
                                    torch.zeros(2, 1, 4, 4, dtype=torch.float64),
                                    torch.tensor([0.25], dtype=torch.float64))
        assert torch.all(out == 0.25)

    def test_restores_strided_extent(self, gen):
        x = rand(gen, 1, 2, 12, 8)
        down = ops.conv2d(x, rand(gen, 4, 2, 3, 3), stride=2, padding=1)
        assert ops.transposed_conv2d(down, rand(gen, 4, 2, 4, 4)).shape[-2:] == x.shape[-2:]


class TestPrelu:
    def test_definition(self):
        x = torch.tensor([-2.0, 0.0, 3.0]).view(1, 1, 1, 3)
        assert ops.prelu(x, torch.tensor(0.25)).flatten().tolist() == [-0.5, 0.0, 3.0]

    def test_unit_slope_identity(self, gen):
        x = rand(gen, 1, 2, 3, 3)
        assert torch.equal(ops.prelu(x, torch.tensor(1.0, dtype=torch.float64)), x)

    def test_zero_slope_is_relu(self):
        x = torch.tensor([-1.0, 2.0]).view(1, 1, 1, 2)
        assert ops.prelu(x, torch.tensor(0.0)).flatten().tolist() == [0.0, 2.0]

    def test_per_channel_slope(self):
        x = -torch.ones(1, 2, 1, 1)
        assert ops.prelu(x, torch.tensor([0.1, 0.5])).flatten().tolist() == pytest.approx([-0.1, -0.5])


class TestChannelSoftmax:
    def test_equal_logits(self):
        out = ops.channel_softmax(torch.zeros(1, 3, 2, 2))
        assert torch.allclose(out, torch.full_like(out, 1 / 3))

    def test_closed_form(self):
        x = torch.log(torch.tensor([1.0, 2.0, 7.0], dtype=torch.float64)).view(1, 3, 1, 1)
        assert ops.channel_softmax(x).flatten().tolist() == pytest.approx([0.1, 0.2, 0.7], abs=1e-12)

    def test_saturation(self):
        x = torch.tensor([1000.0, 0.0, 0.0], dtype=torch.float64).view(1, 3, 1, 1)
        assert torch.allclose(ops.channel_softmax(x).flatten(), torch.tensor([1.0, 0, 0], dtype=torch.float64),
                              atol=1e-6)

    def test_group_leaves_other_channels(self, gen):
        x = rand(gen, 1, 5, 2, 2)
        out = ops.channel_softmax(x, (2, 5))
        assert torch.equal(out[:, :2], x[:, :2])
        assert torch.allclose(out[:, 2:].sum(1), torch.ones(1, 2, 2, dtype=torch.float64), atol=1e-12)

    def test_empty_group(self, gen):
        with pytest.raises(ValueError):
            ops.channel_softmax(rand(gen, 1, 3, 2, 2), (1, 1))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
    def test_sums_to_one_for_extreme_logits(self, a, b, c):
        x = torch.tensor([a, b, c], dtype=torch.float64).view(1, 3, 1, 1)
        out = ops.channel_softmax(x)
        assert abs(out.sum().item() - 1.0) < 1e-6
        assert bool((out >= 0).all())


class TestSplitChannels:
    def test_blur_head_split(self, gen):
        a, b = ops.split_channels(rand(gen, 1, 9, 4, 4), [6, 3])
        assert a.shape == (1, 6, 4, 4) and b.shape == (1, 3, 4, 4)

    def test_single_part(self, gen):
        x = rand(gen, 1, 4, 2, 2)
        (only,) = ops.split_channels(x, [4])
        assert torch.equal(only, x)

    def test_round_trip(self, gen):
        x = rand(gen, 2, 7, 3, 3)
        assert torch.equal(torch.cat(ops.split_channels(x, [2, 4, 1]), dim=1), x)

    def test_size_mismatch(self, gen):
        with pytest.raises(ValueError):
            ops.split_channels(rand(gen, 1, 4, 2, 2), [2, 3])


class TestBilinearResize:
    def test_same_size_identity(self, gen):
        x = rand(gen, 1, 2, 5, 7)
        assert torch.equal(ops.bilinear_resize(x, 5, 7), x)

    @pytest.mark.parametrize("size", [(1, 1), (3, 9), (16, 4), (33, 17)])
    def test_constant_preserved(self, size):
        out = ops.bilinear_resize(torch.full((1, 3, 8, 8), 0.37, dtype=torch.float64), *size)
        assert torch.allclose(out, torch.full_like(out, 0.37), atol=1e-12)

    def test_ramp_stays_linear(self):
        x = torch.arange(8, dtype=torch.float64).view(1, 1, 1, 8).expand(1, 1, 4, 8)
        out = ops.bilinear_resize(x, 8, 16)[0, 0, 0]
        # pixel centres map to (j + 0.5) / 2 - 0.5; interior samples lie on the source ramp
        expected = (torch.arange(16, dtype=torch.float64) + 0.5) / 2 - 0.5
        assert torch.allclose(out[1:-1], expected[1:-1], atol=1e-12)


class TestFft2:
    def test_zero(self):
        re, im = ops.fft2(torch.zeros(1, 1, 4, 4))
        assert not re.any() and not im.any()

    def test_constant_dc(self):
        re, im = ops.fft2(torch.full((1, 1, 4, 6), 0.5, dtype=torch.float64))
        assert re[0, 0, 0, 0].item() == pytest.approx(0.5 * 24)
        re[0, 0, 0, 0] = 0
        assert torch.allclose(re, torch.zeros_like(re), atol=1e-12)
        assert torch.allclose(im, torch.zeros_like(im), atol=1e-12)

    def test_matches_direct_dft(self, gen):
        x = rand(gen, 1, 1, 4, 5)
        re, im = ops.fft2(x)
        h, w = 4, 5
        for u in range(h):
            for v in range(w):
                acc = 0j
                for p in range(h):
                    for q in range(w):
                        acc += x[0, 0, p, q].item() * np.exp(-2j * np.pi * (u * p / h + v * q / w))
                assert re[0, 0, u, v].item() == pytest.approx(acc.real, abs=1e-10)
                assert im[0, 0, u, v].item() == pytest.approx(acc.imag, abs=1e-10)

    def test_parseval(self, gen):
        x = rand(gen, 1, 1, 8, 8)
        re, im = ops.fft2(x)
        assert (x ** 2).sum().item() == pytest.approx(((re ** 2 + im ** 2).sum() / 64).item(), rel=1e-12)


class TestReduceLoss:
    @pytest.mark.parametrize("kind", ["L1", "L2"])
    def test_equal_inputs(self, gen, kind):
        a = rand(gen, 2, 3, 4, 4)
        assert ops.reduce_loss(a, a.clone(), kind).item() == 0.0

    def test_constant_difference(self):
        a = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
        b = torch.zeros_like(a)
        assert ops.reduce_loss(a, b, "L1").item() == pytest.approx(0.5)
        assert ops.reduce_loss(a, b, "L2").item() == pytest.approx(0.25)

    def test_matches_loop_oracle(self, gen):
        a, b = rand(gen, 2, 2, 3, 3), rand(gen, 2, 2, 3, 3)
        flat_a, flat_b = a.flatten().tolist(), b.flatten().tolist()
        l1 = sum(abs(x - y) for x, y in zip(flat_a, flat_b)) / len(flat_a)
        l2 = sum((x - y) ** 2 for x, y in zip(flat_a, flat_b)) / len(flat_a)
        assert ops.reduce_loss(a, b, "L1").item() == pytest.approx(l1, abs=1e-6)
        assert ops.reduce_loss(a, b, "L2").item() == pytest.approx(l2, abs=1e-6)

    def test_shape_mismatch(self, gen):
        with pytest.raises(ValueError):
            ops.reduce_loss(rand(gen, 1, 1, 2, 2), rand(gen, 1, 1, 2, 3), "L1")

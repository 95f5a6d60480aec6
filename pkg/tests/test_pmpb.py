import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdcn.pmpb import (
    BlurKernelField,
    TrajectorySpec,
    dense_oracle_reblur,
    field_from_taps,
    kernel_alignment,
    load_true_field,
    reblur,
    resample_taps,
    sample_trajectory,
    save_true_field,
    synthesize_blur,
    taps_from_field,
    warp,
)


def rand(gen, *shape):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def random_field(gen, n, h, w, span=3.0):
    off = (torch.rand(1, 2 * n, h, w, generator=gen, dtype=torch.float64) - 0.5) * 2 * span
    wts = torch.softmax(rand(gen, 1, n, h, w), dim=1)
    return BlurKernelField(off, wts)


class TestWarp:
    def test_zero_offsets(self, gen):
        x = rand(gen, 1, 3, 5, 6)
        assert torch.equal(warp(x, torch.zeros(1, 2, 5, 6, dtype=torch.float64)), x)

    def test_integer_shift_clamps(self):
        x = torch.arange(12, dtype=torch.float64).view(1, 1, 3, 4)
        off = torch.zeros(1, 2, 3, 4, dtype=torch.float64)
        off[:, 0] = 1.0
        out = warp(x, off)
        expected = torch.cat([x[..., 1:], x[..., -1:]], dim=-1)
        assert torch.equal(out, expected)

    def test_half_pixel_on_ramp(self):
        x = torch.arange(6, dtype=torch.float64).view(1, 1, 1, 6).expand(1, 1, 4, 6).contiguous()
        off = torch.zeros(1, 2, 4, 6, dtype=torch.float64)
        off[:, 0] = 0.5
        out = warp(x, off)
        assert torch.allclose(out[..., :-1], x[..., :-1] + 0.5, atol=1e-12)

    def test_linear_in_image(self, gen):
        a, b = rand(gen, 1, 2, 5, 5), rand(gen, 1, 2, 5, 5)
        off = rand(gen, 1, 2, 5, 5) * 2
        lhs = warp(0.3 * a - 1.7 * b, off)
        assert torch.allclose(lhs, 0.3 * warp(a, off) - 1.7 * warp(b, off), atol=1e-6)

    def test_extent_mismatch(self, gen):
        with pytest.raises(ValueError):
            warp(rand(gen, 1, 1, 4, 4), rand(gen, 1, 2, 4, 5))


class TestReblur:
    def test_identity_kernel(self, gen):
        x = rand(gen, 1, 3, 4, 4)
        fld = BlurKernelField(torch.zeros(1, 2, 4, 4, dtype=torch.float64), torch.ones(1, 1, 4, 4, dtype=torch.float64))
        assert torch.allclose(reblur(x, fld), x)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 10_000), st.floats(0.0, 1.0))
    def test_constant_image(self, n, seed, c):
        g = torch.Generator().manual_seed(seed)
        fld = random_field(g, n, 6, 5, span=8.0)
        out = reblur(torch.full((1, 3, 6, 5), c, dtype=torch.float64), fld)
        assert torch.allclose(out, torch.full_like(out, c), atol=1e-6)

    def test_two_tap_against_oracle(self, gen):
        x = rand(gen, 1, 1, 4, 4)
        off = torch.zeros(1, 4, 4, 4, dtype=torch.float64)
        off[:, 2] = 1.0
        fld = BlurKernelField(off, torch.full((1, 2, 4, 4), 0.5, dtype=torch.float64))
        taps = np.zeros((4, 4, 2, 3))
        taps[..., 0, 2] = 0.5
        taps[..., 1, :] = (1.0, 0.0, 0.5)
        assert torch.allclose(reblur(x, fld), torch.as_tensor(dense_oracle_reblur(x, taps)), atol=1e-6)

    def test_weight_count_mismatch(self, gen):
        with pytest.raises(ValueError):
            BlurKernelField(torch.zeros(1, 4, 3, 3), torch.full((1, 3, 3, 3), 1 / 3))


class TestDenseOracle:
    def test_single_tap_identity(self, gen):
        x = rand(gen, 1, 2, 3, 3)
        taps = np.tile(np.array([0.0, 0.0, 1.0]), (3, 3, 1, 1))
        assert torch.allclose(torch.as_tensor(dense_oracle_reblur(x, taps)), x)

    def test_impulse_response(self):
        x = torch.zeros(1, 1, 5, 5, dtype=torch.float64)
        x[0, 0, 2, 2] = 1.0
        taps = np.tile(np.array([[-1.0, 0.0, 0.5], [1.0, 0.0, 0.5]]), (5, 5, 1, 1))
        out = torch.as_tensor(dense_oracle_reblur(x, taps))[0, 0]
        # gather form: pixels left and right of the impulse each collect half of it
        expected = torch.zeros(5, 5, dtype=torch.float64)
        expected[2, 1] = expected[2, 3] = 0.5
        assert torch.allclose(out, expected)


class TestSynthesis:
    def test_zero_length_trajectory(self, gen):
        sharp = torch.rand(3, 16, 16, generator=gen, dtype=torch.float64)
        smp = synthesize_blur(sharp, TrajectorySpec(n_samples=2, max_displacement=0.0))
        assert torch.allclose(smp.blurred[0], sharp)
        assert np.all(smp.true_field[..., :2] == 0)

    def test_line_mass_conservation(self):
        sharp = torch.zeros(1, 16, 16, dtype=torch.float64)
        sharp[0, 8, 8] = 1.0
        smp = synthesize_blur(sharp, TrajectorySpec(n_samples=9, max_displacement=4.0, angle=0.0))
        oracle = torch.as_tensor(dense_oracle_reblur(sharp[None], smp.true_field))
        assert abs(oracle.sum().item() - 1.0) < 1e-6
        assert torch.allclose(smp.blurred, oracle, atol=1e-12)
        row = smp.blurred[0, 0, 8]
        support = torch.nonzero(row > 1e-12).flatten()
        assert support.max() - support.min() == 4  # four pixels of extent, centred on the impulse
        assert torch.allclose(smp.blurred[0, 0, :8].sum() + smp.blurred[0, 0, 9:].sum(),
                              torch.zeros((), dtype=torch.float64))

    def test_weights_are_uniform(self, gen):
        smp = synthesize_blur(torch.rand(3, 12, 12, generator=gen, dtype=torch.float64),
                              TrajectorySpec(n_samples=5, max_displacement=3.0, family="polyline", seed=2))
        assert np.allclose(smp.true_field[..., 2], 0.2)
        assert np.allclose(smp.true_field[..., 2].sum(-1), 1.0, atol=1e-6)

    def test_rotation_centre_is_fixed(self):
        traj = sample_trajectory(TrajectorySpec(n_samples=7, max_displacement=5.0, family="rotation", seed=4), 33, 33)
        assert np.abs(traj[16, 16]).max() < 1e-9
        assert np.abs(traj[0, 0]).max() > 1.0

    def test_deterministic_per_seed(self, gen):
        sharp = torch.rand(3, 16, 16, generator=gen, dtype=torch.float64)
        a = synthesize_blur(sharp, TrajectorySpec(seed=11))
        b = synthesize_blur(sharp, TrajectorySpec(seed=11))
        assert torch.equal(a.blurred, b.blurred) and np.array_equal(a.true_field, b.true_field)

    def test_displacement_too_large(self):
        with pytest.raises(ValueError):
            synthesize_blur(torch.zeros(3, 8, 8, dtype=torch.float64), TrajectorySpec(max_displacement=8.0))

    @pytest.mark.parametrize("kwargs", [{"n_samples": 1}, {"max_displacement": -1.0}, {"family": "zigzag"}])
    def test_spec_validation(self, kwargs):
        with pytest.raises(ValueError):
            TrajectorySpec(**kwargs)


class TestKernelAlignment:
    def test_identical_sets(self, gen):
        smp = synthesize_blur(torch.rand(3, 8, 8, generator=gen, dtype=torch.float64), TrajectorySpec(5, 3.0, seed=1))
        assert kernel_alignment(smp.true_field, smp.true_field) == 0.0

    def test_hand_computed_chamfer(self):
        est = np.zeros((1, 1, 1, 3))
        est[..., 2] = 1.0
        truth = np.array([[[[-1.0, 0.0, 1 / 3], [0.0, 0.0, 1 / 3], [1.0, 0.0, 1 / 3]]]])
        # estimated->truth: 0; truth->estimated: (1 + 0 + 1) / 3
        assert kernel_alignment(est, truth) == pytest.approx(2 / 3)

    def test_continuous_at_optimum(self):
        truth = np.array([[[[-1.0, 0.0, 0.5], [1.0, 0.0, 0.5]]]])
        values = []
        for d in (0.1, 0.01, 0.001):
            est = truth.copy()
            est[..., 0] += d
            values.append(kernel_alignment(est, truth))
        assert values[0] > values[1] > values[2] and values[2] < 3e-3

    def test_field_input_and_mask(self):
        fld = BlurKernelField.identity(1, 2, 2, 3, torch.float64)
        truth = np.zeros((2, 2, 2, 3))
        truth[..., 0] = [1.0, -1.0]
        mask = np.array([[True, False], [False, False]])
        assert kernel_alignment(fld, truth, mask) == pytest.approx(2.0)

    def test_empty_taps(self):
        with pytest.raises(ValueError):
            kernel_alignment(np.zeros((1, 1, 0, 3)), np.zeros((1, 1, 2, 3)))


class TestTapConversion:
    def test_round_trip(self, gen):
        smp = synthesize_blur(torch.rand(3, 8, 8, generator=gen, dtype=torch.float64), TrajectorySpec(4, 3.0, seed=5))
        assert np.allclose(taps_from_field(field_from_taps(smp.true_field)), smp.true_field)

    def test_resample_scales_displacements(self):
        taps = np.zeros((8, 8, 2, 3))
        taps[..., 1, 0] = 4.0
        out = resample_taps(taps, 2, 2)
        assert out.shape == (2, 2, 2, 3) and np.allclose(out[..., 1, 0], 1.0)


class TestFieldFile:
    def test_round_trip(self, tmp_path, gen):
        smp = synthesize_blur(torch.rand(3, 8, 8, generator=gen, dtype=torch.float64), TrajectorySpec(4, 3.0, seed=5))
        save_true_field(tmp_path / "f.pmpb", smp.true_field)
        back = load_true_field(tmp_path / "f.pmpb")
        assert np.allclose(back, smp.true_field, atol=1e-6)
        assert (tmp_path / "f.pmpb").read_bytes()[:4] == b"PMPB"

    def test_truncated(self, tmp_path):
        save_true_field(tmp_path / "f.pmpb", np.zeros((2, 2, 2, 3)))
        data = (tmp_path / "f.pmpb").read_bytes()
        (tmp_path / "f.pmpb").write_bytes(data[:-4])
        with pytest.raises(ValueError):
            load_true_field(tmp_path / "f.pmpb")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "f.pmpb").write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError):
            load_true_field(tmp_path / "f.pmpb")

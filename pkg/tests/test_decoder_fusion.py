import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from oracles import analytic_grad, central_grad, rel_error
from pgseg.decoder_fusion import (
    GuideAffine,
    GuideAligner,
    LayerNorm2d,
    MaskTransformer,
    UpsampleStage,
    align_guide,
    channel_pool,
    deform_conv2d,
    fuse,
)
from pgseg.errors import ConfigurationError, ShapeError

tv_ops = pytest.importorskip("torchvision.ops")


def _g(seed):
    return torch.Generator().manual_seed(seed)


class TestDeformConv:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_torchvision(self, seed):
        g = _g(seed)
        x = torch.randn(2, 3, 7, 6, generator=g, dtype=torch.float64)
        off = 2.5 * torch.randn(2, 18, 7, 6, generator=g, dtype=torch.float64)
        w = torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64)
        b = torch.randn(4, generator=g, dtype=torch.float64)
        ref = tv_ops.deform_conv2d(x, off, w, b, padding=1)
        np.testing.assert_allclose(deform_conv2d(x, off, w, b).numpy(), ref.numpy(), atol=1e-12)

    def test_zero_offset_is_conv(self):
        g = _g(4)
        x = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64)
        w = torch.randn(3, 2, 3, 3, generator=g, dtype=torch.float64)
        out = deform_conv2d(x, torch.zeros(1, 18, 5, 5, dtype=torch.float64), w)
        np.testing.assert_allclose(out.numpy(), F.conv2d(x, w, padding=1).numpy(), atol=1e-12)

    def test_integer_offset_shifts(self):
        # every tap displaced by +1 column equals convolving the left-shifted map
        x = torch.arange(36, dtype=torch.float64).view(1, 1, 6, 6)
        off = torch.zeros(1, 18, 6, 6, dtype=torch.float64)
        off[:, 1::2] = 1.0
        w = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
        w[0, 0, 1, 1] = 1.0
        out = deform_conv2d(x, off, w)
        np.testing.assert_allclose(out[0, 0, :, :5].numpy(), x[0, 0, :, 1:].numpy(), atol=1e-12)
        assert float(out[0, 0, :, 5].abs().max()) < 1e-12

    def test_gradient(self):
        g = _g(5)
        x = torch.randn(1, 2, 3, 3, generator=g, dtype=torch.float64)
        off = 0.3 + 0.2 * torch.rand(1, 18, 3, 3, generator=g, dtype=torch.float64)
        w = torch.randn(2, 2, 3, 3, generator=g, dtype=torch.float64)
        fn = lambda t: deform_conv2d(t, off, w).pow(2).sum()
        assert rel_error(analytic_grad(fn, x), central_grad(fn, x)) < 1e-6

    def test_shape_checks(self):
        x = torch.zeros(1, 2, 4, 4)
        with pytest.raises(ShapeError, match="offset"):
            deform_conv2d(x, torch.zeros(1, 8, 4, 4), torch.zeros(1, 2, 3, 3))
        with pytest.raises(ShapeError, match="weight"):
            deform_conv2d(x, torch.zeros(1, 18, 4, 4), torch.zeros(1, 3, 3, 3))


class TestUpsample:
    def test_two_stage_ledger(self):
        up1, up2 = UpsampleStage(64), UpsampleStage(32)
        y1 = up1(torch.randn(2, 64, 3, 5))
        y2 = up2(y1)
        assert y1.shape == (2, 32, 6, 10)
        assert y2.shape == (2, 16, 12, 20)

    def test_odd_channels(self):
        with pytest.raises(ConfigurationError):
            UpsampleStage(7)

    def test_zero_input(self):
        torch.manual_seed(0)
        st = UpsampleStage(8).double()
        y = st(torch.zeros(1, 8, 2, 2, dtype=torch.float64))
        bias = st.deconv.bias.detach().view(1, 4, 1, 1).expand(1, 4, 4, 4)
        torch.testing.assert_close(y, F.gelu(st.norm(bias)))

    def test_layernorm2d_channels(self):
        ln = LayerNorm2d(5).double()
        y = ln(torch.randn(2, 5, 3, 3, dtype=torch.float64) * 4 + 1)
        np.testing.assert_allclose(y.mean(1).detach().numpy(), 0.0, atol=1e-12)


class TestGuideAlignment:
    def test_resizes_to_target(self):
        torch.manual_seed(0)
        al = GuideAligner(6)
        assert align_guide(torch.randn(2, 6, 4, 4), (16, 16), al).shape == (2, 6, 16, 16)

    def test_offsets_start_at_zero(self):
        torch.manual_seed(0)
        al = GuideAligner(4).double()
        g = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        np.testing.assert_allclose(al(g, (8, 8)).detach().numpy(), F.conv2d(g, al.weight, al.bias, padding=1).detach().numpy(), atol=1e-12)

    def test_offsets_clamped(self):
        torch.manual_seed(0)
        al = GuideAligner(2, offset_clamp=2.0).double()
        with torch.no_grad():
            al.offset.bias.fill_(50.0)
        g = torch.randn(1, 2, 8, 8, dtype=torch.float64)
        off = torch.full((1, 18, 8, 8), 2.0, dtype=torch.float64)
        ref = deform_conv2d(g, off, al.weight, al.bias)
        torch.testing.assert_close(al(g, (8, 8)), ref)

    def test_constant_guide_interior(self):
        # a constant guide map stays constant away from the zero-padded border
        al = GuideAligner(3).double()
        g = torch.full((1, 3, 4, 4), 0.7, dtype=torch.float64)
        out = al(g, (12, 12))[..., 1:-1, 1:-1]
        np.testing.assert_allclose(out.detach().numpy(), out[..., :1, :1].expand_as(out).detach().numpy(), atol=1e-12)

    def test_refuses_downsampling(self):
        with pytest.raises(ValueError, match="cannot align"):
            align_guide(torch.zeros(1, 2, 8, 8), (4, 4), GuideAligner(2))


class TestFuse:
    def _mods(self, c_g=4, c=6):
        torch.manual_seed(1)
        phi = nn.Conv2d(c, c, 1).double()
        psi = GuideAffine(c_g, c).double()
        with torch.no_grad():
            psi.scale.normal_()
            psi.shift.normal_()
        return phi, psi

    def test_psi_starts_silent(self):
        psi = GuideAffine(3, 5)
        assert torch.count_nonzero(psi(torch.randn(1, 3, 2, 2))) == 0

    def test_shapes(self):
        phi, psi = self._mods()
        out = fuse(torch.randn(2, 6, 5, 5, dtype=torch.float64), torch.randn(2, 4, 5, 5, dtype=torch.float64), phi, psi)
        assert out.shape == (2, 6, 5, 5)

    def test_additive_in_guide(self):
        # psi carries a shift, so additivity holds after removing psi(0)
        phi, psi = self._mods()
        g = _g(2)
        f = torch.randn(1, 6, 4, 4, generator=g, dtype=torch.float64)
        a, b = torch.randn(2, 1, 4, 4, 4, generator=g, dtype=torch.float64)
        z = torch.zeros_like(a)
        lhs = fuse(f, a + b, phi, psi) - fuse(f, z, phi, psi)
        rhs = (fuse(f, a, phi, psi) - fuse(f, z, phi, psi)) + (fuse(f, b, phi, psi) - fuse(f, z, phi, psi))
        np.testing.assert_allclose(lhs.detach().numpy(), rhs.detach().numpy(), atol=1e-12)

    def test_without_guide(self):
        phi, psi = self._mods()
        f = torch.randn(1, 6, 3, 3, dtype=torch.float64)
        torch.testing.assert_close(fuse(f, None, phi, psi), phi(f))

    def test_spatial_mismatch(self):
        phi, psi = self._mods()
        with pytest.raises(ShapeError):
            fuse(torch.zeros(1, 6, 4, 4, dtype=torch.float64), torch.zeros(1, 4, 5, 5, dtype=torch.float64), phi, psi)


class TestMisc:
    def test_channel_pool(self):
        x = torch.arange(8.0).view(1, 8, 1, 1)
        np.testing.assert_array_equal(channel_pool(x, 2).flatten().numpy(), [1.5, 5.5])
        with pytest.raises(ShapeError):
            channel_pool(x, 3)

    def test_mask_transformer_shapes(self):
        torch.manual_seed(0)
        mt = MaskTransformer(16, 32, 9, grid=4, heads=4, mlp_dim=64)
        f, tok = mt(torch.randn(2, 16, 4, 4))
        assert f.shape == (2, 32, 4, 4) and tok.shape == (2, 9, 32)

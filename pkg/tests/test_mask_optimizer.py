import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oracles import analytic_grad, central_grad, rel_error
from pgseg.errors import ShapeError, StateError
from pgseg.mask_optimizer import (
    HyperNetwork,
    IterativeMaskOptimizer,
    MaskState,
    hyper_kernel,
    refine,
    refine_step,
)


def _inputs(b=2, n=3, c=2, hw=5, k=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    m = torch.rand(b, n, hw, hw, generator=g, dtype=torch.float64)
    f = torch.randn(b, c, hw, hw, generator=g, dtype=torch.float64)
    kern = 0.3 * torch.randn(b, n, n + c, n, k, k, generator=g, dtype=torch.float64)
    return m, f, kern


def _reference_step(m, f, kernels, lam, bias=None):
    """Loop over samples and classes with plain conv2d."""
    b, n = m.shape[:2]
    x = torch.cat([m, f], 1)
    out = torch.empty_like(m)
    for i in range(b):
        for c in range(n):
            w = kernels[i, c, :, c][None]  # (1, C_in, K, K)
            out[i, c] = F.conv2d(x[i : i + 1], w, padding=w.shape[-1] // 2)[0, 0]
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return torch.clamp(m + lam * torch.sigmoid(out), 0, 1)


class TestHyperKernel:
    def test_gate_one_is_base(self):
        base = torch.randn(5, 3, 3, 3, dtype=torch.float64)
        assert torch.equal(hyper_kernel(torch.ones(5, dtype=torch.float64), base), base)

    def test_gate_zero_is_zero(self):
        base = torch.randn(5, 3, 3, 3)
        assert torch.count_nonzero(hyper_kernel(torch.zeros(5), base)) == 0

    def test_single_channel_doubling(self):
        base = torch.randn(5, 3, 3, 3, dtype=torch.float64)
        gate = torch.ones(5, dtype=torch.float64)
        gate[2] = 2.0
        out = hyper_kernel(gate, base)
        changed = [i for i in range(5) if not torch.equal(out[i], base[i])]
        assert changed == [2]
        assert torch.equal(out[2], 2.0 * base[2])

    def test_batched_gates(self):
        base = torch.randn(4, 2, 3, 3)
        gate = torch.rand(2, 3, 4)
        assert hyper_kernel(gate, base).shape == (2, 3, 4, 2, 3, 3)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            hyper_kernel(torch.ones(3), torch.zeros(4, 1, 3, 3))

    def test_hypernetwork_starts_near_one(self):
        torch.manual_seed(0)
        h = HyperNetwork(8, 6)
        gate = h(torch.randn(4, 8)).detach()
        assert float((gate - 1).abs().max()) < 0.05
        with pytest.raises(ShapeError):
            h(torch.zeros(1, 7))


class TestRefineStep:
    def test_matches_loop_reference(self):
        m, f, k = _inputs()
        bias = torch.tensor([0.1, -0.2, 0.3], dtype=torch.float64)
        lam = torch.tensor(0.4, dtype=torch.float64)
        got = refine_step(MaskState(m, lam), f, k, bias)
        np.testing.assert_allclose(got.probs.numpy(), _reference_step(m, f, k, lam, bias).numpy(), atol=1e-12)
        assert got.step == 1

    def test_zero_step_is_identity(self):
        m, f, k = _inputs(seed=1)
        out = refine_step(MaskState(m, torch.tensor(0.0, dtype=torch.float64)), f, k)
        assert torch.equal(out.probs, m)

    def test_clip_bound_under_large_steps(self):
        m, f, k = _inputs(seed=2)
        for lam in (-5.0, 5.0):
            p = refine_step(MaskState(m, torch.tensor(lam, dtype=torch.float64)), f, k).probs
            assert float(p.min()) >= 0 and float(p.max()) <= 1

    def test_gradient_non_saturated(self):
        m, f, k = _inputs(b=1, n=2, c=1, hw=3, seed=3)
        m = 0.3 + 0.4 * m  # keep m + lam * delta strictly inside (0, 1)
        lam = torch.tensor(0.1, dtype=torch.float64)
        fn = lambda t: (refine_step(MaskState(t, lam), f, k).probs ** 2).sum()
        assert rel_error(analytic_grad(fn, m), central_grad(fn, m)) < 1e-6

    def test_nonfinite_lambda(self):
        m, f, k = _inputs()
        with pytest.raises(StateError):
            refine_step(MaskState(m, torch.tensor(float("nan"))), f, k)

    def test_kernel_shape(self):
        m, f, k = _inputs()
        with pytest.raises(ShapeError, match="kernels"):
            refine_step(MaskState(m, 0.1), f, k[:, :, 1:])
        with pytest.raises(ShapeError, match="disagree"):
            refine_step(MaskState(m, 0.1), f[:, :, 1:], k)


class TestRefine:
    def test_regenerates_kernels_each_iteration(self):
        m, f, k = _inputs()
        calls = []

        def make():
            calls.append(1)
            return k

        out = refine(MaskState(m, torch.tensor(0.1, dtype=torch.float64)), f, 4, make)
        assert len(calls) == 4 and out.step == 4

    def test_zero_iterations(self):
        m, f, k = _inputs()
        s = MaskState(m, 0.1)
        assert refine(s, f, 0, lambda: k) is s
        with pytest.raises(ValueError):
            refine(s, f, -1, lambda: k)

    def test_monotone_for_positive_step(self):
        # sigmoid residual is positive, so probabilities never decrease
        m, f, k = _inputs(seed=5)
        s = refine(MaskState(m, torch.tensor(0.2, dtype=torch.float64)), f, 3, lambda: k)
        assert bool((s.probs >= m).all())


class TestModule:
    def test_forward_shapes_and_lambda(self):
        torch.manual_seed(0)
        opt = IterativeMaskOptimizer(num_classes=3, fusion_channels=4, enc_dim=8)
        assert float(opt.lambda_step.detach()) == pytest.approx(0.1)
        m0 = torch.rand(2, 3, 6, 6)
        out = opt(m0, torch.randn(2, 4, 6, 6), torch.randn(2, 3, 8), iterations=2)
        assert out.probs.shape == m0.shape and out.step == 2
        assert opt.kernels(torch.randn(2, 3, 8)).shape == (2, 3, 7, 3, 3, 3)

    def test_lambda_receives_gradient(self):
        torch.manual_seed(0)
        opt = IterativeMaskOptimizer(3, 4, 8)
        out = opt(torch.rand(1, 3, 5, 5) * 0.5, torch.randn(1, 4, 5, 5), torch.randn(1, 3, 8))
        out.probs.sum().backward()
        assert opt.lambda_step.grad is not None and float(opt.lambda_step.grad) > 0

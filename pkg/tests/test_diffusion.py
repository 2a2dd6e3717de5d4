import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from collabgen.diffusion import (ConditionalUNet, DiffusionSchedule, FeatureGenerator, denoise_step,
                                 diffuse_with_alpha, forward_diffuse, generate, generation_loss)
from collabgen.dme import SpatialMessage
from collabgen.zoo import BEVFeature

from gradcheck_util import assert_param_grads


def test_schedule_linear_betas():
    s = DiffusionSchedule()
    np.testing.assert_allclose(s.betas, [1e-4, (1e-4 + 0.2) / 2, 0.2])
    np.testing.assert_allclose(s.alpha_bars, np.cumprod(1 - s.betas))
    assert s.alpha_bar(0) == 1.0
    with pytest.raises(ValueError):
        DiffusionSchedule(T=0)
    with pytest.raises(ValueError):
        s.alpha_bar(4)


def test_unit_alpha_returns_input():
    f = torch.randn(3, 4, 5)
    assert torch.equal(diffuse_with_alpha(f, 1.0, torch.randn(3, 4, 5)), f)


def test_zero_alpha_returns_noise():
    f = torch.full((100_000,), 5.0)
    z = torch.randn(100_000, generator=torch.Generator().manual_seed(0))
    out = diffuse_with_alpha(f, 0.0, z)
    assert torch.equal(out, z)
    assert abs(out.mean().item()) < 0.01


def test_half_alpha_moments():
    f = torch.full((100_000,), 2.0, dtype=torch.float64)
    z = torch.randn(100_000, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    out = diffuse_with_alpha(f, 0.5, z)
    assert out.mean().item() == pytest.approx(math.sqrt(0.5) * 2, abs=0.01)
    assert out.var().item() == pytest.approx(0.5, abs=0.01)


@pytest.mark.parametrize("t", [1, 2, 3])
def test_moment_law_every_step(t):
    s = DiffusionSchedule()
    f = torch.linspace(-2, 2, 100_000, dtype=torch.float64)
    out = forward_diffuse(f, t, s, rng_seed=10 + t)
    a = s.alpha_bar(t)
    resid = out - math.sqrt(a) * f
    assert resid.mean().item() == pytest.approx(0.0, abs=0.01)
    assert resid.var().item() == pytest.approx(1 - a, abs=0.01)


def test_forward_seed_determinism():
    s = DiffusionSchedule()
    f = torch.randn(4, 6, 6)
    assert torch.equal(forward_diffuse(f, 2, s, 5), forward_diffuse(f, 2, s, 5))
    assert not torch.equal(forward_diffuse(f, 2, s, 5), forward_diffuse(f, 2, s, 6))


def _msgs(n, seed=0, c=2, hw=(6, 8)):
    g = torch.Generator().manual_seed(seed)
    return [SpatialMessage(i + 2, 1, torch.randn(c, *hw, generator=g)) for i in range(n)]


def test_denoise_step_shapes_and_identical_messages():
    torch.manual_seed(0)
    net = ConditionalUNet(5, 2, base=8)
    f = torch.randn(5, 6, 8)
    m = _msgs(1)[0]
    outs = denoise_step(f, [m, SpatialMessage(9, 1, m.data.clone())], 3, net)
    assert len(outs) == 2 and all(tuple(o.shape) == (5, 6, 8) for o in outs)
    assert torch.equal(outs[0], outs[1])


def test_generate_calls_denoiser_T_times_per_collaborator():
    torch.manual_seed(0)
    net = ConditionalUNet(5, 2, base=8)
    calls = []
    net.register_forward_hook(lambda mod, inp, out: calls.append(inp[0].shape[0]))
    with torch.no_grad():
        out = generate(BEVFeature(1, torch.randn(5, 6, 8), "s"), _msgs(2), DiffusionSchedule(), net, 0)
    assert len(out) == 2
    assert sum(calls) == 3 * 2
    assert all(tuple(g.data.shape) == (5, 6, 8) for g in out)
    assert generate(torch.randn(5, 6, 8), [], DiffusionSchedule(), net, 0) == []


def test_generate_seed_determinism_and_condition_sensitivity():
    torch.manual_seed(0)
    net = ConditionalUNet(4, 2, base=8)
    f = torch.randn(4, 6, 8)
    msgs = _msgs(2)
    with torch.no_grad():
        a = generate(f, msgs, DiffusionSchedule(), net, 7)
        b = generate(f, msgs, DiffusionSchedule(), net, 7)
        bumped = [msgs[0], SpatialMessage(3, 1, msgs[1].data + 1e-3)]
        c = generate(f, bumped, DiffusionSchedule(), net, 7)
    assert all(torch.equal(x.data, y.data) for x, y in zip(a, b))
    assert torch.equal(a[0].data, c[0].data)
    assert not torch.equal(a[1].data, c[1].data)


def test_batched_generator_matches_functional_path():
    torch.manual_seed(0)
    sched = DiffusionSchedule()
    gen = FeatureGenerator(4, 2, sched, base=8)
    f = torch.randn(2, 4, 6, 8)
    noise = torch.randn(2, 4, 6, 8)
    msgs = torch.randn(3, 2, 6, 8)
    owner = torch.tensor([0, 1, 1])
    with torch.no_grad():
        batched = gen(f, msgs, owner, noise)
        x = diffuse_with_alpha(f[1], sched.alpha_bar(3), noise[1])
        xs = x
        for t in (3, 2, 1):
            xs = denoise_step(xs, [msgs[1], msgs[2]], t, gen.denoiser)
    torch.testing.assert_close(batched[1], xs[0])
    torch.testing.assert_close(batched[2], xs[1])
    assert gen(f, msgs[:0], owner[:0], noise).shape[0] == 0


def test_denoiser_gradient_on_toy_feature():
    torch.manual_seed(0)
    net = ConditionalUNet(3, 2, base=4).double()
    f = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    m = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    target = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    assert_param_grads(net, lambda: ((net(f, m, 2) - target) ** 2).mean(), n=10)


def test_message_jacobian_nonzero():
    torch.manual_seed(0)
    net = ConditionalUNet(3, 2, base=4).double()
    f = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    m = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(net(f, m, 1).sum(), m)
    assert g.abs().sum() > 0


def test_generation_loss_examples():
    a = torch.randn(3, 4, 4)
    assert generation_loss([a], [a.clone()]).item() == 0.0
    assert generation_loss([a + 1], [a]).item() == pytest.approx(1.0)
    g = [torch.zeros(2, 2), torch.zeros(2, 2)]
    t = [torch.full((2, 2), 0.5), torch.full((2, 2), math.sqrt(0.75))]
    assert generation_loss(g, t).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        generation_loss(g, t[:1])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(2, 6), st.integers(2, 6))
def test_generation_preserves_ego_shape(n, h, w):
    torch.manual_seed(0)
    net = ConditionalUNet(3, 2, base=4)
    with torch.no_grad():
        out = generate(torch.randn(3, h, w), _msgs(n, hw=(h, w)), DiffusionSchedule(), net, 1)
    assert all(tuple(g.data.shape) == (3, h, w) for g in out)

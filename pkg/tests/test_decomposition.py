import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from shadowrecast.decomposition import (
    HINGE_EPS,
    LAMBDA_N,
    W_REF,
    DecompNetConfig,
    DecompositionNet,
    build_decomposition_net,
    decompose,
    decomposition_losses,
    loss_decomposition_total,
    loss_fidelity,
    loss_illumination,
    loss_reflectance,
    spatial_gradient,
)

from conftest import autograd_grad, central_fd, rel_err


def _rand(*shape, seed=0, lo=0.05, hi=0.95):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=torch.float64)


# ---------------------------------------------------------------- network


def test_output_shapes_64():
    net = build_decomposition_net(DecompNetConfig(base_channels=16), (64, 64))
    r, l = net(torch.rand(2, 3, 64, 64), torch.zeros(2, 1, 64, 64))
    assert r.shape == l.shape == (2, 3, 64, 64)


def test_encoder_scales_256():
    net = DecompositionNet(DecompNetConfig(base_channels=8))
    feats = net.encode(torch.rand(1, 4, 256, 256))
    assert [f.shape[-1] for f in feats] == [128, 64, 32, 16, 8]


def test_indivisible_size():
    with pytest.raises(ValueError):
        build_decomposition_net(DecompNetConfig(), (100, 100))
    net = DecompositionNet(DecompNetConfig(base_channels=8))
    with pytest.raises(ValueError):
        net(torch.rand(1, 3, 100, 100), torch.zeros(1, 1, 100, 100))


def test_bottleneck_too_small():
    with pytest.raises(ValueError, match="minimum"):
        build_decomposition_net(DecompNetConfig(), (32, 64))


def test_config_guards():
    with pytest.raises(ValueError):
        DecompNetConfig(base_channels=4)
    with pytest.raises(ValueError):
        DecompNetConfig(encoder_layers=4)


def test_mask_size_mismatch():
    net = DecompositionNet(DecompNetConfig(base_channels=8))
    with pytest.raises(ValueError):
        net(torch.rand(1, 3, 64, 64), torch.zeros(1, 1, 32, 32))


def test_eval_determinism_and_range():
    torch.manual_seed(0)
    net = DecompositionNet(DecompNetConfig(base_channels=8)).eval()
    img = torch.randn(2, 3, 64, 64) * 5  # far outside [0,1] on purpose
    m = (torch.rand(2, 1, 64, 64) > 0.5).float()
    a = decompose(net, img, m)
    b = decompose(net, img, m)
    assert torch.equal(a.reflectance, b.reflectance) and torch.equal(a.illumination, b.illumination)
    for t in a:
        assert t.min() >= 0 and t.max() <= 1


def test_default_mask_is_zero_map():
    torch.manual_seed(0)
    net = DecompositionNet(DecompNetConfig(base_channels=8)).eval()
    img = torch.rand(1, 3, 64, 64)
    a = decompose(net, img)
    b = net(img, torch.zeros(1, 1, 64, 64))
    assert torch.equal(a.reflectance, b.reflectance)


# ---------------------------------------------------------------- loss examples


def test_fidelity_examples():
    r, l = _rand(1, 3, 4, 4, seed=1), _rand(1, 3, 4, 4, seed=2)
    assert loss_fidelity(r, l, r * l, r, l, r * l).item() == 0.0
    one, zero = torch.ones(1, 3, 4, 4), torch.zeros(1, 3, 4, 4)
    assert loss_fidelity(one, one, zero, one, one, one).item() == pytest.approx(1.0)


def test_illumination_examples():
    r, l_s, l_sf = _rand(1, 3, 4, 4, seed=1), _rand(1, 3, 4, 4, seed=2), _rand(1, 3, 4, 4, seed=3)
    assert loss_illumination(r, r, l_s, l_sf, r * l_s, r * l_sf).item() == 0.0
    # cross terms are exact by construction, leaving only the 0.1 offset
    r_sf = r - 0.1
    i_sf = r * l_sf
    i_s = r_sf * l_s
    assert loss_illumination(r, r_sf, l_s, l_sf, i_s, i_sf).item() == pytest.approx(0.1, abs=1e-12)


def test_reflectance_constant_illumination_gradient_term():
    r_s, r_sf = _rand(1, 3, 8, 8, seed=1), _rand(1, 3, 8, 8, seed=2)
    grad_term, _ = loss_reflectance(r_s, r_sf, torch.full_like(r_s, 0.7), parts=True)
    assert grad_term.item() == 0.0


def test_reflectance_edges_suppress_penalty():
    # a strong step edge in R coinciding with the illumination edge kills the penalty there
    l_sf = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    l_sf[..., 4:] = 1.0
    r = torch.zeros_like(l_sf)
    r[..., 4:] = 1.0
    grad_term, _ = loss_reflectance(r, r, l_sf, parts=True)
    assert grad_term.item() < 1e-8
    flat = torch.zeros_like(l_sf)
    grad_flat, _ = loss_reflectance(flat, flat, l_sf, parts=True)
    assert grad_flat.item() > 0.1


def test_total_weighting():
    assert W_REF == 0.1
    assert loss_decomposition_total(0.0, 0.0, 0.0) == 0.0
    assert loss_decomposition_total(1.0, 2.0, 10.0) == pytest.approx(4.0)


def test_shape_mismatch_errors():
    a, b = torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 5)
    with pytest.raises(ValueError):
        loss_fidelity(a, a, a, a, a, b)
    with pytest.raises(ValueError):
        loss_illumination(a, b, a, a, a, a)
    with pytest.raises(ValueError):
        loss_reflectance(a, a, b)


# ---------------------------------------------------------------- brute-force oracles


def _np(t):
    return t.detach().numpy().astype(np.float64)


def _oracle_fid(r_s, l_s, i_s, r_sf, l_sf, i_sf):
    tot = 0.0
    for r, l, i in ((r_s, l_s, i_s), (r_sf, l_sf, i_sf)):
        s = 0.0
        for idx in np.ndindex(r.shape):
            s += abs(r[idx] * l[idx] - i[idx])
        tot += s / r.size
    return tot


def _oracle_ill(r_s, r_sf, l_s, l_sf, i_s, i_sf):
    n = r_s.size
    a = sum(abs(r_s[k] - r_sf[k]) for k in np.ndindex(r_s.shape)) / n
    b = sum(abs(r_s[k] * l_sf[k] - i_sf[k]) for k in np.ndindex(r_s.shape)) / n
    c = sum(abs(r_sf[k] * l_s[k] - i_s[k]) for k in np.ndindex(r_s.shape)) / n
    return a + b + c


def _oracle_ref(r_s, r_sf, l_sf):
    _, c, h, w = l_sf.shape
    n = l_sf.size

    def fd(x, b, ch, y, xx, axis):
        if axis == 0:
            return x[b, ch, y + 1, xx] - x[b, ch, y, xx] if y + 1 < h else 0.0
        return x[b, ch, y, xx + 1] - x[b, ch, y, xx] if xx + 1 < w else 0.0

    total = 0.0
    for r in (r_s, r_sf):
        for axis in (0, 1):
            s = 0.0
            for b, ch, y, xx in np.ndindex(l_sf.shape):
                s += abs(fd(l_sf, b, ch, y, xx, axis) * np.exp(-20.0 * abs(fd(r, b, ch, y, xx, axis))))
            total += s / n
        total += sum(max(0.0, r[k] - l_sf[k] + 1e-3) for k in np.ndindex(r.shape)) / n
    return total


def test_fidelity_oracle():
    ts = [_rand(1, 3, 4, 4, seed=s) for s in range(6)]
    assert loss_fidelity(*ts).item() == pytest.approx(_oracle_fid(*map(_np, ts)), abs=1e-12)


def test_illumination_oracle():
    ts = [_rand(1, 3, 4, 4, seed=s + 10) for s in range(6)]
    assert loss_illumination(*ts).item() == pytest.approx(_oracle_ill(*map(_np, ts)), abs=1e-12)


def test_reflectance_oracle_smooth_8x8():
    yy, xx = torch.meshgrid(torch.linspace(0, 1, 8, dtype=torch.float64), torch.linspace(0, 1, 8, dtype=torch.float64), indexing="ij")
    base = torch.stack([0.3 + 0.4 * xx, 0.2 + 0.5 * yy * xx, 0.6 - 0.2 * yy])[None]
    r_s = base * 0.8 + 0.02 * _rand(1, 3, 8, 8, seed=1)
    r_sf = base * 0.9
    l_sf = torch.sin(3 * xx + yy)[None, None].expand(1, 3, 8, 8) * 0.3 + 0.6
    got = loss_reflectance(r_s, r_sf, l_sf).item()
    assert got == pytest.approx(_oracle_ref(_np(r_s), _np(r_sf), _np(l_sf)), abs=1e-12)
    assert LAMBDA_N == -20.0 and HINGE_EPS == 1e-3


def test_spatial_gradient_boundary():
    x = torch.arange(16, dtype=torch.float64).view(1, 1, 4, 4)
    dy, dx = spatial_gradient(x)
    assert torch.all(dy[..., :3, :] == 4) and torch.all(dy[..., 3, :] == 0)
    assert torch.all(dx[..., :3] == 1) and torch.all(dx[..., 3] == 0)


# ---------------------------------------------------------------- gradients


def _check_grads(fn, inputs):
    for k in range(len(inputs)):
        ga = autograd_grad(fn, inputs, k)
        gn = central_fd(fn, inputs, k)
        assert rel_err(ga, gn) < 1e-4, f"input {k}"


def test_fidelity_gradients():
    _check_grads(loss_fidelity, [_rand(1, 3, 4, 4, seed=s) for s in range(6)])


def test_illumination_gradients():
    _check_grads(loss_illumination, [_rand(1, 3, 4, 4, seed=s + 20) for s in range(6)])


def test_reflectance_gradients():
    # L_sf kept well above R so the hinge sits on its smooth (flat) branch,
    # and random values keep |.| away from zero
    r_s = _rand(1, 3, 4, 4, seed=31, lo=0.0, hi=0.3)
    r_sf = _rand(1, 3, 4, 4, seed=32, lo=0.0, hi=0.3)
    l_sf = _rand(1, 3, 4, 4, seed=33, lo=0.5, hi=1.0)
    _check_grads(lambda a, b, c: loss_reflectance(a, b, c, parts=True)[0], [r_s, r_sf, l_sf])
    # hinge active everywhere: R above L
    r_hi = _rand(1, 3, 4, 4, seed=34, lo=0.7, hi=1.0)
    l_lo = _rand(1, 3, 4, 4, seed=35, lo=0.0, hi=0.4)
    _check_grads(loss_reflectance, [r_hi, r_hi.flip(-1), l_lo])


# ---------------------------------------------------------------- properties


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_losses_nonnegative(seed):
    ts = [_rand(2, 3, 4, 4, seed=seed + k, lo=0, hi=1) for k in range(6)]
    assert loss_fidelity(*ts) >= 0
    assert loss_illumination(*ts) >= 0
    assert loss_reflectance(*ts[:3]) >= 0


def test_batch_order_invariance():
    ts = [_rand(6, 3, 8, 8, seed=s) for s in range(6)]
    perm = torch.randperm(6, generator=torch.Generator().manual_seed(3))
    shuffled = [t[perm] for t in ts]
    for fn, n in ((loss_fidelity, 6), (loss_illumination, 6), (loss_reflectance, 3)):
        a = fn(*ts[:n]).item()
        b = fn(*shuffled[:n]).item()
        # reduction order changes with the permutation: equal up to float64 rounding
        assert a == pytest.approx(b, abs=1e-12)


def test_batch_loss_is_mean_of_sample_losses():
    ts = [_rand(4, 3, 8, 8, seed=s + 50) for s in range(6)]
    whole = loss_fidelity(*ts).item()
    parts = [loss_fidelity(*[t[i : i + 1] for t in ts]).item() for i in range(4)]
    assert whole == pytest.approx(np.mean(parts), abs=1e-12)


def test_decomposition_losses_bundle():
    torch.manual_seed(0)
    pair = (_rand(1, 3, 8, 8, seed=1), _rand(1, 3, 8, 8, seed=2))
    free = (_rand(1, 3, 8, 8, seed=3), _rand(1, 3, 8, 8, seed=4))
    i_s, i_sf = _rand(1, 3, 8, 8, seed=5), _rand(1, 3, 8, 8, seed=6)
    out = decomposition_losses(pair, free, i_s, i_sf)
    assert out.total.item() == pytest.approx((out.fidelity + out.illumination + 0.1 * out.reflectance).item())

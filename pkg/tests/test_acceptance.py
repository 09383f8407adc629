"""Acceptance gate: one PASS/FAIL line per criterion (see the terminal summary)."""
import time

import numpy as np
import pytest
import torch

from shadowrecast.config import apply_variant
from shadowrecast.decomposition import loss_fidelity, loss_illumination, loss_reflectance
from shadowrecast.diffusion import (
    LLC_VARIANTS,
    LLCConfig,
    UNetConfig,
    NoiseUNet,
    build_condition,
    denoise_loss,
    forward_diffuse,
    masked_mse,
    sample_llc,
    schedule_preset,
)
from shadowrecast.igtr import IGTRBlock, co_attention, partition_regions, resample
from shadowrecast.imaging import synth_dataset
from shadowrecast.metrics import ber_per, psnr, region_mse, rmse_lab, ssim
from shadowrecast.pipeline import ShadowRemover
from shadowrecast.restoration import TABLE6_VARIANTS, BilateralNet, bilateral_variant, loss_restoration
from shadowrecast.training import load_bilateral, load_checkpoint, load_noise_net, train_decomposition, train_diffusion, train_restore

from conftest import autograd_grad, central_fd, rel_err
from test_igtr import _dense_attention


def _r(seed, lo=0.05, hi=0.95, shape=(1, 3, 4, 4)):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=torch.float64)


def test_criterion_1_loss_gradients(criterion):
    with criterion(1, "loss gradients vs central differences") as c:
        t0 = time.perf_counter()
        mask = (_r(99, 0, 1, (1, 1, 4, 4)) > 0.4).double()
        suites = {
            "fidelity": (loss_fidelity, [_r(s) for s in range(6)]),
            "illumination": (loss_illumination, [_r(s + 10) for s in range(6)]),
            "reflectance": (loss_reflectance, [_r(20, 0.0, 0.3), _r(21, 0.0, 0.3), _r(22, 0.5, 1.0)]),
            "reflectance-hinge": (loss_reflectance, [_r(23, 0.7, 1.0), _r(24, 0.7, 1.0), _r(25, 0.0, 0.4)]),
            "masked-denoise": (lambda p, e: masked_mse(p, e, mask), [_r(30, -2, 2), _r(31, -2, 2)]),
            "restoration-pixel": (lambda p, t: loss_restoration(p, t, None), [_r(40), _r(41)]),
        }
        worst = 0.0
        for name, (fn, inputs) in suites.items():
            for k in range(len(inputs)):
                err = rel_err(autograd_grad(fn, inputs, k), central_fd(fn, inputs, k))
                worst = max(worst, err)
                assert err < 1e-4, f"{name} input {k}: rel err {err:.2e}"
        elapsed = time.perf_counter() - t0
        c.note(f"max rel err {worst:.1e}, {elapsed:.1f}s")
        assert elapsed < 60


def test_criterion_2_diffusion_statistics(criterion):
    with criterion(2, "schedule oracle and forward-process statistics") as c:
        s = schedule_preset("train-1000")
        assert (s.T, s.beta_start, s.beta_end) == (1000, 1e-4, 0.02)
        prod, worst = 1.0, 0.0
        for t in range(1, 1001):
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999)
            worst = max(worst, abs(prod - s.alpha_bar[t - 1]))
        assert worst < 1e-12
        assert np.all(np.diff(s.alpha_bar) < 0)
        g = torch.Generator().manual_seed(0)
        x0 = torch.tensor([0.9, 0.4, 0.1], dtype=torch.float64).view(1, 3, 1, 1)
        n = 10_000
        for t in (1, 250, 1000):
            eps = torch.randn(n, 3, 1, 1, generator=g, dtype=torch.float64)
            xt = forward_diffuse(x0.expand(n, 3, 1, 1), t, eps, s).view(n, 3).numpy()
            ab = s.alpha_bar[t - 1]
            sd = np.sqrt(1 - ab)
            assert np.all(np.abs(xt.mean(0) - np.sqrt(ab) * x0.view(3).numpy()) < 3 * sd / np.sqrt(n))
            assert np.all(np.abs(xt.std(0, ddof=1) - sd) < 3 * sd / np.sqrt(2 * (n - 1)))
        c.note(f"max |abar - oracle| {worst:.1e}")


def test_criterion_3_locality(criterion):
    with criterion(3, "condition identities, masked gradient, sampler locality") as c:
        g = torch.Generator().manual_seed(1)
        x_t, x0 = torch.randn(2, 3, 16, 16, generator=g), torch.rand(2, 3, 16, 16, generator=g)
        assert torch.equal(build_condition(x_t, x0, torch.zeros(2, 1, 16, 16)), x0)
        assert torch.equal(build_condition(x_t, x0, torch.ones(2, 1, 16, 16)), x_t)
        mask = (torch.rand(2, 1, 16, 16, generator=g) > 0.6).float()
        out = torch.randn(2, 3, 16, 16, generator=g, requires_grad=True)

        class Pass(torch.nn.Module):
            def forward(self, x, t):
                return out

        loss = denoise_loss(Pass(), x0, torch.rand(2, 3, 16, 16, generator=g), mask, torch.tensor([5, 900]),
                            torch.randn(2, 3, 16, 16, generator=g))
        (grad,) = torch.autograd.grad(loss, out)
        assert torch.all(grad[mask.expand_as(grad) == 0] == 0)
        torch.manual_seed(0)
        net = NoiseUNet(6, UNetConfig(8, (1, 2), 16)).eval()
        torch.nn.init.normal_(net.out.weight, std=0.5)
        l_s = torch.rand(2, 3, 16, 16, generator=g)
        hat = sample_llc(net, l_s, mask, LLCConfig(), torch.Generator().manual_seed(3))
        outside = mask.expand_as(hat) == 0
        assert torch.equal(hat[outside], l_s[outside])
        assert torch.equal(sample_llc(net, l_s, torch.zeros_like(mask), LLCConfig(), torch.Generator().manual_seed(3)), l_s)
        c.note(f"{int(outside.sum())} non-shadow values preserved bit-exactly")


def test_criterion_4_attention(criterion):
    with criterion(4, "co-attention oracle, row sums, residual identity") as c:
        g = torch.Generator().manual_seed(4)
        ch = 8
        q = torch.randn(6, 4, ch, generator=g, dtype=torch.float64)
        kv = torch.randn(6, 4, ch, generator=g, dtype=torch.float64)
        params = [torch.randn(*s, generator=g, dtype=torch.float64) for s in ((4, ch), (4, ch), (4, ch), (4,), (4,), (4,))]
        out, attn = co_attention(q, kv, *params, return_weights=True)
        ref, ref_w = _dense_attention(*(t.numpy() for t in (q, kv, *params)))
        err = float(np.max(np.abs(out.numpy() - ref)))
        assert err < 1e-6 and np.max(np.abs(attn.numpy() - ref_w)) < 1e-6
        assert torch.max(torch.abs(attn.sum(-1) - 1)) < 1e-6
        for variant in ("full", "igtr-l", "igtr-g", "sa"):
            torch.manual_seed(0)
            blk = IGTRBlock(ch, 4, variant)
            for name in ("local", "nonlocal_"):
                if hasattr(blk, name):
                    torch.nn.init.zeros_(getattr(blk, name).v.weight)
                    torch.nn.init.zeros_(getattr(blk, name).v.bias)
            f_r = torch.randn(2, ch, 8, 8, generator=g)
            assert torch.equal(blk(f_r, torch.randn(2, ch, 8, 8, generator=g)), f_r), variant
        c.note(f"max oracle err {err:.1e}")


def test_criterion_5_resampling(criterion):
    with criterion(5, "offset resampling") as c:
        g = torch.Generator().manual_seed(5)
        f = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
        assert torch.equal(resample(f, torch.zeros(2, 2, 8, 8, dtype=torch.float64)), f)
        off = torch.randint(-2, 3, (2, 2, 8, 8), generator=g).double()
        ref = torch.empty_like(f)
        for b in range(2):
            for y in range(8):
                for x in range(8):
                    ref[b, :, y, x] = f[b, :, min(max(y + int(off[b, 1, y, x]), 0), 7), min(max(x + int(off[b, 0, y, x]), 0), 7)]
        assert torch.equal(resample(f, off), ref)
        ys, xs = torch.meshgrid(torch.arange(8.0, dtype=torch.float64), torch.arange(8.0, dtype=torch.float64), indexing="ij")
        ramp = (0.7 * xs - 0.3 * ys + 2.0)[None, None]
        worst = 0.0
        for dx, dy in ((0.5, 0.0), (0.0, 0.5), (0.5, 0.5), (-0.5, 0.25)):
            o = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
            o[:, 0], o[:, 1] = dx, dy
            got = resample(ramp, o)[0, 0, 1:-1, 1:-1]
            want = (0.7 * (xs + dx) - 0.3 * (ys + dy) + 2.0)[1:-1, 1:-1]
            worst = max(worst, float((got - want).abs().max()))
        assert worst < 1e-6
        c.note(f"ramp midpoint err {worst:.1e}")


def _shadow_rmse(remover, samples):
    return float(np.mean([rmse_lab(remover(s.shadow, s.mask, seed=k).image, s.shadow_free, s.mask, "S") for k, s in enumerate(samples)]))


@pytest.mark.slow
def test_criterion_6_desk_end_to_end(criterion, desk_run):
    with criterion(6, "desk end-to-end beats input and multiply baseline") as c:
        t0 = time.perf_counter()
        run = desk_run
        full = ShadowRemover.from_checkpoints(run.decomp.checkpoint, run.diff.checkpoint, run.restore.checkpoint)
        multiply = full.with_restoration(BilateralNet(bilateral_variant("multiply")))
        held = run.held_out
        r_in = float(np.mean([rmse_lab(s.shadow, s.shadow_free, s.mask, "S") for s in held]))
        r_full = _shadow_rmse(full, held)
        r_mul = _shadow_rmse(multiply, held)
        total = run.train_seconds + time.perf_counter() - t0
        c.note(f"RMSE_S input {r_in:.2f}, full {r_full:.2f}, multiply {r_mul:.2f}; {total / 60:.1f} min")
        assert r_full < r_in
        assert r_full < r_mul
        limit = 30 * 60 if torch.cuda.is_available() else 4 * 3600
        assert total < limit


@pytest.mark.slow
def test_criterion_7_ablation_wiring(criterion, desk_run, tmp_path):
    with criterion(7, "ablation variants construct and smoke-train 200 steps") as c:
        run = desk_run
        data = run.train[:8]
        base = run.cfg.replace(iters_diffusion=200, iters_restore=200, checkpoint_every=0)
        names = []
        for name in sorted(LLC_VARIANTS):
            cfg = apply_variant(base, name)
            res = train_diffusion(cfg, data, run.decomp.checkpoint, tmp_path / f"llc_{name}.pt")
            assert res.steps == 200 and np.all(np.isfinite(res.history)), name
            net, ncfg = load_noise_net(res.checkpoint)
            s = data[0]
            l_s = torch.rand(1, 3, 64, 64)
            out = sample_llc(net, l_s, torch.from_numpy(s.mask)[None, None], ncfg.llc, torch.Generator().manual_seed(0))
            assert out.shape == (1, 3, 64, 64) and torch.all(torch.isfinite(out))
            names.append(name)
        for name in sorted(TABLE6_VARIANTS):
            cfg = apply_variant(base, name)
            res = train_restore(cfg, data, run.decomp.checkpoint, run.diff.checkpoint, tmp_path / f"fuse_{name}.pt")
            assert res.steps == 200 and np.all(np.isfinite(res.history)), name
            net, _ = load_bilateral(res.checkpoint)
            assert net.cfg.variant == name
            x = torch.rand(2, 3, 64, 64)
            assert net(x, x, x, torch.ones(2, 1, 64, 64)).shape == (2, 3, 64, 64)
            names.append(name)
        c.note(f"{len(names)} variants: {', '.join(names)}")


def test_criterion_8_metrics(criterion):
    with criterion(8, "metric identities") as c:
        rng = np.random.default_rng(8)
        x = rng.random((256, 256, 3))
        mask = np.zeros((256, 256))
        mask[40:150, 60:200] = 1
        assert rmse_lab(x, x, mask, "All") == 0.0
        assert psnr(np.full((256, 256, 3), 0.1), np.zeros((256, 256, 3))) == 20.0
        assert ssim(x, x) == 1.0
        assert tuple(ber_per(mask, mask))[:2] == (0.0, 0.0)
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        n_s = int(mask.sum())
        lhs = region_mse(y, x, mask, "All")
        rhs = (n_s * region_mse(y, x, mask, "S") + (mask.size - n_s) * region_mse(y, x, mask, "NS")) / mask.size
        assert lhs == pytest.approx(rhs, rel=1e-15, abs=0)
        c.note(f"partition |diff| {abs(lhs - rhs):.1e}")


@pytest.mark.slow
def test_criterion_9_determinism(criterion, desk_run, tmp_path):
    with criterion(9, "fixed-seed bit-identical training and inference") as c:
        run = desk_run
        cfg = run.cfg.replace(iters_decomp=100, iters_diffusion=100, iters_restore=100, checkpoint_every=0)
        data = run.train

        def stages(tag):
            a = train_decomposition(cfg, data, tmp_path / f"{tag}_d.pt")
            b = train_diffusion(cfg, data, a.checkpoint, tmp_path / f"{tag}_n.pt")
            r = train_restore(cfg, data, a.checkpoint, b.checkpoint, tmp_path / f"{tag}_r.pt")
            return a, b, r

        for x, y in zip(stages("one"), stages("two")):
            cx, cy = load_checkpoint(x.checkpoint), load_checkpoint(y.checkpoint)
            assert cx["history"] == cy["history"]
            for net in cx["models"]:
                for k, v in cx["models"][net].items():
                    assert torch.equal(v, cy["models"][net][k]), (x.checkpoint.name, net, k)
        remover = ShadowRemover.from_checkpoints(run.decomp.checkpoint, run.diff.checkpoint, run.restore.checkpoint)
        again = ShadowRemover.from_checkpoints(run.decomp.checkpoint, run.diff.checkpoint, run.restore.checkpoint)
        for k, s in enumerate(run.held_out[:3]):
            assert remover(s.shadow, s.mask, seed=k).image.tobytes() == again(s.shadow, s.mask, seed=k).image.tobytes()
        c.note("3 stages x 100 steps rerun, 3 inferences repeated")

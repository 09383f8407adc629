import numpy as np
import pytest
import torch


def central_fd(fn, inputs, wrt, h=1e-6):
    """Central finite-difference gradient of scalar ``fn(*inputs)`` w.r.t. ``inputs[wrt]``."""
    x = inputs[wrt].detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        args = list(inputs)
        args[wrt] = x
        fp = float(fn(*args))
        flat[i] = orig - h
        fm = float(fn(*args))
        flat[i] = orig
        grad.view(-1)[i] = (fp - fm) / (2 * h)
    return grad


def autograd_grad(fn, inputs, wrt):
    args = [t.detach().clone().requires_grad_(k == wrt) for k, t in enumerate(inputs)]
    out = fn(*args)
    (g,) = torch.autograd.grad(out, args[wrt])
    return g


def rel_err(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(12345)


# ---------------------------------------------------------------- acceptance support

_CRITERIA: dict[int, str] = {}


class _Criterion:
    def __init__(self, number, title, capsys):
        self.number, self.title, self.capsys = number, title, capsys
        self.notes = []

    def note(self, msg):
        self.notes.append(str(msg))

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.notes)
        if exc is not None:
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {exc}".splitlines()[0]
        line = f"criterion {self.number} [{self.title}]: {status}" + (f" ({detail})" if detail else "")
        _CRITERIA[self.number] = line
        with self.capsys.disabled():
            print("\n" + line)
        return False


@pytest.fixture
def criterion(capsys):
    return lambda number, title: _Criterion(number, title, capsys)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full desk-preset pipeline on 32 synthetic training samples, trained once per session."""
    import time
    from types import SimpleNamespace

    from shadowrecast.config import preset
    from shadowrecast.imaging import synth_dataset
    from shadowrecast.training import train_decomposition, train_diffusion, train_restore

    cfg = preset("desk")
    tc = cfg.train
    out = tmp_path_factory.mktemp("desk")
    train = synth_dataset(tc.n_samples, size=tc.resolution, seed=tc.seed)
    held_out = synth_dataset(8, size=tc.resolution, seed=tc.seed + 999)
    t0 = time.perf_counter()
    initial = train_decomposition(cfg, train, out / "decomp_init.pt", max_steps=0)
    decomp = train_decomposition(cfg, train, out / "decomp.pt")
    diff = train_diffusion(cfg, train, decomp.checkpoint, out / "diffusion.pt")
    restore = train_restore(cfg, train, decomp.checkpoint, diff.checkpoint, out / "restore.pt")
    return SimpleNamespace(
        cfg=cfg, out=out, train=train, held_out=held_out, initial=initial, decomp=decomp, diff=diff,
        restore=restore, train_seconds=time.perf_counter() - t0,
    )

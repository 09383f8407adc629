"""Training loops for the three stages.

Each stage is bit-reproducible on one device given ``cfg.train.seed``: network
initialisation uses the global torch seed, batch selection and augmentation a
numpy generator, and diffusion noise a dedicated torch generator. All three
states travel in the checkpoint, so an interrupted run resumes exactly.
"""
from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .config import RunConfig
from .decomposition import DecompositionNet, decompose, decomposition_losses
from .diffusion import NoiseUNet, build_noise_net, denoise_loss, sample_llc
from .imaging import ShadowSample, apply_geometry, random_geometry, resize_image, resize_mask
from .restoration import BilateralNet, build_extractor, loss_restoration

__all__ = [
    "TrainingDiverged",
    "StageResult",
    "lr_factor",
    "train_decomposition",
    "train_diffusion",
    "train_restore",
    "load_decomposition",
    "load_noise_net",
    "load_bilateral",
    "to_tensor",
    "to_image",
    "prepare_samples",
]

log = logging.getLogger(__name__)

STAGE_DECOMP = "decomposition"
STAGE_DIFFUSION = "diffusion"
STAGE_RESTORE = "restoration"


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class StageResult:
    checkpoint: Path
    manifest: Path
    history: list[float]
    steps: int
    models: dict = field(default_factory=dict, repr=False)

    @property
    def initial_loss(self) -> float:
        return self.history[0]

    @property
    def final_loss(self) -> float:
        return self.history[-1]


# ---------------------------------------------------------------- tensors

def to_tensor(arr: np.ndarray) -> torch.Tensor:
    """``H x W x C`` (or ``H x W``) array to a ``1 x C x H x W`` float32 tensor."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 2:
        a = a[..., None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]


def to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().float().numpy()[0].transpose(1, 2, 0)


def prepare_samples(samples: list[ShadowSample], resolution: int) -> list[ShadowSample]:
    size = (resolution, resolution)
    return [
        ShadowSample(resize_image(s.shadow, size), resize_image(s.shadow_free, size), resize_mask(s.mask, size), s.id)
        for s in samples
    ]


# ---------------------------------------------------------------- schedule

def lr_factor(step: int, total: int, warmup: int) -> float:
    """Linear warmup to 1 at ``warmup``, then cosine decay towards 0 at ``total``."""
    if step < warmup:
        return (step + 1) / (warmup + 1)
    span = max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(step - warmup, span) / span))


@contextmanager
def _deterministic():
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


class _Batcher:
    """Seeded random batches with one geometric augmentation per sample across all fields."""

    def __init__(self, fields: dict[str, list[np.ndarray]], binary: set[str], batch_size: int, resolution: int, seed, augment=True):
        self.fields = fields
        self.binary = binary
        self.n = len(next(iter(fields.values())))
        self.batch_size = batch_size
        self.resolution = resolution
        self.augment = augment
        self.rng = np.random.default_rng(seed)

    def __next__(self) -> dict[str, torch.Tensor]:
        idx = self.rng.integers(0, self.n, self.batch_size)
        out = {k: [] for k in self.fields}
        for i in idx:
            h, w = self.fields[next(iter(self.fields))][i].shape[:2]
            g = random_geometry(h, w, self.rng, flips=self.augment, min_crop_frac=0.75 if self.augment else 1.0)
            for k, arrs in self.fields.items():
                out[k].append(to_tensor(apply_geometry(arrs[i], g, self.resolution, binary=k in self.binary)))
        return {k: torch.cat(v) for k, v in out.items()}

    def state(self):
        return self.rng.bit_generator.state

    def set_state(self, s):
        self.rng.bit_generator.state = s


def _optimizer(params, cfg: RunConfig, total: int):
    tc = cfg.train
    opt = torch.optim.Adam(params, lr=tc.learning_rate, betas=(tc.adam_beta1, tc.adam_beta2))
    warm = tc.warmup_steps(total)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, total, warm))
    return opt, sched


def _write_manifest(ckpt: Path, stage: str, cfg: RunConfig, history, steps, upstream: dict[str, Path]) -> Path:
    manifest = ckpt.with_name(ckpt.name + ".manifest.json")
    entries = {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in upstream.items()}
    entries[stage] = {"path": str(ckpt), "sha256": file_sha256(ckpt)}
    doc = {
        "stage": stage,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.to_dict().items()},
        "seed": cfg.train.seed,
        "steps": steps,
        "checkpoints": entries,
        "history": history,
    }
    manifest.write_text(json.dumps(doc, indent=1))
    return manifest


class _Loop:
    """Shared step bookkeeping: checkpointing, resume, divergence abort."""

    def __init__(self, stage, cfg, out, models: dict, total, batcher, noise_gen=None, extra=None):
        self.stage, self.cfg, self.out = stage, cfg, Path(out)
        self.models = models
        self.total = total
        self.batcher = batcher
        self.noise_gen = noise_gen
        self.extra = extra or {}
        params = [p for m in models.values() for p in m.parameters() if p.requires_grad]
        self.opt, self.sched = _optimizer(params, cfg, total) if params else (None, None)
        self.step = 0
        self.history: list[float] = []

    def state(self) -> dict:
        return {
            "models": {k: m.state_dict() for k, m in self.models.items()},
            "optimizer": self.opt.state_dict() if self.opt else None,
            "scheduler": self.sched.state_dict() if self.sched else None,
            "step": self.step,
            "total": self.total,
            "history": list(self.history),
            "rng": {
                "torch": torch.get_rng_state(),
                "data": self.batcher.state(),
                "noise": self.noise_gen.get_state() if self.noise_gen is not None else None,
            },
            **self.extra,
        }

    def save(self, path=None) -> Path:
        return save_checkpoint(path or self.out, self.stage, self.cfg.to_dict(), self.state())

    def resume(self, path):
        ck = load_checkpoint(path, self.stage)
        for k, m in self.models.items():
            m.load_state_dict(ck["models"][k])
        if self.opt:
            self.opt.load_state_dict(ck["optimizer"])
            self.sched.load_state_dict(ck["scheduler"])
        self.step = ck["step"]
        self.history = list(ck["history"])
        torch.set_rng_state(ck["rng"]["torch"])
        self.batcher.set_state(ck["rng"]["data"])
        if self.noise_gen is not None:
            self.noise_gen.set_state(ck["rng"]["noise"])
        log.info("resumed %s at step %d", self.stage, self.step)

    def run(self, loss_fn, max_steps=None, log_every=100):
        stop = self.total if max_steps is None else min(self.total, max_steps)
        for m in self.models.values():
            m.train()
        every = self.cfg.train.checkpoint_every
        while self.step < stop:
            loss = loss_fn(next(self.batcher))
            if not torch.isfinite(loss):
                path = self.save()
                raise TrainingDiverged(f"{self.stage}: non-finite loss at step {self.step}", path)
            if self.opt:
                self.opt.zero_grad(set_to_none=True)
                loss.backward()
                self.opt.step()
                self.sched.step()
            self.history.append(float(loss.detach()))
            self.step += 1
            if log_every and self.step % log_every == 0:
                log.info("%s step %d/%d loss %.5f", self.stage, self.step, self.total, self.history[-1])
            if every and self.step % every == 0 and self.step < stop:
                self.save()
        for m in self.models.values():
            m.eval()
        return self.save()


def _seed(cfg: RunConfig, stage_id: int):
    torch.manual_seed(cfg.train.seed * 1000 + stage_id)
    return np.random.SeedSequence([cfg.train.seed, stage_id])


# ---------------------------------------------------------------- stage 1

def train_decomposition(cfg: RunConfig, dataset: list[ShadowSample], out, resume=None, max_steps=None) -> StageResult:
    """Jointly optimise the shadow decomposition network and its shadow-free twin."""
    if not dataset:
        raise ValueError("dataset is empty")
    tc = cfg.train
    with _deterministic():
        seq = _seed(cfg, 1)
        shadow_net = DecompositionNet(cfg.decomp_net)
        twin = DecompositionNet(cfg.decomp_net)
        samples = prepare_samples(dataset, tc.resolution)
        batcher = _Batcher(
            {"i_s": [s.shadow for s in samples], "i_sf": [s.shadow_free for s in samples], "m": [s.mask for s in samples]},
            {"m"},
            tc.batch_size,
            tc.resolution,
            seq,
        )
        loop = _Loop(STAGE_DECOMP, cfg, out, {"shadow": shadow_net, "twin": twin}, tc.iters_decomp, batcher)
        if resume:
            loop.resume(resume)

        def step(b):
            return decomposition_losses(shadow_net(b["i_s"], b["m"]), decompose(twin, b["i_sf"]), b["i_s"], b["i_sf"]).total

        ckpt = loop.run(step, max_steps)
    manifest = _write_manifest(ckpt, STAGE_DECOMP, cfg, loop.history, loop.step, {})
    return StageResult(ckpt, manifest, loop.history, loop.step, {"shadow": shadow_net, "twin": twin})


def load_decomposition(path) -> tuple[DecompositionNet, DecompositionNet, RunConfig]:
    ck = load_checkpoint(path, STAGE_DECOMP)
    cfg = RunConfig.from_dict(ck["config"])
    nets = []
    for key in ("shadow", "twin"):
        net = DecompositionNet(cfg.decomp_net)
        net.load_state_dict(ck["models"][key])
        net.eval().requires_grad_(False)
        nets.append(net)
    return nets[0], nets[1], cfg


@torch.no_grad()
def _decompose_all(shadow_net, twin, samples, chunk=8):
    r_s, l_s, l_sf = [], [], []
    for i in range(0, len(samples), chunk):
        part = samples[i : i + chunk]
        i_s = torch.cat([to_tensor(s.shadow) for s in part])
        i_sf = torch.cat([to_tensor(s.shadow_free) for s in part])
        m = torch.cat([to_tensor(s.mask) for s in part])
        a = shadow_net(i_s, m)
        b = decompose(twin, i_sf)
        for j in range(len(part)):
            r_s.append(to_image(a.reflectance[j : j + 1]))
            l_s.append(to_image(a.illumination[j : j + 1]))
            l_sf.append(to_image(b.illumination[j : j + 1]))
    return r_s, l_s, l_sf


# ---------------------------------------------------------------- stage 2

def train_diffusion(cfg: RunConfig, dataset: list[ShadowSample], decomp_ckpt, out, resume=None, max_steps=None) -> StageResult:
    """Train the noise network with the shadow-free illumination layer as the clean target."""
    if not dataset:
        raise ValueError("dataset is empty")
    tc = cfg.train
    shadow_net, twin, _ = load_decomposition(decomp_ckpt)
    samples = prepare_samples(dataset, tc.resolution)
    with _deterministic():
        _, l_s, l_sf = _decompose_all(shadow_net, twin, samples)
        seq = _seed(cfg, 2)
        net = build_noise_net(cfg.llc, cfg.unet)
        gen = torch.Generator().manual_seed(int(seq.generate_state(1)[0]))
        batcher = _Batcher({"l_s": l_s, "l_sf": l_sf, "m": [s.mask for s in samples]}, {"m"}, tc.batch_size, tc.resolution, seq)
        loop = _Loop(STAGE_DIFFUSION, cfg, out, {"noise": net}, tc.iters_diffusion, batcher, noise_gen=gen)
        if resume:
            loop.resume(resume)
        sched = cfg.llc.train

        def step(b):
            n = b["l_s"].shape[0]
            t = torch.randint(1, sched.T + 1, (n,), generator=gen)
            eps = torch.randn(b["l_sf"].shape, generator=gen)
            return denoise_loss(net, b["l_sf"], b["l_s"], b["m"], t, eps, cfg.llc, sched)

        ckpt = loop.run(step, max_steps)
    manifest = _write_manifest(ckpt, STAGE_DIFFUSION, cfg, loop.history, loop.step, {STAGE_DECOMP: Path(decomp_ckpt)})
    return StageResult(ckpt, manifest, loop.history, loop.step, {"noise": net})


def load_noise_net(path) -> tuple[NoiseUNet, RunConfig]:
    ck = load_checkpoint(path, STAGE_DIFFUSION)
    cfg = RunConfig.from_dict(ck["config"])
    net = build_noise_net(cfg.llc, cfg.unet)
    net.load_state_dict(ck["models"]["noise"])
    net.eval().requires_grad_(False)
    return net, cfg


@torch.no_grad()
def corrected_illumination(noise_net, llc_cfg, l_s: np.ndarray, mask: np.ndarray, seed: int) -> np.ndarray:
    gen = torch.Generator().manual_seed(seed)
    return to_image(sample_llc(noise_net, to_tensor(l_s), to_tensor(mask), llc_cfg, gen))


# ---------------------------------------------------------------- stage 3

def train_restore(
    cfg: RunConfig, dataset: list[ShadowSample], decomp_ckpt, diff_ckpt, out, resume=None, max_steps=None
) -> StageResult:
    """Train the bilateral correction network on frozen upstream outputs.

    Reflectance and corrected illumination are computed once per training
    sample, then augmented jointly with the image triplet.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    tc = cfg.train
    shadow_net, twin, _ = load_decomposition(decomp_ckpt)
    noise_net, diff_cfg = load_noise_net(diff_ckpt)
    samples = prepare_samples(dataset, tc.resolution)
    with _deterministic():
        r_s, l_s, _ = _decompose_all(shadow_net, twin, samples)
        seq = _seed(cfg, 3)
        sample_seeds = seq.spawn(1)[0].generate_state(len(samples))
        l_hat = [
            corrected_illumination(noise_net, diff_cfg.llc, l, s.mask, int(sd)) for l, s, sd in zip(l_s, samples, sample_seeds)
        ]
        net = BilateralNet(cfg.bilateral)
        extractor = build_extractor(tc.extractor)
        batcher = _Batcher(
            {
                "i_s": [s.shadow for s in samples],
                "i_sf": [s.shadow_free for s in samples],
                "m": [s.mask for s in samples],
                "r_s": r_s,
                "l_hat": l_hat,
            },
            {"m"},
            tc.batch_size,
            tc.resolution,
            seq,
        )
        loop = _Loop(STAGE_RESTORE, cfg, out, {"bilateral": net}, tc.iters_restore, batcher)
        if resume:
            loop.resume(resume)

        def step(b):
            pred = net(b["r_s"], b["l_hat"], b["i_s"], b["m"])
            return loss_restoration(pred, b["i_sf"], extractor)

        ckpt = loop.run(step, max_steps)
    upstream = {STAGE_DECOMP: Path(decomp_ckpt), STAGE_DIFFUSION: Path(diff_ckpt)}
    manifest = _write_manifest(ckpt, STAGE_RESTORE, cfg, loop.history, loop.step, upstream)
    return StageResult(ckpt, manifest, loop.history, loop.step, {"bilateral": net})


def load_bilateral(path) -> tuple[BilateralNet, RunConfig]:
    ck = load_checkpoint(path, STAGE_RESTORE)
    cfg = RunConfig.from_dict(ck["config"])
    net = BilateralNet(cfg.bilateral)
    net.load_state_dict(ck["models"]["bilateral"])
    net.eval().requires_grad_(False)
    return net, cfg

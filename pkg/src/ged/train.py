"""Training loops for the noise predictor, the ensemble post-processor and the
direct-regression baseline.

Data sources only need ``len(data)`` and ``data.arrays(indices)`` returning
channel-last ``(conditioning, targets)`` batches; both
:class:`ged.data.SequenceDataset` and :class:`ged.data.ArrayDataset` qualify.
"""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from .data import ArrayDataset
from .ensemble import EnsembleConfig, member_seed, sample_ensembles, stack_members
from .errors import ConfigError, TrainingError
from .schedule import NoiseSchedule, forward_diffuse
from .unet import UNet, UNetSpec, build_unet

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "diffusion_batch",
    "train_diffusion",
    "finetune",
    "train_postprocess",
    "train_baseline_unet",
    "noise_mae",
    "make_optimizer",
    "fit_regression",
    "denoiser_spec",
    "postprocess_spec",
    "baseline_spec",
]


@dataclass
class TrainConfig:
    """Optimiser and schedule settings; defaults are the full-scale values."""

    batch_size: int = 2
    epochs: int = 40
    steps_per_epoch: int = 1000
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    finetune_epochs: int = 10
    finetune_learning_rate: float = 1e-5
    finetune_weight_decay: float = 1e-6
    grad_clip: float = 1.0
    seed: int = 0
    # post-processor only: >0 pre-generates ensembles for this many training
    # sequences and reuses them; 0 samples fresh ensembles for every batch
    postprocess_pool: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("learning_rate", "weight_decay", "finetune_learning_rate", "finetune_weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.epochs < 0 or self.finetune_epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("epoch counts must be nonnegative, steps_per_epoch positive")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def from_mapping(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)

    def extend(self, other: "TrainHistory") -> "TrainHistory":
        return TrainHistory(
            self.losses + other.losses,
            self.phases + other.phases,
            self.wall_clock + other.wall_clock,
            {**self.config, **other.config},
            self.checkpoints + other.checkpoints,
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "phase", "loss"])
            for i, (phase, loss) in enumerate(zip(self.phases, self.losses)):
                w.writerow([i, phase, repr(float(loss))])


def denoiser_spec(cond_channels: int, image_size, widths=(64, 128, 256, 384), **kw) -> UNetSpec:
    kw.setdefault("noise_skip", True)
    return UNetSpec(input_channels=3 + cond_channels, output_channels=3,
                    widths=tuple(widths), image_size=tuple(image_size), **kw)


def postprocess_spec(n_members: int, image_size, widths=(64, 128, 256, 384), **kw) -> UNetSpec:
    return UNetSpec(input_channels=3 * n_members, output_channels=3, widths=tuple(widths),
                    image_size=tuple(image_size), embedding=None, mean_skip=True, **kw)


def baseline_spec(cond_channels: int, image_size, widths=(64, 128, 256, 384), **kw) -> UNetSpec:
    return UNetSpec(input_channels=cond_channels, output_channels=3, widths=tuple(widths),
                    image_size=tuple(image_size), embedding=None, **kw)


class _Streams:
    """Per-run random streams split from one root seed."""

    def __init__(self, seed: int, phase: str):
        tag = sum(ord(c) * 31**i for i, c in enumerate(phase)) % (2**31)
        root = np.random.SeedSequence([int(seed), tag])
        data_ss, torch_ss, member_ss = root.spawn(3)
        self.data = np.random.default_rng(data_ss)
        self.torch = torch.Generator().manual_seed(int(torch_ss.generate_state(1)[0]))
        self.members = np.random.default_rng(member_ss)


def _check_data(data) -> None:
    if len(data) == 0:
        raise TrainingError("data source is empty")


def _to_torch(a, dtype):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def diffusion_batch(cond, x0, t, eps, schedule: NoiseSchedule):
    """Noise the target frames only and stack them in front of the conditioning.

    All arguments are channel-last torch tensors; returns ``(stacked, variance)``
    with ``stacked`` in ``[B, C, H, W]`` ready for the network.
    """
    x_t = forward_diffuse(x0, eps, t, schedule)
    _, noise = schedule.rates(t)
    stacked = torch.cat([x_t, cond], dim=-1).permute(0, 3, 1, 2)
    return stacked, (noise * noise).to(x0.dtype)


def make_optimizer(model, lr, wd):
    """AdamW with decoupled weight decay."""
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=wd)


def _step(model, opt, loss, clip):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()!r}; aborting")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if clip and clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
    opt.step()


def _run_diffusion(model, data, steps, lr, wd, cfg: TrainConfig, schedule, phase):
    _check_data(data)
    dtype = next(model.parameters()).dtype
    streams = _Streams(cfg.seed, phase)
    opt = make_optimizer(model, lr, wd)
    history = TrainHistory(config={**asdict(cfg), "phase": phase})
    model.train()
    t0 = time.perf_counter()
    for step in range(steps):
        idx = streams.data.integers(0, len(data), cfg.batch_size)
        cond, x0 = data.arrays(idx)
        cond, x0 = _to_torch(cond, dtype), _to_torch(x0, dtype)
        t = torch.rand(cfg.batch_size, generator=streams.torch, dtype=torch.float64)
        eps = torch.randn(x0.shape, generator=streams.torch, dtype=torch.float64).to(dtype)
        stacked, variance = diffusion_batch(cond, x0, t, eps, schedule)
        pred = model(stacked, variance).permute(0, 2, 3, 1)
        loss = torch.mean(torch.abs(eps - pred))
        _step(model, opt, loss, cfg.grad_clip)
        history.losses.append(loss.item())
        history.phases.append(phase)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            recent = np.mean(history.losses[-cfg.log_every:])
            log.info("%s step %d/%d noise MAE %.4f", phase, step + 1, steps, recent)
    history.wall_clock = time.perf_counter() - t0
    return model, history


def train_diffusion(data, cfg: TrainConfig = TrainConfig(), spec: UNetSpec | None = None,
                    schedule: NoiseSchedule = NoiseSchedule(), model: UNet | None = None):
    """Train the noise predictor with a mean-absolute-error noise loss.

    Every step draws ``cfg.batch_size`` random sequences, one diffusion time
    ``t ~ U(0, 1)`` and i.i.d. Gaussian noise per item, noises the targets and
    regresses the noise from the noisy targets plus clean conditioning.
    Returns ``(model, history)``; ``model`` is updated in place if given.
    """
    if model is None:
        if spec is None:
            cond, x0 = data.arrays([0]) if len(data) else (None, None)
            if cond is None:
                raise TrainingError("data source is empty")
            spec = denoiser_spec(cond.shape[-1], cond.shape[1:3])
        model = build_unet(spec, cfg.seed)
    return _run_diffusion(model, data, cfg.total_steps, cfg.learning_rate, cfg.weight_decay,
                          cfg, schedule, "train")


def finetune(model: UNet, data, cfg: TrainConfig = TrainConfig(),
             schedule: NoiseSchedule = NoiseSchedule()):
    """Continue training a copy of ``model`` at the reduced fine-tuning rates."""
    model = copy.deepcopy(model)
    steps = cfg.finetune_epochs * cfg.steps_per_epoch
    return _run_diffusion(model, data, steps, cfg.finetune_learning_rate,
                          cfg.finetune_weight_decay, cfg, schedule, "finetune")


@torch.no_grad()
def noise_mae(model: UNet, data, schedule: NoiseSchedule = NoiseSchedule(), n_times: int = 8,
              seed: int = 1234, indices=None, batch: int = 32) -> float:
    """Noise MAE on fixed noise draws at ``n_times`` evenly spaced times.

    Deterministic given ``seed``, so values from different checkpoints are
    directly comparable.
    """
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    idx = np.arange(len(data)) if indices is None else np.asarray(indices)
    gen = torch.Generator().manual_seed(seed)
    times = (np.arange(n_times) + 0.5) / n_times
    total, count = 0.0, 0
    for start in range(0, idx.size, batch):
        cond, x0 = data.arrays(idx[start : start + batch])
        cond, x0 = _to_torch(cond, dtype), _to_torch(x0, dtype)
        for tv in times:
            t = torch.full((x0.shape[0],), float(tv), dtype=torch.float64)
            eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64).to(dtype)
            stacked, variance = diffusion_batch(cond, x0, t, eps, schedule)
            pred = model(stacked, variance).permute(0, 2, 3, 1)
            total += float(torch.sum(torch.abs(eps - pred)))
            count += eps.numel()
    if was_training:
        model.train()
    return total / count


def _regression_loop(model, data, inputs_fn, cfg: TrainConfig, phase: str):
    _check_data(data)
    dtype = next(model.parameters()).dtype
    streams = _Streams(cfg.seed, phase)
    opt = make_optimizer(model, cfg.learning_rate, cfg.weight_decay)
    history = TrainHistory(config={**asdict(cfg), "phase": phase})
    model.train()
    t0 = time.perf_counter()
    for step in range(cfg.total_steps):
        idx = streams.data.integers(0, len(data), cfg.batch_size)
        x, y = inputs_fn(idx, streams)
        x, y = _to_torch(x, dtype), _to_torch(y, dtype)
        pred = model(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        loss = F.mse_loss(pred, y)
        _step(model, opt, loss, cfg.grad_clip)
        history.losses.append(loss.item())
        history.phases.append(phase)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("%s step %d/%d MSE %.3e", phase, step + 1, cfg.total_steps,
                     np.mean(history.losses[-cfg.log_every:]))
    history.wall_clock = time.perf_counter() - t0
    return model, history


def fit_regression(model: UNet, inputs, targets, cfg: TrainConfig = TrainConfig(), phase: str = "regression"):
    """Train ``model`` to map fixed channel-last ``inputs`` to ``targets`` (MSE)."""
    data = ArrayDataset(inputs, targets)
    return _regression_loop(model, data, lambda idx, streams: data.arrays(idx), cfg, phase)


def train_postprocess(diffusion: UNet, data, cfg: TrainConfig = TrainConfig(),
                      ens: EnsembleConfig = EnsembleConfig(), spec: UNetSpec | None = None,
                      model: UNet | None = None):
    """Train a network that fuses ``ens.n_members`` diffusion forecasts.

    The diffusion model is frozen. Inputs are member forecasts stacked to
    ``3 * n_members`` channels (member-major); the loss is MSE against the
    true target frames.
    """
    _check_data(data)
    for p in diffusion.parameters():
        p.requires_grad_(False)
    if model is None:
        if spec is None:
            spec = postprocess_spec(ens.n_members, diffusion.spec.image_size,
                                    widths=diffusion.spec.widths,
                                    blocks_per_level=diffusion.spec.blocks_per_level)
        model = build_unet(spec, cfg.seed)
    if model.spec.input_channels != 3 * ens.n_members:
        raise ConfigError("post-processor channels do not match the ensemble size")

    def fresh(cond, streams):
        seeds = streams.members.integers(0, 2**62, size=(cond.shape[0], ens.n_members)).tolist()
        return stack_members(sample_ensembles(diffusion, cond, ens, seeds))

    if cfg.postprocess_pool > 0:
        pool_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        pool_idx = pool_rng.choice(len(data), size=min(cfg.postprocess_pool, len(data)), replace=False)
        pool_idx.sort()
        cond, targets = data.arrays(pool_idx)
        seeds = [[member_seed(cfg.seed + 1, int(i) * ens.n_members + m) for m in range(ens.n_members)]
                 for i in pool_idx]
        stacked = stack_members(sample_ensembles(diffusion, cond, ens, seeds))

        def inputs(idx, streams):
            pick = streams.data.integers(0, stacked.shape[0], len(idx))
            return stacked[pick], targets[pick]
    else:
        def inputs(idx, streams):
            cond, targets = data.arrays(idx)
            return fresh(cond, streams), targets

    return _regression_loop(model, data, inputs, cfg, "postprocess")


def train_baseline_unet(data, cfg: TrainConfig = TrainConfig(), spec: UNetSpec | None = None,
                        model: UNet | None = None):
    """Direct regression from the conditioning stack to the target frames."""
    _check_data(data)
    if model is None:
        if spec is None:
            cond, _ = data.arrays([0])
            spec = baseline_spec(cond.shape[-1], cond.shape[1:3])
        model = build_unet(spec, cfg.seed)

    def inputs(idx, streams):
        return data.arrays(idx)

    return _regression_loop(model, data, inputs, cfg, "baseline")

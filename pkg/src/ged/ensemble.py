"""Conditioned DDIM sampling, ensembles and their aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .schedule import NoiseSchedule, estimate_x0, ddim_step, sampling_times
from .unet import UNet

__all__ = [
    "EnsembleConfig",
    "MemberSet",
    "OracleDenoiser",
    "member_seed",
    "initial_noise",
    "run_sampler",
    "sample_one",
    "sample_ensemble",
    "sample_ensembles",
    "aggregate_mean",
    "aggregate_postprocess",
    "stack_members",
]


@dataclass(frozen=True)
class EnsembleConfig:
    n_members: int = 15
    n_steps: int = 15
    aggregation: str = "mean"
    seed: int = 0
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    max_batch: int = 64  # images per denoiser call
    # use batch-size-independent convolution kernels (oneDNN off) so batched
    # and one-at-a-time sampling agree bit for bit; about 2x slower on CPU
    batch_invariant: bool = True

    def __post_init__(self):
        if self.n_members < 1 or self.n_steps < 1:
            raise ConfigError("n_members and n_steps must be >= 1")
        if self.aggregation not in ("single", "mean", "postprocess"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")


@dataclass
class MemberSet:
    members: np.ndarray  # [n_members, H, W, 3]
    seeds: list
    conditioning: object = None

    def __len__(self) -> int:
        return self.members.shape[0]


def member_seed(seed: int, index: int) -> int:
    """Independent, reproducible 63-bit seed for ensemble member ``index``."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def initial_noise(seed: int, shape, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=gen, dtype=torch.float64).to(dtype)


class OracleDenoiser:
    """Perfect noise predictor for a known clean field ``x0``.

    Returns ``(x_t - sqrt(alpha_t) x0) / sqrt(1 - alpha_t)``; the sampler
    then reproduces ``x0`` exactly whatever the starting noise.
    """

    def __init__(self, x0, schedule: NoiseSchedule = NoiseSchedule()):
        self.x0 = torch.as_tensor(np.asarray(x0) if not isinstance(x0, torch.Tensor) else x0)
        self.schedule = schedule

    def __call__(self, x_t, cond, t):
        signal, noise = self.schedule.rates(t)
        shape = (-1,) + (1,) * (x_t.ndim - 1)
        signal = signal.reshape(shape).to(x_t.dtype)
        noise = noise.reshape(shape).to(x_t.dtype)
        return (x_t - signal * self.x0.to(x_t.dtype)) / noise


def _unet_eps(model: UNet, schedule: NoiseSchedule):
    def fn(x_t, cond, t):
        stacked = torch.cat([x_t, cond], dim=-1) if cond is not None else x_t
        if stacked.shape[-1] != model.spec.input_channels:
            raise ShapeError(
                f"noisy + conditioning = {stacked.shape[-1]} channels, "
                f"denoiser expects {model.spec.input_channels}"
            )
        _, noise = schedule.rates(t)
        variance = (noise * noise).to(stacked.dtype)
        out = model(stacked.permute(0, 3, 1, 2), variance)
        return out.permute(0, 2, 3, 1)

    return fn


def _dtype_of(denoiser) -> torch.dtype:
    if isinstance(denoiser, torch.nn.Module):
        return next(denoiser.parameters()).dtype
    if isinstance(denoiser, OracleDenoiser):
        return denoiser.x0.dtype
    return torch.float32


@torch.no_grad()
def run_sampler(denoiser, cond, x_T, n_steps: int, schedule: NoiseSchedule = NoiseSchedule(),
                batch_invariant: bool = False):
    """Deterministic DDIM reverse loop from ``x_T`` (``[B, H, W, 3]``).

    ``denoiser`` is a :class:`~ged.unet.UNet` or a callable
    ``(x_t, cond, t) -> eps_hat`` on channel-last batches. The denoiser is
    evaluated at ``n_steps`` times ``1, 1 - 1/n, ..., 1/n``; the clean-field
    estimate from the last evaluation is returned, unclipped.
    ``batch_invariant`` disables oneDNN convolutions for the loop, whose
    results otherwise depend slightly on the batch size.
    """
    if isinstance(denoiser, UNet):
        was_training = denoiser.training
        denoiser.eval()
        fn = _unet_eps(denoiser, schedule)
    else:
        was_training = False
        fn = denoiser
    x = x_T
    times = sampling_times(n_steps)
    batch = x.shape[0]
    x0_hat = None
    onednn = torch.backends.mkldnn.enabled
    torch.backends.mkldnn.enabled = onednn and not batch_invariant
    try:
        for k, t in enumerate(times):
            tt = torch.full((batch,), float(t), dtype=torch.float64)
            eps = fn(x, cond, tt)
            if k + 1 < n_steps:
                t_prev = torch.full((batch,), float(times[k + 1]), dtype=torch.float64)
                x = ddim_step(x, eps, tt, t_prev, schedule)
            else:
                x0_hat = estimate_x0(x, eps, tt, schedule)
    finally:
        torch.backends.mkldnn.enabled = onednn
    if was_training:
        denoiser.train()
    return x0_hat


def _as_cond_tensor(cond, dtype) -> torch.Tensor | None:
    if cond is None:
        return None
    if hasattr(cond, "to_array"):
        cond = cond.to_array()
    if isinstance(cond, torch.Tensor):
        return cond.to(dtype)
    return torch.as_tensor(np.asarray(cond), dtype=dtype)


def sample_one(denoiser, cond, cfg: EnsembleConfig, seed: int, field_shape=None) -> np.ndarray:
    """One forecast ``[H, W, 3]`` from starting noise drawn with ``seed``."""
    dtype = _dtype_of(denoiser)
    c = _as_cond_tensor(cond, dtype)
    if field_shape is None:
        field_shape = tuple(c.shape[:2]) + (3,)
    x_T = initial_noise(seed, field_shape, dtype)[None]
    out = run_sampler(denoiser, c[None] if c is not None else None, x_T, cfg.n_steps, cfg.schedule,
                      cfg.batch_invariant)
    return np.clip(out[0].numpy(), 0.0, None)


def sample_ensemble(denoiser, cond, cfg: EnsembleConfig, batched: bool = True, field_shape=None) -> MemberSet:
    """``cfg.n_members`` forecasts for one conditioning stack.

    Member ``m`` starts from noise seeded with ``member_seed(cfg.seed, m)``.
    ``batched`` runs members together through the denoiser; with
    ``cfg.batch_invariant`` the result equals the sequential path exactly.
    """
    seeds = [member_seed(cfg.seed, m) for m in range(cfg.n_members)]
    if not batched:
        members = np.stack([sample_one(denoiser, cond, cfg, s, field_shape) for s in seeds])
        return MemberSet(members, seeds, cond)
    arr = cond.to_array() if hasattr(cond, "to_array") else cond
    members = sample_ensembles(denoiser, None if arr is None else np.asarray(arr)[None], cfg, [seeds],
                               field_shape=field_shape)[0]
    return MemberSet(members, seeds, cond)


def sample_ensembles(denoiser, conds, cfg: EnsembleConfig, seeds=None, field_shape=None) -> np.ndarray:
    """Ensembles for a batch of conditioning stacks ``[B, H, W, C]``.

    ``seeds[b][m]`` is the noise seed of member ``m`` for case ``b``; by
    default every case uses ``member_seed(cfg.seed, m)``. Returns clipped
    members ``[B, n_members, H, W, 3]``.
    """
    dtype = _dtype_of(denoiser)
    c = _as_cond_tensor(conds, dtype)
    n_cases = c.shape[0] if c is not None else len(seeds)
    if field_shape is None:
        field_shape = tuple(c.shape[1:3]) + (3,)
    if seeds is None:
        row = [member_seed(cfg.seed, m) for m in range(cfg.n_members)]
        seeds = [row] * n_cases
    if len(seeds) != n_cases or any(len(s) != cfg.n_members for s in seeds):
        raise ShapeError("seeds must be [n_cases][n_members]")

    jobs = [(b, m) for b in range(n_cases) for m in range(cfg.n_members)]
    out = np.empty((n_cases, cfg.n_members) + tuple(field_shape), dtype=np.float32)
    for start in range(0, len(jobs), cfg.max_batch):
        chunk = jobs[start : start + cfg.max_batch]
        x_T = torch.stack([initial_noise(seeds[b][m], field_shape, dtype) for b, m in chunk])
        cc = c[[b for b, _ in chunk]] if c is not None else None
        res = run_sampler(denoiser, cc, x_T, cfg.n_steps, cfg.schedule, cfg.batch_invariant)
        res = np.clip(res.numpy(), 0.0, None)
        for j, (b, m) in enumerate(chunk):
            out[b, m] = res[j]
    return out


def _members_array(ms) -> np.ndarray:
    members = ms.members if isinstance(ms, MemberSet) else np.asarray(ms)
    if members.shape[0] == 0:
        raise ShapeError("empty member set")
    return members


def aggregate_mean(ms) -> np.ndarray:
    """Pixelwise mean over members (``[N, H, W, 3]`` -> ``[H, W, 3]``)."""
    return _members_array(ms).mean(axis=0)


def stack_members(members) -> np.ndarray:
    """``[..., N, H, W, 3]`` -> ``[..., H, W, 3N]``, member-major channels."""
    members = np.asarray(members)
    moved = np.moveaxis(members, -4, -2)  # [..., H, W, N, 3]
    return moved.reshape(moved.shape[:-2] + (-1,))


@torch.no_grad()
def aggregate_postprocess(ms, pp: UNet) -> np.ndarray:
    """Fuse members with a trained post-processing network; clipped at 0."""
    members = _members_array(ms)
    stacked = stack_members(members)
    if stacked.shape[-1] != pp.spec.input_channels:
        raise ShapeError(
            f"{members.shape[0]} members give {stacked.shape[-1]} channels, "
            f"post-processor expects {pp.spec.input_channels}"
        )
    return np.clip(postprocess_batch(pp, stacked[None])[0], 0.0, None)


@torch.no_grad()
def postprocess_batch(pp: UNet, stacked: np.ndarray) -> np.ndarray:
    """Run a post-processor on stacked members ``[B, H, W, 3N]`` (unclipped)."""
    was_training = pp.training
    pp.eval()
    dtype = next(pp.parameters()).dtype
    x = torch.as_tensor(np.ascontiguousarray(stacked), dtype=dtype).permute(0, 3, 1, 2)
    out = pp(x).permute(0, 2, 3, 1).numpy()
    if was_training:
        pp.train()
    return out

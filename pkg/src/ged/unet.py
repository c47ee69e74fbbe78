"""Convolutional U-Net used as noise predictor, ensemble post-processor and
direct-regression baseline.

Fields travel through the public helpers channel-last (``[H, W, C]`` or
``[B, H, W, C]``) and are transposed to torch's ``NCHW`` internally.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import save_file
from torch import nn

from .errors import ConfigError, DomainError, ShapeError

__all__ = [
    "VarianceEmbedding",
    "UNetSpec",
    "UNet",
    "embed_variance",
    "assemble_input",
    "build_unet",
    "denoise",
    "param_checksum",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class VarianceEmbedding:
    num_frequencies: int = 16
    min_freq: float = 1.0
    max_freq: float = 1000.0

    @property
    def dim(self) -> int:
        return 2 * self.num_frequencies

    def frequencies(self) -> np.ndarray:
        return np.exp(
            np.linspace(math.log(self.min_freq), math.log(self.max_freq), self.num_frequencies)
        )


@dataclass(frozen=True)
class UNetSpec:
    """Architecture description; everything needed to rebuild a network.

    ``embedding`` set to ``None`` builds a plain image-to-image U-Net (post-
    processor, baseline). ``mean_skip`` adds the per-lead mean of the input
    channel groups to the output, so a freshly built post-processor starts out
    as the ensemble mean. ``noise_skip`` (noise predictors only) mixes the
    noisy input into the output as ``n * x_t + s * f`` with ``s, n`` the
    signal and noise rates implied by the variance input, so the body ``f``
    works at the scale of the clean field and the clean-field estimate
    ``s * x_t - n * f`` never divides by a small signal rate.
    """

    input_channels: int
    output_channels: int = 3
    widths: tuple = (64, 128, 256, 384)
    blocks_per_level: int = 2
    image_size: tuple = (96, 96)
    embedding: VarianceEmbedding | None = field(default_factory=VarianceEmbedding)
    mean_skip: bool = False
    noise_skip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if isinstance(self.embedding, dict):
            object.__setattr__(self, "embedding", VarianceEmbedding(**self.embedding))
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.widths)

    def resolutions(self) -> list[int]:
        """Side length (rows) at every resolution level."""
        return [self.image_size[0] // 2**i for i in range(self.levels)]

    def validate(self) -> None:
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be nonempty and positive, got {self.widths}")
        if self.blocks_per_level < 1:
            raise ConfigError("blocks_per_level must be >= 1")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ConfigError("channel counts must be positive")
        factor = 2 ** (self.levels - 1)
        if any(s % factor for s in self.image_size):
            raise ConfigError(
                f"image size {self.image_size} not divisible by {factor} "
                f"({self.levels} resolution levels)"
            )
        if self.mean_skip and self.input_channels % self.output_channels:
            raise ConfigError("mean_skip needs input_channels to be a multiple of output_channels")
        if self.noise_skip and (self.embedding is None or self.input_channels < self.output_channels):
            raise ConfigError("noise_skip needs a variance embedding and the noisy fields as leading inputs")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetSpec":
        d = dict(d)
        if d.get("embedding") is not None:
            d["embedding"] = VarianceEmbedding(**d["embedding"])
        return cls(**d)


def embed_variance(alpha, cfg: VarianceEmbedding = VarianceEmbedding()) -> np.ndarray:
    """Sinusoidal features of the noise variance ``v = 1 - alpha``.

    Returns ``[sin(2 pi f_i v)..., cos(2 pi f_i v)...]`` of length
    ``2 * cfg.num_frequencies``; tile it over the grid before stacking.
    """
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")
    v = 1.0 - alpha
    angles = 2.0 * np.pi * cfg.frequencies() * v
    return np.concatenate([np.sin(angles), np.cos(angles)])


def _embed_torch(variance: torch.Tensor, cfg: VarianceEmbedding) -> torch.Tensor:
    freqs = torch.as_tensor(cfg.frequencies(), dtype=variance.dtype, device=variance.device)
    angles = 2.0 * math.pi * variance[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def assemble_input(noisy, cond):
    """Stack noisy target frames and conditioning along the channel axis.

    ``cond`` is a :class:`ged.data.ConditioningStack`, an array with the same
    leading dims as ``noisy``, or ``None`` for unconditional use.
    """
    if cond is None:
        return noisy
    if hasattr(cond, "to_array"):
        cond = cond.to_array()
    if isinstance(noisy, torch.Tensor):
        cond = torch.as_tensor(cond, dtype=noisy.dtype, device=noisy.device)
        if noisy.shape[:-1] != cond.shape[:-1]:
            raise ShapeError(f"noisy {tuple(noisy.shape)} vs conditioning {tuple(cond.shape)}")
        return torch.cat([noisy, cond], dim=-1)
    noisy = np.asarray(noisy)
    cond = np.asarray(cond, dtype=noisy.dtype)
    if noisy.shape[:-1] != cond.shape[:-1]:
        raise ShapeError(f"noisy {noisy.shape} vs conditioning {cond.shape}")
    return np.concatenate([noisy, cond], axis=-1)


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = nn.GroupNorm(_groups(out_ch), out_ch, affine=False)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        h = self.conv1(x)
        h = F.silu(self.norm(h))
        h = self.conv2(h)
        return h + self.skip(x)


class UNet(nn.Module):
    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths
        n = spec.blocks_per_level
        extra = spec.embedding.dim if spec.embedding is not None else 0
        self.stem = nn.Conv2d(spec.input_channels + extra, widths[0], 1)

        self.down = nn.ModuleList()
        ch = widths[0]
        skip_channels = []
        for w in widths[:-1]:
            level = nn.ModuleList()
            for _ in range(n):
                level.append(ResidualBlock(ch, w))
                ch = w
                skip_channels.append(ch)
            self.down.append(level)

        self.mid = nn.ModuleList()
        for _ in range(n):
            self.mid.append(ResidualBlock(ch, widths[-1]))
            ch = widths[-1]

        self.upconv = nn.ModuleList()
        self.up = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.upconv.append(nn.Conv2d(ch, w, 3, padding=1))
            ch = w
            level = nn.ModuleList()
            for _ in range(n):
                level.append(ResidualBlock(ch + skip_channels.pop(), w))
                ch = w
            self.up.append(level)

        self.head = nn.Conv2d(ch, spec.output_channels, 1)
        if spec.mean_skip:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, variance: torch.Tensor | None = None) -> torch.Tensor:
        """``x``: ``[B, C, H, W]``; ``variance``: ``[B]`` noise variances."""
        spec = self.spec
        if x.shape[1] != spec.input_channels:
            raise ShapeError(f"expected {spec.input_channels} input channels, got {x.shape[1]}")
        factor = 2 ** (spec.levels - 1)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError(f"spatial size {tuple(x.shape[2:])} not divisible by {factor}")
        inputs = x
        if spec.embedding is not None:
            if variance is None:
                raise ShapeError("this network needs a noise variance input")
            variance = torch.as_tensor(variance, dtype=x.dtype, device=x.device).reshape(-1)
            if variance.shape[0] == 1 and x.shape[0] > 1:
                variance = variance.expand(x.shape[0])
            emb = _embed_torch(variance, spec.embedding)
            emb = emb[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
            x = torch.cat([x, emb], dim=1)

        h = self.stem(x)
        skips = []
        for level in self.down:
            for block in level:
                h = block(h)
                skips.append(h)
            h = F.avg_pool2d(h, 2)
        for block in self.mid:
            h = block(h)
        for conv, level in zip(self.upconv, self.up):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = conv(h)
            for block in level:
                h = block(torch.cat([h, skips.pop()], dim=1))
        out = self.head(h)
        if spec.mean_skip:
            b, c, hh, ww = inputs.shape
            groups = inputs.reshape(b, c // spec.output_channels, spec.output_channels, hh, ww)
            out = out + groups.mean(dim=1)
        if spec.noise_skip:
            var = variance.reshape(-1, 1, 1, 1)
            out = torch.sqrt(var) * inputs[:, : spec.output_channels] + torch.sqrt(1 - var) * out
        return out


def build_unet(spec: UNetSpec, seed: int = 0) -> UNet:
    """Initialise a network; identical ``seed`` gives identical parameters."""
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNet(spec)
    return model


def denoise(model: UNet, stacked, alpha):
    """Predict the noise in ``stacked`` (channel-last) at signal variance ``alpha``.

    Accepts a single field ``[H, W, C]`` or a batch ``[B, H, W, C]`` with
    scalar or per-item ``alpha``; returns the same layout with
    ``spec.output_channels`` channels. numpy in, numpy out.
    """
    as_numpy = not isinstance(stacked, torch.Tensor)
    param = next(model.parameters())
    x = torch.as_tensor(np.asarray(stacked) if as_numpy else stacked, dtype=param.dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[-1] != model.spec.input_channels:
        raise ShapeError(
            f"stacked input has {x.shape[-1]} channels, network expects {model.spec.input_channels}"
        )
    variance = 1.0 - torch.as_tensor(alpha, dtype=param.dtype).reshape(-1)
    with torch.no_grad():
        out = model(x.permute(0, 3, 1, 2), variance).permute(0, 2, 3, 1)
    if single:
        out = out[0]
    return out.numpy() if as_numpy else out


def param_checksum(model: nn.Module) -> str:
    """sha256 over all parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: UNet, path, kind: str = "unet", extra: dict | None = None) -> None:
    """Write parameters plus a JSON spec header to a safetensors file."""
    state = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    manifest = {k: list(v.shape) for k, v in state.items()}
    meta = {
        "kind": kind,
        "spec": json.dumps(model.spec.to_dict()),
        "manifest": json.dumps(manifest),
        "extra": json.dumps(extra or {}),
    }
    save_file(state, str(path), metadata=meta)


def load_checkpoint(path) -> tuple[UNet, dict]:
    """Rebuild a network from :func:`save_checkpoint` output.

    Returns ``(model, header)``; raises :class:`ShapeError` if the stored
    tensors disagree with the architecture the header describes.
    """
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
        if "spec" not in meta:
            raise ConfigError(f"{path} carries no spec header")
        spec = UNetSpec.from_dict(json.loads(meta["spec"]))
        state = {k: f.get_tensor(k) for k in f.keys()}
    model = UNet(spec)
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    stored = {k: list(v.shape) for k, v in state.items()}
    if expected != stored or json.loads(meta.get("manifest", "{}")) != stored:
        raise ShapeError(f"checkpoint {path} does not match its declared architecture")
    first = next(iter(state.values()))
    model = model.to(first.dtype)
    model.load_state_dict(state)
    header = {
        "kind": meta.get("kind", "unet"),
        "spec": spec,
        "extra": json.loads(meta.get("extra", "{}")),
    }
    return model, header

"""Style-based U-Net inpainting generator.

The generator completes the missing region of a masked image: a context
encoder (plain convolutions, residual connections at every resolution, no
normalization) feeds a style-based decoder whose blocks run instance
normalization -> convolution -> per-channel style modulation. Encoder features
re-enter the decoder as additive residuals after instance normalization.

Three production configurations share this architecture: a dense-surface
conditioned full-body model at 288x160 (16 extra input channels), an
unconditional full-body model at the same resolution, and a face model at
256x256. Five downsampling stages put the bottleneck at 9x5 for the body
models and 8x8 for the face model; most parameters sit at the low-resolution
levels.

The output is always recomposed against the input: with a keep-mask M that is
1 for known pixels and 0 for pixels to synthesize,

    output = original  where M = 1   (bit-exact)
           = generated where M = 0
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CONDITION_NONE = "none"
CONDITION_DENSE = "dense"

DENSE_CHANNELS = 16


@dataclass(frozen=True)
class GeneratorConfig:
    input_resolution: tuple[int, int]  # (H, W)
    n_downsamples: int = 5
    condition: str = CONDITION_NONE
    base_channels: int = 64
    max_channels: int = 496
    z_dim: int = 512
    w_dim: int = 512

    def __post_init__(self):
        h, w = self.input_resolution
        factor = 2 ** self.n_downsamples
        if h % factor or w % factor:
            raise ValueError(
                f"resolution {h}x{w} not divisible by 2^{self.n_downsamples}"
            )
        if self.condition not in (CONDITION_NONE, CONDITION_DENSE):
            raise ValueError(f"unknown condition kind {self.condition!r}")

    @property
    def bottleneck_resolution(self) -> tuple[int, int]:
        factor = 2 ** self.n_downsamples
        return (self.input_resolution[0] // factor, self.input_resolution[1] // factor)

    @property
    def in_channels(self) -> int:
        # masked RGB + the mask itself, plus the dense surface embedding when
        # the model is conditioned on it.
        extra = DENSE_CHANNELS if self.condition == CONDITION_DENSE else 0
        return 3 + 1 + extra

    def channels(self, level: int) -> int:
        return min(self.base_channels << level, self.max_channels)


def body_dense_config() -> GeneratorConfig:
    return GeneratorConfig(input_resolution=(288, 160), condition=CONDITION_DENSE)


def body_config() -> GeneratorConfig:
    return GeneratorConfig(input_resolution=(288, 160))


def face_config() -> GeneratorConfig:
    return GeneratorConfig(input_resolution=(256, 256))


def tiny_config(
    resolution: tuple[int, int] = (32, 32),
    n_downsamples: int = 2,
    condition: str = CONDITION_NONE,
    base_channels: int = 4,
    max_channels: int = 8,
    z_dim: int = 8,
    w_dim: int = 8,
) -> GeneratorConfig:
    """Desk-scale configuration for tests and gradient checks."""
    return GeneratorConfig(
        input_resolution=resolution,
        n_downsamples=n_downsamples,
        condition=condition,
        base_channels=base_channels,
        max_channels=max_channels,
        z_dim=z_dim,
        w_dim=w_dim,
    )


class EqualizedConv2d(nn.Module):
    """Convolution with the runtime weight scaling of Karras et al.

    Weights are stored at unit variance and multiplied by sqrt(gain/fan_in)
    on the fly, so Adam's normalized updates move every layer by the same
    effective amount regardless of fan-in. Without this the lr-0.002 recipe
    is unstable: wide layers get relatively bigger steps and the training
    either runs away or saturates.
    """

    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, bias=True, gain=2.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(c_out, c_in, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.scale = (gain / (c_in * kernel_size * kernel_size)) ** 0.5
        self.stride = stride
        self.padding = padding

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(
            x, self.weight * self.scale, self.bias, self.stride, self.padding
        )


class EqualizedLinear(nn.Module):
    """Fully connected layer with the same runtime weight scaling."""

    def __init__(self, d_in, d_out, bias=True, gain=2.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        self.scale = (gain / d_in) ** 0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.scale, self.bias)


class InstanceNorm(nn.Module):
    """Per-sample, per-channel standardization over spatial positions."""

    def __init__(self, eps: float = 1e-8):
        super().__init__()
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps)


class MappingNetwork(nn.Module):
    """Two fully connected layers from sampling noise z to style w.

    z is projected to the unit hypersphere first so the style scale stays
    bounded no matter how extreme a sampled latent is.
    """

    def __init__(self, z_dim: int, w_dim: int):
        super().__init__()
        self.z_dim = z_dim
        self.fc1 = EqualizedLinear(z_dim, w_dim)
        self.fc2 = EqualizedLinear(w_dim, w_dim, gain=1.0)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.z_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != configured {self.z_dim}")
        z = z * torch.rsqrt(z.square().mean(dim=-1, keepdim=True) + 1e-8)
        x = F.leaky_relu(self.fc1(z), 0.2)
        return self.fc2(x)


class ResidualBlock(nn.Module):
    """Two plain convolutions with an additive shortcut; no normalization.

    The sum is scaled by 1/sqrt(2) to keep activation variance level across a
    stack of blocks.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = EqualizedConv2d(channels, channels, 3, padding=1)
        self.conv2 = EqualizedConv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.leaky_relu(self.conv1(x), 0.2)
        y = F.leaky_relu(self.conv2(y), 0.2)
        return (x + y) * 0.5**0.5


class StyleConv(nn.Module):
    """Decoder unit: instance normalization -> convolution -> style modulation."""

    def __init__(self, channels: int, w_dim: int):
        super().__init__()
        self.norm = InstanceNorm()
        self.conv = EqualizedConv2d(channels, channels, 3, padding=1)
        self.affine = EqualizedLinear(w_dim, channels, gain=1.0)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        y = self.norm(x)
        y = self.conv(y)
        scale = 1.0 + self.affine(w)
        y = y * scale[:, :, None, None]
        return F.leaky_relu(y, 0.2)


class StyleBlock(nn.Module):
    """Residual pair of style convolutions at one decoder resolution."""

    def __init__(self, channels: int, w_dim: int):
        super().__init__()
        self.conv1 = StyleConv(channels, w_dim)
        self.conv2 = StyleConv(channels, w_dim)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return (x + self.conv2(self.conv1(x, w), w)) * 0.5**0.5


class Encoder(nn.Module):
    """Context encoder: convolutions and downsampling only, no normalization."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.stem = EqualizedConv2d(config.in_channels, config.channels(0), 3, padding=1)
        self.blocks = nn.ModuleList(
            ResidualBlock(config.channels(i)) for i in range(config.n_downsamples + 1)
        )
        self.downs = nn.ModuleList(
            EqualizedConv2d(config.channels(i), config.channels(i + 1), 3, stride=2, padding=1)
            for i in range(config.n_downsamples)
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = F.leaky_relu(self.stem(x), 0.2)
        features = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            features.append(x)
            if i < len(self.downs):
                x = F.leaky_relu(self.downs[i](x), 0.2)
        return features


class Decoder(nn.Module):
    """Style-modulated decoder with instance-normalized additive skips."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        n = config.n_downsamples
        self.blocks = nn.ModuleList(
            StyleBlock(config.channels(i), config.w_dim) for i in range(n, -1, -1)
        )
        self.ups = nn.ModuleList(
            EqualizedConv2d(config.channels(i), config.channels(i - 1), 3, padding=1)
            for i in range(n, 0, -1)
        )
        self.skip_norms = nn.ModuleList(InstanceNorm() for _ in range(n))
        self.to_rgb = EqualizedConv2d(config.channels(0), 3, 3, padding=1, gain=1.0)

    def forward(self, features: list[torch.Tensor], w: torch.Tensor) -> torch.Tensor:
        n = self.config.n_downsamples
        if len(features) != n + 1:
            raise ValueError(f"expected {n + 1} pyramid levels, got {len(features)}")
        x = features[-1]
        for i in range(n + 1):
            x = self.blocks[i](x, w)
            if i < n:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
                x = F.leaky_relu(self.ups[i](x), 0.2)
                x = (x + self.skip_norms[i](features[n - 1 - i])) * 0.5**0.5
        return torch.sigmoid(self.to_rgb(x))


class Generator(nn.Module):
    """Inpainting generator: encoder pyramid + mapping network + decoder."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.mapping = MappingNetwork(config.z_dim, config.w_dim)
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def encode(
        self,
        masked_image: torch.Tensor,
        mask: torch.Tensor,
        cond: torch.Tensor | None = None,
    ) -> list[torch.Tensor]:
        cfg = self.config
        if (cond is not None) != (cfg.condition == CONDITION_DENSE):
            raise ValueError("cond must be given exactly for dense-conditioned configs")
        if masked_image.shape[-2:] != torch.Size(cfg.input_resolution):
            raise ValueError(
                f"input spatial size {tuple(masked_image.shape[-2:])} != "
                f"configured {cfg.input_resolution}"
            )
        parts = [masked_image, mask]
        if cond is not None:
            if cond.shape[1] != DENSE_CHANNELS:
                raise ValueError(f"condition must have {DENSE_CHANNELS} channels")
            parts.append(cond)
        return self.encoder(torch.cat(parts, dim=1))

    def decode(self, features: list[torch.Tensor], w: torch.Tensor) -> torch.Tensor:
        return self.decoder(features, w)

    def forward(
        self,
        masked_image: torch.Tensor,
        mask: torch.Tensor,
        z: torch.Tensor,
        cond: torch.Tensor | None = None,
        w: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if w is None:
            w = self.map_latent(z)
        return self.decode(self.encode(masked_image, mask, cond), w)

    def synthesize(
        self,
        original: torch.Tensor,
        mask: torch.Tensor,
        z: torch.Tensor,
        cond: torch.Tensor | None = None,
        w: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Full inpainting pass: known pixels survive bit-exact."""
        generated = self.forward(original * mask, mask, z, cond=cond, w=w)
        return compose(original, mask, generated)

    def parameter_counts_by_level(self) -> dict[int, int]:
        """Trainable parameters grouped by the resolution level they act on.

        Level 0 is full resolution, level n_downsamples is the bottleneck.
        The mapping network is non-spatial and reported under level -1.
        Downsampling/upsampling convolutions count toward their finer level.
        """
        n = self.config.n_downsamples
        counts = {level: 0 for level in range(-1, n + 1)}
        counts[-1] = sum(p.numel() for p in self.mapping.parameters())
        counts[0] += sum(p.numel() for p in self.encoder.stem.parameters())
        counts[0] += sum(p.numel() for p in self.decoder.to_rgb.parameters())
        for i, block in enumerate(self.encoder.blocks):
            counts[i] += sum(p.numel() for p in block.parameters())
        for i, down in enumerate(self.encoder.downs):
            counts[i] += sum(p.numel() for p in down.parameters())
        for i, block in enumerate(self.decoder.blocks):
            counts[n - i] += sum(p.numel() for p in block.parameters())
        for i, up in enumerate(self.decoder.ups):
            counts[n - 1 - i] += sum(p.numel() for p in up.parameters())
        return counts


def compose(original, mask, generated):
    """Keep the original where the mask is 1, take the synthesis where it is 0.

    Works on torch tensors and numpy arrays; the mask broadcasts against the
    image (e.g. (B, 1, H, W) against (B, 3, H, W), or (H, W) against
    (H, W, 3) by passing mask[..., None]).
    """
    if isinstance(original, torch.Tensor):
        if original.shape != generated.shape:
            raise ValueError(f"shape mismatch: {original.shape} vs {generated.shape}")
        return torch.where(mask > 0.5, original, generated)
    original = np.asarray(original)
    generated = np.asarray(generated)
    if original.shape != generated.shape:
        raise ValueError(f"shape mismatch: {original.shape} vs {generated.shape}")
    return np.where(np.asarray(mask) > 0.5, original, generated)


def sample_z(config: GeneratorConfig, n: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, config.z_dim, generator=g)


def z_from_numpy(latent: np.ndarray, config: GeneratorConfig) -> torch.Tensor:
    """Adapt an externally drawn latent vector to the model's z dimension."""
    flat = np.asarray(latent, dtype=np.float32).reshape(-1)
    if flat.shape[0] < config.z_dim:
        reps = int(np.ceil(config.z_dim / flat.shape[0]))
        flat = np.tile(flat, reps)
    return torch.from_numpy(flat[: config.z_dim].copy()).unsqueeze(0)


CHECKPOINT_FORMAT = "idveil-generator"


def save_checkpoint(
    path: str | Path,
    generator: Generator,
    ema: Generator | None = None,
    step: int = 0,
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": asdict(generator.config),
        "step": step,
        "generator": generator.state_dict(),
        "ema": ema.state_dict() if ema is not None else None,
    }
    torch.save(payload, path)


@dataclass
class CheckpointBundle:
    config: GeneratorConfig
    generator: Generator
    ema: Generator | None
    step: int


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a generator checkpoint")
    cfg_dict = dict(payload["config"])
    cfg_dict["input_resolution"] = tuple(cfg_dict["input_resolution"])
    config = GeneratorConfig(**cfg_dict)
    generator = Generator(config)
    generator.load_state_dict(payload["generator"])
    ema = None
    if payload.get("ema") is not None:
        ema = Generator(config)
        ema.load_state_dict(payload["ema"])
    return CheckpointBundle(config=config, generator=generator, ema=ema, step=payload["step"])

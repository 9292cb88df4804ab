"""Adversarial training for the inpainting generators.

Defaults follow the established style-GAN training recipe: Adam at lr 0.002
with betas (0.0, 0.99), batch size 32, non-saturating logistic loss with an R1
gradient penalty on reals and a small logit drift penalty anchoring the
discriminator's output scale, an exponential moving average of the generator,
and no data augmentation other than random horizontal flip. The discriminator
is a plain downsampling convnet over (image, mask, condition) with no feature
pyramid head.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import (
    CONDITION_DENSE,
    DENSE_CHANNELS,
    EqualizedConv2d,
    EqualizedLinear,
    Generator,
    GeneratorConfig,
    compose,
    save_checkpoint,
)


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 0.002
    adam_betas: tuple[float, float] = (0.0, 0.99)
    adam_eps: float = 1e-8
    augmentation: tuple[str, ...] = ("hflip",)
    r1_gamma: float = 10.0
    logit_drift: float = 1e-3
    ema_decay: float = 0.999
    steps: int = 2000
    seed: int = 0
    loss: str = "logistic"  # or "hinge"

    def __post_init__(self):
        if self.batch_size <= 0 or self.lr <= 0 or self.steps <= 0:
            raise ValueError("batch_size, lr and steps must be positive")
        if self.r1_gamma < 0 or not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("invalid r1_gamma or ema_decay")
        if self.logit_drift < 0:
            raise ValueError("logit_drift must be >= 0")
        if self.loss not in ("logistic", "hinge"):
            raise ValueError(f"unknown loss {self.loss!r}")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class DiscriminatorBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = EqualizedConv2d(c_in, c_in, 3, padding=1)
        self.conv2 = EqualizedConv2d(c_in, c_out, 3, stride=2, padding=1)
        self.skip = EqualizedConv2d(c_in, c_out, 1, stride=2, bias=False, gain=1.0)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), 0.2)
        y = F.leaky_relu(self.conv2(y), 0.2)
        return (y + self.skip(x)) * 0.5**0.5


class MinibatchStd(nn.Module):
    """Appends the mean cross-batch feature std as one constant channel.

    Lets the discriminator see batch diversity, the standard guard against
    the generator collapsing every z to one output.
    """

    def forward(self, x):
        std = x.std(dim=0, unbiased=False).mean()
        channel = std.expand(x.shape[0], 1, x.shape[2], x.shape[3])
        return torch.cat([x, channel], dim=1)


class Discriminator(nn.Module):
    """Downsampling convnet over (image, mask, cond) -> one real/fake logit.

    Shares the generator's conditioning so real and synthesized samples are
    judged in the same context; no pyramid side-outputs.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.stem = EqualizedConv2d(config.in_channels, config.channels(0), 3, padding=1)
        self.blocks = nn.ModuleList(
            DiscriminatorBlock(config.channels(i), config.channels(i + 1))
            for i in range(config.n_downsamples)
        )
        bh, bw = config.bottleneck_resolution
        c = config.channels(config.n_downsamples)
        self.mbstd = MinibatchStd()
        self.final_conv = EqualizedConv2d(c + 1, c, 3, padding=1)
        self.fc = EqualizedLinear(c * bh * bw, 1, gain=1.0)

    def forward(
        self, image: torch.Tensor, mask: torch.Tensor, cond: torch.Tensor | None = None
    ) -> torch.Tensor:
        parts = [image, mask]
        if self.config.condition == CONDITION_DENSE:
            if cond is None:
                raise ValueError("dense-conditioned discriminator requires cond")
            parts.append(cond)
        x = F.leaky_relu(self.stem(torch.cat(parts, dim=1)), 0.2)
        for block in self.blocks:
            x = block(x)
        x = F.leaky_relu(self.final_conv(self.mbstd(x)), 0.2)
        return self.fc(x.flatten(1)).squeeze(1)


def d_loss_fn(real_logits: torch.Tensor, fake_logits: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "logistic":
        return (F.softplus(-real_logits) + F.softplus(fake_logits)).mean()
    return (F.relu(1.0 - real_logits) + F.relu(1.0 + fake_logits)).mean()


def g_loss_fn(fake_logits: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "logistic":
        return F.softplus(-fake_logits).mean()
    return (-fake_logits).mean()


def r1_penalty(
    discriminator: Discriminator,
    image: torch.Tensor,
    mask: torch.Tensor,
    cond: torch.Tensor | None,
) -> torch.Tensor:
    image = image.detach().requires_grad_(True)
    logits = discriminator(image, mask, cond)
    (grad,) = torch.autograd.grad(logits.sum(), image, create_graph=True)
    return grad.square().sum(dim=(1, 2, 3)).mean()


@torch.no_grad()
def ema_update(source: nn.Module, ema: nn.Module, decay: float) -> None:
    """ema <- decay * ema + (1 - decay) * source, per parameter and buffer."""
    src_params = dict(source.named_parameters())
    for name, p_ema in ema.named_parameters():
        p_src = src_params[name]
        if p_src.shape != p_ema.shape:
            raise ValueError(f"shape mismatch for {name}")
        p_ema.mul_(decay).add_(p_src, alpha=1.0 - decay)
    src_buffers = dict(source.named_buffers())
    for name, b_ema in ema.named_buffers():
        b_ema.copy_(src_buffers[name])


# ---------------------------------------------------------------------------
# Augmentation


class HorizontalFlip:
    """Flips image, mask and condition coherently along the width axis.

    Dense surface channels are flipped spatially without any channel
    permutation; the left/right semantics of the embedding are therefore
    approximate under flips.
    """

    name = "hflip"

    def __call__(self, batch: dict, rng: np.random.Generator) -> dict:
        flip = rng.random(batch["image"].shape[0]) < 0.5
        out = dict(batch)
        for key in ("image", "mask", "cond"):
            if key in out and out[key] is not None:
                arr = out[key].copy()
                arr[flip] = arr[flip, :, :, ::-1]
                out[key] = arr
        return out


_AUGMENTATIONS = {"hflip": HorizontalFlip}


class AugmentationPipeline:
    """Named, introspectable augmentation chain applied to numpy batches."""

    def __init__(self, names: tuple[str, ...] = ("hflip",)):
        unknown = [n for n in names if n not in _AUGMENTATIONS]
        if unknown:
            raise ValueError(f"unknown augmentations: {unknown}")
        self.transforms = [_AUGMENTATIONS[n]() for n in names]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.transforms)

    def __call__(self, batch: dict, rng: np.random.Generator) -> dict:
        for t in self.transforms:
            batch = t(batch, rng)
        return batch


# ---------------------------------------------------------------------------
# Procedural training data: colored capsule figures on textured backgrounds.


@dataclass(frozen=True)
class ToyFigureDataset:
    """Deterministic desk-scale stand-in for a human-figure crop dataset.

    Each sample is a capsule-shaped "figure" over a smooth random background,
    with a keep-mask that is 0 on a box around the figure and a 16-channel
    fake surface-coordinate map that is zero off the body.
    """

    resolution: tuple[int, int] = (96, 64)
    size: int = 4096
    seed: int = 0

    def __len__(self) -> int:
        return self.size

    def sample(self, index: int) -> dict:
        h, w = self.resolution
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(index,)))

        # background: low-frequency noise upsampled smoothly
        coarse = rng.uniform(0.1, 0.9, size=(4, 3, 3))
        ys = np.linspace(0, 2, h)
        xs = np.linspace(0, 2, w)
        yi = np.clip(ys.astype(int), 0, 1)
        xi = np.clip(xs.astype(int), 0, 1)
        fy = ys - yi
        fx = xs - xi
        bg = np.zeros((3, h, w))
        for c in range(3):
            g = coarse[c + 1]
            top = g[yi][:, xi] * (1 - fx)[None, :] + g[yi][:, xi + 1] * fx[None, :]
            bot = g[yi + 1][:, xi] * (1 - fx)[None, :] + g[yi + 1][:, xi + 1] * fx[None, :]
            bg[c] = top * (1 - fy)[:, None] + bot * fy[:, None]

        # capsule figure: segment from head to hip with rounded caps
        cx = w / 2 + rng.uniform(-w * 0.12, w * 0.12)
        cy = h / 2 + rng.uniform(-h * 0.08, h * 0.08)
        half_len = rng.uniform(0.25, 0.36) * h
        radius = rng.uniform(0.14, 0.2) * w
        color = rng.uniform(0.05, 0.95, size=3)
        yy, xx = np.mgrid[0:h, 0:w]
        t = np.clip((yy - (cy - half_len)) / (2 * half_len), 0.0, 1.0)
        seg_y = (cy - half_len) + t * 2 * half_len
        dist = np.sqrt((xx - cx) ** 2 + (yy - seg_y) ** 2)
        body = dist <= radius

        image = bg.copy()
        for c in range(3):
            image[c][body] = color[c]
        image = image.astype(np.float32)

        # keep-mask: zero on an expanded box around the figure
        pad = int(radius * 0.5)
        x0 = max(0, int(cx - radius) - pad)
        x1 = min(w, int(cx + radius) + pad)
        y0 = max(0, int(cy - half_len - radius) - pad)
        y1 = min(h, int(cy + half_len + radius) + pad)
        mask = np.ones((1, h, w), dtype=np.float32)
        mask[0, y0:y1, x0:x1] = 0.0

        # fake surface coordinates: smooth per-channel waves, zero off-body
        u = (yy - (cy - half_len - radius)) / (2 * (half_len + radius))
        v = (xx - (cx - radius)) / (2 * radius)
        phases = rng.uniform(0, 2 * np.pi, size=DENSE_CHANNELS)
        freqs = 1 + (np.arange(DENSE_CHANNELS) % 4)
        cond = np.sin(freqs[:, None, None] * (u + v)[None] * np.pi + phases[:, None, None])
        cond = (cond * body[None]).astype(np.float32)

        return {"image": image, "mask": mask, "cond": cond}

    def batch(self, indices: np.ndarray) -> dict:
        samples = [self.sample(int(i)) for i in indices]
        return {
            "image": np.stack([s["image"] for s in samples]),
            "mask": np.stack([s["mask"] for s in samples]),
            "cond": np.stack([s["cond"] for s in samples]),
        }


class NpzDirectoryDataset:
    """Crops stored as .npz files with image/mask[/cond] arrays in CHW layout."""

    def __init__(self, root: str | Path):
        self.paths = sorted(Path(root).glob("*.npz"))
        if not self.paths:
            raise FileNotFoundError(f"no .npz crops under {root}")

    def __len__(self) -> int:
        return len(self.paths)

    def sample(self, index: int) -> dict:
        data = np.load(self.paths[index % len(self.paths)])
        out = {"image": data["image"], "mask": data["mask"]}
        out["cond"] = data["cond"] if "cond" in data else None
        return out

    def batch(self, indices: np.ndarray) -> dict:
        samples = [self.sample(int(i)) for i in indices]
        batch = {
            "image": np.stack([s["image"] for s in samples]),
            "mask": np.stack([s["mask"] for s in samples]),
        }
        if samples[0]["cond"] is not None:
            batch["cond"] = np.stack([s["cond"] for s in samples])
        return batch


# ---------------------------------------------------------------------------
# Overfitting monitor


@dataclass
class OverfittingReport:
    diverging: bool
    window: int
    gap_values: list[float]
    metric_values: list[float]
    detail: str


def monitor_overfitting(
    logit_history: list[tuple[int, float, float]],
    eval_history: list[tuple[int, float]],
    window: int = 3,
) -> OverfittingReport:
    """Flag the diverging-logits failure mode.

    `logit_history` rows are (step, real_logit_mean, fake_logit_mean) and
    `eval_history` rows are (step, metric) where lower metric is better. The
    run is flagged when, over the last `window` evaluation points, the
    real-fake logit gap grows monotonically while the metric worsens.
    """
    if len(eval_history) < 2:
        raise ValueError("need at least two evaluation points")
    eval_tail = eval_history[-window:]
    gaps = []
    for step, _ in eval_tail:
        usable = [(s, r - f) for s, r, f in logit_history if s <= step]
        if not usable:
            usable = [(s, r - f) for s, r, f in logit_history[:1]]
        gaps.append(usable[-1][1])
    metrics = [m for _, m in eval_tail]
    gap_up = all(b > a for a, b in zip(gaps, gaps[1:]))
    metric_worsening = all(b > a for a, b in zip(metrics, metrics[1:]))
    diverging = len(eval_tail) >= 2 and gap_up and metric_worsening
    if diverging:
        detail = "logit gap and evaluation metric both increase monotonically"
    elif gap_up:
        detail = "logit gap grows but the evaluation metric is not worsening"
    else:
        detail = "no monotone logit-gap growth"
    return OverfittingReport(
        diverging=diverging,
        window=len(eval_tail),
        gap_values=gaps,
        metric_values=metrics,
        detail=detail,
    )


# ---------------------------------------------------------------------------
# Trainer


@dataclass
class TrainStepResult:
    step: int
    d_loss: float
    g_loss: float
    r1: float
    logit_real: float
    logit_fake: float

    def as_dict(self) -> dict:
        return asdict(self)


def batch_to_tensors(batch: dict) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
    image = torch.from_numpy(np.ascontiguousarray(batch["image"]))
    mask = torch.from_numpy(np.ascontiguousarray(batch["mask"]))
    cond = None
    if batch.get("cond") is not None:
        cond = torch.from_numpy(np.ascontiguousarray(batch["cond"]))
    return image, mask, cond


def train_step(
    generator: Generator,
    discriminator: Discriminator,
    batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor | None],
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
    z: torch.Tensor,
    config: TrainConfig,
    step: int = 0,
) -> TrainStepResult:
    """One alternating discriminator/generator update."""
    image, mask, cond = batch
    if generator.config.condition != CONDITION_DENSE:
        cond = None

    # --- discriminator step
    with torch.no_grad():
        fake = generator.synthesize(image, mask, z, cond=cond)
    real_logits = discriminator(image, mask, cond)
    fake_logits = discriminator(fake, mask, cond)
    loss_d = d_loss_fn(real_logits, fake_logits, config.loss)
    r1 = r1_penalty(discriminator, image, mask, cond)
    # the drift term anchors the logit scale, which neither loss pins down
    drift = real_logits.square().mean()
    loss_d_total = loss_d + 0.5 * config.r1_gamma * r1 + config.logit_drift * drift
    opt_d.zero_grad(set_to_none=True)
    loss_d_total.backward()
    opt_d.step()

    # --- generator step
    fake = generator.synthesize(image, mask, z, cond=cond)
    fake_logits_g = discriminator(fake, mask, cond)
    loss_g = g_loss_fn(fake_logits_g, config.loss)
    opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    opt_g.step()

    result = TrainStepResult(
        step=step,
        d_loss=float(loss_d.detach()),
        g_loss=float(loss_g.detach()),
        r1=float(r1.detach()),
        logit_real=float(real_logits.mean().detach()),
        logit_fake=float(fake_logits.mean().detach()),
    )
    if not all(np.isfinite(v) for v in (result.d_loss, result.g_loss, result.r1)):
        snapshot = {
            "step": step,
            "losses": result.as_dict(),
            "grad_norm_g": _grad_norm(generator),
            "grad_norm_d": _grad_norm(discriminator),
        }
        raise TrainingDivergedError(f"non-finite loss at step {step}", snapshot)
    return result


def _grad_norm(module: nn.Module) -> float:
    total = 0.0
    for p in module.parameters():
        if p.grad is not None:
            total += float(p.grad.square().sum())
    return float(np.sqrt(total))


class Trainer:
    """Single-driver training loop with reproducible checkpoints.

    Checkpoints carry the model, EMA, both optimizers, the batch sampler state
    and the torch RNG state; resuming reproduces the next step's losses
    exactly.
    """

    def __init__(
        self,
        generator_config: GeneratorConfig,
        train_config: TrainConfig,
        dataset,
        out_dir: str | Path | None = None,
    ):
        self.g_config = generator_config
        self.config = train_config
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        torch.manual_seed(train_config.seed)
        self.generator = Generator(generator_config)
        self.g_ema = Generator(generator_config)
        self.g_ema.load_state_dict(self.generator.state_dict())
        for p in self.g_ema.parameters():
            p.requires_grad_(False)
        self.discriminator = Discriminator(generator_config)
        self.opt_g = torch.optim.Adam(
            self.generator.parameters(),
            lr=train_config.lr,
            betas=train_config.adam_betas,
            eps=train_config.adam_eps,
        )
        self.opt_d = torch.optim.Adam(
            self.discriminator.parameters(),
            lr=train_config.lr,
            betas=train_config.adam_betas,
            eps=train_config.adam_eps,
        )
        self.augment = AugmentationPipeline(train_config.augmentation)
        self.sampler = np.random.default_rng(np.random.SeedSequence(train_config.seed, spawn_key=(1,)))
        self.step = 0
        self._metrics_path = self.out_dir / "metrics.jsonl" if self.out_dir else None

    def _next_batch(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
        indices = self.sampler.integers(0, len(self.dataset), size=self.config.batch_size)
        batch = self.dataset.batch(indices)
        batch = self.augment(batch, self.sampler)
        return batch_to_tensors(batch)

    def run_step(self) -> TrainStepResult:
        batch = self._next_batch()
        z = torch.randn(batch[0].shape[0], self.g_config.z_dim)
        result = train_step(
            self.generator,
            self.discriminator,
            batch,
            self.opt_g,
            self.opt_d,
            z,
            self.config,
            step=self.step,
        )
        ema_update(self.generator, self.g_ema, self.config.ema_decay)
        self.step += 1
        return result

    def train(self, steps: int | None = None, log_every: int = 50, eval_fn=None, eval_every: int = 0):
        steps = steps if steps is not None else self.config.steps
        history = []
        start = time.time()
        for _ in range(steps):
            result = self.run_step()
            record = result.as_dict()
            if eval_fn is not None and eval_every and self.step % eval_every == 0:
                record["fid_eval"] = float(eval_fn(self))
            if self.step % log_every == 0 or self.step == 1:
                record["elapsed_s"] = round(time.time() - start, 2)
            self._log(record)
            history.append(record)
        return history

    def _log(self, record: dict) -> None:
        if self._metrics_path is not None:
            with self._metrics_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")

    # -- checkpointing ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "format": "idveil-train",
                "step": self.step,
                "generator_config": asdict(self.g_config),
                "train_config": asdict(self.config),
                "generator": self.generator.state_dict(),
                "g_ema": self.g_ema.state_dict(),
                "discriminator": self.discriminator.state_dict(),
                "opt_g": self.opt_g.state_dict(),
                "opt_d": self.opt_d.state_dict(),
                "torch_rng": torch.get_rng_state(),
                "sampler_state": self.sampler.bit_generator.state,
            },
            path,
        )

    def restore(self, path: str | Path) -> None:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format") != "idveil-train":
            raise ValueError(f"{path} is not a training checkpoint")
        self.step = payload["step"]
        self.generator.load_state_dict(payload["generator"])
        self.g_ema.load_state_dict(payload["g_ema"])
        self.discriminator.load_state_dict(payload["discriminator"])
        self.opt_g.load_state_dict(payload["opt_g"])
        self.opt_d.load_state_dict(payload["opt_d"])
        torch.set_rng_state(payload["torch_rng"])
        self.sampler.bit_generator.state = payload["sampler_state"]

    def export_generator(self, path: str | Path) -> None:
        save_checkpoint(path, self.generator, ema=self.g_ema, step=self.step)

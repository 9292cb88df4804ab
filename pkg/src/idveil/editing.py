"""Editing in the generator's intermediate latent space.

Two controls are exposed over w-space:

* multi-modal truncation — w vectors are pulled toward the nearest of K
  cluster centers fitted to a sample of mapped latents, instead of toward a
  single global mean, which trades diversity for fidelity without collapsing
  distinct modes;
* named global directions — unit vectors found by optimizing an attribute
  scorer over a batch of synthesis contexts, then applied with a signed
  strength.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .generator import Generator


@dataclass(frozen=True)
class LatentCenters:
    centers: np.ndarray  # (k, w_dim)

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ValueError("centers must be (k, w_dim) with k >= 1")
        object.__setattr__(self, "centers", centers)

    @property
    def k(self) -> int:
        return self.centers.shape[0]


def fit_centers(samples: np.ndarray, k: int, seed: int = 0, n_iter: int = 100) -> LatentCenters:
    """Lloyd's k-means over latent samples.

    Initialization picks k distinct samples; empty clusters are reseeded to
    the point farthest from its assigned center. k == 1 reduces to the mean
    and k == n returns the samples themselves.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError(f"expected (n, d) samples, got {samples.shape}")
    n = samples.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} samples")
    if k == 1:
        return LatentCenters(samples.mean(axis=0, keepdims=True))
    if k == n:
        return LatentCenters(samples.copy())

    rng = np.random.default_rng(seed)
    centers = samples[rng.choice(n, size=k, replace=False)].copy()
    assignment = np.full(n, -1)
    for _ in range(n_iter):
        d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assignment = d2.argmin(axis=1)
        for ci in range(k):
            members = samples[new_assignment == ci]
            if len(members) == 0:
                worst = d2[np.arange(n), new_assignment].argmax()
                centers[ci] = samples[worst]
                new_assignment[worst] = ci
            else:
                centers[ci] = members.mean(axis=0)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return LatentCenters(centers)


def sample_centers(generator: Generator, k: int, n_samples: int = 512, seed: int = 0) -> LatentCenters:
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n_samples, generator.config.z_dim, generator=g)
    with torch.no_grad():
        w = generator.map_latent(z)
    return fit_centers(w.numpy(), k, seed=seed)


def truncate(w: np.ndarray, centers: LatentCenters, psi: float) -> np.ndarray:
    """Interpolate each w toward its nearest center: c + psi * (w - c).

    psi = 1 is the identity; psi = 0 snaps to the nearest center.
    """
    w = np.asarray(w, dtype=np.float64)
    squeeze = w.ndim == 1
    w2 = w[None] if squeeze else w
    if w2.shape[1] != centers.centers.shape[1]:
        raise ValueError("w dimension does not match centers")
    d2 = ((w2[:, None, :] - centers.centers[None, :, :]) ** 2).sum(axis=2)
    nearest = centers.centers[d2.argmin(axis=1)]
    out = nearest + psi * (w2 - nearest)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Global directions


@dataclass(frozen=True)
class EditDirection:
    """A named style-space direction, unit-normalized at rest.

    The zero vector is permitted only as the degenerate output of a search
    run for zero steps; applying it is the identity.
    """

    name: str
    direction: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.direction, dtype=np.float64)
        if vec.ndim != 1:
            raise ValueError("direction must be a vector")
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec = vec / norm
        object.__setattr__(self, "direction", vec)


def apply_direction(w: np.ndarray, direction, strength: float) -> np.ndarray:
    """w + strength * direction, batched or single."""
    w = np.asarray(w, dtype=np.float64)
    vec = direction.direction if isinstance(direction, EditDirection) else direction
    vec = np.asarray(vec, dtype=np.float64)
    if w.shape[-1] != vec.shape[-1]:
        raise ValueError("direction dimension does not match w")
    if strength == 0.0:
        return w.copy()
    return w + strength * vec


@dataclass
class DirectionSearchConfig:
    n_images: int = 256
    steps: int = 50
    lr: float = 0.05
    strengths: tuple[float, ...] = (1.0,)
    drift_weight: float = 0.1
    seed: int = 0


def find_global_direction(
    generator: Generator,
    scorer,
    prompt: str,
    contexts: list[dict],
    config: DirectionSearchConfig | None = None,
    name: str | None = None,
) -> EditDirection:
    """Optimize one direction d in w-space that pushes syntheses toward `prompt`.

    `scorer(images, prompt)` maps a (n, 3, h, w) tensor in [0, 1] and the
    prompt to a scalar the search should increase (a text-image similarity
    model in production; synthetic scorers in tests). Each context is a dict
    with image/mask[/cond]/z tensors; the same d is shared across all of them
    so the edit is global rather than per-image, and the loss is averaged over
    the strength schedule. A drift penalty against the unedited synthesis
    keeps the edit from repainting the whole region. Zero steps returns the
    zero direction.
    """
    config = config or DirectionSearchConfig()
    if not contexts:
        raise ValueError("need at least one synthesis context")
    torch.manual_seed(config.seed)
    direction = torch.zeros(generator.config.w_dim, requires_grad=True)
    opt = torch.optim.Adam([direction], lr=config.lr)

    prepared = []
    for ctx in contexts[: config.n_images]:
        image = ctx["image"]
        mask = ctx["mask"]
        cond = ctx.get("cond")
        z = ctx["z"]
        with torch.no_grad():
            w = generator.map_latent(z)
            base = generator(image * mask, mask, z, cond=cond, w=w)
        prepared.append((image, mask, cond, w, base))

    for _ in range(config.steps):
        loss = torch.zeros(())
        for image, mask, cond, w, base in prepared:
            for strength in config.strengths:
                w_edit = w + strength * direction.unsqueeze(0)
                edited = generator(image * mask, mask, None, cond=cond, w=w_edit)
                loss = loss - scorer(edited, prompt) / len(config.strengths)
                loss = loss + config.drift_weight * ((edited - base) ** 2).mean() / len(
                    config.strengths
                )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    found = direction.detach().numpy().astype(np.float64)
    return EditDirection(name=name or prompt, direction=found)


def brightness_scorer(images: torch.Tensor, prompt: str = "") -> torch.Tensor:
    return images.mean()


# ---------------------------------------------------------------------------
# Direction store


def save_directions(path: str | Path, directions: list[EditDirection]) -> None:
    payload = {d.name: d.direction.tolist() for d in directions}
    Path(path).write_text(
        json.dumps({"format": "idveil-directions", "directions": payload}, indent=2)
    )


def load_directions(path: str | Path) -> dict[str, EditDirection]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "idveil-directions":
        raise ValueError(f"{path} is not a directions file")
    return {
        name: EditDirection(name=name, direction=np.asarray(vec, dtype=np.float64))
        for name, vec in payload["directions"].items()
    }

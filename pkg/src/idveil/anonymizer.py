"""Full-image anonymization by recursive stitching.

Detections are synthesized one at a time in ascending order of pixel
coverage, each generator seeing the current canvas — including previously
stitched people — as context, so foreground persons are synthesized last and
own any overlap. Crops are taken by expanding the detection box to the
generator's aspect ratio (never by non-uniform scaling), with reflect padding
at frame borders; synthesized patches are pasted back only inside the
detection's own region mask, so everything else stays bit-exact.

Traditional baselines (pixelation, mask-out) run through the same plan for
comparable region handling.

Frames are (H, W, 3) float32 in [0, 1] throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch

from .detection import Category, FusedDetection
from .generator import Generator, compose, z_from_numpy
from .geometry import mask_bbox

LATENT_DIM = 512

GENERATOR_BY_CATEGORY = {
    Category.PERSON_WITH_DENSE: "body_dense",
    Category.PERSON_PLAIN: "body",
    Category.FACE_ONLY: "face",
}


def derive_latent(seed: int, index: int, dim: int = LATENT_DIM) -> np.ndarray:
    """Latent material for detection `index` under a frame seed.

    Keyed on the pre-sort detection index so a detection keeps its latent no
    matter where it lands in the stitch order.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    return rng.standard_normal(dim).astype(np.float32)


# ---------------------------------------------------------------------------
# Crop geometry


@dataclass(frozen=True)
class CropTransform:
    """Maps a frame-coordinate rect to a fixed-resolution generator crop.

    The rect is an integer multiple of the target's reduced aspect unit, so
    scaling is uniform in both axes; parts of the rect outside the frame are
    reflect-padded on extraction and ignored on paste.
    """

    rect: tuple[int, int, int, int]  # x0, y0, x1, y1 in frame coords
    target: tuple[int, int]          # (h, w)
    frame_shape: tuple[int, int]     # (H, W)

    @property
    def rect_size(self) -> tuple[int, int]:
        x0, y0, x1, y1 = self.rect
        return (y1 - y0, x1 - x0)

    def _padded_window(self, array: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = self.rect
        h, w = array.shape[:2]
        top, bottom = max(0, -y0), max(0, y1 - h)
        left, right = max(0, -x0), max(0, x1 - w)
        if top or bottom or left or right:
            array = cv2.copyMakeBorder(array, top, bottom, left, right, cv2.BORDER_REFLECT)
        return array[y0 + top : y1 + top, x0 + left : x1 + left]

    def extract_image(self, frame: np.ndarray) -> np.ndarray:
        window = self._padded_window(frame.astype(np.float32))
        th, tw = self.target
        return cv2.resize(window, (tw, th), interpolation=cv2.INTER_LINEAR)

    def extract_mask(self, mask: np.ndarray) -> np.ndarray:
        window = self._padded_window(mask.astype(np.float32))
        th, tw = self.target
        out = cv2.resize(window, (tw, th), interpolation=cv2.INTER_NEAREST)
        return (out > 0.5).astype(np.float32)

    def extract_map(self, channels_first: np.ndarray) -> np.ndarray:
        """Crops a (C, H, W) map, bilinear per channel."""
        th, tw = self.target
        out = np.empty((channels_first.shape[0], th, tw), dtype=np.float32)
        for c in range(channels_first.shape[0]):
            window = self._padded_window(channels_first[c].astype(np.float32))
            out[c] = cv2.resize(window, (tw, th), interpolation=cv2.INTER_LINEAR)
        return out

    def paste(self, frame: np.ndarray, patch: np.ndarray, region: np.ndarray) -> None:
        """Writes the patch back into `frame`, only where `region` is set."""
        x0, y0, x1, y1 = self.rect
        rh, rw = self.rect_size
        resized = cv2.resize(patch, (rw, rh), interpolation=cv2.INTER_LINEAR)
        h, w = frame.shape[:2]
        fx0, fy0 = max(0, x0), max(0, y0)
        fx1, fy1 = min(w, x1), min(h, y1)
        if fx0 >= fx1 or fy0 >= fy1:
            return
        sub = region[fy0:fy1, fx0:fx1] > 0
        frame[fy0:fy1, fx0:fx1][sub] = np.clip(
            resized[fy0 - y0 : fy1 - y0, fx0 - x0 : fx1 - x0][sub], 0.0, 1.0
        )


def crop_for_detection(
    detection: FusedDetection,
    target: tuple[int, int],
    frame_shape: tuple[int, int],
    margin: float = 0.15,
) -> CropTransform:
    """Expands the detection box to the target aspect with a context margin.

    The rect's integer size is an exact multiple of the reduced target aspect
    (e.g. 9:5 for 288x160), so the resize is uniform.
    """
    th, tw = target
    unit = math.gcd(th, tw)
    uh, uw = th // unit, tw // unit
    x0, y0, x1, y1 = detection.bbox
    bw, bh = (x1 - x0) * (1 + margin), (y1 - y0) * (1 + margin)
    k = max(1, math.ceil(max(bh / uh, bw / uw)))
    rh, rw = k * uh, k * uw
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    rx0 = int(round(cx - rw / 2.0))
    ry0 = int(round(cy - rh / 2.0))
    return CropTransform(
        rect=(rx0, ry0, rx0 + rw, ry0 + rh), target=target, frame_shape=frame_shape
    )


# ---------------------------------------------------------------------------
# Planning


@dataclass(frozen=True)
class PlanEntry:
    detection: FusedDetection
    generator_id: str
    latent: np.ndarray
    source_index: int  # index in the pre-sort detection list


@dataclass(frozen=True)
class AnonymizationPlan:
    entries: tuple[PlanEntry, ...]

    def __post_init__(self):
        coverages = [e.detection.coverage for e in self.entries]
        if any(b < a for a, b in zip(coverages, coverages[1:])):
            raise ValueError("plan entries must be sorted by ascending coverage")

    def audit(self) -> list[dict]:
        return [
            {
                "order": i,
                "detection_index": e.source_index,
                "generator": e.generator_id,
                "category": e.detection.category.name,
                "coverage": e.detection.coverage,
                "bbox": [float(v) for v in e.detection.bbox],
            }
            for i, e in enumerate(self.entries)
        ]


def plan(
    detections: list[FusedDetection],
    latents: list[np.ndarray] | None = None,
    seed: int = 0,
) -> AnonymizationPlan:
    """Orders detections by ascending pixel coverage (stable on ties) and
    routes each category to its generator.

    `latents` (e.g. from the tracker) bind identities explicitly; otherwise
    each detection's latent derives from (seed, detection index).
    """
    if latents is not None and len(latents) != len(detections):
        raise ValueError("latents must align one-to-one with detections")
    entries = []
    for i, det in enumerate(detections):
        latent = latents[i] if latents is not None else derive_latent(seed, i)
        entries.append(
            PlanEntry(
                detection=det,
                generator_id=GENERATOR_BY_CATEGORY[det.category],
                latent=np.asarray(latent, dtype=np.float32),
                source_index=i,
            )
        )
    entries.sort(key=lambda e: e.detection.coverage)
    return AnonymizationPlan(entries=tuple(entries))


# ---------------------------------------------------------------------------
# Rendering


class StitchError(RuntimeError):
    """Synthesis failed mid-plan; carries how far the canvas got."""

    def __init__(self, entry_index: int, canvas: np.ndarray, cause: Exception):
        super().__init__(f"stitching aborted at plan entry {entry_index}: {cause}")
        self.entry_index = entry_index
        self.canvas = canvas
        self.cause = cause


@dataclass
class RenderResult:
    image: np.ndarray                 # (H, W, 3) float32
    provenance: np.ndarray            # (H, W) int32, plan-order index of the last writer, -1 untouched
    audit: list[dict]
    patches: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    # patches[i] = (flat index array into H*W, written rgb values), per plan entry


def _validate_frame(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) frame, got {image.shape}")
    return image


def _synthesize_entry(
    canvas: np.ndarray, entry: PlanEntry, generator: Generator, psi_centers=None,
    psi: float = 1.0, directions: list | None = None,
) -> tuple[CropTransform, np.ndarray]:
    from .editing import apply_direction, truncate  # local import to avoid a cycle

    det = entry.detection
    transform = crop_for_detection(
        det,
        generator.config.input_resolution,
        canvas.shape[:2],
        margin=0.15 if det.category != Category.FACE_ONLY else 0.2,
    )
    crop = transform.extract_image(canvas)
    region_crop = transform.extract_mask(det.anonymization_region)
    keep = 1.0 - region_crop

    image_t = torch.from_numpy(np.ascontiguousarray(crop.transpose(2, 0, 1)))[None]
    keep_t = torch.from_numpy(keep)[None, None]
    cond_t = None
    if generator.config.condition != "none":
        if det.dense_embedding is None:
            raise ValueError("dense-conditioned generator without an embedding")
        cond_t = torch.from_numpy(transform.extract_map(det.dense_embedding))[None]

    z = z_from_numpy(entry.latent, generator.config)
    with torch.no_grad():
        w = generator.map_latent(z)
        w_np = w.numpy().astype(np.float64)
        if psi_centers is not None and psi < 1.0:
            w_np = truncate(w_np, psi_centers, psi)
        for direction, strength in directions or []:
            w_np = apply_direction(w_np, direction, strength)
        w = torch.from_numpy(w_np.astype(np.float32))
        generated = generator(image_t * keep_t, keep_t, None, cond=cond_t, w=w)
        composed = compose(image_t, keep_t, generated)
    patch = composed[0].numpy().transpose(1, 2, 0)
    return transform, patch


def anonymize_image(
    image: np.ndarray,
    plan_: AnonymizationPlan,
    generators: dict[str, Generator],
    psi_centers=None,
    psi: float = 1.0,
    directions: list | None = None,
    collect_patches: bool = False,
) -> RenderResult:
    """Renders the plan recursively on a copy of the input frame.

    Each entry is cropped from the *current* canvas, synthesized, and pasted
    back only inside its own region mask; pixels outside the union of all
    regions are returned bit-exact.
    """
    canvas = _validate_frame(image).copy()
    h, w = canvas.shape[:2]
    provenance = np.full((h, w), -1, dtype=np.int32)
    patches: list[tuple[np.ndarray, np.ndarray]] = []

    for i, entry in enumerate(plan_.entries):
        generator = generators.get(entry.generator_id)
        if generator is None:
            raise StitchError(i, canvas, KeyError(f"no generator {entry.generator_id!r}"))
        try:
            transform, patch = _synthesize_entry(
                canvas, entry, generator, psi_centers, psi, directions
            )
            transform.paste(canvas, patch, entry.detection.anonymization_region)
        except StitchError:
            raise
        except Exception as exc:
            raise StitchError(i, canvas, exc) from exc
        region = entry.detection.anonymization_region > 0
        provenance[region] = i
        if collect_patches:
            flat = np.flatnonzero(region)
            patches.append((flat, canvas.reshape(-1, 3)[flat].copy()))

    return RenderResult(image=canvas, provenance=provenance, audit=plan_.audit(), patches=patches)


def resample_entry(
    image: np.ndarray,
    plan_: AnonymizationPlan,
    base: RenderResult,
    entry_order: int,
    new_latent: np.ndarray,
    generators: dict[str, Generator],
    psi_centers=None,
    psi: float = 1.0,
    directions: list | None = None,
) -> RenderResult:
    """Re-synthesizes one plan entry against the cached base render.

    Entries before and after it are replayed from their cached patches, so
    the re-run entry sees exactly the context it saw in the base render and
    pixels owned by other entries cannot change.
    """
    if not base.patches:
        raise ValueError("base render was produced without collect_patches")
    if not 0 <= entry_order < len(plan_.entries):
        raise IndexError(f"no plan entry {entry_order}")
    canvas = _validate_frame(image).copy()
    h, w = canvas.shape[:2]
    provenance = np.full((h, w), -1, dtype=np.int32)
    patches: list[tuple[np.ndarray, np.ndarray]] = []

    for i, entry in enumerate(plan_.entries):
        region = entry.detection.anonymization_region > 0
        if i == entry_order:
            new_entry = PlanEntry(
                detection=entry.detection,
                generator_id=entry.generator_id,
                latent=np.asarray(new_latent, dtype=np.float32),
                source_index=entry.source_index,
            )
            generator = generators[new_entry.generator_id]
            try:
                transform, patch = _synthesize_entry(
                    canvas, new_entry, generator, psi_centers, psi, directions
                )
                transform.paste(canvas, patch, entry.detection.anonymization_region)
            except Exception as exc:
                raise StitchError(i, canvas, exc) from exc
            flat = np.flatnonzero(region)
            patches.append((flat, canvas.reshape(-1, 3)[flat].copy()))
        else:
            flat, values = base.patches[i]
            canvas.reshape(-1, 3)[flat] = values
            patches.append((flat, values))
        provenance[region] = i

    return RenderResult(image=canvas, provenance=provenance, audit=plan_.audit(), patches=patches)


# ---------------------------------------------------------------------------
# Traditional baselines


def pixelate(image: np.ndarray, region: np.ndarray, grid: int) -> np.ndarray:
    """Pixelates the region: its bounding box is split into grid x grid cells
    and each cell's region pixels are replaced by their mean color."""
    if grid < 1:
        raise ValueError("grid must be >= 1")
    image = _validate_frame(image).copy()
    region = np.asarray(region) > 0
    if not region.any():
        return image
    x0, y0, x1, y1 = mask_bbox(region)
    ys = np.linspace(y0, y1, grid + 1).round().astype(int)
    xs = np.linspace(x0, x1, grid + 1).round().astype(int)
    for gy in range(grid):
        for gx in range(grid):
            cell = np.zeros_like(region)
            cell[ys[gy] : ys[gy + 1], xs[gx] : xs[gx + 1]] = True
            cell &= region
            if cell.any():
                image[cell] = image[cell].mean(axis=0)
    return image


def mask_out(image: np.ndarray, region: np.ndarray, fill: float = 0.0) -> np.ndarray:
    image = _validate_frame(image).copy()
    region = np.asarray(region) > 0
    image[region] = fill
    return image


def anonymize_traditional(
    image: np.ndarray, plan_: AnonymizationPlan, mode: str
) -> RenderResult:
    """Runs pixelation or mask-out through the same ascending-order plan."""
    canvas = _validate_frame(image).copy()
    h, w = canvas.shape[:2]
    provenance = np.full((h, w), -1, dtype=np.int32)
    patches: list[tuple[np.ndarray, np.ndarray]] = []
    for i, entry in enumerate(plan_.entries):
        region = entry.detection.anonymization_region
        if mode == "pixelate8":
            canvas = pixelate(canvas, region, 8)
        elif mode == "pixelate16":
            canvas = pixelate(canvas, region, 16)
        elif mode == "maskout":
            canvas = mask_out(canvas, region)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        mask = region > 0
        provenance[mask] = i
        flat = np.flatnonzero(mask)
        patches.append((flat, canvas.reshape(-1, 3)[flat].copy()))
    return RenderResult(image=canvas, provenance=provenance, audit=plan_.audit(), patches=patches)

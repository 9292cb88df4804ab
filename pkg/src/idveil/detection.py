"""Detector-ensemble fusion.

Three detector families feed one pipeline: a face detector (boxes only), an
instance segmenter (boxes + masks) and a dense-pose estimator (boxes + masks +
a 16-channel per-pixel body-surface embedding). Their raw outputs are fused
into per-person detections of three categories:

* PERSON_WITH_DENSE -- a dense-pose detection, optionally merged with an
  overlapping instance segmentation (the anonymization region is the union of
  both masks so hair/accessories picked up by the segmenter are covered too).
* PERSON_PLAIN      -- an instance segmentation with no dense-pose match.
* FACE_ONLY         -- a face box not explained by any person segmentation.

Merging uses mask IoU with a 0.4 default threshold; face boxes whose center
falls inside any person segmentation are dropped.
"""

from __future__ import annotations

import enum
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    Box,
    box_center,
    box_iou,
    box_to_mask,
    box_union,
    clamp_box,
    mask_iou,
    rle_to_mask,
)

DEFAULT_IOU_MERGE = 0.4

DENSE_EMBEDDING_CHANNELS = 16


class Source(enum.Enum):
    FACE = "face"
    INSTANCE_SEG = "instance_seg"
    DENSE_POSE = "dense_pose"


class Category(enum.Enum):
    PERSON_WITH_DENSE = "person_with_dense"
    PERSON_PLAIN = "person_plain"
    FACE_ONLY = "face_only"


# Per-source confidence thresholds. The market1501 profile matches the
# thresholds used for the low-resolution re-id benchmark; the default profile
# is a balanced general-purpose setting.
THRESHOLD_PROFILES: dict[str, dict[Source, float]] = {
    "default": {Source.FACE: 0.3, Source.INSTANCE_SEG: 0.3, Source.DENSE_POSE: 0.3},
    "market1501": {Source.FACE: 0.5, Source.INSTANCE_SEG: 0.1, Source.DENSE_POSE: 0.3},
}


@dataclass(frozen=True)
class RawDetection:
    """A single detector output in frame coordinates."""

    source: Source
    bbox: Box
    confidence: float
    segmentation: np.ndarray | None = None
    dense_embedding: np.ndarray | None = None

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if (self.segmentation is None) != (self.source == Source.FACE):
            raise ValueError("segmentation must be present iff source is not FACE")
        if (self.dense_embedding is not None) != (self.source == Source.DENSE_POSE):
            raise ValueError("dense_embedding must be present iff source is DENSE_POSE")
        if self.dense_embedding is not None and self.dense_embedding.shape[0] != DENSE_EMBEDDING_CHANNELS:
            raise ValueError(
                f"dense embedding must have {DENSE_EMBEDDING_CHANNELS} channels, "
                f"got {self.dense_embedding.shape[0]}"
            )


@dataclass(frozen=True)
class FusedDetection:
    """A categorized per-person detection after ensemble fusion."""

    category: Category
    bbox: Box
    anonymization_region: np.ndarray
    confidence: float
    contributor_ids: tuple[int, ...]
    dense_embedding: np.ndarray | None = None

    def __post_init__(self):
        if self.category == Category.PERSON_WITH_DENSE and self.dense_embedding is None:
            raise ValueError("PERSON_WITH_DENSE requires a dense embedding")

    @property
    def coverage(self) -> int:
        """Number of pixels the detection covers; the stitch ordering key."""
        return int(np.count_nonzero(self.anonymization_region))


class DetectorAdapter:
    """Wraps one detector behind a uniform interface.

    Subclasses implement `_detect`. Adapters holding device state that cannot
    be shared set `allow_concurrent = False`; the ensemble then serializes
    calls through the adapter's lock.
    """

    allow_concurrent = True

    def __init__(self, identity: str, confidence_threshold: float = 0.0):
        self.identity = identity
        self.confidence_threshold = confidence_threshold
        self._lock = threading.Lock()

    def detect(self, image: np.ndarray) -> list[RawDetection]:
        if self.allow_concurrent:
            return self._detect(image)
        with self._lock:
            return self._detect(image)

    def _detect(self, image: np.ndarray) -> list[RawDetection]:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.identity!r})"


class StubAdapter(DetectorAdapter):
    """Deterministic adapter replaying annotation records.

    Record format (one JSON object per detection):
        {"source": "face" | "instance_seg" | "dense_pose",
         "bbox": [x0, y0, x1, y1],
         "confidence": 0.97,
         "mask": {"size": [H, W], "rows": [...]},     # absent for faces
         "embedding_file": "emb.npy"}                  # dense_pose only
    """

    def __init__(self, identity: str, records: list[dict], root: Path | None = None):
        super().__init__(identity)
        self.records = records
        self.root = Path(root) if root is not None else None

    @classmethod
    def from_file(cls, path: str | Path, source: str | None = None) -> "StubAdapter":
        path = Path(path)
        records = json.loads(path.read_text())
        if source is not None:
            records = [r for r in records if r["source"] == source]
        name = f"stub:{source}" if source else f"stub:{path.stem}"
        return cls(name, records, root=path.parent)

    def _detect(self, image: np.ndarray) -> list[RawDetection]:
        h, w = image.shape[:2]
        out = []
        for rec in self.records:
            source = Source(rec["source"])
            seg = rle_to_mask(rec["mask"]) if "mask" in rec and rec["mask"] is not None else None
            emb = None
            if "embedding_file" in rec and rec["embedding_file"] is not None:
                emb_path = Path(rec["embedding_file"])
                if self.root is not None and not emb_path.is_absolute():
                    emb_path = self.root / emb_path
                emb = np.load(emb_path)
            out.append(
                RawDetection(
                    source=source,
                    bbox=clamp_box(tuple(rec["bbox"]), w, h),
                    confidence=float(rec["confidence"]),
                    segmentation=seg,
                    dense_embedding=emb,
                )
            )
        return out


@dataclass
class AdapterError:
    adapter: str
    error: str


@dataclass
class EnsembleOutput:
    detections: list[RawDetection]
    errors: list[AdapterError] = field(default_factory=list)


def detect_all(
    image: np.ndarray,
    adapters: list[DetectorAdapter],
    thresholds: dict[Source, float] | str = "default",
) -> EnsembleOutput:
    """Run every adapter, filter by per-source confidence thresholds.

    A failing adapter is recorded and the remaining adapters still run; the
    ensemble itself is the fallback mechanism when one modality fails.
    """
    if not adapters:
        raise ValueError("at least one adapter is required")
    if isinstance(thresholds, str):
        thresholds = THRESHOLD_PROFILES[thresholds]
    detections: list[RawDetection] = []
    errors: list[AdapterError] = []
    for adapter in adapters:
        try:
            raw = adapter.detect(image)
        except Exception as exc:  # noqa: BLE001 - adapter isolation is the contract
            errors.append(AdapterError(adapter=adapter.identity, error=str(exc)))
            continue
        for det in raw:
            threshold = max(adapter.confidence_threshold, thresholds.get(det.source, 0.0))
            if det.confidence >= threshold:
                detections.append(det)
    return EnsembleOutput(detections=detections, errors=errors)


def _pair_iou(a: RawDetection, b: RawDetection) -> float:
    """Mask IoU when both masks exist, box IoU as the fallback."""
    if a.segmentation is not None and b.segmentation is not None:
        return mask_iou(a.segmentation, b.segmentation)
    return box_iou(a.bbox, b.bbox)


def fuse(raw: list[RawDetection], iou_merge: float = DEFAULT_IOU_MERGE) -> list[FusedDetection]:
    """Fuse raw ensemble outputs into categorized per-person detections.

    Dense-pose and instance-seg detections whose segmentations overlap with
    IoU > `iou_merge` are the same individual: they merge into a
    PERSON_WITH_DENSE whose region is the union of both masks. Association is
    greedy by descending IoU, one-to-one. Unmatched instance segmentations
    become PERSON_PLAIN, unmatched dense-pose detections keep their own mask
    as PERSON_WITH_DENSE. Face boxes whose center lies inside any person
    segmentation are discarded; the rest become FACE_ONLY with the region
    rasterized from the face box.
    """
    if not 0.0 < iou_merge < 1.0:
        raise ValueError(f"iou_merge must be in (0, 1), got {iou_merge}")

    dense = [(i, d) for i, d in enumerate(raw) if d.source == Source.DENSE_POSE]
    seg = [(i, d) for i, d in enumerate(raw) if d.source == Source.INSTANCE_SEG]
    faces = [(i, d) for i, d in enumerate(raw) if d.source == Source.FACE]

    pairs = []
    for di, (i, d) in enumerate(dense):
        for si, (j, s) in enumerate(seg):
            overlap = _pair_iou(d, s)
            if overlap > iou_merge:
                pairs.append((overlap, di, si))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))

    matched_dense: dict[int, int] = {}
    matched_seg: set[int] = set()
    for overlap, di, si in pairs:
        if di in matched_dense or si in matched_seg:
            continue
        matched_dense[di] = si
        matched_seg.add(si)

    fused: list[FusedDetection] = []
    person_masks: list[np.ndarray] = []
    for di, (i, d) in enumerate(dense):
        if di in matched_dense:
            j, s = seg[matched_dense[di]]
            region = np.logical_or(d.segmentation, s.segmentation).astype(np.uint8)
            fused.append(
                FusedDetection(
                    category=Category.PERSON_WITH_DENSE,
                    bbox=box_union(d.bbox, s.bbox),
                    anonymization_region=region,
                    confidence=max(d.confidence, s.confidence),
                    contributor_ids=(i, j),
                    dense_embedding=d.dense_embedding,
                )
            )
        else:
            fused.append(
                FusedDetection(
                    category=Category.PERSON_WITH_DENSE,
                    bbox=d.bbox,
                    anonymization_region=d.segmentation.astype(np.uint8),
                    confidence=d.confidence,
                    contributor_ids=(i,),
                    dense_embedding=d.dense_embedding,
                )
            )
    for si, (j, s) in enumerate(seg):
        if si not in matched_seg:
            fused.append(
                FusedDetection(
                    category=Category.PERSON_PLAIN,
                    bbox=s.bbox,
                    anonymization_region=s.segmentation.astype(np.uint8),
                    confidence=s.confidence,
                    contributor_ids=(j,),
                )
            )

    # Face discard checks the raw person segmentations, not the fused unions;
    # the two are equivalent because every fused region is a union of them.
    person_masks = [d.segmentation for _, d in dense] + [s.segmentation for _, s in seg]
    for i, f in faces:
        cx, cy = box_center(f.bbox)
        xi, yi = int(cx), int(cy)
        inside = False
        for mask in person_masks:
            h, w = mask.shape
            if 0 <= yi < h and 0 <= xi < w and mask[yi, xi]:
                inside = True
                break
        if inside:
            continue
        shape = person_masks[0].shape if person_masks else None
        if shape is None:
            x1, y1 = f.bbox[2], f.bbox[3]
            shape = (int(np.ceil(y1)), int(np.ceil(x1)))
        fused.append(
            FusedDetection(
                category=Category.FACE_ONLY,
                bbox=f.bbox,
                anonymization_region=box_to_mask(f.bbox, shape),
                confidence=f.confidence,
                contributor_ids=(i,),
            )
        )
    return fused


def fused_to_json(det: FusedDetection) -> dict:
    from .geometry import mask_to_rle

    return {
        "category": det.category.value,
        "bbox": [float(v) for v in det.bbox],
        "confidence": det.confidence,
        "coverage": det.coverage,
        "mask": mask_to_rle(det.anonymization_region),
        "contributor_ids": list(det.contributor_ids),
        "has_dense_embedding": det.dense_embedding is not None,
    }


def fused_from_json(obj: dict, dense_embedding: np.ndarray | None = None) -> FusedDetection:
    category = Category(obj["category"])
    if category == Category.PERSON_WITH_DENSE and dense_embedding is None:
        region = rle_to_mask(obj["mask"])
        dense_embedding = np.zeros(
            (DENSE_EMBEDDING_CHANNELS, *region.shape), dtype=np.float32
        )
    return FusedDetection(
        category=category,
        bbox=tuple(obj["bbox"]),
        anonymization_region=rle_to_mask(obj["mask"]),
        confidence=float(obj["confidence"]),
        contributor_ids=tuple(obj.get("contributor_ids", ())),
        dense_embedding=dense_embedding,
    )

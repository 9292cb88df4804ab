"""Dataset construction: quality filtering for figure crops and face crops.

Figure crops pass through seven rejection criteria — detector confidence,
crop resolution, grayscale, an injected aesthetic-quality score, surface
vertex coverage averaged over a 26-region body partition, agreement between
the instance and surface segmentations, and keypoint/part consistency. All
criteria are evaluated on every record so a verdict lists everything that
fired, not just the first failure.

Face crops follow a simpler rule: reject faces smaller than 64x64 in the
source image, otherwise resample the crop to 256x256.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import cv2
import numpy as np

N_BODY_PARTS = 26
N_KEYPOINTS = 17

PART_NAMES = (
    "head_front",
    "head_back",
    "neck",
    "torso_front",
    "torso_back",
    "left_upper_arm_front",
    "left_upper_arm_back",
    "right_upper_arm_front",
    "right_upper_arm_back",
    "left_lower_arm_front",
    "left_lower_arm_back",
    "right_lower_arm_front",
    "right_lower_arm_back",
    "left_hand",
    "right_hand",
    "left_upper_leg_front",
    "left_upper_leg_back",
    "right_upper_leg_front",
    "right_upper_leg_back",
    "left_lower_leg_front",
    "left_lower_leg_back",
    "right_lower_leg_front",
    "right_lower_leg_back",
    "left_foot",
    "right_foot",
    "pelvis",
)

KEYPOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

CRITERIA = (
    "confidence",
    "resolution",
    "grayscale",
    "quality",
    "cse_vertices",
    "segmentation_iou",
    "keypoints",
)


class IncompleteRecordError(ValueError):
    def __init__(self, field_name: str):
        super().__init__(f"candidate record is missing required field {field_name!r}")
        self.field_name = field_name


class UnmappedVertexError(ValueError):
    pass


def load_keypoint_parts() -> dict[str, list[str]]:
    """Expected body part(s) for each of the 17 keypoints."""
    with resources.files("idveil").joinpath("data/keypoint_parts.json").open() as fh:
        table = json.load(fh)
    if set(table) != set(KEYPOINT_NAMES):
        raise ValueError("keypoint/part table does not cover the 17 keypoints")
    return table


@dataclass
class FilterConfig:
    min_confidence: float = 0.98
    min_area: int = 144 * 80
    area_mode: str = "product"  # or "per_dimension" with min_height/min_width
    min_height: int = 144
    min_width: int = 80
    min_quality: float = 3.0
    min_vertices_per_part: float = 135.0
    min_segmentation_iou: float = 0.5
    min_keypoint_matches: int = 8

    def __post_init__(self):
        if self.area_mode not in ("product", "per_dimension"):
            raise ValueError(f"unknown area_mode {self.area_mode!r}")


@dataclass
class CandidateRecord:
    """One annotated figure crop awaiting a filter verdict.

    `cse_vertex_ids` and `part_partition` are (H, W) int arrays with -1 for
    pixels without a surface vertex / outside the body partition; partition
    values index `PART_NAMES`. Masks are (H, W) binary arrays. Keypoints map
    each of the 17 names to (x, y, confidence); confidence 0 marks an
    unannotated keypoint.
    """

    source_image_id: str
    confidence: float
    height: int
    width: int
    is_grayscale: bool
    quality_score: float
    cse_vertex_ids: np.ndarray
    part_partition: np.ndarray
    instance_mask: np.ndarray
    cse_mask: np.ndarray
    keypoints: dict[str, tuple[float, float, float]]

    REQUIRED = (
        "source_image_id",
        "confidence",
        "height",
        "width",
        "is_grayscale",
        "quality_score",
        "cse_vertex_ids",
        "part_partition",
        "instance_mask",
        "cse_mask",
        "keypoints",
    )


@dataclass(frozen=True)
class FilterVerdict:
    accepted: bool
    failed_criteria: tuple[str, ...]

    def __post_init__(self):
        if self.accepted != (len(self.failed_criteria) == 0):
            raise ValueError("accepted must match an empty failure list")

    def as_dict(self) -> dict:
        return {"accepted": self.accepted, "failed_criteria": list(self.failed_criteria)}


def record_from_dict(data: dict, base_dir: str | Path | None = None) -> CandidateRecord:
    """Builds a record from a JSON object, loading arrays from an .npz sidecar
    (key `arrays_file`) or from inline nested lists."""
    for name in CandidateRecord.REQUIRED:
        if name not in data and not (
            name in ("cse_vertex_ids", "part_partition", "instance_mask", "cse_mask")
            and "arrays_file" in data
        ):
            raise IncompleteRecordError(name)
    arrays = {}
    array_fields = ("cse_vertex_ids", "part_partition", "instance_mask", "cse_mask")
    if "arrays_file" in data:
        path = Path(data["arrays_file"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        with np.load(path) as npz:
            for name in array_fields:
                if name not in npz:
                    raise IncompleteRecordError(name)
                arrays[name] = npz[name]
    else:
        for name in array_fields:
            arrays[name] = np.asarray(data[name])
    keypoints = {k: tuple(v) for k, v in data["keypoints"].items()}
    return CandidateRecord(
        source_image_id=str(data["source_image_id"]),
        confidence=float(data["confidence"]),
        height=int(data["height"]),
        width=int(data["width"]),
        is_grayscale=bool(data["is_grayscale"]),
        quality_score=float(data["quality_score"]),
        keypoints=keypoints,
        **arrays,
    )


def is_grayscale_image(image: np.ndarray) -> bool:
    """True when every pixel's channels agree to within one 8-bit level."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or 3 not in (image.shape[0], image.shape[-1]):
        raise ValueError(f"expected a 3-channel image, got shape {image.shape}")
    channels = image if image.shape[0] == 3 else np.moveaxis(image, -1, 0)
    spread = channels.max(axis=0) - channels.min(axis=0)
    return bool(spread.max() < 1.0 / 255.0)


def count_vertices_per_part(
    cse_vertex_ids: np.ndarray, part_partition: np.ndarray
) -> float:
    """Average over all 26 parts of the number of unique vertex ids present.

    Parts with no pixels in the image contribute 0. A vertex observed outside
    the partition cannot be attributed to any part and is an annotation error.
    """
    vertex_ids = np.asarray(cse_vertex_ids)
    partition = np.asarray(part_partition)
    if vertex_ids.shape != partition.shape:
        raise ValueError("vertex map and partition shapes differ")
    if np.any((vertex_ids >= 0) & (partition < 0)):
        raise UnmappedVertexError("vertex id present outside the body partition")
    if partition.max(initial=-1) >= N_BODY_PARTS:
        raise UnmappedVertexError(f"partition label exceeds {N_BODY_PARTS - 1}")
    total = 0
    for part in range(N_BODY_PARTS):
        ids = vertex_ids[(partition == part) & (vertex_ids >= 0)]
        total += np.unique(ids).size
    return total / N_BODY_PARTS


def keypoint_part_matches(
    keypoints: dict[str, tuple[float, float, float]],
    part_partition: np.ndarray,
    expectation: dict[str, list[str]] | None = None,
) -> int:
    """Number of keypoints lying inside their expected body-part region.

    Off-image, unannotated (confidence 0) and background-pixel keypoints count
    as non-matching.
    """
    if expectation is None:
        expectation = load_keypoint_parts()
    partition = np.asarray(part_partition)
    h, w = partition.shape
    part_index = {name: i for i, name in enumerate(PART_NAMES)}
    matches = 0
    for name in KEYPOINT_NAMES:
        if name not in keypoints:
            continue
        x, y, conf = keypoints[name]
        if conf <= 0:
            continue
        xi, yi = int(round(x)), int(round(y))
        if not (0 <= xi < w and 0 <= yi < h):
            continue
        label = partition[yi, xi]
        if label < 0:
            continue
        expected = {part_index[p] for p in expectation[name]}
        if int(label) in expected:
            matches += 1
    return matches


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def filter_fdh(
    record: CandidateRecord,
    config: FilterConfig | None = None,
    expectation: dict[str, list[str]] | None = None,
) -> FilterVerdict:
    """Evaluates every figure-crop criterion; rejects if any fires."""
    config = config or FilterConfig()
    for name in CandidateRecord.REQUIRED:
        if getattr(record, name, None) is None:
            raise IncompleteRecordError(name)

    failed = []
    if record.confidence < config.min_confidence:
        failed.append("confidence")
    if config.area_mode == "product":
        if record.height * record.width < config.min_area:
            failed.append("resolution")
    else:
        if record.height < config.min_height or record.width < config.min_width:
            failed.append("resolution")
    if record.is_grayscale:
        failed.append("grayscale")
    if record.quality_score < config.min_quality:
        failed.append("quality")
    if count_vertices_per_part(record.cse_vertex_ids, record.part_partition) < config.min_vertices_per_part:
        failed.append("cse_vertices")
    if _mask_iou(record.instance_mask, record.cse_mask) < config.min_segmentation_iou:
        failed.append("segmentation_iou")
    if keypoint_part_matches(record.keypoints, record.part_partition, expectation) < config.min_keypoint_matches:
        failed.append("keypoints")
    return FilterVerdict(accepted=not failed, failed_criteria=tuple(failed))


# ---------------------------------------------------------------------------
# Face crops


FACE_MIN_SIZE = 64
FACE_OUTPUT_SIZE = 256


@dataclass(frozen=True)
class FaceVerdict:
    accepted: bool
    reason: str | None
    crop: np.ndarray | None


def build_fdf256(image: np.ndarray, face_bbox: tuple[int, int, int, int]) -> FaceVerdict:
    """Rejects faces under 64x64 in the source; otherwise emits a 256x256 crop.

    `image` is (H, W, C) uint8 or float; bbox is (x0, y0, x1, y1) in source
    pixels and is clamped to the frame before the size test.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError("expected an (H, W, C) source image")
    h, w = image.shape[:2]
    x0, y0, x1, y1 = face_bbox
    x0, y0 = max(0, int(x0)), max(0, int(y0))
    x1, y1 = min(w, int(x1)), min(h, int(y1))
    fw, fh = x1 - x0, y1 - y0
    if fw < FACE_MIN_SIZE or fh < FACE_MIN_SIZE:
        return FaceVerdict(accepted=False, reason=f"face {fw}x{fh} below {FACE_MIN_SIZE}", crop=None)
    crop = image[y0:y1, x0:x1]
    interp = cv2.INTER_AREA if max(fw, fh) > FACE_OUTPUT_SIZE else cv2.INTER_LINEAR
    resized = cv2.resize(crop, (FACE_OUTPUT_SIZE, FACE_OUTPUT_SIZE), interpolation=interp)
    return FaceVerdict(accepted=True, reason=None, crop=resized)


# ---------------------------------------------------------------------------
# Split assignment and the batch pipeline


def assign_split(source_image_id: str, val_fraction: float = 0.02, seed: int = 0) -> str:
    """Deterministic train/val assignment keyed on the source image.

    All crops from one source image land in the same split, so the two sets
    are disjoint by source id regardless of processing order.
    """
    if not 0.0 <= val_fraction <= 1.0:
        raise ValueError("val_fraction must be in [0, 1]")
    digest = hashlib.sha256(f"{seed}:{source_image_id}".encode()).digest()
    bucket = int.from_bytes(digest[:8], "big") / 2**64
    return "val" if bucket < val_fraction else "train"


def run_filter_pipeline(
    candidates_path: str | Path,
    out_dir: str | Path,
    config: FilterConfig | None = None,
    val_fraction: float = 0.02,
    seed: int = 0,
) -> dict:
    """Filters a JSONL candidate list; writes verdicts and a split manifest."""
    candidates_path = Path(candidates_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    expectation = load_keypoint_parts()

    manifest = {"train": [], "val": []}
    n_accepted = n_rejected = 0
    with (out_dir / "verdicts.jsonl").open("w") as out:
        for line_no, line in enumerate(candidates_path.read_text().splitlines()):
            if not line.strip():
                continue
            data = json.loads(line)
            record = record_from_dict(data, base_dir=candidates_path.parent)
            verdict = filter_fdh(record, config, expectation)
            row = {"index": line_no, "source_image_id": record.source_image_id}
            row.update(verdict.as_dict())
            if verdict.accepted:
                split = assign_split(record.source_image_id, val_fraction, seed)
                row["split"] = split
                manifest[split].append(record.source_image_id)
                n_accepted += 1
            else:
                n_rejected += 1
            out.write(json.dumps(row) + "\n")

    summary = {
        "accepted": n_accepted,
        "rejected": n_rejected,
        "train": len(manifest["train"]),
        "val": len(manifest["val"]),
    }
    (out_dir / "manifest.json").write_text(json.dumps({**summary, "splits": manifest}, indent=2))
    return summary

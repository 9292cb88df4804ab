"""Box and mask primitives shared across the pipeline.

Boxes are (x0, y0, x1, y1) in float pixel coordinates, x0 < x1 and y0 < y1.
Masks are H x W uint8/bool arrays with 1 = inside the region.
"""

from __future__ import annotations

import numpy as np

Box = tuple[float, float, float, float]


class DegenerateGeometryError(ValueError):
    """Raised when an overlap ratio is requested for two empty operands."""


def box_area(box: Box) -> float:
    x0, y0, x1, y1 = box
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def clamp_box(box: Box, width: int, height: int) -> Box:
    x0, y0, x1, y1 = box
    return (
        min(max(x0, 0.0), width),
        min(max(y0, 0.0), height),
        min(max(x1, 0.0), width),
        min(max(y1, 0.0), height),
    )


def box_union(a: Box, b: Box) -> Box:
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def box_iou(a: Box, b: Box) -> float:
    inter_w = min(a[2], b[2]) - max(a[0], b[0])
    inter_h = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(0.0, inter_w) * max(0.0, inter_h)
    union = box_area(a) + box_area(b) - inter
    if union <= 0.0:
        raise DegenerateGeometryError("IoU of two empty boxes is undefined")
    return inter / union


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise DegenerateGeometryError("IoU of two empty masks is undefined")
    inter = np.logical_and(a, b).sum()
    return float(inter) / float(union)


def iou(a, b) -> float:
    """Intersection over union of two boxes or two masks.

    Both operands must be the same kind; raises DegenerateGeometryError when
    the union is empty.
    """
    a_is_mask = isinstance(a, np.ndarray) and a.ndim == 2
    b_is_mask = isinstance(b, np.ndarray) and b.ndim == 2
    if a_is_mask != b_is_mask:
        raise ValueError("iou operands must both be boxes or both be masks")
    if a_is_mask:
        return mask_iou(a, b)
    return box_iou(tuple(a), tuple(b))


def box_to_mask(box: Box, shape: tuple[int, int]) -> np.ndarray:
    """Rasterize a box into a binary mask of the given (H, W) shape."""
    h, w = shape
    mask = np.zeros((h, w), dtype=np.uint8)
    x0, y0, x1, y1 = clamp_box(box, w, h)
    xi0, yi0 = int(np.floor(x0)), int(np.floor(y0))
    xi1, yi1 = int(np.ceil(x1)), int(np.ceil(y1))
    if xi1 > xi0 and yi1 > yi0:
        mask[yi0:yi1, xi0:xi1] = 1
    return mask


def mask_bbox(mask: np.ndarray) -> Box:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise DegenerateGeometryError("cannot take the bbox of an empty mask")
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def box_center(box: Box) -> tuple[float, float]:
    return ((box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0)


def mask_to_rle(mask: np.ndarray) -> dict:
    """Row-wise run-length encoding: {"size": [H, W], "rows": [[(start, run), ...]]}."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    rows = []
    for y in range(h):
        row = mask[y]
        runs = []
        x = 0
        while x < w:
            if row[x]:
                start = x
                while x < w and row[x]:
                    x += 1
                runs.append([start, x - start])
            else:
                x += 1
        rows.append(runs)
    return {"size": [h, w], "rows": rows}


def rle_to_mask(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    mask = np.zeros((h, w), dtype=np.uint8)
    for y, runs in enumerate(rle["rows"]):
        for start, run in runs:
            mask[y, start : start + run] = 1
    return mask

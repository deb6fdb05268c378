"""
Sparse annotation synthesis from full masks and box preprocessing.

Label maps are uint8 with ``UNLABELED`` (255) for pixels that carry no supervision.
Every labeled pixel agrees with the full mask: foreground labels are drawn inside the
class region and background labels inside a band around the objects.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError
from skimage.draw import ellipse_perimeter, polygon
from skimage.morphology import skeletonize

from autodiff import Tensor
from errors import LabelError
from formats import UNLABELED, read_pgm, write_pgm

logger = logging.getLogger(__name__)

POINT_RECT_SHRINK = 0.5
BLOB_SIZE = 5
BLOB_SIGMA = 2.0
BLOB_THRESHOLD = 0.1
SCRIBBLE_EROSION = 0.15
BLOCK_EROSION = 0.25
ERASE_RATIO = 0.3
BOX_SHRINK = 0.3
BAND_SCALE = 2.0
WARP_GRID = 4
WARP_MAX = 2.0


class AnnotationType(str, Enum):
    POINT = "point"
    SCRIBBLE = "scribble"
    SCRIBBLE2 = "scribble2"
    BLOCK = "block"
    BBOX = "bbox"
    ROTATED_BBOX = "rotated_bbox"


class Sparsity(IntEnum):
    SPARSE = 0
    MEDIUM = 1
    DENSE = 2


class BoxRule(str, Enum):
    TO_SCRIBBLE = "to_scribble"
    TO_BLOCK = "to_block"


SPARSITY_OF = {
    AnnotationType.POINT: Sparsity.SPARSE,
    AnnotationType.SCRIBBLE: Sparsity.MEDIUM,
    AnnotationType.SCRIBBLE2: Sparsity.MEDIUM,
    AnnotationType.BLOCK: Sparsity.DENSE,
}
BOX_RULE_SPARSITY = {BoxRule.TO_SCRIBBLE: Sparsity.MEDIUM, BoxRule.TO_BLOCK: Sparsity.DENSE}


def sparsity_for(annotation: AnnotationType, box_rule: BoxRule = BoxRule.TO_BLOCK) -> Sparsity:
    if annotation in (AnnotationType.BBOX, AnnotationType.ROTATED_BBOX):
        return BOX_RULE_SPARSITY[BoxRule(box_rule)]
    return SPARSITY_OF[AnnotationType(annotation)]


# ---------------------------------------------------------------------------
# Label containers
# ---------------------------------------------------------------------------


@dataclass
class BoxLabel:
    """Axis-aligned box (rows y0..y1-1, cols x0..x1-1) or, when ``angle`` is set, a rotated rectangle"""

    x0: float
    y0: float
    x1: float
    y1: float
    class_id: int = 1
    angle: Optional[float] = None
    center: Optional[Tuple[float, float]] = None
    size: Optional[Tuple[float, float]] = None

    @property
    def is_rotated(self) -> bool:
        return self.angle is not None

    @property
    def area(self) -> float:
        if self.is_rotated:
            return float(self.size[0] * self.size[1])
        return float(max(self.x1 - self.x0, 0) * max(self.y1 - self.y0, 0))

    @classmethod
    def from_mask(cls, region: np.ndarray, class_id: int = 1) -> "BoxLabel":
        """Encompassing axis-aligned rectangle of a boolean region"""
        rows, cols = np.nonzero(region)
        if rows.size == 0:
            raise LabelError(f"Cannot box an empty region for class {class_id}")
        return cls(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1, class_id)

    @classmethod
    def rotated_from_mask(cls, region: np.ndarray, class_id: int = 1) -> "BoxLabel":
        """Minimal-area enclosing rectangle over the convex hull of the region's pixel squares"""
        rows, cols = np.nonzero(region)
        if rows.size == 0:
            raise LabelError(f"Cannot box an empty region for class {class_id}")
        offsets = np.array([[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]])
        pts = (np.stack([rows, cols], axis=1)[:, None, :] + offsets[None]).reshape(-1, 2)
        try:
            hull = pts[ConvexHull(pts).vertices]
        except QhullError:
            hull = pts
        best = None
        for i in range(len(hull)):
            edge = hull[(i + 1) % len(hull)] - hull[i]
            theta = float(np.arctan2(edge[0], edge[1]))
            rot = _rotation(-theta)
            local = hull @ rot.T
            lo, hi = local.min(axis=0), local.max(axis=0)
            area = float(np.prod(hi - lo))
            if best is None or area < best[0] - 1e-9:
                best = (area, theta, lo, hi)
        _, theta, lo, hi = best
        centre = _rotation(theta) @ ((lo + hi) / 2.0)
        size = hi - lo
        box = cls.from_mask(region, class_id)
        box.angle = theta
        box.center = (float(centre[0]), float(centre[1]))
        box.size = (float(size[0]), float(size[1]))
        return box

    def corners(self) -> np.ndarray:
        """Four (row, col) corners in polygon order"""
        if not self.is_rotated:
            r0, r1, c0, c1 = self.y0 - 0.5, self.y1 - 0.5, self.x0 - 0.5, self.x1 - 0.5
            return np.array([[r0, c0], [r0, c1], [r1, c1], [r1, c0]], dtype=float)
        hr, hc = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[-hr, -hc], [-hr, hc], [hr, hc], [hr, -hc]])
        return local @ _rotation(self.angle).T + np.asarray(self.center)

    def scaled(self, factor: float) -> "BoxLabel":
        """Same box scaled about its centre"""
        if self.is_rotated:
            size = (self.size[0] * factor, self.size[1] * factor)
            return BoxLabel(self.x0, self.y0, self.x1, self.y1, self.class_id, self.angle, self.center, size)
        cy, cx = (self.y0 + self.y1) / 2.0, (self.x0 + self.x1) / 2.0
        hh, hw = (self.y1 - self.y0) * factor / 2.0, (self.x1 - self.x0) * factor / 2.0
        return BoxLabel(cx - hw, cy - hh, cx + hw, cy + hh, self.class_id)

    def raster(self, shape: Tuple[int, int]) -> np.ndarray:
        if not self.is_rotated:
            out = np.zeros(shape, dtype=bool)
            r0, r1 = max(int(np.floor(self.y0)), 0), min(int(np.ceil(self.y1)), shape[0])
            c0, c1 = max(int(np.floor(self.x0)), 0), min(int(np.ceil(self.x1)), shape[1])
            out[r0:r1, c0:c1] = True
            return out
        corners = self.corners()
        rr, cc = polygon(corners[:, 0], corners[:, 1], shape=shape)
        out = np.zeros(shape, dtype=bool)
        out[rr, cc] = True
        return out

    def to_dict(self) -> Dict:
        data = {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1, "class_id": self.class_id}
        if self.is_rotated:
            data.update(angle=self.angle, center=list(self.center), size=list(self.size))
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "BoxLabel":
        box = cls(data["x0"], data["y0"], data["x1"], data["y1"], data.get("class_id", 1))
        if data.get("angle") is not None:
            box.angle = data["angle"]
            box.center = tuple(data["center"])
            box.size = tuple(data["size"])
        return box


@dataclass
class SparseLabel:
    label_map: np.ndarray
    annotation_type: AnnotationType
    sparsity: Sparsity
    seeds: List[Tuple[int, int]] = field(default_factory=list)
    boxes: List[BoxLabel] = field(default_factory=list)

    @property
    def labeled(self) -> np.ndarray:
        return self.label_map != UNLABELED

    @property
    def num_labeled(self) -> int:
        return int(self.labeled.sum())

    def classes(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.label_map[self.labeled]))

    def to_meta(self) -> Dict:
        return {
            "annotation_type": self.annotation_type.value,
            "sparsity": int(self.sparsity),
            "seeds": [list(s) for s in self.seeds],
            "boxes": [b.to_dict() for b in self.boxes],
        }

    def save(self, path: Union[str, Path]) -> None:
        write_pgm(path, self.label_map, maxval=255)

    @classmethod
    def load(cls, path: Union[str, Path], meta: Optional[Dict] = None) -> "SparseLabel":
        meta = meta or {}
        annotation = AnnotationType(meta.get("annotation_type", AnnotationType.SCRIBBLE.value))
        return cls(
            label_map=read_pgm(path).astype(np.uint8),
            annotation_type=annotation,
            sparsity=Sparsity(meta.get("sparsity", sparsity_for(annotation))),
            seeds=[tuple(s) for s in meta.get("seeds", [])],
            boxes=[BoxLabel.from_dict(b) for b in meta.get("boxes", [])],
        )


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def _rotation(theta: float) -> np.ndarray:
    """Rotation acting on (row, col) vectors"""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


def _padded_edt(region: np.ndarray) -> np.ndarray:
    """Distance to the nearest non-region pixel, treating the image border as outside"""
    return ndimage.distance_transform_edt(np.pad(region, 1))[1:-1, 1:-1]


def _anchor_pixel(region: np.ndarray) -> Tuple[int, int]:
    """Deepest pixel of the region (first in raster order on ties)"""
    dist = _padded_edt(region)
    r, c = np.unravel_index(int(np.argmax(dist)), dist.shape)
    return int(r), int(c)


def _largest_histogram_rectangle(heights: np.ndarray) -> Tuple[int, int, int]:
    """(area, left, right) of the largest rectangle under a histogram; right is inclusive"""
    best = (0, 0, -1)
    stack: List[int] = []
    extended = np.append(heights, 0)
    for i, h in enumerate(extended):
        while stack and extended[stack[-1]] >= h:
            top = stack.pop()
            left = stack[-1] + 1 if stack else 0
            area = int(extended[top]) * (i - left)
            if area > best[0]:
                best = (area, left, i - 1)
        stack.append(i)
    return best


def max_inscribed_rectangle(region: np.ndarray) -> Tuple[int, int, int, int]:
    """Largest axis-aligned all-True rectangle as inclusive (r0, c0, r1, c1)"""
    if not region.any():
        raise LabelError("max_inscribed_rectangle() got an empty region")
    heights = np.zeros(region.shape[1], dtype=np.int64)
    best_area, best = 0, (0, 0, 0, 0)
    for r in range(region.shape[0]):
        heights = np.where(region[r], heights + 1, 0)
        area, left, right = _largest_histogram_rectangle(heights)
        if area > best_area:
            height = int(heights[left : right + 1].min())
            best_area, best = area, (r - height + 1, left, r, right)
    return best


def gaussian_blob(center: Tuple[int, int], shape: Tuple[int, int]) -> np.ndarray:
    """5x5 Gaussian footprint (sigma 2) thresholded above 0.1, clipped to the image"""
    half = BLOB_SIZE // 2
    dy, dx = np.mgrid[-half : half + 1, -half : half + 1]
    kernel = np.exp(-(dx**2 + dy**2) / (2.0 * BLOB_SIGMA**2)) > BLOB_THRESHOLD
    out = np.zeros(shape, dtype=bool)
    r, c = center
    for (ky, kx), on in np.ndenumerate(kernel):
        y, x = r + ky - half, c + kx - half
        if on and 0 <= y < shape[0] and 0 <= x < shape[1]:
            out[y, x] = True
    return out


# ---------------------------------------------------------------------------
# Per-region procedures (each returns a subset of ``region``)
# ---------------------------------------------------------------------------


def _points(region: np.ndarray) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    if region.sum() < 4:
        rows, cols = np.nonzero(region)
        cy, cx = rows.mean(), cols.mean()
        nearest = int(np.argmin((rows - cy) ** 2 + (cols - cx) ** 2))
        seeds = [(int(rows[nearest]), int(cols[nearest]))]
    else:
        r0, c0, r1, c1 = max_inscribed_rectangle(region)
        h, w = r1 - r0 + 1, c1 - c0 + 1
        sh, sw = max(int(round(h * POINT_RECT_SHRINK)), 1), max(int(round(w * POINT_RECT_SHRINK)), 1)
        top, left = r0 + (h - sh) // 2, c0 + (w - sw) // 2
        bottom, right = top + sh - 1, left + sw - 1
        mid_r, mid_c = top + (sh - 1) // 2, left + (sw - 1) // 2
        seeds = [(top, mid_c), (bottom, mid_c), (mid_r, left), (mid_r, right)]
    out = np.zeros_like(region)
    for seed in seeds:
        out |= gaussian_blob(seed, region.shape)
    return out & region, seeds


def _scribble(region: np.ndarray) -> np.ndarray:
    radius = _padded_edt(region).max()
    steps = max(int(SCRIBBLE_EROSION * radius), 1)
    eroded = ndimage.binary_erosion(np.pad(region, 1), iterations=steps)[1:-1, 1:-1]
    skeleton = skeletonize(eroded) if eroded.any() else np.zeros_like(region)
    if not skeleton.any():
        skeleton = skeletonize(region)
    return skeleton & region


def _elastic_warp(label: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = label.shape
    coarse = rng.uniform(-WARP_MAX, WARP_MAX, size=(2, WARP_GRID, WARP_GRID))
    disp = np.stack([ndimage.zoom(coarse[k], (h / WARP_GRID, w / WARP_GRID), order=1) for k in range(2)])
    disp = disp[:, :h, :w]
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    warped = ndimage.map_coordinates(label.astype(float), [rows + disp[0], cols + disp[1]], order=1, mode="constant")
    return warped > 0.5


def _scribble2(region: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    base = _scribble(region)
    warped = _elastic_warp(base, rng) & region
    if not warped.any():
        warped = base
    pixels = np.argwhere(warped)
    n_erase = min(int(ERASE_RATIO * len(pixels)), len(pixels) - 1)
    if n_erase > 0:
        drop = rng.choice(len(pixels), size=n_erase, replace=False)
        warped = warped.copy()
        warped[pixels[drop, 0], pixels[drop, 1]] = False
    return warped


def _block(region: np.ndarray) -> np.ndarray:
    dist = _padded_edt(region)
    depth = max(int(np.ceil(BLOCK_EROSION * dist.max())), 1)
    return (dist > depth) & region


def _label_region(region: np.ndarray, annotation: AnnotationType, rng: np.random.Generator):
    seeds: List[Tuple[int, int]] = []
    if annotation == AnnotationType.POINT:
        out, seeds = _points(region)
    elif annotation == AnnotationType.SCRIBBLE:
        out = _scribble(region)
    elif annotation == AnnotationType.SCRIBBLE2:
        out = _scribble2(region, rng)
    elif annotation == AnnotationType.BLOCK:
        out = _block(region)
    else:
        raise LabelError(f"Annotation type {annotation} is not a region procedure")
    if not out.any():
        anchor = _anchor_pixel(region)
        out = np.zeros_like(region)
        out[anchor] = True
        seeds = seeds or [anchor]
    return out, seeds


def background_band(foreground: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Background pixels inside the foreground bounding box scaled 2x about its centre"""
    box = BoxLabel.from_mask(foreground).scaled(BAND_SCALE)
    band = box.raster(foreground.shape) & background
    return band if band.any() else background


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def _class_ids(mask: np.ndarray) -> List[int]:
    return [int(c) for c in np.unique(mask) if c != 0]


def synthesize_weak_label(
    mask: np.ndarray,
    annotation: AnnotationType,
    rng: np.random.Generator,
    box_rule: BoxRule = BoxRule.TO_BLOCK,
) -> SparseLabel:
    """Draw a noise-free sparse label of the given type from a full class mask"""
    annotation = AnnotationType(annotation)
    mask = np.asarray(mask).astype(np.uint8)
    classes = _class_ids(mask)
    if not classes:
        raise LabelError("Mask has no foreground pixels")
    if annotation in (AnnotationType.BBOX, AnnotationType.ROTATED_BBOX):
        return _box_label(mask, classes, annotation, BoxRule(box_rule))

    label = np.full(mask.shape, UNLABELED, dtype=np.uint8)
    seeds: List[Tuple[int, int]] = []
    background = mask == 0
    if background.any():
        region = background_band(mask > 0, background)
        bg, _ = _label_region(region, annotation, rng)
        label[bg] = 0
    for c in classes:
        fg, class_seeds = _label_region(mask == c, annotation, rng)
        label[fg] = c
        seeds.extend(class_seeds)
    return SparseLabel(label, annotation, sparsity_for(annotation), seeds)


def _box_label(mask: np.ndarray, classes: List[int], annotation: AnnotationType, rule: BoxRule) -> SparseLabel:
    label = np.full(mask.shape, UNLABELED, dtype=np.uint8)
    boxes = []
    for c in classes:
        region = mask == c
        if annotation == AnnotationType.ROTATED_BBOX:
            box = BoxLabel.rotated_from_mask(region, c)
        else:
            box = BoxLabel.from_mask(region, c)
        boxes.append(box)
        converted = preprocess_box(box, rule, mask.shape)
        label[(converted.label_map == 0) & (mask == 0)] = 0
        fg = (converted.label_map == c) & region
        if not fg.any():
            fg = np.zeros_like(region)
            fg[_anchor_pixel(region)] = True
        label[fg] = c
    if (mask == 0).any() and not (label == 0).any():
        label[_anchor_pixel(background_band(mask > 0, mask == 0))] = 0
    return SparseLabel(label, annotation, BOX_RULE_SPARSITY[rule], boxes=boxes)


def preprocess_box(box: BoxLabel, rule: BoxRule, shape: Tuple[int, int]) -> SparseLabel:
    """Turn a box into pixel supervision: shrunken block or inscribed-ellipse ring, plus an outside band"""
    rule = BoxRule(rule)
    if box.area <= 0:
        raise LabelError(f"Degenerate box with zero area: {box.to_dict()}")
    if not box.is_rotated and (box.x0 < 0 or box.y0 < 0 or box.x1 > shape[1] or box.y1 > shape[0]):
        raise LabelError(f"Box {box.to_dict()} lies outside the {shape} image")
    inside = box.raster(shape)
    if rule == BoxRule.TO_BLOCK:
        fg = _shrunken_block(box, shape)
    else:
        fg = _ellipse_ring(box, shape)
    fg &= inside
    if not fg.any():
        fg[_anchor_pixel(inside)] = True

    label = np.full(shape, UNLABELED, dtype=np.uint8)
    outside = ~ndimage.binary_dilation(inside)
    band = box.scaled(BAND_SCALE).raster(shape) & outside
    label[band] = 0
    label[fg] = box.class_id
    annotation = AnnotationType.ROTATED_BBOX if box.is_rotated else AnnotationType.BBOX
    return SparseLabel(label, annotation, BOX_RULE_SPARSITY[rule], boxes=[box])


def _shrunken_block(box: BoxLabel, shape: Tuple[int, int]) -> np.ndarray:
    if box.is_rotated:
        return box.scaled(1.0 - 2.0 * BOX_SHRINK).raster(shape)
    h, w = int(box.y1 - box.y0), int(box.x1 - box.x0)
    dy, dx = int(np.floor(BOX_SHRINK * h)), int(np.floor(BOX_SHRINK * w))
    out = np.zeros(shape, dtype=bool)
    out[int(box.y0) + dy : int(box.y1) - dy, int(box.x0) + dx : int(box.x1) - dx] = True
    return out


def _ellipse_ring(box: BoxLabel, shape: Tuple[int, int]) -> np.ndarray:
    """One-pixel ring of the ellipse inscribed in the box"""
    if box.is_rotated:
        (cy, cx), (h, w), angle = box.center, box.size, box.angle
    else:
        cy, cx = (box.y0 + box.y1 - 1) / 2.0, (box.x0 + box.x1 - 1) / 2.0
        h, w, angle = box.y1 - box.y0, box.x1 - box.x0, 0.0
    r_rad, c_rad = max(int(np.floor((h - 1) / 2.0)), 1), max(int(np.floor((w - 1) / 2.0)), 1)
    rr, cc = ellipse_perimeter(int(round(cy)), int(round(cx)), r_rad, c_rad, orientation=-angle, shape=shape)
    out = np.zeros(shape, dtype=bool)
    out[rr, cc] = True
    return out


def asp_encode(level: Sparsity, height: int, width: int) -> Tensor:
    """One-hot annotation-sparsity planes: plane ``level`` all ones, the others zero"""
    planes = np.zeros((3, height, width), dtype=np.float32)
    planes[int(Sparsity(level))] = 1.0
    return Tensor(planes)


def label_noise(label: SparseLabel, mask: np.ndarray) -> int:
    """Number of labeled pixels whose class disagrees with the full mask"""
    labeled = label.labeled
    return int((label.label_map[labeled] != np.asarray(mask)[labeled]).sum())

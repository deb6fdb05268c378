"""
Synthetic multi-site segmentation federation.

Each site draws compact objects (ellipses or Fourier-boundary blobs) with its own
intensity, texture and noise profile, and annotates them with its own weak-label type.

On-disk layout::

    <root>/federation.json
    <root>/site_<k>/{train,test}/img_%04d.pgm   16-bit, intensity * 65535
    <root>/site_<k>/{train,test}/mask_%04d.pgm  8-bit class map
    <root>/site_<k>/{train,test}/weak_%04d.pgm  8-bit, 255 = UNLABELED
    <root>/site_<k>/{train,test}/meta.json
"""

import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, ndimage, stats
from skimage.draw import ellipse, polygon

from errors import ConfigError, DatasetError
from formats import read_json, read_pgm, write_json, write_pgm
from weak_labels import AnnotationType, BoxRule, SparseLabel, Sparsity, sparsity_for, synthesize_weak_label

logger = logging.getLogger(__name__)

SHAPES = ("ellipse", "blob")
IMAGE_MAX = 65535
MAX_OVERLAP = 0.5


@dataclass
class SiteSpec:
    site_id: int
    annotation_type: AnnotationType = AnnotationType.SCRIBBLE
    box_rule: BoxRule = BoxRule.TO_BLOCK
    n_train: int = 200
    n_test: int = 50
    image_size: Tuple[int, int] = (64, 64)
    fg_mean: float = 0.7
    fg_std: float = 0.05
    bg_mean: float = 0.3
    bg_std: float = 0.05
    texture_freq: float = 0.0
    texture_amp: float = 0.0
    noise: float = 0.05
    shape: str = "ellipse"
    scale_range: Tuple[float, float] = (0.15, 0.3)

    def __post_init__(self):
        self.annotation_type = AnnotationType(self.annotation_type)
        self.box_rule = BoxRule(self.box_rule)
        self.image_size = tuple(self.image_size)
        self.scale_range = tuple(self.scale_range)

    @property
    def sparsity(self) -> Sparsity:
        return sparsity_for(self.annotation_type, self.box_rule)

    def intensity_overlap(self) -> float:
        """Overlapping coefficient of the foreground and background intensity distributions"""
        grid = np.linspace(-0.5, 1.5, 4001)
        fg_std = np.hypot(self.fg_std, self.noise)
        bg_std = np.hypot(self.bg_std, self.noise)
        fg = stats.norm.pdf(grid, self.fg_mean, fg_std)
        bg = stats.norm.pdf(grid, self.bg_mean, bg_std)
        return float(integrate.trapezoid(np.minimum(fg, bg), grid))

    def validate(self) -> None:
        if self.n_train < 1:
            raise ConfigError(f"Site {self.site_id}: n_train must be >= 1, got {self.n_train}")
        if self.n_test < 0:
            raise ConfigError(f"Site {self.site_id}: n_test must be >= 0, got {self.n_test}")
        if self.shape not in SHAPES:
            raise ConfigError(f"Site {self.site_id}: unknown shape family {self.shape!r}; expected one of {SHAPES}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi < 0.5:
            raise ConfigError(f"Site {self.site_id}: scale range {self.scale_range} must lie in (0, 0.5)")
        if min(self.image_size) < 8:
            raise ConfigError(f"Site {self.site_id}: image size {self.image_size} is too small")
        overlap = self.intensity_overlap()
        if overlap >= MAX_OVERLAP:
            raise ConfigError(
                f"Site {self.site_id}: foreground/background intensities overlap {overlap:.0%}; objects not learnable"
            )

    def to_dict(self) -> Dict:
        return asdict(self)


def default_4site_config(
    n_train: int = 200, n_test: int = 50, image_size: Tuple[int, int] = (64, 64)
) -> List[SiteSpec]:
    """Bright ellipses/points, dark blobs/scribbles, textured ellipses/blocks, noisy blobs/boxes"""
    common = dict(n_train=n_train, n_test=n_test, image_size=image_size)
    return [
        SiteSpec(0, AnnotationType.POINT, fg_mean=0.8, bg_mean=0.3, noise=0.04, shape="ellipse", **common),
        SiteSpec(1, AnnotationType.SCRIBBLE, fg_mean=0.25, bg_mean=0.6, noise=0.04, shape="blob", **common),
        SiteSpec(
            2,
            AnnotationType.BLOCK,
            fg_mean=0.65,
            bg_mean=0.35,
            texture_freq=0.2,
            texture_amp=0.08,
            noise=0.03,
            shape="ellipse",
            **common,
        ),
        SiteSpec(
            3,
            AnnotationType.BBOX,
            box_rule=BoxRule.TO_BLOCK,
            fg_mean=0.7,
            bg_mean=0.4,
            noise=0.1,
            shape="blob",
            **common,
        ),
    ]


def load_site_specs(source: Union[str, Path, Sequence[Dict]]) -> List[SiteSpec]:
    """Site list from "default4", a JSON file or already-parsed dicts"""
    if isinstance(source, (str, Path)):
        if str(source) == "default4":
            return default_4site_config()
        data = read_json(source)
        source = data["sites"] if isinstance(data, dict) else data
    return [SiteSpec(**entry) for entry in source]


# ---------------------------------------------------------------------------
# Sample generation
# ---------------------------------------------------------------------------


def _object_mask(spec: SiteSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    size = min(h, w)
    scale = rng.uniform(*spec.scale_range)
    radius = scale * size
    cy = rng.uniform(radius + 1, h - radius - 1)
    cx = rng.uniform(radius + 1, w - radius - 1)
    mask = np.zeros((h, w), dtype=bool)
    if spec.shape == "ellipse":
        aspect = rng.uniform(0.6, 1.0)
        rr, cc = ellipse(cy, cx, radius, radius * aspect, shape=(h, w), rotation=rng.uniform(0, np.pi))
    else:
        angles = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        r = np.ones_like(angles)
        for k in range(2, 5):
            r += rng.uniform(0.0, 0.15) * np.cos(k * angles + rng.uniform(0, 2 * np.pi))
        r *= radius / r.max()
        rr, cc = polygon(cy + r * np.sin(angles), cx + r * np.cos(angles), shape=(h, w))
    mask[rr, cc] = True
    mask[int(cy), int(cx)] = True
    return mask


def _render_image(spec: SiteSpec, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    fg = rng.normal(spec.fg_mean, spec.fg_std)
    bg = rng.normal(spec.bg_mean, spec.bg_std)
    image = np.where(mask, fg, bg).astype(np.float64)
    image = ndimage.gaussian_filter(image, sigma=0.7)
    if spec.texture_freq > 0 and spec.texture_amp > 0:
        theta = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        phase = 2 * np.pi * spec.texture_freq * (xx * np.cos(theta) + yy * np.sin(theta))
        image += spec.texture_amp * np.sin(phase + rng.uniform(0, 2 * np.pi))
    image += rng.normal(0.0, spec.noise, size=(h, w))
    return np.clip(image, 0.0, 1.0)


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    label: SparseLabel


def generate_sample(spec: SiteSpec, seed: int, index: int) -> Sample:
    """Deterministic sample ``index`` of site ``spec.site_id`` (test samples follow the train indices)"""
    rng = np.random.default_rng([seed, spec.site_id, index])
    mask = _object_mask(spec, rng)
    image = _render_image(spec, mask, rng)
    class_map = mask.astype(np.uint8)
    label = synthesize_weak_label(class_map, spec.annotation_type, rng, spec.box_rule)
    return Sample(image.astype(np.float32), class_map, label)


def _write_split(spec: SiteSpec, seed: int, split_dir: Path, indices: range, workers: int) -> None:
    split_dir.mkdir(parents=True, exist_ok=True)

    def _one(pos_index):
        pos, index = pos_index
        sample = generate_sample(spec, seed, index)
        quantized = np.round(sample.image * IMAGE_MAX).astype(np.uint16)
        write_pgm(split_dir / f"img_{pos:04d}.pgm", quantized, maxval=IMAGE_MAX)
        write_pgm(split_dir / f"mask_{pos:04d}.pgm", sample.mask, maxval=255)
        sample.label.save(split_dir / f"weak_{pos:04d}.pgm")
        return sample.label.to_meta()

    jobs = list(enumerate(indices))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            labels = list(executor.map(_one, jobs))
    else:
        labels = [_one(job) for job in jobs]
    write_json(
        split_dir / "meta.json",
        {"site": spec.to_dict(), "seed": seed, "count": len(jobs), "labels": labels},
    )


def generate_federation(
    specs: Sequence[SiteSpec],
    seed: int,
    root: Union[str, Path],
    force: bool = False,
    workers: int = 1,
) -> Path:
    """Write every site's train/test split under ``root``; byte-identical for a fixed seed"""
    if not specs:
        raise ConfigError("generate_federation() needs at least one site")
    for spec in specs:
        spec.validate()
    if len({s.site_id for s in specs}) != len(specs):
        raise ConfigError("Site ids must be unique")
    if len({tuple(s.image_size) for s in specs}) != 1:
        raise ConfigError("All sites must share one image size")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise ConfigError(f"Dataset directory {root} is not empty; pass --force to overwrite")
        logger.info(f"Removing existing dataset at {root}")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        site_dir = root / f"site_{spec.site_id}"
        logger.info(
            f"Generating site {spec.site_id}: {spec.n_train} train / {spec.n_test} test, "
            f"{spec.annotation_type.value} labels"
        )
        _write_split(spec, seed, site_dir / "train", range(spec.n_train), workers)
        _write_split(spec, seed, site_dir / "test", range(spec.n_train, spec.n_train + spec.n_test), workers)
    write_json(root / "federation.json", {"seed": seed, "sites": [s.to_dict() for s in specs]})
    return root


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


@dataclass
class SiteSplit:
    """One site's split held in memory: images N x 1 x H x W in [0, 1], masks and weak labels N x H x W"""

    spec: SiteSpec
    images: np.ndarray
    masks: np.ndarray
    weak: np.ndarray
    labels_meta: List[Dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def sparsity(self) -> Sparsity:
        return self.spec.sparsity


def load_split(root: Union[str, Path], site_id: int, split: str) -> SiteSplit:
    split_dir = Path(root) / f"site_{site_id}" / split
    if not split_dir.is_dir():
        raise DatasetError(f"Missing dataset split {split_dir}")
    meta = read_json(split_dir / "meta.json")
    spec = SiteSpec(**meta["site"])
    images, masks, weak = [], [], []
    for pos in range(meta["count"]):
        images.append(read_pgm(split_dir / f"img_{pos:04d}.pgm").astype(np.float32) / IMAGE_MAX)
        masks.append(read_pgm(split_dir / f"mask_{pos:04d}.pgm"))
        weak.append(read_pgm(split_dir / f"weak_{pos:04d}.pgm"))
    h, w = spec.image_size
    return SiteSplit(
        spec=spec,
        images=np.asarray(images, dtype=np.float32).reshape(-1, 1, h, w),
        masks=np.asarray(masks, dtype=np.uint8).reshape(-1, h, w),
        weak=np.asarray(weak, dtype=np.uint8).reshape(-1, h, w),
        labels_meta=meta.get("labels", []),
    )


def load_federation(root: Union[str, Path], split: str = "train") -> List[SiteSplit]:
    root = Path(root)
    if not (root / "federation.json").exists():
        raise DatasetError(f"{root} is not a synthesized dataset (federation.json missing)")
    meta = read_json(root / "federation.json")
    return [load_split(root, entry["site_id"], split) for entry in meta["sites"]]


def dataset_seed(root: Union[str, Path]) -> Optional[int]:
    path = Path(root) / "federation.json"
    return read_json(path).get("seed") if path.exists() else None


def site_wasserstein(splits: Sequence[SiteSplit]) -> np.ndarray:
    """Pairwise 1-D Wasserstein distances between the sites' pixel intensity distributions"""
    n = len(splits)
    out = np.zeros((n, n))
    flat = [s.images.reshape(-1) for s in splits]
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = stats.wasserstein_distance(flat[i], flat[j])
    return out


def foreground_mean(split: SiteSplit) -> float:
    return float(split.images[:, 0][split.masks > 0].mean())

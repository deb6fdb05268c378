"""
Weakly-supervised segmentation objective.

Probability maps are N x C x H x W tensors (channel softmax already applied); label maps
are N x H x W uint8 arrays where ``UNLABELED`` marks pixels without supervision.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import Tensor
from errors import ShapeError
from formats import UNLABELED
from weak_labels import SparseLabel

logger = logging.getLogger(__name__)

LabelLike = Union[SparseLabel, np.ndarray]


@dataclass
class LossConfig:
    lam: float = 0.5
    lambda_m_range: Tuple[float, float] = (0.7, 1.0)
    dice_smooth: float = 1e-5
    log_floor: float = 1e-7

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        lo, hi = self.lambda_m_range
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"lambda_m range must satisfy 0 <= lo < hi <= 1, got {self.lambda_m_range}")


@dataclass
class LossBreakdown:
    """Scalar objective plus its parts; ``empty_supervision`` is set when no pixel was labeled"""

    total: Tensor
    supervised: float
    unsupervised: float
    lambda_m: Optional[float] = None
    empty_supervision: bool = False

    def item(self) -> float:
        return self.total.item()


def _label_array(label: LabelLike, probs: Tensor) -> np.ndarray:
    arr = label.label_map if isinstance(label, SparseLabel) else np.asarray(label)
    if arr.ndim == 2:
        arr = arr[None]
    expected = (probs.shape[0],) + probs.shape[2:]
    if arr.shape != expected:
        raise ShapeError(f"Label map shape {arr.shape} does not match probabilities {probs.shape}")
    return arr


def partial_cross_entropy(probs: Tensor, label: LabelLike, cfg: Optional[LossConfig] = None) -> Tensor:
    """Mean of -log p(class) over labeled pixels only"""
    cfg = cfg or LossConfig()
    arr = _label_array(label, probs)
    n_idx, h_idx, w_idx = np.nonzero(arr != UNLABELED)
    if n_idx.size == 0:
        logger.warning("Batch has no labeled pixels; partial cross-entropy contributes 0")
        return Tensor(np.zeros((), dtype=probs.dtype))
    classes = arr[n_idx, h_idx, w_idx].astype(np.int64)
    if classes.max() >= probs.shape[1]:
        raise ShapeError(f"Label class {classes.max()} exceeds {probs.shape[1]} predicted classes")
    picked = ad.getitem(probs, (n_idx, classes, h_idx, w_idx))
    log_p = ad.log(ad.clamp(picked, cfg.log_floor, 1.0))
    return ad.neg(ad.mean(log_p))


def dice_loss(probs: Tensor, target: np.ndarray, cfg: Optional[LossConfig] = None) -> Tensor:
    """Soft Dice loss averaged over the foreground classes (channel 0 is background)"""
    cfg = cfg or LossConfig()
    target = _label_array(target, probs)
    if (target == UNLABELED).any():
        raise ShapeError("dice_loss() needs a dense target without UNLABELED pixels")
    s = cfg.dice_smooth
    num_classes = probs.shape[1]
    terms = []
    for c in range(1, num_classes):
        p_c = ad.getitem(probs, (slice(None), c))
        t_c = (target == c).astype(probs.dtype)
        inter = ad.tsum(ad.mul(p_c, t_c))
        dice = (2.0 * inter + s) / (ad.tsum(p_c) + float(t_c.sum()) + s)
        terms.append(1.0 - dice)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def sample_lambda_m(rng: np.random.Generator, cfg: Optional[LossConfig] = None) -> float:
    lo, hi = (cfg or LossConfig()).lambda_m_range
    return float(rng.uniform(lo, hi))


def pseudo_label(
    p_main: Tensor,
    p_aux: Tensor,
    rng: Optional[np.random.Generator] = None,
    lambda_m: Optional[float] = None,
    cfg: Optional[LossConfig] = None,
) -> Tuple[np.ndarray, float]:
    """Dense argmax of the stochastic mixture lambda_m * p_M + (1 - lambda_m) * p_A

    ``lambda_m`` overrides the draw; otherwise one value is sampled from ``rng``.
    The returned map is a constant (no gradient flows through it).
    """
    if p_main.shape != p_aux.shape:
        raise ShapeError(f"Decoder outputs differ in shape: {p_main.shape} vs {p_aux.shape}")
    if lambda_m is None:
        if rng is None:
            raise ValueError("pseudo_label() needs an rng when lambda_m is not given")
        lambda_m = sample_lambda_m(rng, cfg)
    mixture = lambda_m * p_main.data + (1.0 - lambda_m) * p_aux.data
    return mixture.argmax(axis=1).astype(np.uint8), lambda_m


def wss_objective(
    p_main: Tensor,
    p_aux: Optional[Tensor],
    label: LabelLike,
    cfg: Optional[LossConfig] = None,
    rng: Optional[np.random.Generator] = None,
    lambda_m: Optional[float] = None,
) -> LossBreakdown:
    """Supervised pCE on both decoders plus lambda-weighted Dice against the mixed pseudo-label

    Without an auxiliary decoder the objective degrades to pCE(p_M) + lambda * Dice(p_M, argmax p_M).
    """
    cfg = cfg or LossConfig()
    arr = _label_array(label, p_main)
    empty = not (arr != UNLABELED).any()
    if p_aux is None:
        sup = partial_cross_entropy(p_main, arr, cfg)
        target = p_main.data.argmax(axis=1).astype(np.uint8)
        unsup = dice_loss(p_main, target, cfg)
    else:
        sup = 0.5 * partial_cross_entropy(p_main, arr, cfg) + 0.5 * partial_cross_entropy(p_aux, arr, cfg)
        target, lambda_m = pseudo_label(p_main, p_aux, rng, lambda_m, cfg)
        unsup = 0.5 * dice_loss(p_main, target, cfg) + 0.5 * dice_loss(p_aux, target, cfg)
    total = sup + cfg.lam * unsup
    return LossBreakdown(total, sup.item(), unsup.item(), lambda_m, empty)


def full_supervision_objective(
    p_main: Tensor, ground_truth: np.ndarray, cfg: Optional[LossConfig] = None
) -> LossBreakdown:
    """Cross-entropy on every pixel plus lambda * Dice against the full mask"""
    cfg = cfg or LossConfig()
    gt = _label_array(ground_truth, p_main)
    sup = partial_cross_entropy(p_main, gt, cfg)
    unsup = dice_loss(p_main, gt, cfg)
    return LossBreakdown(sup + cfg.lam * unsup, sup.item(), unsup.item())

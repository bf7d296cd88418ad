"""Membership inference from reconstruction fidelity.

Reconstructions are binarised (Gaussian blur, Otsu, opening, closing), scored
against their guiding layout with Dice, and classified as member when the
score exceeds the mean of all pooled scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InsufficientDataError, InvalidInputError

MEMBER = "member"
NON_MEMBER = "non-member"


@dataclass
class PostProcessConfig:
    blur_size: int = 5
    blur_sigma: float = 1.0
    morph_size: int = 3
    order: tuple[str, ...] = ("open", "close")


@dataclass
class BinaryMaskResult:
    mask: np.ndarray
    otsu_threshold: int
    kernel_size: int
    degenerate: bool = False


def _to_255(image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError("expected a 2D grayscale image")
    if not np.isfinite(x).all():
        raise InvalidInputError("image has non-finite values")
    if x.max() <= 1.0:
        x = x * 255.0
    return x


def otsu_threshold(hist) -> int:
    """Cut point t in 0..254 maximising between-class variance (class 0 = bins <= t).

    Ties resolve to the smallest t.  Returns -1 when the histogram has fewer
    than two occupied bins.
    """
    h = np.asarray(hist, dtype=np.float64)
    if np.count_nonzero(h) < 2:
        return -1
    levels = np.arange(h.size, dtype=np.float64)
    w0 = np.cumsum(h)[:-1]
    s0 = np.cumsum(h * levels)[:-1]
    n, s = h.sum(), (h * levels).sum()
    w1 = n - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        # n^2 times the between-class variance: (s * w0 - n * s0)^2 / (w0 * w1)
        between = (s * w0 - n * s0) ** 2 / (w0 * w1)
    between[(w0 == 0) | (w1 == 0)] = -1.0
    return int(np.argmax(between))


def histogram256(image) -> tuple[np.ndarray, np.ndarray]:
    """Quantised 8-bit levels of an image and their 256-bin histogram."""
    levels = np.clip(np.round(_to_255(image)), 0, 255).astype(np.int64)
    return levels, np.bincount(levels.ravel(), minlength=256)


def gaussian_blur(image, size: int = 5, sigma: float = 1.0) -> np.ndarray:
    radius = size // 2
    return ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma, mode="reflect",
                                   truncate=radius / sigma)


def binarize(image, cfg: PostProcessConfig | None = None) -> BinaryMaskResult:
    """Blur, Otsu-threshold (bright = foreground), then opening and closing."""
    cfg = cfg or PostProcessConfig()
    x = _to_255(image)
    blurred = gaussian_blur(x, cfg.blur_size, cfg.blur_sigma)
    levels, hist = histogram256(blurred)
    t = otsu_threshold(hist)
    if t < 0:
        return BinaryMaskResult(np.zeros(x.shape, dtype=np.uint8), t, cfg.morph_size, degenerate=True)
    mask = levels > t
    se = np.ones((cfg.morph_size, cfg.morph_size), dtype=bool)
    for op in cfg.order:
        if op == "open":
            mask = ndimage.binary_opening(mask, structure=se, border_value=0)
        elif op == "close":
            # pad so closing near the border is not eroded by the implicit zero border
            pad = cfg.morph_size
            mask = ndimage.binary_closing(np.pad(mask, pad, mode="edge"), structure=se)[pad:-pad, pad:-pad]
        else:
            raise InvalidInputError(f"unknown morphology op {op!r}")
    return BinaryMaskResult(mask.astype(np.uint8), t, cfg.morph_size)


def dice(a, b) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass
class MembershipVerdict:
    target_id: str
    guide_class: str
    dice_score: float
    threshold: float
    ground_truth: str | None = None

    @property
    def verdict(self) -> str:
        return MEMBER if self.dice_score > self.threshold else NON_MEMBER


def mean_threshold_classify(scores, ground_truth=None) -> tuple[float, list[MembershipVerdict]]:
    """T = mean of pooled scores; member iff score > T.

    ``scores`` is a sequence of ``(target_id, dice)`` or ``(target_id, guide_class, dice)``.
    """
    rows = [tuple(s) for s in scores]
    if len(rows) < 2:
        raise InsufficientDataError("need at least two scores to set a threshold")
    values = np.array([r[-1] for r in rows], dtype=np.float64)
    t = float(np.mean(values))
    gt = list(ground_truth) if ground_truth is not None else [None] * len(rows)
    verdicts = [MembershipVerdict(str(r[0]), str(r[1]) if len(r) == 3 else "", float(r[-1]), t, g)
                for r, g in zip(rows, gt)]
    return t, verdicts


@dataclass
class AttackReport:
    verdicts: list[MembershipVerdict]
    threshold: float
    accuracy: float
    precision: float
    recall: float
    auc: float
    roc: list[tuple[float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"threshold": self.threshold, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "auc": self.auc, "n": len(self.verdicts),
                "roc": [[f, t] for f, t in self.roc]}


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """ROC points sweeping the threshold (score >= thr is positive) over unique scores."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise InsufficientDataError("ROC needs both members and non-members")
    points = [(0.0, 0.0)]
    for thr in np.unique(s)[::-1]:
        sel = s >= thr
        points.append((float((sel & ~y).sum() / neg), float((sel & y).sum() / pos)))
    return points


def auc_trapezoid(points) -> float:
    f = np.array([p[0] for p in points])
    t = np.array([p[1] for p in points])
    return float(np.sum((f[1:] - f[:-1]) * (t[1:] + t[:-1]) / 2.0))


def attack_metrics(verdicts: list[MembershipVerdict]) -> AttackReport:
    if not verdicts:
        raise InsufficientDataError("no verdicts")
    truth = np.array([v.ground_truth == MEMBER for v in verdicts])
    if truth.all() or not truth.any():
        raise InsufficientDataError("AUC undefined: ground truth has a single class")
    pred = np.array([v.verdict == MEMBER for v in verdicts])
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    accuracy = float((pred == truth).mean())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn)
    roc = roc_curve([v.dice_score for v in verdicts], truth)
    return AttackReport(verdicts, verdicts[0].threshold, accuracy, precision, recall, auc_trapezoid(roc), roc)

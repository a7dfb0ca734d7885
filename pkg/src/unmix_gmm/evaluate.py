"""Accuracy metrics over per-image total abundances.

Each image contributes one vector of class totals (column means of its
abundance matrix); metrics are then computed per class across images.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import AbundanceMatrix, ValidationError

#: Six urban classes collapsed into green vegetation, pervious and impervious cover.
URBAN_MERGE = {
    "turfgrass": "green vegetation",
    "tree": "green vegetation",
    "npv": "pervious",
    "soil": "pervious",
    "paved": "impervious",
    "roof": "impervious",
}


@dataclass(frozen=True)
class ClassMerge:
    mapping: Mapping[str, str]

    def categories(self, class_names: Sequence[str]) -> list[str]:
        """Merged category names in order of first appearance over ``class_names``."""
        missing = [c for c in class_names if c not in self.mapping]
        if missing:
            raise ValidationError(f"classes without a merged category: {missing}")
        return list(dict.fromkeys(self.mapping[c] for c in class_names))

    def matrix(self, class_names: Sequence[str]) -> np.ndarray:
        """0/1 matrix ``(n_classes, n_categories)`` that sums member classes."""
        cats = self.categories(class_names)
        W = np.zeros((len(class_names), len(cats)))
        for i, c in enumerate(class_names):
            W[i, cats.index(self.mapping[c])] = 1.0
        return W


def total_abundance(A: AbundanceMatrix | np.ndarray) -> np.ndarray:
    """Fraction of image area per class (unweighted column means)."""
    values = A.values if isinstance(A, AbundanceMatrix) else np.asarray(A, dtype=np.float64)
    return values.mean(axis=0)


def _paired(estimates, truths) -> tuple[np.ndarray, np.ndarray]:
    est = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if est.shape != gt.shape:
        raise ValidationError(f"estimate/truth shape mismatch: {est.shape} vs {gt.shape}")
    if est.shape[0] < 1:
        raise ValidationError("need at least one image")
    return est, gt


def mad(estimates, truths) -> np.ndarray:
    """Per-class mean absolute difference over images."""
    est, gt = _paired(estimates, truths)
    return np.mean(np.abs(est - gt), axis=0)


@dataclass(frozen=True)
class Correlation:
    r: np.ndarray
    r2: np.ndarray
    degenerate: np.ndarray  # True where a series had zero variance (r set to 0)


def correlation(estimates, truths) -> Correlation:
    """Pearson R per class; zero-variance series give R = 0 and a flag."""
    est, gt = _paired(estimates, truths)
    if est.shape[0] < 2:
        raise ValidationError("correlation needs at least two images")
    de = est - est.mean(axis=0)
    dg = gt - gt.mean(axis=0)
    se = np.sqrt(np.sum(de * de, axis=0))
    sg = np.sqrt(np.sum(dg * dg, axis=0))
    degenerate = (se == 0) | (sg == 0)
    denom = np.where(degenerate, 1.0, se * sg)
    r = np.where(degenerate, 0.0, np.sum(de * dg, axis=0) / denom)
    r = np.clip(r, -1.0, 1.0)
    return Correlation(r, r * r, degenerate)


def merge(values, class_names: Sequence[str], merge_map: ClassMerge) -> np.ndarray:
    """Sum class columns (last axis) into merged categories."""
    return np.asarray(values, dtype=np.float64) @ merge_map.matrix(class_names)


@dataclass(frozen=True)
class BlandAltman:
    mean_diff: np.ndarray
    sd_diff: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    truth: np.ndarray  # (n_images, n_classes) x-coordinates
    diff: np.ndarray  # (n_images, n_classes) estimate minus truth


def bland_altman(estimates, truths) -> BlandAltman:
    """Difference statistics with limits ``mean +/- 2 SD`` (population SD)."""
    est, gt = _paired(estimates, truths)
    if est.shape[0] < 2:
        raise ValidationError("Bland-Altman statistics need at least two images")
    diff = est - gt
    mean = diff.mean(axis=0)
    sd = diff.std(axis=0)
    return BlandAltman(mean, sd, mean - 2 * sd, mean + 2 * sd, gt, diff)


def report(
    estimates,
    truths,
    class_names: Sequence[str],
    merge_map: ClassMerge | None = None,
) -> dict:
    """Table-shaped summary: individual and merged MAD / R / R^2 per class plus averages."""
    est, gt = _paired(estimates, truths)

    def block(e, g, names):
        m = mad(e, g)
        out = {"classes": list(names), "mad": m.tolist(), "average_mad": float(m.mean())}
        if e.shape[0] >= 2:
            c = correlation(e, g)
            out.update(
                r=c.r.tolist(),
                r2=c.r2.tolist(),
                average_r2=float(c.r2.mean()),
                degenerate=c.degenerate.tolist(),
            )
        return out

    result = {"n_images": int(est.shape[0]), "individual": block(est, gt, class_names)}
    if merge_map is not None:
        cats = merge_map.categories(class_names)
        result["merged"] = block(
            merge(est, class_names, merge_map), merge(gt, class_names, merge_map), cats
        )
    return result

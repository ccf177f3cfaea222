"""Dual prediction/interpretation attack laboratory.

Thin python surface over the C++ core: synthetic datasets, small CNN
classifiers, saliency interpreters, the dual attacks, and the metric helpers.
"""

from ._core import (  # noqa: F401
    Classifier,
    RtsMasker,
    adv2,
    h_smooth,
    iou_score,
    lp_distance,
    make_dataset,
    pgd,
    saliency,
    squeeze,
    train_classifier,
    train_rts,
)

__all__ = [
    "Classifier",
    "RtsMasker",
    "adv2",
    "h_smooth",
    "iou_score",
    "lp_distance",
    "make_dataset",
    "pgd",
    "saliency",
    "squeeze",
    "train_classifier",
    "train_rts",
]

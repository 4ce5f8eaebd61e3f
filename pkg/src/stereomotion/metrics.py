"""Motion error on SE(3) and outlier-detection statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Rigid3, log_se3
from .rdcr import OutlierMask

__all__ = ["DetectionStats", "se3_error", "relative_error", "detection_stats", "sequence_error"]

REL_EPS = 1e-5


def se3_error(M: Rigid3, M_star: Rigid3) -> float:
    """Norm of the twist taking ``M_star`` to ``M``: ``||log(M M_star^-1)||``."""
    return float(np.linalg.norm(log_se3(M @ M_star.inverse())))


def relative_error(M: Rigid3, M_star: Rigid3, eps: float = REL_EPS) -> float:
    return se3_error(M, M_star) / (float(np.linalg.norm(log_se3(M_star))) + eps)


def sequence_error(estimates, truths) -> float:
    """Arithmetic mean of per-frame relative errors."""
    errs = [relative_error(M, Ms) for M, Ms in zip(estimates, truths, strict=True)]
    return float(np.mean(errs)) if errs else float("nan")


@dataclass(frozen=True)
class DetectionStats:
    true_positive: int
    false_positive: int
    false_negative: int
    true_negative: int

    @property
    def n(self) -> int:
        return self.true_positive + self.false_positive + self.false_negative + self.true_negative

    @property
    def accuracy(self) -> float:
        return (self.true_positive + self.true_negative) / self.n if self.n else 1.0

    @property
    def removal_fraction(self) -> float:
        return (self.true_positive + self.false_positive) / self.n if self.n else 0.0

    @property
    def excess_elimination(self) -> float:
        return self.false_positive / self.n if self.n else 0.0

    @property
    def recall(self) -> float:
        pos = self.true_positive + self.false_negative
        return self.true_positive / pos if pos else 1.0

    @property
    def precision(self) -> float:
        flagged = self.true_positive + self.false_positive
        return self.true_positive / flagged if flagged else 1.0

    def as_dict(self) -> dict:
        return {
            "tp": self.true_positive,
            "fp": self.false_positive,
            "fn": self.false_negative,
            "tn": self.true_negative,
            "accuracy": self.accuracy,
            "recall": self.recall,
            "precision": self.precision,
            "removal_fraction": self.removal_fraction,
            "excess_elimination": self.excess_elimination,
        }


def detection_stats(mask, truth) -> DetectionStats:
    flags = mask.flags if isinstance(mask, OutlierMask) else np.asarray(mask, dtype=bool).reshape(-1)
    truth = np.asarray(truth, dtype=bool).reshape(-1)
    if flags.shape != truth.shape:
        raise ValueError(f"mask length {flags.size} != truth length {truth.size}")
    return DetectionStats(
        int(np.sum(flags & truth)),
        int(np.sum(flags & ~truth)),
        int(np.sum(~flags & truth)),
        int(np.sum(~flags & ~truth)),
    )

"""Synthetic moving-stereo-rig scenes with Gaussian and impulsive corruption."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    MIN_MATCHES,
    QuadMatch,
    Rigid3,
    StereoRig,
    array_to_matches,
    exp_se3,
    matches_to_array,
    project_points,
)

__all__ = [
    "CorruptionConfig",
    "SyntheticScene",
    "SceneGenerationError",
    "generate_scene",
    "corrupt_matches",
    "render_matches",
    "random_motion",
    "outlier_count",
]

DEPTH_RANGE = (4.0, 60.0)  # in baselines
MAX_ROTATION = 0.2  # rad
MIN_ROTATION = 0.02
TRANSLATION_RANGE = (0.5, 2.0)  # in baselines
_MAX_BATCHES = 200


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CorruptionConfig:
    n_matches: int = 1000
    outlier_fraction: float = 0.3
    sigma_n: float = 1.5
    sigma_j_range: tuple[float, float] = (2.0, 100.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.sigma_j_range
        object.__setattr__(self, "sigma_j_range", (float(lo), float(hi)))
        if self.n_matches < MIN_MATCHES:
            raise ValueError(f"n_matches must be >= {MIN_MATCHES}")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1]")
        if self.sigma_n < 0:
            raise ValueError("sigma_n must be >= 0")
        if not 0.0 <= lo <= hi:
            raise ValueError("sigma_j_range must be a nonempty interval with lower bound >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    rig: StereoRig
    motion_true: Rigid3
    points_3d: np.ndarray
    clean: np.ndarray  # (N, 8)
    corrupt: np.ndarray  # (N, 8)
    outlier_truth: np.ndarray  # (N,) bool
    config: CorruptionConfig = field(repr=False, default=None)

    @property
    def n_matches(self) -> int:
        return self.clean.shape[0]

    @property
    def matches_clean(self) -> list[QuadMatch]:
        return array_to_matches(self.clean)

    @property
    def matches_corrupt(self) -> list[QuadMatch]:
        return array_to_matches(self.corrupt)


def outlier_count(n: int, fraction: float) -> int:
    # Python's round() resolves .5 ties to even
    return int(round(fraction * n))


def _streams(seed: int):
    geometry, corruption = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(geometry), np.random.default_rng(corruption)


def _unit_vectors(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_motion(rng, baseline: float) -> Rigid3:
    axis = _unit_vectors(rng, 1, 3)[0]
    angle = rng.uniform(MIN_ROTATION, MAX_ROTATION)
    direction = _unit_vectors(rng, 1, 3)[0]
    dist = rng.uniform(*TRANSLATION_RANGE) * baseline
    rot = exp_se3(np.concatenate([axis * angle, np.zeros(3)]))
    return Rigid3(rot.R, direction * dist)


def image_size(rig: StereoRig) -> tuple[float, float]:
    """Image extent implied by a centred principal point."""
    return 2.0 * rig.cu, 2.0 * rig.cv


def render_matches(rig: StereoRig, motion: Rigid3, points) -> np.ndarray:
    """Noiseless ``(N, 8)`` four-view projections of frame-``i`` points."""
    points = np.asarray(points, dtype=float)
    return np.hstack(
        [
            project_points("left", rig, None, points),
            project_points("right", rig, None, points),
            project_points("left", rig, motion, points),
            project_points("right", rig, motion, points),
        ]
    )


def _visible(rig, motion, pts):
    width, height = image_size(rig)
    ok = np.ones(len(pts), dtype=bool)
    for M in (None, motion):
        P = pts if M is None else M @ pts
        for side in ("left", "right"):
            Q = P - rig.offset(side)
            Z = Q[:, 2]
            safe = np.where(Z > 0, Z, 1.0)
            u = rig.f * Q[:, 0] / safe + rig.cu
            v = rig.f * Q[:, 1] / safe + rig.cv
            ok &= (Z > 0) & (u >= 0) & (u <= width) & (v >= 0) & (v <= height)
    return ok


def _sample_points(rng, rig: StereoRig, motion: Rigid3, n: int) -> np.ndarray:
    width, height = image_size(rig)
    zmin, zmax = DEPTH_RANGE[0] * rig.baseline, DEPTH_RANGE[1] * rig.baseline
    kept = []
    count = 0
    for _ in range(_MAX_BATCHES):
        batch = max(2 * (n - count), 64)
        u = rng.uniform(0.0, width, batch)
        v = rng.uniform(0.0, height, batch)
        Z = rng.uniform(zmin, zmax, batch)
        pts = np.column_stack([(u - rig.cu) * Z / rig.f, (v - rig.cv) * Z / rig.f, Z])
        pts = pts[_visible(rig, motion, pts)]
        kept.append(pts)
        count += len(pts)
        if count >= n:
            return np.vstack(kept)[:n]
    raise SceneGenerationError(f"could only place {count} of {n} points in the common frustum")


def corrupt_matches(matches, cfg: CorruptionConfig, rng=None):
    """Add Gaussian noise to every match and impulsive offsets to a random subset.

    Returns ``(corrupted (N, 8) array, outlier mask)``. An impulsive offset hits
    all four points of a selected match; each point gets a uniformly random
    direction and a magnitude uniform in ``cfg.sigma_j_range``.
    """
    arr = matches_to_array(matches)
    if rng is None:
        rng = _streams(cfg.seed)[1]
    n = arr.shape[0]
    noisy = arr + rng.normal(0.0, cfg.sigma_n, size=arr.shape) if cfg.sigma_n > 0 else arr.copy()
    k = outlier_count(n, cfg.outlier_fraction)
    mask = np.zeros(n, dtype=bool)
    if k:
        idx = rng.choice(n, size=k, replace=False)
        mask[idx] = True
        angle = rng.uniform(0.0, 2.0 * math.pi, size=(k, 4))
        magnitude = rng.uniform(*cfg.sigma_j_range, size=(k, 4))
        offsets = np.empty((k, 8))
        offsets[:, 0::2] = magnitude * np.cos(angle)
        offsets[:, 1::2] = magnitude * np.sin(angle)
        noisy[idx] += offsets
    return noisy, mask


def generate_scene(rig: StereoRig, cfg: CorruptionConfig) -> SyntheticScene:
    """Draw a random inter-frame motion, visible points and corrupted matches."""
    geo_rng, corr_rng = _streams(cfg.seed)
    motion = random_motion(geo_rng, rig.baseline)
    points = _sample_points(geo_rng, rig, motion, cfg.n_matches)
    clean = render_matches(rig, motion, points)
    corrupt, mask = corrupt_matches(clean, cfg, corr_rng)
    for arr in (points, clean, corrupt, mask):
        arr.setflags(write=False)
    return SyntheticScene(rig, motion, points, clean, corrupt, mask, cfg)

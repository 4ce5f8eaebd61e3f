"""RANSAC over minimal three-match motion hypotheses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import (
    MIN_INLIERS,
    InsufficientInliersError,
    compress,
    lm_optimize,
    triangulate_matches,
)
from .geometry import GeometryError, Rigid3, StereoRig, exp_jacobian, exp_se3, matches_to_array
from .rdcr import OutlierMask

__all__ = [
    "RansacConfig",
    "DegenerateSampleError",
    "ConsensusFailureError",
    "reprojection_residuals",
    "reprojection_inliers",
    "reprojection_cost",
    "refine_reprojection",
    "minimal_model",
    "ransac_estimate",
]


# Reprojection gate in pixels. Triangulation amplifies sigma_n = 1.5 so that
# clean matches reach ~11 px at the 99th percentile.
DEFAULT_GATE = 10.0


class DegenerateSampleError(GeometryError):
    pass


class ConsensusFailureError(RuntimeError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    max_models: int = 250
    inlier_threshold: float = DEFAULT_GATE  # pixels
    min_sample: int = 3
    seed: int = 0
    lm_iters: int = 10

    def __post_init__(self):
        if self.max_models < 1:
            raise ValueError("max_models must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if self.min_sample != 3:
            raise ValueError("minimal sample size is 3")


def _project_next(X, M: Rigid3, rig: StereoRig):
    """Left and right time-``i+1`` pixels of frame-``i`` points; NaN behind the camera."""
    Y = X @ M.R.T + M.t
    out = []
    for side in ("left", "right"):
        Q = Y - rig.offset(side)
        Z = np.where(Q[:, 2] > 0, Q[:, 2], np.nan)
        out.append(np.column_stack([rig.f * Q[:, 0] / Z + rig.cu, rig.f * Q[:, 1] / Z + rig.cv]))
    return out


def reprojection_residuals(matches, rig: StereoRig, M: Rigid3, X=None) -> np.ndarray:
    """``(N, 2)`` left/right time-``i+1`` reprojection distances in pixels.

    Points that cannot be triangulated or land behind a camera get ``inf``.
    """
    arr = matches_to_array(matches)
    if X is None:
        X, _ = triangulate_matches(arr, rig)
    left, right = _project_next(X, M, rig)
    res = np.column_stack(
        [np.linalg.norm(left - arr[:, 4:6], axis=1), np.linalg.norm(right - arr[:, 6:8], axis=1)]
    )
    return np.where(np.isfinite(res), res, np.inf)


def reprojection_inliers(matches, rig, M, threshold: float = DEFAULT_GATE, X=None) -> np.ndarray:
    """A match is an inlier iff both next-frame reprojections fall within ``threshold``."""
    return np.all(reprojection_residuals(matches, rig, M, X) < threshold, axis=1)


def reprojection_cost(matches, rig, M, X=None) -> float:
    res = reprojection_residuals(matches, rig, M, X)
    return float(np.sum(res**2))


def _residual_and_jacobian(omega, X, obs, rig):
    """Stacked reprojection residuals ``(4N,)`` and their ``(4N, 6)`` Jacobian."""
    M = exp_se3(omega)
    dM = exp_jacobian(omega)
    Xh = np.column_stack([X, np.ones(len(X))])
    Y = X @ M.R.T + M.t
    dY = np.einsum("kij,nj->nki", dM[:, :3, :], Xh)  # (N, 6, 3)
    res, jac = [], []
    for side, cols in (("left", slice(0, 2)), ("right", slice(2, 4))):
        Q = Y - rig.offset(side)
        Z = Q[:, 2]
        u = rig.f * Q[:, 0] / Z + rig.cu
        v = rig.f * Q[:, 1] / Z + rig.cv
        res.append(np.column_stack([u, v]) - obs[:, cols])
        du = rig.f * (dY[:, :, 0] * Z[:, None] - Q[:, 0:1] * dY[:, :, 2]) / Z[:, None] ** 2
        dv = rig.f * (dY[:, :, 1] * Z[:, None] - Q[:, 1:2] * dY[:, :, 2]) / Z[:, None] ** 2
        jac.append(np.stack([du, dv], axis=1))
    r = np.concatenate(res, axis=1).reshape(-1)
    J = np.concatenate(jac, axis=1).reshape(-1, 6)
    return r, J


def refine_reprojection(X, obs_next, rig: StereoRig, omega0=None, max_iters: int = 10, tol: float = 1e-12):
    """LM on the two-view reprojection cost of fixed frame-``i`` points.

    ``obs_next`` is ``(N, 4)``: left then right time-``i+1`` pixels. Only
    cost-decreasing steps are accepted. Returns ``(omega, cost, iterations)``.
    """
    omega = np.zeros(6) if omega0 is None else np.array(omega0, dtype=float)
    r, J = _residual_and_jacobian(omega, X, obs_next, rig)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise GeometryError("reprojection cost is not finite at the starting motion")
    H = J.T @ J
    damping = 1e-3 * float(np.mean(np.diag(H))) or 1e-12
    it = 0
    for it in range(1, max_iters + 1):
        g = J.T @ r
        accepted = False
        while damping < 1e16:
            step = np.linalg.solve(H + damping * np.eye(6), -g)
            cand = omega + step
            r_c, J_c = _residual_and_jacobian(cand, X, obs_next, rig)
            cost_c = float(r_c @ r_c)
            if np.isfinite(cost_c) and cost_c <= cost:
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            break
        damping /= 10.0
        decrease = cost - cost_c
        omega, r, J, cost = cand, r_c, J_c, cost_c
        H = J.T @ J
        if decrease <= tol * max(cost + decrease, 1e-300) or np.linalg.norm(step) < 1e-12:
            break
    return omega, cost, it


def _check_sample(X, tol=1e-6):
    if not np.all(np.isfinite(X)):
        raise DegenerateSampleError("sample contains a match with non-positive disparity")
    area = np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0]))
    scale = max(np.linalg.norm(X[1] - X[0]) * np.linalg.norm(X[2] - X[0]), 1.0)
    if area <= tol * scale:
        raise DegenerateSampleError("sample points are collinear or repeated")


def minimal_model(sample, rig: StereoRig, max_iters: int = 10) -> Rigid3:
    """Motion from exactly three matches by reprojection LM started at the identity."""
    arr = matches_to_array(sample)
    if arr.shape[0] != 3:
        raise ValueError(f"minimal sample needs 3 matches, got {arr.shape[0]}")
    X, _ = triangulate_matches(arr, rig)
    _check_sample(X)
    omega, _, _ = refine_reprojection(X, arr[:, 4:8], rig, None, max_iters)
    return exp_se3(omega)


def ransac_estimate(matches, rig: StereoRig, cfg: RansacConfig = RansacConfig()):
    """Best-consensus motion over ``cfg.max_models`` random triples.

    Each hypothesis is scored by the number of matches whose left and right
    time-``i+1`` reprojections both fall within ``cfg.inlier_threshold``. The
    winner is refitted on its consensus set by compressed least squares and
    polished on the reprojection cost; the refit is kept only if it does not
    raise the reprojection cost of the consensus set. Returns
    ``(motion, mask, diagnostics)`` with ``mask`` flagging non-consensus matches.
    """
    arr = matches_to_array(matches)
    n = arr.shape[0]
    if n < 3:
        raise InsufficientInliersError(f"RANSAC needs at least 3 matches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    X, valid = triangulate_matches(arr, rig)
    candidates = np.flatnonzero(valid)
    if candidates.size < 3:
        raise ConsensusFailureError("fewer than 3 matches can be triangulated")
    best_score, best_model, scores = -1, None, []
    for _ in range(cfg.max_models):
        idx = rng.choice(candidates, size=3, replace=False)
        try:
            _check_sample(X[idx])
            omega, _, _ = refine_reprojection(X[idx], arr[idx, 4:8], rig, None, cfg.lm_iters)
        except (GeometryError, np.linalg.LinAlgError):
            continue
        model = exp_se3(omega)
        score = int(reprojection_inliers(arr, rig, model, cfg.inlier_threshold, X).sum())
        scores.append(score)
        if score > best_score:
            best_score, best_model = score, model
    if best_model is None or best_score < MIN_INLIERS:
        raise ConsensusFailureError(f"no hypothesis reached {MIN_INLIERS} inliers")
    consensus = reprojection_inliers(arr, rig, best_model, cfg.inlier_threshold, X)
    base_cost = reprojection_cost(arr[consensus], rig, best_model, X[consensus])
    model = best_model
    try:
        reduced = compress(arr, ~consensus, rig)
        refit = lm_optimize(reduced).omega
        omega, cost, _ = refine_reprojection(X[consensus], arr[consensus, 4:8], rig, refit, cfg.lm_iters)
        if cost <= base_cost:
            model = exp_se3(omega)
    except (GeometryError, ArithmeticError):
        pass
    diag = {"best_score": best_score, "scores": scores, "models_tried": cfg.max_models}
    return model, OutlierMask(~consensus, cfg.inlier_threshold), diag

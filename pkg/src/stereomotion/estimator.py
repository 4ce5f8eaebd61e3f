"""Compressed algebraic least squares for stereo motion.

Every inlier match contributes two cross-product residuals, one per camera at
time ``i+1``. Both are linear in the stacked motion ``[R (row-major), t, 1]``,
so the whole cost folds into a 13x13 quadratic form that is minimised on SE(3)
with Levenberg-Marquardt over a twist.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    MIN_MATCHES,
    GeometryError,
    InsufficientDataError,
    Rigid3,
    StereoRig,
    build_W,
    exp_jacobian,
    exp_se3,
    matches_to_array,
)
from .rdcr import OutlierMask, RdcrParams, apg_init, classify_outliers, rdcr_decompose

__all__ = [
    "NonpositiveDisparityError",
    "DegenerateGeometryError",
    "InsufficientInliersError",
    "NumericalFailureError",
    "ReducedMeasurement",
    "LMResult",
    "triangulate",
    "triangulate_matches",
    "normalizing_transform",
    "build_A",
    "compress",
    "direct_cost",
    "evaluate_cost",
    "cost_gradient",
    "lm_optimize",
    "estimate_motion",
    "estimate_unfiltered",
]

log = logging.getLogger(__name__)

MIN_INLIERS = 3
TAYLOR_ORDER = 10


class NonpositiveDisparityError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


class InsufficientInliersError(GeometryError):
    pass


class NumericalFailureError(ArithmeticError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


# --- triangulation -----------------------------------------------------------


def triangulate(x_left, x_right, rig: StereoRig) -> np.ndarray:
    """Frame-``i`` 3D point from an aligned stereo pair."""
    x_left = np.asarray(x_left, dtype=float)
    x_right = np.asarray(x_right, dtype=float)
    d = x_left[0] - x_right[0]
    if not d > 0:
        raise NonpositiveDisparityError(f"disparity {d} is not positive")
    Z = rig.f * rig.baseline / d
    return np.array([(x_left[0] - rig.cu) * Z / rig.f, (x_left[1] - rig.cv) * Z / rig.f, Z])


def triangulate_matches(matches, rig: StereoRig):
    """Triangulate all frame-``i`` pairs; returns ``(points, valid)``.

    Rows with non-positive disparity get NaN points and ``valid=False``.
    """
    arr = matches_to_array(matches)
    d = arr[:, 0] - arr[:, 2]
    valid = d > 0
    Z = np.full(arr.shape[0], np.nan)
    Z[valid] = rig.f * rig.baseline / d[valid]
    X = (arr[:, 0] - rig.cu) * Z / rig.f
    Y = (arr[:, 1] - rig.cv) * Z / rig.f
    return np.column_stack([X, Y, Z]), valid


# --- linearised residuals ------------------------------------------------------


def normalizing_transform(points2d) -> np.ndarray:
    """Similarity moving the centroid to the origin with RMS distance sqrt(2)."""
    pts = np.asarray(points2d, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        return np.eye(3)
    centroid = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    s = np.sqrt(2.0) / rms if rms > 0 else 1.0
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _baseline_vector(side: str, rig: StereoRig) -> np.ndarray:
    if side == "left":
        return np.zeros(3)
    if side == "right":
        return np.array([rig.f * rig.baseline, 0.0, 0.0])
    raise ValueError(f"unknown camera side {side!r}")


def homogeneous_points(X, scale: str = "depth") -> np.ndarray:
    """Homogeneous representatives of Euclidean points.

    ``scale="depth"`` divides by the depth, giving ``(X/Z, Y/Z, 1, 1/Z)``;
    ``scale="unit"`` appends a 1. Scaling a homogeneous point weights its
    algebraic residual by the same factor, so the depth form keeps distant,
    poorly triangulated points from dominating the cost.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    Xh = np.column_stack([X, np.ones(len(X))])
    if scale == "depth":
        return Xh / X[:, 2:3]
    if scale == "unit":
        return Xh
    raise ValueError(f"unknown homogeneous scaling {scale!r}")


def _build_A_batch(side, Xh, x_next, rig: StereoRig, T=None) -> np.ndarray:
    """``(N, 3, 13)`` coefficient blocks; see :func:`build_A`."""
    Xh = np.asarray(Xh, dtype=float).reshape(-1, 4)
    x_next = np.asarray(x_next, dtype=float).reshape(-1, 2)
    n = Xh.shape[0]
    T = np.eye(3) if T is None else np.asarray(T, dtype=float)
    P = T @ rig.K  # image-side map applied to K (R X + t w)
    b = T @ _baseline_vector(side, rig)
    # q = R X + t w = G m, G[a, 3a + c] = X_c, G[a, 9 + a] = w
    G = np.zeros((n, 3, 13))
    for a in range(3):
        G[:, a, 3 * a : 3 * a + 3] = Xh[:, :3]
        G[:, a, 9 + a] = Xh[:, 3]
    H = np.einsum("ij,njk->nik", P, G)
    H[:, :, 12] -= b[None, :] * Xh[:, 3:4]
    xh = np.column_stack([x_next, np.ones(n)]) @ T.T
    # (H m) x xh = -[xh]_x H m
    cross = np.zeros((n, 3, 3))
    cross[:, 0, 1], cross[:, 0, 2] = -xh[:, 2], xh[:, 1]
    cross[:, 1, 0], cross[:, 1, 2] = xh[:, 2], -xh[:, 0]
    cross[:, 2, 0], cross[:, 2, 1] = -xh[:, 1], xh[:, 0]
    return -np.einsum("nij,njk->nik", cross, H)


def build_A(side: str, X, x_next, rig: StereoRig, T=None) -> np.ndarray:
    """3x13 matrix with ``A @ m == (T (K (R X + t w) - b w)) x (T x_next_h)``.

    ``m`` is the stacked motion ``[R row-major, t, 1]`` and ``X`` either a
    Euclidean point (``w = 1``) or a homogeneous ``(X, w)`` 4-vector; ``b`` is
    zero for the left camera and ``(f B, 0, 0)`` for the right one. ``T`` is
    an optional image-plane similarity (identity by default).
    """
    X = np.asarray(X, dtype=float).reshape(-1)
    Xh = np.append(X, 1.0) if X.size == 3 else X
    return _build_A_batch(side, Xh, x_next, rig, T)[0]


@dataclass(frozen=True, eq=False)
class ReducedMeasurement:
    gamma: np.ndarray
    n_points_compressed: int
    transform: np.ndarray = field(default_factory=lambda: np.eye(3), repr=False)
    point_scale: str = "depth"

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float)
        if g.shape != (13, 13):
            raise ValueError(f"gamma must be 13x13, got {g.shape}")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    @property
    def trace(self) -> float:
        return float(np.trace(self.gamma))


def _inlier_flags(mask, n):
    if mask is None:
        return np.ones(n, dtype=bool)
    flags = mask.flags if isinstance(mask, OutlierMask) else np.asarray(mask, dtype=bool)
    if flags.size != n:
        raise ValueError(f"mask has {flags.size} entries for {n} matches")
    return ~flags


def compress(
    matches,
    mask: OutlierMask | None,
    rig: StereoRig,
    normalize: bool = True,
    point_scale: str = "depth",
) -> ReducedMeasurement:
    """Fold the algebraic residuals of all unmasked matches into one 13x13 matrix.

    Matches with non-positive frame-``i`` disparity cannot be triangulated
    and are skipped. With ``normalize=True`` the time ``i+1`` image
    coordinates are conditioned by a common similarity (recorded in the
    result) before forming the residuals; ``point_scale`` picks the
    homogeneous representative of the triangulated points.
    """
    arr = matches_to_array(matches)
    keep = _inlier_flags(mask, arr.shape[0])
    if keep.sum() < MIN_INLIERS:
        raise InsufficientInliersError(f"only {int(keep.sum())} unmasked matches, need {MIN_INLIERS}")
    X, valid = triangulate_matches(arr[keep], rig)
    if not valid.any():
        raise DegenerateGeometryError("no unmasked match has positive disparity")
    if valid.sum() < MIN_INLIERS:
        raise InsufficientInliersError(f"only {int(valid.sum())} matches triangulate, need {MIN_INLIERS}")
    used = arr[keep][valid]
    X = X[valid]
    T = normalizing_transform(used[:, 4:8].reshape(-1, 2)) if normalize else np.eye(3)
    Xh = homogeneous_points(X, point_scale)
    gamma = np.zeros((13, 13))
    for side, cols in (("left", slice(4, 6)), ("right", slice(6, 8))):
        A = _build_A_batch(side, Xh, used[:, cols], rig, T).reshape(-1, 13)
        gamma += A.T @ A
    gamma = 0.5 * (gamma + gamma.T)
    return ReducedMeasurement(gamma, int(used.shape[0]), T, point_scale)


def direct_cost(matches, rig: StereoRig, M: Rigid3, mask=None, transform=None, point_scale="depth") -> float:
    """Uncompressed algebraic cost, one explicit cross product per residual.

    Each residual pushes the homogeneous point through the 3x4 camera chain
    ``K [I | -offset] M`` and crosses it with the observed point.
    """
    arr = matches_to_array(matches)
    keep = _inlier_flags(mask, arr.shape[0])
    X, valid = triangulate_matches(arr[keep], rig)
    used = arr[keep][valid]
    Xh = homogeneous_points(X[valid], point_scale)
    T = np.eye(3) if transform is None else np.asarray(transform, dtype=float)
    total = 0.0
    for side, cols in (("left", slice(4, 6)), ("right", slice(6, 8))):
        camera = T @ rig.K @ np.hstack([np.eye(3), -rig.offset(side)[:, None]]) @ M.matrix()
        p = Xh @ camera.T
        xh = np.column_stack([used[:, cols], np.ones(len(used))]) @ T.T
        r = np.cross(p, xh)
        total += float(np.sum(r * r))
    return total


# --- optimisation --------------------------------------------------------------


def _gamma(g) -> np.ndarray:
    return g.gamma if isinstance(g, ReducedMeasurement) else np.asarray(g, dtype=float)


def _stack_jacobian(omega, order=TAYLOR_ORDER) -> np.ndarray:
    """13x6 derivative of the stacked motion w.r.t. the twist."""
    dM = exp_jacobian(omega, order)
    J = np.zeros((13, 6))
    J[:9] = dM[:, :3, :3].reshape(6, 9).T
    J[9:12] = dM[:, :3, 3].T
    return J


def evaluate_cost(gamma, omega) -> float:
    xi = exp_se3(omega).stacked()
    return float(xi @ _gamma(gamma) @ xi)


def cost_gradient(gamma, omega, order: int = TAYLOR_ORDER) -> np.ndarray:
    """``dE/d omega_i = (d xi / d omega_i)^T (G + G^T) xi``."""
    G = _gamma(gamma)
    xi = exp_se3(omega).stacked()
    return _stack_jacobian(omega, order).T @ ((G + G.T) @ xi)


@dataclass
class LMResult:
    omega: np.ndarray
    cost: float
    iterations: int
    converged: bool
    reason: str
    trace: list = field(default_factory=list)

    @property
    def motion(self) -> Rigid3:
        return exp_se3(self.omega)


def lm_optimize(
    gamma,
    omega0=None,
    max_iters: int = 50,
    rel_tol: float = 1e-12,
    step_tol: float = 1e-10,
    abs_tol: float = 1e-20,
) -> LMResult:
    """Levenberg-Marquardt on ``xi(omega)^T G xi(omega)``.

    Stops when the cost is below ``abs_tol * trace(G)``, when an accepted
    step decreases the cost by less than ``rel_tol`` relative, when the step
    norm drops under ``step_tol``, or after ``max_iters`` iterations.
    ``trace`` holds the cost after each iteration.
    """
    G = _gamma(gamma)
    G = 0.5 * (G + G.T)
    omega = np.zeros(6) if omega0 is None else np.array(omega0, dtype=float).reshape(6)
    floor = abs_tol * max(float(np.trace(G)), np.finfo(float).tiny)
    xi = exp_se3(omega).stacked()
    cost = float(xi @ G @ xi)
    trace = [cost]
    if not np.isfinite(cost):
        raise NumericalFailureError("non-finite initial cost", trace)
    if cost <= floor:
        return LMResult(omega, cost, 0, True, "cost below tolerance", trace)
    damping = None
    for it in range(1, max_iters + 1):
        J = _stack_jacobian(omega)
        H = J.T @ G @ J
        g = J.T @ G @ xi
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
            raise NumericalFailureError(f"non-finite gradient at iteration {it}", trace)
        if damping is None:
            damping = 1e-3 * float(np.mean(np.diag(H)))
            if not damping > 0:
                damping = 1e-12
        while True:
            step = np.linalg.solve(H + damping * np.eye(6), -g)
            cand = omega + step
            xi_c = exp_se3(cand).stacked()
            cost_c = float(xi_c @ G @ xi_c)
            if not np.isfinite(cost_c):
                raise NumericalFailureError(f"non-finite cost at iteration {it}", trace)
            if cost_c <= cost:
                break
            damping *= 10.0
            if damping > 1e16:
                trace.append(cost)
                return LMResult(omega, cost, it, True, "damping saturated", trace)
        damping /= 10.0
        decrease = cost - cost_c
        omega, xi, cost = cand, xi_c, cost_c
        trace.append(cost)
        if cost <= floor:
            return LMResult(omega, cost, it, True, "cost below tolerance", trace)
        if decrease <= rel_tol * trace[-2]:
            return LMResult(omega, cost, it, True, "relative decrease below tolerance", trace)
        if np.linalg.norm(step) < step_tol:
            return LMResult(omega, cost, it, True, "step below tolerance", trace)
    return LMResult(omega, cost, max_iters, False, "max iterations", trace)


# --- pipeline ------------------------------------------------------------------


def estimate_unfiltered(matches, rig: StereoRig, mask=None, max_iters: int = 50):
    """Compressed least squares on all (or all unmasked) matches."""
    t0 = time.perf_counter()
    reduced = compress(matches, mask, rig)
    t1 = time.perf_counter()
    result = lm_optimize(reduced, max_iters=max_iters)
    t2 = time.perf_counter()
    diag = {
        "lm_iterations": result.iterations,
        "lm_reason": result.reason,
        "lm_trace": result.trace,
        "n_compressed": reduced.n_points_compressed,
        "time_compress": t1 - t0,
        "time_optimize": t2 - t1,
    }
    return result.motion, diag


def estimate_motion(
    matches,
    rig: StereoRig,
    params: RdcrParams = RdcrParams(),
    *,
    method: str = "rdcr",
    refine: bool = False,
    refine_threshold: float = 15.0,
    max_iters: int = 50,
):
    """Outlier filtering by robust decomposition, then compressed least squares.

    ``method`` selects the decomposition used for filtering: ``"rdcr"`` (the
    rank-constrained refinement) or ``"apg"`` (its convex initialisation
    alone). With ``refine=True`` the compressed fit is re-run once on the
    unflagged matches whose next-frame reprojections fall within
    ``refine_threshold`` pixels of the first estimate.
    Returns ``(motion, mask, diagnostics)``.
    """
    arr = matches_to_array(matches)
    if arr.shape[0] < MIN_MATCHES:
        raise InsufficientDataError(f"need at least {MIN_MATCHES} matches, got {arr.shape[0]}")
    t0 = time.perf_counter()
    W = build_W(arr, "K-inverse", rig)
    init = apg_init(W, params)
    if method == "rdcr":
        dec = rdcr_decompose(W, params, init)
    elif method == "apg":
        dec = init
    else:
        raise ValueError(f"unknown decomposition method {method!r}")
    mask = classify_outliers(dec.S, arr.shape[0], params.tau0)
    t1 = time.perf_counter()
    if (~mask.flags).sum() < MIN_INLIERS:
        raise InsufficientInliersError(f"only {int((~mask.flags).sum())} matches survive filtering")
    motion, diag = estimate_unfiltered(arr, rig, mask, max_iters)
    diag.update(
        {
            "apg_iterations": init.iterations_run,
            "rdcr_iterations": dec.iterations_run if method == "rdcr" else 0,
            "n_flagged": mask.n_flagged,
            "threshold": mask.threshold_used,
            "time_decompose": t1 - t0,
        }
    )
    if refine:
        from .baselines import reprojection_inliers

        keep = reprojection_inliers(arr, rig, motion, refine_threshold) & mask.inliers
        if keep.sum() >= MIN_INLIERS:
            motion, extra = estimate_unfiltered(arr, rig, ~keep, max_iters)
            diag["refine"] = extra
    return motion, mask, diag

"""Rigid-motion algebra, pinhole stereo cameras and the four-view measurement matrix.

Twists are ordered ``(w1, w2, w3, v1, v2, v3)``: rotational part first,
translational part second. Points are expressed in the left camera frame at
time ``i``; the right camera sits at ``+baseline`` along x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "BehindCameraError",
    "BranchAmbiguityError",
    "InsufficientDataError",
    "Rigid3",
    "CameraIntrinsics",
    "StereoRig",
    "QuadMatch",
    "MeasurementMatrix",
    "hat",
    "vee",
    "se3_generators",
    "twist_matrix",
    "exp_se3",
    "log_se3",
    "exp_jacobian",
    "project",
    "project_points",
    "matches_to_array",
    "array_to_matches",
    "build_W",
]

_SMALL_ANGLE = 1e-8
# log_se3 refuses rotations this close to pi
PI_MARGIN = 1e-6


class GeometryError(ValueError):
    """Base class for geometric contract violations."""


class BehindCameraError(GeometryError):
    pass


class BranchAmbiguityError(GeometryError):
    pass


class InsufficientDataError(GeometryError):
    pass


def hat(w):
    """3-vector -> skew-symmetric matrix."""
    w = np.asarray(w, dtype=float)
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def vee(W):
    return np.array([W[2, 1], W[0, 2], W[1, 0]], dtype=float)


@dataclass(frozen=True, eq=False)
class Rigid3:
    """Element of SE(3): ``x -> R @ x + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Rigid3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Rigid3":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Rigid3":
        return Rigid3(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other):
        if isinstance(other, Rigid3):
            return Rigid3(self.R @ other.R, self.R @ other.t + self.t)
        pts = np.asarray(other, dtype=float)
        return pts @ self.R.T + self.t

    def stacked(self) -> np.ndarray:
        """13-vector ``[R row-major (9), t (3), 1]``."""
        return np.concatenate([self.R.reshape(9), self.t, [1.0]])

    def is_valid(self, tol: float = 1e-9) -> bool:
        return bool(
            np.all(np.isfinite(self.R))
            and np.all(np.isfinite(self.t))
            and np.allclose(self.R.T @ self.R, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(self.R) - 1.0) <= tol
        )

    def __eq__(self, other):
        if not isinstance(other, Rigid3):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    def __repr__(self):
        return f"Rigid3(R={self.R.tolist()}, t={self.t.tolist()})"


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    cu: float
    cv: float

    def __post_init__(self):
        if not (self.f > 0 and math.isfinite(self.f)):
            raise ValueError(f"focal length must be positive, got {self.f}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cu], [0.0, self.f, self.cv], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class StereoRig:
    intrinsics: CameraIntrinsics
    baseline: float

    def __post_init__(self):
        if not (self.baseline > 0 and math.isfinite(self.baseline)):
            raise ValueError(f"baseline must be positive, got {self.baseline}")

    @classmethod
    def kitti(cls) -> "StereoRig":
        """KITTI odometry sequence 00 calibration."""
        return cls(CameraIntrinsics(718.856, 607.1928, 185.2157), 0.5371657)

    @property
    def f(self) -> float:
        return self.intrinsics.f

    @property
    def cu(self) -> float:
        return self.intrinsics.cu

    @property
    def cv(self) -> float:
        return self.intrinsics.cv

    @property
    def K(self) -> np.ndarray:
        return self.intrinsics.K

    def offset(self, side: str) -> np.ndarray:
        """Camera-centre offset of ``side`` in the left-camera frame."""
        if side == "left":
            return np.zeros(3)
        if side == "right":
            return np.array([self.baseline, 0.0, 0.0])
        raise ValueError(f"unknown camera side {side!r}")


@dataclass(frozen=True, eq=False)
class QuadMatch:
    """One point seen in left/right at time i and left/right at time i+1."""

    x_l_i: np.ndarray
    x_r_i: np.ndarray
    x_l_j: np.ndarray
    x_r_j: np.ndarray

    def __post_init__(self):
        for name in ("x_l_i", "x_r_i", "x_l_j", "x_r_j"):
            v = np.array(getattr(self, name), dtype=float).reshape(2)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite coordinates")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x_l_i, self.x_r_i, self.x_l_j, self.x_r_j])

    @classmethod
    def from_vector(cls, v) -> "QuadMatch":
        v = np.asarray(v, dtype=float).reshape(8)
        return cls(v[0:2], v[2:4], v[4:6], v[6:8])

    def __eq__(self, other):
        if not isinstance(other, QuadMatch):
            return NotImplemented
        return np.array_equal(self.as_vector(), other.as_vector())


@dataclass(frozen=True, eq=False)
class MeasurementMatrix:
    """8 x N stack of observations, rows ``(u, v)`` for left-i, right-i, left-i+1, right-i+1."""

    W: np.ndarray
    normalization: str = "K-inverse"
    row_means: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        if W.ndim != 2 or W.shape[0] != 8:
            raise ValueError(f"measurement matrix must be 8 x N, got {W.shape}")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)

    @property
    def shape(self):
        return self.W.shape

    @property
    def n_matches(self) -> int:
        return self.W.shape[1]


# --- se(3) ------------------------------------------------------------------


def se3_generators() -> np.ndarray:
    """The six 4x4 basis generators, in twist order."""
    G = np.zeros((6, 4, 4))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        G[i, :3, :3] = hat(e)
        G[3 + i, i, 3] = 1.0
    return G


_GENERATORS = se3_generators()


def twist_matrix(omega) -> np.ndarray:
    """4x4 generator ``[[hat(w), v], [0, 0]]`` of a twist."""
    omega = np.asarray(omega, dtype=float).reshape(6)
    return np.tensordot(omega, _GENERATORS, axes=1)


def _so3_coeffs(theta: float):
    """Coefficients ``(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)``."""
    t2 = theta * theta
    if theta < _SMALL_ANGLE:
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s = math.sin(theta)
    half = math.sin(0.5 * theta)
    b = 2.0 * half * half / t2
    if theta < 1e-2:
        # theta - sin(theta) cancels badly here
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        c = (theta - s) / (t2 * theta)
    return s / theta, b, c


def exp_se3(omega) -> Rigid3:
    """Closed-form exponential of a twist (Rodrigues for the rotation block)."""
    omega = np.asarray(omega, dtype=float).reshape(6)
    w, v = omega[:3], omega[3:]
    theta = float(np.linalg.norm(w))
    a, b, c = _so3_coeffs(theta)
    W = hat(w)
    W2 = W @ W
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return Rigid3(R, V @ v)


def log_se3(M: Rigid3) -> np.ndarray:
    """Principal-branch logarithm; raises :class:`BranchAmbiguityError` near pi."""
    R, t = M.R, M.t
    axis2 = vee(R - R.T)  # 2 sin(theta) * axis
    theta = math.atan2(float(np.linalg.norm(axis2)) / 2.0, (np.trace(R) - 1.0) / 2.0)
    if theta >= math.pi - PI_MARGIN:
        raise BranchAmbiguityError(f"rotation angle {theta:.9f} too close to pi")
    if theta < _SMALL_ANGLE:
        w = axis2 / 2.0
    else:
        w = axis2 * (theta / (2.0 * math.sin(theta)))
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < _SMALL_ANGLE:
        coef = 1.0 / 12.0 + theta**2 / 720.0
    else:
        half = theta / 2.0
        coef = (1.0 - half * math.cos(half) / math.sin(half)) / theta**2
    V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return np.concatenate([w, V_inv @ t])


def exp_jacobian(omega, order: int = 10) -> np.ndarray:
    """Partial derivatives of the truncated exponential series.

    Returns a ``(6, 4, 4)`` array whose ``i``-th slice is
    ``d/d omega_i sum_{n<=order} Z^n / n!``, accumulated with the product rule
    ``d(Z^n) = dZ Z^(n-1) + Z d(Z^(n-1))``.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    Z = twist_matrix(omega)
    out = np.zeros((6, 4, 4))
    power = np.eye(4)  # Z^(n-1)
    dpower = np.zeros((6, 4, 4))  # d Z^(n-1)
    fact = 1.0
    for n in range(1, order + 1):
        fact *= n
        dpower = _GENERATORS @ power + Z @ dpower
        power = power @ Z
        out += dpower / fact
    return out


# --- cameras ----------------------------------------------------------------


def project_points(side: str, rig: StereoRig, M: Rigid3 | None, X) -> np.ndarray:
    """Vectorised :func:`project` over an ``(N, 3)`` array of points."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = X if M is None else M @ X
    Y = Y - rig.offset(side)
    Z = Y[:, 2]
    if np.any(~(Z > 0)):
        raise BehindCameraError("point at or behind the camera plane")
    u = rig.f * Y[:, 0] / Z + rig.cu
    v = rig.f * Y[:, 1] / Z + rig.cv
    return np.column_stack([u, v])


def project(side: str, rig: StereoRig, M: Rigid3 | None, X) -> np.ndarray:
    """Pixel coordinates of a frame-``i`` point seen by ``side`` after motion ``M``.

    ``M=None`` (or the identity) gives the time-``i`` view.
    """
    return project_points(side, rig, M, np.asarray(X, dtype=float).reshape(1, 3))[0]


# --- measurement matrix -----------------------------------------------------


def matches_to_array(matches: Sequence[QuadMatch] | np.ndarray) -> np.ndarray:
    """``(N, 8)`` array of match coordinates (already-arrays pass through)."""
    if isinstance(matches, np.ndarray):
        arr = np.asarray(matches, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 8:
            raise ValueError(f"expected an (N, 8) array, got {arr.shape}")
        return arr
    if len(matches) == 0:
        return np.zeros((0, 8))
    return np.stack([m.as_vector() for m in matches])


def array_to_matches(arr: Iterable) -> list[QuadMatch]:
    return [QuadMatch.from_vector(row) for row in np.asarray(arr, dtype=float).reshape(-1, 8)]


MIN_MATCHES = 7


def build_W(matches, mode: str = "K-inverse", rig: StereoRig | None = None) -> MeasurementMatrix:
    """Stack matches column-wise into the 8 x N measurement matrix.

    ``mode="K-inverse"`` maps pixels to normalized image coordinates
    ``((u - cu) / f, (v - cv) / f)`` and needs ``rig``; ``mode="mean-removal"``
    subtracts each row's mean.
    """
    arr = matches_to_array(matches)
    if arr.shape[0] < MIN_MATCHES:
        raise InsufficientDataError(
            f"need at least {MIN_MATCHES} matches to build W, got {arr.shape[0]}"
        )
    W = arr.T.copy()
    if mode == "K-inverse":
        if rig is None:
            raise ValueError("K-inverse normalization needs the stereo rig")
        W[0::2] = (W[0::2] - rig.cu) / rig.f
        W[1::2] = (W[1::2] - rig.cv) / rig.f
        return MeasurementMatrix(W, "K-inverse")
    if mode == "mean-removal":
        means = W.mean(axis=1)
        return MeasurementMatrix(W - means[:, None], "mean-removal", row_means=means)
    raise ValueError(f"unknown normalization mode {mode!r}")

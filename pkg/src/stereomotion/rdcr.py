"""Rank-constrained robust decomposition of the measurement matrix.

``W = L + S`` with ``rank(L) <= r`` enforced by truncated SVD and ``S`` kept
sparse by soft-thresholding. The iterate pair is initialised by a fixed number
of accelerated proximal gradient (nuclear norm + l1) steps, then refined by
projected gradient descent with a residual-driven threshold schedule. Columns
whose sparse part is large are flagged as outlier matches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import MIN_MATCHES, InsufficientDataError, MeasurementMatrix

__all__ = [
    "RdcrParams",
    "Decomposition",
    "OutlierMask",
    "soft_threshold",
    "skinny_svd_project",
    "apg_init",
    "rdcr_decompose",
    "classify_outliers",
]

# APG continuation ratio and initial threshold as a fraction of sigma_1(W)
APG_ETA = 0.8
APG_MU0_FRACTION = 0.99
# default APG l1 weight is APG_LAM_SCALE / sqrt(max(m, n))
APG_LAM_SCALE = 2.0


@dataclass(frozen=True)
class RdcrParams:
    lam: float = 1e-2
    mu_floor: float = 1e-9
    k_max: int = 20
    apg_iters: int = 20
    delta: float = 1e-3
    alpha_L: float = 1.0
    alpha_S: float = 0.2
    rank: int = 6
    tau0: float = 0.5
    # l1 weight of the convex initialisation; None -> APG_LAM_SCALE / sqrt(max(m, n))
    apg_lam: float | None = None

    def __post_init__(self):
        for name in ("lam", "mu_floor", "delta", "alpha_L", "alpha_S", "tau0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.k_max < 0 or self.apg_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if not 0.1 <= self.alpha_L <= 1.0:
            raise ValueError("alpha_L must lie in [1/10, 1]")
        if not 0.1 <= self.alpha_S <= 0.5:
            raise ValueError("alpha_S must lie in [1/10, 1/2]")
        if not 1 <= self.rank <= 8:
            raise ValueError("rank must lie in [1, 8]")
        if self.apg_lam is not None and not self.apg_lam > 0:
            raise ValueError("apg_lam must be positive")

    def apg_weight(self, shape) -> float:
        return self.apg_lam if self.apg_lam is not None else APG_LAM_SCALE / math.sqrt(max(shape))


@dataclass(frozen=True, eq=False)
class Decomposition:
    L: np.ndarray
    S: np.ndarray
    iterations_run: int
    final_mu: float
    residual: float
    history: list = field(default_factory=list, repr=False)


@dataclass(frozen=True, eq=False)
class OutlierMask:
    flags: np.ndarray
    threshold_used: float

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool).reshape(-1)
        object.__setattr__(self, "flags", flags)

    def __len__(self):
        return self.flags.size

    @property
    def n_flagged(self) -> int:
        return int(self.flags.sum())

    @property
    def inliers(self) -> np.ndarray:
        return ~self.flags

    @classmethod
    def none(cls, n: int) -> "OutlierMask":
        return cls(np.zeros(n, dtype=bool), math.inf)


def soft_threshold(M, mu: float):
    """Elementwise shrinkage ``max(0, m - mu) + min(0, m + mu)``."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    M = np.asarray(M, dtype=float)
    return np.maximum(M - mu, 0.0) + np.minimum(M + mu, 0.0)


def skinny_svd_project(M, r: int) -> np.ndarray:
    """Best rank-``r`` Frobenius approximation of ``M``."""
    if r < 1:
        raise ValueError("rank must be >= 1")
    M = np.asarray(M, dtype=float)
    if r >= min(M.shape):
        return M.copy()
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    return (U[:, :r] * s[:r]) @ Vt[:r]


def _singular_value_threshold(M, tau):
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    keep = s > 0
    return (U[:, keep] * s[keep]) @ Vt[keep]


def _as_array(W) -> np.ndarray:
    arr = W.W if isinstance(W, MeasurementMatrix) else np.asarray(W, dtype=float)
    if arr.ndim != 2:
        raise ValueError("W must be a matrix")
    return arr


def _check_columns(arr):
    if arr.shape[1] < MIN_MATCHES:
        raise InsufficientDataError(
            f"decomposition needs at least {MIN_MATCHES} columns, got {arr.shape[1]}"
        )


def apg_init(W, params: RdcrParams = RdcrParams()) -> Decomposition:
    """Accelerated proximal gradient for ``min mu ||L||_* + mu lam ||S||_1 + 1/2 ||W - L - S||^2``.

    Nesterov extrapolation with ``t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2`` and a
    geometric decrease of ``mu``; runs exactly ``params.apg_iters`` steps.
    """
    W = _as_array(W)
    _check_columns(W)
    lam = params.apg_weight(W.shape)
    L = np.zeros_like(W)
    S = np.zeros_like(W)
    L_prev, S_prev = L, S
    t, t_prev = 1.0, 1.0
    sigma1 = np.linalg.norm(W, 2) if W.size else 0.0
    mu = APG_MU0_FRACTION * sigma1
    mu_bar = params.mu_floor
    history = []
    for _ in range(params.apg_iters):
        beta = (t_prev - 1.0) / t
        YL = L + beta * (L - L_prev)
        YS = S + beta * (S - S_prev)
        G = 0.5 * (YL + YS - W)  # gradient step with 1/Lipschitz = 1/2
        L_prev, S_prev = L, S
        L = _singular_value_threshold(YL - G, mu / 2.0)
        S = soft_threshold(YS - G, lam * mu / 2.0)
        t_prev, t = t, (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        mu = max(APG_ETA * mu, mu_bar)
        history.append(float(np.linalg.norm(W - L - S)))
    return Decomposition(L, S, params.apg_iters, mu, float(np.linalg.norm(W - L - S)), history)


def rdcr_decompose(W, params: RdcrParams = RdcrParams(), init: Decomposition | None = None) -> Decomposition:
    """Projected-gradient robust decomposition with a hard rank constraint.

    Each of the ``k_max`` iterations takes a gradient step on both blocks,
    projects ``L`` onto rank ``params.rank`` and soft-thresholds ``S``; the
    threshold follows the residual RMS, ``max(delta ||D||_F / sqrt(mn) / lam, mu_floor)``.
    """
    W = _as_array(W)
    _check_columns(W)
    if init is None:
        init = apg_init(W, params)
    if init.L.shape != W.shape or init.S.shape != W.shape:
        raise ValueError(f"initialisation shape {init.L.shape} does not match W {W.shape}")
    m, n = W.shape
    root_mn = math.sqrt(m * n)
    L, S = init.L.copy(), init.S.copy()
    W_r = skinny_svd_project(W, params.rank)
    mu = params.delta * np.linalg.norm(W - W_r) / root_mn
    history = []
    for _ in range(params.k_max):
        D = L + S - W
        L_next = skinny_svd_project(L - params.alpha_L * D, params.rank)
        S_next = soft_threshold(S - params.alpha_S * D, mu)
        mu_D = params.delta * np.linalg.norm(D) / root_mn
        mu = max(mu_D / params.lam, params.mu_floor)
        L, S = L_next, S_next
        history.append(float(np.linalg.norm(W - L - S)))
    if params.k_max == 0:
        return init
    return Decomposition(L, S, params.k_max, float(mu), float(np.linalg.norm(W - L - S)), history)


def classify_outliers(S, n_matches: int | None = None, tau0: float = 0.5) -> OutlierMask:
    """Flag column ``j`` iff ``||S[:, j]||_1 > min(tau0, ||S||_1 / N)``."""
    S = np.asarray(S, dtype=float)
    n = S.shape[1] if n_matches is None else n_matches
    if n != S.shape[1]:
        raise ValueError(f"S has {S.shape[1]} columns but n_matches={n}")
    col = np.abs(S).sum(axis=0)
    threshold = min(tau0, col.sum() / n) if n else tau0
    return OutlierMask(col > threshold, float(threshold))

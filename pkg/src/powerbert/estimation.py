"""Weighted least-squares state estimation and residual-based bad data detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class Estimator:
    M: np.ndarray
    W: np.ndarray
    bdd_threshold: float

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        W = np.asarray(self.W, dtype=float)
        self.W = np.diag(W) if W.ndim == 1 else W
        if self.W.shape != (self.M.shape[0],) * 2:
            raise ValueError(f"W must be {self.M.shape[0]}x{self.M.shape[0]}, got {self.W.shape}")
        if np.any(np.diag(self.W) <= 0) or np.any(self.W != np.diag(np.diag(self.W))):
            raise ValueError("W must be diagonal with positive entries")
        if self.bdd_threshold <= 0:
            raise ValueError("bdd_threshold must be positive")
        if np.linalg.matrix_rank(self.M) < self.M.shape[1]:
            raise RankDeficientError(f"measurement matrix {self.M.shape} is not full column rank")
        mtw = self.M.T @ self.W
        # gain maps measurements straight to the estimate: x_hat = G y
        self.gain = np.linalg.solve(mtw @ self.M, mtw)

    @property
    def n_measurements(self) -> int:
        return self.M.shape[0]

    @property
    def n_states(self) -> int:
        return self.M.shape[1]


def estimate_state(est: Estimator, y) -> tuple[np.ndarray, np.ndarray, float]:
    """Return (x_hat, y_hat, ||y - y_hat||) with x_hat = (M'WM)^-1 M'W y."""
    y = np.asarray(y, dtype=float)
    if y.shape != (est.n_measurements,):
        raise ValueError(f"expected {est.n_measurements} measurements, got shape {y.shape}")
    x_hat = est.gain @ y
    y_hat = est.M @ x_hat
    return x_hat, y_hat, float(np.linalg.norm(y - y_hat))


def bdd_check(residual: float, threshold: float) -> bool:
    if residual < 0:
        raise ValueError("residual must be non-negative")
    return residual > threshold


def incidence_matrix(area_count: int, tie_lines) -> np.ndarray:
    """Area x line matrix: +1 at the sending area, -1 at the receiving area."""
    B = np.zeros((area_count, len(tie_lines)))
    for col, (i, j) in enumerate(tie_lines):
        B[i - 1, col] = 1.0
        B[j - 1, col] = -1.0
    return B


def tie_line_estimator(area_count: int, tie_lines, noise_std: float = 0.005, alarm_quantile: float = 0.99) -> Estimator:
    """Tie-line flows are the state; measured are every flow plus every area's net export.

    The BDD threshold is the chi-square quantile of the residual under
    Gaussian noise with ``noise_std``.
    """
    M = np.vstack([np.eye(len(tie_lines)), incidence_matrix(area_count, tie_lines)])
    W = np.full(M.shape[0], 1.0 / noise_std**2)
    dof = M.shape[0] - M.shape[1]
    threshold = noise_std * np.sqrt(chi2.ppf(alarm_quantile, dof))
    return Estimator(M, W, float(threshold))

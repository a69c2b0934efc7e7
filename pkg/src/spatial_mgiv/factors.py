"""Principal-components factor extraction and defactoring projections."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, RankDeficiencyError

logger = logging.getLogger(__name__)

# eigenvalues below this fraction of the largest trigger a warning
NEAR_ZERO_EIG = 1e-10


@dataclass(frozen=True)
class FactorEstimate:
    """Estimated factors ``f_hat`` (T x r) normalised so ``f_hat' f_hat / T = I_r``.

    ``eigenvalues`` holds the ``r`` leading eigenvalues of the pooled second
    moment matrix in descending order; ``spectrum`` holds all of them.
    """

    f_hat: np.ndarray
    eigenvalues: np.ndarray
    spectrum: np.ndarray
    source: str = "contemporaneous"

    @property
    def r(self) -> int:
        return self.f_hat.shape[1]

    @property
    def n_periods(self) -> int:
        return self.f_hat.shape[0]


@dataclass(frozen=True)
class Annihilator:
    """Symmetric idempotent ``M = I - F (F'F)^-1 F'``."""

    m: np.ndarray

    def __matmul__(self, other):
        return self.m @ other

    @property
    def rank(self) -> int:
        return int(round(np.trace(self.m)))


def _as_panels(panels) -> np.ndarray:
    arr = np.asarray(panels, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"panels must be an (N, T, k) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("panels contain non-finite entries")
    return arr


def second_moment(panels) -> np.ndarray:
    """Pooled ``(NT)^-1 sum_i X_i X_i'`` for panels shaped ``(N, T, k)``."""
    arr = _as_panels(panels)
    n, t, _ = arr.shape
    stacked = arr.transpose(1, 0, 2).reshape(t, -1)
    s = stacked @ stacked.T / (n * t)
    return (s + s.T) / 2


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column positive; first index wins ties
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def extract_factors(panels, r: int, source: str = "contemporaneous") -> FactorEstimate:
    """Extract ``r`` factors as sqrt(T) times the leading eigenvectors of the pooled second moment.

    Parameters
    ----------
    panels : array_like, shape (N, T, k)
        One ``T x k`` covariate matrix per unit.
    r : int
        Number of factors, ``1 <= r <= min(T, N k)``.
    source : str
        Free-form tag recorded on the result (e.g. ``"lag1"``).

    Raises
    ------
    RankDeficiencyError
        If the second moment matrix has rank below ``r``.
    """
    arr = _as_panels(panels)
    n, t, k = arr.shape
    if r < 1 or r > min(t, n * k):
        raise ValueError(f"r must lie in [1, min(T, N*k)] = [1, {min(t, n * k)}], got {r}")
    s = second_moment(arr)
    vals, vecs = np.linalg.eigh(s)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    vals = np.clip(vals, 0.0, None)
    lead = vals[0]
    rank_tol = max(t, n * k) * np.finfo(float).eps * lead
    if lead <= 0 or vals[r - 1] <= rank_tol:
        raise RankDeficiencyError(
            f"requested r={r} factors but the pooled second moment has numerical rank "
            f"{int(np.sum(vals > rank_tol))}")
    if vals[r - 1] < NEAR_ZERO_EIG * lead:
        warnings.warn(f"factor {r} eigenvalue {vals[r - 1]:.3g} is tiny relative to {lead:.3g}", stacklevel=2)
    f_hat = np.sqrt(t) * _fix_signs(vecs[:, :r])
    return FactorEstimate(f_hat=f_hat, eigenvalues=vals[:r].copy(), spectrum=vals, source=source)


def annihilator(f) -> Annihilator:
    """Projection onto the orthogonal complement of the column space of ``f``.

    ``f`` may be a :class:`FactorEstimate` or a raw ``T x r`` matrix; an
    ``r = 0`` matrix gives the identity.
    """
    mat = np.asarray(getattr(f, "f_hat", f), dtype=float)
    if mat.ndim == 1:
        mat = mat[:, None]
    t, r = mat.shape
    if r == 0:
        return Annihilator(np.eye(t))
    q, rr = np.linalg.qr(mat)
    diag = np.abs(np.diag(rr))
    if diag.min() <= 1e-12 * max(diag.max(), 1.0):
        raise RankDeficiencyError("factor matrix does not have full column rank")
    m = np.eye(t) - q @ q.T
    return Annihilator((m + m.T) / 2)


def eigenvalue_ratio_count(panels, r_max: int, min_ratio: float = 1.5) -> int:
    """Number of factors maximising ``lambda_j / lambda_{j+1}`` over ``j = 1..r_max``.

    A zero next eigenvalue makes the ratio infinite at that ``j``.  When the
    largest ratio is below ``min_ratio`` the spectrum looks like noise and
    the convention is to return 1.
    """
    arr = _as_panels(panels)
    n, t, k = arr.shape
    if r_max < 1 or r_max >= min(t, n * k):
        raise ValueError(f"r_max must lie in [1, min(T, N*k)) = [1, {min(t, n * k)}), got {r_max}")
    vals = np.clip(np.linalg.eigvalsh(second_moment(arr))[::-1], 0.0, None)
    tol = max(t, n * k) * np.finfo(float).eps * vals[0]
    ratios = np.empty(r_max)
    for j in range(r_max):
        if vals[j] <= tol:
            ratios[j] = 0.0
        elif vals[j + 1] <= tol:
            ratios[j] = np.inf
        else:
            ratios[j] = vals[j] / vals[j + 1]
    best = int(np.argmax(ratios))
    if not np.isfinite(ratios[best]) or ratios[best] >= min_ratio:
        return best + 1
    return 1


def estimate_loadings(f: FactorEstimate, x_i: np.ndarray) -> np.ndarray:
    """Loadings ``T^-1 F_hat' X_i`` for one unit."""
    return f.f_hat.T @ np.asarray(x_i, dtype=float) / f.n_periods

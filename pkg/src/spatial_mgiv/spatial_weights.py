"""Spatial weight matrices: construction, normalisation and admissibility checks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import WeightMatrixError

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class WeightMatrix:
    """Dense ``N x N`` nonnegative weights with zero diagonal."""

    w: np.ndarray
    recipe: str = "custom"
    row_normalized: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise WeightMatrixError(f"weight matrix must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise WeightMatrixError("weight matrix has non-finite entries")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def row_norm(self) -> float:
        return float(np.abs(self.w).sum(axis=1).max())

    @property
    def col_norm(self) -> float:
        return float(np.abs(self.w).sum(axis=0).max())


def row_normalize(w: np.ndarray) -> np.ndarray:
    """Scale every nonempty row to sum to one; empty rows stay zero."""
    w = np.asarray(w, dtype=float)
    sums = w.sum(axis=1, keepdims=True)
    return np.divide(w, sums, out=np.zeros_like(w), where=sums != 0)


def rook_circular(n: int) -> WeightMatrix:
    """Ring contiguity: each unit's two neighbours on a circle, weight 1/2 each."""
    if n < 3:
        raise WeightMatrixError(f"rook_circular needs n >= 3, got {n}")
    w = np.zeros((n, n))
    idx = np.arange(n)
    w[idx, (idx + 1) % n] = 0.5
    w[idx, (idx - 1) % n] = 0.5
    return WeightMatrix(w, recipe="rook_circular", row_normalized=True)


def haversine_km(coords) -> np.ndarray:
    """Pairwise great-circle distances in km for an ``(n, 2)`` array of (lat, lon) degrees."""
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2 or not np.all(np.isfinite(coords)):
        raise WeightMatrixError("coordinates must be a finite (n, 2) array of (lat, lon)")
    lat, lon = np.radians(coords[:, 0]), np.radians(coords[:, 1])
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    a = np.sin(dlat / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    np.fill_diagonal(d, 0.0)
    return d


def _check_distances(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] < 2:
        raise WeightMatrixError("distance matrix must be square with n >= 2")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise WeightMatrixError("distances must be finite and nonnegative")
    return d


def exp_decay_from_distances(d, zeta: float) -> WeightMatrix:
    """Row-normalised ``exp(-zeta * d_ij)`` weights from a distance matrix."""
    d = _check_distances(d)
    if zeta < 0:
        raise WeightMatrixError(f"zeta must be nonnegative, got {zeta}")
    n = d.shape[0]
    off = ~np.eye(n, dtype=bool)
    if np.all(d[off] == 0):
        raise WeightMatrixError("degenerate geometry: all locations coincide")
    if np.any(d[off] == 0):
        warnings.warn("coincident locations found; their exp-decay weight is exp(0) = 1", stacklevel=2)
    # shift by the row minimum so that large zeta * d does not underflow every entry
    scaled = np.where(off, zeta * d, np.inf)
    scaled -= scaled.min(axis=1, keepdims=True)
    raw = np.exp(-scaled)
    return WeightMatrix(row_normalize(raw), recipe="exp_decay", row_normalized=True, params={"zeta": zeta})


def exp_decay(coords, zeta: float) -> WeightMatrix:
    return exp_decay_from_distances(haversine_km(coords), zeta)


def inverse_power_from_distances(d, p: float = 2.0) -> WeightMatrix:
    """Row-normalised ``d_ij^(-p)`` weights; coincident locations are an error."""
    d = _check_distances(d)
    if p <= 0:
        raise WeightMatrixError(f"power must be positive, got {p}")
    n = d.shape[0]
    off = ~np.eye(n, dtype=bool)
    if np.any(d[off] == 0):
        i, j = np.argwhere((d == 0) & off)[0]
        raise WeightMatrixError(f"zero distance between units {i} and {j}: inverse-power weight is infinite")
    raw = np.zeros_like(d)
    raw[off] = d[off] ** (-p)
    return WeightMatrix(row_normalize(raw), recipe="inverse_power", row_normalized=True, params={"power": p})


def inverse_power(coords, p: float = 2.0) -> WeightMatrix:
    return inverse_power_from_distances(haversine_km(coords), p)


@dataclass(frozen=True)
class WeightDiagnostics:
    row_norm: float
    col_norm: float
    zero_diagonal: bool
    nonnegative: bool
    psi_bound: float
    psi_admissible: bool
    max_row_sum_deviation: float

    @property
    def ok(self) -> bool:
        return self.zero_diagonal and self.nonnegative and self.psi_admissible


def validate(w, psi_bound: float = 0.0) -> WeightDiagnostics:
    """Report norms and whether ``psi_bound < min(1/||W||_inf, 1/||W||_1)``."""
    m = np.asarray(getattr(w, "w", w), dtype=float)
    row = float(np.abs(m).sum(axis=1).max())
    col = float(np.abs(m).sum(axis=0).max())
    limit = min(1.0 / row if row > 0 else np.inf, 1.0 / col if col > 0 else np.inf)
    sums = m.sum(axis=1)
    nonempty = sums != 0
    dev = float(np.abs(sums[nonempty] - 1.0).max()) if nonempty.any() else 0.0
    return WeightDiagnostics(
        row_norm=row,
        col_norm=col,
        zero_diagonal=bool(np.all(np.diag(m) == 0)),
        nonnegative=bool(np.all(m >= 0)),
        psi_bound=float(psi_bound),
        psi_admissible=bool(abs(psi_bound) < limit),
        max_row_sum_deviation=dev,
    )


def spatial_lag(w, m: np.ndarray) -> np.ndarray:
    """Apply W across units: column ``i`` of the result is ``sum_j w_ij m[:, j]``."""
    return np.asarray(m, dtype=float) @ np.asarray(getattr(w, "w", w), dtype=float).T


def load_weights_csv(path) -> WeightMatrix:
    """Read a dense headerless ``N x N`` CSV and validate it."""
    path = Path(path)
    try:
        w = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise WeightMatrixError(f"cannot read weight matrix {path}: {exc}") from exc
    wm = WeightMatrix(w, recipe="custom",
                      row_normalized=bool(np.allclose(w.sum(axis=1)[w.sum(axis=1) != 0], 1.0, atol=1e-12)))
    diag = validate(wm)
    if not diag.zero_diagonal:
        raise WeightMatrixError(f"{path.name}: diagonal of W must be zero")
    if not diag.nonnegative:
        raise WeightMatrixError(f"{path.name}: W has negative entries")
    return wm


def save_weights_csv(w, path) -> None:
    m = np.asarray(getattr(w, "w", w), dtype=float)
    np.savetxt(path, m, delimiter=",", fmt="%.17g")


def load_coords_csv(path) -> tuple[list, np.ndarray]:
    """Read ``id,lat,lon`` rows; returns ids and an ``(n, 2)`` coordinate array."""
    import pandas as pd

    frame = pd.read_csv(path)
    frame.columns = [c.strip().lower() for c in frame.columns]
    missing = {"id", "lat", "lon"} - set(frame.columns)
    if missing:
        raise WeightMatrixError(f"coordinate file lacks columns: {', '.join(sorted(missing))}")
    return list(frame["id"]), frame[["lat", "lon"]].to_numpy(dtype=float)

"""Balanced panel container, CSV ingestion and per-unit regressor blocks.

Arrays are stored time-major: ``y`` is ``(T_total, N)`` and ``x`` is
``(k, T_total, N)`` where ``T_total = presample + n_periods``.  The leading
``presample`` rows feed lag construction only; every estimation quantity
lives on the trailing ``n_periods`` rows (the estimation window).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import PanelDataError


@dataclass(frozen=True)
class ModelSpec:
    """Which regressors enter the per-unit design.

    The default is the basic spatial dynamic model with columns
    ``(W y_t, y_{t-1}, x_t)``.  The spatial Durbin variant used for regional
    growth regressions adds ``W y_{t-1}`` after the spatial lag and ``W x_t``
    after the covariates.
    """

    own_lag: bool = True
    spatial_time_lag: bool = False
    spatial_x: bool = False

    @property
    def max_lag(self) -> int:
        return 1 if (self.own_lag or self.spatial_time_lag) else 0

    def coef_names(self, x_names: Sequence[str]) -> list[str]:
        names = ["psi"]
        if self.spatial_time_lag:
            names.append("psi1")
        if self.own_lag:
            names.append("rho")
        names.extend(x_names)
        if self.spatial_x:
            names.extend(f"W:{n}" for n in x_names)
        return names

    def n_params(self, k: int) -> int:
        return 1 + int(self.spatial_time_lag) + int(self.own_lag) + k * (1 + int(self.spatial_x))


EMPIRICAL_MODEL = ModelSpec(own_lag=True, spatial_time_lag=True, spatial_x=True)


@dataclass(frozen=True)
class PanelDataset:
    y: np.ndarray
    x: np.ndarray
    presample: int = 0
    unit_ids: tuple = field(default=())
    time_ids: tuple = field(default=())
    x_names: tuple = field(default=())
    y_name: str = "y"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if y.ndim != 2 or x.ndim != 3:
            raise PanelDataError(f"y must be (T, N) and x (k, T, N); got {y.shape} and {x.shape}")
        if x.shape[1:] != y.shape:
            raise PanelDataError(f"covariate shape {x.shape[1:]} does not match outcome shape {y.shape}")
        if not (0 <= self.presample < y.shape[0]):
            raise PanelDataError(f"presample={self.presample} leaves no estimation periods (T_total={y.shape[0]})")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise PanelDataError("panel contains missing or non-finite cells")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        t_total, n = y.shape
        if not self.unit_ids:
            object.__setattr__(self, "unit_ids", tuple(range(1, n + 1)))
        if not self.time_ids:
            object.__setattr__(self, "time_ids", tuple(range(t_total)))
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{l + 1}" for l in range(x.shape[0])))
        if len(self.unit_ids) != n or len(self.time_ids) != t_total or len(self.x_names) != x.shape[0]:
            raise PanelDataError("label sequences do not match array dimensions")

    @property
    def n_units(self) -> int:
        return self.y.shape[1]

    @property
    def n_periods(self) -> int:
        return self.y.shape[0] - self.presample

    @property
    def k(self) -> int:
        return self.x.shape[0]

    def with_presample(self, presample: int) -> "PanelDataset":
        return replace(self, presample=presample)

    def _check_lag(self, lag: int) -> None:
        if lag < 0 or lag > self.presample:
            raise PanelDataError(f"lag {lag} needs presample >= {lag}, have {self.presample}")

    def y_window(self, lag: int = 0, demean: bool = False) -> np.ndarray:
        """Outcomes on the estimation window shifted back ``lag`` periods, ``(T, N)``."""
        self._check_lag(lag)
        start = self.presample - lag
        out = self.y[start:start + self.n_periods]
        return out - out.mean(axis=0) if demean else out.copy()

    def x_window(self, lag: int = 0, demean: bool = False) -> np.ndarray:
        """Covariates on the estimation window shifted back ``lag`` periods, ``(k, T, N)``."""
        self._check_lag(lag)
        start = self.presample - lag
        out = self.x[:, start:start + self.n_periods]
        return out - out.mean(axis=1, keepdims=True) if demean else out.copy()


@dataclass(frozen=True)
class DesignBlock:
    """Regressor matrix ``c`` (T x p) and outcome ``y`` (T,) for one unit."""

    unit: int
    c: np.ndarray
    y: np.ndarray
    names: tuple


def build_design(data: PanelDataset, w, model: ModelSpec = ModelSpec(),
                 demean: bool = False) -> list[DesignBlock]:
    """Assemble per-unit design blocks ``C_i`` on the estimation window.

    Column order is spatial lag, optional spatial-time lag, optional own lag,
    covariates, optional spatially lagged covariates.  With ``demean`` every
    column and the outcome are centred per unit over the window, which is the
    within transformation that absorbs unit fixed effects.
    """
    w = _dense(w)
    if w.shape != (data.n_units, data.n_units):
        raise PanelDataError(f"weight matrix is {w.shape} but panel has N={data.n_units}")
    if data.presample < model.max_lag:
        raise PanelDataError(f"model needs presample >= {model.max_lag}, have {data.presample}")

    y0 = data.y_window(0)
    cols = [y0 @ w.T]
    if model.spatial_time_lag:
        cols.append(data.y_window(1) @ w.T)
    if model.own_lag:
        cols.append(data.y_window(1))
    x0 = data.x_window(0)
    cols.extend(x0)
    if model.spatial_x:
        cols.extend(xl @ w.T for xl in x0)
    stacked = np.stack(cols, axis=-1)  # (T, N, p)
    if demean:
        stacked = stacked - stacked.mean(axis=0)
        y0 = y0 - y0.mean(axis=0)
    names = tuple(model.coef_names(data.x_names))
    return [DesignBlock(unit=i, c=np.ascontiguousarray(stacked[:, i, :]), y=y0[:, i].copy(), names=names)
            for i in range(data.n_units)]


def _dense(w) -> np.ndarray:
    return np.asarray(getattr(w, "w", w), dtype=float)


def load_panel_csv(path, unit_col: str = "unit", time_col: str = "time", y_col: str = "y",
                   x_cols: Sequence[str] | None = None, presample: int = 0) -> PanelDataset:
    """Read a long-format CSV into a balanced :class:`PanelDataset`.

    Every (unit, time) pair must appear exactly once.  When ``x_cols`` is
    omitted, every column other than unit, time and outcome is a covariate,
    in file order.
    """
    path = Path(path)
    if not path.exists():
        raise PanelDataError(f"panel file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError, pd.errors.EmptyDataError) as exc:
        raise PanelDataError(f"cannot parse {path}: {exc}") from exc
    raw.columns = [c.strip() for c in raw.columns]
    if x_cols is None:
        x_cols = [c for c in raw.columns if c not in (unit_col, time_col, y_col)]
    x_cols = list(x_cols)
    missing_cols = [c for c in [unit_col, time_col, y_col, *x_cols] if c not in raw.columns]
    if missing_cols:
        raise PanelDataError(f"columns not found in {path.name}: {', '.join(missing_cols)}")
    if not x_cols:
        raise PanelDataError("at least one covariate column is required")

    values = {}
    for col in [y_col, *x_cols]:
        cells = raw[col].str.strip().tolist()
        parsed = np.empty(len(cells))
        for idx, cell in enumerate(cells):
            # python's float() is correctly rounded, so %.17g output round-trips exactly
            try:
                parsed[idx] = float(cell)
            except ValueError:
                parsed[idx] = np.nan
            if not np.isfinite(parsed[idx]):
                # header is line 1
                raise PanelDataError(f"non-numeric value {raw[col].iloc[idx]!r} in column {col!r} at row {idx + 2}")
        values[col] = parsed

    units = _labels(raw[unit_col])
    times = _labels(raw[time_col])
    frame = pd.DataFrame({"unit": units, "time": times, **values})
    dup = frame.duplicated(subset=["unit", "time"])
    if dup.any():
        first = int(np.argmax(dup.to_numpy()))
        raise PanelDataError(f"duplicate (unit={units[first]}, time={times[first]})")

    unit_ids = sorted(set(units))
    time_ids = sorted(set(times))
    if len(frame) != len(unit_ids) * len(time_ids):
        present = set(zip(frame["unit"], frame["time"]))
        for u in unit_ids:
            for t in time_ids:
                if (u, t) not in present:
                    raise PanelDataError(f"missing (unit={u}, time={t})")

    frame = frame.sort_values(["unit", "time"], kind="mergesort")
    n, t_total = len(unit_ids), len(time_ids)
    y = frame[y_col].to_numpy().reshape(n, t_total).T
    x = np.stack([frame[c].to_numpy().reshape(n, t_total).T for c in x_cols])
    return PanelDataset(y=y, x=x, presample=presample, unit_ids=tuple(unit_ids), time_ids=tuple(time_ids),
                        x_names=tuple(x_cols), y_name=y_col)


def _labels(col: pd.Series) -> list:
    stripped = col.str.strip()
    numeric = pd.to_numeric(stripped, errors="coerce")
    if not numeric.isna().any():
        if np.all(numeric == np.round(numeric)):
            return [int(v) for v in numeric]
        return [float(v) for v in numeric]
    return list(stripped)


def save_panel_csv(data: PanelDataset, path, unit_col: str = "unit", time_col: str = "time") -> None:
    """Write a panel back to long format (inverse of :func:`load_panel_csv`)."""
    rows = {unit_col: np.repeat(data.unit_ids, len(data.time_ids)),
            time_col: np.tile(data.time_ids, data.n_units),
            data.y_name: data.y.T.ravel()}
    for name, xl in zip(data.x_names, data.x):
        rows[name] = xl.T.ravel()
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.17g")

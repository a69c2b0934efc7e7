"""Defactored instruments, per-unit IV, mean-group aggregation and the pooled 2SIV benchmark.

Shapes used throughout: per-unit instrument matrices are stacked as
``(N, T, q)``, regressors as ``(N, T, p)`` and outcomes as ``(N, T)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, stats

from .errors import IdentificationError, NumericError, RankDeficiencyError
from .factors import Annihilator, FactorEstimate, annihilator, extract_factors
from .panel_data import DesignBlock, ModelSpec, PanelDataset, build_design
from .parallel import ordered_map

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10
Z_CRIT_5 = 1.959964

_KIND_W_POWER = {"x": 0, "wx": 1, "w2x": 2}


@dataclass(frozen=True)
class InstrumentBlock:
    """Defactored covariates ``M_F M_{F,-s} W^p X_{-s}``; ``kind`` selects ``p``."""

    kind: str
    lag: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_W_POWER:
            raise IdentificationError(f"unknown instrument kind {self.kind!r}; expected one of x, wx, w2x")
        if self.lag < 0:
            raise IdentificationError(f"instrument lag must be nonnegative, got {self.lag}")

    @property
    def label(self) -> str:
        prefix = {"x": "MX", "wx": "MWX", "w2x": "MW2X"}[self.kind]
        return f"{prefix}(-{self.lag})" if self.lag else prefix


@dataclass(frozen=True)
class InstrumentSpec:
    blocks: tuple
    name: str = "custom"

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, InstrumentBlock) else InstrumentBlock(*b) for b in self.blocks)
        if not blocks:
            raise IdentificationError("instrument spec has no blocks")
        if len(set(blocks)) != len(blocks):
            raise IdentificationError("instrument blocks must be distinct")
        object.__setattr__(self, "blocks", blocks)

    @property
    def max_lag(self) -> int:
        return max(b.lag for b in self.blocks)

    @property
    def lags(self) -> list[int]:
        return sorted({0} | {b.lag for b in self.blocks})

    def n_columns(self, k: int) -> int:
        return k * len(self.blocks)

    @classmethod
    def from_json(cls, path) -> "InstrumentSpec":
        """Load ``{"blocks": [{"kind": "x", "lag": 0}, ...]}``."""
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            blocks = tuple(InstrumentBlock(b["kind"], int(b.get("lag", 0))) for b in payload["blocks"])
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IdentificationError(f"invalid instrument spec {path}: {exc}") from exc
        return cls(blocks, name=payload.get("name", path.stem))

    def to_dict(self) -> dict:
        return {"name": self.name, "blocks": [{"kind": b.kind, "lag": b.lag} for b in self.blocks]}


Z1 = InstrumentSpec((("x", 0), ("x", 1), ("x", 2), ("wx", 0)), name="z1")
Z2 = InstrumentSpec((("x", 0), ("x", 1), ("wx", 0), ("wx", 1)), name="z2")
EMPIRICAL = InstrumentSpec((("x", 0), ("x", 1), ("x", 2), ("wx", 0), ("wx", 1)), name="empirical")
PRESETS = {"z1": Z1, "z2": Z2, "empirical": EMPIRICAL}


def resolve_instruments(spec) -> InstrumentSpec:
    if isinstance(spec, InstrumentSpec):
        return spec
    if isinstance(spec, str):
        if spec.lower() in PRESETS:
            return PRESETS[spec.lower()]
        if spec.endswith(".json"):
            return InstrumentSpec.from_json(spec)
    raise IdentificationError(f"unknown instrument set {spec!r}; use z1, z2, empirical or a .json spec")


def _factor_matrix(f, demean: bool) -> np.ndarray:
    mat = np.asarray(getattr(f, "f_hat", f), dtype=float)
    if mat.ndim == 1:
        mat = mat[:, None]
    if demean:
        mat = mat - mat.mean(axis=0)
    return mat


def extract_factor_set(data: PanelDataset, r: int, lags: Sequence[int], demean: bool = False) -> dict:
    """Principal-components factors of the covariates on each lagged window."""
    out = {}
    for s in lags:
        panels = data.x_window(s, demean=demean).transpose(2, 1, 0)  # (N, T, k)
        out[s] = extract_factors(panels, r, source="contemporaneous" if s == 0 else f"lag{s}")
    return out


def build_instruments(data: PanelDataset, w, factors: Mapping[int, object], spec: InstrumentSpec,
                      demean: bool = False, n_params: int | None = None) -> np.ndarray:
    """Stack the defactored instrument blocks for every unit, shape ``(N, T, q)``.

    ``factors`` maps a lag ``s`` to the factor estimate for the ``s``-lagged
    covariate window (a :class:`FactorEstimate` or a raw ``T x r`` matrix).
    """
    spec = resolve_instruments(spec)
    w = np.asarray(getattr(w, "w", w), dtype=float)
    k = data.k
    if n_params is None:
        n_params = 2 + k
    q = spec.n_columns(k)
    if q < n_params:
        raise IdentificationError(f"under-identified: {q} instruments for {n_params} parameters")
    for s in spec.lags:
        if s not in factors:
            raise IdentificationError(f"no factor estimate supplied for lag {s}")
    if data.presample < spec.max_lag:
        raise IdentificationError(f"instruments need presample >= {spec.max_lag}, have {data.presample}")

    m = {s: annihilator(_factor_matrix(factors[s], demean)).m for s in spec.lags}
    cols = []
    for block in spec.blocks:
        base = data.x_window(block.lag, demean=demean)  # (k, T, N)
        for _ in range(_KIND_W_POWER[block.kind]):
            base = base @ w.T
        proj = m[block.lag] @ base if block.lag else base
        cols.append(m[0] @ proj)
    z = np.concatenate(cols, axis=0)  # (q, T, N)
    return np.ascontiguousarray(z.transpose(2, 1, 0))


@dataclass
class UnitEstimate:
    """Per-unit IV fit.  ``variance`` is the finite-sample covariance of ``theta``."""

    unit: int
    theta: np.ndarray
    variance: np.ndarray | None = None
    cond_a: float = np.nan
    cond_b: float = np.nan
    ok: bool = True
    reason: str = ""


def _moments(c, z, y):
    t = z.shape[0]
    return z.T @ c / t, z.T @ z / t, z.T @ y / t


def _cond(m: np.ndarray) -> float:
    s = np.linalg.svd(m, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else np.inf


def _whitener(b: np.ndarray, pinv: bool) -> np.ndarray:
    """Matrix ``G`` with ``G'G = B^-1`` (or the Moore-Penrose ``B^+`` when ``pinv``)."""
    if pinv:
        vals, vecs = np.linalg.eigh((b + b.T) / 2)
        keep = vals > RANK_TOL * max(vals[-1], 0.0)
        if not keep.any():
            raise RankDeficiencyError("instrument cross-moment B is zero")
        return vecs[:, keep].T / np.sqrt(vals[keep])[:, None]
    try:
        chol = linalg.cholesky(b, lower=True)
    except linalg.LinAlgError:
        raise RankDeficiencyError("instrument cross-moment B is not positive definite") from None
    d = np.diag(chol)
    if d.min() <= np.sqrt(RANK_TOL) * d.max():
        raise RankDeficiencyError("instrument cross-moment B is numerically singular")
    return linalg.solve_triangular(chol, np.eye(b.shape[0]), lower=True)


def _gmm_solve(a: np.ndarray, b: np.ndarray, cy: np.ndarray, pinv: bool = False):
    """``(A'B^-1A)^-1 A'B^-1 c`` through a whitening of ``B`` and a QR of the whitened ``A``.

    ``B`` is whitened by its Cholesky factor, or with ``pinv`` by its
    eigendecomposition restricted to the numerically nonzero spectrum, which
    gives the generalized-inverse (Moore-Penrose) weighting when there are
    more instruments than usable time periods.  Returns ``(theta, G, Q, R)``;
    raises :class:`RankDeficiencyError`.
    """
    g = _whitener(b, pinv)
    a_w = g @ a
    c_w = g @ cy
    if a_w.shape[0] < a_w.shape[1]:
        raise RankDeficiencyError(f"instrument space has rank {a_w.shape[0]} below {a_w.shape[1]} parameters")
    sv = np.linalg.svd(a_w, compute_uv=False)
    if sv[-1] < RANK_TOL * sv[0]:
        raise RankDeficiencyError("instrument-regressor cross-moment A lacks full column rank")
    q_mat, r_mat = np.linalg.qr(a_w)
    theta = linalg.solve_triangular(r_mat, q_mat.T @ c_w, lower=False)
    return theta, g, q_mat, r_mat


def unit_iv(c: np.ndarray, z: np.ndarray, y: np.ndarray, unit: int = 0, with_variance: bool = False,
            pinv: bool = False) -> UnitEstimate:
    """IV estimate ``(A'B^-1A)^-1 A'B^-1 c_y`` with ``A = Z'C/T``, ``B = Z'Z/T``, ``c_y = Z'y/T``.

    Rank failures do not raise: the estimate comes back with ``ok=False``,
    NaN coefficients and the reason recorded.  ``pinv`` replaces ``B^-1``
    by the Moore-Penrose inverse so that units with fewer usable periods
    than instruments can still be estimated.
    """
    c = np.asarray(c, dtype=float)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    p = c.shape[1]
    if z.shape[1] < p:
        raise IdentificationError(f"under-identified: {z.shape[1]} instruments for {p} parameters")
    a, b, cy = _moments(c, z, y)
    cond_a, cond_b = _cond(a), _cond(b)
    try:
        theta = _gmm_solve(a, b, cy, pinv)[0]
    except RankDeficiencyError as exc:
        logger.debug("unit %d excluded: %s", unit, exc)
        return UnitEstimate(unit, np.full(p, np.nan), None, cond_a, cond_b, ok=False, reason=str(exc))
    var = None
    if with_variance:
        var = unit_variance(c, z, y - c @ theta, pinv) / z.shape[0]
    return UnitEstimate(unit, theta, var, cond_a, cond_b)


def unit_variance(c: np.ndarray, z: np.ndarray, residuals: np.ndarray, pinv: bool = False) -> np.ndarray:
    """Heteroskedasticity-robust sandwich for ``sqrt(T)(theta_i - theta_i0)``.

    ``Phi = T^-1 sum_t z_t z_t' u_t^2`` plugged into
    ``(A'B^-1A)^-1 A'B^-1 Phi B^-1 A (A'B^-1A)^-1``.
    """
    c = np.asarray(c, dtype=float)
    z = np.asarray(z, dtype=float)
    u = np.asarray(residuals, dtype=float).ravel()
    t = z.shape[0]
    a, b, _ = _moments(c, z, u)
    zu = z * u[:, None]
    phi = zu.T @ zu / t
    bread = _bread(a, b, pinv)
    out = bread @ phi @ bread.T
    return (out + out.T) / 2


def _bread(a: np.ndarray, b: np.ndarray, pinv: bool = False) -> np.ndarray:
    """``(A'B^-1A)^-1 A'B^-1`` via the same factorisations as the point estimate."""
    _, g, q_mat, r_mat = _gmm_solve(a, b, np.zeros(a.shape[0]), pinv)
    return linalg.solve_triangular(r_mat, q_mat.T @ g, lower=False)


@dataclass
class MGResult:
    theta_mg: np.ndarray
    sigma_theta: np.ndarray
    per_unit: list
    n_used: int
    names: tuple = ()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sigma_theta), 0.0, None))

    @property
    def t_ratios(self) -> np.ndarray:
        return _ratio(self.theta_mg, self.se)

    @property
    def excluded(self) -> list:
        return [(u.unit, u.reason) for u in self.per_unit if not u.ok]

    @property
    def theta_units(self) -> np.ndarray:
        return np.array([u.theta for u in self.per_unit])


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros_like(num)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    out[~nz & (num != 0)] = np.inf * np.sign(num[~nz & (num != 0)])
    return out


def mgiv(units: Sequence[UnitEstimate], names: Sequence[str] = ()) -> MGResult:
    """Mean of the usable per-unit estimates and ``[N(N-1)]^-1 sum (theta_i - mean)(theta_i - mean)'``."""
    used = [u for u in units if u.ok]
    if len(used) < 2:
        raise NumericError(f"mean group needs at least 2 usable units, have {len(used)}")
    thetas = np.array([u.theta for u in used])
    n = thetas.shape[0]
    mean = thetas.mean(axis=0)
    dev = thetas - mean
    sigma = dev.T @ dev / (n * (n - 1))
    if len(used) < len(units):
        logger.info("mean group excludes %d of %d units", len(units) - len(used), len(units))
    return MGResult(mean, sigma, list(units), n, tuple(names))


@dataclass(frozen=True)
class TTest:
    t: np.ndarray
    reject: np.ndarray
    critical: float = Z_CRIT_5


def t_test(result, null_values, se=None) -> TTest:
    """Two-sided 5% normal test of ``theta = null_values`` for each coefficient."""
    theta = np.asarray(getattr(result, "theta_mg", getattr(result, "theta_tilde", result)), dtype=float)
    if se is None:
        se = result.se
    t = _ratio(theta - np.asarray(null_values, dtype=float), np.asarray(se, dtype=float))
    return TTest(t=t, reject=np.abs(t) > Z_CRIT_5)


@dataclass
class PooledResult:
    theta_tilde: np.ndarray
    covariance: np.ndarray
    j_stat: float
    j_df: int
    j_pvalue: float
    r_y_used: int
    theta_stage1: np.ndarray = field(default=None)
    names: tuple = ()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def t_ratios(self) -> np.ndarray:
        return _ratio(self.theta_tilde, self.se)


def _pooled_moments(c, z, y, m=None):
    n, t, _ = z.shape
    mz = z if m is None else np.einsum("st,ntq->nsq", m, z)
    a = np.einsum("ntq,ntp->qp", mz, c) / (n * t)
    b = np.einsum("ntq,ntr->qr", mz, z) / (n * t)
    cy = np.einsum("ntq,nt->q", mz, y) / (n * t)
    return mz, a, b, cy


def two_siv(c: np.ndarray, z: np.ndarray, y: np.ndarray, r_y: int, names: Sequence[str] = ()) -> PooledResult:
    """Pooled two-stage IV with residual-factor projection and the overidentification J test.

    Stage 1 is pooled IV without projection.  Its residuals give ``H_hat``
    (``r_y`` principal components), and stage 2 repeats pooled IV on moments
    projected by ``M_H``.  The J statistic is ``NT g' V^-1 g`` with ``g`` the
    stage-2 moment vector at ``theta_tilde`` and ``V`` the unit-clustered
    moment covariance built from the stage-2 residuals.  The covariance of
    ``theta_tilde`` is the matching clustered sandwich.  ``V`` has rank at
    most ``N``; when it is singular the J statistic and its p-value are NaN.
    """
    c = np.asarray(c, dtype=float)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    n, t, q = z.shape
    p = c.shape[2]
    if q < p:
        raise IdentificationError(f"under-identified: {q} instruments for {p} parameters")
    if r_y < 0 or r_y >= t:
        raise ValueError(f"r_y must lie in [0, T) = [0, {t}), got {r_y}")

    _, a1, b1, c1 = _pooled_moments(c, z, y)
    theta1 = _gmm_solve(a1, b1, c1)[0]
    if r_y > 0:
        resid = y - np.einsum("ntp,p->nt", c, theta1)
        h = extract_factors(resid[:, :, None], r_y, source="residual")
        m_h = annihilator(h).m
    else:
        m_h = None
    mz, a, b, cy = _pooled_moments(c, z, y, m_h)
    theta = _gmm_solve(a, b, cy)[0]

    resid = y - np.einsum("ntp,p->nt", c, theta)
    scores = np.einsum("ntq,nt->nq", mz, resid)  # Z_i' M_H u_i per unit
    g = scores.sum(axis=0) / (n * t)
    v_hat = scores.T @ scores / (n * t)
    bread = _bread(a, b)
    cov = bread @ v_hat @ bread.T / (n * t)
    df = q - p
    try:
        v_chol = linalg.cholesky(v_hat, lower=True)
        regular = np.diag(v_chol).min() > np.sqrt(RANK_TOL) * np.diag(v_chol).max()
    except linalg.LinAlgError:
        regular = False
    if regular:
        g_w = linalg.solve_triangular(v_chol, g, lower=True)
        j = float(n * t * g_w @ g_w)
        pval = float(stats.chi2.sf(j, df)) if df > 0 else np.nan
    else:
        # V has rank at most N, so the J statistic needs more units than instruments
        logger.warning("moment covariance V is singular (N=%d, q=%d); J statistic undefined", n, q)
        j, pval = np.nan, np.nan
    return PooledResult(theta, (cov + cov.T) / 2, j, df, pval, r_y, theta1, tuple(names))


@dataclass
class EstimationResult:
    names: tuple
    instruments: InstrumentSpec
    model: ModelSpec
    n_instruments: int
    factors: dict
    mg: MGResult | None = None
    pooled: PooledResult | None = None


def prepare(data: PanelDataset, w, r: int, instruments=Z1, model: ModelSpec = ModelSpec(),
            fixed_effects: bool = True, known_factors: Mapping[int, np.ndarray] | None = None):
    """Design blocks, stacked instruments and the factor set used to build them."""
    spec = resolve_instruments(instruments)
    need = max(spec.max_lag, model.max_lag)
    if data.presample < need:
        raise IdentificationError(f"estimation needs presample >= {need}, have {data.presample}")
    p = model.n_params(data.k)
    if spec.n_columns(data.k) < p:
        raise IdentificationError(f"under-identified: {spec.n_columns(data.k)} instruments for {p} parameters")
    if known_factors is not None:
        factors = {s: np.asarray(known_factors[s], dtype=float) for s in spec.lags}
    else:
        factors = extract_factor_set(data, r, spec.lags, demean=fixed_effects)
    design = build_design(data, w, model, demean=fixed_effects)
    z = build_instruments(data, w, factors, spec, demean=fixed_effects, n_params=p)
    return design, z, factors, spec


def estimate(data: PanelDataset, w, r: int, instruments=Z1, model: ModelSpec = ModelSpec(),
             estimator: str = "mgiv", r_y: int | None = None, fixed_effects: bool = True,
             known_factors: Mapping[int, np.ndarray] | None = None, workers: int = 1,
             unit_variances: bool = False, pinv: bool = False) -> EstimationResult:
    """Run MGIV and/or 2SIV on a panel.

    With ``fixed_effects`` (default) every series is centred per unit over
    its window before factor extraction and estimation, which absorbs
    additive unit effects in both the outcome and the covariates.
    """
    if estimator not in ("mgiv", "2siv", "both"):
        raise ValueError(f"estimator must be mgiv, 2siv or both, got {estimator!r}")
    design, z, factors, spec = prepare(data, w, r, instruments, model, fixed_effects, known_factors)
    names = design[0].names
    out = EstimationResult(names, spec, model, z.shape[2], factors)
    if estimator in ("mgiv", "both"):
        units = ordered_map(lambda blk: unit_iv(blk.c, z[blk.unit], blk.y, blk.unit, unit_variances, pinv),
                            design, workers)
        try:
            out.mg = mgiv(units, names)
        except NumericError as exc:
            if not pinv and z.shape[2] >= data.n_periods:
                raise NumericError(f"{exc}; {z.shape[2]} instruments with only {data.n_periods} periods "
                                   "make B singular, consider the generalized-inverse weighting") from None
            raise
    if estimator in ("2siv", "both"):
        c = np.stack([blk.c for blk in design])
        y = np.stack([blk.y for blk in design])
        out.pooled = two_siv(c, z, y, r if r_y is None else r_y, names)
    return out

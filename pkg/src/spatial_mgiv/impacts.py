"""Direct, indirect and total effects of covariates under spatial feedback.

For covariate ``l`` the partial-derivative matrix of the outcome is

    M_l = [I - Psi0 W - Psi1 W 1{long run}]^-1 (B_l + Gamma_l W)

with ``Psi0, Psi1, B_l, Gamma_l`` diagonal matrices of unit-specific
coefficients.  The lagged own outcome does not enter ``M_l``.  Standard
errors use the cross-unit dispersion of the per-unit contributions
(mean-group style); this is a choice made here and is recorded in every
output table.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, stats

from .errors import NumericError

HORIZONS = ("contemporaneous", "long_run")
INFERENCE_METHOD = "cross-unit dispersion of per-unit contributions, se = sd(ddof=1)/sqrt(N)"
SUMMARIES = ("direct", "indirect", "total")


def _vec(v, n: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    if arr.shape != (n,):
        raise ValueError(f"{name} must have length {n}, got shape {arr.shape}")
    return arr


def impact_matrix(psi0, psi1, beta, gamma, w, horizon: str = "long_run") -> np.ndarray:
    """Partial-derivative matrix ``[I - Psi0 W - Psi1 W 1{long_run}]^-1 (B + Gamma W)``.

    Scalars are broadcast to all units.  ``psi1`` is ignored for the
    contemporaneous horizon.

    Raises
    ------
    NumericError
        If the system matrix is singular; the message reports the spectral
        radius of ``(Psi0 + Psi1) W`` (or ``Psi0 W``).
    """
    if horizon not in HORIZONS:
        raise ValueError(f"horizon must be one of {HORIZONS}, got {horizon!r}")
    w = np.asarray(getattr(w, "w", w), dtype=float)
    n = w.shape[0]
    if w.shape != (n, n):
        raise ValueError(f"weight matrix must be square, got {w.shape}")
    psi = _vec(psi0, n, "psi0")
    if horizon == "long_run":
        psi = psi + _vec(psi1, n, "psi1")
    a = psi[:, None] * w
    system = np.eye(n) - a
    rhs = np.diag(_vec(beta, n, "beta")) + _vec(gamma, n, "gamma")[:, None] * w
    radius = float(np.max(np.abs(np.linalg.eigvals(a)))) if n else 0.0
    try:
        lu, piv = linalg.lu_factor(system, check_finite=True)
    except (ValueError, linalg.LinAlgError) as exc:
        raise NumericError(f"impact system is not solvable: {exc}") from None
    d = np.abs(np.diag(lu))
    if d.min() <= 1e-12 * max(d.max(), 1.0):
        raise NumericError(f"I - Psi W is singular (spectral radius of Psi W = {radius:.6g})")
    with np.errstate(all="raise"):
        try:
            out = linalg.lu_solve((lu, piv), rhs)
        except FloatingPointError:
            raise NumericError(f"I - Psi W is ill-conditioned (spectral radius of Psi W = {radius:.6g})") from None
    return out


@dataclass(frozen=True)
class ImpactSummary:
    """Aggregate and per-unit effects of one covariate."""

    direct: float
    indirect: float
    total: float
    unit_direct: np.ndarray
    unit_indirect: np.ndarray

    @property
    def unit_total(self) -> np.ndarray:
        return self.unit_direct + self.unit_indirect


def summarize(m) -> ImpactSummary:
    """Mean diagonal (direct), mean off-diagonal row sum (indirect) and their total.

    The mean of off-diagonal row sums equals the mean of off-diagonal column
    sums, ``(sum(M) - trace(M)) / N``.
    """
    m = np.asarray(m, dtype=float)
    n = m.shape[0]
    diag = np.diag(m).copy()
    off_rows = m.sum(axis=1) - diag
    direct = float(diag.mean())
    indirect = float((m.sum() - diag.sum()) / n)
    return ImpactSummary(direct, indirect, direct + indirect, diag, off_rows)


@dataclass(frozen=True)
class Inference:
    estimate: float
    se: float
    z: float
    p: float
    ci_low: float
    ci_high: float


def impact_inference(contributions) -> Inference:
    """Mean of per-unit contributions with ``se = sd(ddof=1) / sqrt(N)``, normal z, p and 95% CI."""
    c = np.asarray(contributions, dtype=float).ravel()
    n = c.size
    if n < 2:
        raise NumericError("impact inference needs at least 2 units")
    est = float(c.mean())
    se = float(c.std(ddof=1) / np.sqrt(n))
    if se > 0:
        z = est / se
        p = float(2 * stats.norm.sf(abs(z)))
    else:
        z = 0.0 if est == 0 else float(np.sign(est) * np.inf)
        p = 1.0 if est == 0 else 0.0
    half = stats.norm.ppf(0.975) * se
    return Inference(est, se, float(z), p, est - half, est + half)


@dataclass
class ImpactTable:
    """Effects per covariate plus the inference for each summary."""

    covariates: tuple
    summaries: dict  # covariate -> ImpactSummary
    inference: dict  # (summary, covariate) -> Inference
    horizon: str
    method: str = INFERENCE_METHOD

    def rows(self) -> list[dict]:
        out = []
        for kind in SUMMARIES:
            for cov in self.covariates:
                inf = self.inference[(kind, cov)]
                out.append({"effect": kind, "covariate": cov, "impact": inf.estimate, "se": inf.se, "z": inf.z,
                            "p": inf.p, "ci_low": inf.ci_low, "ci_high": inf.ci_high})
        return out

    def to_csv(self, path=None, header: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for line in header:
            buf.write(f"# {line}\n")
        buf.write(f"# horizon: {self.horizon}\n# inference: {self.method}\n")
        cols = ["effect", "covariate", "impact", "se", "z", "p", "ci_low", "ci_high"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in self.rows():
            writer.writerow({c: (f"{v:.10g}" if isinstance(v, float) else v) for c, v in r.items()})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def compute_impacts(coefficients: Mapping[str, Sequence[float]], x_names: Sequence[str], w,
                    horizon: str = "long_run") -> ImpactTable:
    """Effects of every covariate from per-unit coefficient vectors.

    ``coefficients`` maps coefficient names to length-N vectors using the
    estimator's naming: ``psi`` (required), ``psi1`` (optional), the
    covariate names, and ``W:<name>`` for spatially lagged covariates
    (optional, zero when absent).
    """
    w = np.asarray(getattr(w, "w", w), dtype=float)
    n = w.shape[0]
    if "psi" not in coefficients:
        raise ValueError("coefficients must include the spatial lag 'psi'")
    psi0 = _vec(coefficients["psi"], n, "psi")
    psi1 = _vec(coefficients.get("psi1", 0.0), n, "psi1")
    summaries, inference = {}, {}
    for name in x_names:
        if name not in coefficients:
            raise ValueError(f"no coefficients for covariate {name!r}")
        m = impact_matrix(psi0, psi1, coefficients[name], coefficients.get(f"W:{name}", 0.0), w, horizon)
        s = summarize(m)
        summaries[name] = s
        for kind, contrib in zip(SUMMARIES, (s.unit_direct, s.unit_indirect, s.unit_total)):
            inference[(kind, name)] = impact_inference(contrib)
    return ImpactTable(tuple(x_names), summaries, inference, horizon)

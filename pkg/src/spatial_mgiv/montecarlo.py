"""Simulation design for heterogeneous spatial dynamic panels and the replication engine.

Random numbers come from numpy's counter-based Philox bit generator.  A
replication is keyed by ``SeedSequence(base_seed, spawn_key=(rep, attempt))``
and every random object draws from its own child stream (see
``STREAMS``), so a replication's data depend only on ``(base_seed, rep)``
and never on scheduling or worker count.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg

from . import __version__
from .errors import ConfigError, NumericError, SpatialMGIVError
from .estimators import estimate, resolve_instruments
from .panel_data import ModelSpec, PanelDataset
from .parallel import ordered_map
from .spatial_weights import WeightMatrix, rook_circular

logger = logging.getLogger(__name__)

STREAMS = ("factors", "y_loadings", "x_loadings", "effects", "x_noise", "eps", "slopes")
PARAM_NAMES = ("psi", "rho", "beta1", "beta2")
MAX_REGENERATIONS = 20

# (N multiplier, T multiplier); "table" follows the results tables, "text" the prose
CASE_DIMS = {
    "table": {"I": (25, 100), "II": (100, 25), "III": (50, 50)},
    "text": {"I": (100, 25), "II": (25, 100), "III": (50, 50)},
}


@dataclass(frozen=True)
class MCConfig:
    case: str = "III"
    tau: int = 1
    labeling: str = "table"
    n_units: int | None = None
    n_periods: int | None = None
    pi_u: float = 0.75
    snr: float = 4.0
    k: int = 2
    r_y: int = 3
    r_x: int = 2
    rho: float = 0.4
    psi: float = 0.25
    beta: tuple = (3.0, 1.0)
    c_rho: float = 0.2
    c_psi: float = 0.15
    rho_beta: float = 0.4
    rho_gamma1: float = 0.5
    rho_gamma2: float = 0.5
    rho_mu: float = 0.5
    rho_f: float = 0.5
    rho_v: float = 0.5
    rho_alpha: float = 0.5
    burn_in: int = 50
    replications: int = 100
    base_seed: int = 0
    instruments: str = "z1"
    estimators: tuple = ("ivmg",)
    epsilon_scale: float = 1.0
    g_loading_scale: float = 1.0
    power_shift: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.labeling not in CASE_DIMS:
            raise ConfigError(f"labeling must be 'table' or 'text', got {self.labeling!r}")
        if self.case not in CASE_DIMS[self.labeling] and (self.n_units is None or self.n_periods is None):
            raise ConfigError(f"case must be I, II or III, got {self.case!r}")
        if self.tau < 1:
            raise ConfigError(f"tau must be >= 1, got {self.tau}")
        if not 0 < self.pi_u < 1:
            raise ConfigError(f"pi_u must lie in (0, 1), got {self.pi_u}")
        if self.k != 2 or len(self.beta) != self.k:
            raise ConfigError("the design has k = 2 covariates with two beta values")
        if not 1 <= self.r_x <= self.r_y:
            raise ConfigError("need 1 <= r_x <= r_y")
        for name in ("rho_beta", "rho_gamma1", "rho_gamma2", "rho_mu", "rho_f", "rho_v"):
            if not -1 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [-1, 1]")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.burn_in < 3:
            raise ConfigError("burn_in must be >= 3 to leave presample rows")
        bad = set(self.estimators) - {"ivmg", "2siv"}
        if bad or not self.estimators:
            raise ConfigError(f"estimators must be drawn from ivmg, 2siv; got {self.estimators}")
        resolve_instruments(self.instruments)

    @property
    def dims(self) -> tuple[int, int]:
        if self.n_units is not None and self.n_periods is not None:
            return self.n_units, self.n_periods
        n_mult, t_mult = CASE_DIMS[self.labeling][self.case]
        return n_mult * self.tau, t_mult * self.tau

    @property
    def sigma2_eps(self) -> float:
        return self.pi_u / (1 - self.pi_u) * self.r_y

    @property
    def sigma2_v(self) -> float:
        one_m = 1 - self.rho ** 2
        return self.sigma2_eps * (self.snr - self.rho ** 2 / one_m) * one_m / sum(b * b for b in self.beta)

    @property
    def theta0(self) -> np.ndarray:
        return np.array([self.psi, self.rho, *self.beta])

    @property
    def presample(self) -> int:
        return max(resolve_instruments(self.instruments).max_lag, 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta"] = list(self.beta)
        d["estimators"] = list(self.estimators)
        return d


@dataclass
class SimulatedPanel:
    data: PanelDataset
    w: WeightMatrix
    theta: np.ndarray  # (N, 4): psi_i, rho_i, beta1_i, beta2_i
    factors: np.ndarray  # (T_total, r_y) aligned with data rows
    regenerations: int = 0

    def known_factors(self, r_x: int, lags) -> dict:
        """True covariate factors on each lagged window, for the infeasible estimator."""
        p, t = self.data.presample, self.data.n_periods
        return {s: self.factors[p - s:p - s + t, :r_x] for s in lags}


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.SeedSequence(int(seed[0]), spawn_key=tuple(int(s) for s in seed[1:]))
    return np.random.SeedSequence(int(seed))


def _streams(ss: np.random.SeedSequence) -> dict:
    return {name: np.random.Generator(np.random.Philox(child)) for name, child in zip(STREAMS, ss.spawn(len(STREAMS)))}


def generate(config: MCConfig, seed=0) -> SimulatedPanel:
    """Draw one panel from the design.

    ``seed`` is an int, a ``(base_seed, rep, ...)`` tuple or a SeedSequence.
    If ``I - Psi W`` is singular the draw is repeated with the next attempt
    index appended to the seed key.
    """
    base = _seed_sequence(seed)
    for attempt in range(MAX_REGENERATIONS):
        ss = np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + (attempt,))
        try:
            panel = _generate_once(config, _streams(ss))
        except NumericError as exc:
            logger.warning("regenerating replication %s: %s", base.spawn_key, exc)
            continue
        panel.regenerations = attempt
        return panel
    raise NumericError(f"could not draw an admissible panel in {MAX_REGENERATIONS} attempts")


def _generate_once(cfg: MCConfig, rng: dict) -> SimulatedPanel:
    n, t = cfg.dims
    k, r_y, r_x = cfg.k, cfg.r_y, cfg.r_x
    n_gen = cfg.burn_in + t  # periods -burn_in+1 .. T
    periods = np.arange(-cfg.burn_in + 1, t + 1)
    keep = cfg.presample

    # common factors, AR(1) started from the stationary N(0, 1) marginal
    g = rng["factors"]
    f = np.empty((n_gen, r_y))
    prev = g.standard_normal(r_y)
    innov = g.standard_normal((n_gen, r_y))
    scale_f = np.sqrt(1 - cfg.rho_f ** 2)
    for s in range(n_gen):
        prev = cfg.rho_f * prev + scale_f * innov[s]
        f[s] = prev

    # loadings on the outcome factors; the last one never enters the covariates
    lam = rng["y_loadings"].standard_normal((r_y, n))
    lam[r_x:] *= cfg.g_loading_scale
    gx = rng["x_loadings"]
    xi1 = gx.standard_normal((r_x, n))
    xi2 = gx.standard_normal((r_x, n))
    gamma = np.empty((k, r_x, n))
    gamma[0] = cfg.rho_gamma1 * lam[r_y - 1] + np.sqrt(1 - cfg.rho_gamma1 ** 2) * xi1
    gamma[1] = cfg.rho_gamma2 * lam[:r_x] + np.sqrt(1 - cfg.rho_gamma2 ** 2) * xi2

    ge = rng["effects"]
    sd_eff = 1 - cfg.rho_alpha
    alpha = sd_eff * ge.standard_normal(n)
    omega = sd_eff * ge.standard_normal((k, n))
    mu = cfg.rho_mu * alpha + np.sqrt(1 - cfg.rho_mu ** 2) * omega

    # serially correlated covariate noise, stationary start
    gv = rng["x_noise"]
    sd_v = np.sqrt(cfg.sigma2_v)
    v = np.empty((k, n_gen, n))
    prev_v = sd_v * gv.standard_normal((k, n))
    innov_v = sd_v * gv.standard_normal((k, n_gen, n))
    scale_v = np.sqrt(1 - cfg.rho_v ** 2)
    for s in range(n_gen):
        prev_v = cfg.rho_v * prev_v + scale_v * innov_v[:, s]
        v[:, s] = prev_v
    x = mu[:, None, :] + np.einsum("lsn,ts->ltn", gamma, f[:, :r_x]) + v

    # non-normal errors, heteroskedastic over units and time; phi_t = t/T for t >= 0, 1 before
    gep = rng["eps"]
    eta = gep.chisquare(2, n) / 2
    chi = gep.chisquare(1, (n_gen, n))
    phi = np.where(periods >= 0, periods / t, 1.0)
    sigma = np.sqrt(np.outer(phi, eta))
    eps = cfg.epsilon_scale * np.sqrt(cfg.sigma2_eps) * sigma * (chi - 1) / np.sqrt(2)
    u = f @ lam + eps

    gs = rng["slopes"]
    eta_rho = gs.uniform(-cfg.c_rho, cfg.c_rho, n)
    eta_psi = gs.uniform(-cfg.c_psi, cfg.c_psi, n)
    window = periods >= 1
    vbar = (v[:, window] ** 2).mean(axis=1)  # (k, N)
    dev = vbar - vbar.mean(axis=1, keepdims=True)
    sd = np.sqrt((dev ** 2).mean(axis=1, keepdims=True))
    xi_beta = np.divide(dev, sd, out=np.zeros_like(dev), where=sd > 0)
    eta_beta = np.sqrt((2 * cfg.c_rho) ** 2 / 12) * cfg.rho_beta * xi_beta + np.sqrt(1 - cfg.rho_beta ** 2) * eta_rho
    rho_i = cfg.rho + eta_rho
    psi_i = cfg.psi + eta_psi
    beta_i = np.array(cfg.beta)[:, None] + eta_beta

    w = rook_circular(n)
    system = np.eye(n) - psi_i[:, None] * w.w
    lu = linalg.lu_factor(system, check_finite=True)
    if np.min(np.abs(np.diag(lu[0]))) < 1e-12:
        raise NumericError("I - Psi W is singular")
    y = np.empty((n_gen, n))
    prev_y = np.zeros(n)
    rhs_fixed = alpha + np.einsum("ln,ltn->tn", beta_i, x) + u
    for s in range(n_gen):
        prev_y = linalg.lu_solve(lu, rhs_fixed[s] + rho_i * prev_y)
        y[s] = prev_y

    start = cfg.burn_in - keep
    data = PanelDataset(y=y[start:], x=x[:, start:], presample=keep,
                        time_ids=tuple(int(p) for p in periods[start:]), x_names=("x1", "x2"))
    theta = np.column_stack([psi_i, rho_i, beta_i.T])
    return SimulatedPanel(data=data, w=w, theta=theta, factors=f[start:])


@dataclass
class ReplicationResult:
    rep: int
    ok: bool = True
    error: str = ""
    theta_mg: np.ndarray | None = None
    se_mg: np.ndarray | None = None
    theta_2siv: np.ndarray | None = None
    se_2siv: np.ndarray | None = None
    j_pvalue: float = np.nan
    failed_units: int = 0
    regenerations: int = 0


def run_replication(config: MCConfig, rep: int) -> ReplicationResult:
    """Generate and estimate one replication; estimator failures are captured, not raised."""
    try:
        sim = generate(config, (config.base_seed, rep))
    except SpatialMGIVError as exc:
        return ReplicationResult(rep, ok=False, error=str(exc))
    which = {("ivmg",): "mgiv", ("2siv",): "2siv"}.get(tuple(sorted(config.estimators)), "both")
    try:
        res = estimate(sim.data, sim.w, config.r_x, config.instruments, ModelSpec(), which,
                       r_y=config.r_y, fixed_effects=True)
    except (SpatialMGIVError, np.linalg.LinAlgError) as exc:
        return ReplicationResult(rep, ok=False, error=str(exc), regenerations=sim.regenerations)
    out = ReplicationResult(rep, regenerations=sim.regenerations)
    if res.mg is not None:
        out.theta_mg, out.se_mg = res.mg.theta_mg, res.mg.se
        out.failed_units = len(res.mg.excluded)
    if res.pooled is not None:
        out.theta_2siv, out.se_2siv = res.pooled.theta_tilde, res.pooled.se
        out.j_pvalue = res.pooled.j_pvalue
    return out


def _replication_task(args):
    return run_replication(*args)


def performance(estimates: np.ndarray, se: np.ndarray, truth: np.ndarray, shift: float = 0.1) -> dict:
    """Mean, RMSE, ARB (%), 5% size and size-corrected power for each column of ``estimates``."""
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(se, dtype=float)
    truth = np.asarray(truth, dtype=float)
    mean = est.mean(axis=0)
    rmse = np.sqrt(((est - truth) ** 2).mean(axis=0))
    arb = 100 * np.abs(mean - truth) / np.abs(truth)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_null = (est - truth) / se
        t_alt = (est - truth - shift) / se
    size = (np.abs(t_null) > 1.959964).mean(axis=0)
    lo, hi = np.quantile(t_null, [0.025, 0.975], axis=0)
    power = ((t_alt < lo) | (t_alt > hi)).mean(axis=0)
    return {"mean": mean, "rmse": rmse, "arb": arb, "size": size, "power": power}


@dataclass
class MCReport:
    config: MCConfig
    rows: list
    replications: list = field(repr=False, default_factory=list)

    @property
    def n_failed(self) -> int:
        return sum(not r.ok for r in self.replications)

    def row(self, parameter: str, estimator: str = "ivmg") -> dict:
        for r in self.rows:
            if r["parameter"] == parameter and r["estimator"] == estimator:
                return r
        raise KeyError((parameter, estimator))

    def estimates(self, estimator: str = "ivmg") -> np.ndarray:
        attr = "theta_mg" if estimator == "ivmg" else "theta_2siv"
        return np.array([getattr(r, attr) for r in self.replications if r.ok])

    def to_csv(self, path=None, header=()) -> str:
        """Render the report; ``header`` lines are written as extra ``#`` comments."""
        buf = io.StringIO()
        buf.write(f"# spatial-mgiv {__version__}\n")
        buf.write(f"# config: {json.dumps(self.config.to_dict(), sort_keys=True)}\n")
        for line in header:
            buf.write(f"# {line}\n")
        cols = ["case", "tau", "N", "T", "pi_u", "instruments", "estimator", "parameter", "true",
                "mean", "rmse", "arb", "size", "power", "size_j", "reps_used", "reps_failed", "failed_units"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({c: _fmt(r[c]) for c in cols})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if np.isnan(v) else f"{v:.10g}"
    return str(v)


def run_experiment(config: MCConfig, workers: int = 1) -> MCReport:
    """Run ``config.replications`` replications and summarise them per parameter and estimator.

    Replications run in a process pool when ``workers > 1``; results are
    reduced in replication order, so the report is identical for any
    worker count.
    """
    tasks = [(config, rep) for rep in range(config.replications)]
    reps = ordered_map(_replication_task, tasks, workers, processes=True)
    ok = [r for r in reps if r.ok]
    for r in reps:
        if not r.ok:
            logger.warning("replication %d failed: %s", r.rep, r.error)
    n, t = config.dims
    truth = config.theta0
    failed_units = sum(r.failed_units for r in ok)
    rows = []
    for est in ("ivmg", "2siv"):
        if est not in config.estimators:
            continue
        if ok:
            theta = np.array([r.theta_mg if est == "ivmg" else r.theta_2siv for r in ok])
            se = np.array([r.se_mg if est == "ivmg" else r.se_2siv for r in ok])
            perf = performance(theta, se, truth, config.power_shift)
        else:
            perf = {m: np.full(len(truth), np.nan) for m in ("mean", "rmse", "arb", "size", "power")}
        size_j = float(np.mean([r.j_pvalue < 0.05 for r in ok])) if (est == "2siv" and ok) else np.nan
        for j, name in enumerate(PARAM_NAMES):
            rows.append({
                "case": config.case, "tau": config.tau, "N": n, "T": t, "pi_u": config.pi_u,
                "instruments": config.instruments, "estimator": est, "parameter": name,
                "true": float(truth[j]), "mean": float(perf["mean"][j]), "rmse": float(perf["rmse"][j]),
                "arb": float(perf["arb"][j]), "size": float(perf["size"][j]), "power": float(perf["power"][j]),
                "size_j": size_j, "reps_used": len(ok), "reps_failed": len(reps) - len(ok),
                "failed_units": failed_units,
            })
    return MCReport(config, rows, reps)

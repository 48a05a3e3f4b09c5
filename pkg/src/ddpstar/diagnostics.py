"""Model checking and convergence diagnostics for fitted mixtures.

Model checking uses posterior predictive replicates and quantile residuals.
Convergence is assessed on scalar functionals that do not suffer from label
switching (conditional densities and means at anchor points, the DP
precision and the occupied-component count).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import ndtr, ndtri

from . import distributions as dist
from .formula import StandardisationRecord
from .functionals import mixture_density, mixture_mean, query_design

RESID_CLAMP = 1e-12
PPC_STATS = ("min", "q01", "q25", "median", "mean", "q75", "q99", "max", "sd")


class DiagnosticsError(ValueError):
    pass


# ------------------------------------------------------------ helpers

def _original_scale(draws, data: pd.DataFrame):
    """Design rows, observed responses and the standardisation record."""
    rec = StandardisationRecord.from_dict(draws.manifest["standardisation"])
    response = draws.manifest.get("response", "y")
    if response not in data.columns:
        raise DiagnosticsError(f"data lacks the response column {response!r}")
    C = query_design(draws.manifest, data)
    return C, data[response].to_numpy(dtype=float), rec


def _chunks(D: int, n: int, L: int, budget: int = 4_000_000):
    step = max(1, budget // max(1, n * L))
    for s in range(0, D, step):
        yield slice(s, min(D, s + step))


def summary_statistics(y: np.ndarray) -> np.ndarray:
    """The PPC statistics of ``y`` along the last axis, stacked on a new last axis."""
    q = np.quantile(y, [0.01, 0.25, 0.5, 0.75, 0.99], axis=-1)
    return np.stack([y.min(axis=-1), q[0], q[1], q[2], y.mean(axis=-1), q[3], q[4],
                     y.max(axis=-1), y.std(axis=-1, ddof=1)], axis=-1)


# ------------------------------------------------------------ model checks

@dataclass
class PPCResult:
    """Replicate statistics (one row per replicate) and the observed values.

    ``rank`` is the fraction of replicate statistics at or below the observed
    one; a statistic is flagged when the rank falls outside the central
    ``level`` band.
    """

    replicates: pd.DataFrame
    observed: pd.Series
    draw_index: np.ndarray
    level: float = 0.95

    @property
    def rank(self) -> pd.Series:
        return (self.replicates <= self.observed).mean(axis=0)

    @property
    def flagged(self) -> list:
        a = (1 - self.level) / 2
        r = self.rank
        return [s for s in r.index if r[s] < a or r[s] > 1 - a]

    def summary(self) -> pd.DataFrame:
        a = (1 - self.level) / 2
        lo = self.replicates.quantile(a)
        hi = self.replicates.quantile(1 - a)
        return pd.DataFrame({"statistic": self.observed.index, "observed": self.observed.values,
                             "rep_median": self.replicates.median().values, "rep_lo": lo.values,
                             "rep_hi": hi.values, "rank": self.rank.values,
                             "flagged": [s in self.flagged for s in self.observed.index]})


def posterior_predictive_check(draws, data: pd.DataFrame, n_rep: int = 500, seed: int = 0,
                               level: float = 0.95) -> PPCResult:
    """Simulate replicate responses at the observed covariates from ``n_rep``
    randomly chosen retained draws and compare summary statistics."""
    if n_rep < 1:
        raise DiagnosticsError("n_rep must be at least 1")
    if n_rep > draws.n_draws:
        raise DiagnosticsError(f"n_rep={n_rep} exceeds the {draws.n_draws} retained draws")
    C, y, rec = _original_scale(draws, data)
    rng = dist.make_rng(seed, 0)
    idx = np.sort(rng.choice(draws.n_draws, size=n_rep, replace=False))
    n = C.shape[0]
    reps = np.empty((n_rep, len(PPC_STATS)))
    for k, d in enumerate(idx):
        comp = dist.sample_categorical(rng, draws.weights[d], size=n)
        mu = C @ draws.coef[d].T                      # (n, L)
        mean = mu[np.arange(n), comp]
        yrep = mean + np.sqrt(draws.sigma2[d, comp]) * rng.standard_normal(n)
        reps[k] = summary_statistics(rec.y_loc + rec.y_scale * yrep)
    return PPCResult(pd.DataFrame(reps, columns=PPC_STATS),
                     pd.Series(summary_statistics(y), index=PPC_STATS), idx, level)


def posterior_mean_cdf(draws, C: np.ndarray, y_std: np.ndarray) -> np.ndarray:
    """Posterior-mean conditional CDF at standardised responses ``y_std``."""
    n = C.shape[0]
    acc = np.zeros(n)
    for sl in _chunks(draws.n_draws, n, draws.L):
        mu = np.einsum("np,dlp->dnl", C, draws.coef[sl])
        sd = np.sqrt(draws.sigma2[sl])[:, None, :]
        acc += np.sum(draws.weights[sl][:, None, :] * ndtr((y_std[None, :, None] - mu) / sd),
                      axis=(0, 2))
    return acc / draws.n_draws


def quantile_residuals(draws, data: pd.DataFrame) -> np.ndarray:
    """``Phi^-1`` of the posterior-mean conditional CDF at each observation,
    with the CDF clamped to ``[1e-12, 1 - 1e-12]``."""
    C, y, rec = _original_scale(draws, data)
    F = posterior_mean_cdf(draws, C, (y - rec.y_loc) / rec.y_scale)
    return ndtri(np.clip(F, RESID_CLAMP, 1 - RESID_CLAMP))


# ------------------------------------------------------------ MCMC diagnostics

def _check_series(x, min_len: int = 2) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size < min_len:
        raise DiagnosticsError(f"series needs at least {min_len} values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DiagnosticsError("series contains non-finite values")
    if np.ptp(x) == 0:
        raise DiagnosticsError("constant series: variance is zero")
    return x


def autocovariance(x) -> np.ndarray:
    """Biased (divide by n) sample autocovariances at lags 0..n-1 via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def spectrum0(x) -> float:
    """Spectral density at frequency zero (lag-window estimate, Bartlett
    window with bandwidth ``floor(sqrt(n))``)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    M = max(1, int(np.sqrt(n)))
    acov = autocovariance(x)[: M + 1]
    w = 1 - np.arange(M + 1) / (M + 1)
    return float(max(acov[0] + 2 * np.sum(w[1:] * acov[1:]), acov[0] * 1e-8))


def geweke_z(series, frac_a: float = 0.1, frac_b: float = 0.5) -> float:
    """Geweke convergence z-score comparing the first ``frac_a`` and last
    ``frac_b`` of the chain."""
    if not (0 < frac_a < 1 and 0 < frac_b < 1 and frac_a + frac_b <= 1):
        raise DiagnosticsError("need 0 < frac_a, frac_b and frac_a + frac_b <= 1")
    x = _check_series(series, 100)
    n = x.size
    a = x[: int(frac_a * n)]
    b = x[n - int(frac_b * n):]
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DiagnosticsError("constant window: variance is zero")
    var = spectrum0(a) / a.size + spectrum0(b) / b.size
    return float((a.mean() - b.mean()) / np.sqrt(var))


def ess(series) -> float:
    """Effective sample size from autocorrelations truncated by Geyer's
    initial positive (monotone) sequence.

    The integrated autocorrelation time is floored at ``1 / log10(n)`` so that
    antithetic chains give a finite positive answer.
    """
    x = _check_series(series, 4)
    n = x.size
    rho = autocovariance(x)
    rho = rho / rho[0]
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    m = int(np.argmax(pairs <= 0)) if np.any(pairs <= 0) else pairs.size
    gam = np.minimum.accumulate(pairs[:max(m, 1)])
    tau = -1.0 + 2.0 * float(np.sum(gam))
    tau = max(tau, 1.0 / np.log10(max(n, 10)))
    return n / tau


# ------------------------------------------------------------ reporting

def trace_functionals(draws, anchors: pd.DataFrame, y_anchor=None) -> pd.DataFrame:
    """Per-draw scalar functionals used for convergence checks.

    Columns: ``alpha``, ``occupied``, and for every anchor row ``q``
    ``mean[q]`` and ``density[q]`` (density evaluated at ``y_anchor[q]``,
    defaulting to the posterior-median conditional mean).
    """
    C = query_design(draws.manifest, anchors)
    rec = StandardisationRecord.from_dict(draws.manifest["standardisation"])
    mu = rec.y_loc + rec.y_scale * draws.component_means(C)
    sd = rec.y_scale * np.sqrt(draws.sigma2)[:, None, :]
    w = draws.weights[:, None, :]
    means = mixture_mean(w, mu)                          # (D, nq)
    ya = np.median(means, axis=0) if y_anchor is None else np.asarray(y_anchor, float)
    dens = mixture_density(ya[None, :], w, mu, sd)
    out = {"alpha": draws.alpha, "occupied": draws.retained_occupancy().astype(float)}
    for q in range(C.shape[0]):
        out[f"mean[{q}]"] = means[:, q]
        out[f"density[{q}]"] = dens[:, q]
    return pd.DataFrame(out, index=draws.iterations)


def convergence_table(traces: pd.DataFrame, frac_a: float = 0.1, frac_b: float = 0.5) -> pd.DataFrame:
    rows = []
    for name, col in traces.items():
        x = col.to_numpy(float)
        try:
            z = geweke_z(x, frac_a, frac_b)
        except DiagnosticsError:
            z = np.nan
        try:
            e = ess(x)
        except DiagnosticsError:
            e = np.nan
        rows.append((name, z, e))
    return pd.DataFrame(rows, columns=["functional", "geweke_z", "ess"])


@dataclass
class DiagnosticsReport:
    ppc: PPCResult
    residuals: np.ndarray
    convergence: pd.DataFrame
    occupancy: np.ndarray
    extra: dict = field(default_factory=dict)

    def ks_residuals(self):
        from scipy import stats

        return stats.kstest(self.residuals, "norm")

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.ppc.replicates.to_csv(out / "ppc_replicates.csv", index_label="replicate")
        self.ppc.summary().to_csv(out / "ppc_summary.csv", index=False)
        pd.DataFrame({"observation": np.arange(self.residuals.size),
                      "residual": self.residuals}).to_csv(out / "residuals.csv", index=False)
        self.convergence.to_csv(out / "convergence.csv", index=False)
        pd.DataFrame({"iteration": np.arange(self.occupancy.size),
                      "occupied": self.occupancy}).to_csv(out / "occupancy_trace.csv", index=False)
        ks = self.ks_residuals()
        summary = {"n": int(self.residuals.size), "n_rep": int(len(self.ppc.replicates)),
                   "ppc_flagged": self.ppc.flagged,
                   "residual_ks_statistic": float(ks.statistic),
                   "residual_ks_pvalue": float(ks.pvalue),
                   "max_abs_geweke_z": float(np.nanmax(np.abs(self.convergence["geweke_z"])))
                   if self.convergence["geweke_z"].notna().any() else None,
                   "min_ess": float(np.nanmin(self.convergence["ess"]))
                   if self.convergence["ess"].notna().any() else None,
                   **self.extra}
        (out / "diagnostics.json").write_text(json.dumps(summary, indent=2))
        return out


def default_anchors(draws, data: pd.DataFrame, k: int = 3) -> pd.DataFrame:
    """Rows of ``data`` at the quartiles of the first numeric covariate
    (or its first rows when there is none)."""
    response = draws.manifest.get("response", "y")
    cols = [c for c in data.columns if c != response]
    num = [c for c in cols if pd.api.types.is_numeric_dtype(data[c])
           and c not in draws.manifest.get("categorical", [])]
    if not num:
        return data.iloc[:1]
    order = np.argsort(data[num[0]].to_numpy(), kind="stable")
    pos = np.linspace(0.25, 0.75, k) * (len(order) - 1)
    return data.iloc[order[np.round(pos).astype(int)]]


def diagnose(draws, data: pd.DataFrame, n_rep: int = 500, seed: int = 0,
             anchors: pd.DataFrame | None = None) -> DiagnosticsReport:
    n_rep = min(n_rep, draws.n_draws)
    ppc = posterior_predictive_check(draws, data, n_rep, seed)
    res = quantile_residuals(draws, data)
    anchors = default_anchors(draws, data) if anchors is None else anchors
    conv = convergence_table(trace_functionals(draws, anchors))
    return DiagnosticsReport(ppc, res, conv, draws.occupancy)

"""Predictive functionals of truncated normal mixtures.

The array functions take mixture parameters with components on the last
axis (``weights``, ``means``, ``sds`` broadcastable against each other) and
evaluate the functional for every leading index at once, so the same code
serves a single state or a whole posterior sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .formula import StandardisationRecord, DesignBuilder

_SQRT2PI = np.sqrt(2 * np.pi)


class FunctionalError(ValueError):
    pass


def mixture_density(y, weights, means, sds):
    """``sum_l w_l phi(y | mu_l, sd_l^2)``; ``y`` broadcasts against the batch shape."""
    y = np.asarray(y, dtype=float)[..., None]
    z = (y - means) / sds
    return np.sum(weights * np.exp(-0.5 * z * z) / (sds * _SQRT2PI), axis=-1)


def mixture_cdf(y, weights, means, sds):
    y = np.asarray(y, dtype=float)[..., None]
    return np.sum(weights * ndtr((y - means) / sds), axis=-1)


exceedance = mixture_cdf


def mixture_mean(weights, means, sds=None):
    return np.sum(weights * means, axis=-1)


def mixture_variance(weights, means, sds):
    m = mixture_mean(weights, means)
    return np.sum(weights * (sds ** 2 + means ** 2), axis=-1) - m ** 2


def mixture_quantile(p, weights, means, sds, tol: float = 1e-8, max_doublings: int = 60):
    """Invert the mixture CDF by bracketing and bisection.

    The initial bracket is ``[min(mu - 10 sd), max(mu + 10 sd)]`` over the
    components and is widened geometrically when it does not contain the
    target probability.
    """
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise FunctionalError("probabilities must lie strictly inside (0, 1)")
    weights, means, sds = np.broadcast_arrays(weights, means, sds)
    shape = np.broadcast_shapes(p.shape, weights.shape[:-1])
    lo = np.broadcast_to(np.min(means - 10 * sds, axis=-1), shape).copy()
    hi = np.broadcast_to(np.max(means + 10 * sds, axis=-1), shape).copy()
    p = np.broadcast_to(p, shape)
    for _ in range(max_doublings + 1):
        low_bad = mixture_cdf(lo, weights, means, sds) > p
        high_bad = mixture_cdf(hi, weights, means, sds) < p
        if not (low_bad.any() or high_bad.any()):
            break
        width = hi - lo
        lo = np.where(low_bad, lo - width, lo)
        hi = np.where(high_bad, hi + width, hi)
    else:
        raise FunctionalError(f"quantile bracket not found after {max_doublings} doublings")
    n_iter = int(np.ceil(np.log2(max(np.max(hi - lo), tol) / tol))) + 1
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(mid, weights, means, sds) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


# ------------------------------------------------------ posterior summaries

def conditional_mixture(draws, newdata: pd.DataFrame):
    """Mixture parameters at the rows of ``newdata`` on the original response scale.

    Returns ``(weights, means, sds)`` shaped ``(D, 1, L)``, ``(D, nq, L)``,
    ``(D, 1, L)``.
    """
    C = query_design(draws.manifest, newdata)
    rec = StandardisationRecord.from_dict(draws.manifest["standardisation"])
    mu = rec.y_loc + rec.y_scale * draws.component_means(C)
    sd = rec.y_scale * np.sqrt(draws.sigma2)[:, None, :]
    return draws.weights[:, None, :], mu, sd


def query_design(manifest: dict, newdata: pd.DataFrame) -> np.ndarray:
    """Standardise ``newdata`` and rebuild ``[X | Z]`` rows from the fit manifest."""
    builder = DesignBuilder.from_dict(manifest["builder"])
    rec = StandardisationRecord.from_dict(manifest["standardisation"])
    missing = [v for v in builder.variables if v not in newdata.columns]
    if missing:
        raise FunctionalError(f"query data lacks column(s) {missing}")
    df = newdata.copy()
    for c in builder.categorical:
        if c in df.columns:
            df[c] = df[c].astype(str)
    bad = []
    for v, (lo, hi) in builder.domains().items():
        m, s = rec.columns.get(v, (0.0, 1.0))
        lo_o, hi_o = m + s * lo, m + s * hi
        vals = df[v].to_numpy(dtype=float)
        tol = 1e-10 * (hi_o - lo_o)
        for i in np.flatnonzero(~((vals >= lo_o - tol) & (vals <= hi_o + tol))):
            bad.append(f"row {i}: {v}={vals[i]:.6g} outside the training range "
                       f"[{lo_o:.6g}, {hi_o:.6g}]")
    if bad:
        raise FunctionalError("query data rejected: " + "; ".join(bad[:10])
                              + (f" (and {len(bad) - 10} more)" if len(bad) > 10 else ""))
    std = rec.apply(df)
    try:
        return builder.transform(std).full()
    except ValueError:
        bad = []
        for i in range(len(std)):
            try:
                builder.transform(std.iloc[[i]])
            except ValueError as e:
                bad.append(f"row {i}: {e}")
        raise FunctionalError("query data rejected: " + "; ".join(bad[:10])) from None


@dataclass
class FunctionalRequest:
    name: str
    args: tuple = ()

    @classmethod
    def parse_list(cls, text: str) -> list:
        """``"density,mean,quantile:0.25:0.5:0.75,exceedance:33:35"``."""
        out = []
        for part in (s.strip() for s in text.split(",")):
            if not part:
                continue
            name, *args = part.split(":")
            name = name.strip().lower()
            if name not in ("density", "cdf", "mean", "variance", "quantile", "exceedance"):
                raise FunctionalError(f"unknown functional {name!r}")
            vals = tuple(float(a) for a in args)
            if name in ("quantile", "exceedance", "cdf") and not vals:
                raise FunctionalError(f"{name} needs arguments, e.g. {name}:0.5")
            out.append(cls(name, vals))
        return out


@dataclass
class FunctionalResult:
    """Long table: query, functional, arg, median, lo, hi."""

    table: pd.DataFrame
    level: float = 0.95

    def to_csv(self, path):
        self.table.to_csv(path, index=False)

    def select(self, functional: str, query: int | None = None) -> pd.DataFrame:
        t = self.table[self.table["functional"] == functional]
        return t if query is None else t[t["query"] == query]


def summarise(samples: np.ndarray, level: float = 0.95):
    """Pointwise median and equal-tailed credible bounds over axis 0."""
    a = (1 - level) / 2
    q = np.quantile(samples, [0.5, a, 1 - a], axis=0)
    return q[0], q[1], q[2]


def default_ygrid(weights, means, sds, n: int = 201) -> np.ndarray:
    """Per-query grids spanning centre +/- 4 times the largest mixture sd across draws."""
    m = mixture_mean(weights, means)
    s = np.sqrt(np.maximum(mixture_variance(weights, means, sds), 0))
    centre = np.median(m, axis=0)
    spread = np.max(s, axis=0)
    return np.linspace(centre - 4 * spread, centre + 4 * spread, n, axis=-1)


def posterior_functional(draws, newdata: pd.DataFrame, requests, level: float = 0.95,
                         ygrid=None) -> FunctionalResult:
    """Evaluate every requested functional per retained draw and summarise.

    ``ygrid`` is either an array used for every query or ``None`` for the
    default per-query grid.
    """
    if isinstance(requests, str):
        requests = FunctionalRequest.parse_list(requests)
    w, mu, sd = conditional_mixture(draws, newdata)
    nq = mu.shape[1]
    rows = []

    def emit(name, q, arg, samples):
        med, lo, hi = summarise(samples, level)
        for a, m_, l_, h_ in zip(np.atleast_1d(arg), np.atleast_1d(med), np.atleast_1d(lo), np.atleast_1d(hi)):
            rows.append((q, name, float(a) if a is not None else np.nan, m_, l_, h_))

    for req in requests:
        if req.name in ("mean", "variance"):
            f = mixture_mean if req.name == "mean" else mixture_variance
            vals = f(w, mu, sd)  # (D, nq)
            for q in range(nq):
                emit(req.name, q, [None], vals[:, q:q + 1])
        elif req.name == "density":
            grids = (np.broadcast_to(np.asarray(ygrid, dtype=float), (nq, len(ygrid)))
                     if ygrid is not None else default_ygrid(w, mu, sd))
            for q in range(nq):
                dens = mixture_density(grids[q][None, :], w[:, :, :], mu[:, q:q + 1, :], sd)
                emit("density", q, grids[q], dens)
        elif req.name == "quantile":
            p = np.asarray(req.args)
            for q in range(nq):
                vals = mixture_quantile(p[None, :], w, mu[:, q:q + 1, :], sd)
                emit("quantile", q, p, vals)
        elif req.name in ("exceedance", "cdf"):
            ys = np.asarray(req.args)
            for q in range(nq):
                vals = mixture_cdf(ys[None, :], w, mu[:, q:q + 1, :], sd)
                emit("exceedance", q, ys, vals)
    table = pd.DataFrame(rows, columns=["query", "functional", "arg", "median", "lo", "hi"])
    return FunctionalResult(table, level)


def roc_from_mixtures(t, mix_d, mix_nd):
    """Per-draw ROC curves ``1 - F_D(F_nonD^{-1}(1 - t))`` on the grid ``t``.

    ``mix_d`` and ``mix_nd`` are ``(weights, means, sds)`` triples with a
    leading draw axis and a single query; returns ``(D, len(t))``.
    """
    t = np.asarray(t, dtype=float)
    inner = (t > 0) & (t < 1)
    D = mix_d[1].shape[0]
    out = np.empty((D, len(t)))
    out[:, t <= 0] = 0.0
    out[:, t >= 1] = 1.0
    if inner.any():
        w, m, s = (np.asarray(a)[:, None, :] for a in mix_nd)
        thr = mixture_quantile(1 - t[inner][None, :], w, m, s)
        wd, md, sdd = (np.asarray(a)[:, None, :] for a in mix_d)
        out[:, inner] = 1 - mixture_cdf(thr, wd, md, sdd)
    return out


def auc_from_roc(t, roc):
    t = np.asarray(t, dtype=float)
    return np.sum(0.5 * (roc[..., 1:] + roc[..., :-1]) * np.diff(t), axis=-1)


def roc_curve(draws_d, draws_nd, newdata: pd.DataFrame, t_grid=None, level: float = 0.95):
    """Covariate-specific ROC curves and AUCs at each row of ``newdata``.

    Draws of the two independent fits are paired by index; the longer sample
    is truncated. Returns ``(roc_result, auc_result)``.
    """
    if draws_d.n_draws == 0 or draws_nd.n_draws == 0:
        raise FunctionalError("ROC analysis needs non-empty posterior samples")
    t = np.linspace(0, 1, 201) if t_grid is None else np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t) <= 0) or t[0] < 0 or t[-1] > 1:
        raise FunctionalError("t grid must be increasing inside [0, 1]")
    D = min(draws_d.n_draws, draws_nd.n_draws)
    wd, md, sd_d = conditional_mixture(draws_d, newdata)
    wn, mn, sd_n = conditional_mixture(draws_nd, newdata)
    roc_rows, auc_rows = [], []
    for q in range(md.shape[1]):
        roc = roc_from_mixtures(
            t,
            (wd[:D, 0], md[:D, q], sd_d[:D, 0]),
            (wn[:D, 0], mn[:D, q], sd_n[:D, 0]),
        )
        med, lo, hi = summarise(roc, level)
        roc_rows += [(q, "roc", ti, a, b, c) for ti, a, b, c in zip(t, med, lo, hi)]
        auc = auc_from_roc(t, roc)
        a, b, c = summarise(auc, level)
        auc_rows.append((q, "auc", np.nan, a, b, c))
    cols = ["query", "functional", "arg", "median", "lo", "hi"]
    return (FunctionalResult(pd.DataFrame(roc_rows, columns=cols), level),
            FunctionalResult(pd.DataFrame(auc_rows, columns=cols), level))

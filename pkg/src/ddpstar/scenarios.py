"""Simulation scenarios I-VIII and their exact conditional distributions.

Every scenario is a covariate-dependent mixture of normal, skew-normal and
shifted-t kernels; in normal kernels the second parameter is a variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd
from scipy.special import ndtri

from . import distributions as dist

SN_OMEGA, SN_ALPHA = 0.25, 2.0
T_SIGMA, T_NU = 0.25, 5.0


class ScenarioError(ValueError):
    pass


# ------------------------------------------------------------ kernels

def _normal(mean, var):
    return ("normal", mean, var)


def _sn(xi):
    return ("sn", xi)


def _t(mu):
    return ("t", mu)


def _kernel_pdf(k, y):
    if k[0] == "normal":
        s = np.sqrt(k[2])
        return np.exp(-0.5 * ((y - k[1]) / s) ** 2) / (s * np.sqrt(2 * np.pi))
    if k[0] == "sn":
        return dist.skew_normal_pdf(y, k[1], SN_OMEGA, SN_ALPHA)
    return dist.shifted_t_pdf(y, k[1], T_SIGMA, T_NU)


def _kernel_cdf(k, y):
    if k[0] == "normal":
        from scipy.special import ndtr
        return ndtr((y - k[1]) / np.sqrt(k[2]))
    if k[0] == "sn":
        return dist.skew_normal_cdf(y, k[1], SN_OMEGA, SN_ALPHA)
    return dist.shifted_t_cdf(y, k[1], T_SIGMA, T_NU)


def _kernel_moments(k):
    if k[0] == "normal":
        return k[1], k[2]
    if k[0] == "sn":
        return dist.skew_normal_moments(k[1], SN_OMEGA, SN_ALPHA)
    return dist.shifted_t_moments(k[1], T_SIGMA, T_NU)


def _kernel_rng(k, rng, size):
    if k[0] == "normal":
        return k[1] + np.sqrt(k[2]) * rng.standard_normal(size)
    if k[0] == "sn":
        return dist.skew_normal_rng(rng, k[1], SN_OMEGA, SN_ALPHA, size)
    return dist.shifted_t_rng(rng, k[1], T_SIGMA, T_NU, size)


# ------------------------------------------------------ mean functions

def g11(x1):
    return (x1 - 0.5) ** 2


def g12(x2):
    return (x2 - 0.5) ** 2


def g21(x1):
    return np.exp(x1) * np.sin(13 * (x1 - 0.6) ** 2)


def g22(x2):
    return np.exp(-x2) * np.sin(7 * x2)


def g1(x1, x2):
    return np.cos(2 * np.pi * np.sqrt((x1 - 0.5) ** 2 + (x2 - 0.5) ** 2))


def g2(x1, x2):
    return 1.9 * np.exp(x1) * np.sin(13 * (x1 - 0.6) ** 2) * np.exp(-x2) * np.sin(7 * x2)


def iv_mean(x):
    x = np.asarray(x, dtype=float)
    return np.where(x <= 2, 0.0, np.where(x <= 5, 2 * x - 4, 6.0))


def iv_variance(x):
    x = np.asarray(x, dtype=float)
    return np.where(x <= 2, 0.2 ** 2, np.where(x <= 5, 0.05 ** 2, (x - 5) ** 2 / 15 + 0.01))


# ------------------------------------------------------------ scenarios

@dataclass(frozen=True)
class Scenario:
    id: str
    covariates: tuple
    domain: tuple
    # x (n, d) -> list of (weight array, kernel)
    components: Callable

    def _x(self, point) -> np.ndarray:
        x = np.atleast_2d(np.asarray(point, dtype=float))
        if x.shape[-1] != len(self.covariates):
            x = x.reshape(-1, len(self.covariates))
        lo, hi = self.domain
        if np.any(x < lo) or np.any(x > hi):
            raise ScenarioError(f"covariate point {point} outside the scenario domain [{lo}, {hi}]")
        return x

    def density(self, y, point):
        y = np.asarray(y, dtype=float)
        return sum(w * _kernel_pdf(k, y) for w, k in self.components(self._x(point)))

    def cdf(self, y, point):
        y = np.asarray(y, dtype=float)
        return sum(w * _kernel_cdf(k, y) for w, k in self.components(self._x(point)))

    def mean(self, point):
        return sum(w * _kernel_moments(k)[0] for w, k in self.components(self._x(point)))

    def variance(self, point):
        comps = self.components(self._x(point))
        m = sum(w * _kernel_moments(k)[0] for w, k in comps)
        second = sum(w * (_kernel_moments(k)[1] + _kernel_moments(k)[0] ** 2) for w, k in comps)
        return second - m ** 2

    def quantile(self, p, point, tol: float = 1e-10):
        """Quantile of the conditional law at a single covariate point, by bisection."""
        x = self._x(point)[:1]
        m = float(np.squeeze(self.mean(x)))
        s = float(np.sqrt(np.squeeze(self.variance(x))))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        lo = np.full(p.shape, m - 20 * s - 1)
        hi = np.full(p.shape, m + 20 * s + 1)
        while np.any(hi - lo > tol):
            mid = 0.5 * (lo + hi)
            below = np.ravel(self.cdf(mid, x)) < p
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def sample_conditional(self, x, rng) -> np.ndarray:
        x = self._x(x)
        comps = self.components(x)
        n = x.shape[0]
        W = np.column_stack([np.broadcast_to(w, (n,)) for w, _ in comps])
        pick = dist.sample_categorical(rng, W)
        y = np.empty(n)
        for j, (_, k) in enumerate(comps):
            idx = pick == j
            if idx.any():
                kj = tuple(np.broadcast_to(a, (n,))[idx] if not isinstance(a, str) else a for a in k)
                y[idx] = _kernel_rng(kj, rng, int(idx.sum()))
        return y


def _one(x):
    return x[:, 0]


SCENARIOS = {
    "I": Scenario("I", ("x",), (0.0, 1.0), lambda x: [
        (1.0, _normal(_one(x) - 4 * _one(x) ** 3, (1 + _one(x)) ** 2))]),
    "II": Scenario("II", ("x",), (0.0, 1.0), lambda x: [
        (0.5, _sn(_one(x) ** 2)), (0.5, _t(np.sin(np.pi * _one(x))))]),
    "III": Scenario("III", ("x",), (0.0, 1.0), lambda x: [
        (np.exp(-2 * _one(x)), _normal(_one(x), 0.01)),
        (1 - np.exp(-2 * _one(x)), _normal(_one(x) ** 4, 0.04))]),
    "IV": Scenario("IV", ("x",), (-2.0, 10.0), lambda x: [
        (1.0, _normal(iv_mean(_one(x)), iv_variance(_one(x))))]),
    "V": Scenario("V", ("x1", "x2"), (0.0, 1.0), lambda x: [
        (0.5, _normal(g11(x[:, 0]) + g12(x[:, 1]), 0.25 ** 2)),
        (0.5, _normal(g21(x[:, 0]) + g22(x[:, 1]), 0.25 ** 2))]),
    "VI": Scenario("VI", ("x1", "x2"), (0.0, 1.0), lambda x: [
        (0.5, _sn(g11(x[:, 0]) + g12(x[:, 1]))),
        (0.5, _t(g21(x[:, 0]) + g22(x[:, 1])))]),
    "VII": Scenario("VII", ("x1", "x2"), (0.0, 1.0), lambda x: [
        (0.5, _normal(g1(x[:, 0], x[:, 1]), 0.25 ** 2)),
        (0.5, _normal(g2(x[:, 0], x[:, 1]), 0.25 ** 2))]),
    "VIII": Scenario("VIII", ("x1", "x2"), (0.0, 1.0), lambda x: [
        (0.5, _sn(g1(x[:, 0], x[:, 1]))),
        (0.5, _t(g2(x[:, 0], x[:, 1])))]),
}

_ROMAN = {str(i): r for i, r in enumerate(SCENARIOS, start=1)}


def get_scenario(scenario) -> Scenario:
    key = str(scenario).strip().upper()
    key = _ROMAN.get(key, key)
    if key not in SCENARIOS:
        raise ScenarioError(f"unknown scenario {scenario!r}; expected one of {list(SCENARIOS)}")
    return SCENARIOS[key]


def generate(scenario, n: int, seed: int = 0, stream: int = 0) -> pd.DataFrame:
    """Simulate ``n`` observations; columns are ``y`` followed by the covariates."""
    sc = get_scenario(scenario)
    if n < 1:
        raise ScenarioError("n must be at least 1")
    rng = dist.make_rng(seed, stream)
    lo, hi = sc.domain
    x = rng.uniform(lo, hi, size=(n, len(sc.covariates)))
    y = sc.sample_conditional(x, rng)
    df = pd.DataFrame(x, columns=list(sc.covariates))
    df.insert(0, "y", y)
    return df


def truth_functionals(scenario, point, functional: str, arg=None):
    """True conditional functional at one covariate point.

    ``functional`` is ``density`` (``arg`` = y grid), ``cdf`` (``arg`` = y),
    ``mean``, ``variance`` or ``quantile`` (``arg`` = probabilities).
    """
    sc = get_scenario(scenario)
    x = sc._x(point)
    if functional == "density":
        return np.ravel(sc.density(np.asarray(arg, dtype=float), x[:1]))
    if functional == "cdf":
        return np.ravel(sc.cdf(np.asarray(arg, dtype=float), x[:1]))
    if functional == "mean":
        return float(np.squeeze(sc.mean(x[:1])))
    if functional == "variance":
        return float(np.squeeze(sc.variance(x[:1])))
    if functional == "quantile":
        return sc.quantile(arg, x[:1])
    raise ScenarioError(f"unknown functional {functional!r}")


def normal_quantile(p):
    return ndtri(p)

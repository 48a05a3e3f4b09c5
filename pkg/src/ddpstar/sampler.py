"""Truncated blocked Gibbs sampler for the single-weights DDP mixture of
normal structured additive regressions.

Component ``l`` carries a coefficient vector ``theta_l = (beta_l, gamma_l1,
..., gamma_lR)`` against the full design ``[X | Z_1 | ... | Z_R]``, a variance
``sigma2_l`` and one smoothing variance ``tau2_lr`` per penalised block.
Components are indexed from 0 in code.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import distributions as dist
from .formula import DesignMatrices

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-12
TAU2_FLOOR = 1e-12


class SamplerError(RuntimeError):
    pass


class OccupancyWarning(UserWarning):
    """Occupied components hit the truncation level too often."""


@dataclass
class Hyperparameters:
    m0: np.ndarray
    H0: np.ndarray
    nu: float
    Psi: np.ndarray
    a_sigma2: float = 2.0
    b_sigma2: float = 0.5
    a_tau2: float = 1.0
    b_tau2: float = 0.05
    a_alpha: float = 2.0
    b_alpha: float = 2.0
    L: int = 20

    @classmethod
    def default(cls, Q: int, **overrides) -> "Hyperparameters":
        hp = cls(np.zeros(Q), 10.0 * np.eye(Q), Q + 2, np.eye(Q))
        return hp.updated(**overrides) if overrides else hp

    def updated(self, **overrides) -> "Hyperparameters":
        clean = {}
        for k, v in overrides.items():
            if v is None:
                continue
            if k in ("m0", "H0", "Psi"):
                v = np.asarray(v, dtype=float)
            clean[k] = v
        out = replace(self, **clean)
        out.validate()
        return out

    @property
    def Q(self) -> int:
        return len(self.m0)

    def validate(self):
        Q = self.Q
        if self.H0.shape != (Q, Q) or self.Psi.shape != (Q, Q):
            raise ValueError(f"H0 and Psi must be {Q}x{Q}")
        if self.nu < Q:
            raise ValueError(f"nu={self.nu} must be at least Q={Q}")
        for name in ("a_sigma2", "b_sigma2", "a_tau2", "b_tau2", "a_alpha", "b_alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.L) < 1:
            raise ValueError("L must be at least 1")
        dist.cholesky_lower(self.H0, "H0")
        dist.cholesky_lower(self.Psi, "Psi")

    def to_dict(self) -> dict:
        return {"m0": self.m0.tolist(), "H0": self.H0.tolist(), "nu": self.nu,
                "Psi": self.Psi.tolist(), "a_sigma2": self.a_sigma2, "b_sigma2": self.b_sigma2,
                "a_tau2": self.a_tau2, "b_tau2": self.b_tau2, "a_alpha": self.a_alpha,
                "b_alpha": self.b_alpha, "L": int(self.L)}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        d = dict(d)
        for k in ("m0", "H0", "Psi"):
            d[k] = np.asarray(d[k], dtype=float)
        return cls(**d)


@dataclass
class SamplerOptions:
    fix_centring: bool = False
    fix_alpha: float | None = None
    fix_tau2: float | None = None
    keep_allocations: bool = False


class ModelData:
    """Design and response in the layout the sampler works with."""

    def __init__(self, design: DesignMatrices, y, hyper: Hyperparameters):
        self.C = np.ascontiguousarray(design.full(), dtype=float)
        self.y = np.asarray(y, dtype=float)
        if self.C.shape[0] != self.y.shape[0]:
            raise ValueError("design and response lengths differ")
        self.n = self.C.shape[0]
        self.Q = design.Q
        self.widths = list(design.widths)
        self.R = len(self.widths)
        self.P = self.Q + sum(self.widths)
        self.offsets = np.concatenate([[0], np.cumsum(self.widths)]).astype(int)
        self.Kdiag = np.concatenate(design.K) if design.K else np.zeros(0)
        if np.any(self.Kdiag <= 0):
            raise ValueError("penalised block precisions must be positive")
        self.block_of = np.repeat(np.arange(self.R), self.widths)
        self.ranks = np.array(design.ranks, dtype=float)
        self.tau_a = np.array([p[0] if p else hyper.a_tau2 for p in design.tau_priors])
        self.tau_b = np.array([p[1] if p else hyper.b_tau2 for p in design.tau_priors])
        if hyper.Q != self.Q:
            raise ValueError(f"hyperparameters are for Q={hyper.Q}, design has Q={self.Q}")


@dataclass
class GibbsState:
    z: np.ndarray
    eta: np.ndarray
    log1m_eta: np.ndarray
    weights: np.ndarray
    coef: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    alpha: float
    m_beta: np.ndarray
    H_beta_inv: np.ndarray

    @property
    def L(self) -> int:
        return len(self.weights)

    def counts(self) -> np.ndarray:
        return np.bincount(self.z, minlength=self.L)

    def copy(self) -> "GibbsState":
        return GibbsState(self.z.copy(), self.eta.copy(), self.log1m_eta.copy(),
                          self.weights.copy(), self.coef.copy(), self.sigma2.copy(),
                          self.tau2.copy(), float(self.alpha), self.m_beta.copy(),
                          self.H_beta_inv.copy())


def stick_weights(eta, log1m_eta=None) -> np.ndarray:
    """``w_l = eta_l * prod_{m<l} (1 - eta_m)``."""
    eta = np.asarray(eta, dtype=float)
    if log1m_eta is None:
        with np.errstate(divide="ignore"):
            log1m_eta = np.log1p(-eta)
    prefix = np.concatenate([[0.0], np.cumsum(log1m_eta[:-1])])
    return eta * np.exp(prefix)


def init_state(data: ModelData, hyper: Hyperparameters, rng) -> GibbsState:
    if data.n == 0:
        raise SamplerError("cannot initialise a chain on an empty dataset")
    L = int(hyper.L)
    z = rng.integers(0, L, size=data.n)
    alpha0 = hyper.a_alpha / hyper.b_alpha
    eta = np.ones(L)
    log1m = np.full(L, -np.inf)
    if L > 1:
        eta[:-1], log1m[:-1] = dist.sample_beta_with_complement(rng, np.ones(L - 1), alpha0)
    m_beta = hyper.m0.copy()
    H_inv = hyper.Psi.copy()
    sigma2 = dist.sample_inverse_gamma(rng, hyper.a_sigma2, hyper.b_sigma2, size=L)
    tau2 = dist.sample_inverse_gamma(rng, data.tau_a, data.tau_b, size=(L, data.R)) if data.R else np.zeros((L, 0))
    state = GibbsState(z, eta, log1m, stick_weights(eta, log1m), np.zeros((L, data.P)),
                       sigma2, tau2, alpha0, m_beta, H_inv)
    _draw_from_prior(state, data, np.arange(L), rng)
    return state


def _draw_from_prior(state, data, comps, rng):
    if len(comps) == 0:
        return
    chol = dist.cholesky_lower(state.H_beta_inv, "centring precision")
    eps = rng.standard_normal((data.Q, len(comps)))
    state.coef[comps, :data.Q] = state.m_beta + solve_triangular(chol, eps, lower=True, trans="T", check_finite=False).T
    if data.R:
        sd = np.sqrt(state.tau2[comps][:, data.block_of] / data.Kdiag)
        state.coef[comps, data.Q:] = sd * rng.standard_normal(sd.shape)


def component_means(coef, C) -> np.ndarray:
    """``(n, L)`` matrix of component means at the design rows ``C``."""
    return C @ coef.T


def allocation_probabilities(state: GibbsState, data: ModelData) -> np.ndarray:
    mu = component_means(state.coef, data.C)
    with np.errstate(divide="ignore"):
        logp = np.log(state.weights) + dist.log_normal_pdf(data.y[:, None], mu, state.sigma2)
    mx = logp.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        bad = np.flatnonzero(~np.isfinite(mx[:, 0]))
        raise SamplerError(f"allocation likelihoods vanish for observation(s) {bad[:5].tolist()}")
    p = np.exp(logp - mx)
    return p / p.sum(axis=1, keepdims=True)


def update_allocations(state: GibbsState, data: ModelData, rng) -> GibbsState:
    if data.n:
        p = allocation_probabilities(state, data)
        state.z = dist.sample_categorical(rng, p)
    return state


def update_sticks(state: GibbsState, rng) -> GibbsState:
    L = state.L
    counts = state.counts()
    tail = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0]])
    if L > 1:
        state.eta[:-1], state.log1m_eta[:-1] = dist.sample_beta_with_complement(
            rng, 1.0 + counts[:-1], state.alpha + tail[:-1])
    state.eta[L - 1] = 1.0
    state.log1m_eta[L - 1] = -np.inf
    state.weights = stick_weights(state.eta, state.log1m_eta)
    return state


def alpha_conditional(state: GibbsState, hyper: Hyperparameters) -> tuple:
    """Shape and rate of the Gamma full conditional of the DP precision."""
    L = state.L
    lm = state.log1m_eta[:L - 1]
    if not np.all(np.isfinite(lm)):
        raise SamplerError("stick fraction equal to 1 before the last component")
    return hyper.a_alpha + L - 1, hyper.b_alpha - lm.sum()


def update_alpha(state: GibbsState, hyper: Hyperparameters, rng) -> GibbsState:
    shape, rate = alpha_conditional(state, hyper)
    state.alpha = float(dist.sample_gamma(rng, shape, rate))
    return state


def coefficient_precision(state, data, l, rows) -> tuple:
    """Precision and linear term of the full conditional of ``theta_l``."""
    Cl = data.C[rows]
    s2 = state.sigma2[l]
    M = Cl.T @ Cl / s2
    b = Cl.T @ data.y[rows] / s2
    Q = data.Q
    M[:Q, :Q] += state.H_beta_inv
    b[:Q] += state.H_beta_inv @ state.m_beta
    if data.R:
        idx = np.arange(Q, data.P)
        M[idx, idx] += data.Kdiag / state.tau2[l, data.block_of]
    return M, b


def update_component_coefficients(state: GibbsState, data: ModelData, rng) -> GibbsState:
    order = np.argsort(state.z, kind="stable")
    counts = state.counts()
    starts = np.concatenate([[0], np.cumsum(counts)])
    empty = []
    for l in range(state.L):
        if counts[l] == 0:
            empty.append(l)
            continue
        rows = order[starts[l]:starts[l + 1]]
        M, b = coefficient_precision(state, data, l, rows)
        try:
            state.coef[l] = dist.sample_mvn_canonical(rng, M, b)
        except dist.NotPositiveDefiniteError as e:
            d = np.linalg.eigvalsh(M)
            raise SamplerError(
                f"coefficient precision of component {l} not positive definite "
                f"(leading minor {e.minor}, eigenvalue range [{d[0]:.3g}, {d[-1]:.3g}])"
            ) from e
    _draw_from_prior(state, data, np.asarray(empty, dtype=int), rng)
    return state


def _fitted(state, data):
    if data.n == 0:
        return np.zeros(0)
    return np.einsum("ij,ij->i", data.C, state.coef[state.z])


def update_sigma2(state: GibbsState, data: ModelData, hyper: Hyperparameters, rng) -> GibbsState:
    resid = data.y - _fitted(state, data)
    ssr = np.bincount(state.z, weights=resid ** 2, minlength=state.L)
    counts = state.counts()
    s2 = dist.sample_inverse_gamma(rng, hyper.a_sigma2 + counts / 2, hyper.b_sigma2 + ssr / 2)
    state.sigma2 = np.maximum(s2, SIGMA2_FLOOR)
    return state


def update_tau2(state: GibbsState, data: ModelData, rng, fixed: float | None = None) -> GibbsState:
    if data.R == 0:
        return state
    if fixed is not None:
        state.tau2[:] = fixed
        return state
    g = state.coef[:, data.Q:]
    quad = np.add.reduceat(g ** 2 * data.Kdiag, data.offsets[:-1], axis=1)
    t2 = dist.sample_inverse_gamma(rng, data.tau_a + data.ranks / 2, data.tau_b + quad / 2)
    state.tau2 = np.maximum(t2, TAU2_FLOOR)
    return state


def update_centring_hyper(state: GibbsState, data: ModelData, hyper: Hyperparameters, rng) -> GibbsState:
    L = state.L
    beta = state.coef[:, :data.Q]
    H0_inv = np.linalg.inv(hyper.H0)
    prec = H0_inv + L * state.H_beta_inv
    lin = H0_inv @ hyper.m0 + state.H_beta_inv @ beta.sum(axis=0)
    state.m_beta = dist.sample_mvn_canonical(rng, prec, lin)
    dev = beta - state.m_beta
    S = hyper.nu * hyper.Psi + dev.T @ dev
    cS = dist.cholesky_lower(S, "Wishart scale")
    scale = cho_solve((cS, True), np.eye(data.Q))
    state.H_beta_inv = dist.sample_wishart(rng, hyper.nu + L, (scale + scale.T) / 2)
    return state


def gibbs_sweep(state, data, hyper, rng, options: SamplerOptions | None = None) -> GibbsState:
    """One full scan in the fixed order allocations, sticks, alpha,
    coefficients, sigma2, tau2, centring hyperparameters."""
    options = options or SamplerOptions()
    update_allocations(state, data, rng)
    update_sticks(state, rng)
    if options.fix_alpha is None:
        update_alpha(state, hyper, rng)
    else:
        state.alpha = float(options.fix_alpha)
    update_component_coefficients(state, data, rng)
    update_sigma2(state, data, hyper, rng)
    update_tau2(state, data, rng, fixed=options.fix_tau2)
    if not options.fix_centring:
        update_centring_hyper(state, data, hyper, rng)
    return state


@dataclass
class PosteriorDraws:
    """Retained sweeps stacked along a leading draw axis."""

    weights: np.ndarray      # (D, L)
    eta: np.ndarray          # (D, L)
    coef: np.ndarray         # (D, L, P)
    sigma2: np.ndarray       # (D, L)
    tau2: np.ndarray         # (D, L, R)
    alpha: np.ndarray        # (D,)
    m_beta: np.ndarray       # (D, Q)
    H_beta_inv: np.ndarray   # (D, Q, Q)
    occupancy: np.ndarray    # (iters,) occupied components at every sweep
    iterations: np.ndarray   # (D,) sweep index of each retained draw
    manifest: dict = field(default_factory=dict)
    z: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.weights.shape[0]

    @property
    def L(self) -> int:
        return self.weights.shape[1]

    def component_means(self, C) -> np.ndarray:
        """``(D, n, L)`` component means at design rows ``C`` (standardised scale)."""
        return np.einsum("np,dlp->dnl", np.atleast_2d(C), self.coef)

    def retained_occupancy(self) -> np.ndarray:
        return self.occupancy[self.iterations]

    def state(self, d: int) -> GibbsState:
        L = self.L
        with np.errstate(divide="ignore"):
            log1m = np.log1p(-self.eta[d])
        return GibbsState(self.z[d].copy() if self.z is not None else np.zeros(0, int),
                          self.eta[d].copy(), log1m, self.weights[d].copy(),
                          self.coef[d].copy(), self.sigma2[d].copy(), self.tau2[d].copy(),
                          float(self.alpha[d]), self.m_beta[d].copy(),
                          self.H_beta_inv[d].copy())

    def subset(self, idx) -> "PosteriorDraws":
        idx = np.asarray(idx)
        return replace(self, weights=self.weights[idx], eta=self.eta[idx], coef=self.coef[idx],
                       sigma2=self.sigma2[idx], tau2=self.tau2[idx], alpha=self.alpha[idx],
                       m_beta=self.m_beta[idx], H_beta_inv=self.H_beta_inv[idx],
                       iterations=self.iterations[idx],
                       z=self.z[idx] if self.z is not None else None)


def run_chain(design: DesignMatrices, y, hyper: Hyperparameters, iters: int, burnin: int,
              thin: int = 1, seed: int = 0, stream: int = 0,
              options: SamplerOptions | None = None, progress=None) -> PosteriorDraws:
    """Run ``iters`` sweeps (burn-in included) and keep every ``thin``-th
    post-burn-in state."""
    if not iters > burnin >= 0:
        raise ValueError(f"need iters > burnin >= 0, got iters={iters}, burnin={burnin}")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    options = options or SamplerOptions()
    hyper.validate()
    data = ModelData(design, y, hyper)
    rng = dist.make_rng(seed, stream)
    state = init_state(data, hyper, rng)
    keep = np.arange(burnin + thin - 1, iters, thin)
    D, L = len(keep), int(hyper.L)
    out = {
        "weights": np.empty((D, L)), "eta": np.empty((D, L)),
        "coef": np.empty((D, L, data.P)), "sigma2": np.empty((D, L)),
        "tau2": np.empty((D, L, data.R)), "alpha": np.empty(D),
        "m_beta": np.empty((D, data.Q)), "H_beta_inv": np.empty((D, data.Q, data.Q)),
    }
    zs = np.empty((D, data.n), dtype=int) if options.keep_allocations else None
    occupancy = np.empty(iters, dtype=int)
    t0 = time.perf_counter()
    d = 0
    for it in range(iters):
        gibbs_sweep(state, data, hyper, rng, options)
        occupancy[it] = np.count_nonzero(state.counts())
        if d < D and it == keep[d]:
            for k in out:
                out[k][d] = getattr(state, k)
            if zs is not None:
                zs[d] = state.z
            d += 1
        if progress is not None:
            progress(it)
    elapsed = time.perf_counter() - t0
    draws = PosteriorDraws(occupancy=occupancy, iterations=keep, z=zs, **out)
    full_frac = float(np.mean(draws.retained_occupancy() >= L)) if D else 0.0
    warn = []
    if full_frac > 0.05:
        msg = (f"all {L} components occupied in {100 * full_frac:.1f}% of retained "
               f"iterations; refit with a larger truncation level L")
        warnings.warn(msg, OccupancyWarning, stacklevel=2)
        warn.append(msg)
    draws.manifest = {
        "hyper": hyper.to_dict(),
        "meta": {"iters": iters, "burnin": burnin, "thin": thin, "seed": int(seed),
                 "stream": int(stream), "n": data.n, "Q": data.Q, "widths": data.widths,
                 "tau_a": data.tau_a.tolist(), "tau_b": data.tau_b.tolist(),
                 "x_labels": list(design.x_labels), "z_labels": list(design.z_labels),
                 "elapsed_seconds": elapsed, "warnings": warn},
    }
    log.info("chain finished: %d sweeps in %.1fs, mean occupancy %.2f", iters, elapsed,
             occupancy[keep].mean() if D else float("nan"))
    return draws


def truncation_error_mean(alpha, L) -> float:
    """``E(U_L | alpha) = (alpha / (alpha + 1))^L``: expected mass beyond ``L``."""
    return (alpha / (alpha + 1.0)) ** L


def expected_occupied(alpha, n) -> tuple:
    """Approximate mean and variance of the number of occupied components."""
    lg = np.log((alpha + n) / alpha)
    return alpha * lg, alpha * (lg - 1.0)

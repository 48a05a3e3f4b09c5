"""B-spline bases, difference penalties and the mixed-model reparametrisation
of univariate and tensor-product P-splines.

All constructors are pure functions; the returned objects are frozen and can
be shared between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BasisError(ValueError):
    """Invalid basis construction or evaluation request."""


@dataclass(frozen=True)
class KnotVector:
    degree: int
    knots: np.ndarray
    domain_lo: float
    domain_hi: float

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def nseg(self) -> int:
        return self.n_basis - self.degree

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "knots": [float(k) for k in self.knots],
            "domain_lo": float(self.domain_lo),
            "domain_hi": float(self.domain_hi),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnotVector":
        return cls(int(d["degree"]), np.asarray(d["knots"], dtype=float),
                   float(d["domain_lo"]), float(d["domain_hi"]))


def make_knots(lo: float, hi: float, J: int, degree: int = 3) -> KnotVector:
    """Equidistant knots giving ``J`` B-splines of the given degree on [lo, hi].

    The interval is cut into ``J - degree`` segments and ``degree`` extra knots
    are placed beyond each end at the same spacing.
    """
    if degree < 0:
        raise BasisError(f"degree must be non-negative, got {degree}")
    if J < degree + 1 or J < 2:
        raise BasisError(f"J={J} is too small for degree {degree} (need J >= {max(degree + 1, 2)})")
    lo, hi = float(lo), float(hi)
    if not np.isfinite(lo) or not np.isfinite(hi) or hi <= lo:
        raise BasisError(f"degenerate interval: lo={lo}, hi={hi}")
    nseg = J - degree
    dx = (hi - lo) / nseg
    knots = lo + dx * np.arange(-degree, nseg + degree + 1)
    # exact interior boundaries avoid rounding at the domain ends
    knots[degree] = lo
    knots[degree + nseg] = hi
    return KnotVector(degree, knots, lo, hi)


def _check_domain(values: np.ndarray, kv: KnotVector) -> np.ndarray:
    tol = 1e-10 * (kv.domain_hi - kv.domain_lo)
    bad = (values < kv.domain_lo - tol) | (values > kv.domain_hi + tol) | ~np.isfinite(values)
    if np.any(bad):
        v = values[np.argmax(bad)]
        raise BasisError(
            f"value {float(v):.6g} outside the basis domain "
            f"[{kv.domain_lo:.6g}, {kv.domain_hi:.6g}]"
        )
    return np.clip(values, kv.domain_lo, kv.domain_hi)


def bspline_design(values, kv: KnotVector) -> np.ndarray:
    """Evaluate all B-splines at ``values`` with the Cox-de Boor recurrence.

    Returns an ``(n, J)`` array. Values outside ``[domain_lo, domain_hi]``
    raise ``BasisError``; the basis is never extrapolated.
    """
    v = _check_domain(np.atleast_1d(np.asarray(values, dtype=float)), kv)
    t = kv.knots
    n_int = len(t) - 1
    # degree-0: indicator of [t_i, t_{i+1}); domain_hi lies inside the padded grid
    idx = np.searchsorted(t, v, side="right") - 1
    idx = np.clip(idx, 0, n_int - 1)
    B = np.zeros((len(v), n_int))
    B[np.arange(len(v)), idx] = 1.0
    for k in range(1, kv.degree + 1):
        m = n_int - k
        left = (v[:, None] - t[None, :m]) / (t[k:k + m] - t[:m])[None, :]
        right = (t[None, k + 1:k + 1 + m] - v[:, None]) / (t[k + 1:k + 1 + m] - t[1:1 + m])[None, :]
        B = left * B[:, :m] + right * B[:, 1:m + 1]
    return B


def diff_matrix(J: int, order: int = 2) -> np.ndarray:
    if order < 1 or J <= order:
        raise BasisError(f"need J > order >= 1, got J={J}, order={order}")
    return np.diff(np.eye(J), n=order, axis=0)


def diff_penalty(J: int, order: int = 2) -> np.ndarray:
    """``D.T @ D`` for the ``order``-th difference matrix ``D`` of shape (J - order, J)."""
    D = diff_matrix(J, order)
    return D.T @ D


@dataclass(frozen=True)
class PenaltyDecomposition:
    U0: np.ndarray
    Uplus: np.ndarray
    LambdaPlus: np.ndarray
    rank: int

    @property
    def U(self) -> np.ndarray:
        return np.hstack([self.U0, self.Uplus])

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.U0.shape[1]), self.LambdaPlus])


def decompose_penalty(P, tol: float = 1e-10, order: int = 2) -> PenaltyDecomposition:
    """Split a difference penalty into nullspace and range eigenvectors.

    Eigenvalues below ``tol * max_eigenvalue`` count as zero. The nullspace
    dimension must equal ``order``; anything else means the penalty is
    degenerate or badly conditioned and ``BasisError`` is raised.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise BasisError(f"penalty must be square, got shape {P.shape}")
    J = P.shape[0]
    lam, U = np.linalg.eigh((P + P.T) / 2)
    lam_max = lam[-1]
    if lam_max <= 0:
        raise BasisError(f"penalty has nullspace dimension {J}, expected {order}")
    zero = lam < tol * lam_max
    n_null = int(zero.sum())
    if n_null != order:
        raise BasisError(f"penalty has nullspace dimension {n_null}, expected {order}")
    # eigh sorts ascending so the null eigenvectors come first
    U0 = U[:, :n_null]
    Uplus = U[:, n_null:]
    # fix eigenvector signs so decompositions are reproducible
    signs = np.sign(Uplus[np.argmax(np.abs(Uplus), axis=0), np.arange(Uplus.shape[1])])
    Uplus = Uplus * signs
    return PenaltyDecomposition(U0, Uplus, lam[n_null:].copy(), J - n_null)


@dataclass(frozen=True)
class SmoothBlocks:
    """Mixed-model form of a smooth: unpenalised columns plus penalised blocks.

    ``prior_precisions`` hold the diagonals of the unit-variance precision of
    each z-block (every precision built here is diagonal).
    """

    x_cols: np.ndarray
    z_blocks: list
    prior_precisions: list
    labels: list
    x_labels: list = field(default_factory=list)

    @property
    def widths(self) -> list:
        return [z.shape[1] for z in self.z_blocks]


@dataclass(frozen=True)
class PSplineBasis:
    """Fitted univariate P-spline: knots plus the penalty eigendecomposition."""

    knots: KnotVector
    Uplus: np.ndarray
    LambdaPlus: np.ndarray

    @classmethod
    def fit(cls, v, J: int, degree: int = 3, order: int = 2) -> "PSplineBasis":
        v = np.asarray(v, dtype=float)
        lo, hi = float(np.min(v)), float(np.max(v))
        if hi <= lo:
            raise BasisError("covariate is constant; a smooth needs at least two distinct values")
        kv = make_knots(lo, hi, J, degree)
        dec = decompose_penalty(diff_penalty(J, order), order=order)
        return cls(kv, dec.Uplus, dec.LambdaPlus)

    @property
    def width(self) -> int:
        return self.Uplus.shape[1]

    def z(self, v) -> np.ndarray:
        return bspline_design(v, self.knots) @ self.Uplus

    def to_dict(self) -> dict:
        return {
            "knots": self.knots.to_dict(),
            "Uplus": self.Uplus.tolist(),
            "LambdaPlus": self.LambdaPlus.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PSplineBasis":
        return cls(KnotVector.from_dict(d["knots"]), np.asarray(d["Uplus"], dtype=float),
                   np.asarray(d["LambdaPlus"], dtype=float))


def _check_nonconstant(v, name):
    v = np.asarray(v, dtype=float)
    if v.size == 0 or np.ptp(v) <= 0:
        raise BasisError(f"covariate {name} is constant")
    return v


def univariate_smooth_blocks(v, J: int, basis: PSplineBasis | None = None) -> SmoothBlocks:
    """Unpenalised column ``v`` and one penalised block ``B @ U+`` with precision ``Lambda+``.

    The constant column of the nullspace is dropped because the model carries
    its own intercept.
    """
    v = _check_nonconstant(v, "v")
    if basis is None:
        basis = PSplineBasis.fit(v, J)
    return SmoothBlocks(v[:, None].copy(), [basis.z(v)], [basis.LambdaPlus.copy()],
                        ["smooth"], ["v"])


@dataclass(frozen=True)
class TensorAnovaBasis:
    """Fitted BPS-ANOVA surface.

    ``centring[k]`` is the (4, width_k) matrix of least-squares coefficients of
    block k on ``(1, v1, v2, v1*v2)`` over the training data; subtracting the
    fitted parametric part makes every z-block orthogonal to the unpenalised
    space on the training sample.
    """

    b1: PSplineBasis
    b2: PSplineBasis
    centring: tuple

    LABELS = ("f1", "f2", "v2*h1", "v1*h2", "f12")

    @staticmethod
    def _raw_blocks(b1, b2, v1, v2):
        u1 = b1.z(v1)
        u2 = b2.z(v2)
        z5 = (u1[:, :, None] * u2[:, None, :]).reshape(len(v1), -1)
        return [u1, u2, v2[:, None] * u1, v1[:, None] * u2, z5]

    @staticmethod
    def _parametric(v1, v2):
        return np.column_stack([np.ones_like(v1), v1, v2, v1 * v2])

    @classmethod
    def fit(cls, v1, v2, J1: int, J2: int) -> "TensorAnovaBasis":
        v1 = _check_nonconstant(v1, "v1")
        v2 = _check_nonconstant(v2, "v2")
        b1 = PSplineBasis.fit(v1, J1)
        b2 = PSplineBasis.fit(v2, J2)
        X = cls._parametric(v1, v2)
        raw = cls._raw_blocks(b1, b2, v1, v2)
        centring = tuple(np.linalg.lstsq(X, z, rcond=None)[0] for z in raw)
        return cls(b1, b2, centring)

    def precisions(self) -> list:
        y1, y2 = self.b1.LambdaPlus, self.b2.LambdaPlus
        return [y1.copy(), y2.copy(), y1.copy(), y2.copy(), np.add.outer(y1, y2).ravel()]

    def blocks(self, v1, v2) -> SmoothBlocks:
        v1 = np.asarray(v1, dtype=float)
        v2 = np.asarray(v2, dtype=float)
        X = self._parametric(v1, v2)
        raw = self._raw_blocks(self.b1, self.b2, v1, v2)
        z = [zk - X @ Ck for zk, Ck in zip(raw, self.centring)]
        return SmoothBlocks(X[:, 1:], z, self.precisions(), list(self.LABELS),
                            ["v1", "v2", "v1:v2"])

    def to_dict(self) -> dict:
        return {"b1": self.b1.to_dict(), "b2": self.b2.to_dict(),
                "centring": [c.tolist() for c in self.centring]}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorAnovaBasis":
        return cls(PSplineBasis.from_dict(d["b1"]), PSplineBasis.from_dict(d["b2"]),
                   tuple(np.asarray(c, dtype=float) for c in d["centring"]))


def tensor_anova_blocks(v1, v2, J1: int, J2: int) -> SmoothBlocks:
    """Five-block ANOVA decomposition of a tensor-product P-spline surface.

    Unpenalised columns are ``(v1, v2, v1*v2)``; the penalised blocks are the
    two main effects, the two varying-coefficient terms and the pure
    interaction, with precisions ``Y1+``, ``Y2+``, ``Y1+``, ``Y2+`` and
    ``Y1+ (x) I + I (x) Y2+``.
    """
    return TensorAnovaBasis.fit(v1, v2, J1, J2).blocks(v1, v2)

"""Model terms, data ingestion, standardisation and design assembly.

A model is an ordered list of :class:`TermSpec`. :class:`DesignBuilder` fits
the data-dependent pieces of every term (knots, penalty eigenvectors, factor
levels, centring) once on the training data and can then rebuild the design
at arbitrary new covariate values from its serialised form alone.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .basis import BasisError, PSplineBasis, TensorAnovaBasis


class ModelSpecError(ValueError):
    """Malformed model configuration or data that does not fit it."""


TERM_KINDS = (
    "intercept",
    "linear",
    "categorical",
    "interaction",
    "smooth",
    "bivariate",
    "smooth_by_factor",
    "varying_coefficient",
    "random_effect",
)

DEFAULT_J = 23


@dataclass(frozen=True)
class TermSpec:
    kind: str
    variables: tuple = ()
    J: int | None = None
    J2: int | None = None
    by: str | None = None
    # (a, b) of the inverse-gamma prior on this term's smoothing variances
    tau_prior: tuple | None = None

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ModelSpecError(f"unknown term kind {self.kind!r}")

    @property
    def key(self) -> tuple:
        return (self.kind, self.variables, self.by)

    def label(self) -> str:
        if self.kind == "intercept":
            return "(Intercept)"
        if self.kind in ("linear", "categorical"):
            return self.variables[0]
        if self.kind == "interaction":
            return ":".join(self.variables)
        args = list(self.variables)
        if self.by is not None:
            args.append(f"by={self.by}")
        return f"{self.kind}({', '.join(args)})"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "variables": list(self.variables)}
        for name in ("J", "J2", "by"):
            if getattr(self, name) is not None:
                d[name] = getattr(self, name)
        if self.tau_prior is not None:
            d["tau_prior"] = list(self.tau_prior)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TermSpec":
        tp = d.get("tau_prior")
        return cls(d["kind"], tuple(d.get("variables", ())), d.get("J"), d.get("J2"),
                   d.get("by"), tuple(float(x) for x in tp) if tp is not None else None)


# ---------------------------------------------------------------- parsing

_CALL = re.compile(r"^\s*([A-Za-z_]\w*)\s*\((.*)\)\s*$", re.S)
_NAME = re.compile(r"^[A-Za-z_.][\w.]*$")


def _split_top(text: str, sep: str) -> list:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise ModelSpecError(f"unbalanced parentheses in {text!r}")
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if depth != 0:
        raise ModelSpecError(f"unbalanced parentheses in {text!r}")
    parts.append("".join(cur))
    return [p.strip() for p in parts]


def _number(s: str):
    try:
        f = float(s)
    except ValueError:
        raise ModelSpecError(f"expected a number, got {s!r}") from None
    return int(f) if f.is_integer() and "." not in s and "e" not in s.lower() else f


def _term_from_call(kind: str, args: list, categorical) -> TermSpec:
    pos, kw = [], {}
    for a in args:
        if not a:
            continue
        if "=" in a:
            k, v = (s.strip() for s in a.split("=", 1))
            kw[k] = v
        else:
            pos.append(a)
    for p in pos:
        if not _NAME.match(p):
            raise ModelSpecError(f"bad variable name {p!r} in {kind}(...)")
    tau_prior = None
    if "a_tau2" in kw or "b_tau2" in kw:
        tau_prior = (float(kw.pop("a_tau2", 1.0)), float(kw.pop("b_tau2", 0.05)))
    by = kw.pop("by", None)
    J = kw.pop("J", None)
    J1 = kw.pop("J1", None)
    J2 = kw.pop("J2", None)
    if kw:
        raise ModelSpecError(f"unknown argument(s) {sorted(kw)} for {kind}")
    J = _number(J) if J is not None else None
    J1 = _number(J1) if J1 is not None else None
    J2 = _number(J2) if J2 is not None else None
    nvars = {"linear": 1, "categorical": 1, "smooth": 1, "bivariate": 2,
             "smooth_by_factor": 1, "varying_coefficient": 1, "random_effect": 1}
    if kind == "intercept":
        return TermSpec("intercept")
    if kind == "interaction":
        if len(pos) < 2:
            raise ModelSpecError("interaction needs at least two variables")
        return TermSpec("interaction", tuple(pos))
    if kind not in nvars:
        raise ModelSpecError(f"unknown term kind {kind!r}")
    if len(pos) != nvars[kind]:
        raise ModelSpecError(f"{kind} takes {nvars[kind]} variable(s), got {pos}")
    if kind == "bivariate":
        j1 = J1 if J1 is not None else (J if J is not None else DEFAULT_J)
        j2 = J2 if J2 is not None else (J if J is not None else DEFAULT_J)
        return TermSpec(kind, tuple(pos), int(j1), int(j2), tau_prior=tau_prior)
    if kind in ("smooth_by_factor", "varying_coefficient") and by is None:
        raise ModelSpecError(f"{kind} needs a by= variable")
    if kind in ("smooth", "smooth_by_factor", "varying_coefficient"):
        return TermSpec(kind, tuple(pos), int(J if J is not None else DEFAULT_J), by=by,
                        tau_prior=tau_prior)
    if kind == "linear" and pos[0] in categorical:
        kind = "categorical"
    return TermSpec(kind, tuple(pos), tau_prior=tau_prior)


def _term_from_text(text: str, categorical) -> TermSpec:
    m = _CALL.match(text)
    if m:
        return _term_from_call(m.group(1), _split_top(m.group(2), ","), categorical)
    if text in ("1", "intercept"):
        return TermSpec("intercept")
    if ":" in text:
        names = [s.strip() for s in text.split(":")]
        for nm in names:
            if not _NAME.match(nm):
                raise ModelSpecError(f"bad variable name {nm!r}")
        return TermSpec("interaction", tuple(names))
    if not _NAME.match(text):
        raise ModelSpecError(f"cannot parse term {text!r}")
    return TermSpec("categorical" if text in categorical else "linear", (text,))


def parse_model_config(text, categorical: Sequence[str] = (), columns=None) -> list:
    """Parse a term list into an ordered list of :class:`TermSpec`.

    ``text`` may be a formula string such as ``"sex + smooth(age, J=23)"``, a
    JSON string, a list of term strings or term dicts, or a dict holding a
    ``"terms"`` entry. The intercept is always the first term, exactly once.
    """
    categorical = set(categorical)
    if isinstance(text, str) and text.strip()[:1] in ("[", "{"):
        text = json.loads(text)
    if isinstance(text, dict):
        categorical |= set(text.get("categorical", ()))
        text = text.get("terms", "")
    if isinstance(text, str):
        raw = [t for t in _split_top(text, "+") if t] if text.strip() else []
    else:
        raw = list(text)
    terms = [TermSpec("intercept")]
    seen = {terms[0].key}
    for item in raw:
        if isinstance(item, TermSpec):
            t = item
        elif isinstance(item, dict):
            t = TermSpec.from_dict(item)
        else:
            t = _term_from_text(str(item).strip(), categorical)
        if t.kind == "intercept":
            continue
        if t.key in seen:
            raise ModelSpecError(f"duplicate term {t.label()}")
        seen.add(t.key)
        terms.append(t)
    for t in terms:
        _validate_term(t, categorical, columns)
    return terms


def _validate_term(t: TermSpec, categorical, columns):
    names = list(t.variables) + ([t.by] if t.by else [])
    if columns is not None:
        missing = [v for v in names if v not in columns]
        if missing:
            raise ModelSpecError(f"term {t.label()} references missing column(s) {missing}")
    numeric_needed = {
        "linear": t.variables, "smooth": t.variables, "bivariate": t.variables,
        "smooth_by_factor": t.variables,
        "varying_coefficient": t.variables + ((t.by,) if t.by else ()),
    }.get(t.kind, ())
    for v in numeric_needed:
        if v in categorical:
            raise ModelSpecError(f"term {t.label()} needs numeric column {v!r}, which is categorical")
    if t.kind == "random_effect" and categorical and t.variables[0] not in categorical:
        raise ModelSpecError(f"random_effect needs a categorical column, {t.variables[0]!r} is not declared categorical")
    if t.kind == "smooth_by_factor" and categorical and t.by not in categorical:
        raise ModelSpecError(f"smooth_by_factor needs a categorical by= column, {t.by!r} is not declared categorical")
    if t.kind == "bivariate" and t.variables[0] == t.variables[1]:
        raise ModelSpecError("bivariate smooth needs two different covariates")
    for Jv in (t.J, t.J2):
        if Jv is not None and Jv < 4:
            raise ModelSpecError(f"term {t.label()}: basis dimension {Jv} is too small (need J >= 4)")


# ------------------------------------------------------------ data handling

def read_dataset(path, categorical: Sequence[str] = ()) -> pd.DataFrame:
    """Read a CSV with a header row; declared categorical columns become strings."""
    df = pd.read_csv(path)
    return prepare_dataset(df, categorical)


def prepare_dataset(df: pd.DataFrame, categorical: Sequence[str] = (), required=None) -> pd.DataFrame:
    df = df.copy()
    cols = list(df.columns) if required is None else list(required)
    missing_cols = [c for c in cols if c not in df.columns]
    if missing_cols:
        raise ModelSpecError(f"missing column(s) {missing_cols}")
    na = df[cols].isna().any(axis=0)
    if na.any():
        bad = list(na[na].index)
        rows = np.flatnonzero(df[bad].isna().any(axis=1).to_numpy())[:5]
        raise ModelSpecError(f"missing values in column(s) {bad} (rows {list(rows)})")
    for c in categorical:
        if c in df.columns:
            df[c] = df[c].astype(str)
    return df


@dataclass
class StandardisationRecord:
    response: str | None
    columns: dict = field(default_factory=dict)  # name -> (mean, sd)

    def to_dict(self) -> dict:
        return {"response": self.response,
                "columns": {k: [float(m), float(s)] for k, (m, s) in self.columns.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardisationRecord":
        return cls(d.get("response"), {k: (float(v[0]), float(v[1])) for k, v in d["columns"].items()})

    @property
    def y_loc(self) -> float:
        return self.columns[self.response][0] if self.response else 0.0

    @property
    def y_scale(self) -> float:
        return self.columns[self.response][1] if self.response else 1.0

    def apply(self, data: pd.DataFrame) -> pd.DataFrame:
        out = data.copy()
        for c, (m, s) in self.columns.items():
            if c in out.columns:
                out[c] = (out[c].astype(float) - m) / s
        return out

    def invert(self, data: pd.DataFrame) -> pd.DataFrame:
        out = data.copy()
        for c, (m, s) in self.columns.items():
            if c in out.columns:
                out[c] = out[c].astype(float) * s + m
        return out


def numeric_columns(terms, categorical=()) -> list:
    cols = []
    for t in terms:
        if t.kind in ("linear", "smooth", "bivariate", "smooth_by_factor"):
            cols += list(t.variables)
        elif t.kind == "varying_coefficient":
            cols += [t.variables[0], t.by]
        elif t.kind == "interaction":
            cols += [v for v in t.variables if v not in categorical]
    return list(dict.fromkeys(cols))


def standardize(data: pd.DataFrame, response_col: str | None, columns=None):
    """Centre and scale the response and numeric covariates (sample sd)."""
    if columns is None:
        columns = [c for c in data.columns if c != response_col and pd.api.types.is_numeric_dtype(data[c])]
    cols = ([response_col] if response_col else []) + [c for c in columns if c != response_col]
    rec = StandardisationRecord(response_col)
    for c in cols:
        v = data[c].to_numpy(dtype=float)
        sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
        if not sd > 0:
            raise ModelSpecError(f"column {c!r} is constant and cannot be standardised")
        rec.columns[c] = (float(np.mean(v)), sd)
    return rec.apply(data), rec


def destandardize(values, record: StandardisationRecord, what: str):
    """Map functional values computed on the standardised response scale back.

    ``what`` is one of ``location`` (means, quantiles, responses), ``variance``,
    ``sd`` or ``density``.
    """
    m, s = record.y_loc, record.y_scale
    values = np.asarray(values, dtype=float)
    if what == "location":
        return m + s * values
    if what == "variance":
        return values * s ** 2
    if what == "sd":
        return values * s
    if what == "density":
        return values / s
    raise ValueError(f"unknown functional kind {what!r}")


# ----------------------------------------------------------- design blocks

@dataclass
class DesignMatrices:
    X: np.ndarray
    Z: list
    K: list
    x_labels: list
    z_labels: list
    tau_priors: list
    term_map: dict
    standardisation: StandardisationRecord | None = None
    builder: "DesignBuilder | None" = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def Q(self) -> int:
        return self.X.shape[1]

    @property
    def widths(self) -> list:
        return [k.shape[0] for k in self.K]

    @property
    def R(self) -> int:
        return len(self.K)

    @property
    def ranks(self) -> list:
        return [int(np.sum(k > 0)) for k in self.K]

    def full(self) -> np.ndarray:
        """``[X | Z_1 | ... | Z_R]``."""
        return np.hstack([self.X] + list(self.Z)) if self.Z else self.X.copy()


def _level_codes(v: pd.Series, levels: list, name: str) -> np.ndarray:
    vals = v.astype(str).to_numpy()
    idx = {lv: i for i, lv in enumerate(levels)}
    try:
        return np.array([idx[x] for x in vals], dtype=int)
    except KeyError as e:
        raise ModelSpecError(f"unseen level {e.args[0]!r} of factor {name!r}") from None


def _levels(v: pd.Series) -> list:
    return list(dict.fromkeys(v.astype(str).to_numpy()))


def _fit_term(spec: TermSpec, data: pd.DataFrame, categorical: set) -> dict:
    k = spec.kind
    if k in ("intercept", "linear"):
        return {}
    if k in ("categorical", "random_effect"):
        return {"levels": _levels(data[spec.variables[0]])}
    if k == "interaction":
        return {"levels": {v: _levels(data[v]) for v in spec.variables if v in categorical}}
    if k == "smooth" or k == "varying_coefficient":
        try:
            return {"basis": PSplineBasis.fit(data[spec.variables[0]].to_numpy(float), spec.J).to_dict()}
        except BasisError as e:
            raise ModelSpecError(f"{spec.label()}: {e}") from None
    if k == "smooth_by_factor":
        try:
            b = PSplineBasis.fit(data[spec.variables[0]].to_numpy(float), spec.J)
        except BasisError as e:
            raise ModelSpecError(f"{spec.label()}: {e}") from None
        return {"basis": b.to_dict(), "levels": _levels(data[spec.by])}
    if k == "bivariate":
        v1, v2 = (data[v].to_numpy(float) for v in spec.variables)
        try:
            return {"basis": TensorAnovaBasis.fit(v1, v2, spec.J, spec.J2).to_dict()}
        except BasisError as e:
            raise ModelSpecError(f"{spec.label()}: {e}") from None
    raise ModelSpecError(f"unknown term kind {k!r}")


def _columns_of(name, data, state_levels):
    """Numeric column, or dummy columns (reference = first level) for a factor."""
    if name in state_levels:
        levels = state_levels[name]
        codes = _level_codes(data[name], levels, name)
        cols = [(codes == j).astype(float) for j in range(1, len(levels))]
        return cols, [f"{name}{lv}" for lv in levels[1:]]
    return [data[name].to_numpy(float)], [name]


def _transform_term(spec: TermSpec, state: dict, data: pd.DataFrame, n: int):
    """Return (x_cols, x_labels, z_blocks, K_diags, z_labels)."""
    k = spec.kind
    lab = spec.label()
    if k == "intercept":
        return [np.ones(n)], ["(Intercept)"], [], [], []
    if k == "linear":
        return [data[spec.variables[0]].to_numpy(float)], [spec.variables[0]], [], [], []
    if k == "categorical":
        cols, labels = _columns_of(spec.variables[0], data, {spec.variables[0]: state["levels"]})
        return cols, labels, [], [], []
    if k == "interaction":
        cols, labels = [np.ones(n)], [""]
        for v in spec.variables:
            vc, vl = _columns_of(v, data, state["levels"])
            cols = [a * b for a in cols for b in vc]
            labels = [f"{a}:{b}" if a else b for a in labels for b in vl]
        return cols, labels, [], [], []
    if k == "random_effect":
        name = spec.variables[0]
        codes = _level_codes(data[name], state["levels"], name)
        Z = np.zeros((n, len(state["levels"])))
        Z[np.arange(n), codes] = 1.0
        return [], [], [Z], [np.ones(Z.shape[1])], [lab]
    if k == "smooth":
        b = PSplineBasis.from_dict(state["basis"])
        v = data[spec.variables[0]].to_numpy(float)
        return [v], [spec.variables[0]], [_eval_z(b, v, lab)], [b.LambdaPlus.copy()], [lab]
    if k == "varying_coefficient":
        b = PSplineBasis.from_dict(state["basis"])
        v = data[spec.variables[0]].to_numpy(float)
        w = data[spec.by].to_numpy(float)
        return ([w, w * v], [spec.by, f"{spec.by}:{spec.variables[0]}"],
                [w[:, None] * _eval_z(b, v, lab)], [b.LambdaPlus.copy()], [lab])
    if k == "smooth_by_factor":
        b = PSplineBasis.from_dict(state["basis"])
        v = data[spec.variables[0]].to_numpy(float)
        levels = state["levels"]
        codes = _level_codes(data[spec.by], levels, spec.by)
        zfull = _eval_z(b, v, lab)
        xs, xl, zs, ks, zl = [], [], [], [], []
        for j, lv in enumerate(levels):
            ind = (codes == j).astype(float)
            xs.append(v * ind)
            xl.append(f"{spec.variables[0]}:{spec.by}{lv}" if len(levels) > 1 else spec.variables[0])
            zs.append(zfull * ind[:, None])
            ks.append(b.LambdaPlus.copy())
            zl.append(f"{lab}[{lv}]" if len(levels) > 1 else lab)
        return xs, xl, zs, ks, zl
    if k == "bivariate":
        tb = TensorAnovaBasis.from_dict(state["basis"])
        v1, v2 = (data[v].to_numpy(float) for v in spec.variables)
        try:
            blocks = tb.blocks(v1, v2)
        except BasisError as e:
            raise ModelSpecError(f"{lab}: {e}") from None
        a, c = spec.variables
        return (list(blocks.x_cols.T), [a, c, f"{a}:{c}"], blocks.z_blocks,
                blocks.prior_precisions, [f"{lab}.{s}" for s in blocks.labels])
    raise ModelSpecError(f"unknown term kind {k!r}")


def _eval_z(b: PSplineBasis, v, label):
    try:
        return b.z(v)
    except BasisError as e:
        raise ModelSpecError(f"{label}: {e}") from None


class DesignBuilder:
    """Fitted, serialisable recipe for the design of a term list."""

    def __init__(self, terms: list, states: list, categorical: Sequence[str] = ()):
        self.terms = list(terms)
        self.states = list(states)
        self.categorical = list(categorical)

    @classmethod
    def fit(cls, data: pd.DataFrame, terms: list, categorical: Sequence[str] = ()) -> "DesignBuilder":
        categorical = set(categorical) | {
            c for c in data.columns if not pd.api.types.is_numeric_dtype(data[c])
        }
        if len(data) == 0:
            raise ModelSpecError("dataset has no rows")
        if not terms or terms[0].kind != "intercept":
            terms = [TermSpec("intercept")] + [t for t in terms if t.kind != "intercept"]
        for t in terms:
            _validate_term(t, categorical, set(data.columns))
        states = [_fit_term(t, data, categorical) for t in terms]
        return cls(terms, states, sorted(categorical))

    @property
    def variables(self) -> list:
        out = []
        for t in self.terms:
            out += list(t.variables) + ([t.by] if t.by else [])
        return list(dict.fromkeys(out))

    def domains(self) -> dict:
        """Basis domain ``(lo, hi)`` of every smoothed variable (fitting scale)."""
        out = {}
        for t, st in zip(self.terms, self.states):
            if t.kind == "bivariate":
                tb = TensorAnovaBasis.from_dict(st["basis"])
                for v, b in zip(t.variables, (tb.b1, tb.b2)):
                    out[v] = (b.knots.domain_lo, b.knots.domain_hi)
            elif "basis" in st:
                kv = PSplineBasis.from_dict(st["basis"]).knots
                out[t.variables[0]] = (kv.domain_lo, kv.domain_hi)
        return out

    def transform(self, data: pd.DataFrame, standardisation=None) -> DesignMatrices:
        n = len(data)
        missing = [v for v in self.variables if v not in data.columns]
        if missing:
            raise ModelSpecError(f"missing column(s) {missing}")
        xs, xl, zs, ks, zl, tp = [], [], [], [], [], []
        term_map = {}
        for t, st in zip(self.terms, self.states):
            c, cl, z, kd, zlab = _transform_term(t, st, data, n)
            term_map[t.label()] = {"x": list(range(len(xs), len(xs) + len(c))),
                                   "z": list(range(len(zs), len(zs) + len(z)))}
            xs += c
            xl += cl
            zs += z
            ks += kd
            zl += zlab
            tp += [t.tau_prior] * len(z)
        X = np.column_stack(xs) if xs else np.ones((n, 1))
        return DesignMatrices(X, zs, ks, xl, zl, tp, term_map, standardisation, self)

    def to_dict(self) -> dict:
        return {"categorical": self.categorical,
                "terms": [{"spec": t.to_dict(), "state": s} for t, s in zip(self.terms, self.states)]}

    @classmethod
    def from_dict(cls, d: dict) -> "DesignBuilder":
        terms = [TermSpec.from_dict(e["spec"]) for e in d["terms"]]
        return cls(terms, [e["state"] for e in d["terms"]], d.get("categorical", ()))


def check_full_rank(X: np.ndarray, labels: list):
    if X.shape[0] < X.shape[1]:
        raise ModelSpecError(f"n={X.shape[0]} rows is fewer than the {X.shape[1]} parametric columns")
    if np.linalg.matrix_rank(X) == X.shape[1]:
        return
    kept, aliased = [], []
    for j in range(X.shape[1]):
        if np.linalg.matrix_rank(X[:, kept + [j]]) == len(kept) + 1:
            kept.append(j)
        else:
            aliased.append(labels[j])
    raise ModelSpecError(f"parametric design is rank deficient; aliased column(s): {aliased}")


def build_design(data: pd.DataFrame, terms: list, categorical: Sequence[str] = ()) -> DesignMatrices:
    """Fit the term recipe on ``data`` and assemble the design on the same rows."""
    builder = DesignBuilder.fit(data, terms, categorical)
    design = builder.transform(data)
    check_full_rank(design.X, design.x_labels)
    design.builder = builder
    return design

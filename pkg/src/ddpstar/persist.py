"""Fit artifacts on disk: a JSON manifest plus one long-format CSV per
parameter family.

Every family CSV has the columns ``iteration, component, block, index,
value``. ``iteration`` is the sweep index of the retained draw, ``block``
names the design block a coefficient belongs to (``x`` for the parametric
part) and ``index`` is the position within that block. Values are written
with 17 significant digits so that loading reproduces the draws bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from .sampler import PosteriorDraws

FAMILIES = ("weights", "eta", "coef", "sigma2", "tau2", "alpha", "m_beta", "H_beta_inv")
COLUMNS = ["iteration", "component", "block", "index", "value"]
_FMT = "%.17g"


class ArtifactError(RuntimeError):
    pass


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _coef_layout(meta: dict, P: int):
    """Block label and within-block index of every coefficient column."""
    Q = int(meta["Q"])
    blocks = ["x"] * Q
    index = list(range(Q))
    for label, w in zip(meta.get("z_labels", []), meta.get("widths", [])):
        blocks += [label] * w
        index += list(range(w))
    if len(blocks) != P:
        blocks = ["theta"] * P
        index = list(range(P))
    return np.array(blocks, dtype=object), np.array(index)


def _long(iters, arr: np.ndarray, blocks=None, index=None) -> pd.DataFrame:
    """Flatten ``arr`` shaped ``(D, L, K)`` into long rows."""
    D, L, K = arr.shape
    blocks = np.array([""] * K, dtype=object) if blocks is None else blocks
    index = np.arange(K) if index is None else index
    return pd.DataFrame({
        "iteration": np.repeat(iters, L * K),
        "component": np.tile(np.repeat(np.arange(L), K), D),
        "block": np.tile(blocks, D * L),
        "index": np.tile(index, D * L),
        "value": arr.ravel(),
    })


def save_draws(draws: PosteriorDraws, out_dir, extra_manifest: dict | None = None) -> Path:
    """Write ``manifest.json``, ``<family>.csv``, ``occupancy.csv`` (and
    ``allocations.csv`` when allocations were kept) to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    D, L, P = draws.coef.shape
    R = draws.tau2.shape[2]
    Q = draws.m_beta.shape[1]
    meta = draws.manifest.get("meta", {})
    manifest = dict(draws.manifest)
    manifest["shapes"] = {"D": D, "L": L, "P": P, "R": R, "Q": Q,
                          "iters": int(len(draws.occupancy))}
    if extra_manifest:
        manifest.update(extra_manifest)
    (out / "manifest.json").write_text(json.dumps(_to_jsonable(manifest), indent=2))
    it = draws.iterations
    cb, ci = _coef_layout(meta, P)
    z_labels = meta.get("z_labels", [f"z{r}" for r in range(R)])
    tables = {
        "weights": _long(it, draws.weights[:, :, None]),
        "eta": _long(it, draws.eta[:, :, None]),
        "sigma2": _long(it, draws.sigma2[:, :, None]),
        "coef": _long(it, draws.coef, cb, ci),
        "tau2": _long(it, draws.tau2, np.array(list(z_labels)[:R], dtype=object), np.zeros(R, int)),
        "alpha": _long(it, draws.alpha[:, None, None]),
        "m_beta": _long(it, draws.m_beta[:, None, :]),
        "H_beta_inv": _long(it, draws.H_beta_inv.reshape(D, 1, Q * Q)),
    }
    for name, tab in tables.items():
        tab.to_csv(out / f"{name}.csv", index=False, float_format=_FMT)
    pd.DataFrame({"iteration": np.arange(len(draws.occupancy)),
                  "occupied": draws.occupancy}).to_csv(out / "occupancy.csv", index=False)
    if draws.z is not None:
        n = draws.z.shape[1]
        pd.DataFrame({"iteration": np.repeat(it, n), "observation": np.tile(np.arange(n), D),
                      "component": draws.z.ravel()}).to_csv(out / "allocations.csv", index=False)
    return out


def _read_values(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise ArtifactError(f"fit artifact is missing {path.name}")
    df = pd.read_csv(path, float_precision="round_trip", keep_default_na=False)
    vals = df["value"].to_numpy(dtype=float)
    if vals.size != int(np.prod(shape)):
        raise ArtifactError(f"{path.name} holds {vals.size} values, expected shape {shape}")
    return vals.reshape(shape)


def load_manifest(path) -> dict:
    p = Path(path)
    p = p / "manifest.json" if p.is_dir() else p
    if not p.exists():
        raise ArtifactError(f"no manifest.json under {path}")
    return json.loads(p.read_text())


def load_draws(out_dir) -> PosteriorDraws:
    """Inverse of :func:`save_draws`."""
    out = Path(out_dir)
    manifest = load_manifest(out)
    sh = manifest.pop("shapes")
    D, L, P, R, Q = (int(sh[k]) for k in ("D", "L", "P", "R", "Q"))
    arrays = {
        "weights": _read_values(out / "weights.csv", (D, L)),
        "eta": _read_values(out / "eta.csv", (D, L)),
        "sigma2": _read_values(out / "sigma2.csv", (D, L)),
        "coef": _read_values(out / "coef.csv", (D, L, P)),
        "tau2": _read_values(out / "tau2.csv", (D, L, R)),
        "alpha": _read_values(out / "alpha.csv", (D,)),
        "m_beta": _read_values(out / "m_beta.csv", (D, Q)),
        "H_beta_inv": _read_values(out / "H_beta_inv.csv", (D, Q, Q)),
    }
    its = pd.read_csv(out / "alpha.csv")["iteration"].to_numpy(int)
    occ = pd.read_csv(out / "occupancy.csv")["occupied"].to_numpy(int)
    z = None
    if (out / "allocations.csv").exists():
        z = pd.read_csv(out / "allocations.csv")["component"].to_numpy(int).reshape(D, -1)
    return PosteriorDraws(occupancy=occ, iterations=its, manifest=manifest, z=z, **arrays)

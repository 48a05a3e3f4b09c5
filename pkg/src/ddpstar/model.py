"""End-to-end fitting: standardise, assemble the design, run the sampler and
attach everything prediction needs to the posterior draws."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import pandas as pd

from .formula import (
    build_design,
    numeric_columns,
    parse_model_config,
    prepare_dataset,
    standardize,
)
from .sampler import Hyperparameters, PosteriorDraws, SamplerOptions, run_chain


def fit(data: pd.DataFrame, terms, response: str = "y", categorical: Sequence[str] = (),
        hyper: dict | None = None, L: int = 20, iters: int = 5000, burnin: int = 1000,
        thin: int = 1, seed: int = 0, stream: int = 0,
        options: SamplerOptions | None = None) -> PosteriorDraws:
    """Fit the mixture on ``data`` and return retained draws with a manifest.

    ``terms`` is anything :func:`parse_model_config` accepts. Responses and
    numeric covariates are standardised before fitting; every functional
    computed from the returned draws is reported on the original scale.
    """
    categorical = list(categorical)
    if isinstance(terms, (str, dict)) or (isinstance(terms, list) and terms and not hasattr(terms[0], "kind")):
        terms = parse_model_config(terms, categorical, columns=set(data.columns))
    elif not terms:
        terms = parse_model_config("", categorical)
    used = [response]
    for t in terms:
        used += list(t.variables) + ([t.by] if t.by else [])
    used = list(dict.fromkeys(used))
    df = prepare_dataset(data, categorical, required=used)[used]
    std, rec = standardize(df, response, numeric_columns(terms, categorical))
    design = build_design(std, terms, categorical)
    hp = Hyperparameters.default(design.Q, L=L, **(hyper or {}))
    draws = run_chain(design, std[response].to_numpy(float), hp, iters, burnin, thin,
                      seed=seed, stream=stream, options=options)
    draws.manifest.update({
        "response": response,
        "categorical": categorical,
        "terms": [t.to_dict() for t in terms],
        "builder": design.builder.to_dict(),
        "standardisation": rec.to_dict(),
    })
    return draws


def fitted_design(draws: PosteriorDraws, data: pd.DataFrame) -> np.ndarray:
    from .functionals import query_design

    return query_design(draws.manifest, data)

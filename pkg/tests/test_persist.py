import json

import numpy as np
import pandas as pd
import pytest

from ddpstar import model, scenarios
from ddpstar.functionals import posterior_functional
from ddpstar.persist import ArtifactError, load_draws, load_manifest, save_draws
from ddpstar.sampler import SamplerOptions

FIELDS = ("weights", "eta", "coef", "sigma2", "tau2", "alpha", "m_beta", "H_beta_inv",
          "iterations", "occupancy")


def test_roundtrip_bit_exact(scenario1_small, tmp_path):
    _, draws = scenario1_small
    back = load_draws(save_draws(draws, tmp_path / "fit"))
    for f in FIELDS:
        np.testing.assert_array_equal(getattr(back, f), getattr(draws, f), err_msg=f)
    assert back.z is None
    assert back.manifest["builder"] == json.loads(json.dumps(draws.manifest["builder"]))


def test_predict_from_artifact_only(scenario1_small, tmp_path):
    df, draws = scenario1_small
    back = load_draws(save_draws(draws, tmp_path / "fit"))
    q = pd.DataFrame({"x": [0.1, 0.9]})
    a = posterior_functional(draws, q, "mean,quantile:0.5").table
    b = posterior_functional(back, q, "mean,quantile:0.5").table
    pd.testing.assert_frame_equal(a, b)


def test_allocations_and_categorical_roundtrip(tmp_path):
    df = scenarios.generate("I", 80, seed=2)
    df["g"] = np.where(df.x > 0.5, "hi", "lo")
    d = model.fit(df, "g + smooth(x, J=6)", categorical=["g"], iters=30, burnin=10, seed=1,
                  options=SamplerOptions(keep_allocations=True))
    back = load_draws(save_draws(d, tmp_path / "f"))
    np.testing.assert_array_equal(back.z, d.z)
    np.testing.assert_array_equal(back.coef, d.coef)
    coef = pd.read_csv(tmp_path / "f" / "coef.csv")
    assert set(coef.block) >= {"x"}
    assert list(coef.columns) == ["iteration", "component", "block", "index", "value"]


def test_deterministic_files(tmp_path):
    df = scenarios.generate("I", 60, seed=3)
    outs = []
    for k in range(2):
        d = model.fit(df, "smooth(x, J=6)", iters=30, burnin=5, seed=4)
        d.manifest["meta"].pop("elapsed_seconds", None)
        outs.append(save_draws(d, tmp_path / str(k)))
    for name in ("manifest.json", "coef.csv", "weights.csv", "sigma2.csv", "tau2.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_missing_file(scenario1_small, tmp_path):
    _, draws = scenario1_small
    out = save_draws(draws, tmp_path / "fit")
    (out / "coef.csv").unlink()
    with pytest.raises(ArtifactError, match="coef.csv"):
        load_draws(out)


def test_truncated_file(scenario1_small, tmp_path):
    _, draws = scenario1_small
    out = save_draws(draws, tmp_path / "fit")
    t = pd.read_csv(out / "sigma2.csv").iloc[:-3]
    t.to_csv(out / "sigma2.csv", index=False)
    with pytest.raises(ArtifactError, match="expected shape"):
        load_draws(out)


def test_no_manifest(tmp_path):
    with pytest.raises(ArtifactError):
        load_manifest(tmp_path)

import warnings

import numpy as np
import pytest

from trajcluster.core import Dataset, Trajectory, TrajclusterError
from trajcluster.features import (
    FeatureConfig,
    extract_features,
    feature_cluster,
    its_features,
    orthonormal_poly,
    standardize,
)

ALL = FeatureConfig(include_residual_sd=True, include_lag1_autocorr=True)


def _gram_schmidt(t, degree):
    """Classical Gram-Schmidt of 1, t, t^2 under <f, g> = mean(f g)."""
    cols = []
    for k in range(degree + 1):
        v = t.astype(float) ** k
        for q in cols:
            v = v - np.mean(v * q) * q
        cols.append(v / np.sqrt(np.mean(v * v)))
    return np.column_stack(cols)


def test_orthonormal_poly_matches_gram_schmidt(rng):
    t = np.sort(rng.uniform(0, 1, 12))
    P = orthonormal_poly(t, 2)
    np.testing.assert_allclose(P, _gram_schmidt(t, 2), atol=1e-9)
    np.testing.assert_allclose(P.T @ P / t.size, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(P[:, 0], 1.0)


def test_its_matches_normal_equations(rng):
    for _ in range(25):
        n = int(rng.integers(5, 30))
        t = np.sort(rng.uniform(0, 1, n))
        y = rng.normal(3, 2, n)
        f, deg = its_features(Trajectory("a", t, y), ALL)
        P = _gram_schmidt(t, 2)
        coef = np.linalg.solve(P.T @ P, P.T @ y)
        resid = y - P @ coef
        np.testing.assert_allclose(f[:3], coef, atol=1e-9)
        assert f[0] == pytest.approx(y.mean(), abs=1e-9)
        assert f[3] == pytest.approx(np.sqrt(resid @ resid / (n - 3)), abs=1e-9)
        assert f[4] == pytest.approx(np.log1p(np.count_nonzero(y > 0)))
        assert f[5] == pytest.approx(resid[:-1] @ resid[1:] / (resid @ resid), abs=1e-9)
        assert not deg


def test_constant_trajectory_is_degenerate():
    tr = Trajectory("c", np.linspace(0, 1, 8), np.full(8, 3.5))
    f, deg = its_features(tr, ALL)
    assert deg
    assert f[0] == pytest.approx(3.5)
    assert f[1] == pytest.approx(0, abs=1e-12) and f[2] == pytest.approx(0, abs=1e-12)
    assert f[3] == 0.0 and f[5] == 0.0


def test_attempt_threshold_is_strict():
    tr = Trajectory("a", np.arange(5.0), [0, 0.5, 1, 2, 0])
    cfg = FeatureConfig(False, False, False, False, True, False, attempt_threshold=0.5)
    assert its_features(tr, cfg)[0][0] == pytest.approx(np.log(3))


def test_insufficient_points():
    with pytest.raises(TrajclusterError, match="'s'"):
        its_features(Trajectory("s", [0, 1, 2], [1, 2, 3]), ALL)
    with pytest.raises(TrajclusterError):
        its_features(Trajectory("s", [0.0], [1.0]), FeatureConfig(True, True, False, False, False, False))


def test_config_names_and_aliases():
    cfg = FeatureConfig.from_names(["b0", "b1", "b2", "logN"])
    assert cfg.names == ("b_intercept", "b_linear", "b_quad", "log_attempts")
    with pytest.raises(TrajclusterError):
        FeatureConfig.from_names(["bogus"])
    with pytest.raises(TrajclusterError):
        FeatureConfig(False, False, False, False, False, False)


def test_standardize_idempotent_and_constant_columns(small_synth):
    ds, _ = small_synth
    fm = extract_features(ds)
    z = standardize(fm)
    np.testing.assert_allclose(z.values.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z.values.std(axis=0, ddof=1), 1, atol=1e-12)
    np.testing.assert_allclose(standardize(z).values, z.values, atol=1e-12)
    from trajcluster.features import FeatureMatrix

    const = FeatureMatrix(("a", "b", "c"), ("x", "y"), [[1, 5], [2, 5], [3, 5]])
    s = standardize(const)
    assert s.constant_columns == ("y",)
    assert np.all(s.values[:, 1] == 0)


def test_feature_csv(tmp_path, small_synth):
    fm = extract_features(small_synth[0])
    fm.to_csv(tmp_path / "f.csv")
    head = (tmp_path / "f.csv").read_text().splitlines()[0]
    assert head == "subject_id,b_intercept,b_linear,b_quad,log_attempts"


def test_feature_cluster_warns_without_standardization(small_synth):
    fm = extract_features(small_synth[0])
    with pytest.warns(UserWarning):
        feature_cluster(fm, 3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        part, med = feature_cluster(standardize(fm), 3, n_starts=2, seed=1)
    assert part.G == 3 and med.size == 3


def test_log_attempts_from_external_series():
    blocks = Dataset([Trajectory("a", [0, 1, 2, 3], [0.5, 0.0, 0.25, 0.0])])
    daily = Dataset([Trajectory("a", np.arange(8), [1, 0, 0, 0, 2, 0, 0, 0])])
    cfg = FeatureConfig.from_names(["logN"])
    assert extract_features(blocks, cfg).values[0, 0] == pytest.approx(np.log(3))
    assert extract_features(blocks, cfg, attempts=daily).values[0, 0] == pytest.approx(np.log(3))
    daily3 = Dataset([Trajectory("a", np.arange(8), [1, 1, 0, 0, 2, 0, 0, 0])])
    assert extract_features(blocks, cfg, attempts=daily3).values[0, 0] == pytest.approx(np.log(4))
    with pytest.raises(TrajclusterError):
        extract_features(blocks, cfg, attempts=Dataset([Trajectory("b", [0, 1], [1, 1])]))

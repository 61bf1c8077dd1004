import numpy as np
import pytest

from trajcluster.core import Dataset, Trajectory
from trajcluster.synthgen import (
    SIGMA2_FLOOR,
    ClusterSpec,
    ConfigError,
    GeneratorConfig,
    default_specs,
    downsample,
    generate,
    generate_biweekly,
)


def test_default_specs_table():
    specs = default_specs()
    assert len(specs) == 7
    assert sum(s.proportion for s in specs) == pytest.approx(1.0)
    assert [s.dropout for s in specs if s.dropout] == [(80.0, 30.0), (20.0, 10.0)]


def test_generate_is_deterministic_and_prefix_stable():
    a, ta = generate(GeneratorConfig(n_patients=20, n_days=30, seed=5))
    b, tb = generate(GeneratorConfig(n_patients=20, n_days=30, seed=5))
    c, tc = generate(GeneratorConfig(n_patients=40, n_days=30, seed=5))
    assert ta.labels.tolist() == tb.labels.tolist() == tc.labels.tolist()[:20]
    for x, y, z in zip(a, b, c):
        np.testing.assert_array_equal(x.values, y.values)
        np.testing.assert_array_equal(x.values, z.values)
    d, _ = generate(GeneratorConfig(n_patients=20, n_days=30, seed=6))
    assert any(not np.array_equal(x.values, y.values) for x, y in zip(a, d))


def test_values_bounded_and_dropout_zero():
    spec = ClusterSpec("drop", 1.0, 8.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, dropout=(10.0, 0.0))
    ds, _ = generate(GeneratorConfig(n_patients=5, n_days=40, seed=1), [spec])
    for tr in ds:
        assert np.all(tr.values[10:] == 0)
        assert np.all(tr.values[:10] > 0)
        assert np.all((tr.values >= 0) & (tr.values <= 24))


def test_noise_free_limit_follows_curve():
    # attempts certain, no random effects: deviations are pure noise at the floor variance
    spec = ClusterSpec("flat", 1.0, 12.0, 0.0, 1.0, 0.0, -0.5, 1e-9, 0.0, 1.0)
    ds, _ = generate(GeneratorConfig(n_patients=50, n_days=100, seed=3), [spec])
    dev = np.concatenate([tr.values - spec.curve(tr.times) for tr in ds])
    assert abs(dev.mean()) < 0.02
    assert dev.std() == pytest.approx(np.sqrt(SIGMA2_FLOOR), rel=0.03)


def test_never_attempted_is_all_zero():
    spec = ClusterSpec("none", 1.0, 5.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
    ds, _ = generate(GeneratorConfig(n_patients=3, n_days=20, seed=0), [spec])
    assert all(np.all(tr.values == 0) for tr in ds)


def test_config_errors():
    with pytest.raises(ConfigError):
        ClusterSpec("x", 0.0, 1, 0, 0, 0, 0, 1, 0, 0.5)
    with pytest.raises(ConfigError):
        ClusterSpec("x", 0.5, 1, 0, 0, 0, 0, 1, 0, 1.5)
    with pytest.raises(ConfigError):
        generate(GeneratorConfig(n_patients=2, n_days=5), [ClusterSpec("x", 0.5, 1, 0, 0, 0, 0, 1, 0, 1)])


def test_downsample_block_means_and_grid():
    days = np.arange(1, 362, dtype=float)
    ds = Dataset((Trajectory("a", days, days),))
    out = downsample(ds, 14)
    tr = out[0]
    assert len(tr) == 26
    assert tr.times[0] == 0.0 and tr.times[-1] == 1.0
    np.testing.assert_allclose(tr.times * 350 + 1, 1 + 14 * np.arange(26))
    assert tr.values[0] == pytest.approx(np.mean(np.arange(1, 15)))
    assert tr.values[-1] == pytest.approx(np.mean(np.arange(351, 362)))
    raw = downsample(ds, 14, timestamp="midpoint", normalize=False)
    assert raw[0].times[0] == 7.5 and raw[0].times[-1] == 356.0


def test_biweekly_default_shape(small_synth):
    ds, truth = small_synth
    assert len(ds) == 120 and len(truth) == 120
    assert {len(tr) for tr in ds} == {26}
    assert ds.time_unit == "normalized"
    assert set(truth.labels.tolist()) <= set(range(1, 8))

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsxai import dataset as ds


def test_flat_config_gives_constant_channels():
    cfg = ds.FleetConfig(n_units=2, n_channels=3, noise=0.0, drift=0.0,
                         operating_amplitude=0.0)
    for h in ds.generate_fleet(cfg, seed=1):
        assert np.all(h.channels == h.channels[:, :1])


def test_generation_is_deterministic():
    a = ds.generate_fleet(ds.FleetConfig(n_units=3), seed=5)
    b = ds.generate_fleet(ds.FleetConfig(n_units=3), seed=5)
    for ha, hb in zip(a, b):
        assert ha.tul == hb.tul
        assert np.array_equal(ha.channels, hb.channels)


def test_drifting_channels_rise():
    cfg = ds.FleetConfig(n_units=4, n_channels=4, n_informative=2, drift=3.0, noise=0.1)
    for h in ds.generate_fleet(cfg, seed=2):
        first = h.channels[:, h.cycles == 0].mean(axis=1)
        last = h.channels[:, h.cycles == h.cycles[-1]].mean(axis=1)
        assert np.all(last[:2] > first[:2])


def test_unit_history_invariants():
    cfg = ds.FleetConfig(n_units=3, steps_per_cycle=3)
    for h in ds.generate_fleet(cfg, seed=0):
        assert h.tul > 0
        assert h.cycles[0] == 0
        assert np.all(np.diff(h.cycles) >= 0)
        assert h.channels.shape == (cfg.n_channels, h.length)


@pytest.mark.parametrize("bad", [dict(n_units=0), dict(n_channels=0), dict(life_range=(10, 5)),
                                 dict(noise=-1.0), dict(n_informative=99)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        ds.generate_fleet(ds.FleetConfig(**bad))


def test_zscore_hand_values():
    stats = ds.zscore_fit(np.array([[2.0, 4.0, 6.0]]))
    assert stats.mean[0] == 4.0
    assert math.isclose(stats.std[0], math.sqrt(8 / 3), rel_tol=1e-15)
    out = ds.zscore_apply(stats, np.array([[2.0, 4.0, 6.0]]))
    np.testing.assert_allclose(out, [[-1.224744871391589, 0.0, 1.224744871391589]],
                               rtol=1e-14)


def test_zscore_constant_feature_guard():
    X = np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]])
    with pytest.warns(RuntimeWarning):
        stats = ds.zscore_fit(X)
    assert stats.std[1] == 1.0
    assert np.all(ds.zscore_apply(stats, X)[1] == 0.0)


def test_zscore_on_fleet_round_trip():
    fleet = ds.generate_fleet(ds.FleetConfig(n_units=3), seed=3)
    stats = ds.zscore_fit(fleet)
    norm = ds.zscore_apply(stats, fleet)
    allx = np.concatenate([h.channels for h in norm], axis=1)
    np.testing.assert_allclose(allx.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(allx.std(axis=1), 1, atol=1e-12)
    back = ds.zscore_invert(stats, norm)
    for h0, h1 in zip(fleet, back):
        np.testing.assert_allclose(h1.channels, h0.channels, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_zscore_round_trip_property(values):
    X = np.array([values])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stats = ds.zscore_fit(X)
    back = ds.zscore_invert(stats, ds.zscore_apply(stats, X))
    np.testing.assert_allclose(back, X, rtol=0, atol=1e-12 * max(1.0, np.abs(X).max()))


def _unit(T=200, spc=1):
    cycles = np.arange(T) // spc
    return ds.UnitHistory(0, np.arange(2 * T, dtype=float).reshape(2, T), float(cycles[-1] + 1),
                          cycles)


def test_window_count_and_alignment():
    h = _unit(200)
    w = ds.sliding_windows(h, 160)
    assert len(w) == 40
    assert np.array_equal(w[-1].x[:, -1], h.channels[:, -1])
    assert w[0].x.shape == (2, 160)
    assert w[0].t_end == 160
    np.testing.assert_array_equal(w[0].x, h.channels[:, 1:161])


def test_window_labels():
    for h in ds.generate_fleet(ds.FleetConfig(n_units=3, steps_per_cycle=2), seed=4):
        w = ds.sliding_windows(h, 30)
        assert len(w) == h.length - 30
        ys = [s.y for s in w]
        assert all(a >= b for a, b in zip(ys, ys[1:]))
        for s in w:
            assert s.y == h.tul - h.cycles[s.t_end]
            assert s.y >= 0


def test_window_too_long():
    with pytest.raises(ValueError):
        ds.sliding_windows(_unit(20), 21)


def test_scores():
    assert ds.rmse([1, 2], [1, 2]) == 0
    assert ds.nasa_score([1, 2], [1, 2]) == 0
    assert ds.combined_score([1, 2], [1, 2]) == 0
    assert abs(ds.nasa_score([100], [110]) - (math.e - 1)) < 1e-9
    assert abs(ds.nasa_score([100], [87]) - (math.e - 1)) < 1e-9
    assert ds.rmse([0, 0], [3, 4]) == math.sqrt(12.5)
    assert ds.combined_score([100], [110]) == 0.5 * 10 + 0.5 * ds.nasa_score([100], [110])
    with pytest.raises(ValueError):
        ds.rmse([], [])


@given(st.floats(0, 200), st.floats(0.01, 50))
def test_nasa_asymmetry(y, err):
    over = ds.nasa_score([y], [y + err])
    under = ds.nasa_score([y], [y - err])
    assert over > under > 0


def test_fleet_files_round_trip(tmp_path):
    cfg = ds.FleetConfig(n_units=2, n_channels=3, life_range=(20, 30))
    fleet = ds.generate_fleet(cfg, seed=8)
    ds.save_fleet(fleet, tmp_path, cfg, seed=8)
    back = ds.load_fleet(tmp_path)
    for a, b in zip(fleet, back):
        assert a.tul == b.tul
        assert np.array_equal(a.channels, b.channels)
        assert np.array_equal(a.cycles, b.cycles)
    cfg2, seed = ds.config_from_manifest(tmp_path)
    assert cfg2 == cfg and seed == 8


def test_sample_cache_layout(tmp_path):
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(3, 2, 4)), rng.normal(size=3)
    path = tmp_path / "s.bin"
    ds.save_samples(path, X, y)
    raw = path.read_bytes()
    assert raw[:4] == b"TSXS"
    assert len(raw) == 16 + 8 * (3 * 2 * 4 + 3)
    assert np.frombuffer(raw[16:24], "<f8")[0] == X[0, 0, 0]
    X2, y2 = ds.load_samples(path)
    assert np.array_equal(X, X2) and np.array_equal(y, y2)


def test_split_units():
    fleet = ds.generate_fleet(ds.FleetConfig(n_units=5, life_range=(20, 30)), seed=0)
    train, test = ds.split_units(fleet, 2, seed=1)
    assert len(train) == 3 and len(test) == 2
    assert {h.unit_id for h in train} | {h.unit_id for h in test} == set(range(5))

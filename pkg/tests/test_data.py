import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcrnn.data import (
    DAY_STEPS,
    DataError,
    SpeedSeries,
    ZScore,
    benchmark_graph,
    benchmark_series,
    chronological_split,
    fit_zscore,
    load_series,
    make_windows,
    parse_time,
    seasonal_forcing,
    synth_diffusion,
    time_of_day,
    write_series,
    write_windows,
)
from dcrnn.graph import WeightedDigraph


def series(values, mask=None, start=0):
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    m = np.ones(v.shape, bool) if mask is None else np.asarray(mask, bool).reshape(v.shape)
    return SpeedSeries(start + 300 * np.arange(len(v)), v, m, [f"n{i}" for i in range(v.shape[1])])


FIXTURE = """timestamp,a,b
2012-03-01T00:00:00,60.5,0.0
2012-03-01T00:05:00,61.0,55.0
2012-03-01T00:10:00,,54.5
"""


def test_load_fixture(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text(FIXTURE)
    s = load_series(p)
    assert s.steps == 3 and s.node_ids == ("a", "b")
    assert s.timestamps[1] - s.timestamps[0] == 300
    assert s.timestamps[0] == 1330560000
    np.testing.assert_array_equal(s.mask, [[True, False], [True, True], [False, True]])
    assert s.values[1, 1] == 55.0


def test_missing_sentinel_configurable(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text(FIXTURE.replace("55.0", "-1"))
    s = load_series(p, missing_value=-1.0)
    assert s.mask[0, 1] and not s.mask[1, 1]
    assert load_series(p, missing_value=None).mask[0, 1]


@pytest.mark.parametrize(
    "body, match",
    [
        ("2012-03-01T00:05:00,1,2\n2012-03-01T00:00:00,1,2\n", ":3: timestamps"),
        ("2012-03-01T00:00:00,1\n", ":2: expected 3"),
        ("yesterday,1,2\n", ":2: unparsable timestamp"),
        ("2012-03-01T00:00:00,1,fast\n", ":2: bad value"),
    ],
)
def test_load_errors_carry_line_numbers(tmp_path, body, match):
    p = tmp_path / "s.csv"
    p.write_text("timestamp,a,b\n" + body)
    with pytest.raises(DataError, match=match):
        load_series(p)


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_series(tmp_path / "nope.csv")


def test_series_roundtrip(tmp_path):
    s = benchmark_series(steps=50)
    s.mask[3, 2] = False
    p = tmp_path / "s.csv"
    write_series(p, s)
    back = load_series(p)
    np.testing.assert_array_equal(back.timestamps, s.timestamps)
    np.testing.assert_array_equal(back.mask, s.mask)
    np.testing.assert_array_equal(back.values[s.mask], s.values[s.mask])


def test_parse_time_utc():
    assert parse_time("1970-01-01T00:05:00Z") == 300
    assert parse_time("1970-01-01T01:00:00+01:00") == 0


def test_series_invariants():
    with pytest.raises(DataError):
        SpeedSeries([0, 0], np.zeros((2, 1)), np.ones((2, 1), bool), ["a"])
    with pytest.raises(DataError):
        SpeedSeries([0, 1], [[np.nan], [1.0]], np.ones((2, 1), bool), ["a"])
    SpeedSeries([0, 1], [[np.nan], [1.0]], [[False], [True]], ["a"])


# -- z-score ----------------------------------------------------------------


def test_zscore_hand_values():
    z = fit_zscore(series([1.0, 3.0]), range(2))
    assert (z.mean, z.std) == (2.0, 1.0)


def test_zscore_excludes_masked_and_out_of_range():
    s = series([1.0, 3.0, 100.0, 7.0], mask=[True, True, False, True])
    assert fit_zscore(s, range(3)) == ZScore(2.0, 1.0)


def test_zscore_ignores_later_data():
    a = benchmark_series(steps=300)
    b = benchmark_series(steps=300)
    b.values[200:] = 0.0
    assert fit_zscore(a, range(200)) == fit_zscore(b, range(200))


def test_zscore_errors():
    with pytest.raises(DataError):
        fit_zscore(series([5.0, 5.0]), range(2))
    with pytest.raises(DataError):
        fit_zscore(series([5.0, 6.0]), range(0))
    with pytest.raises(DataError):
        fit_zscore(series([5.0, 6.0], mask=[False, False]), range(2))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(-100, 100), st.floats(0.01, 100))
def test_zscore_roundtrip(xs, mean, std):
    z = ZScore(mean, std)
    x = np.array(xs)
    np.testing.assert_allclose(z.invert(z.apply(x)), x, rtol=0, atol=1e-12 * (1 + np.abs(x).max()))


# -- splits -----------------------------------------------------------------


def test_split_examples():
    assert chronological_split(100) == (range(0, 70), range(70, 80), range(80, 100))
    assert chronological_split(10) == (range(0, 7), range(7, 8), range(8, 10))


@given(st.integers(0, 100_000))
def test_split_is_a_contiguous_partition(n):
    tr, va, te = chronological_split(n)
    assert tr.start == 0 and tr.stop == va.start and va.stop == te.start and te.stop == n
    assert len(tr) == int(0.7 * n + 1e-9)


def test_split_rejects_bad_fractions():
    with pytest.raises(DataError):
        chronological_split(10, (0.5, 0.5, 0.5))


# -- windows ----------------------------------------------------------------


def test_window_counts():
    assert len(make_windows(series(np.arange(5.0) + 1), 3, 2)) == 1
    assert len(make_windows(series(np.arange(4.0) + 1), 3, 2)) == 0
    assert make_windows(series(np.arange(4.0) + 1), 3, 2).inputs.shape == (0, 3, 1, 1)


def test_window_contents_are_adjacent():
    s = series(np.arange(1.0, 11.0))
    w = make_windows(s, 3, 2, range(2, 10))
    assert len(w) == 8 - 5 + 1
    np.testing.assert_array_equal(w.inputs[0, :, 0, 0], [3, 4, 5])
    np.testing.assert_array_equal(w.targets[0, :, 0, 0], [6, 7])
    np.testing.assert_array_equal(w.starts, [2, 3, 4, 5])
    assert w[1].inputs.shape == (3, 1, 1)


def test_windows_stay_inside_each_split():
    s = benchmark_series(steps=200)
    s.values[:] = np.arange(200)[:, None] + 1.0
    for span in chronological_split(200):
        w = make_windows(s, 4, 3, span)
        if len(w):
            assert w.inputs.min() >= span.start + 1 and w.targets.max() <= span.stop


def test_windows_normalise_and_zero_masked_inputs():
    s = series([1.0, 3.0, 5.0, 7.0], mask=[True, False, True, True])
    z = ZScore(4.0, 2.0)
    w = make_windows(s, 2, 2, zscore=z)
    np.testing.assert_array_equal(w.inputs[0, :, 0, 0], [-1.5, 0.0])
    np.testing.assert_array_equal(w.target_mask[0, :, 0], [True, True])


def test_time_of_day_channel():
    s = series(np.ones(6) + 1, start=86400 - 600)
    w = make_windows(s, 2, 2, time_of_day_feature=True)
    assert w.inputs.shape[-1] == 2 and w.aux.shape == (3, 2, 1, 1)
    np.testing.assert_allclose(w.inputs[0, :, 0, 1], [1 - 600 / 86400, 1 - 300 / 86400])
    np.testing.assert_allclose(w.aux[0, :, 0, 0], [0.0, 300 / 86400])
    assert time_of_day([43200]) == pytest.approx(0.5)


def test_write_windows(tmp_path):
    w = make_windows(series([1.0, 2.0, 3.0], mask=[True, True, False]), 2, 1)
    p = tmp_path / "w.csv"
    write_windows(p, w)
    assert p.read_text().splitlines() == [
        "sample,part,step,node,channel,value",
        "0,input,0,0,0,1.0",
        "0,input,1,0,0,2.0",
        "0,target_masked,0,0,0,0.0",
    ]


# -- synthetic ----------------------------------------------------------------


def chain(n):
    w = np.zeros((n, n))
    for i in range(n - 1):
        w[i, i + 1] = 1.0
    return WeightedDigraph.from_dense(w)


def test_synth_without_dynamics_is_forcing():
    g = chain(4)
    s = synth_diffusion(g, 300, noise_std=0.0, lam=0.0)
    np.testing.assert_array_equal(s.values, np.clip(seasonal_forcing(4, 300), 0, 80))


def test_synth_seeded():
    g = chain(4)
    a, b = synth_diffusion(g, 100, seed=3), synth_diffusion(g, 100, seed=3)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, synth_diffusion(g, 100, seed=4).values)
    assert a.values.min() >= 0 and a.values.max() <= 80


def test_synth_diffuses_downstream():
    """Shocks at the upstream node show up at the downstream node one step later."""
    g = chain(2)
    s = synth_diffusion(g, 20000, noise_std=1.0, seed=0)
    d = s.values - synth_diffusion(g, 20000, noise_std=0.0, seed=0).values
    up, down = d[:, 0], d[:, 1]
    lag1 = np.corrcoef(up[:-1], down[1:])[0, 1]
    lag0 = np.corrcoef(up, down)[0, 1]
    assert lag1 > lag0 + 0.1


def test_synth_rejects_zero_steps():
    with pytest.raises(DataError):
        synth_diffusion(chain(2), 0)


def test_forcing_period():
    f = seasonal_forcing(3, 3 * DAY_STEPS)
    np.testing.assert_allclose(f[:DAY_STEPS], f[DAY_STEPS : 2 * DAY_STEPS], atol=1e-10)


def test_benchmark_fixture():
    g = benchmark_graph()
    s = benchmark_series()
    assert g.n == 8 and s.steps == 2000 and s.node_ids == g.node_ids
    np.testing.assert_array_equal(s.values, benchmark_series().values)
    assert len(make_windows(s, 12, 12, chronological_split(2000)[0])) == 1377

import numpy as np
import pytest

from promptst.dataio import (
    GridSeries,
    fit_normalizer,
    load_grid_csv,
    save_grid_csv,
    select_attributes,
    split,
    synthesize,
    windows,
)
from promptst.exceptions import (
    DataFormatError,
    MalformedHeaderError,
    NegativeValueError,
    RowCountError,
    SeriesTooShortError,
)

SMALL_FILE = """STGRID 1
rows=2 cols=2 attributes=1 timesteps=2 interval_min=60
pickups
t=0 a=0 1.0,0.0,3.5,2.0
t=1 a=0 0.0,2.0,1.0,4.0
"""


def _write(tmp_path, text, name="grid.stgrid"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_small_file_round_trips_bit_exactly(tmp_path):
    series = load_grid_csv(_write(tmp_path, SMALL_FILE))
    assert series.values.shape == (2, 4, 1)
    assert series.attribute_names == ["pickups"]
    np.testing.assert_array_equal(series.values[1, :, 0], [0.0, 2.0, 1.0, 4.0])

    out = str(tmp_path / "copy.stgrid")
    save_grid_csv(series, out)
    assert open(out).read() == SMALL_FILE
    np.testing.assert_array_equal(load_grid_csv(out).values, series.values)


def test_synthetic_file_round_trips_bit_exactly(tmp_path):
    series = synthesize(2, 3, 2, 30, seed=1)
    series.values[0, 0, 0] = 0.1 + 0.2
    path = str(tmp_path / "synth.stgrid")
    save_grid_csv(series, path)
    loaded = load_grid_csv(path)
    np.testing.assert_array_equal(loaded.values, series.values)
    assert loaded.attribute_names == series.attribute_names


def test_region_count_must_match_grid(tmp_path):
    text = SMALL_FILE.replace("interval_min=60", "interval_min=60 regions=5")
    with pytest.raises(MalformedHeaderError) as info:
        load_grid_csv(_write(tmp_path, text))
    assert info.value.line == 2


def test_negative_value_rejected_with_line_number(tmp_path):
    text = SMALL_FILE.replace("t=1 a=0 0.0,2.0", "t=1 a=0 -1,2.0")
    with pytest.raises(NegativeValueError) as info:
        load_grid_csv(_write(tmp_path, text))
    assert info.value.line == 5
    assert ":5:" in str(info.value)


@pytest.mark.parametrize("text, error, line", [
    (SMALL_FILE.replace("STGRID 1", "GRID 1"), MalformedHeaderError, 1),
    (SMALL_FILE.replace("rows=2", "rows=two"), MalformedHeaderError, 2),
    (SMALL_FILE.replace("1.0,0.0,3.5,2.0", "1.0,0.0,3.5"), RowCountError, 4),
    (SMALL_FILE.replace("t=1 a=0", "t=0 a=0"), DataFormatError, 5),
    (SMALL_FILE.replace("3.5", "x"), DataFormatError, 4),
])
def test_parse_errors_carry_line_numbers(tmp_path, text, error, line):
    with pytest.raises(error) as info:
        load_grid_csv(_write(tmp_path, text))
    assert info.value.line == line


def test_missing_data_line_rejected(tmp_path):
    with pytest.raises(RowCountError):
        load_grid_csv(_write(tmp_path, SMALL_FILE.rsplit("t=1", 1)[0]))


def test_split_is_seven_one_two():
    series = synthesize(2, 2, 1, 100, seed=0)
    train, val, test = split(series, input_len=3, horizon=3)
    assert (train.num_steps, val.num_steps, test.num_steps) == (70, 10, 20)
    assert (train.offset, val.offset, test.offset) == (0, 70, 80)


def test_split_too_short():
    with pytest.raises(SeriesTooShortError):
        split(synthesize(2, 2, 1, 10, seed=0), input_len=12, horizon=12)


def test_windows_never_straddle_splits():
    series = synthesize(2, 2, 1, 100, seed=0)
    parts = split(series, input_len=3, horizon=2)
    last_target = [max(w.origin + 3 + 2 - 1 for w in windows(p, 3, 2)) for p in parts]
    first_input = [min(w.origin for w in windows(p, 3, 2)) for p in parts]
    assert last_target[0] < first_input[1]
    assert last_target[1] < first_input[2]


def test_window_counts_and_targets():
    series = synthesize(2, 2, 1, 9, seed=0)
    assert len(windows(series.slice_time(0, 5), 3, 2)) == 1
    samples = windows(series, 3, 2)
    assert len(samples) == 5
    for sample in samples:
        np.testing.assert_array_equal(sample.Y, series.values[sample.origin + 3:sample.origin + 5])
    assert len(windows(series, 3, 2, stride=2)) == 3
    assert windows(series.slice_time(0, 4), 3, 2) == []


def test_constant_attribute_normalizes_to_zero():
    series = GridSeries(np.full((5, 4, 1), 3.0), 2, 2)
    normalizer = fit_normalizer(series)
    np.testing.assert_array_equal(normalizer.apply(series.values), 0.0)


def test_normalizer_round_trip_and_no_leakage(rng):
    train = GridSeries(rng.uniform(0, 10, size=(20, 4, 2)), 2, 2)
    normalizer = fit_normalizer(train)
    x = rng.uniform(0, 10, size=(7, 4, 2))
    np.testing.assert_allclose(normalizer.invert(normalizer.apply(x)), x, atol=1e-12)
    above = train.values.max(axis=(0, 1)) + 1.0
    assert np.all(normalizer.apply(above) > 1.0)
    np.testing.assert_array_equal(normalizer.apply(above, clip=True), 1.0)
    scaled = normalizer.apply_series(train)
    assert scaled.normalized and scaled.values.min() >= 0.0 and scaled.values.max() <= 1.0


def test_synthesize_is_deterministic_and_non_negative():
    a = synthesize(4, 4, 4, 200, seed=3)
    b = synthesize(4, 4, 4, 200, seed=3)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.all(a.values >= 0)
    assert a.attribute_names == ["shared_0", "shared_1", "distinct_0", "distinct_1"]


def test_shared_attributes_correlate_more_than_distinct_ones():
    series = synthesize(4, 4, 6, 480, seed=0, shared_frac=4 / 6)
    spatial_means = series.values.mean(axis=0)
    corr = np.corrcoef(spatial_means.T)
    shared_pairs = [corr[i, j] for i in range(4) for j in range(i + 1, 4)]
    distinct_pair = corr[4, 5]
    assert min(shared_pairs) > distinct_pair


def test_select_attributes():
    series = synthesize(2, 2, 3, 20, seed=0)
    same = select_attributes(series, [0, 1, 2])
    np.testing.assert_array_equal(same.values, series.values)
    first = select_attributes(series, [0])
    assert first.num_attributes == 1
    np.testing.assert_array_equal(first.values[..., 0], series.values[..., 0])
    left, right = select_attributes(series, [0, 2]), select_attributes(series, [1])
    assert sorted(left.attribute_names + right.attribute_names) == sorted(series.attribute_names)
    with pytest.raises(DataFormatError):
        select_attributes(series, [0, 0])
    with pytest.raises(DataFormatError):
        select_attributes(series, [3])


def test_stride_one_windows_rebuild_the_series():
    series = synthesize(2, 2, 2, 30, seed=4)
    samples = windows(series, 5, 3)
    firsts = np.stack([sample.X[0] for sample in samples])
    np.testing.assert_array_equal(firsts, series.values[:len(samples)])
    last = samples[-1]
    rebuilt = np.concatenate([firsts, last.X[1:], last.Y])
    np.testing.assert_array_equal(rebuilt, series.values)

import numpy as np
import pandas as pd
import pytest

from imputad.dataset import (
    SCALE_FLOOR,
    NormStats,
    RawSeries,
    check_layout,
    fit_normalizer,
    load_dataset_dir,
    load_label_file,
    load_raw,
    window_starts,
    windowize,
    write_binary,
)
from imputad.errors import DataError


def test_load_csv_fills_non_finite_cells(tmp_path):
    path = tmp_path / "series.csv"
    path.write_text("f0,f1\n1.0,\n2.0,5.0\n,6.0\ninf,7.0\n")

    series = load_raw(str(path))

    assert series.n_features == 2
    assert series.length == 4
    assert series.replaced_cells == 3
    # forward fill, then zero for a leading gap
    np.testing.assert_array_equal(series.values[:, 0], [1.0, 2.0, 2.0, 2.0])
    np.testing.assert_array_equal(series.values[:, 1], [0.0, 5.0, 6.0, 7.0])
    assert series.labels is None


def test_load_csv_reads_label_column(tmp_path):
    path = tmp_path / "series.csv"
    pd.DataFrame({"f0": [0.1, 0.2, 0.3], "label": [0, 1, 0]}).to_csv(path, index=False)

    series = load_raw(str(path))

    assert series.n_features == 1
    np.testing.assert_array_equal(series.labels, [0, 1, 0])


def test_non_binary_labels_rejected(tmp_path):
    path = tmp_path / "series.csv"
    pd.DataFrame({"f0": [0.1, 0.2], "label": [0, 2]}).to_csv(path, index=False)

    with pytest.raises(DataError, match="non-binary"):
        load_raw(str(path))


def test_empty_and_missing_files(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("f0,f1\n")
    with pytest.raises(DataError, match="zero rows"):
        load_raw(str(empty))
    with pytest.raises(DataError, match="missing file"):
        load_raw(str(tmp_path / "nope.csv"))


def test_binary_file_with_sidecar(tmp_path):
    values = np.arange(12, dtype=np.float64).reshape(4, 3)
    path = str(tmp_path / "series.bin")
    write_binary(path, values, dtype="float32", labels=np.array([0, 0, 1, 1]))

    series = load_raw(path)

    np.testing.assert_allclose(series.values, values)
    np.testing.assert_array_equal(series.labels, [0, 0, 1, 1])


def test_binary_file_size_must_match_metadata(tmp_path):
    path = str(tmp_path / "series.bin")
    write_binary(path, np.ones((4, 2)))
    with open(path + ".meta", "w") as f:
        f.write("rows=5\ncols=2\ndtype=float64\n")

    with pytest.raises(DataError, match="metadata declares"):
        load_raw(path)


def test_binary_file_without_metadata(tmp_path):
    path = tmp_path / "series.bin"
    np.ones(4).tofile(path)
    with pytest.raises(DataError, match="sidecar"):
        load_raw(str(path))


def test_raw_series_is_read_only():
    series = RawSeries(values=np.ones((3, 2)))
    with pytest.raises(ValueError):
        series.values[0, 0] = 5.0


def test_fit_normalizer_floors_constant_features():
    series = RawSeries(values=np.column_stack([np.arange(4.0), np.full(4, 3.0)]))

    stats = fit_normalizer(series)

    np.testing.assert_allclose(stats.center, [1.5, 3.0])
    assert stats.scale[0] == pytest.approx(np.std(np.arange(4.0)))
    assert stats.scale[1] == SCALE_FLOOR
    normalized = stats.normalize(series.values)
    np.testing.assert_allclose(normalized[:, 0].mean(), 0.0, atol=1e-12)
    np.testing.assert_allclose(stats.denormalize(normalized), series.values)


def test_norm_stats_serialization():
    stats = NormStats(center=np.array([1.0, -2.0]), scale=np.array([0.5, 3.0]))
    restored = NormStats.from_dict(stats.to_dict())
    np.testing.assert_array_equal(restored.center, stats.center)
    np.testing.assert_array_equal(restored.scale, stats.scale)

    with pytest.raises(DataError):
        NormStats(center=np.zeros(2), scale=np.array([1.0, 0.0]))


def test_window_starts_end_align_the_remainder():
    assert window_starts(300, 100) == [0, 100, 200]
    assert window_starts(150, 100) == [0, 50]
    assert window_starts(100, 100) == [0]
    assert window_starts(250, 100, stride=50) == [0, 50, 100, 150]


def test_windowize_partial_final_window():
    values = np.arange(150 * 2, dtype=np.float64).reshape(150, 2)
    series = RawSeries(values=values, labels=np.zeros(150, dtype=np.int64))
    stats = NormStats(center=np.zeros(2), scale=np.ones(2))

    windows = windowize(series, stats, window=100)

    assert len(windows) == 2
    assert windows.starts == [0, 50]
    assert windows.stacked().shape == (2, 100, 2)
    # the last covering window is the score source
    assert set(windows.coverage[:50]) == {0}
    assert set(windows.coverage[50:]) == {1}
    np.testing.assert_array_equal(windows.windows[1].values[0], values[50])


def test_windowize_rejects_window_longer_than_series():
    series = RawSeries(values=np.ones((50, 2)))
    stats = NormStats(center=np.zeros(2), scale=np.ones(2))
    with pytest.raises(DataError, match="exceeds series length"):
        windowize(series, stats, window=100)


def test_label_file_with_and_without_header(tmp_path):
    with_header = tmp_path / "a.csv"
    with_header.write_text("label\n0\n1\n1\n")
    without_header = tmp_path / "b.csv"
    without_header.write_text("0\n1\n1\n")

    np.testing.assert_array_equal(load_label_file(str(with_header)), [0, 1, 1])
    np.testing.assert_array_equal(load_label_file(str(without_header)), [0, 1, 1])


def test_dataset_layout(synthetic_dir, tmp_path):
    assert check_layout(synthetic_dir) == []
    splits = load_dataset_dir(synthetic_dir)
    assert splits.name == "synth"
    assert splits.train.n_features == splits.test.n_features == 2
    assert splits.test.labels.sum() > 0

    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "train.csv").write_text("f0\n1\n2\n")
    problems = check_layout(str(broken))
    assert len(problems) == 2
    with pytest.raises(DataError, match="missing test.csv"):
        load_dataset_dir(str(broken))


def test_label_count_must_match_test_split(synthetic_dir):
    path = f"{synthetic_dir}/test_label.csv"
    pd.DataFrame({"label": [0, 1]}).to_csv(path, index=False)
    with pytest.raises(DataError, match="test_label has 2 rows"):
        load_dataset_dir(synthetic_dir)

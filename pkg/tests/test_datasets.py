import numpy as np
import pytest

from mmn.datasets import (DatasetLoadError, generate_dataset, load_dataset, save_dataset)
from mmn.simulators import ARM, SINE, ConfigurationError, arm_forward, sine_forward


@pytest.fixture(scope="module")
def sine_paper():
    return generate_dataset(SINE, (8000, 2000, 1000), seed=5)


def test_sine_paper_sizes(sine_paper):
    assert len(sine_paper) == 11000
    assert sine_paper.sizes() == (8000, 2000, 1000)
    assert np.all(np.abs(sine_paper.Y) <= 2)


def test_splits_are_contiguous_and_exhaustive(sine_paper):
    labels = list(sine_paper.split)
    assert labels == ["train"] * 8000 + ["val"] * 2000 + ["test"] * 1000


def test_generation_is_deterministic():
    a = generate_dataset(SINE, (50, 10, 10), seed=3)
    b = generate_dataset(SINE, (50, 10, 10), seed=3)
    assert a.equals(b)
    c = generate_dataset(SINE, (50, 10, 10), seed=4)
    assert not np.array_equal(a.X, c.X)


def test_arm_consistency():
    ds = generate_dataset(ARM, (8000, 2000, 1000), seed=2)
    assert np.array_equal(arm_forward(ds.X), ds.Y)


def test_zero_train_rejected():
    with pytest.raises(ConfigurationError):
        generate_dataset(SINE, (0, 10, 10), seed=0)


def test_round_trip(tmp_path):
    ds = generate_dataset(ARM, (40, 7, 9), seed=8)
    h1 = save_dataset(ds, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv")
    assert back.equals(ds)
    assert back.X.tobytes() == ds.X.tobytes()
    assert save_dataset(back, tmp_path / "e.csv") == h1


def test_round_trip_keeps_simulator_consistency(tmp_path):
    ds = generate_dataset(SINE, (100, 10, 10), seed=1)
    save_dataset(ds, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv")
    assert np.max(np.abs(back.Y - sine_forward(back.X))) == 0


def test_file_layout(tmp_path):
    ds = generate_dataset(SINE, (2, 1, 1), seed=1)
    save_dataset(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].startswith("# {")
    assert lines[1] == "x_0,x_1,y_0,split"
    assert lines[2].endswith(",train") and lines[-1].endswith(",test")
    assert len(lines) == 6


def _write(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    return p


def test_empty_file(tmp_path):
    with pytest.raises(DatasetLoadError, match="missing header"):
        load_dataset(_write(tmp_path, ""))


def test_non_numeric_cell_names_row(tmp_path):
    p = _write(tmp_path, "x_0,y_0,split\n0.5,1.0,train\nabc,1.0,train\n")
    with pytest.raises(DatasetLoadError) as info:
        load_dataset(p)
    assert info.value.row == 3
    assert "row 3" in str(info.value)


def test_nan_rejected(tmp_path):
    with pytest.raises(DatasetLoadError, match="non-finite"):
        load_dataset(_write(tmp_path, "x_0,y_0,split\nnan,1.0,train\n"))


def test_bad_split_label(tmp_path):
    with pytest.raises(DatasetLoadError, match="split label"):
        load_dataset(_write(tmp_path, "x_0,y_0,split\n0.1,1.0,holdout\n"))


def test_malformed_header(tmp_path):
    with pytest.raises(DatasetLoadError, match="header"):
        load_dataset(_write(tmp_path, "a,b,c\n1,2,train\n"))

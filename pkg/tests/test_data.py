import numpy as np
import pytest

from ivate.data import (ColumnMap, column_map_for_saved, dichotomize, from_arrays,
                        impute_mean_with_indicators, load_csv, require_complete, save_csv,
                        weighted_median)
from ivate.errors import DataError, DegenerateDataError, SchemaError, ValidationError


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_intercept_and_names():
    ds = from_arrays([0, 1, 1], [0, 1, 0], [1, 0, 1], [[0.5], [1.5], [2.5]], column_names=["age"])
    assert ds.column_names == ["intercept", "age"]
    assert np.all(ds.x[:, 0] == 1) and ds.p == 2 and ds.n == len(ds) == 3
    assert ds.binary_outcome
    unit = ds[1]
    assert (unit.z, unit.d, unit.y, unit.w) == (1, 1, 0.0, 1.0)
    assert len(ds.samples()) == 3


def test_nonbinary_instrument_reports_rows():
    with pytest.raises(ValidationError) as err:
        from_arrays([0, 2, 1, 0.5], [0, 1, 1, 0], [1, 0, 1, 0])
    assert list(err.value.rows) == [2, 4]
    assert "2, 4" in str(err.value)


def test_instrument_arms_required():
    with pytest.raises(DegenerateDataError):
        from_arrays([1, 1], [0, 1], [0, 1])


def test_binary_flag_enforced():
    with pytest.raises(ValidationError):
        from_arrays([0, 1], [0, 1], [0.3, 1], binary_outcome=True)
    assert not from_arrays([0, 1], [0, 1], [0.3, 1]).binary_outcome


def test_weights_normalised():
    ds = from_arrays([0, 1, 1, 0], [0, 1, 0, 1], [0, 1, 1, 0], w=[1, 2, 3, 4])
    assert ds.w.mean() == pytest.approx(1.0, abs=1e-15)
    assert ds.mean(np.ones(4)) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        from_arrays([0, 1], [0, 1], [0, 1], w=[1, 0])


def test_take_renormalises():
    ds = from_arrays([0, 1, 1, 0], [0, 1, 0, 1], [0, 1, 1, 0], w=[1, 2, 3, 4])
    sub = ds.take([0, 0, 1, 2])
    assert sub.n == 4 and sub.w.mean() == pytest.approx(1.0, abs=1e-15)


def test_load_csv_drops_missing_core_rows(tmp_path):
    p = write(tmp_path, "z,d,y,age,wt\n1,1,1,30,1\n0,0,,40,2\n0,1,0,NA,1\n1,0,1,50,1\n")
    ds = load_csv(p, ColumnMap("z", "d", "y", ("age",), "wt"))
    assert ds.n == 3 and ds.metadata["dropped_rows"] == 1
    assert np.isnan(ds.x[1, 1])
    with pytest.raises(ValidationError):
        require_complete(ds, ["age"])


def test_load_csv_errors(tmp_path):
    with pytest.raises(SchemaError):
        load_csv(write(tmp_path, "z,d\n1,1\n"), ColumnMap("z", "d", "y"))
    with pytest.raises(ValidationError) as err:
        load_csv(write(tmp_path, "z,d,y\n1,1,1\n0,3,0\n"), ColumnMap("z", "d", "y"))
    assert list(err.value.rows) == [2]
    with pytest.raises(ValidationError):
        load_csv(write(tmp_path, "z,d,y\n1,1,abc\n0,1,0\n"), ColumnMap("z", "d", "y"))
    with pytest.raises(DataError):
        load_csv(tmp_path / "missing.csv", ColumnMap("z", "d", "y"))


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    n = 50
    ds = from_arrays(rng.integers(0, 2, n), rng.integers(0, 2, n), rng.normal(size=n),
                     rng.normal(size=(n, 2)), w=rng.uniform(0.2, 3, n), column_names=["a", "b"])
    save_csv(ds, tmp_path / "o.csv")
    back = load_csv(tmp_path / "o.csv", column_map_for_saved(ds))
    for attr in ("z", "d", "y", "x", "w"):
        assert np.array_equal(getattr(ds, attr), getattr(back, attr))


def test_impute_mean_with_indicators():
    x = np.array([[1.0, 5.0], [np.nan, 6.0], [3.0, 7.0], [np.nan, 8.0]])
    ds = from_arrays([0, 1, 0, 1], [0, 1, 1, 0], [0, 1, 1, 1], x, w=[1, 1, 3, 1],
                     column_names=["a", "b"])
    out = impute_mean_with_indicators(ds, ["a", "b"])
    assert out.column_names == ["intercept", "a", "b", "a_missing"]
    # weighted mean of observed a: (1*1 + 3*3) / 4
    assert out.x[1, 1] == pytest.approx(2.5) and out.x[3, 1] == pytest.approx(2.5)
    assert list(out.x[:, 3]) == [0, 1, 0, 1]
    require_complete(out)
    with pytest.raises(DataError):
        impute_mean_with_indicators(ds, ["intercept"])


def test_dichotomize_median():
    ds = from_arrays([0, 1, 0, 1], [0, 1, 1, 0], [1.0, 2.0, 3.0, 4.0])
    out = dichotomize(ds)
    assert out.binary_outcome and out.metadata["dichotomize_threshold"] == 2.5
    assert list(out.y) == [0, 0, 1, 1]
    assert list(dichotomize(ds, 3.0).y) == [0, 0, 0, 1]
    with pytest.raises(DataError):
        dichotomize(out)


def test_weighted_median():
    assert weighted_median([1, 2, 3], [1, 1, 10]) == 3
    assert weighted_median([1, 2, 3, 4], [1, 1, 1, 1]) == 2.5

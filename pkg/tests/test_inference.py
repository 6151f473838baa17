import numpy as np
import pytest

from ivate.data import from_arrays
from ivate.errors import NumericalError
from ivate.estimators import EstimatorConfig
from ivate.inference import BootstrapConfig, bootstrap_ci, quantile, replicate_rows
from ivate.simulate import config_for, generate


def test_quantile_examples():
    assert quantile([1, 2, 3, 4], 0.5) == 2.5
    assert quantile([0, 10], 0.25) == 2.5
    assert quantile([5, 1, 3], 0.0) == 1 and quantile([5, 1, 3], 1.0) == 5
    with pytest.raises(ValueError):
        quantile([], 0.5)
    with pytest.raises(ValueError):
        quantile([1, 2], 1.5)


def test_quantile_matches_numpy_linear():
    v = np.random.default_rng(0).normal(size=37)
    for q in (0.025, 0.3, 0.975):
        assert quantile(v, q) == pytest.approx(np.quantile(v, q), abs=1e-15)


def test_config_validation():
    for bad in (dict(replicates=0), dict(ci_level=1.0), dict(failure_policy="retry"),
                dict(seed=-1)):
        with pytest.raises(ValueError):
            BootstrapConfig(**bad)


def test_replicate_rows_are_keyed_streams():
    a = replicate_rows(7, 3, 50)
    assert np.array_equal(a, replicate_rows(7, 3, 50))
    assert not np.array_equal(a, replicate_rows(7, 4, 50))
    assert a.min() >= 0 and a.max() < 50


def _mean_y(ds):
    return ds.mean(ds.y)


def test_degenerate_ci_collapses():
    ds = from_arrays([0, 1] * 10, [0, 1, 1, 0] * 5, [1.0] * 20)
    rep = bootstrap_ci(ds, _mean_y, BootstrapConfig(replicates=50, seed=1))
    assert rep.ci == (1.0, 1.0) and rep.delta_hat == 1.0


def test_bootstrap_determinism_and_order():
    ds = generate(400, seed=2)[0]
    cfg = config_for("CCCC", approximate_roots=False)
    runs = [bootstrap_ci(ds, "b-reg", BootstrapConfig(replicates=30, seed=99), estimator_config=cfg)
            for _ in range(2)]
    assert runs[0].ci == runs[1].ci
    assert np.array_equal(runs[0].extra["replicates"], runs[1].extra["replicates"])
    lo, hi = runs[0].ci
    assert lo <= runs[0].delta_hat <= hi
    other = bootstrap_ci(ds, "b-reg", BootstrapConfig(replicates=30, seed=100), estimator_config=cfg)
    assert other.ci != runs[0].ci


def test_higher_level_widens():
    ds = generate(300, seed=3)[0]
    narrow = bootstrap_ci(ds, _mean_y, BootstrapConfig(replicates=200, seed=5, ci_level=0.8))
    wide = bootstrap_ci(ds, _mean_y, BootstrapConfig(replicates=200, seed=5, ci_level=0.95))
    assert wide.ci[0] <= narrow.ci[0] and wide.ci[1] >= narrow.ci[1]


def test_parallel_matches_serial():
    ds = generate(300, seed=4)[0]
    cfg = config_for("CCCC", approximate_roots=False)
    serial = bootstrap_ci(ds, "ipw", BootstrapConfig(replicates=12, seed=3), estimator_config=cfg)
    par = bootstrap_ci(ds, "ipw", BootstrapConfig(replicates=12, seed=3, workers=2),
                       estimator_config=cfg)
    assert np.array_equal(serial.extra["replicates"], par.extra["replicates"])


def test_failure_policies():
    ds = from_arrays([0, 1] * 50, [0, 1] * 50, [0, 1] * 50)
    with pytest.raises(NumericalError):
        bootstrap_ci(ds, _fragile_ok_on_full(ds), BootstrapConfig(replicates=40, seed=1))
    with pytest.raises(NumericalError):
        bootstrap_ci(ds, _fragile_ok_on_full(ds),
                     BootstrapConfig(replicates=40, seed=1, failure_policy="abort"))


def _fragile_ok_on_full(full):
    def stat(ds):
        if ds is not full and ds.mean(ds.y) >= 0.5:
            raise NumericalError("synthetic failure")
        return ds.mean(ds.y)
    return stat


def test_drop_and_report_counts_failures():
    ds = from_arrays([0, 1] * 50, [0, 1] * 50, [0, 1] * 50)

    def stat(d):
        if d is not ds and d.mean(d.y) > 0.62:
            raise NumericalError("synthetic failure")
        return d.mean(d.y)
    rep = bootstrap_ci(ds, stat, BootstrapConfig(replicates=200, seed=2))
    fails = rep.extra["bootstrap_failures"]
    assert 0 < fails <= 40
    assert np.isnan(rep.extra["replicates"]).sum() == fails
    assert any("failed" in w for w in rep.warnings)


def test_late_and_ett_tags():
    ds = generate(300, seed=5)[0]
    cols = ["intercept", "x2"]
    cfg = EstimatorConfig(delta=cols, delta_d=cols, op_d=cols, op_y=cols, propensity=cols)
    rep = bootstrap_ci(ds, "late", BootstrapConfig(replicates=5, seed=1), estimator_config=cfg)
    assert rep.estimator_tag == "late" and rep.ci[0] <= rep.ci[1]

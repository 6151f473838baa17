import numpy as np
import pytest

from ivate.data import from_arrays
from ivate.errors import ConvergenceError, SingularMatrixError
from ivate.mestimate import EstimatingSystem, Stack, fd_jacobian, sandwich_variance, solve


@pytest.fixture
def ds():
    rng = np.random.default_rng(8)
    n = 300
    x = rng.normal(size=n)
    y = 0.5 + 2.0 * x + rng.standard_t(5, size=n) * (1 + 0.5 * np.abs(x))
    return from_arrays(rng.integers(0, 2, n), rng.integers(0, 2, n), y, x, w=rng.uniform(0.5, 2, n))


def ols_system():
    return EstimatingSystem(lambda d, t: d.x * (d.y - d.x @ t)[:, None], 2, "ols")


def test_solve_linear_equation_exactly(ds):
    res = solve(ols_system(), ds, np.zeros(2))
    xw = ds.x * ds.w[:, None]
    exact = np.linalg.solve(xw.T @ ds.x, xw.T @ ds.y)
    assert res.converged and np.allclose(res.theta_hat, exact, atol=1e-10)
    assert res.residual_norm < 1e-9


def test_constant_residual_has_no_root(ds):
    system = EstimatingSystem(lambda d, t: np.ones((d.n, 1)) + 0 * t[0], 1, "const")
    with pytest.raises(ConvergenceError) as err:
        solve(system, ds, np.zeros(1))
    assert err.value.best is not None
    res = solve(system, ds, np.zeros(1), approximate=True)
    assert not res.converged and res.residual_norm == pytest.approx(1.0)


def test_nonlinear_root(ds):
    # weighted mean of y solved through a cubic reparametrisation
    system = EstimatingSystem(lambda d, t: d.y - t[0] ** 3, 1)
    res = solve(system, ds, np.array([1.0]))
    assert res.converged and res.residual_norm < 1e-9
    assert res.theta_hat[0] ** 3 == pytest.approx(ds.mean(ds.y), abs=1e-9)


def test_sandwich_mean_matches_closed_form(ds):
    system = EstimatingSystem(lambda d, t: d.y - t[0], 1)
    theta = ds.mean(ds.y)
    var = sandwich_variance(system, ds, np.array([theta]))
    closed = ds.mean((ds.y - theta) ** 2) / ds.n
    assert var[0, 0] == pytest.approx(closed, rel=1e-8)


def test_sandwich_ols_matches_hc0(ds):
    theta = solve(ols_system(), ds, np.zeros(2)).theta_hat
    var = sandwich_variance(ols_system(), ds, theta)
    e = ds.y - ds.x @ theta
    w = ds.w
    bread = (ds.x * w[:, None]).T @ ds.x
    meat = (ds.x * (w * e ** 2)[:, None]).T @ ds.x
    # weights act as frequencies: (X'WX)^-1 X'W e^2 X (X'WX)^-1
    hc0 = np.linalg.inv(bread) @ meat @ np.linalg.inv(bread)
    assert np.allclose(var, hc0, rtol=1e-7)


def test_sandwich_singular_bread(ds):
    system = EstimatingSystem(lambda d, t: np.column_stack([d.y - t[0] - t[1], d.y - t[0] - t[1]]), 2)
    with pytest.raises(SingularMatrixError):
        sandwich_variance(system, ds, np.zeros(2))


def test_stack_split_join_and_index():
    st = Stack().add("a", 2, None).add("b", 1, None)
    params = st.split(np.array([1.0, 2.0, 3.0]))
    assert list(params["a"]) == [1.0, 2.0] and list(params["b"]) == [3.0]
    assert list(st.join(params)) == [1.0, 2.0, 3.0]
    assert st.index("b") == slice(2, 3) and st.dim == 3
    with pytest.raises(KeyError):
        st.index("c")


def test_stacked_two_step_variance_accounts_for_first_step(ds):
    # theta2 = mean(y) - theta1 with theta1 = mean(x): variance of the
    # difference, not of mean(y) alone
    st = Stack()
    st.add("m1", 1, lambda d, p: d.x[:, 1] - p["m1"][0])
    st.add("m2", 1, lambda d, p: d.y - p["m1"][0] - p["m2"][0])
    sys_ = st.system()
    theta = solve(sys_, ds, np.zeros(2)).theta_hat
    var = sandwich_variance(sys_, ds, theta)
    diff = ds.y - ds.x[:, 1]
    closed = ds.mean((diff - ds.mean(diff)) ** 2) / ds.n
    assert var[1, 1] == pytest.approx(closed, rel=1e-8)


def test_fd_jacobian_linear():
    a = np.array([[1.0, 2.0], [3.0, -4.0]])
    assert np.allclose(fd_jacobian(lambda t: a @ t, np.array([0.3, 100.0])), a, atol=1e-8)

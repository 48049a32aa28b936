import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import lfilter

from lrgident.armax_ml import (
    IntractableSaddleError,
    MlOptions,
    ThetaParams,
    UnstableModelError,
    build_regressors,
    check_identifiability,
    commutation_matrix,
    constraint_matrix,
    cost_J,
    gamma,
    gradient_J,
    hessian_J,
    ls_baseline,
    newton_decrement,
    newton_step,
    reconstruct_ym,
    solve_ml,
    stationarity_residual,
)
from lrgident.polymat import MatrixPolynomial
from lrgident.simgen import example1_system, simulate

TOY = ThetaParams(np.array([[[-0.7]]]), np.array([[[1.0]], [[0.5]]]), np.ones((1, 1), bool))


def toy_data(N, sigma, seed, theta=TOY, burn=300):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((N + burn, theta.l))
    y_l = np.column_stack([lfilter([1.0], [1.0, -0.5], w[:, j]) for j in range(theta.l)])
    y_m = reconstruct_ym(theta, y_l)
    zeta_m = y_m + sigma * rng.standard_normal(y_m.shape)
    return zeta_m[burn:], y_l[burn:], y_m[burn:]


def random_instance(rng, N=50):
    m, l, q, r = 2, 1, 1, 1
    A = np.zeros((q, m, m))
    A[0] = np.diag(rng.uniform(-0.6, 0.6, m))
    B = rng.standard_normal((r + 1, m, l))
    theta = ThetaParams(A, B, np.ones((m, l), bool))
    reg = build_regressors(rng.standard_normal((N, m)), rng.standard_normal((N, l)), q, r)
    return theta, reg


def fd_grad(theta, reg, sigma, h=1e-6):
    v = theta.vec()
    # perturb in the full (m x p) space: cost_J is defined for any Theta matrix
    out = np.zeros(v.size)
    for k in range(v.size):
        e = np.zeros(v.size)
        e[k] = h
        out[k] = (_cost_any(theta, reg, sigma, v + e) - _cost_any(theta, reg, sigma, v - e)) / (2 * h)
    return out


def _cost_any(theta, reg, sigma, v):
    Th = v.reshape((theta.m, theta.p), order="F")
    Acal = Th[:, : theta.m * theta.q]
    G = sigma ** 2 * (np.eye(theta.m) + Acal @ Acal.T)
    X = reg.residuals(Th)
    _, logdet = np.linalg.slogdet(G)
    return logdet + np.sum(X * np.linalg.solve(G, X.T).T) / reg.N


def _grad_any(theta, reg, sigma, v):
    # gradient_J only reads theta.matrix(); build a duck-typed stand-in
    class T:
        pass
    t = T()
    Th = v.reshape((theta.m, theta.p), order="F")
    t.matrix = lambda: Th
    t.m, t.l, t.q, t.r, t.p = theta.m, theta.l, theta.q, theta.r, theta.p
    return gradient_J(t, reg, sigma).flatten(order="F")


# regressors

def test_regressor_layout_examples():
    reg = build_regressors(np.array([1.0, 2.0]), np.array([3.0, 4.0]), 1, 1)
    np.testing.assert_array_equal(reg.Z[1], [1.0, -4.0, -3.0])
    np.testing.assert_array_equal(reg.Z[0], [0.0, -3.0, 0.0])
    rng = np.random.default_rng(0)
    zm = rng.standard_normal((20, 2))
    reg = build_regressors(zm, rng.standard_normal((20, 3)), 2, 1)
    assert reg.Z.shape == (20, 2 * 2 + 3 * 2)
    np.testing.assert_array_equal(reg.residuals(np.zeros((2, 10))), zm)
    with pytest.raises(ValueError):
        build_regressors(zm, np.zeros((19, 3)), 1, 1)


def test_moments_match_residuals():
    theta, reg = random_instance(np.random.default_rng(1))
    Th = theta.matrix()
    X = reg.residuals(Th)
    Sxx, Szx, Szz = reg.moments(Th)
    np.testing.assert_allclose(Sxx, X.T @ X, atol=1e-10)
    np.testing.assert_allclose(Szx, reg.Z.T @ X, atol=1e-10)


# gamma and cost

def test_gamma_examples():
    assert np.allclose(gamma(ThetaParams.zeros(3, 2, 2, 1), 0.3), 0.09 * np.eye(3))
    assert gamma(ThetaParams(np.array([[[-0.5]]]), np.zeros((1, 1, 1)), [[True]]), 1.0)[0, 0] == pytest.approx(1.25)
    G = gamma(example1_system().theta, 0.1)
    assert G[0, 0] == pytest.approx(0.0181)
    assert np.abs(G - np.diag(np.diag(G))).max() == 0


def test_cost_examples():
    rng = np.random.default_rng(2)
    zm = rng.standard_normal((40, 2))
    reg = build_regressors(zm, rng.standard_normal((40, 1)), 1, 1)
    th0 = ThetaParams.zeros(2, 1, 1, 1)
    s = 0.5 ** 2
    assert cost_J(th0, reg, 0.5) == pytest.approx(2 * np.log(s) + np.sum(zm ** 2) / (40 * s))
    reg0 = build_regressors(np.zeros((40, 2)), np.zeros((40, 1)), 1, 1)
    assert cost_J(th0, reg0, 0.5) == pytest.approx(2 * np.log(s))


def test_cost_decreases_toward_truth():
    sys_ = example1_system(0.1)
    rec = simulate(sys_, 1000, seed=3)
    reg = build_regressors(rec.zeta[:, :4], rec.y_l, 2, 2)
    th = sys_.theta
    costs = [cost_J(th.with_matrix(a * th.matrix()), reg, 0.1) for a in (0.0, 0.5, 1.0)]
    assert costs[0] > costs[1] > costs[2]


# derivatives

def test_gradient_zero_data():
    rng = np.random.default_rng(4)
    theta, _ = random_instance(rng)
    reg0 = build_regressors(np.zeros((30, 2)), np.zeros((30, 1)), 1, 1)
    # x(t) = Theta z(t) = 0 for all-zero data
    # Gamma carries the factor s = sigma^2, and so does d log det Gamma
    s = 0.3 ** 2
    G = np.linalg.inv(gamma(theta, 0.3))
    D = np.diag([1.0, 1.0, 0.0, 0.0])
    np.testing.assert_allclose(gradient_J(theta, reg0, 0.3), (2 * s * D @ theta.matrix().T @ G).T, atol=1e-12)


def test_gradient_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(20):
        theta, reg = random_instance(rng)
        sigma = rng.uniform(0.2, 1.0)
        g = gradient_J(theta, reg, sigma).flatten(order="F")
        fd = fd_grad(theta, reg, sigma)
        assert np.abs(g - fd).max() <= 1e-6 * max(1.0, np.abs(g).max())


def test_hessian_finite_differences_and_symmetry():
    rng = np.random.default_rng(6)
    for _ in range(10):
        theta, reg = random_instance(rng)
        sigma = rng.uniform(0.2, 1.0)
        H = hessian_J(theta, reg, sigma)
        assert H.shape == (theta.m * theta.p,) * 2
        assert np.abs(H - H.T).max() == 0
        v = theta.vec()
        h = 1e-6
        cols = [(_grad_any(theta, reg, sigma, v + h * e) - _grad_any(theta, reg, sigma, v - h * e)) / (2 * h)
                for e in np.eye(v.size)]
        Hfd = np.array(cols).T
        Hfd = 0.5 * (Hfd + Hfd.T)
        assert np.abs(H - Hfd).max() <= 1e-4 * max(1.0, np.abs(H).max())


# commutation matrix

def test_commutation_examples():
    assert np.array_equal(commutation_matrix(1, 1), [[1.0]])
    v = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(commutation_matrix(2, 2) @ v, [1.0, 3.0, 2.0, 4.0])
    for n, m in [(2, 3), (3, 4)]:
        np.testing.assert_array_equal(commutation_matrix(n, m) @ commutation_matrix(m, n), np.eye(n * m))
    with pytest.raises(ValueError):
        commutation_matrix(0, 2)


def test_commutation_kronecker_sum_form():
    n, m = 3, 2
    K = sum(np.kron(np.kron(np.eye(m)[j][None, :], np.eye(n)), np.eye(m)[j][:, None]) for j in range(m))
    np.testing.assert_array_equal(K, commutation_matrix(n, m))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_commutation_transposes(n, m, seed):
    M = np.random.default_rng(seed).standard_normal((n, m))
    np.testing.assert_array_equal(commutation_matrix(n, m) @ M.flatten(order="F"), M.T.flatten(order="F"))


# constraints and Newton step

def test_constraint_matrix_examples():
    th = example1_system().theta
    assert np.abs(th.constraint_matrix() @ th.vec()).max() == 0
    m, l, q, r = 3, 2, 2, 1
    mask = np.array([[1, 0], [1, 1], [0, 1]], bool)
    C = constraint_matrix(m, l, q, r, mask)
    assert C.shape == (q * m * (m - 1) + (r + 1) * 2, m * (m * q + l * (r + 1)))
    Th = np.zeros((m, m * q + l * (r + 1)))
    Th[2, 1] = 1.0  # off-diagonal of A_1
    res = C @ Th.flatten(order="F")
    assert np.count_nonzero(res) == 1
    assert constraint_matrix(1, 2, 3, 1, np.ones((1, 2), bool)).shape[0] == 0


def test_newton_step_examples():
    rng = np.random.default_rng(7)
    g = rng.standard_normal(5)
    step, dual, tau = newton_step(np.eye(5), g, np.zeros((0, 5)))
    np.testing.assert_allclose(step, -g)
    assert tau == 0.0
    # quadratic: one step reaches the minimiser
    Q = rng.standard_normal((5, 5))
    Q = Q @ Q.T + np.eye(5)
    x_star = rng.standard_normal(5)
    x0 = rng.standard_normal(5)
    step, _, _ = newton_step(Q, Q @ (x0 - x_star), np.zeros((0, 5)))
    np.testing.assert_allclose(x0 + step, x_star, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_newton_step_feasible(seed):
    rng = np.random.default_rng(seed)
    n = 8
    H = rng.standard_normal((n, n))
    H = H + H.T  # indefinite in general
    C = np.eye(n)[rng.choice(n, 3, replace=False)]
    try:
        step, _, _ = newton_step(H, rng.standard_normal(n), C)
    except IntractableSaddleError:
        return
    assert np.abs(C @ step).max() <= 1e-10


def test_newton_step_errors():
    C = np.array([[1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(np.linalg.LinAlgError):
        newton_step(np.eye(2), np.ones(2), C)
    with pytest.raises(IntractableSaddleError):
        newton_step(np.array([[np.nan, 0.0], [0.0, 1.0]]), np.ones(2), np.zeros((0, 2)))
    # strongly indefinite but finite: regularisation still succeeds
    step, _, tau = newton_step(-np.eye(2), np.ones(2), np.zeros((0, 2)))
    assert tau > 1.0 and np.all(np.isfinite(step))


def test_newton_decrement_examples():
    assert newton_decrement(np.zeros(3), np.eye(3)) == 0.0
    g = np.array([3.0, 4.0])
    assert newton_decrement(g, np.eye(2)) == pytest.approx(5.0)
    with pytest.raises(ArithmeticError):
        newton_decrement(np.ones(2), -np.eye(2))


# solver

def test_stationarity_examples():
    reg0 = build_regressors(np.zeros((30, 2)), np.zeros((30, 1)), 1, 1)
    assert stationarity_residual(ThetaParams.zeros(2, 1, 1, 1), reg0, 0.3) == 0
    theta, reg = random_instance(np.random.default_rng(8))
    assert stationarity_residual(theta, reg, 0.4) > 1e-3


def test_stationarity_is_scaled_gradient():
    theta, reg = random_instance(np.random.default_rng(9))
    sigma = 0.4
    R = stationarity_residual(theta, reg, sigma, masked=False)
    dJ = gradient_J(theta, reg, sigma).T  # p x m
    assert R == pytest.approx(np.linalg.norm(dJ @ gamma(theta, sigma) / 2), rel=1e-10)


def test_solver_toy_consistency():
    zm, yl, _ = toy_data(20000, 0.1, seed=10)
    reg = build_regressors(zm, yl, 1, 1)
    res = solve_ml(reg, 0.1, TOY.ones_init())
    assert res.converged
    assert np.abs(res.theta.matrix() - TOY.matrix()).max() <= 0.05


def test_solver_trace_feasible_and_monotone():
    sys_ = example1_system(0.1)
    rec = simulate(sys_, 1000, seed=12)
    reg = build_regressors(rec.zeta[:, :4], rec.y_l, 2, 2)
    res = solve_ml(reg, 0.1, sys_.theta.ones_init())
    assert res.converged
    costs = [row["cost"] for row in res.trace]
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    assert all(row["feasibility"] <= 1e-10 for row in res.trace)
    assert res.stationarity <= 1e-6 * (1 + res.stationarity_init)
    assert res.decrement ** 2 / 2 <= 1e-12


def test_solver_rejects_infeasible_init():
    zm, yl, _ = toy_data(200, 0.1, seed=13)
    m2 = ThetaParams.zeros(2, 1, 1, 1)
    reg = build_regressors(np.column_stack([zm, zm]), yl, 1, 1)
    bad = ThetaParams.__new__(ThetaParams)
    object.__setattr__(bad, "A_lags", np.array([[[0.1, 0.2], [0.0, 0.1]]]))
    object.__setattr__(bad, "B_lags", np.zeros((2, 2, 1)))
    object.__setattr__(bad, "b_mask", m2.b_mask)
    object.__setattr__(bad, "row_degrees", None)
    with pytest.raises(ValueError):
        solve_ml(reg, 0.1, bad)
    with pytest.raises(ValueError):
        solve_ml(reg, 0.0, m2)


def test_solver_noise_free_exact_driver():
    # zero initial state so the zero-padded regressors are exact from t = 1
    zm, yl, ym = toy_data(2000, 0.0, seed=14, burn=0)
    reg = build_regressors(zm, yl, 1, 1)
    res = solve_ml(reg, 1e-3, TOY.ones_init(), MlOptions(max_iter=100))
    X = reg.residuals(res.theta.matrix())
    assert np.mean(X ** 2) <= 1e-10
    assert np.abs(res.theta.matrix() - TOY.matrix()).max() <= 1e-6


def test_theta_validation_and_roundtrip():
    th = example1_system().theta
    back = ThetaParams.from_dict(th.to_dict())
    np.testing.assert_array_equal(back.vec(), th.vec())
    assert back.row_degrees == th.row_degrees
    with pytest.raises(ValueError):
        ThetaParams(np.ones((1, 2, 2)), np.zeros((1, 2, 1)), np.ones((2, 1), bool))
    with pytest.raises(ValueError):
        ThetaParams(np.zeros((1, 2, 2)), np.ones((1, 2, 1)), np.zeros((2, 1), bool))


# identifiability

def test_benchmark_identifiable_per_row():
    th = example1_system().theta
    v = check_identifiability(th.A_poly(), th.B_poly(), per_row=True, row_degrees=th.row_degrees)
    assert v.identifiable and v.mode == "per_row"
    # joint mode sees the zero-padded first row
    assert not check_identifiability(th.A_poly(), th.B_poly())


def test_common_factor_not_identifiable():
    A = MatrixPolynomial.scalar([1.0, -0.5])
    B = MatrixPolynomial.scalar(np.polymul([1.0, -0.5], [1.0, 0.2]))
    for per_row in (False, True):
        v = check_identifiability(A, B, per_row=per_row)
        assert not v.identifiable
        assert v.certificate["reason"] == "common factor" or v.certificate["reason"] == "common left factor"
        assert v.certificate["root"] == pytest.approx(0.5)


def test_zero_leading_pair_joint_mode():
    A = MatrixPolynomial(np.array([np.eye(2), np.diag([0.3, 0.4]), np.diag([0.2, 0.0])]))
    B = MatrixPolynomial(np.array([[[1.0], [1.0]], [[0.5], [0.2]], [[0.1], [0.0]]]))
    v = check_identifiability(A, B)
    assert not v.identifiable
    assert v.certificate["reason"] == "leading coefficient rank deficient"
    assert check_identifiability(A, B, per_row=True).identifiable


def test_identifiability_errors():
    with pytest.raises(ValueError):
        check_identifiability(MatrixPolynomial.scalar([2.0, 0.1]), MatrixPolynomial.scalar([1.0]))


# reconstruction and baseline

def test_reconstruct_examples():
    th = example1_system().theta
    u = np.zeros((5, 3))
    u[0, 0] = 1.0
    out = reconstruct_ym(th, u)
    assert out[0, 0] == pytest.approx(0.5)
    assert out[1, 0] == pytest.approx(0.6)
    assert np.all(reconstruct_ym(th, np.zeros((7, 3))) == 0)
    unstable = ThetaParams(np.array([[[-1.2]]]), np.ones((1, 1, 1)), [[True]])
    with pytest.raises(UnstableModelError):
        reconstruct_ym(unstable, np.ones(4))


def test_reconstruct_matches_simulator():
    sys_ = example1_system(0.0)
    rec = simulate(sys_, 300, seed=15)
    rec2 = simulate(sys_, 300, seed=15, burn_in=0)
    np.testing.assert_allclose(reconstruct_ym(sys_.theta, rec2.y_l), rec2.y_m, atol=1e-12)
    assert rec.y_m.shape == (300, 4)


def test_ls_baseline_noise_free_recovery():
    sys_ = example1_system(0.0)
    rec = simulate(sys_, 800, seed=16, burn_in=0)
    th = sys_.theta
    est = ls_baseline(rec.y_m, rec.y_l, 2, 2, th.b_mask, th.row_degrees)
    assert np.abs(est.matrix() - th.matrix()).max() <= 1e-6
    with pytest.raises(np.linalg.LinAlgError):
        ls_baseline(np.zeros((50, 1)), np.zeros((50, 1)), 1, 1, [[True]])

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cannarx import autodiff as ad
from cannarx import mpc
from cannarx.imc import ModelPlant
from cannarx.model import Layer, ModelParameters, constant_state, eta_np, init_cannarx, rescale_norm_products, shift_np
from cannarx.plant import Scalers
from fdcheck import central_diff, rel_err


def linear_scalar_model(a=0.5, b=0.3, c=0.6):
    """eta = a * y + b + c * u through identity f and a constant tanh gain."""
    return ModelParameters(
        H=1, n_u=1, n_y=1,
        f_layers=[Layer(np.array([[a, 0.0]]), np.array([b]), "identity")], W0=np.ones((1, 1)),
        g_layers=[Layer(np.zeros((1, 2)), np.array([np.arctanh(c)]), "tanh")], U0=np.ones((1, 1)),
        scalers=Scalers.identity(1, 1)).validate()


def square_model(seed=0):
    p = init_cannarx(H=3, n_u=2, n_y=2, f_widths=(8,), g_widths=(8,), g_final="sigmoid", seed=seed)
    p = rescale_norm_products(p, 0.3, 0.05)
    p.g_layers[-1].b = np.array([2.0, 2.0])
    p.U0 = np.array([[1.0, 0.3], [-0.2, 0.9]])
    p.scalers = Scalers.identity(2, 2)
    return p


def _steady_output(p, u, steps=400):
    x = constant_state(p, np.zeros(p.n_y), u)
    for _ in range(steps):
        x = shift_np(x, eta_np(p, x, u), u)
    return x[p.n - p.n_z:p.n - p.n_u]


def test_zero_model_equilibrium_is_zero_input():
    p = init_cannarx()
    p = p.with_arrays({k: np.zeros_like(v) for k, v in p.to_arrays().items()})
    eq = mpc.find_equilibrium(p, np.zeros(4))
    assert np.array_equal(eq.u, np.zeros(2)) and eq.residual == 0.0


def test_equilibrium_recovers_known_input():
    p = square_model()
    u_true = np.array([0.3, -0.2])
    y_star = _steady_output(p, u_true)
    eq = mpc.find_equilibrium(p, y_star)
    assert eq.residual < 1e-9
    assert np.allclose(eq.u, u_true, atol=1e-8)
    assert np.allclose(eq.x, constant_state(p, y_star, eq.u))


def test_unreachable_output_raises_when_strict():
    p = square_model()
    with pytest.raises(mpc.InfeasibleReference):
        mpc.find_equilibrium(p, np.array([50.0, -50.0]), strict_tol=1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        mpc.FhocpConfig(N_p=0)
    with pytest.raises(ValueError):
        mpc.FhocpConfig(R=[0.0, 0.1])
    with pytest.raises(ValueError):
        mpc.FhocpConfig(mu_T=-1.0)


def test_at_equilibrium_the_optimum_holds_the_steady_input():
    p = square_model()
    y_star = _steady_output(p, np.array([0.1, 0.2]))
    eq = mpc.find_equilibrium(p, y_star)
    sol = mpc.solve_fhocp(p, eq.x, eq, mpc.FhocpConfig(Q=[5, 5]))
    assert np.allclose(sol.U, np.tile(eq.u, (10, 1)), atol=1e-9)
    assert sol.cost < 1e-15 and sol.converged


def test_single_step_horizon_matches_closed_form():
    a, b, c = 0.5, 0.3, 0.6
    p = linear_scalar_model(a, b, c)
    Q, R, mu_T = 5.0, 0.1, 10.0
    cfg = mpc.FhocpConfig(N_p=1, Q=[Q], R=[R], mu_T=mu_T, mu_x=0.0)
    eq = mpc.EquilibriumTriple(np.array([0.4, 0.1]), np.array([0.1]), np.array([0.4]), 0.0)
    x0 = np.array([0.0, 0.0])
    alpha, beta = b, c
    u_star = ((R + mu_T) * 0.1 + mu_T * beta * (0.4 - alpha)) / (R + mu_T + mu_T * beta**2)
    sol = mpc.solve_fhocp(p, x0, eq, cfg)
    assert sol.U[0, 0] == pytest.approx(u_star, abs=1e-9)


def test_residual_form_matches_traced_cost_and_gradient():
    p = init_cannarx(seed=2)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1.2, 1.2, p.n)  # outside the box so the penalty is active
    eq = mpc.find_equilibrium(p, rng.uniform(-0.3, 0.3, 4))
    cfg = mpc.FhocpConfig(N_p=4, mu_T=10.0, mu_x=50.0)
    U = rng.uniform(-1, 1, (4, 2))
    r, J = mpc.fhocp_residuals(p, x0, U, eq, cfg, jacobian=True)
    traced = mpc.fhocp_cost(U, p, x0, eq, cfg)
    assert float(r @ r) == pytest.approx(float(traced), rel=1e-12)
    _, g = ad.value_and_grad(lambda V: mpc.fhocp_cost(V, p, x0, eq, cfg), U)
    assert np.allclose(2 * J.T @ r, g.reshape(-1), atol=1e-10)
    fd = central_diff(lambda V: float(mpc.fhocp_cost(V, p, x0, eq, cfg)), U)
    assert rel_err(g, fd) < 1e-6


@pytest.mark.parametrize("method", ["gauss-newton", "gradient"])
def test_cost_history_is_monotone(method):
    p = init_cannarx(seed=1)
    rng = np.random.default_rng(3)
    eq = mpc.find_equilibrium(p, rng.uniform(-0.3, 0.3, 4))
    sol = mpc.solve_fhocp(p, rng.uniform(-1, 1, p.n), eq, mpc.FhocpConfig(max_iter=40), method=method)
    h = np.array(sol.cost_history)
    assert np.all(np.diff(h) <= 1e-12)
    assert h[-1] < h[0]


def test_unknown_method_rejected():
    p = init_cannarx()
    with pytest.raises(ValueError):
        mpc.solve_fhocp(p, np.zeros(p.n), mpc.find_equilibrium(p, np.zeros(4)), mpc.FhocpConfig(),
                        method="newton")


def test_terminal_gap_shrinks_with_terminal_weight():
    p = linear_scalar_model()
    eq = mpc.EquilibriumTriple(np.array([0.4, 0.1]), np.array([0.1]), np.array([0.4]), 0.0)
    gaps = []
    for mu_T in (0.0, 1.0, 10.0, 100.0, 1000.0):
        cfg = mpc.FhocpConfig(N_p=3, Q=[1.0], R=[1.0], mu_T=mu_T, mu_x=0.0)
        sol = mpc.solve_fhocp(p, np.array([-0.5, -0.5]), eq, cfg)
        gaps.append(np.linalg.norm(mpc.predicted_terminal_state(p, [-0.5, -0.5], sol.U) - eq.x))
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))


@settings(max_examples=15)
@given(st.integers(0, 100))
def test_inputs_stay_in_box(seed):
    p = init_cannarx(seed=seed % 5)
    rng = np.random.default_rng(seed)
    eq = mpc.find_equilibrium(p, rng.uniform(-2, 2, 4))
    sol = mpc.solve_fhocp(p, rng.uniform(-1, 1, p.n), eq, mpc.FhocpConfig(max_iter=15))
    assert np.all(np.abs(sol.U) <= 1.0) and np.all(np.abs(eq.u) <= 1.0)


def test_nominal_loop_holds_the_steady_input():
    p = square_model()
    u_star = np.array([0.2, -0.1])
    y_star = _steady_output(p, u_star)
    plant = ModelPlant(p, constant_state(p, y_star, u_star))
    ctrl = mpc.MPCController(p, mpc.FhocpConfig(Q=[5, 5]))
    rec = mpc.run_closed_loop(plant, ctrl, np.tile(y_star, (20, 1)), 20, u0_raw=u_star)
    assert np.allclose(rec.u, u_star, atol=1e-8)
    assert np.allclose(rec.y, y_star, atol=1e-8)
    assert rec.iterations.shape == (20,)


def test_feasibility_advisor_flags_saturating_setpoints():
    p = square_model()
    check = mpc.feasibility_advisor(p)
    assert check(_steady_output(p, np.array([0.1, 0.1]))) is None
    assert "saturates" in check(np.array([50.0, 50.0]))

import numpy as np
import pytest

from smpkit.adjoint import solve_first_adjoint
from smpkit.errors import DomainError, WrongTheoremError
from smpkit.forward import (
    FiniteGrid,
    OpenLoop,
    TimeGrid,
    sample_brownian,
    simulate_controlled,
)
from smpkit.maximum_principle import (
    check_condition,
    convex_gradient,
    hamiltonian,
    projected_gradient,
    second_order_data,
    solve_adjoints,
    spike_experiment,
    spike_functional,
)
from smpkit.scenarios import make_lq_scalar, riccati_oracle


def test_hamiltonian_values():
    scenario, _ = make_lq_scalar(sigma=0.0)
    # a = u, b = 0, g = (x^2+u^2)/2: H(x=1, u=0, k1=2, k2=0) = -0.5
    val = hamiltonian(scenario, 0.0, np.array([[1.0]]), np.array([[0.0]]),
                      np.array([2.0]), np.array([0.0]))
    assert val[0] == pytest.approx(-0.5, rel=1e-14)


def test_hamiltonian_zero_everything():
    scenario, _ = make_lq_scalar(sigma=0.0)
    scenario.running_cost = lambda t, x, u: np.zeros(x.shape[0])
    scenario.drift = lambda t, x, u: np.zeros_like(x)
    scenario.diffusion = lambda t, x, u: np.zeros_like(x)
    val = hamiltonian(scenario, 0.0, np.array([[1.0]]), np.array([[0.5]]),
                      np.array([3.0]), np.array([-1.0]))
    assert val[0] == 0.0


def test_hamiltonian_affine_in_k1():
    scenario, _ = make_lq_scalar()
    x = np.array([[0.7]])
    u = np.array([[0.4]])
    k2 = np.array([0.3])
    base = hamiltonian(scenario, 0.0, x, u, np.array([1.0]), k2)
    double = hamiltonian(scenario, 0.0, x, u, np.array([2.0]), k2)
    drift_pair = np.sum(scenario.drift(0.0, x, u) * 1.0, axis=-1)
    assert double[0] == pytest.approx(base[0] + drift_pair[0], rel=1e-14)


def test_hamiltonian_rejects_out_of_set_control():
    scenario, _ = make_lq_scalar(control_bound=1.0)
    with pytest.raises(DomainError):
        hamiltonian(scenario, 0.0, np.array([[0.0]]), np.array([[5.0]]),
                    np.array([0.0]), np.array([0.0]))


def test_convex_gradient_cancellation_and_wrong_theorem():
    scenario, _ = make_lq_scalar()
    # g_u = u; pick u = y so a_u* y - g_u = 0 (b_u = 0)
    y = np.array([[0.3], [-0.8]])
    x = np.zeros((2, 1))
    grad = convex_gradient(scenario, 0, x, y.copy(), y, np.zeros((2, 1)))
    np.testing.assert_allclose(grad, 0.0, atol=1e-14)

    nonconvex = make_lq_scalar()[0]
    nonconvex.control_set = FiniteGrid(points=[[-1.0], [1.0]])
    with pytest.raises(WrongTheoremError):
        convex_gradient(nonconvex, 0, x, y, y, np.zeros((2, 1)))


from helpers import lq_optimizer_run, lq_optimum_bundle


@pytest.fixture(scope="module")
def lq_at_optimum():
    return lq_optimum_bundle()


def test_convex_gradient_small_at_optimum(lq_at_optimum):
    scenario, params, grid, ens, oracle, traj, pair, sa = lq_at_optimum
    for j in (0, 60, 140):
        grad = convex_gradient(
            scenario, j, traj.states[:, j], traj.controls_used[:, j],
            pair.y[:, j], pair.Y[:, j], grid=grid,
        )
        scale = np.sqrt(np.mean(traj.controls_used[:, j] ** 2))
        assert np.sqrt(np.mean(grad**2)) <= 0.05 * max(scale, 0.1)


def test_convex_gradient_improvement_direction_when_suboptimal():
    scenario, params = make_lq_scalar()
    grid = TimeGrid(0.0, 1.0, 200)
    ens = sample_brownian(grid, 20_000, 31)
    traj = simulate_controlled(scenario, scenario.x0, OpenLoop(np.zeros((200, 1))), ens)
    pair = solve_first_adjoint(scenario, traj, None, ens)
    oracle = riccati_oracle(riccati_params := make_lq_scalar()[1], grid)
    # pairing of the gradient with (u* - 0) integrated over time: strictly
    # positive means moving toward u* improves
    total = np.zeros(traj.n_paths)
    for j in range(grid.n_steps):
        grad = convex_gradient(
            scenario, j, traj.states[:, j], traj.controls_used[:, j],
            pair.y[:, j], pair.Y[:, j], grid=grid,
        )
        u_star = -traj.states[:, j]  # Riccati feedback -p x with p = 1
        total += grid.dt * np.sum(grad * (u_star - traj.controls_used[:, j]), axis=-1)
    stderr = total.std(ddof=1) / np.sqrt(len(total))
    assert total.mean() > 3 * stderr


def test_spike_functional_zero_at_candidate(lq_at_optimum):
    scenario, params, grid, ens, oracle, traj, pair, sa = lq_at_optimum
    j = 77
    s = spike_functional(
        scenario, grid.times()[j], traj.states[:, j], traj.controls_used[:, j],
        traj.controls_used[:, j], pair.y[:, j], pair.Y[:, j], sa.P_paths(j),
    )
    np.testing.assert_array_equal(s, 0.0)


def test_spike_functional_reduces_to_hamiltonian_gap_when_b_control_free():
    # diffusion independent of u: the quadratic term drops exactly
    scenario, _ = make_lq_scalar()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 1))
    u_bar = rng.uniform(-1, 1, (50, 1))
    u = np.array([0.4])
    y = rng.standard_normal((50, 1))
    Y = rng.standard_normal((50, 1))
    P = rng.standard_normal((50, 1, 1))
    s = spike_functional(scenario, 0.3, x, u_bar, u, y, Y, P)
    gap = hamiltonian(scenario, 0.3, x, u_bar, y, Y) - hamiltonian(
        scenario, 0.3, x, np.broadcast_to(u, (50, 1)), y, Y
    )
    np.testing.assert_allclose(s, gap, atol=1e-12)


def test_spike_functional_scaling_leaves_argmax(lq_at_optimum):
    # scaling the cost data scales the adjoints with it (linearity), and then
    # every S(t, u) scales by the same factor: the argmax over u is invariant
    scenario, params, grid, ens, oracle, traj, pair, sa = lq_at_optimum
    alpha = 2.0
    scaled_scenario, _ = make_lq_scalar()
    base_run = scenario.running_cost
    base_term = scenario.terminal_cost
    scaled_scenario.running_cost = lambda t, x, u: alpha * base_run(t, x, u)
    scaled_scenario.terminal_cost = lambda x: alpha * base_term(x)
    scaled_scenario.running_grad_u = lambda t, x, u: alpha * u
    j = 50
    u_grid = np.linspace(-2, 2, 21)[:, None]

    def s_values(scen, scale):
        return np.array([
            spike_functional(
                scen, grid.times()[j], traj.states[:, j], traj.controls_used[:, j],
                u, scale * pair.y[:, j], scale * pair.Y[:, j], scale * sa.P_paths(j),
            ).mean()
            for u in u_grid
        ])

    base = s_values(scenario, 1.0)
    scaled = s_values(scaled_scenario, alpha)
    assert np.argmax(base) == np.argmax(scaled)
    np.testing.assert_allclose(scaled, alpha * base, rtol=1e-12)


def test_check_condition_at_optimum(lq_at_optimum):
    scenario, params, grid, ens, oracle, traj, pair, sa = lq_at_optimum
    u_grid = np.linspace(-2.0, 2.0, 21)[:, None]
    t_grid = np.linspace(0, grid.n_steps - 1, 8, dtype=int)
    report = check_condition(
        scenario, traj, pair, sa, u_grid, t_grid,
        bias_budget=scenario.c_bias_second * grid.dt,
    )
    assert report.passed, f"violation {report.max_violation} at {report.argmax_violation}"


def test_check_condition_flags_perturbed_control(lq_at_optimum):
    scenario, params, grid, ens, oracle, traj, pair, sa = lq_at_optimum
    perturbed = np.array(traj.controls_used, copy=True)
    perturbed[:, : grid.n_steps // 4] += 0.5
    traj_p = simulate_controlled(scenario, scenario.x0, OpenLoop(perturbed), ens)
    pair_p, sa_p = solve_adjoints(scenario, traj_p, ens)
    u_grid = np.linspace(-2.0, 2.0, 21)[:, None]
    t_grid = np.linspace(0, grid.n_steps - 1, 8, dtype=int)
    report = check_condition(
        scenario, traj_p, pair_p, sa_p, u_grid, t_grid,
        bias_budget=scenario.c_bias_second * grid.dt,
    )
    assert not report.passed
    t_flag, _ = report.argmax_violation
    assert t_flag <= grid.n_steps // 4


def test_check_condition_on_finite_control_set():
    # nonconvex control set: conditions are checked by enumerating the grid
    scenario, _ = make_lq_scalar()
    scenario.control_set = FiniteGrid(points=[[-1.0], [0.0], [1.0]])
    grid = TimeGrid(0.0, 1.0, 100)
    ens = sample_brownian(grid, 4000, 59)
    traj = simulate_controlled(scenario, scenario.x0, OpenLoop(np.zeros((100, 1))), ens)
    pair, sa = solve_adjoints(scenario, traj, ens)
    u_grid = scenario.control_set.sample_grid()
    t_grid = np.linspace(0, grid.n_steps - 1, 8, dtype=int)
    report = check_condition(scenario, traj, pair, sa, u_grid, t_grid,
                             bias_budget=scenario.c_bias_second * grid.dt)
    # holding u = 0 from x0 = 1 is not optimal: switching to u = -1 early
    # improves, so the condition must flag a violation there
    assert not report.passed
    t_flag, u_flag = report.argmax_violation
    assert u_flag[0] == -1.0


def test_check_condition_empty_grid_errors(lq_at_optimum):
    scenario, params, grid, ens, oracle, traj, pair, sa = lq_at_optimum
    with pytest.raises(DomainError):
        check_condition(scenario, traj, pair, sa, np.zeros((0, 1)), [0])
    with pytest.raises(DomainError):
        check_condition(scenario, traj, pair, sa, np.zeros((3, 1)), [])


def test_second_order_data_deterministic_for_preset(lq_at_optimum):
    scenario, params, grid, ens, oracle, traj, pair, sa = lq_at_optimum
    J, K, F, P_T = second_order_data(scenario, traj, pair)
    assert J.shape == (grid.n_steps, 1, 1) and np.all(J == 0.0)
    assert np.all(K == 0.0)
    np.testing.assert_allclose(F, 1.0, atol=1e-12)  # -H_xx = g_xx = 1
    np.testing.assert_allclose(P_T, -1.0, atol=1e-12)


def test_second_adjoint_matches_scalar_closed_form(lq_at_optimum):
    # P' = F with A = J = K = 0: P(t) = -1 - (T - t), Q = 0
    scenario, params, grid, ens, oracle, traj, pair, sa = lq_at_optimum
    times = grid.times()
    for j in (0, 100, 199):
        expected = -1.0 - (grid.T - times[j])
        assert sa.P_mean(j)[0, 0] == pytest.approx(expected, abs=5e-3)


# ----------------------------------------------------------------------
# projected gradient
# ----------------------------------------------------------------------

def test_projected_gradient_zero_step_is_identity():
    scenario, _ = make_lq_scalar()
    grid = TimeGrid(0.0, 1.0, 50)
    ens = sample_brownian(grid, 2000, 37)
    control = OpenLoop(np.full((50, 1), 0.3))
    final, history = projected_gradient(scenario, scenario.x0, control, ens,
                                        step_rule=0.0, max_iters=3)
    costs = [row["J"] for row in history.iterations]
    assert all(c == costs[0] for c in costs)
    np.testing.assert_allclose(final.values, 0.3, atol=1e-15)


def test_projected_gradient_fixed_point_at_optimum():
    scenario, params = make_lq_scalar()
    grid = TimeGrid(0.0, 1.0, 100)
    ens = sample_brownian(grid, 5000, 41)
    oracle = riccati_oracle(params, grid)
    traj = simulate_controlled(scenario, scenario.x0, oracle.feedback(), ens)
    init = OpenLoop(np.array(traj.controls_used, copy=True))
    final, history = projected_gradient(scenario, scenario.x0, init, ens,
                                        step_rule=0.8, max_iters=20)
    # only regression-noise-sized correction steps
    assert history.iterations[0]["step_norm"] < 0.05
    effective = [r for r in history.iterations if r["step_norm"] >= 0.05]
    assert len(effective) <= 1


def test_projected_gradient_reaches_oracle_value():
    history, target = lq_optimizer_run()
    assert abs(history.final_cost - target) / target < 0.02
    assert len(history.iterations) <= 200
    costs = np.array([row["J"] for row in history.iterations])
    noise = 10 * max(row["stderr"] for row in history.iterations)
    assert np.all(np.diff(costs) <= noise)  # non-increasing up to MC noise


# ----------------------------------------------------------------------
# spike experiment
# ----------------------------------------------------------------------

def test_spike_same_control_rows_are_zero(lq_at_optimum):
    scenario, params, grid, ens, oracle, traj, pair, sa = lq_at_optimum
    # spiking to the control the paths already use changes nothing... but the
    # base control here is feedback; use an open-loop zero base instead
    scen, _ = make_lq_scalar()
    g = TimeGrid(0.0, 1.0, 100)
    e = sample_brownian(g, 2000, 47)
    base = OpenLoop(np.full((100, 1), 0.2))
    table = spike_experiment(scen, scen.x0, base, np.array([0.2]), tau=0.3,
                             eps_list=[0.2, 0.1], ens=e)
    for row in table.rows:
        assert row["delta_J"] == 0.0
        assert row["predicted"] == 0.0
        assert row["remainder"] == 0.0


def test_spike_epsilon_validation(lq_at_optimum):
    scenario, params, grid, ens, oracle, traj, pair, sa = lq_at_optimum
    scen, _ = make_lq_scalar()
    g = TimeGrid(0.0, 1.0, 20)
    e = sample_brownian(g, 300, 3)
    base = OpenLoop(np.zeros((20, 1)))
    with pytest.raises(DomainError):
        spike_experiment(scen, scen.x0, base, np.array([0.5]), 0.3, [0.1, 0.2], e)
    with pytest.raises(DomainError):
        spike_experiment(scen, scen.x0, base, np.array([0.5]), 0.9, [0.3, 0.1], e)


def test_spike_remainder_vanishes_at_optimum(lq_at_optimum):
    scenario, params, grid, ens, oracle, traj, pair, sa = lq_at_optimum
    table = spike_experiment(
        scenario, scenario.x0, oracle.feedback(), np.array([0.5]),
        tau=1.0 / 3.0 + grid.dt / 2, eps_list=[0.2, 0.1, 0.05, 0.025], ens=ens,
        adjoints=(pair, sa),
    )
    ratios = [abs(row["remainder_over_eps"]) for row in table.rows]
    # o(eps): decreasing down the ladder with at most one noise inversion
    inversions = sum(1 for a, b in zip(ratios, ratios[1:]) if b > a)
    assert inversions <= 1
    # spiking away from the optimum cannot reduce the cost beyond noise
    for row in table.rows:
        assert row["delta_J"] > -3 * row["stderr"]


def test_spike_improvement_exists_for_suboptimal_control():
    scenario, params = make_lq_scalar()
    grid = TimeGrid(0.0, 1.0, 200)
    ens = sample_brownian(grid, 20_000, 53)
    base = OpenLoop(np.zeros((200, 1)))
    # from u = 0 with positive state, pushing u negative reduces the cost
    table = spike_experiment(scenario, scenario.x0, base, np.array([-1.0]),
                             tau=0.25, eps_list=[0.2], ens=ens)
    row = table.rows[0]
    assert row["delta_J"] < -3 * row["stderr"]

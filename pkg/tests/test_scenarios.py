import os

import numpy as np
import pytest

from smpkit.errors import DomainError, LatticeEscapeError
from smpkit.forward import TimeGrid, sample_brownian, simulate_controlled
from smpkit.scenarios import (
    LqParams,
    available_presets,
    build_preset,
    dp_oracle_scalar,
    load_preset,
    make_heat_scenario,
    make_lq_scalar,
    parse_preset_text,
    riccati_oracle,
)
from smpkit.spectral import norm


def test_lq_scalar_definition():
    scenario, params = make_lq_scalar()
    x = np.array([[2.0], [0.0]])
    u = np.array([[1.0], [3.0]])
    np.testing.assert_array_equal(scenario.drift(0.0, x, u), u)
    assert scenario.running_cost(0.0, np.array([[2.0]]), np.array([[1.0]]))[0] == 2.5
    hess = scenario.hess_terminal(np.array([[1.3]]))
    np.testing.assert_array_equal(hess, np.ones((1, 1, 1)))


def test_riccati_scalar_constant_solution():
    scenario, params = make_lq_scalar()
    grid = TimeGrid(0.0, 1.0, 200)
    bundle = riccati_oracle(params, grid)
    np.testing.assert_allclose(bundle.P[:, 0, 0], 1.0, atol=1e-10)
    np.testing.assert_allclose(bundle.gains[:, 0, 0], 1.0, atol=1e-10)
    np.testing.assert_allclose(bundle.q, 0.0, atol=1e-12)
    # value at x0 = 1: 0.5 * 1 + sigma^2 T / 2
    assert bundle.value_at(1.0) == pytest.approx(0.5 + 0.5 * 0.09, abs=1e-9)


def test_riccati_zero_cost():
    params = LqParams(
        A=np.zeros((1, 1)), B=np.eye(1), C=np.zeros((1, 1)), D=np.zeros((1, 1)),
        sigma=np.zeros(1), M=np.zeros((1, 1)), N=np.eye(1), G=np.zeros((1, 1)),
    )
    bundle = riccati_oracle(params, TimeGrid(0.0, 1.0, 50))
    np.testing.assert_allclose(bundle.gains, 0.0, atol=1e-12)
    assert bundle.value_at(3.0) == pytest.approx(0.0, abs=1e-12)


def test_riccati_singular_gain_breaks_cleanly():
    from smpkit.errors import OracleBreakdownError

    params = LqParams(
        A=np.zeros((1, 1)), B=np.eye(1), C=np.zeros((1, 1)), D=np.zeros((1, 1)),
        sigma=np.zeros(1), M=np.eye(1), N=np.zeros((1, 1)), G=np.eye(1),
    )
    with pytest.raises(OracleBreakdownError):
        riccati_oracle(params, TimeGrid(0.0, 1.0, 10))


def test_riccati_value_quadratic_scaling():
    scenario, params = make_lq_scalar(sigma=0.0)
    bundle = riccati_oracle(params, TimeGrid(0.0, 1.0, 100))
    assert bundle.value_at(2.0) == pytest.approx(4.0 * bundle.value_at(1.0), rel=1e-9)


def test_heat_scenario_pure_decay_contracts():
    scenario = make_heat_scenario()
    grid = TimeGrid(0.0, 1.0, 100)
    ens = sample_brownian(grid, 32, 5)
    from smpkit.forward import OpenLoop

    beta0 = make_heat_scenario(beta=0.0)
    traj = simulate_controlled(beta0, beta0.x0, OpenLoop(np.zeros((100, 2))), ens)
    assert np.all(norm(traj.states[:, -1]) <= norm(traj.states[:, 0]) + 1e-12)


def test_heat_diffusion_control_jacobian():
    scenario = make_heat_scenario(diffusion_gain=0.2)
    x = np.random.default_rng(0).standard_normal((5, 4))
    u = np.random.default_rng(1).standard_normal((5, 2))
    jac = scenario.jac_u("b", 0.3, x, u)
    fd = np.empty_like(jac)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd[:, :, k] = (scenario.diffusion(0.3, x, u + e) - scenario.diffusion(0.3, x, u - e)) / (2 * h)
    np.testing.assert_allclose(jac, fd, atol=1e-8)


def test_heat_lipschitz_spot_check():
    scenario = make_heat_scenario()
    rng = np.random.default_rng(2)
    for _ in range(50):
        x1 = rng.standard_normal((1, 4))
        x2 = rng.standard_normal((1, 4))
        u = rng.uniform(-1, 1, (1, 2))
        gap_a = norm(scenario.drift(0.1, x1, u) - scenario.drift(0.1, x2, u))[0]
        gap_b = norm(scenario.diffusion(0.1, x1, u) - scenario.diffusion(0.1, x2, u))[0]
        assert gap_a + gap_b <= 2 * scenario.lipschitz * norm(x1 - x2)[0] + 1e-12


def test_preset_derivatives_match_finite_differences():
    rng = np.random.default_rng(3)
    for scenario in (make_lq_scalar()[0], make_heat_scenario()):
        n, m = scenario.n_modes, scenario.control_dim
        x = rng.standard_normal((100, n))
        u = rng.uniform(-1, 1, (100, m))
        pairs = [
            (scenario.jac_x("a", 0.2, x, u), _fd_jac(lambda z: scenario.drift(0.2, z, u), x)),
            (scenario.jac_x("b", 0.2, x, u), _fd_jac(lambda z: scenario.diffusion(0.2, z, u), x)),
            (scenario.grad_x_running(0.2, x, u), _fd_grad(lambda z: scenario.running_cost(0.2, z, u), x)),
            (scenario.grad_terminal(x), _fd_grad(scenario.terminal_cost, x)),
        ]
        for analytic, fd in pairs:
            scale = 1.0 + np.abs(fd)
            assert np.max(np.abs(analytic - fd) / scale) < 1e-6


def _fd_grad(fn, x):
    h = 1e-6
    out = np.empty_like(x)
    for i in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[i] = h
        out[:, i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return out


def _fd_jac(fn, x):
    h = 1e-6
    p, n = x.shape
    out = np.empty((p, n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        out[:, :, j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return out


# ----------------------------------------------------------------------
# dynamic-programming oracle
# ----------------------------------------------------------------------

def test_dp_zero_cost():
    scenario, _ = make_lq_scalar()
    free = make_lq_scalar()[0]
    free.running_cost = lambda t, x, u: np.zeros(x.shape[0])
    free.terminal_cost = lambda x: np.zeros(x.shape[0])
    grid = TimeGrid(0.0, 1.0, 50)
    bundle = dp_oracle_scalar(free, np.linspace(-2, 3, 101), np.linspace(-1, 1, 11), grid)
    np.testing.assert_allclose(bundle.values, 0.0, atol=1e-12)


def test_dp_matches_riccati_within_two_percent():
    scenario, params = make_lq_scalar()
    grid = TimeGrid(0.0, 1.0, 200)
    dp = dp_oracle_scalar(scenario, np.linspace(-2.0, 3.0, 401), np.linspace(-3.0, 3.0, 41), grid)
    rc = riccati_oracle(params, grid)
    v_dp = dp.value_at(1.0)
    v_rc = rc.value_at(1.0)
    assert abs(v_dp - v_rc) / v_rc < 0.02


def test_dp_policy_near_riccati_feedback():
    scenario, params = make_lq_scalar()
    grid = TimeGrid(0.0, 1.0, 200)
    u_grid = np.linspace(-3.0, 3.0, 41)
    dp = dp_oracle_scalar(scenario, np.linspace(-2.0, 3.0, 401), u_grid, grid)
    du = u_grid[1] - u_grid[0]
    assert abs(dp.policy_at(1.0) - (-1.0)) <= du + 1e-12


def test_dp_lattice_escape_guard():
    scenario, _ = make_lq_scalar(sigma=2.0)
    grid = TimeGrid(0.0, 1.0, 50)
    with pytest.raises(LatticeEscapeError):
        dp_oracle_scalar(scenario, np.linspace(-0.3, 0.3, 31), np.linspace(-1, 1, 5), grid)


# ----------------------------------------------------------------------
# preset files
# ----------------------------------------------------------------------

def test_preset_grammar():
    cfg = parse_preset_text("kind = lq_scalar\n# comment\nx0 = 1.0, 2.0\nT = 1.0\nn = 4\n")
    assert cfg["kind"] == "lq_scalar"
    np.testing.assert_array_equal(cfg["x0"], [1.0, 2.0])
    assert cfg["T"] == 1.0 and cfg["n"] == 4
    with pytest.raises(DomainError):
        parse_preset_text("not a key value line")


def test_shipped_presets_load_and_build():
    names = available_presets()
    assert {"lq_scalar", "heat4", "mat_scalar"} <= set(names)
    for name in ("lq_scalar", "heat4"):
        cfg = load_preset(name)
        scenario, params = build_preset(cfg)
        assert scenario.x0 is not None
    mat = load_preset("mat_scalar")
    assert mat["kappa"] == 0.5


def test_preset_dir_override(tmp_path, monkeypatch):
    p = tmp_path / "custom.preset"
    p.write_text("kind = lq_scalar\nsigma = 0.1\n")
    monkeypatch.setenv("SMPKIT_PRESET_DIR", str(tmp_path))
    assert available_presets() == ["custom"]
    cfg = load_preset("custom")
    assert cfg["sigma"] == 0.1


def test_unknown_preset_raises():
    with pytest.raises(FileNotFoundError):
        load_preset("nope_not_here")

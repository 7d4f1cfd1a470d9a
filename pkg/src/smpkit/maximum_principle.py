"""Optimality machinery: Hamiltonian, first- and second-order conditions,
a projected-gradient control search, and the spike-perturbation experiment.

The scalar functional tested at a candidate optimum is

    S(t, u) = H(t, xbar, ubar, y, Y) - H(t, xbar, u, y, Y)
              - 0.5 < P (b(t, xbar, u) - b(t, xbar, ubar)),
                       b(t, xbar, u) - b(t, xbar, ubar) >

with H(t, x, u, k1, k2) = <k1, a> + <k2, b> - g.  At a minimizer S >= 0 for
every admissible u at almost every time, and the cost response to a
width-epsilon control spike is E int_{spike} S dt + o(epsilon), which the
spike experiment measures directly with common random numbers.
"""

from dataclasses import dataclass, field

import numpy as np

from .adjoint import check_same_ensemble, solve_first_adjoint
from .errors import DomainError, StepRuleError, WrongTheoremError
from .forward import OpenLoop, cost_paths, simulate_controlled
from .second_order import solve_second_adjoint


def hamiltonian(scenario, t, x, u, k1, k2):
    """<k1, a(t,x,u)> + <k2, b(t,x,u)> - g(t,x,u), batched over paths."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if not np.all(scenario.control_set.contains(u)):
        raise DomainError("control point outside the admissible set")
    k1 = np.broadcast_to(np.asarray(k1, dtype=float), x.shape)
    k2 = np.broadcast_to(np.asarray(k2, dtype=float), x.shape)
    return (
        np.sum(k1 * scenario.drift(t, x, u), axis=-1)
        + np.sum(k2 * scenario.diffusion(t, x, u), axis=-1)
        - scenario.running_cost(t, x, u)
    )


def convex_gradient(scenario, t_index, x_slice, u_slice, y_slice, Y_slice, grid=None):
    """Control-space direction a_u* y + b_u* Y - g_u per path.

    Only meaningful on convex control sets, where the optimality condition
    says this vector pairs nonpositively with every u - ubar."""
    if not scenario.control_set.convex:
        raise WrongTheoremError(
            "gradient condition needs a convex control set; use spike_functional"
        )
    t = t_index if grid is None else grid.times()[t_index]
    a_u = scenario.jac_u("a", t, x_slice, u_slice)
    b_u = scenario.jac_u("b", t, x_slice, u_slice)
    return (
        np.einsum("pim,pi->pm", a_u, y_slice)
        + np.einsum("pim,pi->pm", b_u, Y_slice)
        - scenario.grad_u_running(t, x_slice, u_slice)
    )


def control_gradient(scenario, traj, pair):
    """Per-path, per-step gradient direction, shape (n_paths, n_steps, m)."""
    grid = traj.grid
    out = np.empty((traj.n_paths, grid.n_steps, scenario.control_dim))
    times = grid.times()
    for j in range(grid.n_steps):
        out[:, j] = convex_gradient(
            scenario, j, traj.states[:, j], traj.controls_used[:, j],
            pair.y[:, j], pair.Y[:, j], grid=grid,
        )
    return out


def spike_functional(scenario, t, x_slice, u_bar_slice, u, y_slice, Y_slice, P_slice):
    """Per-path S(t, u) for one alternative control point u."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = np.broadcast_to(u, (x_slice.shape[0], u.size))
    h_bar = hamiltonian(scenario, t, x_slice, u_bar_slice, y_slice, Y_slice)
    h_alt = hamiltonian(scenario, t, x_slice, u, y_slice, Y_slice)
    db = scenario.diffusion(t, x_slice, u) - scenario.diffusion(t, x_slice, u_bar_slice)
    quad = np.einsum("pi,pij,pj->p", db, P_slice, db)
    return h_bar - h_alt - 0.5 * quad


@dataclass
class MPReport:
    """Sample means of S over a (time, control) grid with the pass rule
    value >= -(k_sigma * stderr + bias_budget) entrywise."""

    t_indices: np.ndarray
    u_points: np.ndarray          # (n_u, control_dim)
    values: np.ndarray            # (n_t, n_u) sample means
    stderrs: np.ndarray           # (n_t, n_u)
    bias_budget: float
    k_sigma: float = 3.0

    @property
    def tolerances(self):
        return self.k_sigma * self.stderrs + self.bias_budget

    @property
    def max_violation(self):
        return float(np.max(np.maximum(0.0, -self.values)))

    @property
    def argmax_violation(self):
        idx = np.unravel_index(np.argmin(self.values), self.values.shape)
        return int(self.t_indices[idx[0]]), self.u_points[idx[1]]

    @property
    def passed(self):
        return bool(np.all(self.values >= -self.tolerances))

    def rows(self):
        for a, t_idx in enumerate(self.t_indices):
            for b in range(len(self.u_points)):
                yield {
                    "t_index": int(t_idx),
                    "u": " ".join(f"{c:.17g}" for c in np.atleast_1d(self.u_points[b])),
                    "mean_S": self.values[a, b],
                    "stderr": self.stderrs[a, b],
                    "tolerance": self.tolerances[a, b],
                    "pass": int(self.values[a, b] >= -self.tolerances[a, b]),
                }


def second_order_data(scenario, traj, pair):
    """Adjoint-equation coefficients along a candidate trajectory:
    J = a_x, K = b_x, F = -(state Hessian of H), P_T = -h_xx(x(T)).

    With ``scenario.constant_jacobians`` the coefficients are evaluated on a
    single path per step (they are state-independent by contract); otherwise
    full per-path arrays are built."""
    grid = traj.grid
    N = grid.n_steps
    n = scenario.n_modes
    times = grid.times()
    P_T = -scenario.hess_terminal(traj.states[:, N])
    if scenario.constant_jacobians:
        J = np.empty((N, n, n))
        K = np.empty((N, n, n))
        F = np.empty((N, n, n))
        for j in range(N):
            x1 = traj.states[:1, j]
            u1 = traj.controls_used[:1, j]
            J[j] = scenario.jac_x("a", times[j], x1, u1)[0]
            K[j] = scenario.jac_x("b", times[j], x1, u1)[0]
            F[j] = -scenario.hamiltonian_hess_x(
                times[j], x1, u1, pair.y[:1, j], pair.Y[:1, j]
            )[0]
        return J, K, F, P_T
    P = traj.n_paths
    J = np.empty((P, N, n, n))
    K = np.empty((P, N, n, n))
    F = np.empty((P, N, n, n))
    for j in range(N):
        xj, uj = traj.states[:, j], traj.controls_used[:, j]
        J[:, j] = scenario.jac_x("a", times[j], xj, uj)
        K[:, j] = scenario.jac_x("b", times[j], xj, uj)
        F[:, j] = -scenario.hamiltonian_hess_x(times[j], xj, uj, pair.y[:, j], pair.Y[:, j])
    return J, K, F, P_T


def solve_adjoints(scenario, traj, ens, basis=None):
    """First- and second-order backward solves along one trajectory."""
    pair = solve_first_adjoint(scenario, traj, None, ens, basis=basis)
    J, K, F, P_T = second_order_data(scenario, traj, pair)
    sa = solve_second_adjoint(
        scenario.op, J, K, F, P_T, ens, basis=basis, feature_states=traj.states
    )
    return pair, sa


def check_condition(scenario, traj, pair, sa, u_grid, t_grid, bias_budget=0.0,
                    k_sigma=3.0):
    """Aggregate the spike functional over a (t, u) grid into an MPReport."""
    u_grid = np.atleast_2d(np.asarray(u_grid, dtype=float))
    if u_grid.size == 0:
        raise DomainError("empty control grid makes the condition vacuous")
    t_grid = np.asarray(t_grid, dtype=int)
    if t_grid.size == 0:
        raise DomainError("empty time grid makes the condition vacuous")
    check_same_ensemble(traj, pair, sa)
    times = traj.grid.times()
    P = traj.n_paths
    values = np.empty((len(t_grid), len(u_grid)))
    stderrs = np.empty_like(values)
    for a, j in enumerate(t_grid):
        x_slice = traj.states[:, j]
        u_bar = traj.controls_used[:, j]
        P_slice = sa.P_paths(j)
        for b, u in enumerate(u_grid):
            s = spike_functional(
                scenario, times[j], x_slice, u_bar, u, pair.y[:, j], pair.Y[:, j], P_slice
            )
            values[a, b] = s.mean()
            stderrs[a, b] = s.std(ddof=1) / np.sqrt(P)
    return MPReport(t_grid, u_grid, values, stderrs, bias_budget, k_sigma)


# ----------------------------------------------------------------------
# projected gradient search
# ----------------------------------------------------------------------

@dataclass
class OptimizeHistory:
    iterations: list = field(default_factory=list)

    def append(self, i, cost, stderr, step_norm):
        self.iterations.append(
            {"iter": i, "J": cost, "stderr": stderr, "step_norm": step_norm}
        )

    @property
    def final_cost(self):
        return self.iterations[-1]["J"]


def projected_gradient(scenario, x0, control, ens, step_rule=0.8, max_iters=200,
                       basis=None, tol_step=1e-6):
    """Iterate u <- clamp(u + step * (a_u* y + b_u* Y - g_u)) on a per-path
    open-loop control.

    The update uses the regression-fitted adjoint values, so the control at
    step j is a measurable function of that path's state there, and the
    iteration is a deterministic map for a frozen ensemble.  Stops when the
    update norm falls under ``tol_step`` or after ``max_iters`` iterations.
    Persistent cost increase (more than 10 stderr for 5 straight iterations)
    raises a step-rule error.
    """
    if not scenario.control_set.convex:
        raise WrongTheoremError("projected gradient needs a convex control set")
    step_of = step_rule if callable(step_rule) else (lambda i: step_rule)
    grid = ens.grid
    dt = grid.dt
    if isinstance(control, OpenLoop):
        u = np.asarray(control.values, dtype=float)
    else:
        u = np.asarray(control, dtype=float)
    if u.ndim == 2:
        u = np.broadcast_to(u, (ens.n_paths,) + u.shape).copy()

    history = OptimizeHistory()
    best = np.inf
    bad_streak = 0
    for i in range(max_iters + 1):
        traj = simulate_controlled(scenario, x0, OpenLoop(u), ens)
        costs = cost_paths(scenario, traj)
        cost = float(costs.mean())
        stderr = float(costs.std(ddof=1) / np.sqrt(len(costs)))
        pair = solve_first_adjoint(scenario, traj, None, ens, basis=basis)
        grad = control_gradient(scenario, traj, pair)
        step = step_of(i)
        new_u = scenario.control_set.projection(
            (traj.controls_used + step * grad).reshape(-1, scenario.control_dim)
        ).reshape(traj.controls_used.shape)
        step_norm = float(
            np.sqrt(np.mean(np.sum((new_u - traj.controls_used) ** 2, axis=-1)) * dt * grid.n_steps)
        )
        history.append(i, cost, stderr, step_norm)
        if cost > best + 10 * max(stderr, 1e-300):
            bad_streak += 1
            if bad_streak >= 5:
                raise StepRuleError(
                    f"cost increased for {bad_streak} consecutive iterations"
                )
        else:
            bad_streak = 0
        best = min(best, cost)
        if step_norm < tol_step or i == max_iters:
            u = new_u
            break
        u = new_u
    return OpenLoop(u), history


# ----------------------------------------------------------------------
# spike experiment
# ----------------------------------------------------------------------

@dataclass
class SpikeTable:
    tau: float
    rows: list

    def as_rows(self):
        return self.rows


def spike_experiment(scenario, x0, u_bar, u_alt, tau, eps_list, ens,
                     basis=None, adjoints=None):
    """Cost response to spiking the control to ``u_alt`` on [tau, tau+eps).

    All rows share the base trajectory and the noise ensemble (common random
    numbers), so delta_J comes from pathwise differencing.  The prediction
    integrates the sample mean of S over the spike window using the adjoint
    data of the base trajectory."""
    eps_list = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps_list) or any(
        b >= a for a, b in zip(eps_list, eps_list[1:])
    ):
        raise DomainError("eps values must be positive and strictly decreasing")
    grid = ens.grid
    dt = grid.dt
    if tau + max(eps_list) > grid.T + 1e-12:
        raise DomainError("spike window exceeds the horizon")
    times = grid.times()
    j_tau = int(round((tau - grid.t0) / dt))

    base_traj = simulate_controlled(scenario, x0, u_bar, ens)
    base_costs = cost_paths(scenario, base_traj)
    if adjoints is None:
        pair, sa = solve_adjoints(scenario, base_traj, ens, basis=basis)
    else:
        pair, sa = adjoints

    u_alt = np.asarray(u_alt, dtype=float)
    rows = []
    for eps in eps_list:
        width = int(round(eps / dt))
        j_hi = j_tau + width
        spiked = np.array(base_traj.controls_used, copy=True)
        spiked[:, j_tau:j_hi] = u_alt
        pert_traj = simulate_controlled(scenario, x0, OpenLoop(spiked), ens)
        pert_costs = cost_paths(scenario, pert_traj)
        diff = pert_costs - base_costs
        delta = float(diff.mean())
        stderr = float(diff.std(ddof=1) / np.sqrt(len(diff)))
        predicted = 0.0
        for j in range(j_tau, j_hi):
            s = spike_functional(
                scenario, times[j], base_traj.states[:, j], base_traj.controls_used[:, j],
                u_alt, pair.y[:, j], pair.Y[:, j], sa.P_paths(j),
            )
            predicted += dt * float(s.mean())
        remainder = delta - predicted
        rows.append(
            {
                "epsilon": eps,
                "tau": tau,
                "J_perturbed": float(pert_costs.mean()),
                "J_base": float(base_costs.mean()),
                "delta_J": delta,
                "stderr": stderr,
                "predicted": predicted,
                "remainder": remainder,
                "remainder_over_eps": remainder / eps,
            }
        )
    return SpikeTable(tau, rows)

"""Monte Carlo simulation of the controlled forward dynamics.

All simulators use the exponential Euler scheme: the affine update from
drift, control and noise is computed first, then the exact diagonal flow is
applied for one step.  This respects the variation-of-constants form of the
dynamics and is unconditionally stable for stiff dissipative spectra.

Path ensembles are vectorized: states are arrays of shape
``(n_paths, n_steps + 1, n_modes)`` and every coefficient callback receives
batched inputs ``x: (n_paths, n), u: (n_paths, control_dim)``.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError, DomainError, SimulationDivergedError
from .spectral import OperatorSpec

OVERFLOW_GUARD = 1e12


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if self.T <= self.t0:
            raise DomainError("T must exceed t0")
        if self.n_steps < 1:
            raise DomainError("n_steps must be >= 1")

    @property
    def dt(self):
        return (self.T - self.t0) / self.n_steps

    def times(self):
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


@dataclass(frozen=True)
class BrownianEnsemble:
    """Seeded scalar Brownian increments on a uniform grid.

    Row i is drawn from a child stream keyed by (seed, i), so a path's
    increments do not depend on how many other paths were sampled or on any
    worker layout.
    """

    grid: TimeGrid
    n_paths: int
    increments: np.ndarray  # (n_paths, n_steps), units sqrt(time)
    seed: int

    @property
    def fingerprint(self):
        return (self.seed, self.grid.t0, self.grid.T, self.grid.n_steps, self.n_paths)

    def brownian_paths(self):
        """Cumulative paths w(t_j), shape (n_paths, n_steps + 1), w(t0) = 0."""
        w = np.zeros((self.n_paths, self.grid.n_steps + 1))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return w


def sample_brownian(grid, n_paths, seed):
    if n_paths < 1:
        raise DomainError("n_paths must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_paths)
    incr = np.empty((n_paths, grid.n_steps))
    scale = np.sqrt(grid.dt)
    for i, child in enumerate(children):
        incr[i] = np.random.default_rng(child).standard_normal(grid.n_steps)
    incr *= scale
    return BrownianEnsemble(grid, n_paths, incr, seed)


# ----------------------------------------------------------------------
# Control sets and control processes
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Convex product of intervals; projection is the coordinatewise clamp."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise DomainError("invalid box bounds")

    @property
    def dim(self):
        return self.lo.size

    @property
    def convex(self):
        return True

    def contains(self, u, tol=1e-12):
        u = np.atleast_2d(u)
        return np.all((u >= self.lo - tol) & (u <= self.hi + tol), axis=-1)

    def projection(self, u):
        return np.clip(u, self.lo, self.hi)

    def sample_grid(self, points_per_dim):
        axes = [np.linspace(l, h, points_per_dim) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class FiniteGrid:
    """Finite (possibly nonconvex) control set; projection picks the nearest
    point, first index winning ties."""

    points: np.ndarray  # (n_points, control_dim)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        object.__setattr__(self, "points", pts)
        if pts.shape[0] < 1:
            raise DomainError("finite control set needs at least one point")

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def convex(self):
        return False

    def contains(self, u, tol=1e-12):
        u = np.atleast_2d(u)
        d2 = np.sum((u[:, None, :] - self.points[None, :, :]) ** 2, axis=-1)
        return np.min(d2, axis=1) <= tol**2

    def projection(self, u):
        u = np.atleast_2d(u)
        d2 = np.sum((u[:, None, :] - self.points[None, :, :]) ** 2, axis=-1)
        return self.points[np.argmin(d2, axis=1)]

    def sample_grid(self, points_per_dim=None):
        return self.points.copy()


@dataclass
class OpenLoop:
    """Control given by its grid values, shape (n_steps, m) shared across
    paths or (n_paths, n_steps, m) per path."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def at(self, j, t, x):
        if self.values.ndim == 2:
            u = self.values[j]
            return np.broadcast_to(u, (x.shape[0], u.size))
        return self.values[:, j, :]


@dataclass
class Feedback:
    """Markov feedback u(t, x); the callback receives batched states."""

    fn: Callable[[float, np.ndarray], np.ndarray]

    def at(self, j, t, x):
        u = np.asarray(self.fn(t, x), dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        return u


# ----------------------------------------------------------------------
# Scenario: coefficient bundle with derivative fallbacks
# ----------------------------------------------------------------------

def _fd_step(x):
    return 1e-5 * (1.0 + np.abs(x))


@dataclass
class Scenario:
    """One problem instance: dynamics coefficients, costs, control set.

    ``drift`` and ``diffusion`` map (t, x, u) -> (n_paths, n); ``running_cost``
    maps (t, x, u) -> (n_paths,); ``terminal_cost`` maps x -> (n_paths,).
    Derivative callbacks are optional; missing ones are replaced by central
    finite differences with step 1e-5 * (1 + |x|).
    """

    op: OperatorSpec
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal_cost: Callable
    control_dim: int
    control_set: object
    lipschitz: float = 1.0
    name: str = "scenario"
    drift_x: Optional[Callable] = None          # (t,x,u) -> (P,n,n), [p,i,j] = d a_i / d x_j
    drift_u: Optional[Callable] = None          # (t,x,u) -> (P,n,m)
    diffusion_x: Optional[Callable] = None
    diffusion_u: Optional[Callable] = None
    running_grad_x: Optional[Callable] = None   # (t,x,u) -> (P,n)
    running_grad_u: Optional[Callable] = None   # (t,x,u) -> (P,m)
    terminal_grad: Optional[Callable] = None    # x -> (P,n)
    running_hess_x: Optional[Callable] = None   # (t,x,u) -> (P,n,n)
    terminal_hess: Optional[Callable] = None    # x -> (P,n,n)
    drift_xx: Optional[Callable] = None         # (t,x,u) -> (P,n,n,n), [p,k,i,j]
    diffusion_xx: Optional[Callable] = None
    constant_jacobians: bool = False
    # preset metadata (bias constants for residual pass rules, initial state)
    x0: Optional[np.ndarray] = None
    c_bias_first: float = 1.0
    c_bias_second: float = 1.0

    @property
    def n_modes(self):
        return self.op.n_modes

    # -- first derivatives ------------------------------------------------
    def jac_x(self, which, t, x, u):
        fn = self.drift if which == "a" else self.diffusion
        cb = self.drift_x if which == "a" else self.diffusion_x
        if cb is not None:
            return _expand(cb(t, x, u), x.shape[0], (self.n_modes, self.n_modes))
        return _fd_jac_state(lambda xx: fn(t, xx, u), x)

    def jac_u(self, which, t, x, u):
        fn = self.drift if which == "a" else self.diffusion
        cb = self.drift_u if which == "a" else self.diffusion_u
        if cb is not None:
            return _expand(cb(t, x, u), x.shape[0], (self.n_modes, self.control_dim))
        return _fd_jac_control(lambda uu: fn(t, x, uu), u)

    def grad_x_running(self, t, x, u):
        if self.running_grad_x is not None:
            return _expand(self.running_grad_x(t, x, u), x.shape[0], (self.n_modes,))
        return _fd_grad(lambda xx: self.running_cost(t, xx, u), x)

    def grad_u_running(self, t, x, u):
        if self.running_grad_u is not None:
            return _expand(self.running_grad_u(t, x, u), x.shape[0], (self.control_dim,))
        return _fd_grad(lambda uu: self.running_cost(t, x, uu), u)

    def grad_terminal(self, x):
        if self.terminal_grad is not None:
            return _expand(self.terminal_grad(x), x.shape[0], (self.n_modes,))
        return _fd_grad(self.terminal_cost, x)

    # -- second derivatives -----------------------------------------------
    def hess_terminal(self, x):
        if self.terminal_hess is not None:
            return _expand(self.terminal_hess(x), x.shape[0], (self.n_modes,) * 2)
        return _fd_hess(self.terminal_cost, x)

    def hess_x_running(self, t, x, u):
        if self.running_hess_x is not None:
            return _expand(self.running_hess_x(t, x, u), x.shape[0], (self.n_modes,) * 2)
        return _fd_hess(lambda xx: self.running_cost(t, xx, u), x)

    def hamiltonian_hess_x(self, t, x, u, k1, k2):
        """State Hessian of <k1, a> + <k2, b> - g, shape (P, n, n)."""
        n = self.n_modes
        p = x.shape[0]
        out = -self.hess_x_running(t, x, u)
        for cb, fn, k in (
            (self.drift_xx, self.drift, k1),
            (self.diffusion_xx, self.diffusion, k2),
        ):
            if cb is not None:
                tensor = _expand(cb(t, x, u), p, (n, n, n))
                out = out + np.einsum("pk,pkij->pij", np.atleast_2d(k), tensor)
            else:
                out = out + _fd_hess(lambda xx: np.sum(np.atleast_2d(k) * fn(t, xx, u), axis=-1), x)
        return out


def _expand(arr, n_paths, trailing):
    """Broadcast a callback result to (n_paths, *trailing)."""
    arr = np.asarray(arr, dtype=float)
    target = (n_paths,) + tuple(trailing)
    if arr.shape == target:
        return arr
    return np.broadcast_to(arr, target)


def _fd_grad(fn, x):
    h = _fd_step(x)
    out = np.empty_like(x)
    for i in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[i] = 1.0
        out[:, i] = (fn(x + h[:, i : i + 1] * e) - fn(x - h[:, i : i + 1] * e)) / (2 * h[:, i])
    return out


def _fd_jac_state(fn, x):
    h = _fd_step(x)
    p, n = x.shape
    out = np.empty((p, fn(x).shape[-1], n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        step = h[:, j : j + 1]
        out[:, :, j] = (fn(x + step * e) - fn(x - step * e)) / (2 * step)
    return out


def _fd_jac_control(fn, u):
    h = _fd_step(u)
    p, m = u.shape
    out = np.empty((p, fn(u).shape[-1], m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        step = h[:, j : j + 1]
        out[:, :, j] = (fn(u + step * e) - fn(u - step * e)) / (2 * step)
    return out


def _fd_hess(fn, x):
    h = _fd_step(x)
    p, n = x.shape
    out = np.empty((p, n, n))
    f0 = fn(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = 1.0
        hi = h[:, i : i + 1]
        out[:, i, i] = (fn(x + hi * ei) - 2 * f0 + fn(x - hi * ei)) / hi[:, 0] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = 1.0
            hj = h[:, j : j + 1]
            mixed = (
                fn(x + hi * ei + hj * ej)
                - fn(x + hi * ei - hj * ej)
                - fn(x - hi * ei + hj * ej)
                + fn(x - hi * ei - hj * ej)
            ) / (4 * hi[:, 0] * hj[:, 0])
            out[:, i, j] = mixed
            out[:, j, i] = mixed
    return out


# ----------------------------------------------------------------------
# State ensembles and simulators
# ----------------------------------------------------------------------

@dataclass
class StateEnsemble:
    grid: TimeGrid
    states: np.ndarray          # (n_paths, n_steps + 1, n)
    controls_used: Optional[np.ndarray] = None  # (n_paths, n_steps, m)
    fingerprint: Optional[tuple] = None

    @property
    def n_paths(self):
        return self.states.shape[0]


def _check_finite(x_next, j):
    bad = ~np.isfinite(x_next) | (np.abs(x_next) > OVERFLOW_GUARD)
    if bad.any():
        path = int(np.argwhere(bad.any(axis=-1))[0, 0])
        raise SimulationDivergedError(j + 1, path)


def _initial_states(x0, n_paths, n):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        if x0.size != n:
            raise DimensionError(f"x0 has {x0.size} modes, expected {n}")
        return np.broadcast_to(x0, (n_paths, n)).copy()
    if x0.shape != (n_paths, n):
        raise DimensionError(f"per-path x0 must have shape {(n_paths, n)}")
    return x0.copy()


def simulate_controlled(scenario, x0, control, ens):
    """Integrate the controlled dynamics over the full grid.

    Controls are projected onto the scenario's control set before use and the
    projected values are recorded in ``controls_used``.
    """
    op = scenario.op
    grid = ens.grid
    dt = grid.dt
    n, m = op.n_modes, scenario.control_dim
    decay = np.exp(op.eigenvalues * dt)
    x = _initial_states(x0, ens.n_paths, n)
    states = np.empty((ens.n_paths, grid.n_steps + 1, n))
    controls = np.empty((ens.n_paths, grid.n_steps, m))
    states[:, 0] = x
    times = grid.times()
    for j in range(grid.n_steps):
        t = times[j]
        u = scenario.control_set.projection(control.at(j, t, x))
        controls[:, j] = u
        dw = ens.increments[:, j : j + 1]
        x = decay * (
            x + scenario.drift(t, x, u) * dt + scenario.diffusion(t, x, u) * dw
        )
        _check_finite(x, j)
        states[:, j + 1] = x
    return StateEnsemble(grid, states, controls, ens.fingerprint)


def _slice_time(proc, j, n_paths):
    """Pick step j from a (N, k) or (P, N, k) process array, or zeros if None."""
    if proc is None:
        return 0.0
    if proc.ndim == 2:
        return proc[j]
    return proc[:, j]


def iter_linear_test(op, t0_index, eta, v1, v2, ens):
    """Yield (j, z_j) for the test dynamics dz = (Az + v1)dt + v2 dw from
    t0_index to the final step; z is zero before t0_index by convention."""
    grid = ens.grid
    dt = grid.dt
    decay = np.exp(op.eigenvalues * dt)
    v1 = None if v1 is None else np.asarray(v1, dtype=float)
    v2 = None if v2 is None else np.asarray(v2, dtype=float)
    z = _initial_states(eta, ens.n_paths, op.n_modes)
    yield t0_index, z
    for j in range(t0_index, grid.n_steps):
        dw = ens.increments[:, j : j + 1]
        z = decay * (
            z + _slice_time(v1, j, ens.n_paths) * dt + _slice_time(v2, j, ens.n_paths) * dw
        )
        _check_finite(z, j)
        yield j + 1, z


def simulate_linear_test(op, t0_index, eta, v1, v2, ens):
    """Full-history version of :func:`iter_linear_test` (zero before t0)."""
    grid = ens.grid
    states = np.zeros((ens.n_paths, grid.n_steps + 1, op.n_modes))
    for j, z in iter_linear_test(op, t0_index, eta, v1, v2, ens):
        states[:, j] = z
    return StateEnsemble(grid, states, None, ens.fingerprint)


def _matvec_step(mat, j, x):
    """Apply step j of a constant (n,n), time-indexed (N,n,n) or path-indexed
    (P,N,n,n) matrix."""
    if mat is None:
        return 0.0
    if mat.ndim == 2:
        return np.einsum("ij,pj->pi", mat, x)
    if mat.ndim == 3:
        return np.einsum("ij,pj->pi", mat[j], x)
    return np.einsum("pij,pj->pi", mat[:, j], x)


def iter_linearized(op, J, K, t0_index, xi, u, v, ens):
    """Yield (j, x_j) for dx = ((A + J)x + u)dt + (Kx + v)dw from t0_index."""
    grid = ens.grid
    dt = grid.dt
    decay = np.exp(op.eigenvalues * dt)
    J = None if J is None else np.asarray(J, dtype=float)
    K = None if K is None else np.asarray(K, dtype=float)
    u = None if u is None else np.asarray(u, dtype=float)
    v = None if v is None else np.asarray(v, dtype=float)
    x = _initial_states(xi, ens.n_paths, op.n_modes)
    yield t0_index, x
    for j in range(t0_index, grid.n_steps):
        dw = ens.increments[:, j : j + 1]
        drift = _matvec_step(J, j, x) + _slice_time(u, j, ens.n_paths)
        noise = _matvec_step(K, j, x) + _slice_time(v, j, ens.n_paths)
        x = decay * (x + drift * dt + noise * dw)
        _check_finite(x, j)
        yield j + 1, x


def simulate_linearized(op, J, K, t0_index, xi, u, v, ens):
    grid = ens.grid
    states = np.zeros((ens.n_paths, grid.n_steps + 1, op.n_modes))
    for j, x in iter_linearized(op, J, K, t0_index, xi, u, v, ens):
        states[:, j] = x
    return StateEnsemble(grid, states, None, ens.fingerprint)


def cost_paths(scenario, traj):
    """Per-path cost: left-endpoint quadrature of the running cost plus the
    terminal cost."""
    grid = traj.grid
    times = grid.times()
    total = np.zeros(traj.n_paths)
    for j in range(grid.n_steps):
        total += scenario.running_cost(times[j], traj.states[:, j], traj.controls_used[:, j])
    total *= grid.dt
    total += scenario.terminal_cost(traj.states[:, -1])
    return total


def estimate_cost(scenario, x0, control, ens):
    traj = simulate_controlled(scenario, x0, control, ens)
    c = cost_paths(scenario, traj)
    stderr = float(np.std(c, ddof=1) / np.sqrt(len(c))) if len(c) > 1 else 0.0
    return float(np.mean(c)), stderr

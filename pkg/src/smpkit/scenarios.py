"""Preset problem instances and independent value oracles.

Two presets are shipped as text files under ``presets/``: a scalar
linear-quadratic instance with additive noise, and a dissipative spectral
("heat") instance with the control entering both drift and diffusion.  Both
carry analytic derivative callbacks and calibrated bias constants for the
residual pass rules.

Oracles: a Riccati backward sweep (quadratic/linear/constant value
coefficients, including the diffusion correction for state- and
control-dependent noise) and a brute-force dynamic-programming sweep on a
scalar lattice with Gauss-Hermite transition quadrature.  They are
independent of the Monte Carlo machinery they back-check.
"""

import os
from dataclasses import dataclass
from importlib import resources
from typing import Optional

import numpy as np

from .errors import DomainError, LatticeEscapeError, OracleBreakdownError
from .forward import Box, Feedback, Scenario, TimeGrid
from .spectral import OperatorSpec, make_dirichlet_laplacian


@dataclass
class LqParams:
    """dx = (A x + B u) dt + (C x + D u + sigma) dw with quadratic costs
    0.5 * (x'Mx + u'Nu) running and 0.5 * x'Gx terminal."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    sigma: np.ndarray
    M: np.ndarray
    N: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "D", "M", "N", "G"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.C.shape != (n, n) or self.D.shape != (n, m):
            raise DomainError("inconsistent LQ matrix dimensions")
        if self.N.shape != (m, m) or self.M.shape != (n, n) or self.G.shape != (n, n):
            raise DomainError("inconsistent LQ cost dimensions")


@dataclass
class OracleBundle:
    """Ground-truth value data: either Riccati coefficients and feedback
    gains, or a dynamic-programming table (both expose ``value_at``)."""

    grid: TimeGrid
    # Riccati branch
    P: Optional[np.ndarray] = None       # (n_steps+1, n, n)
    q: Optional[np.ndarray] = None       # (n_steps+1, n)
    r: Optional[np.ndarray] = None       # (n_steps+1,)
    gains: Optional[np.ndarray] = None   # (n_steps+1, m, n)
    affine: Optional[np.ndarray] = None  # (n_steps+1, m)
    # DP branch
    x_lattice: Optional[np.ndarray] = None
    u_grid: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None  # (n_steps+1, len(lattice))
    policy: Optional[np.ndarray] = None  # (n_steps, len(lattice))

    def value_at(self, x0):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if self.P is not None:
            return float(0.5 * x0 @ self.P[0] @ x0 + self.q[0] @ x0 + self.r[0])
        return float(np.interp(x0[0], self.x_lattice, self.values[0]))

    def feedback(self):
        """Markov feedback control from the Riccati gains."""
        if self.gains is None:
            raise OracleBreakdownError("no gains in this bundle")
        grid = self.grid

        def fn(t, x):
            j = int(round((t - grid.t0) / grid.dt))
            j = min(max(j, 0), grid.n_steps)
            return -(x @ self.gains[j].T + self.affine[j])

        return Feedback(fn)

    def policy_at(self, x):
        if self.policy is None:
            raise OracleBreakdownError("no policy table in this bundle")
        i = int(np.argmin(np.abs(self.x_lattice - x)))
        return float(self.policy[0, i])


# ----------------------------------------------------------------------
# Riccati oracle
# ----------------------------------------------------------------------

def _riccati_rhs(lq, P, q, r):
    """Time derivatives of the value coefficients (so the exact solution
    satisfies dP/dt = rhs_P, integrated backward from the terminal data)."""
    theta = lq.N + lq.D.T @ P @ lq.D
    try:
        theta_inv = np.linalg.inv(theta)
    except np.linalg.LinAlgError as exc:
        raise OracleBreakdownError("singular control gain block") from exc
    L = theta_inv @ (lq.B.T @ P + lq.D.T @ P @ lq.C)
    ell = theta_inv @ (lq.B.T @ q + lq.D.T @ P @ lq.sigma)
    CDL = lq.C - lq.D @ L
    sig = lq.sigma - lq.D @ ell
    dP = -(
        lq.A.T @ P + P @ lq.A - L.T @ lq.B.T @ P - P @ lq.B @ L
        + CDL.T @ P @ CDL + lq.M + L.T @ lq.N @ L
    )
    dq = -(
        lq.A.T @ q - P @ lq.B @ ell - L.T @ lq.B.T @ q
        + CDL.T @ P @ sig + L.T @ lq.N @ ell
    )
    dr = -(-ell @ lq.B.T @ q + 0.5 * sig @ P @ sig + 0.5 * ell @ lq.N @ ell)
    return dP, dq, dr, L, ell


def _stiffness_substeps(lq, dt):
    rate = 2 * np.linalg.norm(lq.A, 2) + 2 * np.linalg.norm(lq.C, 2) ** 2 + np.linalg.norm(lq.M, 2) + 1.0
    return max(1, int(np.ceil(rate * dt / 0.02)))


def riccati_oracle(lq, grid):
    """Backward RK4 sweep for the LQ value function and feedback gains.

    Substeps are chosen from the coefficient stiffness so accuracy does not
    degrade for strongly dissipative spectra.
    """
    n = lq.A.shape[0]
    m = lq.B.shape[1]
    steps = grid.n_steps
    P = np.empty((steps + 1, n, n))
    q = np.empty((steps + 1, n))
    r = np.empty(steps + 1)
    gains = np.empty((steps + 1, m, n))
    affine = np.empty((steps + 1, m))
    P[steps], q[steps], r[steps] = lq.G, np.zeros(n), 0.0
    sub = _stiffness_substeps(lq, grid.dt)
    h = grid.dt / sub

    def rhs(state):
        dP, dq, dr, _, _ = _riccati_rhs(lq, *state)
        return dP, dq, dr

    state = (lq.G.copy(), np.zeros(n), 0.0)
    gains[steps], affine[steps] = _riccati_rhs(lq, *state)[3:]
    for j in range(steps - 1, -1, -1):
        for _ in range(sub):
            # integrating backward: step -h along the forward derivative
            k1 = rhs(state)
            k2 = rhs(tuple(s - 0.5 * h * k for s, k in zip(state, k1)))
            k3 = rhs(tuple(s - 0.5 * h * k for s, k in zip(state, k2)))
            k4 = rhs(tuple(s - h * k for s, k in zip(state, k3)))
            state = tuple(
                s - h / 6.0 * (a + 2 * b + 2 * c + d)
                for s, a, b, c, d in zip(state, k1, k2, k3, k4)
            )
        Pj = 0.5 * (state[0] + state[0].T)
        state = (Pj, state[1], state[2])
        P[j], q[j], r[j] = Pj, state[1], state[2]
        gains[j], affine[j] = _riccati_rhs(lq, *state)[3:]
    return OracleBundle(grid, P=P, q=q, r=r, gains=gains, affine=affine)


# ----------------------------------------------------------------------
# Dynamic-programming oracle (scalar state)
# ----------------------------------------------------------------------

GH_NODES, GH_WEIGHTS = np.polynomial.hermite.hermgauss(7)


def dp_oracle_scalar(scenario, x_lattice, u_grid, grid):
    """Backward value iteration on a scalar lattice.

    Transitions follow the one-step Euler map of the simulator; the Gaussian
    expectation uses 7-point Gauss-Hermite quadrature; values between lattice
    nodes are linearly interpolated.  Raises when more than 1% of the
    transition mass escapes the lattice from its core region.
    """
    if scenario.n_modes != 1:
        raise DomainError("dp oracle handles scalar scenarios only")
    x_lattice = np.asarray(x_lattice, dtype=float)
    u_grid = np.asarray(u_grid, dtype=float)
    L, U = x_lattice.size, u_grid.size
    dt = grid.dt
    times = grid.times()
    noise = np.sqrt(2.0 * dt) * GH_NODES          # N(0, dt) via Hermite nodes
    weights = GH_WEIGHTS / np.sqrt(np.pi)

    values = np.empty((grid.n_steps + 1, L))
    policy = np.empty((grid.n_steps, L))
    values[-1] = scenario.terminal_cost(x_lattice[:, None])

    xx = np.repeat(x_lattice, U)[:, None]         # (L*U, 1)
    uu = np.tile(u_grid, L)[:, None]
    lo, hi = x_lattice[0], x_lattice[-1]
    core = (x_lattice >= lo + 0.25 * (hi - lo)) & (x_lattice <= hi - 0.25 * (hi - lo))
    worst_escape = 0.0

    for j in range(grid.n_steps - 1, -1, -1):
        t = times[j]
        a = scenario.drift(t, xx, uu)[:, 0]
        b = scenario.diffusion(t, xx, uu)[:, 0]
        g = scenario.running_cost(t, xx, uu)
        x_next = xx[:, 0, None] + a[:, None] * dt + b[:, None] * noise[None, :]
        cont = np.interp(x_next.ravel(), x_lattice, values[j + 1]).reshape(L * U, -1)
        q_values = (g * dt + cont @ weights).reshape(L, U)
        best = np.argmin(q_values, axis=1)
        values[j] = q_values[np.arange(L), best]
        policy[j] = u_grid[best]

        escaped = ((x_next < lo) | (x_next > hi)).astype(float) @ weights
        esc = escaped.reshape(L, U)[np.arange(L), best]
        worst_escape = max(worst_escape, float(esc[core].max()))

    if worst_escape > 0.01:
        raise LatticeEscapeError(
            f"transition mass {worst_escape:.3f} escapes the lattice; widen it"
        )
    return OracleBundle(grid, x_lattice=x_lattice, u_grid=u_grid, values=values, policy=policy)


# ----------------------------------------------------------------------
# Presets
# ----------------------------------------------------------------------

def make_lq_scalar(sigma=0.3, T=1.0, x0=1.0, control_bound=6.0,
                   c_bias_first=0.2, c_bias_second=0.5):
    """Scalar preset: dx = u dt + sigma dw, g = (x^2 + u^2)/2, h = x^2/2."""
    op = OperatorSpec(1, np.array([0.0]))
    zero11 = np.zeros((1, 1))
    scenario = Scenario(
        op=op,
        drift=lambda t, x, u: u,
        diffusion=lambda t, x, u: np.broadcast_to(np.array([sigma]), x.shape),
        running_cost=lambda t, x, u: 0.5 * (np.sum(x * x, axis=-1) + np.sum(u * u, axis=-1)),
        terminal_cost=lambda x: 0.5 * np.sum(x * x, axis=-1),
        control_dim=1,
        control_set=Box(lo=[-control_bound], hi=[control_bound]),
        lipschitz=1.0 + abs(sigma),
        name="lq_scalar",
        drift_x=lambda t, x, u: zero11,
        drift_u=lambda t, x, u: np.eye(1),
        diffusion_x=lambda t, x, u: zero11,
        diffusion_u=lambda t, x, u: zero11,
        running_grad_x=lambda t, x, u: x,
        running_grad_u=lambda t, x, u: u,
        terminal_grad=lambda x: x,
        running_hess_x=lambda t, x, u: np.eye(1),
        terminal_hess=lambda x: np.eye(1),
        drift_xx=lambda t, x, u: np.zeros((1, 1, 1)),
        diffusion_xx=lambda t, x, u: np.zeros((1, 1, 1)),
        constant_jacobians=True,
        x0=np.array([x0]),
        c_bias_first=c_bias_first,
        c_bias_second=c_bias_second,
    )
    params = LqParams(
        A=np.zeros((1, 1)), B=np.eye(1), C=np.zeros((1, 1)), D=np.zeros((1, 1)),
        sigma=np.array([sigma]), M=np.eye(1), N=np.eye(1), G=np.eye(1),
    )
    scenario.T = T
    return scenario, params


def make_heat_scenario(n_modes=4, control_dim=2, beta=0.1, drift_gain=1.0,
                       diffusion_gain=0.2, length=1.0, T=1.0, x0=None,
                       control_bound=6.0, c_bias_first=0.2, c_bias_second=0.5):
    """Dissipative spectral preset with control in both drift and diffusion:
    a = B u targets the leading modes, b = beta x + D u."""
    if n_modes < control_dim:
        raise DomainError("n_modes must be at least control_dim")
    op = make_dirichlet_laplacian(n_modes, length)
    pattern = np.zeros((n_modes, control_dim))
    pattern[:control_dim, :control_dim] = np.eye(control_dim)
    B = drift_gain * pattern
    D = diffusion_gain * pattern
    eye = np.eye(n_modes)
    if x0 is None:
        x0 = 2.0 ** -np.arange(n_modes)
    x0 = np.asarray(x0, dtype=float)

    scenario = Scenario(
        op=op,
        drift=lambda t, x, u: u @ B.T,
        diffusion=lambda t, x, u: beta * x + u @ D.T,
        running_cost=lambda t, x, u: 0.5 * (np.sum(x * x, axis=-1) + np.sum(u * u, axis=-1)),
        terminal_cost=lambda x: 0.5 * np.sum(x * x, axis=-1),
        control_dim=control_dim,
        control_set=Box(lo=[-control_bound] * control_dim, hi=[control_bound] * control_dim),
        lipschitz=max(1.0, beta, drift_gain, diffusion_gain),
        name=f"heat{n_modes}",
        drift_x=lambda t, x, u: np.zeros((n_modes, n_modes)),
        drift_u=lambda t, x, u: B,
        diffusion_x=lambda t, x, u: beta * eye,
        diffusion_u=lambda t, x, u: D,
        running_grad_x=lambda t, x, u: x,
        running_grad_u=lambda t, x, u: u,
        terminal_grad=lambda x: x,
        running_hess_x=lambda t, x, u: eye,
        terminal_hess=lambda x: eye,
        drift_xx=lambda t, x, u: np.zeros((n_modes,) * 3),
        diffusion_xx=lambda t, x, u: np.zeros((n_modes,) * 3),
        constant_jacobians=True,
        x0=x0,
        c_bias_first=c_bias_first,
        c_bias_second=c_bias_second,
    )
    scenario.T = T
    return scenario


def heat_lq_params(scenario, beta, drift_gain, diffusion_gain):
    """LQ matrices matching :func:`make_heat_scenario` for the Riccati oracle."""
    n = scenario.n_modes
    m = scenario.control_dim
    pattern = np.zeros((n, m))
    pattern[:m, :m] = np.eye(m)
    return LqParams(
        A=np.diag(scenario.op.eigenvalues), B=drift_gain * pattern,
        C=beta * np.eye(n), D=diffusion_gain * pattern,
        sigma=np.zeros(n), M=np.eye(n), N=np.eye(m), G=np.eye(n),
    )


# ----------------------------------------------------------------------
# Preset files: line-oriented "key = value" text
# ----------------------------------------------------------------------

def _parse_value(raw):
    raw = raw.strip()
    if "," in raw:
        return np.array([float(tok) for tok in raw.split(",") if tok.strip()])
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def parse_preset_text(text):
    cfg = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DomainError(f"bad preset line: {line!r}")
        key, raw = line.split("=", 1)
        cfg[key.strip()] = _parse_value(raw)
    return cfg


def preset_dir():
    override = os.environ.get("SMPKIT_PRESET_DIR")
    if override:
        return override
    return str(resources.files("smpkit") / "presets")


def available_presets():
    d = preset_dir()
    return sorted(f[: -len(".preset")] for f in os.listdir(d) if f.endswith(".preset"))


def load_preset(name):
    """Load a preset by name (searched in the preset directory) or by path."""
    path = name if os.path.sep in str(name) or str(name).endswith(".preset") else None
    if path is None:
        path = os.path.join(preset_dir(), f"{name}.preset")
    if not os.path.exists(path):
        raise FileNotFoundError(f"unknown preset: {name}")
    with open(path) as fh:
        cfg = parse_preset_text(fh.read())
    cfg.setdefault("name", os.path.basename(path)[: -len(".preset")])
    return cfg


def build_preset(cfg):
    """Instantiate a preset config: returns (scenario, lq_params_or_None)."""
    kind = cfg.get("kind")
    if kind == "lq_scalar":
        scenario, params = make_lq_scalar(
            sigma=float(cfg.get("sigma", 0.3)),
            T=float(cfg.get("T", 1.0)),
            x0=float(np.atleast_1d(cfg.get("x0", 1.0))[0]),
            control_bound=float(cfg.get("control_bound", 6.0)),
            c_bias_first=float(cfg.get("c_bias_first", 0.2)),
            c_bias_second=float(cfg.get("c_bias_second", 0.5)),
        )
        return scenario, params
    if kind == "heat":
        beta = float(cfg.get("beta", 0.1))
        drift_gain = float(cfg.get("drift_gain", 1.0))
        diffusion_gain = float(cfg.get("diffusion_gain", 0.2))
        scenario = make_heat_scenario(
            n_modes=int(cfg.get("n_modes", 4)),
            control_dim=int(cfg.get("control_dim", 2)),
            beta=beta,
            drift_gain=drift_gain,
            diffusion_gain=diffusion_gain,
            length=float(cfg.get("length", 1.0)),
            T=float(cfg.get("T", 1.0)),
            x0=cfg.get("x0"),
            control_bound=float(cfg.get("control_bound", 6.0)),
            c_bias_first=float(cfg.get("c_bias_first", 0.2)),
            c_bias_second=float(cfg.get("c_bias_second", 0.5)),
        )
        params = heat_lq_params(scenario, beta, drift_gain, diffusion_gain)
        return scenario, params
    if kind == "matrix_scalar":
        return cfg, None
    raise DomainError(f"unknown preset kind: {kind!r}")

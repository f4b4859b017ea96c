"""Shrinking-horizon NMPC for the double-support phase.

At every sample the DS DAE is reduced to ``dx/dt = f(x) + g(x) eta``,
discretized, linearized about the current state and the previously applied
input, and condensed into a dense QP over the remaining inputs.  Ground
reaction forces enter as linearized friction-cone rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qp as qpsolve
from .hybrid import ds_kkt, rk4
from .model import N_EXT, N_SS, ExtState, RobotParams, chain, HIP

NX = 2 * N_EXT
NU = 5


@dataclass(frozen=True)
class DSReference:
    r: np.ndarray  # (N + 1, 14): r[0] = post-impact state, r[N] = lifted x_s0

    @property
    def horizon(self) -> int:
        return self.r.shape[0] - 1


@dataclass(frozen=True)
class NMPCConfig:
    horizon: int = 10  # control intervals spanning the DS phase
    dt: float = 1e-3
    w_pos: float = 10.0
    w_vel: float = 1.0
    w_eta: float = 1e-3
    terminal_weight: float = 100.0
    angle_bound: float = np.pi
    velocity_bound: float = 20.0
    eps_normal: float = 0.5
    friction_margin: float = 0.9  # fraction of mu_s used in the QP rows
    use_thrust: bool = True
    discretization: str = "euler"
    fd_step: float = 1e-6

    def state_weights(self) -> np.ndarray:
        return np.concatenate([np.full(N_EXT, self.w_pos), np.full(N_EXT, self.w_vel)])


@dataclass
class QPProblem:
    """Condensed QP over the stacked inputs of the remaining horizon."""

    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    h: np.ndarray
    n_steps: int
    # affine prediction x_stack = Sx @ eta_stack + sx (states 1..n_steps)
    Sx: np.ndarray
    sx: np.ndarray
    # affine force prediction lam_stack = Sl @ eta_stack + sl (one 4-vector per input)
    Sl: np.ndarray
    sl: np.ndarray
    const: float = 0.0
    row_kind: list = field(default_factory=list)


@dataclass
class DSPlan:
    eta: np.ndarray  # (n_steps, 5)
    states: np.ndarray  # (n_steps, 14) predicted x[1..]
    lam: np.ndarray  # (n_steps, 4) predicted forces at each applied input
    status: str
    kkt_residual: float
    cost: float
    active_set_size: int

    @property
    def contact_ok(self) -> bool:
        return bool(np.all(self.lam[:, [1, 3]] > 0))

    def friction_ratio(self) -> np.ndarray:
        return np.abs(self.lam[:, [0, 2]]) / np.maximum(self.lam[:, [1, 3]], 1e-300)


def build_reference(x_d_plus, x_s0_lifted, N: int) -> DSReference:
    """Componentwise straight line from the post-impact state to the target."""
    if N < 1:
        raise ValueError("horizon must be at least one interval")
    a = np.asarray(x_d_plus.x if isinstance(x_d_plus, ExtState) else x_d_plus, dtype=float)
    b = np.asarray(x_s0_lifted.x if isinstance(x_s0_lifted, ExtState) else x_s0_lifted, dtype=float)
    lam = np.linspace(0.0, 1.0, N + 1)[:, None]
    r = a + lam * (b - a)
    r[0], r[-1] = a, b
    return DSReference(r)


def lift_target(x_s0, stance_foot, params: RobotParams) -> np.ndarray:
    """SS fixed point expressed in DS coordinates with the stance foot at ``stance_foot``."""
    ch = chain(params, False)
    q, dq = x_s0[:N_SS], x_s0[N_SS:]
    pH = ch.positions(q)[HIP] + np.asarray(stance_foot, dtype=float)
    vH = ch.jacobians(q)[HIP] @ dq
    return np.concatenate([q, pH, dq, vH])


# ---- dynamics linearization ------------------------------------------------

def _accel_affine(x, params: RobotParams):
    """ddq = a0 + Ga @ eta and lam = l0 + Gl @ eta at fixed state (exact)."""
    q, dq = x[:N_EXT], x[N_EXT:]
    ddq0, lam0, _ = ds_kkt(q, dq, np.zeros(NU), params)
    cols_a, cols_l = [], []
    for j in range(NU):
        e = np.zeros(NU)
        e[j] = 1.0
        ddq, lam, _ = ds_kkt(q, dq, e, params)
        cols_a.append(ddq - ddq0)
        cols_l.append(lam - lam0)
    return ddq0, np.column_stack(cols_a), lam0, np.column_stack(cols_l)


def continuous_rhs(x, eta, params: RobotParams) -> np.ndarray:
    ddq, _, _ = ds_kkt(x[:N_EXT], x[N_EXT:], eta, params)
    return np.concatenate([x[N_EXT:], ddq])


def one_step(x, eta, dt, params: RobotParams, method: str = "euler") -> np.ndarray:
    if method == "euler":
        return x + dt * continuous_rhs(x, eta, params)
    if method == "rk4":
        return rk4(lambda z: continuous_rhs(z, eta, params), x, dt)
    raise ValueError(f"unknown discretization {method!r}")


def discretize_linearize(x, eta0, dt: float, params: RobotParams, method: str = "euler", h: float = 1e-6):
    """Affine model x+ = A x + B eta + c, exact at (x, eta0)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    eta0 = np.asarray(eta0, dtype=float)
    x1 = one_step(x, eta0, dt, params, method)
    A = np.empty((NX, NX))
    for i in range(NX):
        e = np.zeros(NX)
        e[i] = h
        A[:, i] = (one_step(x + e, eta0, dt, params, method) - one_step(x - e, eta0, dt, params, method)) / (2 * h)
    if method == "euler":
        _, Ga, _, _ = _accel_affine(x, params)
        B = np.vstack([np.zeros((N_EXT, NU)), dt * Ga])
    else:
        B = np.empty((NX, NU))
        for j in range(NU):
            e = np.zeros(NU)
            e[j] = h
            B[:, j] = (one_step(x, eta0 + e, dt, params, method) - one_step(x, eta0 - e, dt, params, method)) / (2 * h)
    c = x1 - A @ x - B @ eta0
    return A, B, c


def predict_lambda(x, eta, params: RobotParams, h: float = 1e-6):
    """Forces at (x, eta) with their affine sensitivities to eta (exact) and x (central differences)."""
    x = np.asarray(x, dtype=float)
    eta = np.asarray(eta, dtype=float)
    _, _, lam0, Gl = _accel_affine(x, params)
    lam = lam0 + Gl @ eta
    Lx = np.empty((4, NX))
    for i in range(NX):
        e = np.zeros(NX)
        e[i] = h
        lp = ds_kkt((x + e)[:N_EXT], (x + e)[N_EXT:], eta, params)[1]
        lm = ds_kkt((x - e)[:N_EXT], (x - e)[N_EXT:], eta, params)[1]
        Lx[:, i] = (lp - lm) / (2 * h)
    return lam, Gl, Lx


# ---- QP assembly -------------------------------------------------------------

@dataclass(frozen=True)
class LinearData:
    x0: np.ndarray
    eta0: np.ndarray
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    lam0: np.ndarray
    L_eta: np.ndarray
    L_x: np.ndarray


def linearize(x, eta_prev, cfg: NMPCConfig, params: RobotParams) -> LinearData:
    A, B, c = discretize_linearize(x, eta_prev, cfg.dt, params, cfg.discretization, cfg.fd_step)
    lam0, L_eta, L_x = predict_lambda(x, eta_prev, params, cfg.fd_step)
    if not cfg.use_thrust:
        B = B.copy()
        B[:, 4] = 0.0
        L_eta = L_eta.copy()
        L_eta[:, 4] = 0.0
    return LinearData(np.asarray(x, float), np.asarray(eta_prev, float), A, B, c, lam0, L_eta, L_x)


def input_bounds(cfg: NMPCConfig, params: RobotParams):
    th = params.f_th_max if cfg.use_thrust else 0.0
    hi = np.array([params.u_max] * 4 + [th])
    return -hi, hi


def state_bounds(cfg: NMPCConfig):
    lo = np.full(NX, -np.inf)
    hi = np.full(NX, np.inf)
    lo[:N_SS], hi[:N_SS] = -cfg.angle_bound, cfg.angle_bound
    lo[N_EXT:], hi[N_EXT:] = -cfg.velocity_bound, cfg.velocity_bound
    return lo, hi


def assemble_qp(ref_tail: np.ndarray, lin: LinearData, cfg: NMPCConfig, params: RobotParams,
                weights: np.ndarray | None = None, constrained: bool = True) -> QPProblem:
    """Condensed tracking QP over ``n = len(ref_tail)`` inputs.

    ``ref_tail[i]`` is the reference for the state reached after input ``i``.
    Cost: sum_i (x_i - r_i)' W (x_i - r_i) + sum_i deta_i' W_eta deta_i with
    deta_0 = eta_0 - eta_prev.
    """
    ref_tail = np.atleast_2d(ref_tail)
    n = ref_tail.shape[0]
    if ref_tail.shape[1] != NX:
        raise ValueError("reference rows must be 14-vectors")
    A, B, c, x0 = lin.A, lin.B, lin.c, lin.x0
    nv = n * NU
    Sx = np.zeros((n * NX, nv))
    sx = np.zeros(n * NX)
    xi = x0.copy()
    Apow_B = []
    for i in range(n):
        xi = A @ xi + c
        sx[i * NX:(i + 1) * NX] = xi
        # x_{i+1} depends on eta_j (j <= i) through A^{i-j} B
        Apow_B = [A @ M for M in Apow_B] + [B]
        for j, M in enumerate(Apow_B):
            Sx[i * NX:(i + 1) * NX, j * NU:(j + 1) * NU] = M

    W = cfg.state_weights() if weights is None else np.asarray(weights, dtype=float)
    Wfull = np.tile(W, n)
    Wfull[-NX:] *= cfg.terminal_weight
    r = ref_tail.reshape(-1)
    # difference operator for input increments
    Dm = np.eye(nv) - np.eye(nv, k=-NU)
    d0 = np.zeros(nv)
    d0[:NU] = lin.eta0
    We = np.tile(np.full(NU, cfg.w_eta), n)
    H = 2 * (Sx.T @ (Wfull[:, None] * Sx) + Dm.T @ (We[:, None] * Dm))
    e = sx - r
    f = 2 * (Sx.T @ (Wfull * e) - Dm.T @ (We * d0))
    const = float(e @ (Wfull * e) + d0 @ (We * d0))
    H = 0.5 * (H + H.T)

    # force predictions at each applied input: lam_i = lam0 + Lx (x_i - x0) + Le (eta_i - eta0)
    Sl = np.zeros((n * 4, nv))
    sl = np.zeros(n * 4)
    for i in range(n):
        rows = slice(i * 4, (i + 1) * 4)
        Sl[rows, i * NU:(i + 1) * NU] += lin.L_eta
        sl[rows] = lin.lam0 - lin.L_eta @ lin.eta0
        if i > 0:
            Sl[rows] += lin.L_x @ Sx[(i - 1) * NX:i * NX]
            sl[rows] += lin.L_x @ (sx[(i - 1) * NX:i * NX] - x0)

    G_rows, h_rows, kinds = [], [], []
    if constrained:
        lo, hi = input_bounds(cfg, params)
        I = np.eye(nv)
        G_rows += [I, -I]
        h_rows += [np.tile(hi, n), -np.tile(lo, n)]
        kinds += ["eta_max"] * nv + ["eta_min"] * nv
        xlo, xhi = state_bounds(cfg)
        xlo_t, xhi_t = np.tile(xlo, n), np.tile(xhi, n)
        up = np.isfinite(xhi_t)
        dn = np.isfinite(xlo_t)
        G_rows += [Sx[up], -Sx[dn]]
        h_rows += [xhi_t[up] - sx[up], -(xlo_t[dn] - sx[dn])]
        kinds += ["x_max"] * int(up.sum()) + ["x_min"] * int(dn.sum())
        mu = params.mu_s * cfg.friction_margin
        for i in range(n):
            for foot in (0, 1):
                t_row = Sl[i * 4 + 2 * foot]
                n_row = Sl[i * 4 + 2 * foot + 1]
                t_c = sl[i * 4 + 2 * foot]
                n_c = sl[i * 4 + 2 * foot + 1]
                # lam_T - mu lam_N <= 0, -lam_T - mu lam_N <= 0, -lam_N <= -eps
                G_rows += [(t_row - mu * n_row)[None], (-t_row - mu * n_row)[None], (-n_row)[None]]
                h_rows += [np.array([-(t_c - mu * n_c)]), np.array([-(-t_c - mu * n_c)]),
                           np.array([-cfg.eps_normal + n_c])]
                kinds += ["friction+", "friction-", "normal"]
    G = np.vstack(G_rows) if G_rows else np.zeros((0, nv))
    h = np.concatenate(h_rows) if h_rows else np.zeros(0)
    return QPProblem(H, f, G, h, n, Sx, sx, Sl, sl, const, kinds)


def solve_qp(problem: QPProblem) -> DSPlan:
    res = qpsolve.solve_dense_qp(problem.H, problem.f, problem.G, problem.h)
    z = res.x
    n = problem.n_steps
    states = (problem.Sx @ z + problem.sx).reshape(n, NX)
    lam = (problem.Sl @ z + problem.sl).reshape(n, 4)
    cost = float(0.5 * z @ problem.H @ z + problem.f @ z + problem.const)
    return DSPlan(z.reshape(n, NU), states, lam, res.status, res.kkt_residual, cost, len(res.active))


# ---- receding controller -----------------------------------------------------

@dataclass
class DSController:
    """Shrinking-horizon controller for one DS phase."""

    reference: DSReference
    params: RobotParams
    cfg: NMPCConfig
    eta_prev: np.ndarray
    last_plan: DSPlan | None = None
    fallbacks: int = 0

    def step(self, x, k: int):
        """Input for sample ``k`` (0-based) from the current state vector ``x``."""
        N = self.reference.horizon
        if not 0 <= k < N:
            raise ValueError(f"sample {k} outside horizon {N}")
        lin = linearize(x, self.eta_prev, self.cfg, self.params)
        prob = assemble_qp(self.reference.r[k + 1:], lin, self.cfg, self.params)
        plan = solve_qp(prob)
        lo, hi = input_bounds(self.cfg, self.params)
        if plan.status == qpsolve.OPTIMAL:
            eta = plan.eta[0]
            fallback = False
        else:
            eta = self.eta_prev
            fallback = True
            self.fallbacks += 1
        eta = np.clip(eta, lo, hi)
        self.eta_prev = eta
        self.last_plan = plan
        return eta, plan, fallback


def ds_controller_step(x, k: int, controller: DSController, params: RobotParams | None = None):
    return controller.step(x.x if isinstance(x, ExtState) else np.asarray(x, dtype=float), k)

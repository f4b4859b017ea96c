"""Integrators, touchdown detection, impact map and leg swap."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    FOOT_L,
    FOOT_R,
    N_EXT,
    N_SS,
    ExtState,
    RobotParams,
    SSState,
    chain,
    ds_input_map,
    foot_kinematics,
    lift,
)


class PreconditionError(ValueError):
    pass


class ImpactSingularityError(RuntimeError):
    pass


class DAESingularityError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImpactResult:
    dq_e_plus: np.ndarray
    impulse: np.ndarray  # [R_x, R_y, L_x, L_y]


@dataclass(frozen=True)
class DSStepResult:
    next_state: ExtState
    lam: np.ndarray  # [lam_T1, lam_N1, lam_T2, lam_N2] at the start of the step
    residual: float  # acceleration-level constraint residual

    @property
    def lam_T(self) -> np.ndarray:
        return self.lam[[0, 2]]

    @property
    def lam_N(self) -> np.ndarray:
        return self.lam[[1, 3]]


# ---- single support ---------------------------------------------------------

def ss_accel(q, dq, u, params: RobotParams) -> np.ndarray:
    ch = chain(params, False)
    J = ch.jacobians(q)
    D = ch.mass_matrix(J)
    H = ch.nonlinear(J, ch.bias(q, dq))
    rhs = -H
    rhs[1:5] += u
    return np.linalg.solve(D, rhs)


def rk4(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def ss_rhs(u, params: RobotParams):
    def f(x):
        q, dq = x[:N_SS], x[N_SS:]
        return np.concatenate([dq, ss_accel(q, dq, u, params)])

    return f


def step_ss_array(x, u, dt, params: RobotParams) -> np.ndarray:
    return rk4(ss_rhs(u, params), x, dt)


def step_ss(state: SSState, u, dt: float, params: RobotParams, check_bounds: bool = True) -> SSState:
    """One fixed-step RK4 step of the pinned-stance dynamics under constant torque."""
    if not dt > 0:
        raise PreconditionError("dt must be positive")
    u = np.asarray(u, dtype=float)
    if check_bounds and np.any(np.abs(u) > params.u_max * (1 + 1e-12)):
        raise PreconditionError(f"torque {u} exceeds u_max={params.u_max}")
    return SSState.from_x(step_ss_array(state.x, u, dt, params))


def swing_height(x, params: RobotParams) -> tuple[float, float]:
    """Swing foot height and vertical velocity for an SS state vector."""
    ch = chain(params, False)
    q, dq = x[:N_SS], x[N_SS:]
    return ch.positions(q)[FOOT_L, 1], ch.jacobians(q)[FOOT_L, 1] @ dq


# ---- touchdown --------------------------------------------------------------

@dataclass(frozen=True)
class TouchdownEvent:
    t: float
    x: np.ndarray
    height: float
    velocity: float


def detect_touchdown(t0, x0, t1, x1, height_fn, propagate=None, tol=1e-8, max_iter=200):
    """Locate a downward zero crossing of the swing-foot height inside [t0, t1].

    ``height_fn(x)`` returns (height, vertical velocity).  ``propagate(x0, tau)``
    maps the bracket start forward by ``tau``; without it the state is linearly
    interpolated.  Returns ``None`` when there is no sign change or the
    contact is grazing.
    """
    h0, _ = height_fn(x0)
    h1, v1 = height_fn(x1)
    if h0 <= 0.0 or h1 > 0.0:
        return None
    if propagate is None:
        def propagate(x, tau):
            return x0 + (x1 - x0) * (tau / (t1 - t0))

    lo, hi = 0.0, t1 - t0
    x_hi, h_hi, v_hi = x1, h1, v1
    for _ in range(max_iter):
        if abs(h_hi) < tol:
            break
        mid = 0.5 * (lo + hi)
        xm = propagate(x0, mid)
        hm, vm = height_fn(xm)
        if hm > 0.0:
            lo = mid
        else:
            hi, x_hi, h_hi, v_hi = mid, xm, hm, vm
        if hi - lo < 1e-15:
            break
    if v_hi >= 0.0:
        return None
    return TouchdownEvent(t0 + hi, np.asarray(x_hi), float(h_hi), float(v_hi))


# ---- impact -----------------------------------------------------------------

def impact_map(pre: ExtState, params: RobotParams, rank_tol: float = 1e-9) -> ImpactResult:
    """Inelastic two-point impact: both feet come to rest, configuration unchanged."""
    ch = chain(params, True)
    Jall = ch.jacobians(pre.q)
    D = ch.mass_matrix(Jall)
    J = Jall[[FOOT_R, FOOT_L]].reshape(4, N_EXT)
    sv = np.linalg.svd(J, compute_uv=False)
    if sv[-1] < rank_tol * max(sv[0], 1.0):
        raise ImpactSingularityError("foot Jacobian is rank deficient")
    K = np.zeros((N_EXT + 4, N_EXT + 4))
    K[:N_EXT, :N_EXT] = D
    K[:N_EXT, N_EXT:] = -J.T
    K[N_EXT:, :N_EXT] = J
    rhs = np.concatenate([D @ pre.dq, np.zeros(4)])
    sol = np.linalg.solve(K, rhs)
    return ImpactResult(sol[:N_EXT], sol[N_EXT:])


_SWAP = np.array([0, 2, 1, 4, 3, 5, 6])


def swap_matrix() -> np.ndarray:
    """Permutation R_s^d acting on a 7-vector of coordinates."""
    return np.eye(N_EXT)[_SWAP]


def swap_legs(x: ExtState) -> ExtState:
    return ExtState(x.q[_SWAP], x.dq[_SWAP])


# ---- double support ---------------------------------------------------------

def ds_kkt(q, dq, eta, params: RobotParams):
    """Solve the DS DAE for (ddq, lambda) with damped acceleration-level constraints."""
    ch = chain(params, True)
    Jall = ch.jacobians(q)
    D = ch.mass_matrix(Jall)
    bias = ch.bias(q, dq)
    H = ch.nonlinear(Jall, bias)
    J = Jall[[FOOT_R, FOOT_L]].reshape(4, N_EXT)
    Jd = bias[[FOOT_R, FOOT_L]].reshape(4)
    B = ds_input_map(q, params, Jall)
    K = np.zeros((N_EXT + 4, N_EXT + 4))
    K[:N_EXT, :N_EXT] = D
    K[:N_EXT, N_EXT:] = -J.T
    K[N_EXT:, :N_EXT] = J
    rhs = np.concatenate([B @ eta - H, -Jd - params.d * (J @ dq)])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise DAESingularityError("DS KKT matrix is singular") from exc
    ddq, lam = sol[:N_EXT], sol[N_EXT:]
    resid = float(np.linalg.norm(J @ ddq + Jd + params.d * (J @ dq)))
    return ddq, lam, resid


def ds_rhs(eta, params: RobotParams):
    def f(x):
        q, dq = x[:N_EXT], x[N_EXT:]
        ddq, _, _ = ds_kkt(q, dq, eta, params)
        return np.concatenate([dq, ddq])

    return f


def check_eta(eta, params: RobotParams) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (5,):
        raise PreconditionError("eta must be [u1..u4, F_th]")
    tol = 1 + 1e-9
    if np.any(np.abs(eta[:4]) > params.u_max * tol) or abs(eta[4]) > params.f_th_max * tol:
        raise PreconditionError(f"input {eta} outside bounds")
    return eta


def step_ds_array(x, eta, dt, params: RobotParams):
    _, lam, resid = ds_kkt(x[:N_EXT], x[N_EXT:], eta, params)
    return rk4(ds_rhs(eta, params), x, dt), lam, resid


def step_ds(state: ExtState, eta, dt: float, params: RobotParams, check_bounds: bool = True) -> DSStepResult:
    """One RK4 step of the DS DAE; the returned forces are those at the step start."""
    if not dt > 0:
        raise PreconditionError("dt must be positive")
    eta = check_eta(eta, params) if check_bounds else np.asarray(eta, dtype=float)
    x1, lam, resid = step_ds_array(state.x, eta, dt, params)
    return DSStepResult(ExtState.from_x(x1), lam, resid)


def ds_lambda(state: ExtState, eta, params: RobotParams) -> np.ndarray:
    return ds_kkt(state.q, state.dq, np.asarray(eta, dtype=float), params)[1]


def feet_positions(state: ExtState, params: RobotParams) -> np.ndarray:
    return foot_kinematics(state, params).p


# ---- gait cycles --------------------------------------------------------------

PHASE_SS, PHASE_IMPACT, PHASE_DS = "SS", "IMPACT", "DS"
LOG_SCHEMA = 1
COORDS = ("q_T", "q_1R", "q_1L", "q_2R", "q_2L", "p_Hx", "p_Hy")
COLUMNS = (
    ("t", "step", "phase")
    + COORDS
    + tuple("d" + c for c in COORDS)
    + ("u1", "u2", "u3", "u4", "F_th", "lam_T1", "lam_N1", "lam_T2", "lam_N2",
       "w", "r", "V", "Gamma", "qp_status")
)
QP_NONE, QP_OK, QP_FALLBACK = 0, 1, 2


class FallError(RuntimeError):
    pass


@dataclass(frozen=True)
class WalkConfig:
    params: RobotParams
    spec: object  # GaitSpec
    erg: object = None  # ERGConfig; None means the default
    nmpc: object = None  # NMPCConfig; None means the default
    ss_dt: float = 1e-4
    control_dt: float = 1e-3
    ds_inner_dt: float = 1e-4
    max_step_time: float = 1.5
    fall_hip_height: float = 0.15
    fall_torso_angle: float = np.pi / 2
    velocity_perturbation: float = 0.0  # relative noise on the initial velocities
    seed: int = 0

    def __post_init__(self):
        from .erg import ERGConfig
        from .nmpc import NMPCConfig

        if self.erg is None:
            object.__setattr__(self, "erg", ERGConfig())
        if self.nmpc is None:
            object.__setattr__(self, "nmpc", NMPCConfig())
        for name in ("ss_dt", "control_dt", "ds_inner_dt", "max_step_time"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if abs(self.control_dt / self.ss_dt - round(self.control_dt / self.ss_dt)) > 1e-9:
            raise ValueError("control_dt must be a multiple of ss_dt")
        if abs(self.nmpc.dt / self.ds_inner_dt - round(self.nmpc.dt / self.ds_inner_dt)) > 1e-9:
            raise ValueError("NMPC dt must be a multiple of ds_inner_dt")

    @property
    def ds_duration(self) -> float:
        return self.nmpc.horizon * self.nmpc.dt


@dataclass
class StepRecord:
    index: int
    t_touchdown: float
    t_exit: float
    exit_state: np.ndarray  # SS coordinates at DS exit
    error: np.ndarray  # exit_state - x_s0
    y_norm: float
    dy_norm: float
    max_friction_ratio: float
    min_normal: float
    max_thrust: float
    impact_residual: float
    foot_drift: float
    qp_fallbacks: int
    erg_saturations: int
    torque_saturations: int

    @property
    def pos_error(self) -> float:
        return float(np.abs(self.error[:N_SS]).max())

    @property
    def vel_error(self) -> float:
        return float(np.abs(self.error[N_SS:]).max())

    @property
    def terminal_error(self) -> float:
        return float(np.linalg.norm(self.error))

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "t_touchdown": self.t_touchdown,
            "t_exit": self.t_exit,
            "pos_error": self.pos_error,
            "vel_error": self.vel_error,
            "terminal_error": self.terminal_error,
            "y_norm": self.y_norm,
            "dy_norm": self.dy_norm,
            "max_friction_ratio": self.max_friction_ratio,
            "min_normal": self.min_normal,
            "max_thrust": self.max_thrust,
            "impact_residual": self.impact_residual,
            "foot_drift": self.foot_drift,
            "qp_fallbacks": self.qp_fallbacks,
            "erg_saturations": self.erg_saturations,
            "torque_saturations": self.torque_saturations,
            "exit_state": self.exit_state.tolist(),
        }


@dataclass
class GaitLog:
    """Append-only record of a walking run: one row per sample plus per-step summaries."""

    x_s0: np.ndarray
    mu_s: float
    rows: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""

    def append(self, t, step, phase, q, dq, u=None, thrust=np.nan, lam=None, erg=None, qp_status=QP_NONE):
        u = np.full(4, np.nan) if u is None else u
        lam = np.full(4, np.nan) if lam is None else lam
        erg = erg or {}
        self.rows.append(
            [float(t), int(step), phase, *map(float, q), *map(float, dq), *map(float, u), float(thrust),
             *map(float, lam), *(float(erg.get(k, np.nan)) for k in ("w", "r", "V", "Gamma")), int(qp_status)]
        )

    @property
    def completed_steps(self) -> int:
        return len(self.steps)

    @property
    def fell(self) -> bool:
        return self.status == "fall"

    def numeric(self, name: str) -> np.ndarray:
        i = COLUMNS.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def phases(self) -> list[str]:
        return [r[2] for r in self.rows]

    def header(self) -> dict:
        return {"schema": LOG_SCHEMA, "x_s0": self.x_s0.tolist(), "mu_s": self.mu_s,
                "status": self.status, "message": self.message}

    def write_csv(self, path) -> None:
        import csv
        import json

        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(self.header(), sort_keys=True) + "\n")
            wr = csv.writer(fh)
            wr.writerow(COLUMNS)
            for r in self.rows:
                wr.writerow([repr(v) if isinstance(v, float) else v for v in r])

    def summary(self) -> dict:
        return {**self.header(), "completed_steps": self.completed_steps,
                "steps": [s.to_dict() for s in self.steps]}


@dataclass(frozen=True)
class SSPhaseResult:
    event: TouchdownEvent | None
    x_end: np.ndarray
    t_end: float
    u_last: np.ndarray
    fell: bool
    reason: str = ""


def simulate_ss_phase(state: SSState, controller, cfg: WalkConfig, stance=(0.0, 0.0), t0: float = 0.0,
                      log: GaitLog | None = None, step: int = 0) -> SSPhaseResult:
    """Integrate one SS phase under sampled-and-held control until touchdown or a fall.

    Touchdown requires the swing foot ahead of the stance foot and a downward
    crossing of the ground.  Rows are logged at the control rate.
    """
    params = cfg.params
    ch = chain(params, False)
    x = state.x.copy()
    t = t0
    stance = np.asarray(stance, dtype=float)
    every = int(round(cfg.control_dt / cfg.ss_dt))
    n_max = int(np.ceil(cfg.max_step_time / cfg.ss_dt))
    controller.reset(SSState.from_x(x))
    u = np.zeros(4)

    def record(x, u, diag):
        if log is not None:
            q, dq = x[:N_SS], x[N_SS:]
            pH = ch.positions(q)[0] + stance
            vH = ch.jacobians(q)[0] @ dq
            log.append(t, step, PHASE_SS, np.concatenate([q, pH]), np.concatenate([dq, vH]), u, 0.0,
                       None, diag)

    for k in range(n_max):
        if k % every == 0:
            u, diag = controller(SSState.from_x(x), cfg.control_dt)
            record(x, u, diag)
        x1 = step_ss_array(x, u, cfg.ss_dt, params)
        q1 = x1[:N_SS]
        pos = ch.positions(q1)
        if pos[0, 1] < cfg.fall_hip_height or abs(q1[0]) > cfg.fall_torso_angle or not np.all(np.isfinite(x1)):
            return SSPhaseResult(None, x1, t + cfg.ss_dt, u, True,
                                 f"fall at t={t + cfg.ss_dt:.4f}: hip height {pos[0, 1]:.3f}, q_T {q1[0]:.3f}")
        if pos[FOOT_L, 0] > 0.0 and pos[FOOT_L, 1] <= 0.0:
            ev = detect_touchdown(t, x, t + cfg.ss_dt, x1, lambda z: swing_height(z, params),
                                  lambda z, tau, u=u: step_ss_array(z, u, tau, params))
            if ev is not None:
                return SSPhaseResult(ev, ev.x, ev.t, u, False)
        x = x1
        t += cfg.ss_dt
    return SSPhaseResult(None, x, t, u, True, f"no touchdown within {cfg.max_step_time} s")


def run_gait_cycles(config: WalkConfig, n_steps: int, controllers=None) -> GaitLog:
    """SS -> touchdown -> impact -> swap -> DS (NMPC) cycles starting from the gait's x_s0.

    ``controllers`` is an optional ``(ss_controller, nmpc_config)`` pair; by
    default they are built from the configuration.  A fall or missing
    touchdown ends the run with ``status == "fall"``.
    """
    from .erg import SSController
    from .gait import output_terms
    from .nmpc import DSController, build_reference, lift_target

    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    params, spec = config.params, config.spec
    ss_ctl, ncfg = controllers if controllers is not None else (
        SSController(spec, params, config.erg), config.nmpc)
    log = GaitLog(np.array(spec.x_s0, dtype=float), params.mu_s)

    x = np.array(spec.x_s0, dtype=float)
    if config.velocity_perturbation:
        rng = np.random.default_rng(config.seed)
        x[N_SS:] *= 1 + config.velocity_perturbation * rng.uniform(-1, 1, N_SS)
    stance = np.zeros(2)
    t = 0.0
    inner = int(round(ncfg.dt / config.ds_inner_dt))
    if n_steps == 0:
        ch = chain(params, False)
        q, dq = x[:N_SS], x[N_SS:]
        log.append(t, 0, PHASE_SS, np.concatenate([q, ch.positions(q)[0]]),
                   np.concatenate([dq, ch.jacobians(q)[0] @ dq]))
        return log

    for step in range(n_steps):
        ss_ctl.saturations = 0
        torque_sat = [0]

        def controller(state, dt, _c=ss_ctl):
            u, diag = _c(state, dt)
            torque_sat[0] += diag.get("u_sat", 0)
            return u, diag

        controller.reset = ss_ctl.reset
        res = simulate_ss_phase(SSState.from_x(x), controller, config, stance, t, log, step)
        if res.fell:
            log.status, log.message = "fall", f"step {step}: {res.reason}"
            return log
        ev = res.event
        t = ev.t
        pre = lift(SSState.from_x(ev.x), params, stance)
        imp = impact_map(pre, params)
        fk = foot_kinematics(ExtState(pre.q, imp.dq_e_plus), params)
        impact_res = float(np.abs(fk.J @ imp.dq_e_plus).max())
        post = swap_legs(ExtState(pre.q, imp.dq_e_plus))
        log.append(t, step, PHASE_IMPACT, post.q, post.dq, res.u_last, 0.0, imp.impulse)

        feet0 = foot_kinematics(post, params).p
        target = lift_target(spec.x_s0, feet0[:2], params)
        ref = build_reference(post, target, ncfg.horizon)
        ds = DSController(ref, params, ncfg, np.concatenate([res.u_last, [0.0]]))
        xd = post.x.copy()
        lams, thrusts = [], []
        for k in range(ncfg.horizon):
            eta, plan, fallback = ds.step(xd, k)
            status = QP_FALLBACK if fallback else QP_OK
            for _ in range(inner):
                x1, lam, _ = step_ds_array(xd, eta, config.ds_inner_dt, params)
                log.append(t, step, PHASE_DS, xd[:N_EXT], xd[N_EXT:], eta[:4], eta[4], lam, None, status)
                lams.append(lam)
                xd = x1
                t += config.ds_inner_dt
            thrusts.append(eta[4])
        lams = np.array(lams)
        ext = ExtState.from_x(xd)
        feet1 = foot_kinematics(ext, params).p
        if ext.q[6] - feet1[1] < config.fall_hip_height or abs(ext.q[0]) > config.fall_torso_angle:
            log.status, log.message = "fall", f"step {step}: collapse during double support"
            return log
        stance = feet1[:2].copy()
        x = np.concatenate([ext.q[:N_SS], ext.dq[:N_SS]])
        y, dy, *_ = output_terms(x[:N_SS], x[N_SS:], spec, params)
        ln = lams[:, [1, 3]]
        ratio = np.abs(lams[:, [0, 2]]) / np.where(ln > 0, ln, np.nan)
        log.steps.append(StepRecord(
            index=step, t_touchdown=ev.t, t_exit=t, exit_state=x.copy(), error=x - spec.x_s0,
            y_norm=float(np.linalg.norm(y)), dy_norm=float(np.linalg.norm(dy)),
            max_friction_ratio=float(np.nanmax(ratio)) if np.all(ln > 0) else float("inf"),
            min_normal=float(ln.min()), max_thrust=float(np.abs(thrusts).max()),
            impact_residual=impact_res, foot_drift=float(np.abs(feet1 - feet0).max()),
            qp_fallbacks=ds.fallbacks, erg_saturations=ss_ctl.saturations, torque_saturations=torque_sat[0],
        ))
    ch = chain(params, False)
    q, dq = x[:N_SS], x[N_SS:]
    log.append(t, n_steps, PHASE_SS, np.concatenate([q, ch.positions(q)[0] + stance]),
               np.concatenate([dq, ch.jacobians(q)[0] @ dq]))
    return log

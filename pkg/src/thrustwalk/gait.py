"""HZD virtual constraints, phase variable and the feedback-linearizing SS controller."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import ACTUATED, HIP, N_SS, RobotParams, SSState, chain, leg_ik

log = logging.getLogger(__name__)

GAITSPEC_SCHEMA = 1
COND_WARN = 1e6


class ControllerError(RuntimeError):
    """Decoupling matrix is singular; the caller may hold the previous input."""


class TuningError(RuntimeError):
    pass


# ---- Bezier polynomials ---------------------------------------------------

def _casteljau(coeffs: np.ndarray, s: float) -> np.ndarray:
    pts = np.array(coeffs, dtype=float, copy=True)
    m = pts.shape[-1]
    for r in range(1, m):
        pts[..., : m - r] = (1 - s) * pts[..., : m - r] + s * pts[..., 1 : m - r + 1]
    return pts[..., 0]


def bezier_eval(coeffs, s: float):
    """Value and d/ds of a Bezier curve with coefficient columns ``coeffs[:, k]``.

    ``s`` is clamped to [0, 1]; the derivative is that of the polynomial at
    the clamped point.
    """
    c = np.asarray(coeffs, dtype=float)
    s = min(max(float(s), 0.0), 1.0)
    M = c.shape[-1] - 1
    val = _casteljau(c, s)
    if M == 0:
        return val, np.zeros_like(val)
    return val, M * _casteljau(np.diff(c, axis=-1), s)


def bezier_derivs(coeffs, s: float):
    """Value, first and second s-derivatives (hot path for the controller)."""
    c = np.asarray(coeffs, dtype=float)
    s = min(max(float(s), 0.0), 1.0)
    M = c.shape[-1] - 1
    d1 = np.diff(c, axis=-1)
    d2 = np.diff(d1, axis=-1)
    val = _casteljau(c, s)
    dval = M * _casteljau(d1, s) if M >= 1 else np.zeros_like(val)
    ddval = M * (M - 1) * _casteljau(d2, s) if M >= 2 else np.zeros_like(val)
    return val, dval, ddval


# ---- gait specification ---------------------------------------------------

@dataclass
class GaitSpec:
    bezier: np.ndarray  # 4 x (M + 1)
    theta_range: tuple[float, float]
    kp: np.ndarray
    kd: np.ndarray
    x_s0: np.ndarray  # SS fixed point [q_s, dq_s]
    phase_variable: str = "hip"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bezier = np.asarray(self.bezier, dtype=float)
        self.kp = np.broadcast_to(np.asarray(self.kp, dtype=float), (4,)).copy()
        self.kd = np.broadcast_to(np.asarray(self.kd, dtype=float), (4,)).copy()
        self.x_s0 = np.asarray(self.x_s0, dtype=float)
        self.theta_range = (float(self.theta_range[0]), float(self.theta_range[1]))
        if self.bezier.ndim != 2 or self.bezier.shape[0] != 4 or self.bezier.shape[1] < 2:
            raise ValueError("bezier must be a 4 x (M+1) matrix with M >= 1")
        if not self.theta_range[1] > self.theta_range[0]:
            raise ValueError("theta_range must be increasing")
        if np.any(self.kp <= 0) or np.any(self.kd <= 0):
            raise ValueError("gains must be positive")
        if self.x_s0.shape != (2 * N_SS,):
            raise ValueError("x_s0 must be a 10-vector")
        if self.phase_variable not in ("hip", "stance_angle"):
            raise ValueError(f"unknown phase variable {self.phase_variable!r}")

    @property
    def degree(self) -> int:
        return self.bezier.shape[1] - 1

    @property
    def start_state(self) -> SSState:
        return SSState.from_x(self.x_s0)

    def with_(self, **changes) -> GaitSpec:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "schema": GAITSPEC_SCHEMA,
            "degree": self.degree,
            "bezier": self.bezier.tolist(),
            "theta_range": list(self.theta_range),
            "kp": self.kp.tolist(),
            "kd": self.kd.tolist(),
            "x_s0": self.x_s0.tolist(),
            "phase_variable": self.phase_variable,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GaitSpec:
        if d.get("schema") != GAITSPEC_SCHEMA:
            raise ValueError(f"unsupported GaitSpec schema {d.get('schema')!r}")
        return cls(
            bezier=np.array(d["bezier"]),
            theta_range=tuple(d["theta_range"]),
            kp=np.array(d["kp"]),
            kd=np.array(d["kd"]),
            x_s0=np.array(d["x_s0"]),
            phase_variable=d.get("phase_variable", "hip"),
            meta=dict(d.get("meta", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> GaitSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---- phase variable ---------------------------------------------------------

def _phase_terms(q, dq, params: RobotParams, kind: str):
    """theta, dtheta, gradient c (5,), and bias so that ddtheta = c @ ddq + bias."""
    ch = chain(params, False)
    p = ch.positions(q)[HIP]
    J = ch.jacobians(q)[HIP]
    b = ch.bias(q, dq)[HIP]
    if kind == "hip":
        c = J[0]
        return p[0], c @ dq, c, b[0]
    # stance-leg angle from vertical, positive when the hip is ahead of the foot
    x, y = p
    r2 = x * x + y * y
    grad_p = np.array([y, -x]) / r2
    hess_p = np.array([[-2 * x * y, x * x - y * y], [x * x - y * y, 2 * x * y]]) / (r2 * r2)
    v = J @ dq
    c = grad_p @ J
    return np.arctan2(x, y), c @ dq, c, grad_p @ b + v @ hess_p @ v


def phase_variable(state: SSState, params: RobotParams, spec: GaitSpec | None = None):
    """(theta, s, dtheta/dt); ``s`` is the clamped normalized phase (0 when no spec is given)."""
    kind = spec.phase_variable if spec is not None else "hip"
    th, dth, _, _ = _phase_terms(state.q, state.dq, params, kind)
    if spec is None:
        return th, 0.0, dth
    lo, hi = spec.theta_range
    s = min(max((th - lo) / (hi - lo), 0.0), 1.0)
    return th, s, dth


# ---- outputs and feedback linearization -------------------------------------

@dataclass(frozen=True)
class OutputData:
    y: np.ndarray
    dy: np.ndarray
    Lf2h: np.ndarray
    LgLfh: np.ndarray
    s: float
    cond: float


def output_terms(q, dq, spec: GaitSpec, params: RobotParams, D=None, H=None):
    """Array-level outputs; pass D, H when already computed by the integrator."""
    if D is None:
        ch = chain(params, False)
        J = ch.jacobians(q)
        D = ch.mass_matrix(J)
        H = ch.nonlinear(J, ch.bias(q, dq))
    th, dth, c, beta = _phase_terms(q, dq, params, spec.phase_variable)
    lo, hi = spec.theta_range
    span = hi - lo
    s_raw = (th - lo) / span
    hd, dhd, ddhd = bezier_derivs(spec.bezier, s_raw)
    if not 0.0 <= s_raw <= 1.0:
        # desired trajectory is held constant outside the phase interval
        dhd = np.zeros(4)
        ddhd = np.zeros(4)
    sd = dth / span
    y = q[ACTUATED] - hd
    dy = dq[ACTUATED] - dhd * sd
    # ddy = Phi ddq - ddhd sd^2 - dhd beta / span
    Phi = -np.outer(dhd, c) / span
    Phi[:, ACTUATED] += np.eye(4)
    DinvB_H = np.linalg.solve(D, np.column_stack([np.eye(N_SS)[:, 1:5], H]))
    LgLfh = Phi @ DinvB_H[:, :4]
    Lf2h = -Phi @ DinvB_H[:, 4] - ddhd * sd * sd - dhd * beta / span
    return y, dy, Lf2h, LgLfh, min(max(s_raw, 0.0), 1.0)


def output_and_derivatives(state: SSState, spec: GaitSpec, params: RobotParams) -> OutputData:
    y, dy, Lf2h, LgLfh, s = output_terms(state.q, state.dq, spec, params)
    cond = float(np.linalg.cond(LgLfh))
    if cond > COND_WARN:
        log.warning("decoupling matrix near-singular (cond=%.3g) at s=%.3f", cond, s)
    return OutputData(y, dy, Lf2h, LgLfh, s, cond)


def virtual_input(y, dy, spec: GaitSpec) -> np.ndarray:
    """PD output feedback; gains are positive so the closed loop is ddy + K_D dy + K_P y = 0."""
    return -(spec.kp * y + spec.kd * dy)


def fbl_terms(q, dq, spec: GaitSpec, params: RobotParams, D=None, H=None) -> np.ndarray:
    y, dy, Lf2h, LgLfh, _ = output_terms(q, dq, spec, params, D, H)
    v = virtual_input(y, dy, spec)
    try:
        return np.linalg.solve(LgLfh, v - Lf2h)
    except np.linalg.LinAlgError as exc:
        raise ControllerError("singular decoupling matrix") from exc


def fbl_control(state: SSState, spec: GaitSpec, params: RobotParams) -> np.ndarray:
    return fbl_terms(state.q, state.dq, spec, params)


# ---- seed gait construction -------------------------------------------------

@dataclass(frozen=True)
class GaitDesign:
    """Geometric parameters of the seed gait."""

    step_length: float = 0.16
    hip_height: float = 0.44
    theta_start: float = -0.0907  # hip x relative to stance foot at SS start
    theta_end: float = 0.0879  # hip x at the nominal end of the phase interval
    clearance: float = 0.03
    sink: float = 0.01  # swing foot target depth below ground at s = 1
    hip_dip: float = 0.0  # hip height change across the step (negative = lower at the end)
    torso_lean: float = 0.0
    torso_tilt: float = 0.0  # torso angle change across the step
    speed: float = 0.55  # dtheta/dt at SS start
    touch_shift: float = 0.0  # correction of the foot-path landing abscissa
    degree: int = 5
    kp: float = 400.0
    kd: float = 40.0

    def replace(self, **kw) -> GaitDesign:
        return replace(self, **kw)


def _posture(design: GaitDesign, params: RobotParams, s: float, touch_x: float):
    """Joint coordinates [q_T, q_b] of the seed posture at normalized phase s."""
    th = design.theta_start + s * (design.theta_end - design.theta_start)
    hip_y = design.hip_height + design.hip_dip * s
    L = design.step_length
    smooth = s * s * (3 - 2 * s)
    # swing foot path relative to the stance foot; lands at x = touch_x as height crosses zero
    sw_x = -L + (touch_x + L) * smooth
    sw_y = design.clearance * 16 * s * s * (1 - s) ** 2 - design.sink * s**3
    qT = design.torso_lean + design.torso_tilt * s
    phi1R, q2R = leg_ik((-th, -hip_y), params)
    phi1L, q2L = leg_ik((sw_x - th, sw_y - hip_y), params)
    return np.array([qT, phi1R - qT, phi1L - qT, q2R, q2L])


def _fit_bezier(samples_s, samples_q, c0, c1, degree):
    from scipy.special import comb

    n = degree
    k = np.arange(n + 1)
    S = np.asarray(samples_s)[:, None]
    basis = comb(n, k) * S**k * (1 - S) ** (n - k)
    resid = samples_q - basis[:, :2] @ np.vstack([c0, c1])
    rest, *_ = np.linalg.lstsq(basis[:, 2:], resid, rcond=None)
    return np.vstack([c0, c1, rest]).T


def seed_spec(params: RobotParams, design: GaitDesign = GaitDesign()) -> GaitSpec:
    """Build a gait by inverse kinematics of a hip/swing-foot path, fitted by Bezier curves.

    The first two Bezier columns reproduce the path value and slope exactly at
    s = 0, so the start state lies on the zero-dynamics manifold with both
    feet on the ground and the swing foot at rest.
    """
    M = design.degree
    span = design.theta_end - design.theta_start
    # touchdown abscissa along the foot path: height zero between clearance bump and sink
    from scipy.optimize import brentq

    def height(s):
        return design.clearance * 16 * s * s * (1 - s) ** 2 - design.sink * s**3

    s_touch = brentq(height, 0.5, 1.0)
    smooth = s_touch * s_touch * (3 - 2 * s_touch)
    L = design.step_length
    touch_x = -L + (2 * L) / smooth + design.touch_shift  # so that sw_x(s_touch) = +L

    ss = np.linspace(0.0, 1.0, 61)
    Q = np.array([_posture(design, params, s, touch_x) for s in ss])
    h = 1e-5
    P = [_posture(design, params, k * h, touch_x) for k in range(3)]
    dQ0 = (-3 * P[0] + 4 * P[1] - P[2]) / (2 * h)  # one-sided, second order
    c0 = Q[0, 1:]
    c1 = c0 + dQ0[1:] / M
    bez = _fit_bezier(ss, Q[:, 1:], c0, c1, M)
    q0 = Q[0]
    # the path is parametrized so that theta moves at `speed` when s does at speed/span
    dq0 = dQ0 * design.speed / span
    return GaitSpec(
        bezier=bez,
        theta_range=(design.theta_start, design.theta_end),
        kp=np.full(4, design.kp),
        kd=np.full(4, design.kd),
        x_s0=np.concatenate([q0, dq0]),
        meta={"design": {k: getattr(design, k) for k in design.__dataclass_fields__}},
    )


def manifold_configuration(theta: float, spec: GaitSpec, params: RobotParams, iters: int = 30) -> np.ndarray:
    """Configuration on the zero-dynamics manifold at phase ``theta`` (torso angle by Newton)."""
    lo, hi = spec.theta_range
    hd, _ = bezier_eval(spec.bezier, (theta - lo) / (hi - lo))
    q = np.concatenate([[spec.x_s0[0]], hd])
    for _ in range(iters):
        th, _, c, _ = _phase_terms(q, np.zeros(N_SS), params, spec.phase_variable)
        step = (th - theta) / c[0]
        q[0] -= step
        if abs(step) < 1e-14:
            break
    return q


# ---- offline tuning ---------------------------------------------------------

TUNED_KNOBS = ("theta_start", "theta_end", "touch_shift", "hip_dip", "torso_tilt")


@dataclass(frozen=True)
class TuningConfig:
    """Targets and budget of the offline coefficient tuning.

    The gait is tuned so that one SS phase, the impact and the leg swap
    land on a state from which a DS phase of ``ds_duration`` with constant
    acceleration reaches ``x_s0`` in position, while the forward hip speed
    arrives at ``speed_ratio`` times the start speed; the DS controller has
    to supply the missing push.
    """

    knobs: tuple = TUNED_KNOBS
    speed_ratio: float = 0.95
    ds_duration: float = 0.01
    max_evals: int = 40  # Nelder-Mead function evaluations per start
    restarts: int = 0
    newton_iters: int = 4
    fd_step: float = 1e-5
    tol: float = 1e-9  # on the max-norm of the closure residual
    initial_simplex: float = 2e-3
    torque_penalty: float = 1e3

    def __post_init__(self):
        bad = set(self.knobs) - set(GaitDesign.__dataclass_fields__)
        if bad:
            raise ValueError(f"unknown tuning knob(s): {sorted(bad)}")
        if not 0 < self.speed_ratio <= 1.5:
            raise ValueError("speed_ratio must lie in (0, 1.5]")
        if not self.ds_duration > 0:
            raise ValueError("ds_duration must be positive")


@dataclass
class StepEvaluation:
    """Closure residual of one SS phase + impact + swap for a candidate design."""

    spec: GaitSpec
    closure: np.ndarray | None  # [hip speed, hip x, hip y, torso angle, step length]
    torque_excess: float
    fell: bool
    reason: str = ""

    def objective(self, torque_penalty: float) -> float:
        if self.fell or self.closure is None:
            return float("inf")
        return float(self.closure @ self.closure + torque_penalty * self.torque_excess**2)


@dataclass
class TuningResult:
    spec: GaitSpec
    design: GaitDesign
    residual: float
    seed_residual: float
    closure: np.ndarray
    history: list


def design_of(spec: GaitSpec) -> GaitDesign:
    d = spec.meta.get("design")
    if not d:
        raise TuningError("spec carries no seed design; build it with seed_spec")
    return GaitDesign(**d)


def evaluate_design(design: GaitDesign, params: RobotParams, walk, tuning: TuningConfig) -> StepEvaluation:
    """Simulate one step of the seed gait built from ``design`` with the runtime SS controller."""
    from dataclasses import replace as _replace

    from .erg import SSController
    from .hybrid import ExtState, foot_kinematics, impact_map, simulate_ss_phase, swap_legs
    from .model import lift
    from .nmpc import lift_target

    try:
        spec = seed_spec(params, design)
    except (ValueError, ArithmeticError) as exc:
        return StepEvaluation(None, None, 0.0, True, f"infeasible design: {exc}")
    cfg = _replace(walk, spec=spec, velocity_perturbation=0.0)
    ctl = SSController(spec, params, cfg.erg)
    excess = [0.0]

    def controller(state, dt):
        u, diag = ctl(state, dt)
        excess[0] = max(excess[0], diag["u_excess"])
        return u, diag

    controller.reset = ctl.reset
    try:
        res = simulate_ss_phase(spec.start_state, controller, cfg)
    except (ControllerError, np.linalg.LinAlgError) as exc:
        return StepEvaluation(spec, None, excess[0], True, str(exc))
    if res.fell:
        return StepEvaluation(spec, None, excess[0], True, res.reason)
    pre = lift(SSState.from_x(res.event.x), params)
    imp = impact_map(pre, params)
    post = swap_legs(ExtState(pre.q, imp.dq_e_plus))
    feet = foot_kinematics(post, params).p
    target = lift_target(spec.x_s0, feet[:2], params)
    x = post.x
    T = tuning.ds_duration
    # positions reached by a constant-acceleration DS phase; speed at the prescribed ratio
    drift = [x[i] + T * (x[i + 7] + target[i + 7]) / 2 - target[i] for i in (5, 6, 0)]
    closure = np.array([x[12] - tuning.speed_ratio * target[12], *drift,
                        feet[0] - feet[2] - design.step_length])
    return StepEvaluation(spec, closure, excess[0], False)


def tune_coefficients(params: RobotParams, seed: GaitSpec, tuning: TuningConfig = TuningConfig(), walk=None,
                      callback=None) -> TuningResult:
    """Nelder-Mead over the design knobs, then a Newton polish of the closure residual.

    The returned spec is the best candidate seen, so its residual never
    exceeds the seed's.  ``walk`` supplies the integrator and controller
    settings (a ``WalkConfig``); ``callback(evaluation_index, residual)`` is
    called after every simulated candidate.
    """
    from scipy.optimize import minimize

    from .hybrid import WalkConfig

    if walk is None:
        walk = WalkConfig(params, seed)
    base = design_of(seed)
    names = tuning.knobs
    history: list[float] = []
    best = {"obj": np.inf, "design": None, "eval": None}

    def run(k):
        d = base.replace(**dict(zip(names, map(float, k))))
        ev = evaluate_design(d, params, walk, tuning)
        obj = ev.objective(tuning.torque_penalty)
        history.append(obj)
        if callback is not None:
            callback(len(history) - 1, obj)
        if obj < best["obj"]:
            best.update(obj=obj, design=d, eval=ev)
        return ev, obj

    k0 = np.array([getattr(base, n) for n in names], dtype=float)
    seed_ev, seed_obj = run(k0)
    if seed_ev.fell:
        raise TuningError(f"seed gait does not complete a step: {seed_ev.reason}")
    log.info("tuning: seed residual %.3e", seed_obj)

    k = k0
    for attempt in range(1 + tuning.restarts):
        if tuning.max_evals <= 0 or best["obj"] == 0.0:
            break
        simplex = np.vstack([k] + [k + tuning.initial_simplex * np.eye(len(k))[i] for i in range(len(k))])
        minimize(lambda z: run(z)[1], k, method="Nelder-Mead",
                 options={"maxfev": tuning.max_evals, "initial_simplex": simplex, "xatol": 1e-9, "fatol": 0.0})
        k = np.array([getattr(best["design"], n) for n in names])
        log.info("tuning: Nelder-Mead pass %d residual %.3e", attempt, best["obj"])

    # Newton on the square closure system (five knobs, five conditions)
    if len(names) == 5:
        for it in range(tuning.newton_iters):
            ev = best["eval"]
            if np.abs(ev.closure).max() < tuning.tol:
                break
            k = np.array([getattr(best["design"], n) for n in names])
            J = np.empty((5, 5))
            for j in range(5):
                e = np.zeros(5)
                e[j] = tuning.fd_step
                evj, _ = run(k + e)
                if evj.fell:
                    raise TuningError("candidate fell while differentiating the closure map")
                J[:, j] = (evj.closure - ev.closure) / tuning.fd_step
            try:
                step = np.linalg.solve(J, ev.closure)
            except np.linalg.LinAlgError:
                break
            before = best["obj"]
            run(k - step)
            log.info("tuning: Newton %d residual %.3e", it, best["obj"])
            if best["obj"] >= before:
                break

    ev = best["eval"]
    spec = ev.spec
    spec.meta = {**spec.meta, "tuning": {
        "speed_ratio": tuning.speed_ratio, "ds_duration": tuning.ds_duration,
        "residual": best["obj"], "closure": ev.closure.tolist(),
    }}
    return TuningResult(spec, best["design"], best["obj"], seed_obj, ev.closure, history)

"""Explicit reference governor on the variable-length inverted pendulum (VLIP).

The VLIP state is ``x_v = [l, dl/dt]`` with ``l`` the distance from the
stance foot to the center of mass.  The governor filters a nominal length
reference ``r`` into an applied reference ``w`` such that the tracking
Lyapunov level never exceeds the distance to the nearest constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import RobotParams, SSState, com_position


class InfeasibleReferenceError(ValueError):
    pass


class VLIPSingularityError(ValueError):
    pass


@dataclass(frozen=True)
class VLIPModel:
    m_v: float
    K_p_v: float
    K_d_v: float
    u_v_bounds: tuple[float, float]
    l_bounds: tuple[float, float]
    g: float = 9.81

    def __post_init__(self):
        if not self.m_v > 0:
            raise ValueError("m_v must be positive")
        if not (self.K_p_v > 0 and self.K_d_v > 0):
            raise ValueError("VLIP gains must be positive")
        if not self.u_v_bounds[0] < self.u_v_bounds[1]:
            raise ValueError("u_v bounds must be ordered")
        if not self.l_bounds[0] < self.l_bounds[1]:
            raise ValueError("l bounds must be ordered")

    @property
    def P(self) -> np.ndarray:
        return np.diag([self.K_p_v, self.m_v])

    @classmethod
    def for_robot(cls, params: RobotParams, omega: float = 20.0, u_v_bounds=(0.0, 40.0),
                  l_bounds=(0.30, 0.50), m_v: float | None = None) -> VLIPModel:
        """Critically damped tracking at natural frequency ``omega``; m_v defaults to the total mass."""
        m = params.total_mass if m_v is None else m_v
        return cls(m, m * omega**2, 2 * m * omega, tuple(u_v_bounds), tuple(l_bounds), params.g)


@dataclass(frozen=True)
class ConstraintSet:
    """Rows ``c_x . x_v + c_w w + c_limit >= 0``."""

    c_x: np.ndarray  # (n_c, 2)
    c_w: np.ndarray  # (n_c,)
    c_limit: np.ndarray  # (n_c,)
    names: tuple[str, ...] = ()

    def __post_init__(self):
        cx = np.atleast_2d(np.asarray(self.c_x, dtype=float))
        cw = np.atleast_1d(np.asarray(self.c_w, dtype=float))
        cl = np.atleast_1d(np.asarray(self.c_limit, dtype=float))
        if cx.shape[0] < 1 or cx.shape != (cw.size, 2) or cl.size != cw.size:
            raise ValueError("constraint rows have inconsistent shapes")
        degenerate = np.all(cx == 0, axis=1) & (cw == 0)
        if np.any(degenerate):
            raise ValueError("constraint row with c_x = 0 and c_w = 0")
        if np.any(np.all(cx == 0, axis=1)):
            raise ValueError("rows need a state dependence to bound the Lyapunov level")
        object.__setattr__(self, "c_x", cx)
        object.__setattr__(self, "c_w", cw)
        object.__setattr__(self, "c_limit", cl)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"c{i}" for i in range(cw.size)))

    def __len__(self) -> int:
        return self.c_w.size

    def values(self, x_v, w) -> np.ndarray:
        return self.c_x @ np.asarray(x_v, dtype=float) + self.c_w * w + self.c_limit


def default_constraints(model: VLIPModel, gravity_scale: float = 1.0) -> ConstraintSet:
    """Input bounds of the PD-plus-gravity law and length bounds (n_c = 4)."""
    kp, kd = model.K_p_v, model.K_d_v
    mg = model.m_v * model.g * gravity_scale
    lo, hi = model.u_v_bounds
    l_lo, l_hi = model.l_bounds
    return ConstraintSet(
        c_x=np.array([[kp, kd], [-kp, -kd], [-1.0, 0.0], [1.0, 0.0]]),
        c_w=np.array([-kp, kp, 0.0, 0.0]),
        c_limit=np.array([hi - mg, mg - lo, l_hi, -l_lo]),
        names=("u_v_max", "u_v_min", "l_max", "l_min"),
    )


def steady_state(w: float) -> np.ndarray:
    # reference enters the position slot: the equilibrium of l is w at rest
    return np.array([w, 0.0])


def vlip_state(state: SSState, params: RobotParams) -> np.ndarray:
    """[l, dl/dt] of the COM relative to the stance foot (at the origin)."""
    p, J, _ = com_position(state, params)
    l = float(np.hypot(p[0], p[1]))
    return np.array([l, float(p @ (J @ state.dq)) / l])


def inclination(state: SSState, params: RobotParams) -> float:
    p, _, _ = com_position(state, params)
    return float(np.arctan2(p[0], p[1]))


def lyapunov(x_v, w: float, model: VLIPModel) -> float:
    e = np.asarray(x_v, dtype=float) - steady_state(w)
    return float(model.K_p_v * e[0] ** 2 + model.m_v * e[1] ** 2)


def gamma_terms(w: float, constraints: ConstraintSet, model: VLIPModel) -> np.ndarray:
    """Per-row threshold: squared P-metric distance from x_w to the row boundary."""
    num = constraints.values(steady_state(w), w)
    if np.any(num < 0):
        bad = [constraints.names[i] for i in np.flatnonzero(num < 0)]
        raise InfeasibleReferenceError(f"steady state of w={w:.6g} violates {bad}")
    Pinv = np.array([1.0 / model.K_p_v, 1.0 / model.m_v])
    den = (constraints.c_x**2) @ Pinv
    return num**2 / den


def gamma(w: float, constraints: ConstraintSet, model: VLIPModel) -> float:
    return float(gamma_terms(w, constraints, model).min())


@dataclass
class GovernorState:
    w: float
    r: float
    kappa: float = 100.0
    last_gamma: float = float("nan")
    last_V: float = float("nan")
    active: int = -1
    history: list = field(default_factory=list, repr=False)


def reference_rate(x_v, w: float, r: float, kappa: float, constraints: ConstraintSet, model: VLIPModel):
    """dw/dt and the (Gamma, V, active row) used to compute it."""
    terms = gamma_terms(w, constraints, model)
    G = float(terms.min())
    V = lyapunov(x_v, w, model)
    scale = max(G - V, 0.0)
    # (r - w)/|r - w| * sat_1(|r - w|) for a scalar reference
    attraction = float(np.clip(r - w, -1.0, 1.0))
    return kappa * scale * attraction, G, V, int(np.argmin(terms))


def governor_step(gov: GovernorState, x_v, constraints: ConstraintSet, model: VLIPModel, dt: float) -> float:
    """Advance the applied reference by one Euler step; returns the new ``w``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    wdot, G, V, active = reference_rate(x_v, gov.w, gov.r, gov.kappa, constraints, model)
    step = wdot * dt
    gap = gov.r - gov.w
    if abs(step) >= abs(gap):
        step = gap
    w_new = gov.w + step
    # never request a reference whose steady state is infeasible
    if np.any(constraints.values(steady_state(w_new), w_new) < 0):
        w_new = gov.w
    gov.w = w_new
    gov.last_gamma, gov.last_V, gov.active = G, V, active
    return w_new


def vlip_control(x_v, w: float, model: VLIPModel, incline: float = 0.0):
    """PD tracking plus gravity compensation, clipped to the input bounds.

    Returns ``(u_v, saturated)``.
    """
    l, dl = x_v
    u = model.K_p_v * (w - l) - model.K_d_v * dl + model.m_v * model.g * np.cos(incline)
    lo, hi = model.u_v_bounds
    u_sat = float(np.clip(u, lo, hi))
    return u_sat, u_sat != u


def length_gradient(state: SSState, params: RobotParams) -> np.ndarray:
    """dl/dq_b with the under-actuated torso angle held fixed."""
    p, _, Jb = com_position(state, params)
    l = float(np.hypot(p[0], p[1]))
    if l < 1e-9:
        raise VLIPSingularityError("COM coincides with the stance foot")
    return (p[0] * Jb[0] + p[1] * Jb[1]) / l


def map_to_joint_torques(u_v: float, state: SSState, params: RobotParams) -> np.ndarray:
    """Joint torques whose virtual work balances the VLIP force: u' dq_b + u_v dl = 0."""
    return -u_v * length_gradient(state, params)


# ---- standalone VLIP benchmark ----------------------------------------------

@dataclass
class VLIPRun:
    t: np.ndarray
    l: np.ndarray
    dl: np.ndarray
    w: np.ndarray
    u_cmd: np.ndarray  # unsaturated command
    gamma: np.ndarray
    V: np.ndarray
    violations: int
    max_constraint_violation: float


def simulate_vlip(model: VLIPModel, l0: float, r: float, duration: float, dt: float = 1e-3,
                  governed: bool = True, kappa: float = 100.0, substeps: int = 10) -> VLIPRun:
    """Vertical VLIP m l'' = u_v - m g under PD-plus-gravity tracking of ``r``.

    The ungoverned run tracks ``r`` directly and its raw command is checked
    against the input bounds; the governed run tracks the filtered ``w``.
    """
    cons = default_constraints(model)
    x = np.array([l0, 0.0])
    gov = GovernorState(w=l0, r=r, kappa=kappa)
    n = int(round(duration / dt))
    rec = {k: [] for k in ("t", "l", "dl", "w", "u", "G", "V")}
    violations = 0
    worst = 0.0
    lo, hi = model.u_v_bounds
    for k in range(n + 1):
        if governed:
            governor_step(gov, x, cons, model, dt)
            w = gov.w
            G, V = gov.last_gamma, gov.last_V
        else:
            w = r
            G = V = float("nan")
        u_raw = model.K_p_v * (w - x[0]) - model.K_d_v * x[1] + model.m_v * model.g
        excess = max(u_raw - hi, lo - u_raw, 0.0)
        row_vals = cons.values(x, w)
        excess = max(excess, -row_vals.min())
        if excess > 1e-9:
            violations += 1
            worst = max(worst, excess)
        u = float(np.clip(u_raw, lo, hi))
        for key, val in zip(rec, (k * dt, x[0], x[1], w, u_raw, G, V)):
            rec[key].append(val)
        if k == n:
            break
        h = dt / substeps
        for _ in range(substeps):
            # exact-enough semi-analytic update for constant u over a substep
            acc = u / model.m_v - model.g
            x = np.array([x[0] + h * x[1] + 0.5 * h * h * acc, x[1] + h * acc])
    return VLIPRun(
        *(np.array(rec[k]) for k in ("t", "l", "dl", "w", "u", "G", "V")),
        violations=violations,
        max_constraint_violation=worst,
    )


# ---- ERG-filtered SS control ---------------------------------------------------

@dataclass(frozen=True)
class ERGConfig:
    enabled: bool = True
    kappa: float = 1000.0
    omega: float = 20.0
    u_v_min: float = 0.0
    u_v_max: float = 20.0
    l_min: float = 0.30
    l_max: float = 0.50
    m_v: float | None = None

    def model(self, params: RobotParams) -> VLIPModel:
        return VLIPModel.for_robot(params, self.omega, (self.u_v_min, self.u_v_max),
                                   (self.l_min, self.l_max), self.m_v)


class NominalLength:
    """COM length along the zero-dynamics manifold, tabulated over the phase."""

    def __init__(self, spec, params: RobotParams, samples: int = 201):
        from .gait import manifold_configuration

        self.spec = spec
        lo, hi = spec.theta_range
        self.theta = np.linspace(lo, hi, samples)
        ls = []
        for th in self.theta:
            q = manifold_configuration(th, spec, params)
            p, _, _ = com_position(SSState(q, np.zeros(5)), params)
            ls.append(np.hypot(*p))
        self.l = np.array(ls)

    def __call__(self, theta: float) -> float:
        return float(np.interp(theta, self.theta, self.l))


class SSController:
    """Feedback-linearizing output control with the ERG correction on the VLIP force.

    The governed VLIP force minus the force that would track the nominal
    length is mapped to joint torques and added to the FBL torque, so the
    correction vanishes whenever the governor is inactive.
    """

    def __init__(self, spec, params: RobotParams, erg: ERGConfig = ERGConfig()):
        self.spec = spec
        self.params = params
        self.erg = erg
        self.model = erg.model(params)
        self.nominal = NominalLength(spec, params) if erg.enabled else None
        self.gov: GovernorState | None = None
        self.saturations = 0

    def reset(self, state: SSState) -> None:
        from .gait import phase_variable

        if not self.erg.enabled:
            return
        th, _, _ = phase_variable(state, self.params, self.spec)
        r = self.nominal(th)
        self.gov = GovernorState(w=r, r=r, kappa=self.erg.kappa)

    def __call__(self, state: SSState, dt: float):
        from .gait import fbl_control, phase_variable

        u = fbl_control(state, self.spec, self.params)
        diag = {"w": np.nan, "r": np.nan, "V": np.nan, "Gamma": np.nan, "erg_sat": 0}
        if self.erg.enabled:
            th, _, _ = phase_variable(state, self.params, self.spec)
            x_v = vlip_state(state, self.params)
            alpha = inclination(state, self.params)
            cons = default_constraints(self.model, np.cos(alpha))
            self.gov.r = self.nominal(th)
            governor_step(self.gov, x_v, cons, self.model, dt)
            u_gov, sat = vlip_control(x_v, self.gov.w, self.model, alpha)
            m = self.model
            u_nom = m.K_p_v * (self.gov.r - x_v[0]) - m.K_d_v * x_v[1] + m.m_v * m.g * np.cos(alpha)
            # the virtual-work map returns torques balancing u_v; the applied correction opposes it
            u = u + map_to_joint_torques(-(u_gov - u_nom), state, self.params)
            self.saturations += int(sat)
            diag.update(w=self.gov.w, r=self.gov.r, V=self.gov.last_V, Gamma=self.gov.last_gamma,
                        erg_sat=int(sat))
        u_clip = np.clip(u, -self.params.u_max, self.params.u_max)
        diag["u_sat"] = int(np.any(u_clip != u))
        diag["u_excess"] = float(np.max(np.abs(u) - self.params.u_max, initial=0.0))
        return u_clip, diag

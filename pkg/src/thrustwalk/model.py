"""Rigid-body terms for the planar thruster-assisted biped.

The robot is a chain of point masses: torso mass at ``l_T`` above the hip
along the torso, the hip motors at the hip, and each leg mass split between
the knee and the foot end.  Every link angle is a linear combination of the
generalized coordinates, so positions, Jacobians and Hessians are exact
closed forms assembled from ``d(phi) = [sin phi, -cos phi]``.

Coordinates
    SS (5):        [q_T, q_1R, q_1L, q_2R, q_2L], stance foot R pinned at origin
    extended (7):  [q_T, q_1R, q_1L, q_2R, q_2L, x_H, y_H]

All angles are counter-clockwise positive.  ``q_T`` is measured from the
upward vertical, ``q_1*`` is the femur relative to the torso's downward
extension and ``q_2*`` the tibia relative to the femur.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields

import numpy as np

N_SS = 5
N_EXT = 7
ACTUATED = slice(1, 5)

# point order shared by every chain
HIP, TORSO, KNEE_R, KNEE_L, FOOT_R, FOOT_L = range(6)


class InvalidStateError(ValueError):
    """Raised when a state contains non-finite entries or has the wrong size."""


@dataclass(frozen=True)
class RobotParams:
    m_T: float = 0.3
    m_h: float = 0.2
    m_k: float = 0.1
    l_T: float = 0.10
    l_1: float = 0.18
    l_2a: float = 0.32
    l_2b: float = 0.32
    g: float = 9.81
    d: float = 5.0
    mu_s: float = 0.8
    u_max: float = 5.0
    f_th_max: float = 15.0
    # fraction of each leg mass lumped at the knee; the rest sits at the foot end
    knee_mass_fraction: float = 0.5
    knee_min: float = -2.8
    knee_max: float = -0.05

    def __post_init__(self):
        for name in ("m_T", "m_h", "m_k", "l_T", "l_1", "l_2a", "l_2b", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0 < self.mu_s <= 1.5:
            raise ValueError("mu_s must lie in (0, 1.5]")
        if self.d < 0:
            raise ValueError("damping d must be non-negative")
        if not 0 < self.knee_mass_fraction <= 1:
            raise ValueError("knee_mass_fraction must lie in (0, 1]")
        if self.knee_mass_fraction == 1:
            # swing tibia would carry no inertia and D_s would be singular
            raise ValueError("knee_mass_fraction = 1 makes the SS inertia singular")

    @property
    def total_mass(self) -> float:
        return self.m_T + 2 * self.m_h + 2 * self.m_k

    @property
    def weight(self) -> float:
        return self.total_mass * self.g

    @property
    def l_2(self) -> float:
        """Effective knee-to-foot length of the virtual lower leg."""
        return self.l_2a

    def replace(self, **changes) -> RobotParams:
        return RobotParams(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, mapping) -> RobotParams:
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown robot parameter(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in mapping.items()})

    @classmethod
    def from_file(cls, path, section: str = "robot") -> RobotParams:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        if not cp.read(path):
            raise FileNotFoundError(path)
        if not cp.has_section(section):
            return cls()
        return cls.from_mapping(dict(cp.items(section)))


def _check(arr, n: int, what: str) -> np.ndarray:
    a = np.asarray(arr, dtype=float)
    if a.shape != (n,):
        raise InvalidStateError(f"{what} must have shape ({n},), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidStateError(f"{what} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SSState:
    q: np.ndarray
    dq: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _check(self.q, N_SS, "q_s"))
        object.__setattr__(self, "dq", _check(self.dq, N_SS, "dq_s"))

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.q, self.dq])

    @classmethod
    def from_x(cls, x) -> SSState:
        x = np.asarray(x, dtype=float)
        return cls(x[:N_SS], x[N_SS:])


@dataclass(frozen=True)
class ExtState:
    q: np.ndarray
    dq: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _check(self.q, N_EXT, "q_e"))
        object.__setattr__(self, "dq", _check(self.dq, N_EXT, "dq_e"))

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.q, self.dq])

    @classmethod
    def from_x(cls, x) -> ExtState:
        x = np.asarray(x, dtype=float)
        return cls(x[:N_EXT], x[N_EXT:])

    def restrict(self) -> SSState:
        return SSState(self.q[:N_SS], self.dq[:N_SS])


@dataclass(frozen=True)
class DynMatrices:
    D: np.ndarray
    H: np.ndarray
    B: np.ndarray


@dataclass(frozen=True)
class FootKinematics:
    p: np.ndarray  # [x_R, y_R, x_L, y_L]
    J: np.ndarray  # 4 x 7
    dJdq: np.ndarray  # Jdot @ dq
    rank: int


# segment angle coefficients over the five angular coordinates
_SEG_COEFF = np.array(
    [
        [1, 0, 0, 0, 0],  # torso
        [1, 1, 0, 0, 0],  # femur R
        [1, 0, 1, 0, 0],  # femur L
        [1, 1, 0, 1, 0],  # tibia R
        [1, 0, 1, 0, 1],  # tibia L
    ],
    dtype=float,
)

# which segments each point accumulates, starting from the hip
_INCIDENCE_EXT = np.array(
    [
        [0, 0, 0, 0, 0],  # hip
        [1, 0, 0, 0, 0],  # torso
        [0, 1, 0, 0, 0],  # knee R
        [0, 0, 1, 0, 0],  # knee L
        [0, 1, 0, 1, 0],  # foot R
        [0, 0, 1, 0, 1],  # foot L
    ],
    dtype=float,
)

# stance foot R at the origin: hip = -(femur R + tibia R)
_INCIDENCE_SS = _INCIDENCE_EXT - np.array([0, 1, 0, 1, 0], dtype=float)


class Chain:
    """Point-mass chain with positions linear in link directions."""

    def __init__(self, params: RobotParams, floating: bool):
        self.params = params
        self.floating = floating
        self.n = N_EXT if floating else N_SS
        self.inc = _INCIDENCE_EXT if floating else _INCIDENCE_SS
        self.lengths = np.array(
            [-params.l_T, params.l_1, params.l_1, params.l_2, params.l_2]
        )
        fk = params.knee_mass_fraction
        self.masses = np.array(
            [
                2 * params.m_h,
                params.m_T,
                fk * params.m_k,
                fk * params.m_k,
                (1 - fk) * params.m_k,
                (1 - fk) * params.m_k,
            ]
        )
        self.A = np.zeros((5, self.n))
        self.A[:, :N_SS] = _SEG_COEFF
        self.gvec = np.array([0.0, params.g])

    def _angles(self, q):
        phi = self.A @ q
        return np.sin(phi), np.cos(phi)

    def positions(self, q) -> np.ndarray:
        s, c = self._angles(q)
        seg = self.lengths[:, None] * np.stack([s, -c], axis=1)
        p = self.inc @ seg
        if self.floating:
            p = p + q[5:7]
        return p

    def jacobians(self, q) -> np.ndarray:
        """(6, 2, n) point Jacobians."""
        s, c = self._angles(q)
        segd = self.lengths[:, None] * np.stack([c, s], axis=1)
        J = np.einsum("pk,kx,ka->pxa", self.inc, segd, self.A)
        if self.floating:
            J[:, 0, 5] += 1.0
            J[:, 1, 6] += 1.0
        return J

    def bias(self, q, dq) -> np.ndarray:
        """(6, 2) velocity-product accelerations Jdot @ dq."""
        s, c = self._angles(q)
        w = self.A @ dq
        segdd = (self.lengths * w * w)[:, None] * np.stack([-s, c], axis=1)
        return self.inc @ segdd

    def hessians(self, q) -> np.ndarray:
        """(6, 2, n, n) second derivatives of point positions."""
        s, c = self._angles(q)
        segdd = self.lengths[:, None] * np.stack([-s, c], axis=1)
        return np.einsum("pk,kx,ka,kb->pxab", self.inc, segdd, self.A, self.A)

    def mass_matrix(self, J) -> np.ndarray:
        return np.einsum("p,pxa,pxb->ab", self.masses, J, J)

    def nonlinear(self, J, bias) -> np.ndarray:
        return np.einsum("p,pxa,px->a", self.masses, J, bias + self.gvec)

    def input_map(self) -> np.ndarray:
        B = np.zeros((self.n, 4))
        B[1:5, :] = np.eye(4)
        return B

    def energies(self, q, dq) -> tuple[float, float]:
        J = self.jacobians(q)
        D = self.mass_matrix(J)
        kin = 0.5 * float(dq @ D @ dq)
        pot = float(self.params.g * self.masses @ self.positions(q)[:, 1])
        return kin, pot

    def mass_derivative(self, q) -> np.ndarray:
        """dD[a, b, c] = d D_ab / d q_c."""
        J = self.jacobians(q)
        Hs = self.hessians(q)
        half = np.einsum("p,pxac,pxb->abc", self.masses, Hs, J)
        return half + half.transpose(1, 0, 2)

    def coriolis_matrix(self, q, dq) -> np.ndarray:
        """Christoffel-symbol Coriolis matrix so that C @ dq is the velocity term of H."""
        dD = self.mass_derivative(q)
        # gamma[k, j, i] = 1/2 (dD_kj/dq_i + dD_ki/dq_j - dD_ij/dq_k)
        gamma = 0.5 * (dD + dD.transpose(0, 2, 1) - dD.transpose(2, 1, 0))
        return gamma @ dq


_CHAINS: dict[tuple[RobotParams, bool], Chain] = {}


def chain(params: RobotParams, floating: bool) -> Chain:
    key = (params, floating)
    ch = _CHAINS.get(key)
    if ch is None:
        ch = _CHAINS[key] = Chain(params, floating)
    return ch


def ss_arrays(q, dq, params: RobotParams):
    """D_s, H_s for raw arrays (hot path for integrators and controllers)."""
    ch = chain(params, False)
    J = ch.jacobians(q)
    return ch.mass_matrix(J), ch.nonlinear(J, ch.bias(q, dq))


def ext_arrays(q, dq, params: RobotParams):
    ch = chain(params, True)
    J = ch.jacobians(q)
    return ch.mass_matrix(J), ch.nonlinear(J, ch.bias(q, dq)), J


def ss_matrices(state: SSState, params: RobotParams) -> DynMatrices:
    ch = chain(params, False)
    D, H = ss_arrays(state.q, state.dq, params)
    return DynMatrices(D, H, ch.input_map())


def extended_matrices(state: ExtState, params: RobotParams) -> DynMatrices:
    ch = chain(params, True)
    D, H, _ = ext_arrays(state.q, state.dq, params)
    return DynMatrices(D, H, ch.input_map())


def thrust_direction(q_T: float) -> np.ndarray:
    """Unit vector pointing up along the torso."""
    return np.array([-np.sin(q_T), np.cos(q_T)])


def thrust_column(q, params: RobotParams, J=None) -> np.ndarray:
    """Generalized force of a unit thrust applied at the torso mass along the torso."""
    if J is None:
        J = chain(params, True).jacobians(q)
    return J[TORSO].T @ thrust_direction(q[0])


def ds_input_map(q, params: RobotParams, J=None) -> np.ndarray:
    B = np.zeros((N_EXT, 5))
    B[1:5, :4] = np.eye(4)
    B[:, 4] = thrust_column(q, params, J)
    return B


def ds_matrices(state: ExtState, params: RobotParams) -> DynMatrices:
    D, H, J = ext_arrays(state.q, state.dq, params)
    return DynMatrices(D, H, ds_input_map(state.q, params, J))


def foot_kinematics(state: ExtState, params: RobotParams) -> FootKinematics:
    ch = chain(params, True)
    q, dq = state.q, state.dq
    J = ch.jacobians(q)[[FOOT_R, FOOT_L]].reshape(4, N_EXT)
    p = ch.positions(q)[[FOOT_R, FOOT_L]].reshape(4)
    b = ch.bias(q, dq)[[FOOT_R, FOOT_L]].reshape(4)
    return FootKinematics(p, J, b, int(np.linalg.matrix_rank(J)))


def _as_arrays(state):
    if isinstance(state, SSState):
        return state.q, state.dq, False
    if isinstance(state, ExtState):
        return state.q, state.dq, True
    raise TypeError(f"expected SSState or ExtState, got {type(state).__name__}")


def com_position(state, params: RobotParams):
    """COM position, its full Jacobian, and the rows w.r.t. the actuated joints.

    Returns ``(p_cm, J_cm, J_cm_b)`` with ``J_cm`` of shape (2, n) and
    ``J_cm_b = J_cm[:, 1:5]``.
    """
    q, _, floating = _as_arrays(state)
    ch = chain(params, floating)
    m = ch.masses
    M = m.sum()
    p = m @ ch.positions(q) / M
    J = np.einsum("p,pxa->xa", m, ch.jacobians(q)) / M
    return p, J, J[:, ACTUATED]


def energies(state, params: RobotParams) -> tuple[float, float]:
    """Kinetic and potential energy, potential datum at ground height y = 0."""
    q, dq, floating = _as_arrays(state)
    return chain(params, floating).energies(q, dq)


def point_positions(state, params: RobotParams) -> np.ndarray:
    q, _, floating = _as_arrays(state)
    return chain(params, floating).positions(q)


# ---- SS <-> extended conversions ----------------------------------------

def hip_from_ss(q_s, params: RobotParams, stance=(0.0, 0.0)) -> np.ndarray:
    return chain(params, False).positions(q_s)[HIP] + np.asarray(stance, dtype=float)


def lift(state: SSState, params: RobotParams, stance=(0.0, 0.0)) -> ExtState:
    """Embed an SS state with the stance foot R at ``stance``."""
    ch = chain(params, False)
    pH = ch.positions(state.q)[HIP] + np.asarray(stance, dtype=float)
    vH = ch.jacobians(state.q)[HIP] @ state.dq
    return ExtState(np.concatenate([state.q, pH]), np.concatenate([state.dq, vH]))


def swing_foot(q_s, dq_s, params: RobotParams):
    """Position and velocity of foot L relative to the stance foot."""
    ch = chain(params, False)
    return ch.positions(q_s)[FOOT_L], ch.jacobians(q_s)[FOOT_L] @ dq_s


def leg_ik(foot_rel, params: RobotParams, knee_forward: bool = True):
    """Absolute femur angle and relative knee angle placing the foot at ``foot_rel`` from the hip."""
    l1, l2 = params.l_1, params.l_2
    rx, ry = float(foot_rel[0]), float(foot_rel[1])
    rho2 = rx * rx + ry * ry
    c2 = (rho2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    if not -1.0 <= c2 <= 1.0:
        raise ValueError("foot target out of reach")
    q2 = -np.arccos(c2) if knee_forward else np.arccos(c2)
    beta = np.arctan2(rx, -ry)
    gam = np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
    return beta - gam, q2

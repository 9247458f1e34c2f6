"""Rigid-body dynamics for serial chains of revolute joints.

Forward kinematics, geometric Jacobians, the composite-rigid-body mass
matrix, recursive Newton-Euler inverse dynamics, joint friction, forward
dynamics and fixed-step integration. All public functions are pure; the
algorithms are generic in the number of joints even though generated robots
always have six.

Spatial quantities use the convention ``[angular; linear]`` internally with
link frames located at the joints. Public kinematic outputs follow the
frame convention documented in :mod:`dynid.model_gen`: index 0 is the fixed
base, index ``i`` is the *distal endpoint* of link ``i`` carrying the link's
orientation, so index 6 is the end-effector flange. Jacobian rows are
ordered ``[linear x, y, z, angular x, y, z]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import ContractError, IllConditionedModelError
from .model_gen import JointSpec, RobotModel

#: Velocity scale of the tanh smoothing applied to the Coulomb sign (rad/s).
FRICTION_SMOOTHING = 1e-3

#: Default gravity vector (m/s^2).
GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class JointState:
    q: np.ndarray
    qd: np.ndarray

    def copy(self) -> "JointState":
        return JointState(self.q.copy(), self.qd.copy())


@dataclass(frozen=True)
class LinkPose:
    rotation: np.ndarray      # 3x3, world orientation
    translation: np.ndarray   # 3, world position (m)


@dataclass(frozen=True)
class DynTerms:
    M: np.ndarray        # joint-space inertia, n x n
    bias: np.ndarray     # C(q, qd) qd + G(q)
    gravity: np.ndarray  # G(q)


def rpy_matrix(rpy) -> np.ndarray:
    """Rotation from roll-pitch-yaw, composed as Rz(yaw) Ry(pitch) Rx(roll)."""
    r, p, y = rpy
    cr, sr = math.cos(r), math.sin(r)
    cp, sp = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def axis_rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    t = 1.0 - c
    return np.array([
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ])


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@lru_cache(maxsize=512)
def _model_arrays(model: RobotModel):
    t = model.template
    n = t.n_joints
    axes = np.asarray(t.joint_axes, dtype=np.float64)
    p_fix = np.asarray(t.joint_origins, dtype=np.float64)
    r_fix = np.stack([rpy_matrix(t.joint_rpy[i]) for i in range(n)])
    lo = np.array([t.joint_limits[i][0] for i in range(n)])
    hi = np.array([t.joint_limits[i][1] for i in range(n)])
    lengths = np.asarray(t.link_lengths, dtype=np.float64)
    mass = np.array([link.mass for link in model.links])
    com = np.stack([np.array([0.0, 0.0, link.length / 2 + link.com_offset]) for link in model.links])
    inertia = np.stack([np.diag(link.inertia) for link in model.links])
    mu_c = np.array([j.mu_c for j in model.joints])
    mu_v = np.array([j.mu_v for j in model.joints])
    return n, axes, r_fix, p_fix, lo, hi, lengths, mass, com, inertia, mu_c, mu_v


def _check_q(model: RobotModel, q) -> np.ndarray:
    n = model.template.n_joints
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (n,):
        raise ContractError(f"expected a length-{n} joint vector, got shape {q.shape}")
    return q


def _joint_transforms(model: RobotModel, q: np.ndarray):
    """Per-joint placement of link frame i in its parent frame: (R, p)."""
    n, axes, r_fix, p_fix, *_ = _model_arrays(model)
    rels = np.empty((n, 3, 3))
    for i in range(n):
        rels[i] = r_fix[i] @ axis_rotation(axes[i], q[i])
    return rels, p_fix


def _world_joint_frames(model: RobotModel, q: np.ndarray):
    """World rotation and origin of every joint frame (link frame i, at joint i)."""
    rels, p_fix = _joint_transforms(model, q)
    n = rels.shape[0]
    R = np.empty((n + 1, 3, 3))
    p = np.empty((n + 1, 3))
    R[0] = np.eye(3)
    p[0] = 0.0
    for i in range(n):
        p[i + 1] = p[i] + R[i] @ p_fix[i]
        R[i + 1] = R[i] @ rels[i]
    return R, p


def forward_kinematics(model: RobotModel, q) -> list[LinkPose]:
    """World poses of the base and of each link's distal endpoint."""
    q = _check_q(model, q)
    n, _, _, _, _, _, lengths, *_ = _model_arrays(model)
    R, p = _world_joint_frames(model, q)
    poses = [LinkPose(R[0], p[0])]
    for i in range(n):
        tip = p[i + 1] + R[i + 1] @ np.array([0.0, 0.0, lengths[i]])
        poses.append(LinkPose(R[i + 1], tip))
    return poses


def jacobian(model: RobotModel, q, frame_index: int) -> np.ndarray:
    """Geometric Jacobian of the frame-``frame_index`` origin.

    Rows 0..2 are the linear velocity map, rows 3..5 the angular one.
    Columns of joints distal to the frame are zero; frame 0 is fixed, so its
    Jacobian is the zero matrix.
    """
    q = _check_q(model, q)
    n, axes, _, _, _, _, lengths, *_ = _model_arrays(model)
    if not 0 <= frame_index <= n:
        raise ContractError(f"frame_index must be in 0..{n}, got {frame_index}")
    J = np.zeros((6, n))
    if frame_index == 0:
        return J
    R, p = _world_joint_frames(model, q)
    target = p[frame_index] + R[frame_index] @ np.array([0.0, 0.0, lengths[frame_index - 1]])
    for j in range(frame_index):
        z = R[j + 1] @ axes[j]
        J[:3, j] = np.cross(z, target - p[j + 1])
        J[3:, j] = z
    return J


def end_effector_jz(model: RobotModel, q) -> np.ndarray:
    """Linear-z row of the end-effector Jacobian (gravity sensitivity per joint)."""
    n = model.template.n_joints
    return jacobian(model, q, n)[2]


# --------------------------------------------------------------------------
# Spatial-algebra helpers (all in [angular; linear] block order)

def _transform_inertia_to_parent(m, c, I_C, R, p):
    """Move a body's (mass, COM, COM-frame inertia) into the parent frame."""
    c_p = R @ c + p
    I_Cp = R @ I_C @ R.T
    return m, c_p, I_Cp


def _rnea(model: RobotModel, q, qd, qdd, gravity) -> np.ndarray:
    n, axes, _, _, _, _, _, mass, com, inertia, *_ = _model_arrays(model)
    rels, p_fix = _joint_transforms(model, q)

    w = np.zeros(3)                       # angular velocity, current link frame
    v = np.zeros(3)                       # linear velocity of the frame origin
    a_w = np.zeros(3)                     # angular acceleration
    a_v = -np.asarray(gravity, dtype=np.float64)   # accelerating-base gravity trick

    f_ang = np.empty((n, 3))
    f_lin = np.empty((n, 3))
    for i in range(n):
        Rt = rels[i].T
        w_in = Rt @ w
        v_in = Rt @ (v + np.cross(w, p_fix[i]))
        aw_in = Rt @ a_w
        av_in = Rt @ (a_v + np.cross(a_w, p_fix[i]))
        s = axes[i]
        w = w_in + s * qd[i]
        v = v_in
        # velocity-product term: [w x s qd; v x s qd] for the revolute axis
        a_w = aw_in + s * qdd[i] + np.cross(w, s) * qd[i]
        a_v = av_in + np.cross(v, s) * qd[i]

        c = com[i]
        # momentum about the frame origin
        h_lin = mass[i] * (v + np.cross(w, c))
        h_ang = inertia[i] @ w + np.cross(c, h_lin)
        # net wrench: I a + v x* (I v)
        ia_lin = mass[i] * (a_v + np.cross(a_w, c))
        ia_ang = inertia[i] @ a_w + np.cross(c, ia_lin)
        f_lin[i] = ia_lin + np.cross(w, h_lin)
        f_ang[i] = ia_ang + np.cross(w, h_ang) + np.cross(v, h_lin)

    tau = np.empty(n)
    g_ang = np.zeros(3)
    g_lin = np.zeros(3)
    for i in range(n - 1, -1, -1):
        tot_ang = f_ang[i] + g_ang
        tot_lin = f_lin[i] + g_lin
        tau[i] = axes[i] @ tot_ang
        # push the wrench into the parent frame
        g_lin = rels[i] @ tot_lin
        g_ang = rels[i] @ tot_ang + np.cross(p_fix[i], g_lin)
    return tau


def inverse_dynamics(model: RobotModel, q, qd, qdd, gravity=GRAVITY) -> np.ndarray:
    """Joint torques for the prescribed motion, friction excluded."""
    q = _check_q(model, q)
    qd = _check_q(model, qd)
    qdd = _check_q(model, qdd)
    return _rnea(model, q, qd, qdd, gravity)


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    """Joint-space inertia via the composite-rigid-body algorithm."""
    q = _check_q(model, q)
    n, axes, _, _, _, _, _, mass, com, inertia, *_ = _model_arrays(model)
    rels, p_fix = _joint_transforms(model, q)

    cm = list(mass)
    cc = [com[i].copy() for i in range(n)]
    cI = [inertia[i].copy() for i in range(n)]
    for i in range(n - 1, 0, -1):
        m_p, c_p, I_p = _transform_inertia_to_parent(cm[i], cc[i], cI[i], rels[i], p_fix[i])
        m_new = cm[i - 1] + m_p
        c_new = (cm[i - 1] * cc[i - 1] + m_p * c_p) / m_new
        d0 = cc[i - 1] - c_new
        d1 = c_p - c_new
        I_new = (cI[i - 1] + cm[i - 1] * (d0 @ d0 * np.eye(3) - np.outer(d0, d0))
                 + I_p + m_p * (d1 @ d1 * np.eye(3) - np.outer(d1, d1)))
        cm[i - 1], cc[i - 1], cI[i - 1] = m_new, c_new, I_new

    H = np.zeros((n, n))
    for i in range(n):
        s = axes[i]
        # wrench produced by unit acceleration about joint i on the composite body
        m, c, I_C = cm[i], cc[i], cI[i]
        f_lin = m * np.cross(s, c)
        f_ang = I_C @ s + np.cross(c, f_lin)
        H[i, i] = s @ f_ang
        j = i
        while j > 0:
            f_lin_p = rels[j] @ f_lin
            f_ang_p = rels[j] @ f_ang + np.cross(p_fix[j], f_lin_p)
            f_lin, f_ang = f_lin_p, f_ang_p
            j -= 1
            H[i, j] = axes[j] @ f_ang
            H[j, i] = H[i, j]
    return H


def bias_forces(model: RobotModel, q, qd, gravity=GRAVITY) -> np.ndarray:
    """Coriolis/centrifugal plus gravity torques, C(q, qd) qd + G(q)."""
    q = _check_q(model, q)
    qd = _check_q(model, qd)
    return _rnea(model, q, qd, np.zeros_like(q), gravity)


def gravity_torque(model: RobotModel, q, gravity=GRAVITY) -> np.ndarray:
    q = _check_q(model, q)
    zeros = np.zeros_like(q)
    return _rnea(model, q, zeros, zeros, gravity)


def dyn_terms(model: RobotModel, q, qd, gravity=GRAVITY) -> DynTerms:
    return DynTerms(M=mass_matrix(model, q), bias=bias_forces(model, q, qd, gravity),
                    gravity=gravity_torque(model, q, gravity))


def friction_torque(joint: JointSpec, qd_i: float) -> float:
    """Smoothed Coulomb plus viscous friction torque opposing motion."""
    return joint.mu_c * math.tanh(qd_i / FRICTION_SMOOTHING) + joint.mu_v * qd_i


def friction_vector(model: RobotModel, qd) -> np.ndarray:
    _, _, _, _, _, _, _, _, _, _, mu_c, mu_v = _model_arrays(model)
    qd = np.asarray(qd, dtype=np.float64)
    return mu_c * np.tanh(qd / FRICTION_SMOOTHING) + mu_v * qd


def forward_dynamics(model: RobotModel, state: JointState, tau, gravity=GRAVITY) -> np.ndarray:
    """Joint accelerations from applied torques, solved via SPD factorization."""
    tau = _check_q(model, tau)
    M = mass_matrix(model, state.q)
    rhs = tau - bias_forces(model, state.q, state.qd, gravity) - friction_vector(model, state.qd)
    try:
        chol = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise IllConditionedModelError(f"mass matrix is not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve(chol, rhs, check_finite=False)


def step(model: RobotModel, state: JointState, tau, dt: float, gravity=GRAVITY) -> JointState:
    """One semi-implicit Euler step with joint-limit clamping.

    Friction is folded into the velocity update implicitly (viscous term
    exact, smoothed Coulomb linearized about the current velocity), i.e. one
    Newton step of ``M (qd' - qd)/dt = tau - bias - friction(qd')``. Explicit
    friction blows up on light distal joints at millisecond steps, where
    ``mu_v dt`` and the Coulomb slope ``mu_c dt / eps`` dwarf the joint
    inertia; the implicit form is unconditionally dissipative and reduces to
    the plain semi-implicit update as friction vanishes.
    """
    if dt <= 0:
        raise ContractError("dt must be positive")
    tau = _check_q(model, tau)
    _, _, _, _, lo, hi, _, _, _, _, mu_c, mu_v = _model_arrays(model)
    M = mass_matrix(model, state.q)
    th = np.tanh(state.qd / FRICTION_SMOOTHING)
    stiff = mu_c * (1.0 - th * th) / FRICTION_SMOOTHING
    tau_net = tau - bias_forces(model, state.q, state.qd, gravity) - mu_c * th
    A = M + dt * np.diag(mu_v + stiff)
    b = M @ state.qd + dt * tau_net + dt * stiff * state.qd
    try:
        chol = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise IllConditionedModelError(f"damped mass matrix is not positive definite: {exc}") from exc
    qd = scipy.linalg.cho_solve(chol, b, check_finite=False)
    q = state.q + dt * qd
    below = q < lo
    above = q > hi
    if below.any() or above.any():
        q = np.clip(q, lo, hi)
        qd = np.where(below | above, 0.0, qd)
    return JointState(q=q, qd=qd)


def total_energy(model: RobotModel, state: JointState, gravity=GRAVITY) -> float:
    """Kinetic plus gravitational potential energy of the whole chain."""
    n, _, _, _, _, _, _, mass, com, *_ = _model_arrays(model)
    M = mass_matrix(model, state.q)
    kinetic = 0.5 * state.qd @ M @ state.qd
    R, p = _world_joint_frames(model, state.q)
    g = np.asarray(gravity, dtype=np.float64)
    potential = 0.0
    for i in range(n):
        com_w = p[i + 1] + R[i + 1] @ com[i]
        potential -= mass[i] * (g @ com_w)
    return float(kinetic + potential)

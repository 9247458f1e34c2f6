"""Waypoint-following episodes under per-joint PID with a gravity-aware term.

The control law boosts each joint's proportional gain by ``kg * |jz_i|``,
where ``jz_i`` is that joint's entry in the linear-z row of the end-effector
geometric Jacobian: joints whose motion moves the end effector vertically
get extra stiffness to counter gravity. ``signed_jz`` switches to the raw
signed entry for comparison.

Episodes integrate the dynamics at 1 kHz, log every step, and are graded by
``detect_failure``; anything but ``Status.OK`` is discarded upstream.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import GRAVITY, JointState
from .errors import ContractError, DynidError, InfeasibleWorkspaceError
from .model_gen import RobotModel

#: Simulation/logging period (s); the logger runs at 1000 Hz.
DT = 1e-3

DEFAULT_HOLD_TOLERANCE = 0.02    # rad
DEFAULT_SETTLE_TIME = 0.2        # s
DEFAULT_MAX_TIME = 4.0           # s
DEFAULT_GROUND_CLEARANCE = 0.02  # m
DEFAULT_SELF_COLLISION_DIST = 0.05  # m between non-adjacent link segments
DEFAULT_VELOCITY_CEILING = 50.0  # rad/s
DEFAULT_LIMIT_MARGIN = 0.05      # rad beyond joint limits counts as divergence


class Status(enum.Enum):
    OK = "ok"
    NAN_DETECTED = "nan_detected"
    DIVERGED = "diverged"
    TIMEOUT = "timeout"


def _per_joint(value, n: int = 6) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return np.full(n, float(arr)) if arr.ndim == 0 else arr


@dataclass(frozen=True)
class PidGains:
    """Per-joint PID scalars plus the shared gravity-aware gain.

    kp/ki/kd/integral_limit accept one number (applied to every joint) or a
    6-sequence. The defaults are tuned to the default template: proximal
    joints fight gravity on meter-scale levers, distal ones position light
    links, so their gains differ by an order of magnitude.
    """

    kp: float | tuple = (400.0, 1600.0, 1000.0, 150.0, 100.0, 60.0)
    ki: float | tuple = (100.0, 500.0, 400.0, 60.0, 40.0, 25.0)
    kd: float | tuple = (20.0, 80.0, 40.0, 1.5, 0.8, 0.4)
    kg: float = 40.0
    integral_limit: float | tuple = (60.0, 120.0, 110.0, 20.0, 10.0, 6.0)   # cap on ki * e_int (N m)
    torque_limit: float = 120.0                                             # output saturation (N m)
    ref_rate: float = 2.0          # reference ramp speed toward the waypoint (rad/s); 0 = step
    signed_jz: bool = False

    def arrays(self, n: int = 6) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (_per_joint(self.kp, n), _per_joint(self.ki, n),
                _per_joint(self.kd, n), _per_joint(self.integral_limit, n))

    def validate(self) -> None:
        kp, ki, kd, int_lim = self.arrays()
        if min(kp.min(), ki.min(), kd.min(), int_lim.min(), self.torque_limit) < 0:
            raise ContractError("gains, limits and torque_limit must be non-negative")
        if self.ref_rate < 0:
            raise ContractError("ref_rate must be non-negative")


@dataclass(frozen=True)
class Waypoint:
    q_target: np.ndarray
    hold_tolerance: float = DEFAULT_HOLD_TOLERANCE
    settle_time: float = DEFAULT_SETTLE_TIME
    max_time: float = DEFAULT_MAX_TIME


@dataclass
class TrajectoryLog:
    robot_id: int
    dt: float
    t: np.ndarray        # (T,)
    q: np.ndarray        # (T, n)
    qd: np.ndarray       # (T, n)
    tau: np.ndarray      # (T, n) applied torques
    waypoints: list[Waypoint]
    settled: np.ndarray  # (W,) bool
    status: Status

    @property
    def n_frames(self) -> int:
        return self.t.shape[0]

    def summary_line(self) -> str:
        settled = int(self.settled.sum()) if self.settled.size else 0
        return (f"robot={self.robot_id} status={self.status.value} frames={self.n_frames} "
                f"waypoints={len(self.waypoints)} settled={settled} duration_s={self.n_frames * self.dt:.3f}")


def gravity_aware_pid(gains: PidGains, e, e_int, e_dot, jz) -> np.ndarray:
    """Control torque (Kp + Kg jz) e + Ki e_int + Kd e_dot, saturated.

    ``e_int`` must already carry anti-windup clamping; this function is the
    pure control law. With kg = 0 it reduces exactly to textbook PID.
    """
    e = np.asarray(e, dtype=np.float64)
    kp, ki, kd, _ = gains.arrays(e.shape[-1])
    jz_term = np.asarray(jz, dtype=np.float64)
    if not gains.signed_jz:
        jz_term = np.abs(jz_term)
    u = (kp + gains.kg * jz_term) * e + ki * np.asarray(e_int) + kd * np.asarray(e_dot)
    return np.clip(u, -gains.torque_limit, gains.torque_limit)


def _segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between segments [p0, p1] and [q0, q1]."""
    u = p1 - p0
    v = q1 - q0
    w = p0 - q0
    a, b, c = u @ u, u @ v, v @ v
    d, e = u @ w, v @ w
    denom = a * c - b * b
    if denom > 1e-12:
        s = min(1.0, max(0.0, (b * e - c * d) / denom))
    else:
        s = 0.0
    t = (b * s + e) / c if c > 1e-12 else 0.0
    t = min(1.0, max(0.0, t))
    # refine s for the clamped t
    if a > 1e-12:
        s = min(1.0, max(0.0, (b * t - d) / a))
    return float(np.linalg.norm(p0 + s * u - (q0 + t * v)))


def config_is_collision_free(model: RobotModel, q,
                             ground_clearance: float = DEFAULT_GROUND_CLEARANCE,
                             self_collision_dist: float = DEFAULT_SELF_COLLISION_DIST) -> bool:
    """Ground-plane clearance plus a pairwise segment-distance self-collision proxy."""
    poses = dynamics.forward_kinematics(model, q)
    pts = np.stack([pose.translation for pose in poses])
    if (pts[1:, 2] <= ground_clearance).any():
        return False
    n_seg = len(poses) - 1
    for i in range(n_seg):
        for j in range(i + 2, n_seg):
            if _segment_distance(pts[i], pts[i + 1], pts[j], pts[j + 1]) < self_collision_dist:
                return False
    return True


def sample_waypoints(model: RobotModel, n: int, seed: int,
                     hold_tolerance: float = DEFAULT_HOLD_TOLERANCE,
                     settle_time: float = DEFAULT_SETTLE_TIME,
                     max_time: float = DEFAULT_MAX_TIME,
                     n_interp: int = 16,
                     max_retries: int = 2000,
                     ground_clearance: float = DEFAULT_GROUND_CLEARANCE,
                     self_collision_dist: float = DEFAULT_SELF_COLLISION_DIST) -> list[Waypoint]:
    """Draw joint-space waypoints whose poses and connecting paths are collision-free.

    Candidates are uniform within the joint limits; each accepted waypoint
    must itself pass the collision check, and so must ``n_interp`` linearly
    interpolated configurations from the previously accepted waypoint (the
    home configuration for the first).
    """
    if n < 1:
        raise ContractError("waypoint count must be >= 1")
    rng = np.random.default_rng(seed)
    limits = np.asarray(model.template.joint_limits, dtype=np.float64)
    previous = np.zeros(model.template.n_joints)
    accepted: list[Waypoint] = []
    while len(accepted) < n:
        for attempt in range(max_retries):
            candidate = rng.uniform(limits[:, 0], limits[:, 1])
            if not config_is_collision_free(model, candidate, ground_clearance, self_collision_dist):
                continue
            alphas = (np.arange(1, n_interp + 1) - 0.5) / n_interp
            ok = all(
                config_is_collision_free(model, previous + a * (candidate - previous),
                                         ground_clearance, self_collision_dist)
                for a in alphas)
            if ok:
                accepted.append(Waypoint(q_target=candidate, hold_tolerance=hold_tolerance,
                                         settle_time=settle_time, max_time=max_time))
                previous = candidate
                break
        else:
            raise InfeasibleWorkspaceError(
                f"no feasible waypoint after {max_retries} tries (found {len(accepted)}/{n})")
    return accepted


@dataclass(frozen=True)
class FailureLimits:
    velocity_ceiling: float = DEFAULT_VELOCITY_CEILING
    position_margin: float = DEFAULT_LIMIT_MARGIN


def detect_failure(log: TrajectoryLog, joint_limits, limits: FailureLimits = FailureLimits()) -> Status:
    """Grade a finished episode; anything but OK marks the log as corrupted."""
    arrays = (log.t, log.q, log.qd, log.tau)
    if any(not np.isfinite(a).all() for a in arrays):
        return Status.NAN_DETECTED
    lims = np.asarray(joint_limits, dtype=np.float64)
    if np.abs(log.qd).max(initial=0.0) > limits.velocity_ceiling:
        return Status.DIVERGED
    if log.q.size and ((log.q < lims[:, 0] - limits.position_margin).any()
                       or (log.q > lims[:, 1] + limits.position_margin).any()):
        return Status.DIVERGED
    if log.settled.size and not log.settled.any():
        return Status.TIMEOUT
    return Status.OK


def _simulate_numpy(model: RobotModel, waypoints, gains: PidGains, gravity) -> TrajectoryLog:
    n = model.template.n_joints
    state = JointState(np.zeros(n), np.zeros(n))
    e_int = np.zeros(n)
    ref = state.q.copy()
    frames_q, frames_qd, frames_tau = [], [], []
    settled = np.zeros(len(waypoints), dtype=bool)
    nan_hit = False

    _, ki, _, int_lim = gains.arrays(n)
    with np.errstate(divide="ignore"):
        int_cap = np.where(ki > 0, int_lim / np.where(ki > 0, ki, 1.0), np.inf)
    ref_step = gains.ref_rate * DT
    for w_index, wp in enumerate(waypoints):
        target = np.asarray(wp.q_target, dtype=np.float64)
        max_steps = int(round(wp.max_time / DT))
        settle_needed = int(round(wp.settle_time / DT))
        settle_count = 0
        e_int[:] = 0.0
        for _ in range(max_steps):
            if ref_step > 0:
                ref = ref + np.clip(target - ref, -ref_step, ref_step)
            else:
                ref = target
            e = ref - state.q
            e_int = np.clip(e_int + e * DT, -int_cap, int_cap)
            jz = dynamics.end_effector_jz(model, state.q)
            u = gravity_aware_pid(gains, e, e_int, -state.qd, jz)
            frames_q.append(state.q.copy())
            frames_qd.append(state.qd.copy())
            frames_tau.append(u)
            try:
                state = dynamics.step(model, state, u, DT, gravity)
            except DynidError:
                nan_hit = True
                break
            if not (np.isfinite(state.q).all() and np.isfinite(state.qd).all()):
                nan_hit = True
                break
            if np.abs(target - state.q).max() < wp.hold_tolerance:
                settle_count += 1
                if settle_count >= settle_needed:
                    settled[w_index] = True
                    break
            else:
                settle_count = 0
        if nan_hit:
            break

    t = np.arange(len(frames_q)) * DT
    log = TrajectoryLog(robot_id=model.id, dt=DT, t=t,
                        q=np.array(frames_q).reshape(-1, n), qd=np.array(frames_qd).reshape(-1, n),
                        tau=np.array(frames_tau).reshape(-1, n),
                        waypoints=list(waypoints), settled=settled,
                        status=Status.NAN_DETECTED if nan_hit else Status.OK)
    if not nan_hit:
        log.status = detect_failure(log, model.template.joint_limits)
    return log


def simulate_trajectory(model: RobotModel, waypoints, gains: PidGains = PidGains(),
                        gravity=GRAVITY, backend: str = "auto") -> TrajectoryLog:
    """Run one waypoint-following episode at 1 kHz and grade the log.

    ``backend`` selects the compiled kernel ("numba"), the pure-numpy
    reference ("numpy"), or the kernel with numpy fallback ("auto"). Both
    paths implement identical arithmetic.
    """
    gains.validate()
    if not waypoints:
        raise ContractError("at least one waypoint is required")
    if backend not in ("auto", "numba", "numpy"):
        raise ContractError(f"unknown backend {backend!r}")
    if backend in ("auto", "numba"):
        try:
            from . import _fastsim
            return _fastsim.simulate_episode(model, waypoints, gains, gravity)
        except ImportError:
            if backend == "numba":
                raise
    return _simulate_numpy(model, waypoints, gains, gravity)


def replay_torques(model: RobotModel, log: TrajectoryLog, gains: PidGains) -> np.ndarray:
    """Recompute the torque sequence from the logged states alone.

    Applies the controller's documented recurrence (integral accumulation
    with anti-windup, waypoint advancement on settle/timeout) to the logged
    q/qd streams; equality with ``log.tau`` is the replay-determinism
    contract.
    """
    n = model.template.n_joints
    e_int = np.zeros(n)
    _, ki, _, int_lim = gains.arrays(n)
    with np.errstate(divide="ignore"):
        int_cap = np.where(ki > 0, int_lim / np.where(ki > 0, ki, 1.0), np.inf)
    out = np.empty_like(log.tau)
    w_index = 0
    steps_this_wp = 0
    settle_count = 0
    ref = log.q[0].copy() if log.n_frames else np.zeros(n)
    ref_step = gains.ref_rate * DT
    for k in range(log.n_frames):
        wp = log.waypoints[w_index]
        target = np.asarray(wp.q_target)
        q, qd = log.q[k], log.qd[k]
        if ref_step > 0:
            ref = ref + np.clip(target - ref, -ref_step, ref_step)
        else:
            ref = target
        e = ref - q
        e_int = np.clip(e_int + e * DT, -int_cap, int_cap)
        jz = dynamics.end_effector_jz(model, q)
        out[k] = gravity_aware_pid(gains, e, e_int, -qd, jz)
        steps_this_wp += 1
        if k + 1 < log.n_frames:
            advance = steps_this_wp >= int(round(wp.max_time / DT))
            if np.abs(target - log.q[k + 1]).max() < wp.hold_tolerance:
                settle_count += 1
                if settle_count >= int(round(wp.settle_time / DT)):
                    advance = True
            else:
                settle_count = 0
            if advance and w_index + 1 < len(log.waypoints):
                w_index += 1
                steps_this_wp = 0
                settle_count = 0
                e_int[:] = 0.0
    return out


# --------------------------------------------------------------------------
# Binary columnar log persistence

_LOG_MAGIC = b"DTRJ"
_LOG_VERSION = 1
_STATUS_CODES = {Status.OK: 0, Status.NAN_DETECTED: 1, Status.DIVERGED: 2, Status.TIMEOUT: 3}
_CODE_STATUS = {v: k for k, v in _STATUS_CODES.items()}


def save_log(path, log: TrajectoryLog) -> None:
    """Columnar binary format: fixed header, then contiguous t/q/qd/tau blocks."""
    n = log.q.shape[1] if log.q.ndim == 2 else 0
    w = len(log.waypoints)
    with open(path, "wb") as fh:
        fh.write(_LOG_MAGIC)
        fh.write(struct.pack("<IqdQQBB6x", _LOG_VERSION, log.robot_id, log.dt,
                             log.n_frames, w, _STATUS_CODES[log.status], n))
        for wp in log.waypoints:
            fh.write(struct.pack("<3d", wp.hold_tolerance, wp.settle_time, wp.max_time))
            np.asarray(wp.q_target, dtype="<f8").tofile(fh)
        np.asarray(log.settled, dtype="u1").tofile(fh)
        for column in (log.t, log.q, log.qd, log.tau):
            np.ascontiguousarray(column, dtype="<f8").tofile(fh)


def load_log(path) -> TrajectoryLog:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _LOG_MAGIC:
            raise ContractError(f"{path}: not a trajectory log file")
        header_fmt = "<IqdQQBB6x"
        version, robot_id, dt, n_frames, n_wp, status_code, n = struct.unpack(
            header_fmt, fh.read(struct.calcsize(header_fmt)))
        if version != _LOG_VERSION:
            raise ContractError(f"{path}: unsupported log version {version}")
        waypoints = []
        for _ in range(n_wp):
            tol, settle, max_time = struct.unpack("<3d", fh.read(24))
            target = np.fromfile(fh, dtype="<f8", count=n)
            waypoints.append(Waypoint(q_target=target, hold_tolerance=tol,
                                      settle_time=settle, max_time=max_time))
        settled = np.fromfile(fh, dtype="u1", count=n_wp).astype(bool)
        t = np.fromfile(fh, dtype="<f8", count=n_frames)
        q = np.fromfile(fh, dtype="<f8", count=n_frames * n).reshape(n_frames, n)
        qd = np.fromfile(fh, dtype="<f8", count=n_frames * n).reshape(n_frames, n)
        tau = np.fromfile(fh, dtype="<f8", count=n_frames * n).reshape(n_frames, n)
    return TrajectoryLog(robot_id=robot_id, dt=dt, t=t, q=q, qd=qd, tau=tau,
                         waypoints=waypoints, settled=settled, status=_CODE_STATUS[status_code])

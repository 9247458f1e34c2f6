"""Compiled episode/rollout kernels.

Mirrors the arithmetic of :mod:`dynid.dynamics` and the episode loop of
:mod:`dynid.control` in nopython numba, keeping 1 kHz simulation of many
robots tractable. The numpy implementations remain the reference; agreement
between the two paths is covered by tests.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from . import control as _control
from .dynamics import FRICTION_SMOOTHING, _model_arrays


@njit(cache=True, inline="always")
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@njit(cache=True, inline="always")
def _mat_vec(R, v, out):
    for i in range(3):
        out[i] = R[i, 0] * v[0] + R[i, 1] * v[1] + R[i, 2] * v[2]


@njit(cache=True, inline="always")
def _mat_t_vec(R, v, out):
    for i in range(3):
        out[i] = R[0, i] * v[0] + R[1, i] * v[1] + R[2, i] * v[2]


@njit(cache=True)
def _joint_rels(axes, rfix, q, rels):
    n = q.shape[0]
    rot = np.empty((3, 3))
    for i in range(n):
        x, y, z = axes[i, 0], axes[i, 1], axes[i, 2]
        c = np.cos(q[i])
        s = np.sin(q[i])
        t = 1.0 - c
        rot[0, 0] = t * x * x + c
        rot[0, 1] = t * x * y - s * z
        rot[0, 2] = t * x * z + s * y
        rot[1, 0] = t * x * y + s * z
        rot[1, 1] = t * y * y + c
        rot[1, 2] = t * y * z - s * x
        rot[2, 0] = t * x * z - s * y
        rot[2, 1] = t * y * z + s * x
        rot[2, 2] = t * z * z + c
        for r in range(3):
            for cc in range(3):
                acc = 0.0
                for k in range(3):
                    acc += rfix[i, r, k] * rot[k, cc]
                rels[i, r, cc] = acc


@njit(cache=True)
def _world_frames(rels, pfix, Rw, pw):
    n = rels.shape[0]
    for r in range(3):
        for c in range(3):
            Rw[0, r, c] = 1.0 if r == c else 0.0
        pw[0, r] = 0.0
    tmp = np.empty(3)
    for i in range(n):
        _mat_vec(Rw[i], pfix[i], tmp)
        for r in range(3):
            pw[i + 1, r] = pw[i, r] + tmp[r]
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += Rw[i, r, k] * rels[i, k, c]
                Rw[i + 1, r, c] = acc


@njit(cache=True)
def _ee_jz(axes, rels, pfix, lengths, Rw, pw, jz):
    n = rels.shape[0]
    _world_frames(rels, pfix, Rw, pw)
    tip = np.empty(3)
    z = np.empty(3)
    for r in range(3):
        tip[r] = pw[n, r] + Rw[n, r, 2] * lengths[n - 1]
    for j in range(n):
        _mat_vec(Rw[j + 1], axes[j], z)
        dx = tip[0] - pw[j + 1, 0]
        dy = tip[1] - pw[j + 1, 1]
        jz[j] = z[0] * dy - z[1] * dx


@njit(cache=True)
def _rnea(axes, rels, pfix, mass, com, idiag, qd, qdd, g, tau):
    n = axes.shape[0]
    w = np.zeros(3)
    v = np.zeros(3)
    a_w = np.zeros(3)
    a_v = np.empty(3)
    for r in range(3):
        a_v[r] = -g[r]
    f_ang = np.empty((n, 3))
    f_lin = np.empty((n, 3))
    tmp = np.empty(3)
    tmp2 = np.empty(3)
    h_lin = np.empty(3)
    h_ang = np.empty(3)
    ia_lin = np.empty(3)
    ia_ang = np.empty(3)
    for i in range(n):
        # transform parent velocity/acceleration into frame i
        _cross(w, pfix[i], tmp)
        for r in range(3):
            tmp[r] += v[r]
        _mat_t_vec(rels[i], tmp, tmp2)
        v_new = np.empty(3)
        for r in range(3):
            v_new[r] = tmp2[r]
        _mat_t_vec(rels[i], w, tmp)
        w_new = np.empty(3)
        for r in range(3):
            w_new[r] = tmp[r] + axes[i, r] * qd[i]

        _cross(a_w, pfix[i], tmp)
        for r in range(3):
            tmp[r] += a_v[r]
        _mat_t_vec(rels[i], tmp, tmp2)
        av_new = np.empty(3)
        for r in range(3):
            av_new[r] = tmp2[r]
        _mat_t_vec(rels[i], a_w, tmp)
        aw_new = np.empty(3)
        for r in range(3):
            aw_new[r] = tmp[r] + axes[i, r] * qdd[i]
        _cross(w_new, axes[i], tmp)
        for r in range(3):
            aw_new[r] += tmp[r] * qd[i]
        _cross(v_new, axes[i], tmp)
        for r in range(3):
            av_new[r] += tmp[r] * qd[i]
        w, v, a_w, a_v = w_new, v_new, aw_new, av_new

        c = com[i]
        _cross(w, c, tmp)
        for r in range(3):
            h_lin[r] = mass[i] * (v[r] + tmp[r])
        _cross(c, h_lin, tmp)
        for r in range(3):
            h_ang[r] = idiag[i, r] * w[r] + tmp[r]
        _cross(a_w, c, tmp)
        for r in range(3):
            ia_lin[r] = mass[i] * (a_v[r] + tmp[r])
        _cross(c, ia_lin, tmp)
        for r in range(3):
            ia_ang[r] = idiag[i, r] * a_w[r] + tmp[r]
        _cross(w, h_lin, tmp)
        for r in range(3):
            f_lin[i, r] = ia_lin[r] + tmp[r]
        _cross(w, h_ang, tmp)
        _cross(v, h_lin, tmp2)
        for r in range(3):
            f_ang[i, r] = ia_ang[r] + tmp[r] + tmp2[r]

    g_ang = np.zeros(3)
    g_lin = np.zeros(3)
    tot_ang = np.empty(3)
    tot_lin = np.empty(3)
    for i in range(n - 1, -1, -1):
        for r in range(3):
            tot_ang[r] = f_ang[i, r] + g_ang[r]
            tot_lin[r] = f_lin[i, r] + g_lin[r]
        tau[i] = axes[i, 0] * tot_ang[0] + axes[i, 1] * tot_ang[1] + axes[i, 2] * tot_ang[2]
        _mat_vec(rels[i], tot_lin, g_lin)
        _mat_vec(rels[i], tot_ang, tmp)
        _cross(pfix[i], g_lin, tmp2)
        for r in range(3):
            g_ang[r] = tmp[r] + tmp2[r]
    return tau


@njit(cache=True)
def _crba(axes, rels, pfix, mass, com, idiag, M):
    n = axes.shape[0]
    cm = np.empty(n)
    cc = np.empty((n, 3))
    cI = np.zeros((n, 3, 3))
    for i in range(n):
        cm[i] = mass[i]
        for r in range(3):
            cc[i, r] = com[i, r]
            cI[i, r, r] = idiag[i, r]

    tmp = np.empty(3)
    RI = np.empty((3, 3))
    I_p = np.empty((3, 3))
    for i in range(n - 1, 0, -1):
        # child composite expressed in the parent frame
        _mat_vec(rels[i], cc[i], tmp)
        c_px = tmp[0] + pfix[i, 0]
        c_py = tmp[1] + pfix[i, 1]
        c_pz = tmp[2] + pfix[i, 2]
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += rels[i, r, k] * cI[i, k, c]
                RI[r, c] = acc
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for k in range(3):
                    acc += RI[r, k] * rels[i, c, k]
                I_p[r, c] = acc
        m_p = cm[i]
        m_new = cm[i - 1] + m_p
        cnx = (cm[i - 1] * cc[i - 1, 0] + m_p * c_px) / m_new
        cny = (cm[i - 1] * cc[i - 1, 1] + m_p * c_py) / m_new
        cnz = (cm[i - 1] * cc[i - 1, 2] + m_p * c_pz) / m_new
        d0x = cc[i - 1, 0] - cnx
        d0y = cc[i - 1, 1] - cny
        d0z = cc[i - 1, 2] - cnz
        d1x = c_px - cnx
        d1y = c_py - cny
        d1z = c_pz - cnz
        d0sq = d0x * d0x + d0y * d0y + d0z * d0z
        d1sq = d1x * d1x + d1y * d1y + d1z * d1z
        for r in range(3):
            dr0 = d0x if r == 0 else (d0y if r == 1 else d0z)
            dr1 = d1x if r == 0 else (d1y if r == 1 else d1z)
            for c in range(3):
                dc0 = d0x if c == 0 else (d0y if c == 1 else d0z)
                dc1 = d1x if c == 0 else (d1y if c == 1 else d1z)
                val = cI[i - 1, r, c] + I_p[r, c] \
                    + cm[i - 1] * ((d0sq if r == c else 0.0) - dr0 * dc0) \
                    + m_p * ((d1sq if r == c else 0.0) - dr1 * dc1)
                cI[i - 1, r, c] = val
        cm[i - 1] = m_new
        cc[i - 1, 0] = cnx
        cc[i - 1, 1] = cny
        cc[i - 1, 2] = cnz

    f_lin = np.empty(3)
    f_ang = np.empty(3)
    tmp2 = np.empty(3)
    for i in range(n):
        s = axes[i]
        _cross(s, cc[i], tmp)
        for r in range(3):
            f_lin[r] = cm[i] * tmp[r]
        for r in range(3):
            acc = 0.0
            for k in range(3):
                acc += cI[i, r, k] * s[k]
            tmp2[r] = acc
        _cross(cc[i], f_lin, tmp)
        for r in range(3):
            f_ang[r] = tmp2[r] + tmp[r]
        M[i, i] = s[0] * f_ang[0] + s[1] * f_ang[1] + s[2] * f_ang[2]
        j = i
        while j > 0:
            _mat_vec(rels[j], f_lin, tmp)
            for r in range(3):
                f_lin[r] = tmp[r]
            _mat_vec(rels[j], f_ang, tmp)
            _cross(pfix[j], f_lin, tmp2)
            for r in range(3):
                f_ang[r] = tmp[r] + tmp2[r]
            j -= 1
            M[i, j] = axes[j, 0] * f_ang[0] + axes[j, 1] * f_ang[1] + axes[j, 2] * f_ang[2]
            M[j, i] = M[i, j]


@njit(cache=True)
def _chol_solve(M, rhs, out):
    """Cholesky solve of an SPD system; returns False on factorization failure."""
    n = M.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        acc = M[j, j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if acc <= 0.0 or not np.isfinite(acc):
            return False
        L[j, j] = np.sqrt(acc)
        for i in range(j + 1, n):
            acc = M[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
    for i in range(n):
        acc = rhs[i]
        for k in range(i):
            acc -= L[i, k] * out[k]
        out[i] = acc / L[i, i]
    for i in range(n - 1, -1, -1):
        acc = out[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * out[k]
        out[i] = acc / L[i, i]
    return True


@njit(cache=True)
def _implicit_step(axes, rels, pfix, mass, com, idiag, mu_c, mu_v, qd, tau, g,
                   eps, dt, M, A, bias, qd_new):
    """Velocity update with implicitly integrated friction; False if not SPD."""
    n = axes.shape[0]
    zeros = np.zeros(n)
    _rnea(axes, rels, pfix, mass, com, idiag, qd, zeros, g, bias)
    _crba(axes, rels, pfix, mass, com, idiag, M)
    b = np.empty(n)
    for i in range(n):
        th = np.tanh(qd[i] / eps)
        stiff = mu_c[i] * (1.0 - th * th) / eps
        for j in range(n):
            A[i, j] = M[i, j]
        A[i, i] = M[i, i] + dt * (mu_v[i] + stiff)
        acc = 0.0
        for j in range(n):
            acc += M[i, j] * qd[j]
        b[i] = acc + dt * (tau[i] - bias[i] - mu_c[i] * th) + dt * stiff * qd[i]
    return _chol_solve(A, b, qd_new)


@njit(cache=True)
def _episode(axes, rfix, pfix, lo, hi, lengths, mass, com, idiag, mu_c, mu_v, g,
             targets, tols, settle_steps, max_steps,
             kp, ki, kd, kg, int_cap, torque_limit, ref_rate, signed_jz, dt, eps,
             q_hist, qd_hist, tau_hist, settled):
    n = axes.shape[0]
    n_wp = targets.shape[0]
    q = np.zeros(n)
    qd = np.zeros(n)
    e_int = np.zeros(n)
    ref = np.zeros(n)
    ref_step = ref_rate * dt
    rels = np.empty((n, 3, 3))
    Rw = np.empty((n + 1, 3, 3))
    pw = np.empty((n + 1, 3))
    jz = np.empty(n)
    M = np.empty((n, n))
    A = np.empty((n, n))
    bias = np.empty(n)
    qd_new = np.empty(n)
    u = np.empty(n)
    k = 0
    nan_hit = False
    for w_index in range(n_wp):
        for i in range(n):
            e_int[i] = 0.0
        settle_count = 0
        for _ in range(max_steps[w_index]):
            _joint_rels(axes, rfix, q, rels)
            _ee_jz(axes, rels, pfix, lengths, Rw, pw, jz)
            for i in range(n):
                if ref_step > 0:
                    d_ref = targets[w_index, i] - ref[i]
                    if d_ref > ref_step:
                        d_ref = ref_step
                    elif d_ref < -ref_step:
                        d_ref = -ref_step
                    ref[i] = ref[i] + d_ref
                else:
                    ref[i] = targets[w_index, i]
                e = ref[i] - q[i]
                acc = e_int[i] + e * dt
                if acc > int_cap[i]:
                    acc = int_cap[i]
                elif acc < -int_cap[i]:
                    acc = -int_cap[i]
                e_int[i] = acc
                jzi = jz[i] if signed_jz else abs(jz[i])
                ui = (kp[i] + kg * jzi) * e + ki[i] * e_int[i] + kd[i] * (-qd[i])
                if ui > torque_limit:
                    ui = torque_limit
                elif ui < -torque_limit:
                    ui = -torque_limit
                u[i] = ui
                q_hist[k, i] = q[i]
                qd_hist[k, i] = qd[i]
                tau_hist[k, i] = ui
            ok = _implicit_step(axes, rels, pfix, mass, com, idiag, mu_c, mu_v,
                                qd, u, g, eps, dt, M, A, bias, qd_new)
            k += 1
            if not ok:
                nan_hit = True
                break
            finite = True
            for i in range(n):
                qd[i] = qd_new[i]
                q[i] += dt * qd[i]
                if q[i] < lo[i]:
                    q[i] = lo[i]
                    qd[i] = 0.0
                elif q[i] > hi[i]:
                    q[i] = hi[i]
                    qd[i] = 0.0
                if not np.isfinite(q[i]) or not np.isfinite(qd[i]):
                    finite = False
            if not finite:
                nan_hit = True
                break
            err = 0.0
            for i in range(n):
                a = abs(targets[w_index, i] - q[i])
                if a > err:
                    err = a
            if err < tols[w_index]:
                settle_count += 1
                if settle_count >= settle_steps[w_index]:
                    settled[w_index] = True
                    break
            else:
                settle_count = 0
        if nan_hit:
            break
    return k, nan_hit


@njit(cache=True)
def _passive_rollout(axes, rfix, pfix, lo, hi, mass, com, idiag, mu_c, mu_v, g,
                     q0, qd0, dt, steps, eps, energies):
    """Unforced rollout; returns final state and per-step total energy."""
    n = axes.shape[0]
    q = q0.copy()
    qd = qd0.copy()
    rels = np.empty((n, 3, 3))
    Rw = np.empty((n + 1, 3, 3))
    pw = np.empty((n + 1, 3))
    M = np.empty((n, n))
    A = np.empty((n, n))
    bias = np.empty(n)
    qd_new = np.empty(n)
    tau = np.zeros(n)
    com_w = np.empty(3)
    for s in range(steps + 1):
        _joint_rels(axes, rfix, q, rels)
        _crba(axes, rels, pfix, mass, com, idiag, M)
        ke = 0.0
        for i in range(n):
            for j in range(n):
                ke += 0.5 * qd[i] * M[i, j] * qd[j]
        _world_frames(rels, pfix, Rw, pw)
        pe = 0.0
        for i in range(n):
            _mat_vec(Rw[i + 1], com[i], com_w)
            for r in range(3):
                com_w[r] += pw[i + 1, r]
            pe -= mass[i] * (g[0] * com_w[0] + g[1] * com_w[1] + g[2] * com_w[2])
        energies[s] = ke + pe
        if s == steps:
            break
        ok = _implicit_step(axes, rels, pfix, mass, com, idiag, mu_c, mu_v,
                            qd, tau, g, eps, dt, M, A, bias, qd_new)
        if not ok:
            return q, qd, False
        for i in range(n):
            qd[i] = qd_new[i]
            q[i] += dt * qd[i]
            if q[i] < lo[i]:
                q[i] = lo[i]
                qd[i] = 0.0
            elif q[i] > hi[i]:
                q[i] = hi[i]
                qd[i] = 0.0
    return q, qd, True


def _gain_arrays(gains, n):
    kp, ki, kd, int_lim = gains.arrays(n)
    with np.errstate(divide="ignore"):
        int_cap = np.where(ki > 0, int_lim / np.where(ki > 0, ki, 1.0), np.inf)
    return kp, ki, kd, float(gains.kg), int_cap, float(gains.torque_limit)


def simulate_episode(model, waypoints, gains, gravity):
    """Run the compiled episode kernel and wrap the result as a TrajectoryLog."""
    n, axes, rfix, pfix, lo, hi, lengths, mass, com, inertia, mu_c, mu_v = _model_arrays(model)
    idiag = np.stack([np.diag(inertia[i]) for i in range(n)])
    targets = np.stack([np.asarray(w.q_target, dtype=np.float64) for w in waypoints])
    tols = np.array([w.hold_tolerance for w in waypoints])
    settle_steps = np.array([int(round(w.settle_time / _control.DT)) for w in waypoints], dtype=np.int64)
    max_steps = np.array([int(round(w.max_time / _control.DT)) for w in waypoints], dtype=np.int64)
    kp, ki, kd, kg, int_cap, torque_limit = _gain_arrays(gains, n)
    total = int(max_steps.sum())
    q_hist = np.empty((total, n))
    qd_hist = np.empty((total, n))
    tau_hist = np.empty((total, n))
    settled = np.zeros(len(waypoints), dtype=np.bool_)
    g = np.asarray(gravity, dtype=np.float64)
    k, nan_hit = _episode(axes, rfix, pfix, lo, hi, lengths, mass, com, idiag, mu_c, mu_v, g,
                          targets, tols, settle_steps, max_steps,
                          kp, ki, kd, kg, int_cap, torque_limit, float(gains.ref_rate),
                          bool(gains.signed_jz), _control.DT, FRICTION_SMOOTHING,
                          q_hist, qd_hist, tau_hist, settled)
    log = _control.TrajectoryLog(
        robot_id=model.id, dt=_control.DT, t=np.arange(k) * _control.DT,
        q=q_hist[:k].copy(), qd=qd_hist[:k].copy(), tau=tau_hist[:k].copy(),
        waypoints=list(waypoints), settled=settled,
        status=_control.Status.NAN_DETECTED if nan_hit else _control.Status.OK)
    if not nan_hit:
        log.status = _control.detect_failure(log, model.template.joint_limits)
    return log


def passive_rollout(model, q0, qd0, dt, steps, gravity):
    """Unforced fixed-step rollout returning (final_state_q, final_state_qd, energies)."""
    n, axes, rfix, pfix, lo, hi, lengths, mass, com, inertia, mu_c, mu_v = _model_arrays(model)
    idiag = np.stack([np.diag(inertia[i]) for i in range(n)])
    energies = np.empty(steps + 1)
    g = np.asarray(gravity, dtype=np.float64)
    q, qd, ok = _passive_rollout(axes, rfix, pfix, lo, hi, mass, com, idiag, mu_c, mu_v, g,
                                 np.asarray(q0, dtype=np.float64), np.asarray(qd0, dtype=np.float64),
                                 dt, steps, FRICTION_SMOOTHING, energies)
    return q, qd, energies, ok

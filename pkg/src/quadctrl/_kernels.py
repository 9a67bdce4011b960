"""Hot numeric kernels: leg kinematics, floating-base dynamics, plant stepping.

All kernels are JIT-compiled with numba by default. Setting the environment
variable ``QUADCTRL_PURE_NUMPY=1`` before import selects a pure numpy/Python
fallback path with identical semantics (much slower; mainly for debugging and
for the kernel benchmark, see ``quadctrl.kernel_bench``).

Conventions used throughout:
  - legs ordered FL=0, FR=1, HL=2, HR=3; 3 joints per leg (abduction about x,
    hip flexion about y, knee about y), 12 actuated joints total.
  - generalized velocity u = [omega_base(3), v_base(3), qd(12)], base twist
    expressed in the base (body) frame.
  - R is the base-to-world rotation; "base frame" vectors use base coordinates.
  - bodies indexed 0=base, then per leg l: 1+3l (abd link), 2+3l (thigh),
    3+3l (shank).

Small 3x3 matrix products are written out as loops: BLAS dispatch overhead
dominates at these sizes.
"""

import os

import numpy as np

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

USE_NUMBA = _HAS_NUMBA and os.environ.get("QUADCTRL_PURE_NUMPY", "0") != "1"


def _jit(fn):
    if USE_NUMBA:
        return njit(cache=True, fastmath=False)(fn)
    return fn


@_jit
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@_jit
def _mv(A, x):
    out = np.empty(3)
    for i in range(3):
        out[i] = A[i, 0] * x[0] + A[i, 1] * x[1] + A[i, 2] * x[2]
    return out


@_jit
def _mtv(A, x):
    out = np.empty(3)
    for i in range(3):
        out[i] = A[0, i] * x[0] + A[1, i] * x[1] + A[2, i] * x[2]
    return out


@_jit
def _mm(A, B):
    out = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]
    return out


@_jit
def rot_x(q):
    c = np.cos(q)
    s = np.sin(q)
    R = np.zeros((3, 3))
    R[0, 0] = 1.0
    R[1, 1] = c
    R[1, 2] = -s
    R[2, 1] = s
    R[2, 2] = c
    return R


@_jit
def rot_y(q):
    c = np.cos(q)
    s = np.sin(q)
    R = np.zeros((3, 3))
    R[0, 0] = c
    R[0, 2] = s
    R[1, 1] = 1.0
    R[2, 0] = -s
    R[2, 2] = c
    return R


@_jit
def rot_z(q):
    c = np.cos(q)
    s = np.sin(q)
    R = np.zeros((3, 3))
    R[0, 0] = c
    R[0, 1] = -s
    R[1, 0] = s
    R[1, 1] = c
    R[2, 2] = 1.0
    return R


@_jit
def so3_exp(w):
    """Rodrigues formula, exact for any rotation vector w."""
    th = np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    R = np.eye(3)
    if th < 1e-12:
        R[0, 1] = -w[2]
        R[0, 2] = w[1]
        R[1, 0] = w[2]
        R[1, 2] = -w[0]
        R[2, 0] = -w[1]
        R[2, 1] = w[0]
        return R
    k = w / th
    c = np.cos(th)
    s = np.sin(th)
    K = np.zeros((3, 3))
    K[0, 1] = -k[2]
    K[0, 2] = k[1]
    K[1, 0] = k[2]
    K[1, 2] = -k[0]
    K[2, 0] = -k[1]
    K[2, 1] = k[0]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


@_jit
def so3_log(R):
    """Rotation vector of R (inverse of so3_exp)."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    c = 0.5 * (tr - 1.0)
    if c > 1.0:
        c = 1.0
    if c < -1.0:
        c = -1.0
    th = np.arccos(c)
    w = np.empty(3)
    w[0] = R[2, 1] - R[1, 2]
    w[1] = R[0, 2] - R[2, 0]
    w[2] = R[1, 0] - R[0, 1]
    if th < 1e-9:
        return 0.5 * w
    s = np.sin(th)
    if np.abs(s) < 1e-9:
        # angle near pi: extract axis from the symmetric part
        A = 0.5 * (R + np.eye(3))
        ax = np.empty(3)
        ax[0] = np.sqrt(max(A[0, 0], 0.0))
        ax[1] = np.sqrt(max(A[1, 1], 0.0))
        ax[2] = np.sqrt(max(A[2, 2], 0.0))
        # fix signs using the off-diagonals
        if ax[0] >= ax[1] and ax[0] >= ax[2]:
            if A[0, 1] < 0:
                ax[1] = -ax[1]
            if A[0, 2] < 0:
                ax[2] = -ax[2]
        elif ax[1] >= ax[2]:
            if A[0, 1] < 0:
                ax[0] = -ax[0]
            if A[1, 2] < 0:
                ax[2] = -ax[2]
        else:
            if A[0, 2] < 0:
                ax[0] = -ax[0]
            if A[1, 2] < 0:
                ax[1] = -ax[1]
        n = np.sqrt(ax[0] ** 2 + ax[1] ** 2 + ax[2] ** 2)
        return ax / n * th
    return w * (0.5 * th / s)


@_jit
def leg_fk(hip_pos, abd_off, knee_off, foot_off, leg, q3):
    """Foot position of one leg in the base frame."""
    R1 = rot_x(q3[0])
    p1 = hip_pos[leg]
    R2 = _mm(R1, rot_y(q3[1]))
    p2 = p1 + _mv(R1, abd_off[leg])
    R3 = _mm(R2, rot_y(q3[2]))
    p3 = p2 + _mv(R2, knee_off[leg])
    return p3 + _mv(R3, foot_off[leg])


@_jit
def leg_jacobian(hip_pos, abd_off, knee_off, foot_off, leg, q3):
    """3x3 Jacobian d(foot)/d(q_leg) in the base frame."""
    R1 = rot_x(q3[0])
    p1 = hip_pos[leg]
    R2 = _mm(R1, rot_y(q3[1]))
    p2 = p1 + _mv(R1, abd_off[leg])
    R3 = _mm(R2, rot_y(q3[2]))
    p3 = p2 + _mv(R2, knee_off[leg])
    foot = p3 + _mv(R3, foot_off[leg])

    yhat = np.zeros(3)
    yhat[1] = 1.0
    ax0 = np.zeros(3)
    ax0[0] = 1.0
    ax1 = _mv(R1, yhat)
    ax2 = _mv(R2, yhat)

    J = np.empty((3, 3))
    J[:, 0] = _cross(ax0, foot - p1)
    J[:, 1] = _cross(ax1, foot - p2)
    J[:, 2] = _cross(ax2, foot - p3)
    return J


@_jit
def fk_all(hip_pos, abd_off, knee_off, foot_off, q):
    """Full forward kinematics in the base frame.

    Returns (body_R(13,3,3), body_p(13,3), joint_axis(12,3), joint_org(12,3),
    foot_pos(4,3)).
    """
    body_R = np.empty((13, 3, 3))
    body_p = np.zeros((13, 3))
    body_R[0] = np.eye(3)
    joint_axis = np.empty((12, 3))
    joint_org = np.empty((12, 3))
    foot_pos = np.empty((4, 3))
    yhat = np.zeros(3)
    yhat[1] = 1.0
    for leg in range(4):
        R1 = rot_x(q[3 * leg])
        p1 = hip_pos[leg]
        R2 = _mm(R1, rot_y(q[3 * leg + 1]))
        p2 = p1 + _mv(R1, abd_off[leg])
        R3 = _mm(R2, rot_y(q[3 * leg + 2]))
        p3 = p2 + _mv(R2, knee_off[leg])
        body_R[1 + 3 * leg] = R1
        body_p[1 + 3 * leg] = p1
        body_R[2 + 3 * leg] = R2
        body_p[2 + 3 * leg] = p2
        body_R[3 + 3 * leg] = R3
        body_p[3 + 3 * leg] = p3
        joint_axis[3 * leg, 0] = 1.0
        joint_axis[3 * leg, 1] = 0.0
        joint_axis[3 * leg, 2] = 0.0
        joint_axis[3 * leg + 1] = _mv(R1, yhat)
        joint_axis[3 * leg + 2] = _mv(R2, yhat)
        joint_org[3 * leg] = p1
        joint_org[3 * leg + 1] = p2
        joint_org[3 * leg + 2] = p3
        foot_pos[leg] = p3 + _mv(R3, foot_off[leg])
    return body_R, body_p, joint_axis, joint_org, foot_pos


@_jit
def mass_matrix(hip_pos, abd_off, knee_off, foot_off, link_mass, link_com,
                link_inertia, q):
    """18x18 joint-space inertia matrix for u = [omega_b, v_b, qd].

    Assembled body by body from point-mass and rotational Jacobians; only the
    <=9 generalized coordinates that move a given body are touched.
    """
    body_R, body_p, joint_axis, joint_org, _ = fk_all(
        hip_pos, abd_off, knee_off, foot_off, q)
    H = np.zeros((18, 18))
    Jc = np.zeros((3, 9))
    Jw = np.zeros((3, 9))
    cols = np.zeros(9, dtype=np.int64)
    for b in range(13):
        m = link_mass[b]
        Rb = body_R[b]
        cb = body_p[b] + _mv(Rb, link_com[b])
        Ib = _mm(_mm(Rb, link_inertia[b]), Rb.T.copy())
        for i in range(3):
            for j in range(9):
                Jc[i, j] = 0.0
                Jw[i, j] = 0.0
        for j in range(6):
            cols[j] = j
        # base twist: omega columns 0..2, v columns 3..5
        Jw[0, 0] = 1.0
        Jw[1, 1] = 1.0
        Jw[2, 2] = 1.0
        Jc[0, 1] = cb[2]
        Jc[0, 2] = -cb[1]
        Jc[1, 0] = -cb[2]
        Jc[1, 2] = cb[0]
        Jc[2, 0] = cb[1]
        Jc[2, 1] = -cb[0]
        Jc[0, 3] = 1.0
        Jc[1, 4] = 1.0
        Jc[2, 5] = 1.0
        nc = 6
        if b > 0:
            leg = (b - 1) // 3
            depth = (b - 1) % 3
            for k in range(depth + 1):
                jidx = 3 * leg + k
                a = joint_axis[jidx]
                Jw[:, nc] = a
                Jc[:, nc] = _cross(a, cb - joint_org[jidx])
                cols[nc] = 6 + jidx
                nc += 1
        IJw = np.empty((3, 9))
        for i in range(3):
            for j in range(nc):
                IJw[i, j] = (Ib[i, 0] * Jw[0, j] + Ib[i, 1] * Jw[1, j]
                             + Ib[i, 2] * Jw[2, j])
        for a_ in range(nc):
            ia = cols[a_]
            for b_ in range(a_, nc):
                ib = cols[b_]
                val = m * (Jc[0, a_] * Jc[0, b_] + Jc[1, a_] * Jc[1, b_]
                           + Jc[2, a_] * Jc[2, b_]) \
                    + (Jw[0, a_] * IJw[0, b_] + Jw[1, a_] * IJw[1, b_]
                       + Jw[2, a_] * IJw[2, b_])
                H[ia, ib] += val
                if ia != ib:
                    H[ib, ia] += val
    return H


@_jit
def inverse_dynamics(hip_pos, abd_off, knee_off, foot_off, link_mass,
                     link_com, link_inertia, q, qd, om_b, v_b, udot, g_base,
                     use_gravity):
    """Recursive Newton-Euler: generalized force for motion (q, u, udot).

    g_base is the gravity magnitude vector rotated into the base frame
    (R^T [0,0,g]); passing use_gravity=False drops the gravity terms.
    Returns Q with rows matching u = [omega_b, v_b, qd].
    """
    Q = np.zeros(18)
    w0 = om_b
    dw0 = udot[0:3]
    a0 = udot[3:6] + _cross(om_b, v_b)
    if use_gravity:
        a0 = a0 + g_base

    c0 = link_com[0]
    a_c0 = a0 + _cross(dw0, c0) + _cross(w0, _cross(w0, c0))
    F0 = link_mass[0] * a_c0
    N0 = _mv(link_inertia[0], dw0) + _cross(w0, _mv(link_inertia[0], w0))
    f_base = F0.copy()
    n_base = N0 + _cross(c0, F0)

    yhat = np.zeros(3)
    yhat[1] = 1.0
    xhat = np.zeros(3)
    xhat[0] = 1.0

    for leg in range(4):
        w = np.empty((3, 3))
        dw = np.empty((3, 3))
        ao = np.empty((3, 3))
        Rloc = np.empty((3, 3, 3))
        roff = np.empty((3, 3))
        w_p = w0
        dw_p = dw0
        a_p = a0
        for k in range(3):
            jidx = 3 * leg + k
            qdj = qd[jidx]
            qddj = udot[6 + jidx]
            if k == 0:
                Rl = rot_x(q[jidx])
                s = xhat
                r = hip_pos[leg]
            elif k == 1:
                Rl = rot_y(q[jidx])
                s = yhat
                r = abd_off[leg]
            else:
                Rl = rot_y(q[jidx])
                s = yhat
                r = knee_off[leg]
            Rloc[k] = Rl
            roff[k] = r
            wp_l = _mtv(Rl, w_p)
            w[k] = wp_l + s * qdj
            dw[k] = _mtv(Rl, dw_p) + s * qddj + _cross(wp_l, s * qdj)
            ao[k] = _mtv(Rl, a_p + _cross(dw_p, r)
                         + _cross(w_p, _cross(w_p, r)))
            w_p = w[k]
            dw_p = dw[k]
            a_p = ao[k]
        f_child = np.zeros(3)
        n_child = np.zeros(3)
        for k in range(2, -1, -1):
            b = 1 + 3 * leg + k
            cb = link_com[b]
            a_cb = ao[k] + _cross(dw[k], cb) + _cross(w[k], _cross(w[k], cb))
            F = link_mass[b] * a_cb
            N = _mv(link_inertia[b], dw[k]) \
                + _cross(w[k], _mv(link_inertia[b], w[k]))
            f = F + f_child
            n = N + _cross(cb, F) + n_child
            if k == 0:
                Q[6 + 3 * leg + k] = n[0]  # abduction axis = x
            else:
                Q[6 + 3 * leg + k] = n[1]  # flexion/knee axis = y
            if k > 0:
                f_child = _mv(Rloc[k], f)
                n_child = _mv(Rloc[k], n) + _cross(roff[k], f_child)
            else:
                fb = _mv(Rloc[0], f)
                f_base += fb
                n_base += _mv(Rloc[0], n) + _cross(roff[0], fb)
    Q[0:3] = n_base
    Q[3:6] = f_base
    return Q


@_jit
def bias_forces(hip_pos, abd_off, knee_off, foot_off, link_mass, link_com,
                link_inertia, q, qd, om_b, v_b, g_base):
    """Coriolis/centrifugal/gravity vector h(q, u)."""
    udot = np.zeros(18)
    return inverse_dynamics(hip_pos, abd_off, knee_off, foot_off, link_mass,
                            link_com, link_inertia, q, qd, om_b, v_b, udot,
                            g_base, True)


@_jit
def foot_velocities(hip_pos, abd_off, knee_off, foot_off, q, qd, om_b, v_b):
    """Inertial foot velocities expressed in base coordinates, (4,3)."""
    _, _, joint_axis, joint_org, foot_pos = fk_all(
        hip_pos, abd_off, knee_off, foot_off, q)
    out = np.empty((4, 3))
    for leg in range(4):
        v = v_b + _cross(om_b, foot_pos[leg])
        for k in range(3):
            jidx = 3 * leg + k
            v = v + _cross(joint_axis[jidx],
                           foot_pos[leg] - joint_org[jidx]) * qd[jidx]
        out[leg] = v
    return out


@_jit
def foot_bias_accelerations(hip_pos, abd_off, knee_off, foot_off, q, qd,
                            om_b, v_b):
    """Jdot*u terms: inertial foot accelerations at udot=0, base coords, (4,3)."""
    yhat = np.zeros(3)
    yhat[1] = 1.0
    xhat = np.zeros(3)
    xhat[0] = 1.0
    out = np.empty((4, 3))
    a0 = _cross(om_b, v_b)
    for leg in range(4):
        w_p = om_b
        dw_p = np.zeros(3)
        a_p = a0
        R_acc = np.eye(3)
        for k in range(3):
            jidx = 3 * leg + k
            qdj = qd[jidx]
            if k == 0:
                Rl = rot_x(q[jidx])
                s = xhat
                r = hip_pos[leg]
            elif k == 1:
                Rl = rot_y(q[jidx])
                s = yhat
                r = abd_off[leg]
            else:
                Rl = rot_y(q[jidx])
                s = yhat
                r = knee_off[leg]
            wp_l = _mtv(Rl, w_p)
            w_k = wp_l + s * qdj
            dw_k = _mtv(Rl, dw_p) + _cross(wp_l, s * qdj)
            a_k = _mtv(Rl, a_p + _cross(dw_p, r)
                       + _cross(w_p, _cross(w_p, r)))
            w_p = w_k
            dw_p = dw_k
            a_p = a_k
            R_acc = _mm(R_acc, Rl)
        fo = foot_off[leg]
        a_f = a_p + _cross(dw_p, fo) + _cross(w_p, _cross(w_p, fo))
        out[leg] = _mv(R_acc, a_f)
    return out


@_jit
def terrain_height_normal(grid, x0, y0, dx, x, y):
    """Bilinear height and outward unit normal of the height field at (x, y)."""
    nx = grid.shape[1]
    ny = grid.shape[0]
    fx = (x - x0) / dx
    fy = (y - y0) / dx
    if fx < 0.0:
        fx = 0.0
    if fy < 0.0:
        fy = 0.0
    if fx > nx - 1.001:
        fx = nx - 1.001
    if fy > ny - 1.001:
        fy = ny - 1.001
    ix = int(fx)
    iy = int(fy)
    tx = fx - ix
    ty = fy - iy
    z00 = grid[iy, ix]
    z10 = grid[iy, ix + 1]
    z01 = grid[iy + 1, ix]
    z11 = grid[iy + 1, ix + 1]
    z = (z00 * (1 - tx) * (1 - ty) + z10 * tx * (1 - ty)
         + z01 * (1 - tx) * ty + z11 * tx * ty)
    dzdx = ((z10 - z00) * (1 - ty) + (z11 - z01) * ty) / dx
    dzdy = ((z01 - z00) * (1 - tx) + (z11 - z10) * tx) / dx
    n = np.empty(3)
    n[0] = -dzdx
    n[1] = -dzdy
    n[2] = 1.0
    return z, n / np.sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2])


@_jit
def contact_force(p_w, v_w, grid, x0, y0, dx, mu, k_n, c_n, v_slip):
    """Penalty normal + regularized Coulomb friction force on one foot (world)."""
    z, n = terrain_height_normal(grid, x0, y0, dx, p_w[0], p_w[1])
    pen = (z - p_w[2]) * n[2]  # penetration measured along the normal
    F = np.zeros(3)
    if pen <= 0.0:
        return F, False
    v_n = v_w[0] * n[0] + v_w[1] * n[1] + v_w[2] * n[2]
    fn = k_n * pen - c_n * v_n
    # damping may reduce but never reverse or more than double the spring force
    if fn < 0.0:
        fn = 0.0
    if fn > 2.0 * k_n * pen:
        fn = 2.0 * k_n * pen
    vt = v_w - v_n * n
    vt_mag = np.sqrt(vt[0] * vt[0] + vt[1] * vt[1] + vt[2] * vt[2])
    scale = vt_mag / v_slip
    if scale > 1.0:
        scale = 1.0
    if vt_mag > 1e-12:
        F = fn * n - mu * fn * scale * (vt / vt_mag)
    else:
        F = fn * n
    return F, True


@_jit
def plant_substeps(hip_pos, abd_off, knee_off, foot_off, link_mass, link_com,
                   link_inertia, g, R, p_w, u, q, tau, grid, x0, y0, dx, mu,
                   k_n, c_n, v_slip, b_joint, dt, n_sub):
    """Advance the full rigid-body plant by n_sub semi-implicit Euler substeps.

    Mutates R, p_w, u, q in place. Returns (contact_F(4,3) world,
    contact_flag(4,), udot(18,), ok flag). Torques tau are held constant.
    """
    contact_F = np.zeros((4, 3))
    contact_F_avg = np.zeros((4, 3))
    contact_flag = np.zeros(4, dtype=np.bool_)
    udot = np.zeros(18)
    ok = True
    ghat = np.zeros(3)
    ghat[2] = g
    for _ in range(n_sub):
        om_b = u[0:3].copy()
        v_b = u[3:6].copy()
        qd = u[6:18].copy()
        _, _, joint_axis, joint_org, foot_pos = fk_all(
            hip_pos, abd_off, knee_off, foot_off, q)
        fvel = foot_velocities(hip_pos, abd_off, knee_off, foot_off, q, qd,
                               om_b, v_b)
        Q = np.zeros(18)
        for j in range(12):
            Q[6 + j] = tau[j] - b_joint * qd[j]
        for leg in range(4):
            pw = p_w + _mv(R, foot_pos[leg])
            vw = _mv(R, fvel[leg])
            F_w, flag = contact_force(pw, vw, grid, x0, y0, dx, mu, k_n, c_n,
                                      v_slip)
            contact_F[leg] = F_w
            contact_F_avg[leg] += F_w / n_sub
            contact_flag[leg] = flag
            if flag:
                F_b = _mtv(R, F_w)
                Q[0:3] += _cross(foot_pos[leg], F_b)
                Q[3:6] += F_b
                for k in range(3):
                    jidx = 3 * leg + k
                    arm = _cross(joint_axis[jidx],
                                 foot_pos[leg] - joint_org[jidx])
                    Q[6 + jidx] += (arm[0] * F_b[0] + arm[1] * F_b[1]
                                    + arm[2] * F_b[2])
        g_base = _mtv(R, ghat)
        h = bias_forces(hip_pos, abd_off, knee_off, foot_off, link_mass,
                        link_com, link_inertia, q, qd, om_b, v_b, g_base)
        H = mass_matrix(hip_pos, abd_off, knee_off, foot_off, link_mass,
                        link_com, link_inertia, q)
        udot = np.linalg.solve(H, Q - h)
        # semi-implicit: velocities first, then positions with new velocities
        for i in range(18):
            u[i] += dt * udot[i]
            if not np.isfinite(u[i]) or np.abs(u[i]) > 1e4:
                ok = False
        if not ok:
            break
        Rstep = so3_exp(u[0:3] * dt)
        Rn = _mm(R, Rstep)
        for i in range(3):
            for j in range(3):
                R[i, j] = Rn[i, j]
        p_step = _mv(R, u[3:6] * dt)
        for i in range(3):
            p_w[i] += p_step[i]
        for j in range(12):
            q[j] += dt * u[6 + j]
    return contact_F_avg, contact_flag, udot, ok


@_jit
def reorthonormalize(R):
    """Gram-Schmidt cleanup of a near-orthonormal rotation matrix."""
    x = R[:, 0].copy()
    x = x / np.sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2])
    y = R[:, 1] - (R[0, 1] * x[0] + R[1, 1] * x[1] + R[2, 1] * x[2]) * x
    y = y / np.sqrt(y[0] * y[0] + y[1] * y[1] + y[2] * y[2])
    z = _cross(x, y)
    out = np.empty((3, 3))
    out[:, 0] = x
    out[:, 1] = y
    out[:, 2] = z
    return out

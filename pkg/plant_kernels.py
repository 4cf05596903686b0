"""
Compiled scalar kernels for the plant, the source tracker and the inner current loops.

The kernels take plain floats and float64 arrays so numba can compile them. The
dataclass-facing functions in ``microgrid_plant`` and ``controllers`` unpack their
arguments and call these, and the simulator advances a whole control period per
call through ``advance``, so both paths run the same arithmetic.

Plant constants travel as one float64 vector indexed by the slot numbers below
(see ``PlantParams.kernel_constants``). Inner-loop gains travel as a 3x3 table,
one row per branch (battery, ultracap, OVD) with columns kp, ki, anti-windup.
"""

import math

import numpy as np
from numba import njit

from pi_loop import pi_update

# plant constant slots
V_NOMINAL = 0
V_SOURCE = 1
C_BUS = 2
L_SOURCE = 3
L_BATTERY = 4
L_ULTRACAP = 5
L_OVD = 6
V_FLOOR = 7
C_EQUIV = 8
R_BATTERY = 9
Q_MAX = 10
C_ULTRACAP = 11
V_RATED = 12
R_ULTRACAP = 13
R_OVD = 14
R_BALLAST = 15
D_MAX = 16
R_OPEN = 17
P_MIN = 18
V_RUNAWAY = 19
SOURCE_KP = 20
SOURCE_KI = 21
SOURCE_ANTI_WINDUP = 22
PLANT_SLOTS = 23

# inner gain table
BATTERY_ROW = 0
ULTRACAP_ROW = 1
OVD_ROW = 2
KP_COL = 0
KI_COL = 1
ANTI_WINDUP_COL = 2

# step status
OK = 0
NON_FINITE = 1
COLLAPSED = 2
RUNAWAY = 3

# duties below this bus voltage use it instead
V_FLOOR_FOR_DUTY = 1e-6


@njit(cache=True)
def clamp(x, lo, hi):
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


@njit(cache=True)
def load_resistance(p_load, v_bus, p_min, r_open):
    resistance = v_bus * v_bus / max(p_load, p_min)
    return min(resistance, r_open)


@njit(cache=True)
def derivatives(v, i_s, i_b, i_u, i_o, q, v_uc, d_s, d_b, d_u, d_o, r_load, c):
    # source and OVD branches conduct in one direction only
    i_s_on = i_s if i_s > 0.0 else 0.0
    i_o_on = i_o if i_o > 0.0 else 0.0

    di_s = (c[V_SOURCE] - (1.0 - d_s) * v) / c[L_SOURCE]
    if i_s <= 0.0 and di_s < 0.0:
        di_s = 0.0
    di_b = (c[V_FLOOR] + q / c[C_EQUIV] - i_b * c[R_BATTERY] - (1.0 - d_b) * v) / c[L_BATTERY]
    di_u = (v_uc - i_u * c[R_ULTRACAP] - (1.0 - d_u) * v) / c[L_ULTRACAP]
    di_o = (d_o * v - c[R_OVD] * i_o) / c[L_OVD]
    if i_o <= 0.0 and di_o < 0.0:
        di_o = 0.0

    dq = -i_b
    if (q <= 0.0 and dq < 0.0) or (q >= c[Q_MAX] and dq > 0.0):
        dq = 0.0
    dv_uc = -i_u / c[C_ULTRACAP]
    if (v_uc <= 0.0 and dv_uc < 0.0) or (v_uc >= c[V_RATED] and dv_uc > 0.0):
        dv_uc = 0.0

    i_net = (
        (1.0 - d_s) * i_s_on
        + (1.0 - d_b) * i_b
        + (1.0 - d_u) * i_u
        - d_o * i_o_on
        - v / r_load
        - v / c[R_BALLAST]
    )
    return i_net / c[C_BUS], di_s, di_b, di_u, di_o, dq, dv_uc


@njit(cache=True)
def rk4(v, i_s, i_b, i_u, i_o, q, v_uc, d_s, d_b, d_u, d_o, r_load, dt, c):
    half = 0.5 * dt
    k1 = derivatives(v, i_s, i_b, i_u, i_o, q, v_uc, d_s, d_b, d_u, d_o, r_load, c)
    k2 = derivatives(
        v + half * k1[0], i_s + half * k1[1], i_b + half * k1[2], i_u + half * k1[3],
        i_o + half * k1[4], q + half * k1[5], v_uc + half * k1[6],
        d_s, d_b, d_u, d_o, r_load, c,
    )
    k3 = derivatives(
        v + half * k2[0], i_s + half * k2[1], i_b + half * k2[2], i_u + half * k2[3],
        i_o + half * k2[4], q + half * k2[5], v_uc + half * k2[6],
        d_s, d_b, d_u, d_o, r_load, c,
    )
    k4 = derivatives(
        v + dt * k3[0], i_s + dt * k3[1], i_b + dt * k3[2], i_u + dt * k3[3],
        i_o + dt * k3[4], q + dt * k3[5], v_uc + dt * k3[6],
        d_s, d_b, d_u, d_o, r_load, c,
    )
    sixth = dt / 6.0
    return (
        v + sixth * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        i_s + sixth * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        i_b + sixth * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        i_u + sixth * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
        i_o + sixth * (k1[4] + 2.0 * k2[4] + 2.0 * k3[4] + k4[4]),
        q + sixth * (k1[5] + 2.0 * k2[5] + 2.0 * k3[5] + k4[5]),
        v_uc + sixth * (k1[6] + 2.0 * k2[6] + 2.0 * k3[6] + k4[6]),
    )


@njit(cache=True)
def settle(v, i_s, i_b, i_u, i_o, q, v_uc, c):
    """Divergence status plus the state with the storage and diode clamps applied."""
    if not (math.isfinite(v) and math.isfinite(i_s) and math.isfinite(i_b) and math.isfinite(i_u)
            and math.isfinite(i_o) and math.isfinite(q) and math.isfinite(v_uc)):
        return NON_FINITE, v, i_s, i_b, i_u, i_o, q, v_uc
    if v <= 0.0:
        return COLLAPSED, v, i_s, i_b, i_u, i_o, q, v_uc
    if v > c[V_RUNAWAY]:
        return RUNAWAY, v, i_s, i_b, i_u, i_o, q, v_uc

    if i_s < 0.0:
        i_s = 0.0
    if i_o < 0.0:
        i_o = 0.0
    if q <= 0.0:
        q = 0.0
        if i_b > 0.0:
            i_b = 0.0
    elif q >= c[Q_MAX]:
        q = c[Q_MAX]
        if i_b < 0.0:
            i_b = 0.0
    if v_uc <= 0.0:
        v_uc = 0.0
        if i_u > 0.0:
            i_u = 0.0
    elif v_uc >= c[V_RATED]:
        v_uc = c[V_RATED]
        if i_u < 0.0:
            i_u = 0.0
    return OK, v, i_s, i_b, i_u, i_o, q, v_uc


@njit(cache=True)
def step_plant(v, i_s, i_b, i_u, i_o, q, v_uc, d_s, d_b, d_u, d_o, p_load, dt, c):
    r_load = load_resistance(p_load, v, c[P_MIN], c[R_OPEN])
    v, i_s, i_b, i_u, i_o, q, v_uc = rk4(v, i_s, i_b, i_u, i_o, q, v_uc, d_s, d_b, d_u, d_o, r_load, dt, c)
    return settle(v, i_s, i_b, i_u, i_o, q, v_uc, c)


@njit(cache=True)
def tracking_duty(integral, kp, ki, anti_windup, error, feedforward, d_max, dt):
    """Feedforward duty plus a PI correction whose limits keep the sum inside [0, d_max]."""
    correction, integral = pi_update(integral, kp, ki, -feedforward, d_max - feedforward, anti_windup, error, dt)
    return clamp(feedforward + correction, 0.0, d_max), integral, correction


@njit(cache=True)
def source_duty(v_bus, i_s, p_target, integral, dt, c):
    v_bus = v_bus if v_bus > V_FLOOR_FOR_DUTY else V_FLOOR_FOR_DUTY
    feedforward = 1.0 - c[V_SOURCE] / v_bus
    delivered = c[V_SOURCE] * i_s
    return tracking_duty(
        integral, c[SOURCE_KP], c[SOURCE_KI], c[SOURCE_ANTI_WINDUP] > 0.5,
        p_target - delivered, feedforward, c[D_MAX], dt,
    )


@njit(cache=True)
def inner_duties(v_bus, i_b, i_u, i_o, q, v_uc, ref_b, ref_u, ref_o, int_b, int_u, int_o, gains, dt, c):
    """Battery, UC and OVD duties with their new integrals and PI outputs."""
    v_bus = v_bus if v_bus > V_FLOOR_FOR_DUTY else V_FLOOR_FOR_DUTY
    d_max = c[D_MAX]
    d_b, int_b, out_b = tracking_duty(
        int_b, gains[BATTERY_ROW, KP_COL], gains[BATTERY_ROW, KI_COL], gains[BATTERY_ROW, ANTI_WINDUP_COL] > 0.5,
        ref_b - i_b, 1.0 - (c[V_FLOOR] + q / c[C_EQUIV]) / v_bus, d_max, dt,
    )
    d_u, int_u, out_u = tracking_duty(
        int_u, gains[ULTRACAP_ROW, KP_COL], gains[ULTRACAP_ROW, KI_COL], gains[ULTRACAP_ROW, ANTI_WINDUP_COL] > 0.5,
        ref_u - i_u, 1.0 - v_uc / v_bus, d_max, dt,
    )
    d_o, int_o, out_o = tracking_duty(
        int_o, gains[OVD_ROW, KP_COL], gains[OVD_ROW, KI_COL], gains[OVD_ROW, ANTI_WINDUP_COL] > 0.5,
        ref_o - i_o, min(c[R_OVD] * ref_o / v_bus, d_max), d_max, dt,
    )
    return d_b, d_u, d_o, int_b, int_u, int_o, out_b, out_u, out_o


@njit(cache=True)
def advance(y, integrals, refs, k, k_stop, n_steps, dt, log_every, p_source, p_load, gains, c, rows, row):
    """
    Run integration steps ``k .. k_stop - 1`` with the branch references held.

    ``y`` holds (v_bus, i_s, i_b, i_u, i_o, q, v_uc) and ``integrals`` the battery,
    UC, OVD and source PI integrals; both are updated in place. A sample is written
    to ``rows`` on every ``log_every``-th step, and step ``n_steps`` is logged but
    not integrated. Returns (status, next k, next row); on divergence ``y`` holds the
    rejected raw state.
    """
    while k < k_stop:
        v = y[0]
        d_b, d_u, d_o, int_b, int_u, int_o, out_b, out_u, out_o = inner_duties(
            v, y[2], y[3], y[4], y[5], y[6], refs[0], refs[1], refs[2],
            integrals[0], integrals[1], integrals[2], gains, dt, c,
        )
        d_s, int_s, out_s = source_duty(v, y[1], p_source[k], integrals[3], dt, c)
        integrals[0] = int_b
        integrals[1] = int_u
        integrals[2] = int_o
        integrals[3] = int_s

        if k % log_every == 0:
            r_load = load_resistance(p_load[k], v, c[P_MIN], c[R_OPEN])
            rows[row, 0] = k * dt
            rows[row, 1] = v
            rows[row, 2] = y[2]
            rows[row, 3] = y[3]
            rows[row, 4] = y[4]
            rows[row, 5] = c[V_SOURCE] * y[1]
            rows[row, 6] = v * v / r_load
            rows[row, 7] = y[5] / c[Q_MAX]
            rows[row, 8] = y[6] / c[V_RATED]
            rows[row, 9] = d_b
            rows[row, 10] = d_u
            rows[row, 11] = d_o
            rows[row, 12] = refs[0]
            rows[row, 13] = refs[1]
            rows[row, 14] = refs[2]
            row += 1
        if k == n_steps:
            return OK, k + 1, row

        status, v, i_s, i_b, i_u, i_o, q, v_uc = step_plant(
            y[0], y[1], y[2], y[3], y[4], y[5], y[6], d_s, d_b, d_u, d_o, p_load[k], dt, c,
        )
        y[0] = v
        y[1] = i_s
        y[2] = i_b
        y[3] = i_u
        y[4] = i_o
        y[5] = q
        y[6] = v_uc
        k += 1
        if status != OK:
            return status, k, row
    return OK, k, row


def gain_table(battery, ultracap, ovd) -> np.ndarray:
    """3x3 kp/ki/anti-windup table from three PiGains."""
    return np.array(
        [[g.kp, g.ki, 1.0 if g.anti_windup else 0.0] for g in (battery, ultracap, ovd)],
        dtype=np.float64,
    )

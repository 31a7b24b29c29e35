"""Numba kernels for the causal feedback-loop integration.

The loop is strictly sequential (the force at step k depends on the
measurement history up to k), so the hot path lives here as jitted scalar
loops.  ``integrate_loop`` and ``feedback_from_record`` must apply exactly
the same chain arithmetic; any edit to the force block below has to be made
in both.
"""

import math

import numpy as np
from numba import njit

FB_OFF = 0
FB_IDEAL_VISCOUS = 1
FB_REALISTIC_CHAIN = 2


@njit(cache=True, nogil=True)
def integrate_loop(phi, bd, w, noise_meas,
                   fb_mode, gain, sign,
                   mass, gamma, omega,
                   b0, b1, b2, a1, a2,
                   theta, amp, delay_samples, dt, x_lim,
                   x_out, v_out, y_out, f_out):
    n = noise_meas.shape[0]
    p00, p01, p10, p11 = phi[0, 0], phi[0, 1], phi[1, 0], phi[1, 1]
    bd0, bd1 = bd[0], bd[1]

    xk = 0.0
    vk = 0.0

    # biquad states: velocity channel (input: central difference of y) and
    # displacement channel (input: y)
    vx1 = vx2 = vy1 = vy2 = 0.0
    xx1 = xx2 = xy1 = xy2 = 0.0
    y_m1 = 0.0   # y_{k-1}
    y_m2 = 0.0   # y_{k-2}
    xhat_prev = 0.0

    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    inv_2dt = 1.0 / (2.0 * dt)

    buf_len = delay_samples if delay_samples > 0 else 1
    buf = np.zeros(buf_len)
    idx = 0
    filled = 0

    for k in range(n):
        yk = xk + noise_meas[k]

        force = 0.0
        if fb_mode == FB_IDEAL_VISCOUS:
            cd = (yk - y_m2) * inv_2dt
            vhat = b0 * cd + b1 * vx1 + b2 * vx2 - a1 * vy1 - a2 * vy2
            vx2 = vx1
            vx1 = cd
            vy2 = vy1
            vy1 = vhat
            xhat = b0 * yk + b1 * xx1 + b2 * xx2 - a1 * xy1 - a2 * xy2
            xx2 = xx1
            xx1 = yk
            xy2 = xy1
            xy1 = xhat
            force = sign * mass * gamma * gain * amp * (
                cos_t * vhat - omega * sin_t * xhat_prev)
            xhat_prev = xhat
        elif fb_mode == FB_REALISTIC_CHAIN:
            bp = b0 * yk + b1 * xx1 + b2 * xx2 - a1 * xy1 - a2 * xy2
            xx2 = xx1
            xx1 = yk
            xy2 = xy1
            xy1 = bp
            if delay_samples > 0:
                delayed = buf[idx] if filled >= delay_samples else 0.0
                buf[idx] = bp
                idx += 1
                if idx == buf_len:
                    idx = 0
                if filled < delay_samples:
                    filled += 1
            else:
                delayed = bp
            force = sign * gain * delayed

        y_m2 = y_m1
        y_m1 = yk

        x_out[k] = xk
        v_out[k] = vk
        y_out[k] = yk
        f_out[k] = force

        u = force / mass
        x_new = p00 * xk + p01 * vk + bd0 * u + w[k, 0]
        v_new = p10 * xk + p11 * vk + bd1 * u + w[k, 1]
        xk = x_new
        vk = v_new

        if abs(xk) > x_lim:
            return False
    return True


@njit(cache=True, nogil=True)
def feedback_from_record(y, fb_mode, gain, sign,
                         mass, gamma, omega,
                         b0, b1, b2, a1, a2,
                         theta, amp, delay_samples, dt, f_out):
    n = y.shape[0]
    vx1 = vx2 = vy1 = vy2 = 0.0
    xx1 = xx2 = xy1 = xy2 = 0.0
    y_m1 = 0.0
    y_m2 = 0.0
    xhat_prev = 0.0

    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    inv_2dt = 1.0 / (2.0 * dt)

    buf_len = delay_samples if delay_samples > 0 else 1
    buf = np.zeros(buf_len)
    idx = 0
    filled = 0

    for k in range(n):
        yk = y[k]
        force = 0.0
        if fb_mode == FB_IDEAL_VISCOUS:
            cd = (yk - y_m2) * inv_2dt
            vhat = b0 * cd + b1 * vx1 + b2 * vx2 - a1 * vy1 - a2 * vy2
            vx2 = vx1
            vx1 = cd
            vy2 = vy1
            vy1 = vhat
            xhat = b0 * yk + b1 * xx1 + b2 * xx2 - a1 * xy1 - a2 * xy2
            xx2 = xx1
            xx1 = yk
            xy2 = xy1
            xy1 = xhat
            force = sign * mass * gamma * gain * amp * (
                cos_t * vhat - omega * sin_t * xhat_prev)
            xhat_prev = xhat
        elif fb_mode == FB_REALISTIC_CHAIN:
            bp = b0 * yk + b1 * xx1 + b2 * xx2 - a1 * xy1 - a2 * xy2
            xx2 = xx1
            xx1 = yk
            xy2 = xy1
            xy1 = bp
            if delay_samples > 0:
                delayed = buf[idx] if filled >= delay_samples else 0.0
                buf[idx] = bp
                idx += 1
                if idx == buf_len:
                    idx = 0
                if filled < delay_samples:
                    filled += 1
            else:
                delayed = bp
            force = sign * gain * delayed

        y_m2 = y_m1
        y_m1 = yk
        f_out[k] = force

"""Compiled Dormand-Prince 5(4) integrator for the (h, hc) thinning system.

Everything here works on plain floats and arrays so it can be jitted; the
typed wrappers live in :mod:`tearfit.model`.
"""

import math

import numba
import numpy as np

KIND_O = 0
KIND_F = 1
KIND_D = 2

STATUS_OK = 0
STATUS_H_MIN = 1
STATUS_THICKENING = 2
STATUS_BRIGHTENING = 3
STATUS_UNDERFLOW = 4

# Dormand & Prince (1980) tableau
C2, C3, C4, C5 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0
A21 = 1.0 / 5.0
A31, A32 = 3.0 / 40.0, 9.0 / 40.0
A41, A42, A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
A51, A52, A53, A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
A61, A62, A63, A64, A65 = (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0,
                           49.0 / 176.0, -5103.0 / 18656.0)
B1, B3, B4, B5, B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
E1, E3, E4, E5, E6, E7 = (71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0,
                          -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0)


@numba.njit(cache=True)
def strain(kind, a, b1, b2, t):
    if kind == KIND_F:
        return a
    if kind == KIND_D:
        return b1 * math.exp(-b2 * t)
    return 0.0


@numba.njit(cache=True)
def deriv(kind, a, b1, b2, v, P_c, t, h, m):
    g = strain(kind, a, b1, b2, t)
    return -g * h + P_c * (m / h - 1.0) - v, -g * m


@numba.njit(cache=True)
def intensity_slope_sign(h, m, dh, dm, phi, f0):
    # d/dt of (1 - exp(-phi h f)) / (1 + f^2) with f = f0 m / h; the positive
    # normalisation constant is dropped since only the sign is used.
    f = f0 * m / h
    df = f0 * (dm * h - m * dh) / (h * h)
    u = phi * f0 * m
    du = phi * f0 * dm
    num = math.exp(-u) * du * (1.0 + f * f) + math.expm1(-u) * 2.0 * f * df
    return num


@numba.njit(cache=True)
def integrate(kind, a, b1, b2, v, P_c, out_t, rtol, atol, h_min,
              delta_sus, monitor, phi, f0, max_step):
    """Integrate from h = m = 1 at t = 0, recording the state at ``out_t``.

    ``out_t`` must be sorted and lie in [0, 1]. When ``monitor`` is set the
    run stops once dh/dt > 0 or dI/dt > 0 has held for ``delta_sus``.

    Returns (H, M, n_filled, status, t_end).
    """
    n = out_t.shape[0]
    H = np.full(n, np.nan)
    M = np.full(n, np.nan)
    t = 0.0
    h = 1.0
    m = 1.0
    k = 0
    while k < n and out_t[k] <= 0.0:
        H[k] = h
        M[k] = m
        k += 1
    t_final = out_t[n - 1] if n > 0 else 0.0

    run_h = -1.0
    run_i = -1.0
    if monitor:
        dh, dm = deriv(kind, a, b1, b2, v, P_c, t, h, m)
        if dh > 0.0:
            run_h = t
        if intensity_slope_sign(h, m, dh, dm, phi, f0) > 0.0:
            run_i = t
        if delta_sus <= 0.0 and (run_h >= 0.0 or run_i >= 0.0):
            return H, M, k, STATUS_THICKENING if run_h >= 0.0 else STATUS_BRIGHTENING, t

    step = min(1e-3, max_step)
    while t < t_final:
        target = out_t[k] if k < n else t_final
        last = False
        dt = step
        if t + 1.01 * dt >= target:
            dt = target - t
            last = True
            if dt < 1e-14:
                t = target
                while k < n and out_t[k] <= t:
                    H[k] = h
                    M[k] = m
                    k += 1
                continue
        if dt < 1e-14:
            return H, M, k, STATUS_UNDERFLOW, t

        k1h, k1m = deriv(kind, a, b1, b2, v, P_c, t, h, m)
        bad = False
        err = 0.0
        hn = h
        mn = m
        k7h = 0.0
        k7m = 0.0
        y2h = h + dt * A21 * k1h
        y2m = m + dt * A21 * k1m
        if y2h <= 0.0:
            bad = True
        else:
            k2h, k2m = deriv(kind, a, b1, b2, v, P_c, t + C2 * dt, y2h, y2m)
            y3h = h + dt * (A31 * k1h + A32 * k2h)
            y3m = m + dt * (A31 * k1m + A32 * k2m)
            if y3h <= 0.0:
                bad = True
            else:
                k3h, k3m = deriv(kind, a, b1, b2, v, P_c, t + C3 * dt, y3h, y3m)
                y4h = h + dt * (A41 * k1h + A42 * k2h + A43 * k3h)
                y4m = m + dt * (A41 * k1m + A42 * k2m + A43 * k3m)
                if y4h <= 0.0:
                    bad = True
                else:
                    k4h, k4m = deriv(kind, a, b1, b2, v, P_c, t + C4 * dt, y4h, y4m)
                    y5h = h + dt * (A51 * k1h + A52 * k2h + A53 * k3h + A54 * k4h)
                    y5m = m + dt * (A51 * k1m + A52 * k2m + A53 * k3m + A54 * k4m)
                    if y5h <= 0.0:
                        bad = True
                    else:
                        k5h, k5m = deriv(kind, a, b1, b2, v, P_c, t + C5 * dt, y5h, y5m)
                        y6h = h + dt * (A61 * k1h + A62 * k2h + A63 * k3h + A64 * k4h + A65 * k5h)
                        y6m = m + dt * (A61 * k1m + A62 * k2m + A63 * k3m + A64 * k4m + A65 * k5m)
                        if y6h <= 0.0:
                            bad = True
                        else:
                            k6h, k6m = deriv(kind, a, b1, b2, v, P_c, t + dt, y6h, y6m)
                            hn = h + dt * (B1 * k1h + B3 * k3h + B4 * k4h + B5 * k5h + B6 * k6h)
                            mn = m + dt * (B1 * k1m + B3 * k3m + B4 * k4m + B5 * k5m + B6 * k6m)
                            if hn <= 0.0:
                                bad = True
                            else:
                                k7h, k7m = deriv(kind, a, b1, b2, v, P_c, t + dt, hn, mn)
                                eh = dt * (E1 * k1h + E3 * k3h + E4 * k4h + E5 * k5h
                                           + E6 * k6h + E7 * k7h)
                                em = dt * (E1 * k1m + E3 * k3m + E4 * k4m + E5 * k5m
                                           + E6 * k6m + E7 * k7m)
                                sh = atol + rtol * max(abs(h), abs(hn))
                                sm = atol + rtol * max(abs(m), abs(mn))
                                err = math.sqrt(0.5 * ((eh / sh) ** 2 + (em / sm) ** 2))
        if bad:
            step = 0.25 * dt
            continue
        if err > 1.0:
            step = dt * max(0.2, 0.9 * err ** -0.2)
            continue

        t_prev = t
        h_prev = h
        t = target if last else t + dt
        h = hn
        m = mn
        if err == 0.0:
            grow = 5.0
        else:
            grow = min(5.0, 0.9 * err ** -0.2)
        # keep the proposed step when the accepted one was shortened to hit an output time
        step = min(max_step, max(step, dt * grow) if last else dt * grow)

        if h < h_min:
            # linear estimate of the crossing time
            t_cross = t_prev + (t - t_prev) * (h_prev - h_min) / (h_prev - h)
            return H, M, k, STATUS_H_MIN, t_cross

        if last and k < n:
            while k < n and out_t[k] <= t:
                H[k] = h
                M[k] = m
                k += 1

        if monitor:
            dh, dm = k7h, k7m
            if dh > 0.0:
                if run_h < 0.0:
                    run_h = t
                if t - run_h >= delta_sus:
                    return H, M, k, STATUS_THICKENING, t
            else:
                run_h = -1.0
            if intensity_slope_sign(h, m, dh, dm, phi, f0) > 0.0:
                if run_i < 0.0:
                    run_i = t
                if t - run_i >= delta_sus:
                    return H, M, k, STATUS_BRIGHTENING, t
            else:
                run_i = -1.0
    return H, M, k, STATUS_OK, t

"""Compiled inner loops shared by the public simulator API and the protocol runner.

Everything here works on packed float arrays (layout: ``params.PACKED_FIELDS``)
and reports failures through integer status codes; the Python layer turns
those into exceptions.
"""
import numpy as np
from numba import njit

from .params import F, IDX, R_GAS

OK = 0
SATURATED = 1
NONFINITE = 2
DOMAIN = 3
REGULATION = 4

# run_segment modes
REST = 0
CC = 1
CV = 2

# run_segment termination reasons
END_TIME = 0
END_VOLTAGE = 1
END_TAPER = 2
END_SATURATED = 3
END_NUMERICAL = 4
END_REGULATION = 5
END_BUFFER = 6

_D_N, _D_P, _K_N, _K_P = IDX["D_n"], IDX["D_p"], IDX["k_n"], IDX["k_p"]
_R_N, _R_P, _EPS_N, _EPS_P = IDX["R_part_n"], IDX["R_part_p"], IDX["eps_n"], IDX["eps_p"]
_L_N, _L_P, _A = IDX["L_n"], IDX["L_p"], IDX["A_cell"]
_CMAX_N, _CMAX_P = IDX["c_max_n"], IDX["c_max_p"]
_R0, _CTH, _HA = IDX["R0"], IDX["C_th"], IDX["hA"]
_EA_D, _EA_K, _CE, _TREF = IDX["Ea_D"], IDX["Ea_k"], IDX["c_e"], IDX["T_ref"]

CV_TOL = 1e-3
CV_MAX_ITER = 50


@njit(cache=True)
def pchip_eval(xb, coef, s):
    n = xb.shape[0]
    lo = 0
    hi = n - 2
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if xb[mid] <= s:
            lo = mid
        else:
            hi = mid - 1
    dx = s - xb[lo]
    return ((coef[0, lo] * dx + coef[1, lo]) * dx + coef[2, lo]) * dx + coef[3, lo]


@njit(cache=True)
def arrhenius(value_ref, ea, T, T_ref):
    return value_ref * np.exp(-(ea / R_GAS) * (1.0 / T - 1.0 / T_ref))


@njit(cache=True)
def exchange_current(k_eff, c_e, c_surf, c_max):
    return F * k_eff * np.sqrt(c_e) * np.sqrt(c_surf) * np.sqrt(c_max - c_surf)


@njit(cache=True)
def overpotential(i_area, j0, T):
    return (2.0 * R_GAS * T / F) * np.arcsinh(i_area / (2.0 * j0))


@njit(cache=True)
def shell_volumes(radius, n):
    """Shell volumes divided by 4*pi, uniform radial spacing."""
    dr = radius / n
    vol = np.empty(n)
    for i in range(n):
        r0 = i * dr
        r1 = (i + 1) * dr
        vol[i] = (r1 ** 3 - r0 ** 3) / 3.0
    return vol


@njit(cache=True)
def diffusion_solve(c, flux, D, dt, radius, out):
    """Backward-Euler finite-volume step; ``flux`` is the outward molar flux at the surface."""
    n = c.shape[0]
    dr = radius / n
    g = D / dr
    sub = np.empty(n)
    diag = np.empty(n)
    sup = np.empty(n)
    rhs = np.empty(n)
    for i in range(n):
        r_in = i * dr
        r_out = (i + 1) * dr
        v = (r_out ** 3 - r_in ** 3) / 3.0
        a_in = g * r_in * r_in
        a_out = g * r_out * r_out if i < n - 1 else 0.0
        sub[i] = -a_in
        sup[i] = -a_out
        diag[i] = v / dt + a_in + a_out
        # solve for the increment so an equilibrium profile stays bit-exact
        rhs[i] = 0.0
        if i > 0:
            rhs[i] -= a_in * (c[i] - c[i - 1])
        if i < n - 1:
            rhs[i] -= a_out * (c[i] - c[i + 1])
    rhs[n - 1] -= radius * radius * flux
    # Thomas algorithm
    for i in range(1, n):
        w = sub[i] / diag[i - 1]
        diag[i] -= w * sup[i - 1]
        rhs[i] -= w * rhs[i - 1]
    out[n - 1] = rhs[n - 1] / diag[n - 1]
    for i in range(n - 2, -1, -1):
        out[i] = (rhs[i] - sup[i] * out[i + 1]) / diag[i]
    for i in range(n):
        out[i] += c[i]
    for i in range(n):
        if not np.isfinite(out[i]):
            return NONFINITE
    return OK


@njit(cache=True)
def surface_concentration(c, flux, D, radius):
    n = c.shape[0]
    return c[n - 1] - flux * (0.5 * radius / n) / D


@njit(cache=True)
def electrode_fluxes(p, I):
    s_n = 3.0 * p[_EPS_N] * p[_L_N] * p[_A] / p[_R_N]
    s_p = 3.0 * p[_EPS_P] * p[_L_P] * p[_A] / p[_R_P]
    return I / (s_n * F), -I / (s_p * F)


@njit(cache=True)
def voltage_kernel(cn, cp, T, I, p, dn, dp, kn, kp, xbn, cfn, xbp, cfp, out):
    """Terminal voltage from particle states; out = [V, ocv, eta_n, eta_p, Q_gen]."""
    jn, jp = electrode_fluxes(p, I)
    csn = surface_concentration(cn, jn, dn, p[_R_N])
    csp = surface_concentration(cp, jp, dp, p[_R_P])
    cmn = p[_CMAX_N]
    cmp_ = p[_CMAX_P]
    if not (csn > 0.0 and csn < cmn and csp > 0.0 and csp < cmp_):
        return SATURATED
    un = pchip_eval(xbn, cfn, csn / cmn)
    up = pchip_eval(xbp, cfp, csp / cmp_)
    j0n = exchange_current(kn, p[_CE], csn, cmn)
    j0p = exchange_current(kp, p[_CE], csp, cmp_)
    a_n = 3.0 * p[_EPS_N] / p[_R_N]
    a_p = 3.0 * p[_EPS_P] / p[_R_P]
    i_n = I / (a_n * p[_L_N] * p[_A])
    i_p = -I / (a_p * p[_L_P] * p[_A])
    eta_n = overpotential(i_n, j0n, T)
    eta_p = overpotential(i_p, j0p, T)
    ocv = up - un
    V = ocv + eta_p - eta_n - I * p[_R0]
    out[0] = V
    out[1] = ocv
    out[2] = eta_n
    out[3] = eta_p
    out[4] = I * (ocv - V)
    if not np.isfinite(V):
        return NONFINITE
    return OK


@njit(cache=True)
def step_kernel(cn, cp, T, I, T_amb, dt, p, xbn, cfn, xbp, cfp, cn_out, cp_out, out):
    """One coupled step; out = [V, ocv, eta_n, eta_p, Q_gen, T_new]."""
    dn = arrhenius(p[_D_N], p[_EA_D], T, p[_TREF])
    dp = arrhenius(p[_D_P], p[_EA_D], T, p[_TREF])
    kn = arrhenius(p[_K_N], p[_EA_K], T, p[_TREF])
    kp = arrhenius(p[_K_P], p[_EA_K], T, p[_TREF])
    jn, jp = electrode_fluxes(p, I)
    st = diffusion_solve(cn, jn, dn, dt, p[_R_N], cn_out)
    if st != OK:
        return st
    st = diffusion_solve(cp, jp, dp, dt, p[_R_P], cp_out)
    if st != OK:
        return st
    st = voltage_kernel(cn_out, cp_out, T, I, p, dn, dp, kn, kp, xbn, cfn, xbp, cfp, out)
    if st != OK:
        return st
    q = out[4]
    t_new = T + dt * (q - p[_HA] * (T - T_amb)) / p[_CTH]
    out[5] = t_new
    if not np.isfinite(t_new):
        return NONFINITE
    return OK


@njit(cache=True)
def run_segment(cn, cp, st, mode, value, v_lim, t_lim, taper, T_amb, dt, p,
                xbn, cfn, xbp, cfp, buf_t, buf_i, buf_v, buf_T):
    """Advance the state in place until the segment terminates.

    ``st`` holds [T, t, throughput_Ah]. For CC ``value`` is the signed current,
    for CV it is the held voltage and ``taper`` the stopping current magnitude;
    the CV current starts from ``buf_i[0]`` on entry. Returns (rows, reason).
    """
    n = cn.shape[0]
    cn_new = np.empty(n)
    cp_new = np.empty(cp.shape[0])
    out = np.empty(6)
    cap = buf_t.shape[0]
    i_prev = buf_i[0]
    elapsed = 0.0
    rows = 0
    while elapsed < t_lim - 1e-9 * dt:
        if rows >= cap:
            return rows, END_BUFFER
        T = st[0]
        if mode == REST:
            I = 0.0
            code = step_kernel(cn, cp, T, I, T_amb, dt, p, xbn, cfn, xbp, cfp, cn_new, cp_new, out)
        elif mode == CC:
            I = value
            code = step_kernel(cn, cp, T, I, T_amb, dt, p, xbn, cfn, xbp, cfp, cn_new, cp_new, out)
        else:
            # secant on current to hold the terminal voltage
            i0 = i_prev
            code = step_kernel(cn, cp, T, i0, T_amb, dt, p, xbn, cfn, xbp, cfp, cn_new, cp_new, out)
            if code != OK:
                return rows, END_SATURATED if code == SATURATED else END_NUMERICAL
            f0 = out[0] - value
            I = i0
            if abs(f0) >= CV_TOL:
                i1 = i0 * 0.95 if i0 != 0.0 else -1e-3
                converged = False
                for _ in range(CV_MAX_ITER):
                    code = step_kernel(cn, cp, T, i1, T_amb, dt, p, xbn, cfn, xbp, cfp, cn_new, cp_new, out)
                    if code != OK:
                        return rows, END_SATURATED if code == SATURATED else END_NUMERICAL
                    f1 = out[0] - value
                    if abs(f1) < CV_TOL:
                        I = i1
                        converged = True
                        break
                    if f1 == f0:
                        break
                    i2 = i1 - f1 * (i1 - i0) / (f1 - f0)
                    if i2 > 0.0:
                        i2 = 0.0
                    i0, f0 = i1, f1
                    i1 = i2
                if not converged:
                    return rows, END_REGULATION
            i_prev = I
        if code == SATURATED:
            return rows, END_SATURATED
        if code != OK:
            return rows, END_NUMERICAL
        for k in range(n):
            cn[k] = cn_new[k]
        for k in range(cp.shape[0]):
            cp[k] = cp_new[k]
        st[0] = out[5]
        st[1] += dt
        st[2] += abs(I) * dt / 3600.0
        elapsed += dt
        buf_t[rows] = st[1]
        buf_i[rows] = I
        buf_v[rows] = out[0]
        buf_T[rows] = out[5]
        rows += 1
        V = out[0]
        if mode == CC:
            if (I > 0.0 and V <= v_lim) or (I < 0.0 and V >= v_lim):
                return rows, END_VOLTAGE
        elif mode == CV:
            if abs(I) <= taper:
                return rows, END_TAPER
    return rows, END_TIME

"""Compiled inner loop of the switched plant.

One call integrates a block of fixed steps whose gate pattern has already
been sampled.  All state lives in small float arrays that are updated in
place, so the Python side can keep ownership between calls.
"""

import numba
import numpy as np

# scalar state slots
I_F, V_C, I_LOAD, T = 0, 1, 2, 3
# audit slots
E_CHEM, E_BATT, E_SW, E_PATH, E_LOAD, E_SRC = 0, 1, 2, 3, 4, 5

OK, TRIP, NONFINITE = 0, 1, 2

# plant parameter slots
P_RDS, P_ZDYN, P_KDYN, P_DVOFF, P_LF, P_C, P_RLOAD, P_LLOAD, P_RPATH, P_TRIP, P_ALPHA = range(11)
N_PARAMS = 11


@numba.njit(cache=True)
def _ocv(socs, volts, n, soc):
    if soc <= socs[0]:
        return volts[0]
    for j in range(1, n):
        if soc <= socs[j]:
            f = (soc - socs[j - 1]) / (socs[j] - socs[j - 1])
            return volts[j - 1] + f * (volts[j] - volts[j - 1])
    return volts[n - 1]


@numba.njit(cache=True)
def _circ_contrib(fr, i_circ, n, out):
    for k in range(n):
        out[k] = 0.0
    for g in range(1, n):
        i = i_circ[g]
        out[g - 1] += (fr[g, 0] + fr[g, 2]) * i
        out[g] -= (fr[g, 0] + fr[g, 1]) * i


@numba.njit(cache=True)
def integrate_block(
    modes,
    fracs,
    weights,
    polarity,
    dt,
    scal,
    i_circ,
    soc,
    sat,
    ocv_s,
    ocv_v,
    ocv_n,
    r_int,
    cap,
    l_dm,
    esr,
    prm,
    audit,
    acc,
    dec,
    step0,
    tr_scal,
    tr_mod,
    tr_grp,
    tr_modes,
    tr_row0,
    diag,
):
    """Advance ``modes.shape[0]`` steps.

    ``fracs[s, g]`` holds the fractions of step ``s`` that group ``g``
    spends in (Parallel, Buck, Boost, Bypass); the circulating loops are
    integrated on these averages so that short transfer windows are not
    quantised to whole steps.  ``modes`` (sampled at mid-step) fixes which
    arcs carry the string current.

    ``acc`` collects block sums: rows 0..n-1 hold per-module (discharge
    current, terminal voltage, discharge power), row n holds per-group
    circulating current, row n+1 per-group inductor flux (L times delta i).
    Returns ``(status, trace_rows_written)``.
    """
    nsteps = modes.shape[0]
    n = modes.shape[1]
    r_ds = prm[P_RDS]
    z_dyn = prm[P_ZDYN]
    k_dyn = prm[P_KDYN]
    dv_off = prm[P_DVOFF]
    l_f = prm[P_LF]
    c_out = prm[P_C]
    r_load = prm[P_RLOAD]
    l_load = prm[P_LLOAD]
    r_path = prm[P_RPATH]
    trip = prm[P_TRIP]
    alpha = prm[P_ALPHA]
    ocv = np.empty(n)
    circ = np.empty(n)
    d = np.empty(n)
    i_start = i_circ.copy()
    rows = 0
    for s in range(nsteps):
        row = modes[s]
        w = weights[s]
        i_f = scal[I_F]
        for k in range(n):
            ocv[k] = _ocv(ocv_s[k], ocv_v[k], ocv_n[k], soc[k])
        fr = fracs[s]
        _circ_contrib(fr, i_circ, n, circ)
        # circulating loops: own resistance implicit, neighbours explicit
        e_sw = 0.0
        for g in range(1, n):
            f_p = fr[g, 0]
            f_bu = fr[g, 1]
            f_bo = fr[g, 2]
            f_by = fr[g, 3]
            if f_p + f_bu + f_bo + f_by == 0.0:
                continue
            lft = g - 1
            rgt = g
            i = i_circ[g]
            r_sw = 4.0 * r_ds + esr[g]
            # neighbour-only discharge currents of the two modules
            dl = polarity * i_f * w[lft] + circ[lft] - (f_p + f_bo) * i
            dr = polarity * i_f * w[rgt] + circ[rgt] + (f_p + f_bu) * i
            vl = ocv[lft] - r_int[lft] * dl
            vr = ocv[rgt] - r_int[rgt] * dr
            drive = f_p * (vl - vr + k_dyn * (soc[lft] - soc[rgt]) - dv_off) - f_bu * vr + f_bo * vl
            rl = (
                f_p * (r_int[lft] + r_int[rgt] + r_sw + z_dyn)
                + f_bu * (r_int[rgt] + r_sw)
                + f_bo * (r_int[lft] + r_sw)
                + f_by * r_sw
            )
            lg = l_dm[g]
            i_new = (i + dt / lg * drive) / (1.0 + dt * rl / lg)
            i_circ[g] = i_new
            e_sw += ((f_p + f_bu + f_bo + f_by) * r_sw + f_p * z_dyn) * i_new * i_new * dt
        _circ_contrib(fr, i_circ, n, circ)
        # output filter fed by the inserted arcs
        v0 = 0.0
        r_str = 0.0
        for k in range(n):
            if w[k] > 0.0:
                v0 += w[k] * (ocv[k] - r_int[k] * circ[k])
                r_str += w[k] * w[k] * r_int[k]
        v0 *= polarity
        i_f_new = (i_f + dt / l_f * (v0 - scal[V_C])) / (1.0 + dt * (r_str + r_path) / l_f)
        v_c_new = scal[V_C] + dt / c_out * (i_f_new - scal[I_LOAD])
        i_l_new = (scal[I_LOAD] + dt / l_load * v_c_new) / (1.0 + dt * r_load / l_load)
        scal[I_F] = i_f_new
        scal[V_C] = v_c_new
        scal[I_LOAD] = i_l_new
        scal[T] = (step0 + s + 1) * dt
        e_chem = 0.0
        e_batt = 0.0
        for k in range(n):
            d[k] = polarity * i_f_new * w[k] + circ[k]
            v_t = ocv[k] - r_int[k] * d[k]
            e_chem += ocv[k] * d[k] * dt
            e_batt += r_int[k] * d[k] * d[k] * dt
            acc[k, 0] += d[k]
            acc[k, 1] += v_t
            acc[k, 2] += v_t * d[k]
            new_soc = soc[k] - d[k] * dt / (3600.0 * cap[k])
            if new_soc < 0.0:
                new_soc = 0.0
                sat[k] = 1.0
            elif new_soc > 1.0:
                new_soc = 1.0
                sat[k] = 1.0
            soc[k] = new_soc
        for g in range(n):
            acc[n, g] += i_circ[g]
        audit[E_CHEM] += e_chem
        audit[E_BATT] += e_batt
        audit[E_SW] += e_sw
        audit[E_PATH] += r_path * i_f_new * i_f_new * dt
        audit[E_LOAD] += r_load * i_l_new * i_l_new * dt
        # Sources outside the battery model (dynamic offset terms).
        src = 0.0
        for g in range(1, n):
            src += fr[g, 0] * (k_dyn * (soc[g - 1] - soc[g]) - dv_off) * i_circ[g] * dt
        audit[E_SRC] += src
        # checks
        for g in range(n):
            if abs(i_circ[g]) > trip:
                diag[0] = scal[T]
                diag[1] = g
                diag[2] = i_circ[g]
                return TRIP, rows
        if not (np.isfinite(i_f_new) and np.isfinite(v_c_new) and np.isfinite(i_l_new)):
            diag[0] = scal[T]
            return NONFINITE, rows
        if (step0 + s + 1) % dec == 0:
            r = tr_row0 + rows
            if r < tr_scal.shape[0]:
                tr_scal[r, 0] = scal[T]
                tr_scal[r, 1] = v_c_new
                tr_scal[r, 2] = i_f_new
                tr_scal[r, 3] = v_c_new * i_l_new
                tr_scal[r, 4] = i_l_new
                for k in range(n):
                    v_t = ocv[k] - r_int[k] * d[k]
                    tr_mod[r, k, 0] = -d[k]
                    tr_mod[r, k, 1] = v_t
                    tr_mod[r, k, 2] = v_t * d[k]
                    tr_mod[r, k, 3] = soc[k]
                for g in range(n):
                    tr_grp[r, g, 0] = i_circ[g]
                    tr_grp[r, g, 1] = alpha * i_f_new + i_circ[g]
                    tr_grp[r, g, 2] = alpha * i_f_new - i_circ[g]
                    tr_modes[r, g] = row[g]
                rows += 1
    for g in range(n):
        acc[n + 1, g] += l_dm[g] * (i_circ[g] - i_start[g])
    return OK, rows

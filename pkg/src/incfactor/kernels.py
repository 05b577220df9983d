"""Numba kernels for the Gibbs sweep hot loop.

The factor graph is flattened into CSR-style int arrays (see
``inference.GraphArrays``).  A variable flip only touches the groundings
containing it, so per-grounding unsatisfied-literal counts and per-factor
satisfied-grounding counts are maintained incrementally; one conditional
costs O(adjacent groundings + adjacent factors).

Randomness comes in as a pre-drawn uniform array (one number per query
variable per sweep, consumed in scan order), so the kernels are pure and
the stream stays portable.
"""

import numpy as np
from numba import njit

G_LINEAR = 0
G_RATIO = 1
G_LOGICAL = 2


@njit(cache=True, inline="always")
def _g_eval(kind, n):
    if kind == G_LINEAR:
        return float(n)
    if kind == G_RATIO:
        return np.log1p(float(n))
    return 1.0 if n > 0 else 0.0


@njit(cache=True)
def init_counts(values, glit_ptr, glit_var, glit_sign, grd_fac, grd_unsat, fac_nsat):
    fac_nsat[:] = 0
    for g in range(grd_unsat.shape[0]):
        u = 0
        for k in range(glit_ptr[g], glit_ptr[g + 1]):
            if values[glit_var[k]] != glit_sign[k]:
                u += 1
        grd_unsat[g] = u
        if u == 0:
            fac_nsat[grd_fac[g]] += 1


@njit(cache=True, inline="always")
def _conditional(v, values, fac_head, fac_wref, fac_g, fac_nsat, weights,
                 grd_fac, grd_unsat, vlit_ptr, vlit_grd, vlit_m0, vlit_m1,
                 vhead_ptr, vhead_fac,
                 cnt_cur, cnt0, cnt1, touched_flag, touched_list):
    """logit = W(v=1) - W(v=0) over factors adjacent to v; returns
    (logit, fetches) and leaves the scratch arrays clean.

    vlit_m0/m1 carry, per (variable, grounding) incidence, the number of
    that variable's literals left unsatisfied when it is 0 resp. 1 (a
    variable may occur several times in one grounding)."""
    cur = values[v]
    n_touched = 0
    for k in range(vlit_ptr[v], vlit_ptr[v + 1]):
        g = vlit_grd[k]
        m0 = vlit_m0[k]
        m1 = vlit_m1[k]
        f = grd_fac[g]
        if not touched_flag[f]:
            touched_flag[f] = True
            touched_list[n_touched] = f
            n_touched += 1
            cnt_cur[f] = 0
            cnt0[f] = 0
            cnt1[f] = 0
        u = grd_unsat[g]
        u_other = u - (m1 if cur == 1 else m0)
        if u == 0:
            cnt_cur[f] += 1
        if u_other + m0 == 0:
            cnt0[f] += 1
        if u_other + m1 == 0:
            cnt1[f] += 1
    logit = 0.0
    fetches = 0
    for i in range(n_touched):
        f = touched_list[i]
        base = fac_nsat[f] - cnt_cur[f]
        n0 = base + cnt0[f]
        n1 = base + cnt1[f]
        h = fac_head[f]
        w = weights[fac_wref[f]]
        kind = fac_g[f]
        if h == v:
            logit += w * (_g_eval(kind, n1) + _g_eval(kind, n0))
        else:
            if h < 0:
                sgn = 1.0
            else:
                sgn = 1.0 if values[h] == 1 else -1.0
            logit += w * sgn * (_g_eval(kind, n1) - _g_eval(kind, n0))
        fetches += 1
    # factors where v is only the head: n does not depend on v
    for k in range(vhead_ptr[v], vhead_ptr[v + 1]):
        f = vhead_fac[k]
        if not touched_flag[f]:
            logit += 2.0 * weights[fac_wref[f]] * _g_eval(fac_g[f], fac_nsat[f])
            fetches += 1
    for i in range(n_touched):
        touched_flag[touched_list[i]] = False
    return logit, fetches


@njit(cache=True, inline="always")
def _flip(v, newv, values, grd_fac, grd_unsat, fac_nsat,
          vlit_ptr, vlit_grd, vlit_m0, vlit_m1):
    for k in range(vlit_ptr[v], vlit_ptr[v + 1]):
        g = vlit_grd[k]
        d = (vlit_m1[k] - vlit_m0[k]) * (1 if newv == 1 else -1)
        if d != 0:
            u = grd_unsat[g]
            grd_unsat[g] = u + d
            if u == 0 and u + d != 0:
                fac_nsat[grd_fac[g]] -= 1
            elif u != 0 and u + d == 0:
                fac_nsat[grd_fac[g]] += 1
    values[v] = newv


@njit(cache=True)
def gibbs_block(values, query_vars, fac_head, fac_wref, fac_g, fac_nsat, weights,
                grd_fac, grd_unsat, vlit_ptr, vlit_grd, vlit_m0, vlit_m1,
                vhead_ptr, vhead_fac, uniforms, n_sweeps,
                counts, trace_positions, trace_out, trace_offset,
                cnt_cur, cnt0, cnt1, touched_flag, touched_list):
    """Run n_sweeps scan-order sweeps; counts[v] accumulates values after
    every sweep; trace_out[t] records the traced variables' values after
    sweep trace_offset + t.  Returns total factor fetches."""
    fetches = 0
    q = query_vars.shape[0]
    ntrace = trace_positions.shape[0]
    for t in range(n_sweeps):
        for j in range(q):
            v = query_vars[j]
            logit, fet = _conditional(
                v, values, fac_head, fac_wref, fac_g, fac_nsat, weights,
                grd_fac, grd_unsat, vlit_ptr, vlit_grd, vlit_m0, vlit_m1,
                vhead_ptr, vhead_fac, cnt_cur, cnt0, cnt1,
                touched_flag, touched_list)
            fetches += fet
            p = 1.0 / (1.0 + np.exp(-logit))
            newv = np.uint8(1) if uniforms[t * q + j] < p else np.uint8(0)
            if newv != values[v]:
                _flip(v, newv, values, grd_fac, grd_unsat, fac_nsat,
                      vlit_ptr, vlit_grd, vlit_m0, vlit_m1)
        for i in range(counts.shape[0]):
            counts[i] += values[i]
        for i in range(ntrace):
            trace_out[trace_offset + t, i] = values[trace_positions[i]]
    return fetches


@njit(cache=True)
def conditional_logit(v, values, fac_head, fac_wref, fac_g, fac_nsat, weights,
                      grd_fac, grd_unsat, vlit_ptr, vlit_grd, vlit_m0, vlit_m1,
                      vhead_ptr, vhead_fac,
                      cnt_cur, cnt0, cnt1, touched_flag, touched_list):
    logit, _ = _conditional(
        v, values, fac_head, fac_wref, fac_g, fac_nsat, weights,
        grd_fac, grd_unsat, vlit_ptr, vlit_grd, vlit_m0, vlit_m1,
        vhead_ptr, vhead_fac, cnt_cur, cnt0, cnt1, touched_flag, touched_list)
    return logit

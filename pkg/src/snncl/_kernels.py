"""Compiled inner loops for the convolutional DLBP engine.

All kernels are serial and visit locations, neurons and spike lists in a
fixed order, so results are bit-reproducible run to run.

Layout conventions shared with :mod:`snncl.conv`:
  location index  loc = row_out * n_cols_out + col_out   (row-major)
  patch index     j   = patch_row * kernel_cols + patch_col
  spike lists     (loc, idx, value) triples held in preallocated arrays

Decaying state (currents, potentials, traces) is flushed to exactly zero
below TINY.  Otherwise it drifts into the subnormal range after a few
thousand quiet steps, where floating-point arithmetic is two orders of
magnitude slower.
"""

import numpy as np
from numba import njit


TINY = 1e-150


@njit(cache=True, inline="always")
def _ftz(x):
    return 0.0 if -TINY < x < TINY else x


@njit(cache=True)
def _loc_range(p, k, d, n_out):
    # output positions whose window [o*d, o*d + k) covers pixel p
    lo = p - k + 1
    if lo < 0:
        lo = 0
    else:
        lo = (lo + d - 1) // d
    hi = p // d
    if hi > n_out - 1:
        hi = n_out - 1
    return lo, hi


@njit(cache=True)
def input_drive(ev_r, ev_c, ev_v, phi, gain, kx, ky, d, n_rows_out, n_cols_out,
                b_in, err_in, touched, use_err):
    """Scatter one step of input pixels into coding drive and error input.

    b_in[loc, :] += gain * v * phi[j, :]  and  err_in[loc, j] -= gain * v.
    touched[loc] is set to 1 for every location that received input.
    """
    m = phi.shape[1]
    for e in range(ev_r.shape[0]):
        r = ev_r[e]
        c = ev_c[e]
        v = gain * ev_v[e]
        r0, r1 = _loc_range(r, kx, d, n_rows_out)
        c0, c1 = _loc_range(c, ky, d, n_cols_out)
        for orow in range(r0, r1 + 1):
            pr = r - orow * d
            for ocol in range(c0, c1 + 1):
                pc = c - ocol * d
                loc = orow * n_cols_out + ocol
                j = pr * ky + pc
                touched[loc] = 1
                for i in range(m):
                    b_in[loc, i] += v * phi[j, i]
                if use_err:
                    err_in[loc, j] -= v


@njit(cache=True)
def coding_update(b_in, wt, prev_loc, prev_idx, prev_val, n_prev, lat_gain,
                  J, Vp, Vn, decay, a, mu, j_limit,
                  out_loc, out_idx, out_val, spikes):
    """One step of the coding layer for every location.

    Current: J <- J + (1 - decay) * (drive - clip(J, -mu, mu)) where
    drive = b_in - lat_gain * W~ c_prev.  The identity part of the lateral
    matrix acts on the neuron's own filtered current, which turns the
    soma into a leaky integrator whose fixed point is the l1-shrinkage
    condition W~ c = b - mu * sign(c).
    Returns the number of spikes written to the out_* lists.
    """
    n_loc, m = J.shape
    drive = b_in.copy()
    for q in range(n_prev):
        loc = prev_loc[q]
        k = prev_idx[q]
        g = lat_gain * prev_val[q]
        for i in range(m):
            drive[loc, i] -= g * wt[i, k]
    one_m = 1.0 - decay
    n_out = 0
    for loc in range(n_loc):
        for i in range(m):
            j = J[loc, i]
            cl = j
            if cl > mu:
                cl = mu
            elif cl < -mu:
                cl = -mu
            j = j + one_m * (drive[loc, i] - cl)
            if j > j_limit:
                j = j_limit
            elif j < -j_limit:
                j = -j_limit
            j = _ftz(j)
            J[loc, i] = j
            vp = _ftz(Vp[loc, i] + a * (j - Vp[loc, i]))
            vn = _ftz(Vn[loc, i] + a * (-j - Vn[loc, i]))
            s = 0
            if vp >= mu:
                vp = 0.0
                s += 1
            if vn >= mu:
                vn = 0.0
                s -= 1
            Vp[loc, i] = vp
            Vn[loc, i] = vn
            spikes[loc, i] = s
            if s != 0:
                out_loc[n_out] = loc
                out_idx[n_out] = i
                out_val[n_out] = s
                n_out += 1
    return n_out


@njit(cache=True)
def error_update(err_in, phi_t, c_loc, c_idx, c_val, n_c, code_gain, awake,
                 J, Vp, Vn, decay, a, mu,
                 out_loc, out_idx, out_val, j_sum, xp, xm, dp, dm):
    """One step of the error layer: e = LIF_pp(PSC(phi c - s)).

    err_in already holds -gain*s; the coding spikes of this step add
    code_gain * phi[:, k], read from the transposed copy phi_t (M x N).  Locations with awake == 0 are skipped (their
    state is identically zero).  err_in is cleared as it is consumed, the
    filtered current is added to j_sum and the STDP traces xp/xm are
    decayed and receive this step's spikes.
    """
    n_loc, n = J.shape
    for q in range(n_c):
        loc = c_loc[q]
        k = c_idx[q]
        g = code_gain * c_val[q]
        for j in range(n):
            err_in[loc, j] += g * phi_t[k, j]
    one_m = 1.0 - decay
    n_out = 0
    for loc in range(n_loc):
        if awake[loc] == 0:
            continue
        for j in range(n):
            x = _ftz(J[loc, j] * decay + one_m * err_in[loc, j])
            err_in[loc, j] = 0.0
            J[loc, j] = x
            j_sum[loc, j] += x
            vp = _ftz(Vp[loc, j] + a * (x - Vp[loc, j]))
            vn = _ftz(Vn[loc, j] + a * (-x - Vn[loc, j]))
            s = 0
            if vp >= mu:
                vp = 0.0
                s += 1
            if vn >= mu:
                vn = 0.0
                s -= 1
            Vp[loc, j] = vp
            Vn[loc, j] = vn
            xp[loc, j] = _ftz(xp[loc, j] * dp) + s
            xm[loc, j] = _ftz(xm[loc, j] * dm) + s
            if s != 0:
                out_loc[n_out] = loc
                out_idx[n_out] = j
                out_val[n_out] = s
                n_out += 1
    return n_out


@njit(cache=True)
def decay_traces(xp, xm, dp, dm, awake):
    n_loc, n = xp.shape
    for loc in range(n_loc):
        if awake[loc] == 0:
            continue
        for j in range(n):
            xp[loc, j] = _ftz(xp[loc, j] * dp)
            xm[loc, j] = _ftz(xm[loc, j] * dm)


@njit(cache=True)
def add_spikes_to_traces(xp, xm, s_loc, s_idx, s_val, n_s):
    for q in range(n_s):
        xp[s_loc[q], s_idx[q]] += s_val[q]
        xm[s_loc[q], s_idx[q]] += s_val[q]


@njit(cache=True)
def dict_pairing(d_phi, d_phi_t, e_loc, e_idx, e_val, n_e, c_loc, c_idx, c_val, n_c,
                 c_now, xcp, xcm, xep, xem, a_plus, a_minus):
    """Accumulate raw STDP correlations for the shared dictionary.

    Error side (post e_j, pre c_i) lands on d_phi[j, i] and coding side
    (post c_i, pre e_j) on d_phi_t[i, j]; the caller adds d_phi_t.T, so
    both loops write contiguous rows.  Traces already include this step's spikes.  A
    same-step pair is worth (A+ - A-)/2 per side, (A+ - A-) in total: the
    coding-side loop counts it in full and the error-side loop drops it
    (c_now holds this step's coding spikes).
    """
    m = d_phi.shape[1]
    n = d_phi.shape[0]
    amp = a_plus - a_minus
    for q in range(n_e):
        loc = e_loc[q]
        j = e_idx[q]
        v = e_val[q]
        for i in range(m):
            d_phi[j, i] += v * (a_plus * xcp[loc, i] - a_minus * xcm[loc, i]
                                - amp * c_now[loc, i])
    for q in range(n_c):
        loc = c_loc[q]
        i = c_idx[q]
        v = c_val[q]
        for j in range(n):
            d_phi_t[i, j] += v * (a_plus * xep[loc, j] - a_minus * xem[loc, j])


@njit(cache=True)
def local_signal(f, b_in, wt, phi, c_loc, c_idx, c_val, n_c, e_loc, e_idx,
                 e_val, n_e, code_gain, err_gain, active):
    """f = W~ c - phi^T e - phi^T s in code units, for active locations."""
    n_loc, m = f.shape
    for loc in range(n_loc):
        if active[loc] == 0:
            continue
        for i in range(m):
            f[loc, i] = -b_in[loc, i]
    for q in range(n_c):
        loc = c_loc[q]
        if active[loc] == 0:
            continue
        k = c_idx[q]
        g = code_gain * c_val[q]
        for i in range(m):
            f[loc, i] += g * wt[i, k]
    for q in range(n_e):
        loc = e_loc[q]
        if active[loc] == 0:
            continue
        j = e_idx[q]
        g = err_gain * e_val[q]
        for i in range(m):
            f[loc, i] -= g * phi[j, i]


@njit(cache=True)
def gram_pairing(d_wt, f, xfm, xcp, c_loc, c_idx, c_val, n_c, dm, active,
                 a_plus, a_minus):
    """Raw STDP correlation for W~ with graded post signal f and pre c.

    Updates the f trace (tau_minus) in place.  Half weight at zero lag as in
    dict_pairing.
    """
    n_loc, m = f.shape
    for loc in range(n_loc):
        if active[loc] == 0:
            continue
        for i in range(m):
            fi = f[loc, i]
            xfm[loc, i] = _ftz(xfm[loc, i] * dm) + fi
            if fi != 0.0:
                g = a_plus * fi
                for k in range(m):
                    d_wt[i, k] += g * xcp[loc, k]
    for q in range(n_c):
        loc = c_loc[q]
        if active[loc] == 0:
            continue
        k = c_idx[q]
        v = c_val[q]
        for i in range(m):
            d_wt[i, k] -= a_minus * v * xfm[loc, i]
            # same-step pair: LTP above used the full trace, LTD the full
            # trace; take back half of each
            d_wt[i, k] -= 0.5 * v * f[loc, i] * (a_plus - a_minus)


@njit(cache=True)
def gram_window(d_wt, rsum, wt, phi, j_sum, b_sum, code_gain, n_s):
    """Window correlation sum_loc f_bar r_bar^T for the lateral Gram matrix.

    r_bar = rsum / n_s is the window coding rate; f_bar is the window mean of
    W~ c - phi^T J_e - phi^T s in code units, where J_e is the error
    neurons' filtered current.  Only locations with non-zero r_bar matter.
    """
    n_loc, m = rsum.shape
    n = phi.shape[0]
    f = np.zeros(m)
    r = np.zeros(m)
    for loc in range(n_loc):
        nz = False
        for i in range(m):
            r[i] = rsum[loc, i] / n_s
            if r[i] != 0.0:
                nz = True
        if not nz:
            continue
        for i in range(m):
            acc = -b_sum[loc, i] / n_s
            for k in range(m):
                acc += code_gain * wt[i, k] * r[k]
            f[i] = acc
        for j in range(n):
            x = j_sum[loc, j] / n_s
            if x != 0.0:
                for i in range(m):
                    f[i] -= x * phi[j, i]
        for i in range(m):
            fi = f[i]
            for k in range(m):
                d_wt[i, k] += fi * r[k]


@njit(cache=True)
def clear_locations(arr, flags):
    n_loc, n = arr.shape
    for loc in range(n_loc):
        if flags[loc] != 0:
            for j in range(n):
                arr[loc, j] = 0.0


@njit(cache=True)
def td_replay_window(d_phi, ptr, s_r, s_c, s_v, J, a, mu, dp, dm, kx, ky, d,
                     n_rows_out, n_cols_out, a_plus, a_minus, in_rows, in_cols):
    """Raw STDP correlation between a window's input pixels s and TD spikes u.

    u comes from push-pull LIF pairs driven by the constant current J
    (L x M), started from rest.  Error side: post s_j, pre u_i.  Coding
    side: post u_i, pre s_j.  Both accumulate into d_phi[j, i] per
    location.  Pixel traces are image-sized (a pixel's spike is shared by
    all covering locations); u traces are per location.  A same-step pair
    counts once at zero lag (A+ - A-): the u loop includes it, the pixel
    loop removes it.
    """
    L, m = J.shape
    Vp = np.zeros((L, m))
    Vn = np.zeros((L, m))
    xup = np.zeros((L, m))
    xum = np.zeros((L, m))
    u_now = np.zeros((L, m), np.int8)
    xsp = np.zeros(in_rows * in_cols)
    xsm = np.zeros(in_rows * in_cols)
    u_loc = np.zeros(L * m, np.int64)
    u_idx = np.zeros(L * m, np.int64)
    u_val = np.zeros(L * m, np.int64)
    pj = np.zeros(kx * ky, np.int64)
    pt = np.zeros(kx * ky)
    amp = a_plus - a_minus
    for k in range(len(ptr) - 1):
        n_u = 0
        for loc in range(L):
            for i in range(m):
                Vp[loc, i] += a * (J[loc, i] - Vp[loc, i])
                Vn[loc, i] += a * (-J[loc, i] - Vn[loc, i])
                s = 0
                if Vp[loc, i] >= mu:
                    Vp[loc, i] = 0.0
                    s += 1
                if Vn[loc, i] >= mu:
                    Vn[loc, i] = 0.0
                    s -= 1
                u_now[loc, i] = s
                xup[loc, i] = _ftz(xup[loc, i] * dp) + s
                xum[loc, i] = _ftz(xum[loc, i] * dm) + s
                if s != 0:
                    u_loc[n_u] = loc
                    u_idx[n_u] = i
                    u_val[n_u] = s
                    n_u += 1
        for q in range(in_rows * in_cols):
            if xsp[q] != 0.0 or xsm[q] != 0.0:
                xsp[q] = _ftz(xsp[q] * dp)
                xsm[q] = _ftz(xsm[q] * dm)
        for e in range(ptr[k], ptr[k + 1]):
            q = s_r[e] * in_cols + s_c[e]
            xsp[q] += s_v[e]
            xsm[q] += s_v[e]
        # pixel spikes pair with the u traces of every covering location
        for e in range(ptr[k], ptr[k + 1]):
            r = s_r[e]
            c = s_c[e]
            v = s_v[e]
            r0, r1 = _loc_range(r, kx, d, n_rows_out)
            c0, c1 = _loc_range(c, ky, d, n_cols_out)
            for orow in range(r0, r1 + 1):
                pr = r - orow * d
                for ocol in range(c0, c1 + 1):
                    pc = c - ocol * d
                    loc = orow * n_cols_out + ocol
                    j = pr * ky + pc
                    for i in range(m):
                        d_phi[j, i] += v * (a_plus * xup[loc, i] - a_minus * xum[loc, i]
                                            - amp * u_now[loc, i])
        # u spikes pair with the pixel traces of their patch; spikes are
        # grouped by location, so the nonzero patch traces are gathered once
        q = 0
        while q < n_u:
            loc = u_loc[q]
            orow = loc // n_cols_out
            ocol = loc - orow * n_cols_out
            n_p = 0
            for pr in range(kx):
                rr = orow * d + pr
                for pc in range(ky):
                    pix = rr * in_cols + ocol * d + pc
                    ts = a_plus * xsp[pix] - a_minus * xsm[pix]
                    if ts != 0.0:
                        pj[n_p] = pr * ky + pc
                        pt[n_p] = ts
                        n_p += 1
            while q < n_u and u_loc[q] == loc:
                i = u_idx[q]
                v = u_val[q]
                for z in range(n_p):
                    d_phi[pj[z], i] += v * pt[z]
                q += 1


@njit(cache=True)
def rate_push(ring, rsum, slot, spikes):
    n_loc, m = rsum.shape
    for loc in range(n_loc):
        for i in range(m):
            old = ring[slot, loc, i]
            new = spikes[loc, i]
            if old != new:
                rsum[loc, i] += new - old
                ring[slot, loc, i] = new


def empty_spike_list(cap):
    return (np.zeros(cap, np.int64), np.zeros(cap, np.int64), np.zeros(cap, np.int64))

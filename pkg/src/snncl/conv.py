"""Convolutional sweep of one shared DLBP network over the image plane.

Each output location keeps its own neuron, filter and trace state; the
dictionary and lateral Gram matrix are shared.  Plasticity contributions of
all locations are summed and divided by the number of locations before
they are applied, once per step.

Locations are numbered row-major over the D_x x D_y output grid, and patch
pixels row-major inside the l_x x l_y window (see :mod:`snncl._kernels`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .dlbp import DivergenceError, Dictionary, DlbpHyper, LateralGram
from .spiking import RATE_WINDOW

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class ConvGeometry:
    H: int = 130
    W: int = 173
    l_x: int = 30
    l_y: int = 30
    d: int = 5
    M: int = 64

    def __post_init__(self):
        if min(self.H, self.W, self.l_x, self.l_y, self.d, self.M) < 1:
            raise ValueError("geometry entries must be positive")
        if self.l_x > self.H or self.l_y > self.W:
            raise ValueError("kernel larger than input")

    @property
    def D_x(self):
        return (self.H - self.l_x) // self.d + 1

    @property
    def D_y(self):
        return (self.W - self.l_y) // self.d + 1

    @property
    def N(self):
        return self.l_x * self.l_y

    @property
    def n_locations(self):
        return self.D_x * self.D_y

    def patch_center(self, ox, oy):
        """Pixel (row, col) at the centre of output cell (ox, oy)."""
        return ox * self.d + (self.l_x - 1) / 2.0, oy * self.d + (self.l_y - 1) / 2.0


def tensor_dims(g: ConvGeometry):
    return g.D_x, g.D_y, g.M


def extract_patches(frame, g: ConvGeometry):
    """(D_x*D_y, l_x*l_y) flattened patches in the engine's ordering."""
    frame = np.asarray(frame)
    if frame.shape != (g.H, g.W):
        raise ValueError("frame does not match geometry")
    win = np.lib.stride_tricks.sliding_window_view(frame, (g.l_x, g.l_y))
    win = win[::g.d, ::g.d][:g.D_x, :g.D_y]
    return win.reshape(g.n_locations, g.N)


class ConvSnn:
    """Event-driven convolutional DLBP engine with per-location state.

    quiescence  a location whose last input pixel and last coding spike are
                more than this many steps old is put to sleep: its error
                layer and plasticity traces are reset to exactly zero and
                skipped until new activity arrives.  0 keeps every location
                awake (bit-compatible with the dense reference network).
    """

    STATE_ARRAYS = ("Jc", "Vcp", "Vcn", "c_now", "Je", "Vep", "Ven", "xcp", "xcm",
                    "xep", "xem", "xfm", "f", "j_sum", "b_sum", "ring", "rsum", "last_touch", "awake",
                    "prev_loc", "prev_idx", "prev_val")

    def __init__(self, geom: ConvGeometry, dictionary: Dictionary, gram: LateralGram,
                 hyper: DlbpHyper, n_s: int = RATE_WINDOW, quiescence: int = 40):
        if dictionary.phi.shape != (geom.N, geom.M) or gram.wt.shape != (geom.M, geom.M):
            raise ValueError("dictionary/gram do not match the geometry")
        self.g = geom
        self.dictionary = dictionary
        self.gram = gram
        self.hyper = hyper
        self.n_s = n_s
        self.quiescence = quiescence
        L, N, M = geom.n_locations, geom.N, geom.M
        self.Jc = np.zeros((L, M))
        self.Vcp = np.zeros((L, M))
        self.Vcn = np.zeros((L, M))
        self.c_now = np.zeros((L, M), np.int8)
        self.Je = np.zeros((L, N))
        self.Vep = np.zeros((L, N))
        self.Ven = np.zeros((L, N))
        self.xcp = np.zeros((L, M))
        self.xcm = np.zeros((L, M))
        self.xep = np.zeros((L, N))
        self.xem = np.zeros((L, N))
        self.xfm = np.zeros((L, M))
        self.f = np.zeros((L, M))
        self.j_sum = np.zeros((L, N))
        self.b_sum = np.zeros((L, M))
        self.ring = np.zeros((n_s, L, M), np.int8)
        self.rsum = np.zeros((L, M), np.int64)
        self.last_touch = np.full(L, -(10 ** 9), np.int64)
        self.awake = np.zeros(L, np.int8)
        self.prev_loc, self.prev_idx, self.prev_val = K.empty_spike_list(L * M)
        self.n_prev = 0
        self.step_index = 0
        # scratch
        self._b_in = np.zeros((L, M))
        self._err_in = np.zeros((L, N))
        self._touched = np.zeros(L, np.int8)
        self._c_list = K.empty_spike_list(L * M)
        self._e_list = K.empty_spike_list(L * N)
        self._d_phi = np.zeros((N, M))
        self._d_phi_t = np.zeros((M, N))
        self._d_wt = np.zeros((M, M))
        self.last_spike_counts = (0, 0)

    # -- state persistence -------------------------------------------------
    def state_dict(self):
        d = {k: getattr(self, k) for k in self.STATE_ARRAYS}
        d["scalars"] = np.array([self.n_prev, self.step_index], np.int64)
        return d

    def load_state_dict(self, d):
        for k in self.STATE_ARRAYS:
            getattr(self, k)[...] = d[k]
        self.n_prev, self.step_index = (int(x) for x in d["scalars"])

    def reset_state(self):
        for k in self.STATE_ARRAYS:
            arr = getattr(self, k)
            arr[...] = -(10 ** 9) if k == "last_touch" else 0
        self.n_prev = 0

    # -- dynamics ------------------------------------------------------------
    def step(self, ev_r, ev_c, ev_v, learn: bool | None = None):
        """Advance all locations by one dt step.

        ev_r, ev_c, ev_v: rows, columns and signed values (+-1) of the input
        pixels active this step.  learn defaults to hyper.mode != "frozen".
        In frozen mode the error layer is not simulated, since the coding
        dynamics do not depend on it.
        """
        h = self.hyper
        g = self.g
        if learn is None:
            learn = h.mode != "frozen"
        phi = self.dictionary.phi
        wt = self.gram.wt
        L = g.n_locations
        t = self.step_index
        dec = h.psc_decay
        a = h.dt / h.tau_m

        self._b_in.fill(0.0)
        self._touched.fill(0)
        K.input_drive(ev_r, ev_c, ev_v.astype(np.float64), phi, h.input_gain, g.l_x,
                      g.l_y, g.d, g.D_x, g.D_y, self._b_in, self._err_in,
                      self._touched, learn)
        c_loc, c_idx, c_val = self._c_list
        n_c = K.coding_update(self._b_in, wt, self.prev_loc, self.prev_idx,
                              self.prev_val, self.n_prev, h.code_gain, self.Jc,
                              self.Vcp, self.Vcn, dec, a, h.mu, h.j_limit,
                              c_loc, c_idx, c_val, self.c_now)
        n_e = 0
        if learn:
            p = h.stdp
            dp, dm = math.exp(-h.dt / p.tau_plus), math.exp(-h.dt / p.tau_minus)
            self._update_awake(t, c_loc[:n_c])
            e_loc, e_idx, e_val = self._e_list
            phi_t = np.ascontiguousarray(phi.T)
            n_e = K.error_update(self._err_in, phi_t, c_loc, c_idx, c_val, n_c,
                                 h.code_gain, self.awake, self.Je, self.Vep,
                                 self.Ven, dec, a, h.mu, e_loc, e_idx, e_val,
                                 self.j_sum, self.xep, self.xem, dp, dm)
            self.b_sum += self._b_in
            K.decay_traces(self.xcp, self.xcm, dp, dm, self.awake)
            K.add_spikes_to_traces(self.xcp, self.xcm, c_loc, c_idx, c_val, n_c)
            K.local_signal(self.f, self._b_in, wt, phi, c_loc, c_idx, c_val, n_c,
                           e_loc, e_idx, e_val, n_e, h.code_gain, h.error_gain,
                           self.awake)
            self._d_wt.fill(0.0)
            spike_rule = h.gram_rule == "spike"
            if h.gram_learning and spike_rule:
                K.gram_pairing(self._d_wt, self.f, self.xfm, self.xcp, c_loc, c_idx,
                               c_val, n_c, dm, self.awake, p.A_plus, p.A_minus)
            pp = h.plastic_params
            self._d_phi.fill(0.0)
            self._d_phi_t.fill(0.0)
            K.dict_pairing(self._d_phi, self._d_phi_t, e_loc, e_idx, e_val, n_e, c_loc, c_idx,
                           c_val, n_c, self.c_now, self.xcp, self.xcm, self.xep,
                           self.xem, pp.A_plus, pp.A_minus)
            self._d_phi += self._d_phi_t.T
            new_phi = phi * (1.0 - h.eta2 * h.lambda2) \
                - (pp.sign * h.eta2 * h.learn_scale / L) * self._d_phi
            new_wt = wt
            if h.gram_learning and spike_rule:
                new_wt = wt - (h.eta2 / L) * self._d_wt
            elif h.gram_learning and (t + 1) % self.n_s == 0:
                # rate window closes with this step: rsum must include c_now
                K.rate_push(self.ring, self.rsum, t % self.n_s, self.c_now)
                K.gram_window(self._d_wt, self.rsum, wt, phi, self.j_sum, self.b_sum,
                              h.code_gain, self.n_s)
                scale = self.n_s * h.eta2 * h.stdp.kernel_area / h.dt / L
                new_wt = wt - scale * self._d_wt
            if not (np.all(np.isfinite(new_phi)) and np.all(np.isfinite(new_wt))):
                raise DivergenceError(f"non-finite weights at step {t}")
            phi[...] = new_phi
            if h.gram_learning:
                wt[...] = new_wt
        K.rate_push(self.ring, self.rsum, t % self.n_s, self.c_now)
        if learn and (t + 1) % self.n_s == 0:
            self.j_sum.fill(0.0)
            self.b_sum.fill(0.0)
        # this step's coding spikes drive the lateral input of the next one
        self.prev_loc[:n_c] = c_loc[:n_c]
        self.prev_idx[:n_c] = c_idx[:n_c]
        self.prev_val[:n_c] = c_val[:n_c]
        self.n_prev = n_c
        self.step_index += 1
        self.last_spike_counts = (n_c, n_e)
        return n_c, n_e

    def _update_awake(self, t, spiking_locs):
        self.last_touch[self._touched != 0] = t
        self.last_touch[spiking_locs] = t
        if self.quiescence <= 0:
            self.awake[:] = 1
            return
        now = ((t - self.last_touch) <= self.quiescence).astype(np.int8)
        sleeping = (self.awake == 1) & (now == 0)
        if sleeping.any():
            for arr in (self.Je, self.Vep, self.Ven, self.xep, self.xem, self.xcp,
                        self.xcm, self.xfm, self.f):
                arr[sleeping] = 0.0
        self.awake[:] = now

    def window_rates(self):
        """Rolling-window signed coding rates as a D_x x D_y x M tensor."""
        g = self.g
        return (self.rsum / self.n_s).reshape(g.D_x, g.D_y, g.M)

    # -- task-driven plasticity ----------------------------------------------
    def td_replay(self, frames, v, gain: float, lambda_s: float):
        """Pair a window's input pixels with spike-encoded TD signals.

        frames   list of (rows, cols, vals) per step of the window
        v        D_x x D_y x M task-driven gradient, held constant over the
                 window and encoded by fresh push-pull LIF pairs with input
                 current gain * v
        Applies phi <- phi - lambda_s * eta2 * <STDP{s,u} + STDP{u,s}> and
        returns the applied delta (for channel accounting).
        """
        h = self.hyper
        g = self.g
        L, M = g.n_locations, g.M
        p = h.stdp
        dp, dm = math.exp(-h.dt / p.tau_plus), math.exp(-h.dt / p.tau_minus)
        a = h.dt / h.tau_m
        J = gain * np.asarray(v, dtype=float).reshape(L, M)
        d_phi = np.zeros((g.N, M))
        counts = np.array([len(f[0]) for f in frames], np.int64)
        ptr = np.concatenate([[0], np.cumsum(counts)])
        cat = [np.concatenate([np.asarray(f[k]) for f in frames]) if len(frames) else np.zeros(0)
               for k in range(3)]
        K.td_replay_window(d_phi, ptr, cat[0].astype(np.int64), cat[1].astype(np.int64),
                           cat[2].astype(np.float64), J, a, h.mu, dp, dm, g.l_x, g.l_y,
                           g.d, g.D_x, g.D_y, p.A_plus, p.A_minus, g.H, g.W)
        delta = -(lambda_s * h.eta2 / L) * d_phi
        new_phi = self.dictionary.phi + delta
        if not np.all(np.isfinite(new_phi)):
            raise DivergenceError("non-finite weights in task-driven update")
        self.dictionary.phi[...] = new_phi
        return delta


def conv_forward(frames, g: ConvGeometry, engine: ConvSnn):
    """Drive the engine with a window of dense H x W frames; return T."""
    if len(frames) < engine.n_s:
        raise ValueError("window shorter than the rate window")
    for fr in frames:
        fr = np.asarray(fr)
        if fr.shape != (g.H, g.W):
            raise ValueError("frame does not match geometry")
        r, c = np.nonzero(fr)
        engine.step(r.astype(np.int64), c.astype(np.int64),
                    fr[r, c].astype(np.float64))
    return engine.window_rates()


def channel_normalize(T):
    """|T| / sum_c |T| per location; all-zero locations stay zero."""
    A = np.abs(np.asarray(T, dtype=float))
    S = A.sum(axis=-1, keepdims=True)
    out = np.zeros_like(A)
    np.divide(A, S, out=out, where=S > 0)
    return out


@dataclass
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray
    momentum: float = 0.99
    floor: float = SIGMA_FLOOR

    @classmethod
    def init(cls, M, momentum=0.99):
        return cls(np.zeros(M), np.ones(M), momentum)

    def copy(self):
        return ChannelStats(self.mu.copy(), self.sigma.copy(), self.momentum, self.floor)


def standard_scale(T_tilde, stats: ChannelStats, update: bool = True):
    """Scale with the current stats, then fold this batch into the EMA.

    The batch moments are the mean and standard deviation of each channel
    over all locations; mu and sigma are each averaged with weight
    (1 - momentum) on the new batch.
    """
    T_tilde = np.asarray(T_tilde, dtype=float)
    T_star = (T_tilde - stats.mu) / stats.sigma
    if not update:
        return T_star, stats
    flat = T_tilde.reshape(-1, T_tilde.shape[-1])
    m = flat.mean(axis=0)
    sd = flat.std(axis=0)
    k = stats.momentum
    new = ChannelStats(k * stats.mu + (1 - k) * m,
                       np.maximum(k * stats.sigma + (1 - k) * sd, stats.floor),
                       k, stats.floor)
    return T_star, new


def export_rate_tensor(T, path_bin, path_json):
    T = np.ascontiguousarray(T, dtype="<f8")
    T.tofile(path_bin)
    with open(path_json, "w") as fh:
        json.dump({"dims": list(T.shape), "dtype": "float64-le", "order": "row-major",
                   "axes": ["row_out", "col_out", "channel"]}, fh, sort_keys=True)
        fh.write("\n")

"""Pairwise double-exponential STDP for signed spike trains.

Pairings are tracked with exponential traces.  Two schemes are offered:

  "all"      every pre/post pair contributes (trace accumulates).  A pair
             falling in the same time step counts with half weight on each
             branch of the kernel, the trapezoid rule for the lag integral.
             This reproduces the rate-product expectation to within ~1%.
  "nearest"  each spike pairs only with the most recent spike of the other
             side, and pairs older than 5*max(tau) are dropped.  A same-step
             pair counts as zero lag (full A+).

The polarity of each contribution is the product of the post and pre spike
polarities, so signed rate products behave like the unsigned case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .spiking import DT


@dataclass(frozen=True)
class StdpParams:
    A_plus: float = 1.0
    A_minus: float = 0.8
    tau_plus: float = 0.02
    tau_minus: float = 0.008
    eta2: float = 0.05
    sign: int = 1

    def __post_init__(self):
        if not (self.tau_plus > 0 and self.tau_minus > 0):
            raise ValueError("STDP time constants must be positive")
        if self.A_plus < 0 or self.A_minus < 0:
            raise ValueError("STDP amplitudes are non-negative; use sign for polarity")
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")

    @property
    def kernel_area(self) -> float:
        """A+ tau+ - A- tau-: integral of the unsigned kernel over lag."""
        return self.A_plus * self.tau_plus - self.A_minus * self.tau_minus


def stdp_delta(tau_ij, p: StdpParams = StdpParams()):
    """Kernel value for lag tau_ij = t_post - t_pre (seconds)."""
    tau = np.asarray(tau_ij, dtype=float)
    with np.errstate(over="ignore"):
        out = np.where(tau >= 0,
                       p.sign * p.A_plus * np.exp(-np.abs(tau) / p.tau_plus),
                       -p.sign * p.A_minus * np.exp(-np.abs(tau) / p.tau_minus))
    return float(out) if out.ndim == 0 else out


def negative_params(p: StdpParams) -> StdpParams:
    """Anti-Hebbian variant: amplitudes / 100 and flipped sign.

    Not an involution: applying it twice scales amplitudes by 1e-4.
    """
    return replace(p, A_plus=p.A_plus / 100.0, A_minus=p.A_minus / 100.0, sign=-p.sign)


def expected_stdp(r_post, r_pre, p: StdpParams = StdpParams(), eta2=None):
    """Mean weight drift per unit time for independent trains (rates per unit time)."""
    eta = p.eta2 if eta2 is None else eta2
    return p.sign * eta * p.kernel_area * np.asarray(r_post) * np.asarray(r_pre)


class PairingState:
    """Trace bookkeeping for an n_post x n_pre synapse block."""

    def __init__(self, n_post: int, n_pre: int, p: StdpParams = StdpParams(),
                 dt: float = DT, pairing: str = "all"):
        if pairing not in ("all", "nearest"):
            raise ValueError(f"unknown pairing scheme {pairing!r}")
        self.n_post, self.n_pre = n_post, n_pre
        self.dt = dt
        self.pairing = pairing
        self.decay_plus = math.exp(-dt / p.tau_plus)
        self.decay_minus = math.exp(-dt / p.tau_minus)
        self.cutoff = 5.0 * max(p.tau_plus, p.tau_minus)
        self.pre_plus = np.zeros(n_pre)     # pre trace seen by post spikes (LTP)
        self.post_minus = np.zeros(n_post)  # post trace seen by pre spikes (LTD)
        # nearest-neighbour bookkeeping: last spike step and polarity
        self.pre_last = np.full(n_pre, -1, dtype=np.int64)
        self.pre_pol = np.zeros(n_pre)
        self.post_last = np.full(n_post, -1, dtype=np.int64)
        self.post_pol = np.zeros(n_post)
        self.step = 0


def apply_stdp(row, post, pre, state: PairingState, p: StdpParams = StdpParams(),
               eta2=None):
    """Advance the pairing state by one step and return the updated weights.

    row   weights, shape (n_pre,) for a single neuron or (n_post, n_pre)
    post  signed spikes of the post neuron(s) this step
    pre   signed spikes of the pre synapses this step
    """
    w = np.asarray(row, dtype=float)
    single = w.ndim == 1
    W = w[None, :] if single else w
    post = np.atleast_1d(np.asarray(post, dtype=float))
    pre = np.atleast_1d(np.asarray(pre, dtype=float))
    if W.shape != (state.n_post, state.n_pre) or post.shape != (state.n_post,) \
            or pre.shape != (state.n_pre,):
        raise ValueError("weight/spike dimensions do not match the pairing state")
    eta = p.eta2 if eta2 is None else eta2
    dw = stdp_increment(post, pre, state, p)
    state.step += 1
    out = W + p.sign * eta * dw
    return out[0] if single else out


def stdp_increment(post, pre, state: PairingState, p: StdpParams):
    """Unsigned, unscaled kernel correlation for one step (n_post x n_pre)."""
    t = state.step
    if state.pairing == "all":
        state.pre_plus = state.pre_plus * state.decay_plus + pre
        state.post_minus = state.post_minus * state.decay_minus + post
        ltp = np.outer(post, state.pre_plus - 0.5 * pre)
        ltd = np.outer(state.post_minus - 0.5 * post, pre)
        return p.A_plus * ltp - p.A_minus * ltd
    # nearest neighbour: pair with the latest spike on the other side
    # (including a same-step spike, which counts as lag 0 on the LTP branch)
    fired_pre = pre != 0
    fired_post = post != 0
    state.pre_last[fired_pre] = t
    state.pre_pol[fired_pre] = pre[fired_pre]
    lag_pre = (t - state.pre_last) * state.dt
    pre_ok = (state.pre_last >= 0) & (lag_pre <= state.cutoff)
    pre_term = np.where(pre_ok, state.pre_pol * np.exp(-lag_pre / p.tau_plus), 0.0)
    ltp = np.outer(post, pre_term)
    # LTD: a pre spike pairs with the last *earlier* post spike
    lag_post = (t - state.post_last) * state.dt
    post_ok = (state.post_last >= 0) & (lag_post <= state.cutoff)
    post_term = np.where(post_ok, state.post_pol * np.exp(-lag_post / p.tau_minus), 0.0)
    ltd = np.outer(post_term, pre)
    state.post_last[fired_post] = t
    state.post_pol[fired_post] = post[fired_post]
    return p.A_plus * ltp - p.A_minus * ltd

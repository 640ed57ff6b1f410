"""Coding/error-layer spiking network for dictionary learning with l1 coding.

A network holds a batch of L independent neuron populations that share one
dictionary (L = 1 for a single network, L = number of image locations for
the convolutional sweep).  This module is the dense numpy reference; the
compiled convolutional engine in :mod:`snncl.conv` implements the same
dynamics event by event.

Units.  Input spikes carry ``input_gain`` current units.  A coding spike
carries ``spike_gain`` on the lateral synapses, so a coding rate r (spikes
per step) represents the real-valued code ``code_gain * r`` with
``code_gain = eta1 * spike_gain``.  An error spike stands for ``mu*tau_m/dt``,
the current per unit rate of a saturating LIF neuron.

Coding neuron.  The filtered input current is J <- J + (1-e^{-dt/tau_s})
(drive - clip(J, -mu, mu)) with drive = gain*phi^T s - code_gain*W~ c.  The
-I part of the lateral matrix acts on the neuron's own current, cancelling
the filter leak above threshold, so J integrates the residual drive and
settles where W~ c = phi^T s - mu*sign(c): the stationarity condition of
the l1 problem with lambda1 = mu.

Learning.  Error-driven synapses move against their STDP correlation:
phi <- phi - sign*eta2*<STDP{e,c} + STDP{c,e}>, averaged over the batch.
Since e tracks phi c - s, the standard rule descends the reconstruction
error; the negative rule (amplitudes / 100, sign -1) ascends it.

The lateral Gram matrix follows W~ <- W~ - eta2*<STDP{f,c}>.  Two forms:
  "window"  rate-product form of the rule, applied once per rate window:
            dW~ = -n_s*eta2*(A+ tau+ - A- tau-)/dt * f_bar r_bar^T, where f_bar
            is the window mean of W~ c - phi^T J_e - phi^T s with J_e the
            error neurons' filtered current.  By linearity of the filter
            f_bar ~ (W~ - phi^T phi) c_bar, so W~ is pulled to phi^T phi.
  "spike"   per-step pairing with f built from the error spike train.  When
            input spikes are large the error spikes follow them with a lag,
            the spike-based f is dominated by that lag, and W~ does not
            track phi^T phi; kept for comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .container import FormatError, read_container, write_container
from .plasticity import StdpParams, negative_params
from .spiking import DT, MU, RATE_WINDOW, TAU_M, TAU_S

MODES = ("unsupervised-positive", "unsupervised-negative", "frozen")
GRAM_RULES = ("window", "spike")
CHECKPOINT_MAGIC = b"NSDLBP01"


class DivergenceError(RuntimeError):
    """A step produced non-finite weights; the step was not committed."""


@dataclass
class DlbpHyper:
    eta1: float = 0.07
    eta2: float = 0.05
    lambda2: float = 0.002
    mu: float = MU
    tau_m: float = TAU_M
    tau_s: float = TAU_S
    dt: float = DT
    mode: str = "unsupervised-positive"
    input_gain: float = 1.0
    spike_gain: float = 20.0
    j_limit: float | None = None
    learn_scale: float = 1.0
    gram_learning: bool = True
    gram_rule: str = "window"
    stdp: StdpParams = field(default_factory=StdpParams)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.gram_rule not in GRAM_RULES:
            raise ValueError(f"gram_rule must be one of {GRAM_RULES}")
        if self.j_limit is None:
            self.j_limit = 2.0 * self.error_gain

    @property
    def code_gain(self) -> float:
        return self.eta1 * self.spike_gain

    @property
    def error_gain(self) -> float:
        return self.mu * self.tau_m / self.dt

    @property
    def psc_decay(self) -> float:
        return math.exp(-self.dt / self.tau_s)

    @property
    def plastic_params(self) -> StdpParams:
        """STDP parameters for the dictionary under the current mode."""
        p = StdpParams(self.stdp.A_plus, self.stdp.A_minus, self.stdp.tau_plus,
                       self.stdp.tau_minus, self.eta2, 1)
        return negative_params(p) if self.mode == "unsupervised-negative" else p

    def to_dict(self):
        d = asdict(self)
        d["stdp"] = asdict(self.stdp)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stdp"] = StdpParams(**d["stdp"])
        return cls(**d)


class Dictionary:
    """Single storage for the dictionary: feedforward weights read phi.T,
    feedback weights read phi, both as views of the same array."""

    def __init__(self, phi):
        phi = np.array(phi, dtype=np.float64)
        if phi.ndim != 2:
            raise ValueError("dictionary must be a 2-D array")
        if not np.all(np.isfinite(phi)):
            raise ValueError("dictionary entries must be finite")
        self.phi = phi

    @property
    def N(self):
        return self.phi.shape[0]

    @property
    def M(self):
        return self.phi.shape[1]

    @property
    def input_weights(self):
        return self.phi.T

    @property
    def feedback_weights(self):
        return self.phi


class LateralGram:
    def __init__(self, wt=None, M=None):
        if wt is None:
            wt = np.zeros((M, M))
        self.wt = np.array(wt, dtype=np.float64)

    def W(self, eta1: float):
        return eta1 * self.wt - np.eye(self.wt.shape[0])


def init_dictionary(N: int, M: int, sigma_w: float = 0.01, seed: int = 0) -> Dictionary:
    if N < 1 or M < 1:
        raise ValueError("dictionary dimensions must be positive")
    rng = np.random.default_rng(seed)
    return Dictionary(rng.normal(0.0, sigma_w, size=(N, M)))


class NetworkState:
    """Neuron, filter and trace state for L populations."""

    def __init__(self, N: int, M: int, L: int = 1, n_s: int = RATE_WINDOW):
        self.N, self.M, self.L = N, M, L
        self.Jc = np.zeros((L, M))
        self.Vcp = np.zeros((L, M))
        self.Vcn = np.zeros((L, M))
        self.c = np.zeros((L, M), dtype=np.int8)
        self.Je = np.zeros((L, N))
        self.Vep = np.zeros((L, N))
        self.Ven = np.zeros((L, N))
        self.e = np.zeros((L, N), dtype=np.int8)
        self.f = np.zeros((L, M))
        # STDP traces (+ uses tau_plus, - uses tau_minus)
        self.xcp = np.zeros((L, M))
        self.xcm = np.zeros((L, M))
        self.xep = np.zeros((L, N))
        self.xem = np.zeros((L, N))
        self.xfm = np.zeros((L, M))
        self.xsp = np.zeros((L, N))
        self.xsm = np.zeros((L, N))
        self.xup = np.zeros((L, M))
        self.xum = np.zeros((L, M))
        self.j_sum = np.zeros((L, N))
        self.b_sum = np.zeros((L, M))
        self.ring = np.zeros((n_s, L, M), dtype=np.int8)
        self.rsum = np.zeros((L, M), dtype=np.int64)
        self.n_s = n_s
        self.step = 0

    def rates(self):
        """Rolling-window signed coding rates, shape (L, M)."""
        return self.rsum / self.n_s


def _lif_pp(J, Vp, Vn, a, mu):
    Vp += a * (J - Vp)
    Vn += a * (-J - Vn)
    sp = Vp >= mu
    sn = Vn >= mu
    Vp[sp] = 0.0
    Vn[sn] = 0.0
    return sp.astype(np.int8) - sn.astype(np.int8)


def _kernel_corr(post, pre, post_trace_m, pre_trace_p, p: StdpParams):
    """Sum over the batch of A+ post x pre_trace+ - A- post_trace- x pre,
    with the same-step pair at half weight on each branch."""
    post = post.astype(float)
    pre = pre.astype(float)
    ltp = post.T @ (pre_trace_p - 0.5 * pre)
    ltd = (post_trace_m - 0.5 * post).T @ pre
    return p.A_plus * ltp - p.A_minus * ltd


def network_step(state: NetworkState, dictionary: Dictionary, gram: LateralGram,
                 hyper: DlbpHyper, s_spikes, td_spikes=None, td_scale: float = 0.0):
    """Advance every population by one dt step; learn unless frozen.

    s_spikes   signed input spikes, shape (N,) or (L, N)
    td_spikes  optional signed TD spikes, shape (M,) or (L, M); they act on
               plasticity only (paired with the input through STDP, scaled
               by td_scale) and inject no current
    Returns (c_spikes, e_spikes) with the batch axis dropped when L == 1 and
    the input was 1-D.
    """
    s = np.asarray(s_spikes)
    squeeze = s.ndim == 1
    s = np.atleast_2d(s).astype(float)
    L, N, M = state.L, state.N, state.M
    if s.shape != (L, N) or dictionary.phi.shape != (N, M) or gram.wt.shape != (M, M):
        raise ValueError("network_step: dimension mismatch")
    phi, wt = dictionary.phi, gram.wt
    h = hyper
    dec = h.psc_decay
    a = h.dt / h.tau_m
    learn = h.mode != "frozen"

    # coding layer: drive from input and previous coding spikes
    b_in = h.input_gain * (s @ phi)
    drive = b_in - h.code_gain * (state.c.astype(float) @ wt.T)
    state.Jc += (1.0 - dec) * (drive - np.clip(state.Jc, -h.mu, h.mu))
    np.clip(state.Jc, -h.j_limit, h.j_limit, out=state.Jc)
    c = _lif_pp(state.Jc, state.Vcp, state.Vcn, a, h.mu)

    # error layer: residual of this step's code against the input
    err = h.code_gain * (c.astype(float) @ phi.T) - h.input_gain * s
    state.Je *= dec
    state.Je += (1.0 - dec) * err
    e = _lif_pp(state.Je, state.Vep, state.Ven, a, h.mu)
    state.j_sum += state.Je
    state.b_sum += b_in

    # local signal f = W~ c - phi^T e - phi^T s (code units)
    f = h.code_gain * (c.astype(float) @ wt.T) - h.error_gain * (e.astype(float) @ phi) - b_in
    state.f = f

    state.c = c
    state.e = e
    slot = state.step % state.n_s
    state.rsum += c.astype(np.int64) - state.ring[slot]
    state.ring[slot] = c

    td_on = td_spikes is not None and td_scale != 0.0 and learn
    if learn or td_on:
        p = h.stdp
        dp, dm = math.exp(-h.dt / p.tau_plus), math.exp(-h.dt / p.tau_minus)
        state.xcp = state.xcp * dp + c
        state.xcm = state.xcm * dm + c
        state.xep = state.xep * dp + e
        state.xem = state.xem * dm + e
        state.xfm = state.xfm * dm + f
    new_phi = phi
    new_wt = wt
    if learn:
        pp = h.plastic_params
        corr = (_kernel_corr(e, c, state.xem, state.xcp, pp)
                + _kernel_corr(c, e, state.xcm, state.xep, pp).T)
        step_scale = pp.sign * h.eta2 * h.learn_scale / L
        new_phi = phi * (1.0 - h.eta2 * h.lambda2) - step_scale * corr
        if h.gram_learning and h.gram_rule == "spike":
            sp = h.stdp
            fc = (sp.A_plus * (f.T @ (state.xcp - 0.5 * c))
                  - sp.A_minus * ((state.xfm - 0.5 * f).T @ c.astype(float)))
            new_wt = wt - (h.eta2 / L) * fc
        elif h.gram_learning and (state.step + 1) % state.n_s == 0:
            r = state.rsum / state.n_s
            f_bar = (h.code_gain * (r @ wt.T) - (state.j_sum / state.n_s) @ phi
                     - state.b_sum / state.n_s)
            f_bar[~np.any(r != 0, axis=1)] = 0.0
            scale = state.n_s * h.eta2 * h.stdp.kernel_area / h.dt / L
            new_wt = wt - scale * (f_bar.T @ r)
    if td_on:
        u = np.atleast_2d(np.asarray(td_spikes)).astype(float)
        if u.shape != (L, M):
            raise ValueError("td_spikes: dimension mismatch")
        p = h.stdp
        dp, dm = math.exp(-h.dt / p.tau_plus), math.exp(-h.dt / p.tau_minus)
        state.xsp = state.xsp * dp + s
        state.xsm = state.xsm * dm + s
        state.xup = state.xup * dp + u
        state.xum = state.xum * dm + u
        tp = StdpParams(p.A_plus, p.A_minus, p.tau_plus, p.tau_minus, h.eta2, 1)
        corr = (_kernel_corr(s, u, state.xsm, state.xup, tp)
                + _kernel_corr(u, s, state.xum, state.xsp, tp).T)
        new_phi = new_phi - (td_scale * h.eta2 / L) * corr
    if (state.step + 1) % state.n_s == 0:
        state.j_sum[...] = 0.0
        state.b_sum[...] = 0.0
    if learn or td_on:
        if not (np.all(np.isfinite(new_phi)) and np.all(np.isfinite(new_wt))):
            raise DivergenceError(f"non-finite weights at step {state.step}")
        dictionary.phi[...] = new_phi
        gram.wt[...] = new_wt
    state.step += 1
    if squeeze and L == 1:
        return c[0], e[0]
    return c, e


def encode_bernoulli(s, rho: float, rng):
    """Signed Bernoulli spikes with per-step probability min(|s| rho, 1)."""
    s = np.asarray(s, dtype=float)
    p = np.minimum(np.abs(s) * rho, 1.0)
    return ((rng.random(s.shape) < p) * np.sign(s)).astype(np.int8)


@dataclass
class InferResult:
    code: np.ndarray        # code_gain * mean rate, comparable to the l1 solution
    rates: np.ndarray       # mean signed coding rate per step over the averaging span
    final_window: np.ndarray  # rolling-window rates at the last step


def infer_rates(dictionary: Dictionary, gram: LateralGram, hyper: DlbpHyper, s_signal,
                steps: int, rho: float = 0.5, seed: int = 0, avg_steps=None,
                scale_input: bool = True) -> InferResult:
    """Run the frozen network on a Bernoulli encoding of a real vector.

    With scale_input each input spike carries 1/rho, so the expected input
    current equals s whatever rho is.  The rolling-window estimate is
    averaged over the last ``avg_steps`` steps (default: second half).
    """
    if steps < RATE_WINDOW:
        raise ValueError("steps must cover at least one rate window")
    s_signal = np.asarray(s_signal, dtype=float)
    h = DlbpHyper(**{**hyper.to_dict(), "stdp": hyper.stdp, "mode": "frozen",
                     "input_gain": (1.0 / rho) if scale_input else hyper.input_gain})
    if avg_steps is None:
        avg_steps = steps // 2
    rng = np.random.default_rng(seed)
    st = NetworkState(dictionary.N, dictionary.M, 1)
    acc = np.zeros(dictionary.M)
    for t in range(steps):
        sp = encode_bernoulli(s_signal, rho, rng)
        c, _ = network_step(st, dictionary, gram, h, sp)
        if t >= steps - avg_steps:
            acc += c
    rates = acc / avg_steps
    return InferResult(h.code_gain * rates, rates, st.rates()[0])


def soft_threshold(x, lam):
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def lipschitz(phi, iters: int = 500, seed: int = 0) -> float:
    """Largest eigenvalue of phi^T phi by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=phi.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = phi.T @ (phi @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        lam = nw
    return float(lam)


def ista_oracle(phi, s, lambda1: float, iters: int = 5000, tol: float = 1e-12):
    if lambda1 < 0 or iters < 1:
        raise ValueError("need lambda1 >= 0 and iters >= 1")
    phi = np.asarray(phi, dtype=float)
    s = np.asarray(s, dtype=float)
    L = lipschitz(phi)
    c = np.zeros(phi.shape[1])
    if L == 0:
        return c
    for _ in range(iters):
        c_new = soft_threshold(c - phi.T @ (phi @ c - s) / L, lambda1 / L)
        if np.max(np.abs(c_new - c)) < tol:
            return c_new
        c = c_new
    return c


def objective_value(phi, c, s, lambda1: float, lambda2: float) -> float:
    phi = np.asarray(phi, dtype=float)
    r = phi @ np.asarray(c, dtype=float) - np.asarray(s, dtype=float)
    return float(0.5 * r @ r + lambda1 * np.abs(c).sum() + 0.5 * lambda2 * np.sum(phi * phi))


def anti_hebbian_direction_check(phi, c, s):
    """Gradient of -log ||phi c - s||^2 / 2 w.r.t. phi: -(phi c - s) c^T / ||phi c - s||^2."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    r = phi @ c - np.atleast_1d(np.asarray(s, dtype=float))
    n2 = float(r @ r)
    if n2 == 0.0:
        raise ValueError("degenerate reprojection: phi c == s")
    return -np.outer(r, c) / n2


def save_network(path, dictionary: Dictionary, gram: LateralGram, hyper: DlbpHyper,
                 rng: np.random.Generator | None = None) -> None:
    rng_state = json.dumps(rng.bit_generator.state, sort_keys=True) if rng is not None else ""
    write_container(path, CHECKPOINT_MAGIC, {
        "dt": np.array(hyper.dt, dtype="<f8"),
        "dims": np.array([dictionary.N, dictionary.M], dtype="<i8"),
        "phi": dictionary.phi.astype("<f8"),
        "wtilde": gram.wt.astype("<f8"),
        "hyper": json.dumps(hyper.to_dict(), sort_keys=True),
        "rng": rng_state,
    })


def load_network(path):
    d = read_container(path, CHECKPOINT_MAGIC)
    for key in ("dt", "dims", "phi", "wtilde", "hyper", "rng"):
        if key not in d:
            raise FormatError(f"missing section {key!r}")
    hyper = DlbpHyper.from_dict(json.loads(d["hyper"]))
    rng = None
    if d["rng"]:
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(d["rng"])
    return Dictionary(d["phi"]), LateralGram(d["wtilde"]), hyper, rng

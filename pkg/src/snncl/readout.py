"""Convolutional sigmoid readout, focal loss, Adam and the task-driven signal.

Shapes: rate tensors are D_x x D_y x M, the kernel Psi is r_x x r_y x M and
the attention map is D_x x D_y.  The convolution is a stride-1
cross-correlation with zero padding (r-1)//2 before and r//2 after, so
the map keeps the D_x x D_y shape.

Backward chain for the task-driven gradient v = dL/dT:
  dL/dz (focal) -> dL/dT* (transposed conv) -> dL/dT~ = dL/dT* / sigma
  -> dL/dT_k = sgn(T_k) (g_k / S - sum_c g_c |T_c| / S^2),  S = sum_c |T_c|
with the |.| subgradient taken as 0 at T = 0 and v = 0 where S = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .spiking import DT, MU, TAU_M

LOG_CLAMP = 1e-12


@dataclass
class Readout:
    Psi: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.Psi = np.asarray(self.Psi, dtype=float)
        if self.Psi.ndim != 3:
            raise ValueError("Psi must be r_x x r_y x M")
        self.b = float(self.b)

    @classmethod
    def zeros(cls, r_x=12, r_y=12, M=64):
        return cls(np.zeros((r_x, r_y, M)), 0.0)

    def copy(self):
        return Readout(self.Psi.copy(), self.b)


def _pads(r):
    return (r - 1) // 2, r // 2


def _check(T, ro: Readout):
    T = np.asarray(T, dtype=float)
    if T.ndim != 3 or T.shape[2] != ro.Psi.shape[2]:
        raise ValueError(f"rate tensor {T.shape} does not match kernel {ro.Psi.shape}")
    return T


def readout_logits(T_star, ro: Readout):
    T = _check(T_star, ro)
    rx, ry, _ = ro.Psi.shape
    Dx, Dy, _ = T.shape
    (px0, px1), (py0, py1) = _pads(rx), _pads(ry)
    Tp = np.pad(T, ((px0, px1), (py0, py1), (0, 0)))
    z = np.full((Dx, Dy), ro.b)
    for i in range(rx):
        for j in range(ry):
            z += Tp[i:i + Dx, j:j + Dy, :] @ ro.Psi[i, j]
    return z


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def readout_forward(T_star, ro: Readout):
    """Attention map in (0, 1)."""
    return sigmoid(readout_logits(T_star, ro))


def readout_backward(T_star, ro: Readout, G):
    """Gradients of sum(G * logits) w.r.t. (Psi, b, T_star)."""
    T = _check(T_star, ro)
    G = np.asarray(G, dtype=float)
    if G.shape != T.shape[:2]:
        raise ValueError("gradient map does not match the rate tensor")
    rx, ry, _ = ro.Psi.shape
    (px0, px1), (py0, py1) = _pads(rx), _pads(ry)
    Dx, Dy, M = T.shape
    Tp = np.pad(T, ((px0, px1), (py0, py1), (0, 0)))
    dPsi = np.empty_like(ro.Psi)
    g = G.ravel()
    for i in range(rx):
        for j in range(ry):
            dPsi[i, j] = g @ Tp[i:i + Dx, j:j + Dy, :].reshape(-1, M)
    db = float(G.sum())
    # transposed correlation: pad G the other way round and flip the kernel
    Gp = np.pad(G, ((px1, px0), (py1, py0)))
    gwin = sliding_window_view(Gp, (rx, ry)).reshape(Dx * Dy, rx * ry)
    dT = (gwin @ ro.Psi[::-1, ::-1, :].reshape(rx * ry, M)).reshape(Dx, Dy, M)
    return dPsi, db, dT


# -- labels and loss ----------------------------------------------------------

def label_map(box, D_x: int, D_y: int):
    """Binary D_x x D_y map, ones at cells whose normalised coordinates fall
    inside the box.  A present box thinner than a cell marks the cell
    nearest to its centre, so present labels always carry a positive."""
    y = np.zeros((D_x, D_y), dtype=np.int8)
    if box is None:
        return y
    bx1, by1, bx2, by2 = box
    rows = np.arange(D_x) / max(D_x - 1, 1)
    cols = np.arange(D_y) / max(D_y - 1, 1)
    rin = (rows >= by1) & (rows <= by2)
    cin = (cols >= bx1) & (cols <= bx2)
    y[np.ix_(rin, cin)] = 1
    if not y.any():
        i = int(np.argmin(np.abs(rows - (by1 + by2) / 2)))
        j = int(np.argmin(np.abs(cols - (bx1 + bx2) / 2)))
        y[i, j] = 1
    return y


def median_freq_weights(y):
    """w = f_m / N_class with f_m the mean class count; all ones if a class is missing."""
    y = np.asarray(y)
    n1 = int(np.count_nonzero(y))
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        return np.ones(y.shape)
    fm = (n0 + n1) / 2.0
    return np.where(y != 0, fm / n1, fm / n0)


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 0.5

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def focal_loss(attention, y, params: FocalParams = FocalParams(), weights=None):
    """Mean focal loss and its gradient w.r.t. the pre-sigmoid logits."""
    a = np.asarray(attention, dtype=float)
    y = np.asarray(y)
    if a.shape != y.shape:
        raise ValueError("attention and label maps differ in shape")
    w = median_freq_weights(y) if weights is None else np.asarray(weights, dtype=float)
    pos = y != 0
    p = np.where(pos, a, 1.0 - a)
    s = np.where(pos, 1.0, -1.0)
    g = params.gamma
    logp = np.log(np.maximum(p, LOG_CLAMP))
    q = 1.0 - p
    mod = q ** g
    n = a.size
    loss = float(np.sum(-w * mod * logp) / n)
    grad = w * s * mod * (g * p * logp - q) / n
    return loss, grad


def focal_loss_logits(z, y, params: FocalParams = FocalParams(), weights=None):
    """focal_loss evaluated from the logits.

    p and 1 - p are both taken as sigmoids and log p as a log-sigmoid, so
    confident wrong pixels (|z| beyond ~15) keep full precision instead of
    hitting the log clamp through 1 - sigmoid(z).
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y)
    if z.shape != y.shape:
        raise ValueError("logit and label maps differ in shape")
    w = median_freq_weights(y) if weights is None else np.asarray(weights, dtype=float)
    s = np.where(y != 0, 1.0, -1.0)
    p = sigmoid(s * z)
    q = sigmoid(-s * z)
    logp = -np.logaddexp(0.0, -s * z)
    g = params.gamma
    mod = q ** g
    n = z.size
    loss = float(np.sum(-w * mod * logp) / n)
    grad = w * s * mod * (g * p * logp - q) / n
    return loss, grad


# -- optimiser -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 5e-6
    skipped: int = 0

    @classmethod
    def for_params(cls, params, **kw):
        return cls([np.zeros(np.shape(p)) for p in params],
                   [np.zeros(np.shape(p)) for p in params], **kw)

    def copy(self):
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v], self.t,
                         self.beta1, self.beta2, self.eps, self.lr, self.skipped)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam.  Returns (new_params, ok); a non-finite gradient
    leaves parameters and moments untouched, returns ok=False and counts
    the skip."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter/gradient/state lists differ in length")
    grads = [np.asarray(g, dtype=float) for g in grads]
    for p, g in zip(params, grads):
        if np.shape(p) != g.shape:
            raise ValueError("gradient shape does not match parameter")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return [np.array(p, dtype=float, copy=True) for p in params], False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        out.append(np.asarray(p, dtype=float) - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out, True


# -- task-driven signal ------------------------------------------------------------

def normalize_backward(T, g):
    """Vector-Jacobian product of T -> |T| / sum_c |T| (per location)."""
    T = np.asarray(T, dtype=float)
    A = np.abs(T)
    S = A.sum(axis=-1, keepdims=True)
    safe = np.where(S > 0, S, 1.0)
    inner = (g * A).sum(axis=-1, keepdims=True)
    v = np.sign(T) * (g / safe - inner / safe ** 2)
    return np.where(S > 0, v, 0.0)


def td_gradient(dlogits, ro: Readout, sigma, T, T_tilde=None):
    """dL/dT per location and channel (the task-driven signal v).

    sigma is the channel scale used in the forward pass.  T_tilde is
    accepted for interface symmetry; the Jacobian only needs T.
    """
    _, _, dTstar = readout_backward(np.zeros_like(np.asarray(T, dtype=float)), ro, dlogits)
    g = dTstar / np.asarray(sigma, dtype=float)
    return normalize_backward(T, g)


def td_spike_encode(v, steps: int, gain: float = 10.0, dt: float = DT,
                    tau_m: float = TAU_M, mu: float = MU):
    """Push-pull LIF encoding of a constant signal v: (steps, *v.shape) int8.

    Each component drives a pair with currents +gain*v and -gain*v; the
    positive neuron emits +1 spikes and the negative one -1 spikes.
    """
    v = np.asarray(v, dtype=float)
    J = gain * v
    a = dt / tau_m
    Vp = np.zeros_like(J)
    Vn = np.zeros_like(J)
    out = np.zeros((steps,) + J.shape, dtype=np.int8)
    for t in range(steps):
        Vp += a * (J - Vp)
        Vn += a * (-J - Vn)
        sp = Vp >= mu
        sn = Vn >= mu
        Vp[sp] = 0.0
        Vn[sn] = 0.0
        out[t] = sp.astype(np.int8) - sn.astype(np.int8)
    return out


def td_stdp_apply(phi, u_spikes, s_spikes, lambda_s: float, params, dt: float = DT):
    """Dense task-driven update for one network (no spatial sweep).

    phi       N x M dictionary, updated in place and returned
    u_spikes  (steps, M) signed TD spikes
    s_spikes  (steps, N) signed input spikes
    Row j of phi (error side) gets -lambda_s*eta2*STDP{post=s_j, pre=u};
    row i of phi^T (coding side) gets -lambda_s*eta2*STDP{post=u_i, pre=s}.
    Both land on the same storage.  Pairing uses all-pairs traces with the
    same-step pair counted once, shared between the two directions.
    """
    from .plasticity import PairingState, stdp_increment

    phi = np.asarray(phi)
    u_spikes = np.asarray(u_spikes, dtype=float)
    s_spikes = np.asarray(s_spikes, dtype=float)
    N, M = phi.shape
    if u_spikes.shape[1:] != (M,) or s_spikes.shape[1:] != (N,) \
            or len(u_spikes) != len(s_spikes):
        raise ValueError("spike trains do not match the dictionary")
    if lambda_s == 0.0:
        return phi
    err_side = PairingState(N, M, params, dt)
    code_side = PairingState(M, N, params, dt)
    acc = np.zeros((N, M))
    for u, s in zip(u_spikes, s_spikes):
        acc += stdp_increment(s, u, err_side, params)
        acc += stdp_increment(u, s, code_side, params).T
    phi -= lambda_s * params.eta2 * params.sign * acc
    return phi


# -- export ------------------------------------------------------------------------

def write_pgm(A, path):
    """Binary P5 greyscale, value round(255 * A) clipped to [0, 255]."""
    A = np.asarray(A, dtype=float)
    img = np.clip(np.rint(255.0 * A), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_map_csv(A, path):
    """Row-major float CSV with 6 significant digits."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    with open(path, "w", newline="") as fh:
        for row in A:
            fh.write(",".join(f"{v:.6g}" for v in row) + "\n")


def read_map_csv(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)

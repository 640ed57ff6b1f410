"""Discrete-time spiking primitives on a fixed dt grid.

Every state object accepts scalars or numpy arrays, so one object can hold
a single neuron or a whole layer.  Step functions are pure: they return a
new state and leave the argument untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

DT = 0.005
TAU_M = 0.07
TAU_S = 0.01
MU = 0.15
RATE_WINDOW = 20


class NumericInputError(ValueError):
    """Raised when a non-finite value reaches a neuron or filter."""


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericInputError(f"non-finite {what}")


@dataclass
class SimClock:
    dt: float = DT
    step_index: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.step_index < 0:
            raise ValueError("step_index must be non-negative")

    def tick(self, n: int = 1) -> int:
        if n < 0:
            raise ValueError("clock cannot run backwards")
        self.step_index += n
        return self.step_index

    @property
    def t(self) -> float:
        return self.step_index * self.dt


@dataclass
class LifState:
    """Leaky integrate-and-fire membrane.  V may be a scalar or an array."""
    V: np.ndarray | float = 0.0
    tau_m: float = TAU_M
    mu: float = MU

    def __post_init__(self):
        if not self.tau_m > 0 or not self.mu > 0:
            raise ValueError("tau_m and mu must be positive")


def lif_step(state: LifState, J_in, dt: float = DT):
    """Forward-Euler membrane update with reset to zero at threshold."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    _check_finite(J_in, "input current")
    V = state.V + (dt / state.tau_m) * (np.asarray(J_in, dtype=float) - state.V)
    spike = V >= state.mu
    V = np.where(spike, 0.0, V)
    if np.ndim(V) == 0:
        return replace(state, V=float(V)), int(spike)
    return replace(state, V=V), spike.astype(np.int8)


def first_spike_time(J: float, tau_m: float = TAU_M, mu: float = MU) -> float:
    """Closed-form first threshold crossing for constant J > mu from V=0."""
    if J <= mu:
        return math.inf
    return -tau_m * math.log(1.0 - mu / J)


@dataclass
class PscFilter:
    """Exponential post-synaptic current with impulse response e^{-t/tau}/tau."""
    y: np.ndarray | float = 0.0
    tau_s: float = TAU_S

    def __post_init__(self):
        if not self.tau_s > 0:
            raise ValueError("tau_s must be positive")


def psc_step(f: PscFilter, spike_in, dt: float = DT):
    _check_finite(spike_in, "filter input")
    y = f.y * math.exp(-dt / f.tau_s) + np.asarray(spike_in, dtype=float) / f.tau_s
    if np.ndim(y) == 0:
        y = float(y)
    return replace(f, y=y), y


def psc_dc_gain(dt: float = DT, tau_s: float = TAU_S) -> float:
    """Steady-state PSC output for one unit spike per step."""
    return (1.0 / tau_s) / (1.0 - math.exp(-dt / tau_s))


@dataclass
class PushPullPair:
    """Two LIF neurons fed +J and -J; output is the signed spike difference."""
    pos: LifState = field(default_factory=LifState)
    neg: LifState = field(default_factory=LifState)

    def __post_init__(self):
        if self.pos.tau_m != self.neg.tau_m or self.pos.mu != self.neg.mu:
            raise ValueError("push-pull halves must share tau_m and mu")

    @classmethod
    def zeros(cls, shape=(), tau_m=TAU_M, mu=MU):
        if shape == ():
            return cls(LifState(0.0, tau_m, mu), LifState(0.0, tau_m, mu))
        return cls(LifState(np.zeros(shape), tau_m, mu),
                   LifState(np.zeros(shape), tau_m, mu))


def pushpull_step(pair: PushPullPair, J_in, dt: float = DT):
    J = np.asarray(J_in, dtype=float)
    pos, sp = lif_step(pair.pos, J, dt)
    neg, sn = lif_step(pair.neg, -J, dt)
    out = sp - sn
    if np.ndim(out) != 0:
        out = out.astype(np.int8)
    return PushPullPair(pos, neg), out


class RateWindow:
    """Ring buffer of the last n_s signed spike frames and their running sum.

    Frames may be scalars or arrays of a fixed shape.  Before n_s frames have
    been pushed the missing slots count as zeros.
    """

    def __init__(self, shape=(), n_s: int = RATE_WINDOW):
        if n_s < 1:
            raise ValueError("window length must be >= 1")
        self.n_s = n_s
        self.buf = np.zeros((n_s,) + tuple(shape), dtype=np.int8)
        self.total = np.zeros(tuple(shape), dtype=np.int64)
        self.pos = 0
        self.count = 0

    def push(self, spikes) -> None:
        spikes = np.asarray(spikes, dtype=np.int8)
        if np.any(np.abs(spikes) > 1):
            raise ValueError("signed spikes must lie in {-1, 0, +1}")
        self.total += spikes.astype(np.int64) - self.buf[self.pos]
        self.buf[self.pos] = spikes
        self.pos = (self.pos + 1) % self.n_s
        self.count += 1

    def copy(self) -> "RateWindow":
        w = RateWindow(self.total.shape, self.n_s)
        w.buf[...] = self.buf
        w.total[...] = self.total
        w.pos, w.count = self.pos, self.count
        return w


def rate_estimate(w: RateWindow):
    r = w.total / w.n_s
    return float(r) if np.ndim(r) == 0 else r

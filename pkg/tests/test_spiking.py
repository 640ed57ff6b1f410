import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snncl.spiking import (DT, MU, TAU_M, LifState, NumericInputError, PscFilter, PushPullPair,
                           RateWindow, SimClock, first_spike_time, lif_step, psc_dc_gain, psc_step,
                           pushpull_step, rate_estimate)


def test_clock_ticks_and_rejects_negative():
    c = SimClock()
    assert c.tick(3) == 3
    assert c.t == pytest.approx(3 * DT)
    with pytest.raises(ValueError):
        c.tick(-1)
    with pytest.raises(ValueError):
        SimClock(dt=0.0)


def test_lif_subthreshold_relaxes_to_input():
    s = LifState()
    for _ in range(2000):
        s, sp = lif_step(s, 0.1)
        assert sp == 0
    assert s.V == pytest.approx(0.1, rel=1e-9)


def test_lif_first_spike_matches_closed_form():
    # forward Euler reaches threshold at the first step n with
    # 1 - (1 - dt/tau)^n >= mu / J; the continuous crossing lies within one step
    J = 0.4
    s, n = LifState(), 0
    while True:
        s, sp = lif_step(s, J)
        n += 1
        if sp:
            break
    a = DT / TAU_M
    n_ref = math.ceil(math.log(1 - MU / J) / math.log(1 - a))
    assert n == n_ref
    assert abs(n * DT - first_spike_time(J)) <= DT


def test_lif_rejects_non_finite():
    with pytest.raises(NumericInputError):
        lif_step(LifState(), np.nan)


@given(st.floats(-5, 5))
def test_pushpull_never_fires_both(J):
    pair = PushPullPair.zeros()
    for _ in range(50):
        pair, out = pushpull_step(pair, J)
        assert out in (-1, 0, 1)
        if J >= 0:
            assert out >= 0
        else:
            assert out <= 0


@given(st.floats(0.2, 4.0))
def test_pushpull_is_odd(J):
    a, b = PushPullPair.zeros(), PushPullPair.zeros()
    for _ in range(40):
        a, oa = pushpull_step(a, J)
        b, ob = pushpull_step(b, -J)
        assert oa == -ob


def test_psc_dc_gain_matches_simulation():
    f = PscFilter()
    for _ in range(500):
        f, y = psc_step(f, 1.0)
    assert y == pytest.approx(psc_dc_gain(), rel=1e-12)


@settings(max_examples=50)
@given(st.lists(st.sampled_from([-1, 0, 1]), min_size=1, max_size=80), st.integers(1, 25))
def test_rate_window_matches_trailing_mean(spikes, n_s):
    w = RateWindow(n_s=n_s)
    for k, s in enumerate(spikes):
        w.push(s)
        tail = spikes[max(0, k + 1 - n_s):k + 1]
        assert rate_estimate(w) == pytest.approx(sum(tail) / n_s)


def test_rate_window_rejects_graded_spikes():
    with pytest.raises(ValueError):
        RateWindow().push(2)

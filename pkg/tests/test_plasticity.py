import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snncl.plasticity import (PairingState, StdpParams, apply_stdp, expected_stdp, negative_params,
                              stdp_delta, stdp_increment)


def test_kernel_values():
    p = StdpParams()
    assert stdp_delta(0.0, p) == pytest.approx(1.0)
    assert stdp_delta(0.02, p) == pytest.approx(np.exp(-1.0))
    assert stdp_delta(-0.008, p) == pytest.approx(-0.8 * np.exp(-1.0))
    assert p.kernel_area == pytest.approx(0.0136)


def test_negative_params_scale_and_sign():
    n = negative_params(StdpParams())
    assert (n.A_plus, n.A_minus, n.sign) == (0.01, 0.008, -1)
    assert stdp_delta(0.01, n) == pytest.approx(-stdp_delta(0.01) / 100)


def test_invalid_params():
    with pytest.raises(ValueError):
        StdpParams(tau_plus=0)
    with pytest.raises(ValueError):
        StdpParams(A_plus=-1)
    with pytest.raises(ValueError):
        PairingState(1, 1, pairing="triplet")


def _brute_all_pairs(post_train, pre_train, p, dt):
    """Direct double sum over spike pairs; same-step pairs get half of
    each branch (A+ - A-) / 2."""
    dw = 0.0
    for tp, sp in enumerate(post_train):
        for tq, sq in enumerate(pre_train):
            if sp == 0 or sq == 0:
                continue
            lag = (tp - tq) * dt
            if lag == 0:
                k = 0.5 * (p.A_plus - p.A_minus)
            else:
                k = stdp_delta(lag, p)
            dw += sp * sq * k
    return dw


@given(st.lists(st.sampled_from([-1, 0, 0, 0, 1]), min_size=1, max_size=40),
       st.lists(st.sampled_from([-1, 0, 0, 0, 1]), min_size=1, max_size=40))
def test_all_pairs_traces_equal_direct_sum(post, pre):
    n = min(len(post), len(pre))
    post, pre = post[:n], pre[:n]
    p = StdpParams()
    st_ = PairingState(1, 1, p)
    acc = 0.0
    for a, b in zip(post, pre):
        acc += stdp_increment(np.array([a], float), np.array([b], float), st_, p)[0, 0]
    assert acc == pytest.approx(_brute_all_pairs(post, pre, p, st_.dt), abs=1e-9)


def test_nearest_pairing_uses_latest_spike_only():
    p = StdpParams()
    st_ = PairingState(1, 1, p, pairing="nearest")
    seq = [(0, 1), (0, 1), (1, 0)]  # two pre spikes, then a post spike
    acc = 0.0
    for post, pre in seq:
        acc += stdp_increment(np.array([post], float), np.array([pre], float), st_, p)[0, 0]
        st_.step += 1
    assert acc == pytest.approx(p.A_plus * np.exp(-st_.dt / p.tau_plus))


def test_apply_stdp_scales_by_sign_and_eta():
    p = negative_params(StdpParams())
    st_ = PairingState(1, 2, p)
    w = apply_stdp(np.zeros(2), 1.0, np.array([1.0, 0.0]), st_, p)
    assert w[0] == pytest.approx(-p.eta2 * 0.5 * (p.A_plus - p.A_minus))
    assert w[1] == 0.0
    with pytest.raises(ValueError):
        apply_stdp(np.zeros(3), 1.0, np.array([1.0, 0.0]), st_, p)


def test_expected_stdp_is_bilinear():
    p = StdpParams()
    assert expected_stdp(2.0, 3.0, p) == pytest.approx(6 * expected_stdp(1.0, 1.0, p))
    assert expected_stdp(1.0, 1.0, negative_params(p)) == pytest.approx(
        -expected_stdp(1.0, 1.0, p) / 100)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snncl.conv import (ChannelStats, ConvGeometry, ConvSnn, channel_normalize, conv_forward,
                        export_rate_tensor, extract_patches, standard_scale, tensor_dims)
from snncl.dlbp import DlbpHyper, Dictionary, LateralGram, NetworkState, init_dictionary, network_step
from snncl.plasticity import StdpParams
from snncl.readout import td_spike_encode, td_stdp_apply

SMALL = ConvGeometry(H=14, W=17, l_x=6, l_y=6, d=4, M=8)


def _frames(g, n, p, seed):
    rng = np.random.default_rng(seed)
    return [((rng.random((g.H, g.W)) < p) * rng.choice([-1, 1], (g.H, g.W))).astype(np.int8)
            for _ in range(n)]


def _step(eng, fr):
    r, c = np.nonzero(fr)
    eng.step(r.astype(np.int64), c.astype(np.int64), fr[r, c].astype(float))


def test_default_shapes():
    assert tensor_dims(ConvGeometry()) == (21, 29, 64)
    assert tensor_dims(SMALL) == (3, 3, 8)
    with pytest.raises(ValueError):
        ConvGeometry(H=10, l_x=30)


def test_patch_extraction_ordering():
    fr = np.arange(SMALL.H * SMALL.W).reshape(SMALL.H, SMALL.W)
    P = extract_patches(fr, SMALL)
    assert P.shape == (9, 36)
    # location (1, 2) starts at pixel (4, 8)
    assert P[1 * 3 + 2, 0] == fr[4, 8]
    assert P[1 * 3 + 2, -1] == fr[9, 13]


@pytest.mark.parametrize("input_gain", [1.0, 3.0])
def test_engine_matches_dense_reference(input_gain):
    """Compiled event-driven engine vs the batched numpy reference network."""
    g = SMALL
    d1 = init_dictionary(g.N, g.M, 0.1, 1)
    d2 = Dictionary(d1.phi.copy())
    g1, g2 = LateralGram(M=g.M), LateralGram(M=g.M)
    h = DlbpHyper(input_gain=input_gain, spike_gain=20)
    eng = ConvSnn(g, d2, g2, h, quiescence=0)
    ref = NetworkState(g.N, g.M, g.n_locations)
    worst = 0.0
    for fr in _frames(g, 200, 0.15, 0):
        c, _ = network_step(ref, d1, g1, h, extract_patches(fr, g))
        _step(eng, fr)
        assert np.array_equal(c, eng.c_now)
        worst = max(worst, np.abs(d1.phi - d2.phi).max(), np.abs(g1.wt - g2.wt).max())
    assert worst < 1e-12
    assert np.abs(d1.phi - init_dictionary(g.N, g.M, 0.1, 1).phi).max() > 1e-4  # it learned


def test_quiescent_locations_are_skipped_exactly():
    g = SMALL
    h = DlbpHyper(mode="frozen", input_gain=3.0)
    d = init_dictionary(g.N, g.M, 0.1, 1)
    eng = ConvSnn(g, d, LateralGram(d.phi.T @ d.phi), h, quiescence=5)
    fr = _frames(g, 1, 0.3, 2)[0]
    _step(eng, fr)
    empty = np.zeros((g.H, g.W), np.int8)
    for _ in range(80):
        _step(eng, empty)
    assert eng.awake.sum() == 0
    assert np.all(eng.Je == 0)


def test_td_replay_matches_dense_per_location():
    """Sparse sweep kernel vs td_stdp_apply on every patch, summed."""
    g = SMALL
    h = DlbpHyper(mode="frozen")
    d = init_dictionary(g.N, g.M, 0.1, 3)
    eng = ConvSnn(g, Dictionary(d.phi.copy()), LateralGram(M=g.M), h)
    frames = _frames(g, 20, 0.2, 4)
    v = np.random.default_rng(5).normal(size=(g.D_x, g.D_y, g.M))
    lam = 0.8
    delta = eng.td_replay([(*np.nonzero(f), f[np.nonzero(f)].astype(float)) for f in frames],
                          v, 10.0, lam)
    u = td_spike_encode(v.reshape(g.n_locations, g.M), len(frames), gain=10.0)
    s = np.stack([extract_patches(f, g) for f in frames])
    p = StdpParams(eta2=h.eta2)
    ref = np.zeros_like(d.phi)
    for loc in range(g.n_locations):
        phi_l = np.zeros_like(d.phi)
        td_stdp_apply(phi_l, u[:, loc], s[:, loc], lam, p)
        ref += phi_l
    ref /= g.n_locations
    assert np.abs(ref).max() > 0
    assert np.allclose(delta, ref, rtol=1e-10, atol=1e-14)


def test_conv_forward_rates_in_range():
    g = SMALL
    d = init_dictionary(g.N, g.M, 0.1, 1)
    eng = ConvSnn(g, d, LateralGram(d.phi.T @ d.phi), DlbpHyper(mode="frozen", input_gain=3.0))
    T = conv_forward(_frames(g, 20, 0.3, 6), g, eng)
    assert T.shape == tensor_dims(g)
    assert np.all(np.abs(T) <= 1)
    with pytest.raises(ValueError):
        conv_forward(_frames(g, 5, 0.3, 6), g, eng)


def test_state_dict_roundtrip_reproduces_run():
    g = SMALL
    d = init_dictionary(g.N, g.M, 0.1, 1)
    h = DlbpHyper(input_gain=3.0)
    eng = ConvSnn(g, d, LateralGram(M=g.M), h)
    frames = _frames(g, 40, 0.2, 7)
    for fr in frames[:20]:
        _step(eng, fr)
    saved = {k: v.copy() for k, v in eng.state_dict().items()}
    phi_s, wt_s = d.phi.copy(), eng.gram.wt.copy()
    for fr in frames[20:]:
        _step(eng, fr)
    out1 = eng.window_rates().copy()
    eng.load_state_dict(saved)
    d.phi[...] = phi_s
    eng.gram.wt[...] = wt_s
    for fr in frames[20:]:
        _step(eng, fr)
    assert np.array_equal(out1, eng.window_rates())


@settings(max_examples=50)
@given(arrays(np.float64, (3, 4, 5), elements=st.floats(-10, 10)))
def test_channel_normalize_sums_to_one_or_zero(T):
    s = channel_normalize(T).sum(-1)
    assert np.all((s == 0) | (np.abs(s - 1) <= 1e-9))
    assert np.all(channel_normalize(T) >= 0)


@settings(max_examples=30)
@given(arrays(np.float64, (4, 4, 3), elements=st.floats(-5, 5)), st.floats(0.1, 10))
def test_channel_normalize_scale_invariant(T, k):
    assert np.allclose(channel_normalize(T), channel_normalize(k * T))


def test_standard_scale_freeze_and_floor():
    stats = ChannelStats.init(3)
    T = np.ones((2, 2, 3))
    Ts, new = standard_scale(T, stats, update=False)
    assert new is stats
    _, new = standard_scale(T, stats, update=True)
    assert np.all(new.sigma >= new.floor)
    assert np.allclose(new.mu, 0.01)


def test_export_rate_tensor(tmp_path):
    T = np.arange(24, dtype=float).reshape(2, 3, 4)
    export_rate_tensor(T, tmp_path / "t.bin", tmp_path / "t.json")
    back = np.fromfile(tmp_path / "t.bin", "<f8").reshape(2, 3, 4)
    assert np.array_equal(back, T)
    assert '"dims": [2, 3, 4]' in (tmp_path / "t.json").read_text()

"""Single-pass continual learning of the convolutional SNN and its readout.

One window = n_s consecutive dt steps, windows do not overlap and are
visited once in temporal order.  Per window:

  1. the engine runs the window with plasticity on: the unsupervised
     negative-STDP term scaled by lambda_u, the lambda2 decay and the
     lateral Gram rule (the latter only if lambda_u > 0 or lambda_s > 0);
  2. the window rates are normalised, standard-scaled (statistics are
     updated every window) and read out into an attention map;
  3. with a label: focal loss, an Adam step on (Psi, b), then, unless the
     loss is below theta_th, the task-driven STDP term scaled by lambda_s,
     computed from the pre-update readout;
  4. without a label, Psi and b stay frozen.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .config import ClConfig
from .container import FormatError, read_container, write_container
from .conv import ChannelStats, ConvSnn, channel_normalize, standard_scale
from .dlbp import CHECKPOINT_MAGIC, DlbpHyper, LateralGram, init_dictionary
from .events import EventStream, LabelInterval, LabelTrack, SpikeFrames, bin_events
from .readout import (AdamState, FocalParams, Readout, adam_step, focal_loss_logits, label_map,
                      normalize_backward, readout_backward, readout_forward, readout_logits)

CHECKPOINT_KIND = "continual-model"
LOG_HEADER = "window,t_start_us,loss,label_present,td_pruned,phi_fro,psi_fro"


class SinglePassError(RuntimeError):
    """A window at or before the last processed one was submitted."""


@dataclass
class WindowRecord:
    window: int
    t_start_us: int
    loss: float
    label_present: bool
    td_pruned: bool
    phi_fro: float
    psi_fro: float
    # instrumentation, not part of the CSV
    td_delta_fro: float = 0.0
    psi_delta_fro: float = 0.0
    b_delta: float = 0.0
    adam_ok: bool = True

    def csv_row(self):
        loss = "nan" if math.isnan(self.loss) else repr(self.loss)
        return (f"{self.window},{self.t_start_us},{loss},{int(self.label_present)},"
                f"{int(self.td_pruned)},{self.phi_fro!r},{self.psi_fro!r}")


class TrainLog:
    """Append-only per-window records with increasing window index and time."""

    def __init__(self):
        self.records: list[WindowRecord] = []

    def __len__(self):
        return len(self.records)

    def append(self, rec: WindowRecord):
        if self.records:
            last = self.records[-1]
            if rec.window <= last.window or rec.t_start_us <= last.t_start_us:
                raise SinglePassError("train log records must advance in time")
        self.records.append(rec)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(LOG_HEADER + "\n")
            for r in self.records:
                fh.write(r.csv_row() + "\n")


class Model:
    def __init__(self, cfg: ClConfig, engine: ConvSnn, readout: Readout, adam: AdamState,
                 stats: ChannelStats, window: int = -1):
        self.cfg = cfg
        self.engine = engine
        self.readout = readout
        self.adam = adam
        self.stats = stats
        self.window = window

    @classmethod
    def create(cls, cfg: ClConfig):
        g = cfg.geometry()
        dictionary = init_dictionary(g.N, g.M, cfg.sigma_w, cfg.seed)
        gram = LateralGram(M=g.M)
        engine = ConvSnn(g, dictionary, gram, cfg.hyper(), cfg.n_s, cfg.quiescence)
        ro = Readout.zeros(cfg.r_x, cfg.r_y, g.M)
        adam = AdamState.for_params([ro.Psi, np.zeros(())], beta1=cfg.beta1, beta2=cfg.beta2,
                                    eps=cfg.adam_eps, lr=cfg.eta_r)
        stats = ChannelStats.init(g.M, cfg.stats_momentum)
        return cls(cfg, engine, ro, adam, stats)

    @property
    def phi(self):
        return self.engine.dictionary.phi

    @property
    def geometry(self):
        return self.engine.g


def _window_frames(frames: SpikeFrames, w: int, n_s: int):
    return [frames.step(k) for k in range(w * n_s, (w + 1) * n_s)]


def _run_window(engine: ConvSnn, win, learn: bool):
    for r, c, v in win:
        engine.step(r, c, v.astype(np.float64), learn=learn)


def attention_from_rates(T, model: Model, update_stats: bool):
    T_tilde = channel_normalize(T)
    stats_used = model.stats
    T_star, new_stats = standard_scale(T_tilde, model.stats, update=update_stats)
    if update_stats:
        model.stats = new_stats
    return T_tilde, T_star, stats_used


def cl_step(model: Model, frames, label: LabelInterval | None, window: int,
            t_start_us: int) -> WindowRecord:
    """Process one window of per-step (rows, cols, vals) input spikes."""
    cfg = model.cfg
    if window <= model.window:
        raise SinglePassError(f"window {window} already processed (last {model.window})")
    if len(frames) < cfg.n_s:
        raise ValueError("window shorter than the rate window")
    eng = model.engine
    _run_window(eng, frames, learn=True)
    model.window = window
    g = eng.g
    T = eng.window_rates()
    T_tilde, T_star, stats_used = attention_from_rates(T, model, update_stats=True)
    present = label is not None and label.present
    loss = float("nan")
    pruned = False
    td_fro = psi_d = b_d = 0.0
    ok = True
    if present:
        y = label_map(label.box, g.D_x, g.D_y)
        ro = model.readout
        loss, dz = focal_loss_logits(readout_logits(T_star, ro), y, FocalParams(cfg.gamma))
        dPsi, db, dTstar = readout_backward(T_star, ro, dz)
        old_psi, old_b = ro.Psi, ro.b
        (new_psi, new_b), ok = adam_step([ro.Psi, np.array(ro.b)], [dPsi, np.array(db)],
                                         model.adam)
        model.readout = Readout(new_psi, float(new_b))
        psi_d = float(np.linalg.norm(new_psi - old_psi))
        b_d = float(new_b) - old_b
        pruned = loss < cfg.theta_th
        if not pruned and cfg.lambda_s > 0:
            v = normalize_backward(T, dTstar / stats_used.sigma)
            if cfg.td_normalize:
                m = np.max(np.abs(v))
                v = v / m if m > 0 else v
            delta = eng.td_replay(frames, v, cfg.g_td, cfg.lambda_s)
            td_fro = float(np.linalg.norm(delta))
    return WindowRecord(window, int(t_start_us), loss, present, pruned,
                        float(np.linalg.norm(model.phi)),
                        float(np.linalg.norm(model.readout.Psi)),
                        td_fro, psi_d, b_d, ok)


def sequence_steps(events: EventStream, labels: LabelTrack | None, dt: float) -> int:
    dt_us = int(round(dt * 1e6))
    n = int(events.t_us[-1]) // dt_us + 1 if len(events) else 0
    if labels is not None and len(labels):
        n = max(n, labels.intervals[-1].t_end_us // dt_us)
    return n


def run_sequence(events: EventStream, labels: LabelTrack, cfg: ClConfig | None = None,
                 model: Model | None = None, start_window: int = 0,
                 stop_window: int | None = None, callback=None):
    """Train on one sequence in a single pass; returns (model, TrainLog).

    start_window/stop_window select a span of windows, so a run can be
    split at a checkpoint and resumed.  callback(model, record) runs after
    every window.
    """
    if model is None:
        model = Model.create(cfg if cfg is not None else ClConfig())
    cfg = model.cfg
    events.validate()
    log = TrainLog()
    if len(events) == 0:
        return model, log
    g = model.geometry
    n_steps = sequence_steps(events, labels, cfg.dt)
    frames = bin_events(events, cfg.dt, g.H, g.W, n_steps=n_steps)
    n_windows = n_steps // cfg.n_s
    stop = n_windows if stop_window is None else min(stop_window, n_windows)
    dt_us = int(round(cfg.dt * 1e6))
    win_us = cfg.n_s * dt_us
    for w in range(start_window, stop):
        t0 = w * win_us
        label = labels.at(t0 + win_us // 2) if labels is not None else None
        rec = cl_step(model, _window_frames(frames, w, cfg.n_s), label, w, t0)
        log.append(rec)
        if callback is not None:
            callback(model, rec)
    return model, log


def infer_sequence(model: Model, events: EventStream, n_steps: int | None = None):
    """Frozen inference from a fresh neuron state: [(t_start_us, map)] per window.

    Weights, statistics and the readout are left untouched.
    """
    cfg = model.cfg
    g = model.geometry
    eng = model.engine
    saved = {k: v.copy() for k, v in eng.state_dict().items()}
    eng.reset_state()
    events.validate()
    if n_steps is None:
        n_steps = sequence_steps(events, None, cfg.dt)
    frames = bin_events(events, cfg.dt, g.H, g.W, n_steps=n_steps)
    dt_us = int(round(cfg.dt * 1e6))
    out = []
    try:
        for w in range(n_steps // cfg.n_s):
            _run_window(eng, _window_frames(frames, w, cfg.n_s), learn=False)
            T_tilde = channel_normalize(eng.window_rates())
            T_star, _ = standard_scale(T_tilde, model.stats, update=False)
            out.append((w * cfg.n_s * dt_us, readout_forward(T_star, model.readout)))
    finally:
        eng.load_state_dict(saved)
    return out


# -- checkpoints -----------------------------------------------------------------

def checkpoint_save(model: Model, path) -> None:
    eng = model.engine
    sec = {
        "kind": CHECKPOINT_KIND,
        "config": model.cfg.to_text(),
        "hyper": json.dumps(eng.hyper.to_dict(), sort_keys=True),
        "phi": eng.dictionary.phi.astype("<f8"),
        "wtilde": eng.gram.wt.astype("<f8"),
        "psi": model.readout.Psi.astype("<f8"),
        "b": np.array(model.readout.b, dtype="<f8"),
        "adam_m_psi": model.adam.m[0].astype("<f8"),
        "adam_m_b": np.asarray(model.adam.m[1], dtype="<f8"),
        "adam_v_psi": model.adam.v[0].astype("<f8"),
        "adam_v_b": np.asarray(model.adam.v[1], dtype="<f8"),
        "adam_counters": np.array([model.adam.t, model.adam.skipped], dtype="<i8"),
        "stats_mu": model.stats.mu.astype("<f8"),
        "stats_sigma": model.stats.sigma.astype("<f8"),
        "window": np.array(model.window, dtype="<i8"),
    }
    for k, v in eng.state_dict().items():
        sec["engine/" + k] = v
    write_container(path, CHECKPOINT_MAGIC, sec)


def checkpoint_load(path) -> Model:
    d = read_container(path, CHECKPOINT_MAGIC)
    if d.get("kind") != CHECKPOINT_KIND:
        raise FormatError(f"{path}: not a continual-learning checkpoint")
    cfg = ClConfig.from_text(d["config"], str(path))
    model = Model.create(cfg)
    eng = model.engine
    eng.hyper = DlbpHyper.from_dict(json.loads(d["hyper"]))
    try:
        eng.dictionary.phi[...] = d["phi"]
        eng.gram.wt[...] = d["wtilde"]
        model.readout = Readout(d["psi"].copy(), float(d["b"].reshape(())))
        model.adam.m = [d["adam_m_psi"].copy(), d["adam_m_b"].reshape(()).copy()]
        model.adam.v = [d["adam_v_psi"].copy(), d["adam_v_b"].reshape(()).copy()]
        model.adam.t, model.adam.skipped = (int(x) for x in d["adam_counters"])
        model.stats = ChannelStats(d["stats_mu"].copy(), d["stats_sigma"].copy(),
                                   cfg.stats_momentum)
        model.window = int(d["window"].reshape(()))
        eng.load_state_dict({k[len("engine/"):]: v for k, v in d.items()
                             if k.startswith("engine/")})
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete or mismatched checkpoint ({exc})") from None
    return model

"""Event streams, labels, per-step binning and a DVS scene simulator.

Coordinates: an event's x is the pixel column (< W) and y the row (< H).
Label boxes are normalised output-map coordinates: bx runs along columns
(output map axis D_y) and by along rows (axis D_x), both in [0, 1] with 0
and 1 at the first and last output cell.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, fields

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter

from .conv import ConvGeometry
from .spiking import DT

EVENT_HEADER = "t_us,x,y,p"
LABEL_HEADER = "t_start_us,t_end_us,bx1,by1,bx2,by2"
BIN_MAGIC = b"NSEVT01\x00"
_BIN_DTYPE = np.dtype([("t_us", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


class EventFormatError(ValueError):
    """Malformed, unsorted or out-of-range event or label data."""


@dataclass
class EventStream:
    t_us: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray          # 0 / 1, polarity -1 / +1
    H: int = 130
    W: int = 173

    def __post_init__(self):
        self.t_us = np.asarray(self.t_us, dtype=np.uint64)
        self.x = np.asarray(self.x, dtype=np.uint16)
        self.y = np.asarray(self.y, dtype=np.uint16)
        self.p = np.asarray(self.p, dtype=np.uint8)

    def __len__(self):
        return len(self.t_us)

    @property
    def polarity(self):
        return self.p.astype(np.int8) * 2 - 1

    @classmethod
    def empty(cls, H=130, W=173):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), H, W)

    def validate(self):
        """Raise EventFormatError naming the first bad record (1-based data row)."""
        if len(self) == 0:
            return
        bad = np.flatnonzero(np.diff(self.t_us.astype(np.int64)) < 0)
        if bad.size:
            raise EventFormatError(f"row {bad[0] + 2}: timestamps not sorted")
        for name, arr, lim in (("x", self.x, self.W), ("y", self.y, self.H)):
            out = np.flatnonzero(arr >= lim)
            if out.size:
                raise EventFormatError(f"row {out[0] + 1}: {name}={arr[out[0]]} out of range (< {lim})")
        out = np.flatnonzero(self.p > 1)
        if out.size:
            raise EventFormatError(f"row {out[0] + 1}: polarity must be 0 or 1")

    def equals(self, other) -> bool:
        return (self.H, self.W) == (other.H, other.W) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("t_us", "x", "y", "p"))


def write_events(stream: EventStream, path) -> None:
    """Canonical CSV: header line, then integer rows, '\\n' line endings."""
    df = pd.DataFrame({"t_us": stream.t_us, "x": stream.x, "y": stream.y, "p": stream.p})
    with open(path, "w", newline="") as fh:
        fh.write(EVENT_HEADER + "\n")
        df.to_csv(fh, header=False, index=False, lineterminator="\n")


def _csv_error_line(path):
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1:
                continue
            if len(row) != 4:
                return lineno, "expected 4 fields"
            for v in row:
                try:
                    if int(v) < 0:
                        return lineno, "negative value"
                except ValueError:
                    return lineno, f"non-integer field {v!r}"
    return None, "unreadable file"


def read_events(path, H: int = 130, W: int = 173) -> EventStream:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
    if header != EVENT_HEADER:
        raise EventFormatError(f"{path}: line 1: expected header {EVENT_HEADER!r}")
    try:
        df = pd.read_csv(path, dtype="int64", skiprows=1, header=None,
                         names=["t_us", "x", "y", "p"])
    except (ValueError, pd.errors.ParserError):
        line, why = _csv_error_line(path)
        raise EventFormatError(f"{path}: line {line}: {why}") from None
    vals = df.to_numpy() if len(df) else np.zeros((0, 4), np.int64)
    if len(vals) and (vals < 0).any():
        r = int(np.flatnonzero((vals < 0).any(axis=1))[0])
        raise EventFormatError(f"{path}: line {r + 2}: negative value")
    for col, lim, name in ((1, W, "x"), (2, H, "y"), (3, 2, "p")):
        bad = np.flatnonzero(vals[:, col] >= lim)
        if bad.size:
            raise EventFormatError(f"{path}: line {bad[0] + 2}: {name}={vals[bad[0], col]} out of range")
    bad = np.flatnonzero(np.diff(vals[:, 0]) < 0)
    if bad.size:
        raise EventFormatError(f"{path}: line {bad[0] + 3}: timestamps not sorted")
    return EventStream(vals[:, 0], vals[:, 1], vals[:, 2], vals[:, 3], H, W)


def write_events_bin(stream: EventStream, path) -> None:
    rec = np.empty(len(stream), dtype=_BIN_DTYPE)
    for k in ("t_us", "x", "y", "p"):
        rec[k] = getattr(stream, k)
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC + struct.pack("<IIQ", stream.H, stream.W, len(stream)))
        fh.write(rec.tobytes())


def read_events_bin(path) -> EventStream:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != BIN_MAGIC:
        raise EventFormatError(f"{path}: bad magic")
    if len(buf) < 24:
        raise EventFormatError(f"{path}: truncated header")
    H, W, n = struct.unpack("<IIQ", buf[8:24])
    if len(buf) != 24 + n * _BIN_DTYPE.itemsize:
        raise EventFormatError(f"{path}: truncated or oversized payload")
    rec = np.frombuffer(buf, dtype=_BIN_DTYPE, offset=24, count=n)
    s = EventStream(rec["t_us"], rec["x"], rec["y"], rec["p"], H, W)
    s.validate()
    return s


# -- labels --------------------------------------------------------------------

@dataclass(frozen=True)
class LabelInterval:
    t_start_us: int
    t_end_us: int
    box: tuple | None = None   # (bx1, by1, bx2, by2) or None when absent

    def __post_init__(self):
        if not self.t_start_us < self.t_end_us:
            raise EventFormatError("label interval must have t_start < t_end")
        if self.box is not None:
            bx1, by1, bx2, by2 = self.box
            if not (bx1 < bx2 and by1 < by2):
                raise EventFormatError("label box must have bx1 < bx2 and by1 < by2")

    @property
    def present(self):
        return self.box is not None


class LabelTrack:
    def __init__(self, intervals=()):
        self.intervals = sorted(intervals, key=lambda iv: iv.t_start_us)
        self._starts = np.array([iv.t_start_us for iv in self.intervals], dtype=np.int64)
        for a, b in zip(self.intervals, self.intervals[1:]):
            if b.t_start_us < a.t_end_us:
                raise EventFormatError("label intervals overlap")

    def __len__(self):
        return len(self.intervals)

    def at(self, t_us) -> LabelInterval | None:
        """Interval covering t_us (t_start <= t < t_end), or None."""
        k = int(np.searchsorted(self._starts, t_us, side="right")) - 1
        if k < 0:
            return None
        iv = self.intervals[k]
        return iv if t_us < iv.t_end_us else None


def write_labels(track: LabelTrack, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(LABEL_HEADER + "\n")
        for iv in track.intervals:
            if iv.box is None:
                fh.write(f"{iv.t_start_us},{iv.t_end_us},-1,-1,-1,-1\n")
            else:
                b = ",".join(f"{v:.6f}" for v in iv.box)
                fh.write(f"{iv.t_start_us},{iv.t_end_us},{b}\n")


def read_labels(path) -> LabelTrack:
    out = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or ",".join(rows[0]).strip() != LABEL_HEADER:
        raise EventFormatError(f"{path}: line 1: expected header {LABEL_HEADER!r}")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 6:
            raise EventFormatError(f"{path}: line {lineno}: expected 6 fields")
        try:
            t0, t1 = int(row[0]), int(row[1])
            box = tuple(float(v) for v in row[2:])
        except ValueError:
            raise EventFormatError(f"{path}: line {lineno}: malformed number") from None
        if all(v == -1 for v in box):
            box = None
        elif any(not 0.0 <= v <= 1.0 for v in box):
            raise EventFormatError(f"{path}: line {lineno}: box outside [0, 1]")
        if out and t0 < out[-1].t_end_us:
            raise EventFormatError(f"{path}: line {lineno}: interval out of order or overlapping")
        try:
            out.append(LabelInterval(t0, t1, box))
        except EventFormatError as exc:
            raise EventFormatError(f"{path}: line {lineno}: {exc}") from None
    return LabelTrack(out)


# -- binning -------------------------------------------------------------------

@dataclass
class SpikeFrames:
    """Per-step signed pixel spikes in CSR layout: step k owns entries
    ptr[k]:ptr[k+1] of rows/cols/vals (row-major order within a step)."""
    ptr: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    H: int
    W: int
    dt: float = DT
    t0_us: int = 0

    @property
    def n_steps(self):
        return len(self.ptr) - 1

    def step(self, k):
        a, b = self.ptr[k], self.ptr[k + 1]
        return self.rows[a:b], self.cols[a:b], self.vals[a:b]

    def dense(self, k):
        fr = np.zeros((self.H, self.W), np.int8)
        r, c, v = self.step(k)
        fr[r, c] = v
        return fr


def bin_events(stream: EventStream, clock_dt: float = DT, H=None, W=None,
               n_steps: int | None = None, t0_us: int = 0) -> SpikeFrames:
    """Sign of the summed polarity per pixel per dt step."""
    H = stream.H if H is None else H
    W = stream.W if W is None else W
    dt_us = int(round(clock_dt * 1e6))
    t = stream.t_us.astype(np.int64) - t0_us
    keep = t >= 0
    t = t[keep]
    step = t // dt_us
    if n_steps is None:
        n_steps = int(step[-1]) + 1 if len(step) else 0
    inside = step < n_steps
    step = step[inside]
    pix = (stream.y[keep][inside].astype(np.int64) * W + stream.x[keep][inside])
    pol = stream.polarity[keep][inside].astype(np.int64)
    key = step * (H * W) + pix
    uk, inv = np.unique(key, return_inverse=True)
    tot = np.bincount(inv, weights=pol, minlength=len(uk)) if len(uk) else np.zeros(0)
    nz = tot != 0
    uk = uk[nz]
    vals = np.sign(tot[nz]).astype(np.int8)
    st = uk // (H * W)
    pix = uk % (H * W)
    ptr = np.zeros(n_steps + 1, np.int64)
    np.add.at(ptr, st + 1, 1)
    ptr = np.cumsum(ptr)
    return SpikeFrames(ptr, (pix // W).astype(np.int64), (pix % W).astype(np.int64),
                       vals, H, W, clock_dt, t0_us)


# -- DVS simulation --------------------------------------------------------------

class DvsSimulator:
    """Per-pixel log-intensity change detector fed frame by frame."""

    def __init__(self, first_frame, C: float, t0_us: int = 0):
        if not C > 0:
            raise ValueError("DVS threshold must be positive")
        first_frame = np.asarray(first_frame, dtype=float)
        if not np.all(np.isfinite(first_frame)):
            raise ValueError("non-finite log intensity")
        self.C = C
        self.L_ref = first_frame.copy()
        self.L_prev = first_frame.copy()
        self.t_prev = int(t0_us)

    def feed(self, frame, t_us: int):
        """Events between the previous frame and this one (sorted by time)."""
        L = np.asarray(frame, dtype=float)
        if not np.all(np.isfinite(L)):
            raise ValueError("non-finite log intensity")
        diff = L - self.L_ref
        n = np.floor(np.abs(diff) / self.C + 1e-9).astype(np.int64)
        idx = np.flatnonzero(n)
        if idx.size == 0:
            self.L_prev = L
            self.t_prev = int(t_us)
            return (np.zeros(0, np.uint64),) + (np.zeros(0, np.int64),) * 3
        nn = n.ravel()[idx]
        sgn = np.sign(diff.ravel()[idx])
        rep = np.repeat(np.arange(idx.size), nn)
        k = np.arange(rep.size) - np.repeat(np.cumsum(nn) - nn, nn) + 1
        pix = idx[rep]
        lvl = self.L_ref.ravel()[pix] + k * self.C * sgn[rep]
        lp = self.L_prev.ravel()[pix]
        lc = L.ravel()[pix]
        span = lc - lp
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(span != 0, (lvl - lp) / span, 1.0)
        frac = np.clip(frac, 0.0, 1.0)
        t = self.t_prev + np.round(frac * (int(t_us) - self.t_prev)).astype(np.int64)
        order = np.argsort(t, kind="stable")
        W = L.shape[1]
        self.L_ref.ravel()[idx] += nn * self.C * sgn
        self.L_prev = L
        self.t_prev = int(t_us)
        pix = pix[order]
        return (t[order].astype(np.uint64), pix % W, pix // W,
                (sgn[rep][order] > 0).astype(np.int64))


def dvs_simulate(frames, C: float, frame_times_us=None, H=None, W=None) -> EventStream:
    """Convert a log-intensity video (iterable of H x W frames) to events.

    The first frame sets the reference level.  frame_times_us defaults to
    one frame per dt step.
    """
    chunks = []
    sim = None
    shape = None
    for k, fr in enumerate(frames):
        t = int(frame_times_us[k]) if frame_times_us is not None else int(round(k * DT * 1e6))
        if sim is None:
            sim = DvsSimulator(fr, C, t)
            shape = np.shape(fr)
            continue
        chunks.append(sim.feed(fr, t))
    if shape is None:
        return EventStream.empty(H or 0, W or 0)
    H, W = shape
    if not chunks:
        return EventStream.empty(H, W)
    t, x, y, p = (np.concatenate([c[i] for c in chunks]) for i in range(4))
    return EventStream(t, x, y, p, H, W)


# -- synthetic scenes ------------------------------------------------------------

@dataclass
class SceneSpec:
    duration_s: float = 120.0
    frame_rate: float = 200.0
    height: int = 130
    width: int = 173
    texture_amplitude: float = 0.15
    texture_scale: float = 8.0
    target_height: float = 36.0
    target_width: float = 14.0
    target_contrast: float = -1.0
    target_speed: float = 25.0
    gait_frequency: float = 1.8
    heading_noise: float = 0.4
    gap_min_s: float = 2.0
    gap_max_s: float = 6.0
    jitter_amplitude: float = 0.5
    jitter_frequency: float = 1.0
    dvs_threshold: float = 0.2
    shot_noise_rate: float = 0.05
    label_period_s: float = 0.1
    min_visible: float = 0.5
    target_present: bool = True
    static_target: bool = False

    def __post_init__(self):
        if not self.dvs_threshold > 0:
            raise ValueError("dvs_threshold must be positive")
        if not self.duration_s > 0 or not self.frame_rate > 0:
            raise ValueError("duration_s and frame_rate must be positive")

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _parse_value(kind, raw):
    if kind in (bool, "bool"):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def parse_key_values(text: str, source="<text>"):
    out = {}
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}: line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = (v.strip(), lineno)
    return out


def parse_scene_spec(text: str, source="<text>") -> SceneSpec:
    kinds = {f.name: f.type for f in fields(SceneSpec)}
    vals = {}
    for k, (raw, lineno) in parse_key_values(text, source).items():
        if k not in kinds:
            raise ValueError(f"{source}: line {lineno}: unknown key {k!r}")
        try:
            vals[k] = _parse_value(kinds[k], raw)
        except ValueError as exc:
            raise ValueError(f"{source}: line {lineno}: {exc}") from None
    return SceneSpec(**vals)


def pixel_box_to_map(box_px, geom: ConvGeometry):
    """Pixel box (col0, row0, col1, row1) -> normalised output-map box.

    A pixel maps to the output cell whose receptive field is centred on it;
    cell coordinates are then divided by (D - 1) and clipped to [0, 1].
    """
    c0, r0, c1, r1 = box_px
    cy = (geom.l_y - 1) / 2.0
    cx = (geom.l_x - 1) / 2.0
    ny = max(geom.D_y - 1, 1)
    nx = max(geom.D_x - 1, 1)
    bx1 = (c0 - cy) / geom.d / ny
    bx2 = (c1 - cy) / geom.d / ny
    by1 = (r0 - cx) / geom.d / nx
    by2 = (r1 - cx) / geom.d / nx
    return tuple(float(np.clip(v, 0.0, 1.0)) for v in (bx1, by1, bx2, by2))


def map_box_to_pixels(box, geom: ConvGeometry):
    """Inverse of pixel_box_to_map (exact away from the clip)."""
    bx1, by1, bx2, by2 = box
    cy = (geom.l_y - 1) / 2.0
    cx = (geom.l_x - 1) / 2.0
    ny = max(geom.D_y - 1, 1)
    nx = max(geom.D_x - 1, 1)
    return (bx1 * ny * geom.d + cy, by1 * nx * geom.d + cx,
            bx2 * ny * geom.d + cy, by2 * nx * geom.d + cx)


def _soft_target(rr, cc, r0, c0, h, w, phase):
    """Coverage in [0, 1] of a walking blob (head, body, two legs)."""
    def capsule(ar, ac, br, bc, rad):
        vr, vc = br - ar, bc - ac
        L2 = vr * vr + vc * vc
        t = np.clip(((rr - ar) * vr + (cc - ac) * vc) / L2, 0.0, 1.0)
        return np.hypot(rr - ar - t * vr, cc - ac - t * vc) - rad

    top = r0 - h / 2.0
    head_r = 0.12 * h
    head = np.hypot(rr - (top + head_r), cc - c0) - head_r
    body = capsule(top + 2.2 * head_r, c0, r0 + 0.05 * h, c0, 0.5 * w)
    swing = 0.35 * w * math.sin(phase)
    hip = r0 + 0.05 * h
    foot = r0 + h / 2.0 - 0.04 * w
    leg_a = capsule(hip, c0 - 0.2 * w, foot, c0 - 0.2 * w + swing, 0.18 * w)
    leg_b = capsule(hip, c0 + 0.2 * w, foot, c0 + 0.2 * w - swing, 0.18 * w)
    sd = np.minimum(np.minimum(head, body), np.minimum(leg_a, leg_b))
    return np.clip(0.5 - sd, 0.0, 1.0)


def _plan_trajectory(spec: SceneSpec, n_frames: int, rng):
    """Frames at which the target is on screen, with positions.

    The target enters from a random side, walks with a slowly wandering
    heading until it has left the frame, then stays away for a random gap.
    """
    pos = np.full((n_frames, 2), np.nan)
    if not spec.target_present:
        return pos
    H, W = spec.height, spec.width
    h, w = spec.target_height, spec.target_width
    fdt = 1.0 / spec.frame_rate
    if spec.static_target:
        pos[:] = (H / 2.0, W / 2.0)
        return pos
    k = int(rng.uniform(0.0, 1.0) * spec.frame_rate)
    while k < n_frames:
        from_left = rng.random() < 0.5
        r = rng.uniform(0.3 * H, 0.7 * H)
        c = -w if from_left else W + w
        theta = 0.0 if from_left else math.pi
        base = theta
        while k < n_frames:
            pos[k] = (r, c)
            theta += spec.heading_noise * math.sqrt(fdt) * rng.normal()
            theta = base + float(np.clip(theta - base, -0.6, 0.6))
            c += spec.target_speed * fdt * math.cos(theta)
            r += spec.target_speed * fdt * math.sin(theta)
            if r < h / 2.0 or r > H - h / 2.0:
                theta = 2 * base - theta
                r = float(np.clip(r, h / 2.0, H - h / 2.0))
            k += 1
            if (from_left and c > W + w) or (not from_left and c < -w):
                break
        k += int(rng.uniform(spec.gap_min_s, spec.gap_max_s) * spec.frame_rate)
    return pos


def _texture(spec: SceneSpec, pad: int, rng):
    H, W = spec.height + 2 * pad, spec.width + 2 * pad
    tex = gaussian_filter(rng.normal(size=(H, W)), spec.texture_scale, mode="wrap")
    tex *= spec.texture_amplitude / (tex.std() + 1e-12)
    return tex


def render_scene(spec: SceneSpec, seed: int):
    """Yield (frame_index, log_intensity, target_box_px or None, visible_fraction)."""
    rng = np.random.default_rng(seed)
    n_frames = int(round(spec.duration_s * spec.frame_rate)) + 1
    pad = int(math.ceil(2 * spec.jitter_amplitude)) + 2
    tex = _texture(spec, pad, rng)
    jit_phase = rng.uniform(0, 2 * math.pi, size=4)
    jit_f = spec.jitter_frequency * np.array([1.0, 1.618, 0.77, 1.31])
    traj = _plan_trajectory(spec, n_frames, rng)
    gait_phase0 = rng.uniform(0, 2 * math.pi)
    H, W = spec.height, spec.width
    h, w = spec.target_height, spec.target_width
    rr_all, cc_all = np.mgrid[0:H, 0:W].astype(float)
    full_area = None
    for k in range(n_frames):
        t = k / spec.frame_rate
        dy = spec.jitter_amplitude * 0.5 * (math.sin(2 * math.pi * jit_f[0] * t + jit_phase[0])
                                             + math.sin(2 * math.pi * jit_f[1] * t + jit_phase[1]))
        dx = spec.jitter_amplitude * 0.5 * (math.sin(2 * math.pi * jit_f[2] * t + jit_phase[2])
                                             + math.sin(2 * math.pi * jit_f[3] * t + jit_phase[3]))
        oy, ox = pad + dy, pad + dx
        iy, ix = int(math.floor(oy)), int(math.floor(ox))
        fy, fx = oy - iy, ox - ix
        a = tex[iy:iy + H, ix:ix + W]
        b = tex[iy:iy + H, ix + 1:ix + 1 + W]
        c = tex[iy + 1:iy + 1 + H, ix:ix + W]
        d = tex[iy + 1:iy + 1 + H, ix + 1:ix + 1 + W]
        frame = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
        box = None
        vis = 0.0
        if not np.isnan(traj[k, 0]):
            r0, c0 = traj[k]
            phase = gait_phase0 + 2 * math.pi * spec.gait_frequency * t
            if spec.static_target:
                phase = gait_phase0
            ra0 = int(max(0, math.floor(r0 - h / 2 - 2)))
            ra1 = int(min(H, math.ceil(r0 + h / 2 + 2)))
            ca0 = int(max(0, math.floor(c0 - w - 2)))
            ca1 = int(min(W, math.ceil(c0 + w + 2)))
            if full_area is None:
                gr, gc = np.mgrid[0:int(h) + 8, 0:int(2 * w) + 8].astype(float)
                full_area = _soft_target(gr, gc, h / 2 + 4, w + 4, h, w, 0.0).sum()
            if ra1 > ra0 and ca1 > ca0:
                cov = _soft_target(rr_all[ra0:ra1, ca0:ca1], cc_all[ra0:ra1, ca0:ca1],
                                   r0, c0, h, w, phase)
                frame[ra0:ra1, ca0:ca1] += spec.target_contrast * cov
                vis = float(cov.sum() / full_area)
                on = np.argwhere(cov > 0.5)
                if vis >= spec.min_visible and on.size:
                    box = (ca0 + on[:, 1].min(), ra0 + on[:, 0].min(),
                           ca0 + on[:, 1].max(), ra0 + on[:, 0].max())
        yield k, frame, box, vis


def synth_scene(spec: SceneSpec, seed: int, geom: ConvGeometry | None = None):
    """Render a labelled synthetic sequence: (EventStream, LabelTrack).

    Labels are emitted every label_period_s and carry the target box at the
    middle of the period, converted to output-map coordinates.
    """
    if geom is None:
        geom = ConvGeometry(H=spec.height, W=spec.width)
    rng = np.random.default_rng([seed, 1])
    frame_us = 1e6 / spec.frame_rate
    sim = None
    chunks = []
    boxes = {}
    for k, frame, box, _ in render_scene(spec, seed):
        t_us = int(round(k * frame_us))
        boxes[k] = box
        if sim is None:
            sim = DvsSimulator(frame, spec.dvs_threshold, t_us)
            continue
        chunks.append(sim.feed(frame, t_us))
    t, x, y, p = (np.concatenate([c[i] for c in chunks]) if chunks else np.zeros(0, np.int64)
                  for i in range(4))
    t = t.astype(np.int64)
    total_us = int(round(spec.duration_s * 1e6))
    if spec.shot_noise_rate > 0:
        n_noise = rng.poisson(spec.shot_noise_rate * spec.height * spec.width * spec.duration_s)
        nt = np.sort(rng.integers(0, total_us, n_noise))
        nx = rng.integers(0, spec.width, n_noise)
        ny = rng.integers(0, spec.height, n_noise)
        npol = rng.integers(0, 2, n_noise)
        t = np.concatenate([t, nt])
        x = np.concatenate([x, nx])
        y = np.concatenate([y, ny])
        p = np.concatenate([p, npol])
        order = np.argsort(t, kind="stable")
        t, x, y, p = t[order], x[order], y[order], p[order]
    keep = t < total_us
    stream = EventStream(t[keep], x[keep], y[keep], p[keep], spec.height, spec.width)
    # labels
    period_us = int(round(spec.label_period_s * 1e6))
    intervals = []
    n_frames = len(boxes)
    for t0 in range(0, total_us, period_us):
        t1 = min(t0 + period_us, total_us)
        mid = int(round((t0 + t1) / 2 / frame_us))
        box = boxes.get(min(mid, n_frames - 1))
        mbox = None
        if box is not None:
            mbox = tuple(round(v, 6) for v in pixel_box_to_map(box, geom))
            if not (mbox[0] < mbox[2] and mbox[1] < mbox[3]):
                mbox = None
        intervals.append(LabelInterval(t0, t1, mbox))
    if not spec.target_present:
        intervals = [LabelInterval(0, total_us, None)]
    return stream, LabelTrack(intervals)

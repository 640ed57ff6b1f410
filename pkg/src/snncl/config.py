"""Flat key=value run configuration with every default resolved.

Each field's metadata carries a help string; ``describe()`` renders them
for ``--help``.
"""

from __future__ import annotations

from dataclasses import MISSING, asdict, dataclass, field, fields

from .conv import ConvGeometry
from .dlbp import DlbpHyper
from .plasticity import StdpParams


def _f(default, doc):
    return field(default=default, metadata={"doc": doc})


@dataclass
class ClConfig:
    # geometry
    height: int = _f(130, "input rows H")
    width: int = _f(173, "input columns W")
    l_x: int = _f(30, "receptive field rows")
    l_y: int = _f(30, "receptive field columns")
    stride: int = _f(5, "convolution stride d")
    M: int = _f(64, "coding neurons per location")
    r_x: int = _f(12, "readout kernel rows")
    r_y: int = _f(12, "readout kernel columns")
    n_s: int = _f(20, "rate window length in steps")
    # SNN and STDP
    dt: float = _f(0.005, "simulation step in seconds")
    tau_m: float = _f(0.07, "membrane time constant")
    tau_s: float = _f(0.01, "synaptic time constant")
    mu: float = _f(0.15, "firing threshold, also the l1 weight")
    eta1: float = _f(0.07, "lateral weight scale")
    eta2: float = _f(0.05, "STDP learning rate")
    lambda2: float = _f(0.002, "dictionary weight decay")
    A_plus: float = _f(1.0, "STDP potentiation amplitude")
    A_minus: float = _f(0.8, "STDP depression amplitude")
    tau_plus: float = _f(0.02, "STDP potentiation time constant")
    tau_minus: float = _f(0.008, "STDP depression time constant")
    sigma_w: float = _f(0.01, "std of the random initial dictionary")
    input_gain: float = _f(10.0, "current carried by one input spike")
    spike_gain: float = _f(20.0, "lateral current carried by one coding spike")
    quiescence: int = _f(40, "steps without activity before a location sleeps (0 = never)")
    # readout and optimiser
    gamma: float = _f(0.5, "focal loss focusing exponent")
    eta_r: float = _f(5e-6, "Adam learning rate for the readout")
    beta1: float = _f(0.9, "Adam first-moment decay")
    beta2: float = _f(0.999, "Adam second-moment decay")
    adam_eps: float = _f(1e-8, "Adam epsilon")
    stats_momentum: float = _f(0.99, "EMA momentum of the channel statistics")
    # continual learning
    lambda_u: float = _f(0.2, "weight of the unsupervised (negative STDP) term")
    lambda_s: float = _f(0.8, "weight of the task-driven STDP term")
    theta_th: float = _f(0.2, "loss below which the task-driven term is pruned")
    g_td: float = _f(10.0, "current gain of the task-driven spike encoder")
    td_normalize: bool = _f(True, "divide v by max|v| before encoding")
    # detection and evaluation
    dbscan_eps: float = _f(5.0, "DBSCAN radius in pixels")
    dbscan_min_pts: int = _f(2, "DBSCAN minimum points")
    d_step: float = _f(0.02, "threshold grid step of the PR sweep")
    seed: int = _f(0, "seed for dictionary initialisation")

    def __post_init__(self):
        if self.lambda_u < 0 or self.lambda_s < 0:
            raise ValueError("lambda_u and lambda_s must be non-negative")
        if self.theta_th < 0:
            raise ValueError("theta_th must be non-negative")
        if self.n_s < 1:
            raise ValueError("n_s must be positive")

    # -- derived objects ----------------------------------------------------
    def geometry(self) -> ConvGeometry:
        return ConvGeometry(self.height, self.width, self.l_x, self.l_y, self.stride, self.M)

    def stdp(self) -> StdpParams:
        return StdpParams(self.A_plus, self.A_minus, self.tau_plus, self.tau_minus, self.eta2)

    def hyper(self, mode="unsupervised-negative") -> DlbpHyper:
        return DlbpHyper(eta1=self.eta1, eta2=self.eta2, lambda2=self.lambda2, mu=self.mu,
                         tau_m=self.tau_m, tau_s=self.tau_s, dt=self.dt, mode=mode,
                         input_gain=self.input_gain, spike_gain=self.spike_gain,
                         learn_scale=self.lambda_u,
                         gram_learning=self.lambda_u > 0 or self.lambda_s > 0,
                         stdp=self.stdp())

    # -- text form ------------------------------------------------------------
    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={_fmt(v)}\n")
        return "".join(out)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_text(cls, text: str, source="<config>"):
        from .events import parse_key_values

        kinds = {f.name: f.type for f in fields(cls)}
        vals = {}
        for k, (raw, lineno) in parse_key_values(text, source).items():
            if k not in kinds:
                raise ValueError(f"{source}: line {lineno}: unknown key {k!r}")
            try:
                vals[k] = _parse(kinds[k], raw)
            except ValueError as exc:
                raise ValueError(f"{source}: line {lineno}: {k}: {exc}") from None
        return cls(**vals)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read(), str(path))


RunConfig = ClConfig


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _parse(kind, raw):
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def describe() -> str:
    lines = []
    for f in fields(ClConfig):
        d = f.default if f.default is not MISSING else None
        lines.append(f"  {f.name:<15} {_fmt(d):<10} {f.metadata.get('doc', '')}")
    return "\n".join(lines)

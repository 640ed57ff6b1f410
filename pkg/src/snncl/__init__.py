"""Spiking sparse-coding network with task-driven STDP for continual
detection on event streams."""

from .config import ClConfig, RunConfig
from .continual import Model, checkpoint_load, checkpoint_save, cl_step, infer_sequence, run_sequence
from .conv import ConvGeometry, ConvSnn, tensor_dims
from .dlbp import DlbpHyper, Dictionary, LateralGram, ista_oracle
from .events import EventStream, LabelInterval, LabelTrack, SceneSpec, synth_scene
from .plasticity import StdpParams, stdp_delta

__all__ = [
    "ClConfig", "RunConfig", "Model", "checkpoint_load", "checkpoint_save", "cl_step",
    "infer_sequence", "run_sequence", "ConvGeometry", "ConvSnn", "tensor_dims", "DlbpHyper",
    "Dictionary", "LateralGram", "ista_oracle", "EventStream", "LabelInterval", "LabelTrack",
    "SceneSpec", "synth_scene", "StdpParams", "stdp_delta",
]

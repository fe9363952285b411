"""Desk-scale simulator and profiler for hardware-constrained spiking object detectors."""
from .detect import Detection, GroundTruth, HeadConfig, decode, eval_detections, head_channels, iou, nms
from .events import EventWindow, encode_histogram, encode_voxel, normalize_frame, parse_events, serialize_events
from .network import NetworkSpec, count_neurons, count_params, load_spec, reference_config
from .profiler import PowerProfile, ProfileReport, TimingProfile, build_report
from .runtime import RunConfig, Simulator, infer, infer_stream, lif_step, record_trace
from .validate import validate_spec

__version__ = "0.1.0"

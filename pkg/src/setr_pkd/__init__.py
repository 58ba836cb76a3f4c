"""Early seizure detection from optical flow with progressive knowledge distillation."""

from .distill import DistillConfig, SegmentSpec, kd_losses, run_direct_kd, run_pkd_chain, split_prefix, train_stage
from .features import SampleRecord, extract_spatial_features, sample_frames
from .flow import FlowField, Frame, TvL1Params, tv_l1_flow
from .model import SetrConfig, SetrModel, setr_forward

__all__ = [
    "DistillConfig",
    "FlowField",
    "Frame",
    "SampleRecord",
    "SegmentSpec",
    "SetrConfig",
    "SetrModel",
    "TvL1Params",
    "extract_spatial_features",
    "kd_losses",
    "run_direct_kd",
    "run_pkd_chain",
    "sample_frames",
    "setr_forward",
    "split_prefix",
    "train_stage",
    "tv_l1_flow",
]
